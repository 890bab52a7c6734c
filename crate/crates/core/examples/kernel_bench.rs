//! Kernel-estimate bias and variance for every mechanism and feature count, as CSV.
//!
//! cargo run --release --example kernel_bench -- [draws] > kernels.csv

use mnemosyne::harness::write_csv;
use mnemosyne::memlab::kernel_bench;

fn main() -> mnemosyne::Result<()> {
    let draws: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(500);
    let rows = kernel_bench(4, &[4, 16, 64, 256], 10, draws, true, 0)?;
    write_csv(
        std::io::stdout(),
        &[
            "mechanism",
            "r",
            "pair_id",
            "exact",
            "mean",
            "variance",
            "rel_error",
        ],
        &rows,
        "example",
    )
}
