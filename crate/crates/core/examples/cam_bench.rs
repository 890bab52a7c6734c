//! CAM read-out error and latency against exact attention, and a bounded
//! cache against the full history.
//!
//! cargo run --release --example cam_bench -- [steps]

use mnemosyne::memlab::{cache_bench, cam_bench};
use mnemosyne::rf::Mechanism;

fn main() -> mnemosyne::Result<()> {
    let steps: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(400);
    println!(
        "{:>6} {:>5} {:>10} {:>10} {:>9} {:>7}",
        "tau", "r", "mechanism", "rel err", "us/step", "floats"
    );
    for m in [Mechanism::HyperbolicCosine, Mechanism::FavorPlusPlus] {
        for row in cam_bench(&[0.0, 0.1, 1.0], &[16, 64, 256], m, 8, steps, 0)? {
            println!(
                "{:>6} {:>5} {:>10} {:>10.4} {:>9.2} {:>7}",
                row.tau, row.r, row.mechanism, row.rel_error, row.step_micros, row.state_floats
            );
        }
    }
    println!();
    println!(
        "{:>6} {:>10} {:>9} {:>7}",
        "cache", "rel err", "us/step", "floats"
    );
    for row in cache_bench(&[1, 8, 64, 512], 8, steps, 0)? {
        println!(
            "{:>6} {:>10.4} {:>9.2} {:>7}",
            row.cache_len, row.rel_error, row.step_micros, row.state_floats
        );
    }
    Ok(())
}
