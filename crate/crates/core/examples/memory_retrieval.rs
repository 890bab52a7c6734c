//! Pattern recovery from corrupted inputs with the exact and random-feature energies.
//!
//! Usage: `memory_retrieval [trials] [features] [seed]`

use mnemosyne::memlab::{retrieval_experiment, RetrievalParams};

fn main() -> mnemosyne::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: u64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let params = RetrievalParams {
        dim: 64,
        patterns: 5,
        rho: 0.1,
        tau_sep: 0.25,
        features: arg(1, 4096) as usize,
        trials: arg(0, 100) as usize,
        seed: arg(2, 0),
        rf_rho: None,
    };
    for row in retrieval_experiment(&params, 1)? {
        println!(
            "{:<8} r={:<5} success {:.3} over {} trials ({:.2}s)",
            row.mechanism, row.r, row.success_rate, row.trials, row.wall_time
        );
    }
    Ok(())
}
