//! Closed-form variance of the random-feature energy change against Monte Carlo.
//!
//! Usage: `variance_check [draws] [features] [seed]`

use mnemosyne::memlab::variance_experiment;

fn main() -> mnemosyne::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: u64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let (draws, features, seed) = (arg(0, 100_000) as usize, arg(1, 1) as usize, arg(2, 0));
    for m in [1, 2] {
        let row = variance_experiment(4, m, 0.95, features, draws, seed)?;
        println!(
            "M={m} closed form {:.6e} (as printed {:.6e})  monte carlo {:.6e}  ratio {:.4}",
            row.closed_form, row.closed_form_as_printed, row.monte_carlo, row.variance_ratio
        );
    }
    Ok(())
}
