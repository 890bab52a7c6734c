//! Empirical sign of the compact-energy change under single flips, inside
//! the storage theorem's hypotheses.
//!
//! cargo run --release --example sign_check -- [dim] [configurations] [draws] [features]

use mnemosyne::memlab::{
    check_storage_hypothesis, log_capacity_bound, theorem1_sign_check, SignCheckParams,
};

fn main() -> mnemosyne::Result<()> {
    let mut args = std::env::args().skip(1);
    let mut next = |d: usize| args.next().and_then(|s| s.parse().ok()).unwrap_or(d);
    let (dim, configurations, draws, features) = (next(16), next(20), next(100), next(1024));
    let (tau, rho) = (1.0, 0.125);
    check_storage_hypothesis(dim, 2, tau, rho)?;
    println!(
        "log capacity bound at N={dim}: {:.3}",
        log_capacity_bound(dim, tau, rho)
    );
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let row = theorem1_sign_check(
        &SignCheckParams {
            dim,
            patterns: 2,
            tau_sep: tau,
            rho,
            draws,
            features,
            configurations,
            rf_rho: None,
            seed: 0,
        },
        threads,
    )?;
    println!("{row:#?}");
    Ok(())
}
