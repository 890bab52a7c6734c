//! Softmax-kernel estimates from the three positive random-feature maps.
//!
//! cargo run --release --example rf_kernels -- [features] [draws]

use mnemosyne::rf::{sample_projections, Mechanism, RfSpec};

fn main() -> mnemosyne::Result<()> {
    let mut args = std::env::args().skip(1);
    let features: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(64);
    let draws: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(2000);
    let x = [0.6, -0.3, 0.8, 0.1];
    let y = [0.2, 0.5, 0.7, -0.4];
    let exact: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>().exp();
    println!("exp(x.y) = {exact:.6}");
    for m in Mechanism::ALL {
        for orthogonal in [false, true] {
            let est: Vec<f64> = (0..draws as u64)
                .map(|d| {
                    let spec = RfSpec::new(m, features, 4, d).with_orthogonal(orthogonal);
                    sample_projections(&spec)?.kernel_estimate(&x, &y)
                })
                .collect::<mnemosyne::Result<_>>()?;
            let mean = est.iter().sum::<f64>() / draws as f64;
            let var = est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
            println!(
                "{:>10} {:>10}: mean {mean:.6}  rel err {:.4}  variance {var:.3e}",
                m.name(),
                if orthogonal { "orthogonal" } else { "iid" },
                (mean - exact).abs() / exact
            );
        }
    }
    Ok(())
}
