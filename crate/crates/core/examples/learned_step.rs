//! One untrained learned optimizer applied in each mode to a small network's
//! gradients, with the super-mode routing and the memory it keeps.
//!
//! cargo run --release --example learned_step

use mnemosyne::lopt::{apply_updates, LearnedOptimizer, LoptConfig, Mode};
use mnemosyne::{ParamTree, Tensor};

fn main() -> mnemosyne::Result<()> {
    let mut params = ParamTree::new();
    params.insert(
        "layer0/w",
        Tensor::from_fn(&[64, 96], |i| ((i * 7919) % 97) as f64 / 97.0 - 0.5),
    );
    params.insert("layer0/b", Tensor::zeros(&[96]));
    params.insert(
        "head/w",
        Tensor::from_fn(&[96, 3], |i| (i as f64).sin() * 0.1),
    );
    let grads = params.map(|t| t.map(|v| 0.3 * v + 0.01));

    for mode in [Mode::Coordinate, Mode::Tensor, Mode::Super] {
        let cfg = LoptConfig {
            mode,
            super_threshold: 1000,
            ..LoptConfig::default()
        };
        let opt = LearnedOptimizer::init(&cfg, 1)?;
        let mut memory = opt.init_memory(&params)?;
        let mut x = params.clone();
        for _ in 0..3 {
            let u = opt.step(&mut memory, &grads)?;
            x = apply_updates(&x, &u)?;
        }
        let moved: f64 = x
            .flatten()
            .iter()
            .zip(params.flatten())
            .map(|(a, b)| (a - b).abs())
            .sum();
        println!(
            "{:>10}: total |x - x0| after 3 steps {moved:.4e}  memory floats {}",
            mode.name(),
            memory.state_floats()
        );
        if mode == Mode::Super {
            for line in LearnedOptimizer::routing_summary(&memory) {
                println!("            {line}");
            }
        }
    }
    Ok(())
}
