//! Meta-trains a coordinate-wise optimizer, then compares it with grid-searched
//! SGD and Adam on an MLP shape it never saw.
//!
//! cargo run --release --example meta_train -- [iterations] [seed]

use std::time::Instant;

use mnemosyne::lopt::{LearnedOptimizer, LoptConfig};
use mnemosyne::meta::{compare_with_grid, meta_train, MetaState, MetaTrainConfig};
use mnemosyne::optimizee::{Activation, Architecture, OptimizeeSpec, TaskSpec};
use mnemosyne::tasks::TaskKind;

fn main() -> mnemosyne::Result<()> {
    let mut args = std::env::args().skip(1);
    let iterations = args.next().and_then(|s| s.parse().ok()).unwrap_or(20);
    let seed = args.next().and_then(|s| s.parse().ok()).unwrap_or(0);
    let cfg = MetaTrainConfig {
        iterations,
        seed,
        ..MetaTrainConfig::default()
    };
    let mut opt = LearnedOptimizer::init(&LoptConfig::default(), seed)?;
    let mut state = MetaState::new(&opt);
    let start = Instant::now();
    let mut window = Vec::new();
    meta_train(&mut opt, &cfg, &mut state, |r| {
        window.push(r.meta_loss);
        if window.len() == 25 {
            println!(
                "iter {:5}  mean meta-loss {:8.4}  {:.0}s",
                r.iteration,
                window.iter().sum::<f64>() / 25.0,
                start.elapsed().as_secs_f64()
            );
            window.clear();
        }
        Ok(())
    })?;

    for (kind, dim, shape, noise) in [
        (TaskKind::Spiral, 2, 1.0, 0.03),
        (TaskKind::TwoGaussians, 6, 2.0, 1.0),
    ] {
        let spec = OptimizeeSpec {
            architecture: Architecture::Mlp {
                hidden: vec![48, 48, 48],
                activation: Activation::Relu,
            },
            task: TaskSpec {
                kind,
                dim,
                shape,
                noise,
                size: 512,
                seed: 9_999,
            },
            batch_size: 64,
        };
        let problem = spec.build()?;
        let x0 = problem.init_params(1);
        let cmp = compare_with_grid(&opt, &problem, &x0, 100, 3)?;
        println!(
            "{:>14}: learned {:.4}  best sgd {:.4}  best adam {:.4}",
            kind.name(),
            cmp.learned,
            cmp.best_sgd(),
            cmp.best_adam()
        );
    }
    Ok(())
}
