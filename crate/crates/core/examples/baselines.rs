//! SGD, RMSProp and Adam over the learning-rate grid on a small MLP task.
//!
//! cargo run --release --example baselines -- [steps]

use mnemosyne::baselines::{Baseline, BaselineKind, LR_GRID};
use mnemosyne::meta::run_optimizer;
use mnemosyne::optimizee::{Activation, Architecture, OptimizeeSpec, TaskSpec};
use mnemosyne::tasks::TaskKind;

fn main() -> mnemosyne::Result<()> {
    let steps: usize = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(200);
    let spec = OptimizeeSpec {
        architecture: Architecture::Mlp {
            hidden: vec![32, 32],
            activation: Activation::Relu,
        },
        task: TaskSpec {
            kind: TaskKind::Spiral,
            dim: 2,
            shape: 1.0,
            noise: 0.03,
            size: 512,
            seed: 4,
        },
        batch_size: 64,
    };
    let problem = spec.build()?;
    let x0 = problem.init_params(0);
    println!("{:>8} {:>8} {:>12}", "kind", "lr", "final loss");
    for kind in [BaselineKind::Sgd, BaselineKind::RmsProp, BaselineKind::Adam] {
        for lr in LR_GRID {
            let mut b = Baseline::new(kind, lr, &x0);
            let curve = run_optimizer(&mut b, &problem, &x0, steps, 1)?;
            println!("{:>8} {lr:>8.0e} {:>12.4}", kind.name(), curve.final_loss);
        }
    }
    Ok(())
}
