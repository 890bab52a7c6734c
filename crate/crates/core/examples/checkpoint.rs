//! Meta-trains for a few iterations, checkpoints, resumes, and checks the
//! resumed run lands on the same weights as an uninterrupted one.
//!
//! cargo run --release --example checkpoint

use mnemosyne::harness::{self, Checkpoint, ExperimentConfig};

fn main() -> mnemosyne::Result<()> {
    let dir = std::env::temp_dir().join("mnemo-checkpoint-example");
    let mut cfg = ExperimentConfig::default();
    cfg.meta.iterations = 6;
    cfg.meta.horizon = 20;
    cfg.run.checkpoint_every = 3;

    let whole = dir.join("whole");
    harness::run_meta_train(&cfg, &whole, None, |r| {
        println!("whole   iter {} meta-loss {:.4}", r.iteration, r.meta_loss)
    })?;

    let part = dir.join("part");
    let mut first = cfg.clone();
    first.meta.iterations = 3;
    harness::run_meta_train(&first, &part, None, |r| {
        println!("part    iter {} meta-loss {:.4}", r.iteration, r.meta_loss)
    })?;
    let ck = part.join("checkpoint.mnemo");
    println!(
        "checkpoint: {} sections, rng {:?}",
        Checkpoint::load(&ck)?.sections.len(),
        Checkpoint::load(&ck)?.rng
    );
    harness::run_meta_train(&cfg, &part, Some(&ck), |r| {
        println!("resumed iter {} meta-loss {:.4}", r.iteration, r.meta_loss)
    })?;

    let a = Checkpoint::load(&whole.join("checkpoint.mnemo"))?;
    let b = Checkpoint::load(&part.join("checkpoint.mnemo"))?;
    println!(
        "identical weights after resume: {}",
        a.sections == b.sections
    );
    Ok(())
}
