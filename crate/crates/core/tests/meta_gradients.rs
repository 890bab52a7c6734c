//! Meta-gradient checks: finite differences, truncation and the on-policy expert.

use mnemosyne::baselines::{adam_step, AdamConfig};
use mnemosyne::lopt::{LearnedOptimizer, LoptConfig};
use mnemosyne::meta::{
    imitation_mse, iteration_problem, meta_train, run_segment, segment_gradient, MetaState,
    MetaTrainConfig, Problem, Rollout, Scaling,
};
use mnemosyne::optimizee::{Architecture, OptimizeeSpec, TaskSpec};
use mnemosyne::tasks::TaskKind;
use mnemosyne::{ParamTree, Tape, VarTree};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn quadratic_problem(dim: usize, seed: u64) -> (Problem, ParamTree) {
    let spec = OptimizeeSpec {
        architecture: Architecture::Quadratic { dim },
        task: TaskSpec {
            kind: TaskKind::Quadratic,
            dim,
            shape: 0.0,
            noise: 0.0,
            size: 0,
            seed,
        },
        batch_size: 1,
    };
    let optimizee = spec.build().unwrap();
    let x0 = optimizee.init_params(seed + 1);
    let problem = Problem {
        scaling: Scaling::identity(&x0),
        optimizee,
        data_seed: 0,
    };
    (problem, x0)
}

fn meta_loss_at(
    opt: &LearnedOptimizer,
    problem: &Problem,
    rollout: &Rollout,
    steps: usize,
    alpha: f64,
) -> f64 {
    let tape = Tape::new();
    let weights = opt.weight_vars(&tape, false);
    let mut r = rollout.clone();
    run_segment(opt, &weights, problem, &mut r, steps, 3e-2, alpha)
        .unwrap()
        .meta_loss
        .item()
}

fn with_entry(opt: &LearnedOptimizer, name: &str, i: usize, value: f64) -> LearnedOptimizer {
    let mut o = opt.clone();
    let mut t = o.trainable().clone();
    t.get_mut(name).unwrap().data_mut()[i] = value;
    o.set_trainable(t).unwrap();
    o
}

#[test]
fn one_step_meta_gradient_matches_finite_differences() {
    let (problem, x0) = quadratic_problem(6, 3);
    let opt = LearnedOptimizer::init(&LoptConfig::default(), 11).unwrap();
    // a few steps in so the memory is not at its initial state
    let mut rollout = Rollout::new(&opt, x0).unwrap();
    segment_gradient(&opt, &problem, &mut rollout, 3, 3e-2, 1.0).unwrap();

    let (_, grads, _, _) =
        segment_gradient(&opt, &problem, &mut rollout.clone(), 1, 3e-2, 1.0).unwrap();
    let names: Vec<String> = opt.trainable().names().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let name = &names[rng.random_range(0..names.len())];
        let n = opt.trainable().get(name).unwrap().numel();
        let i = rng.random_range(0..n);
        let w = opt.trainable().get(name).unwrap().data()[i];
        let up = meta_loss_at(
            &with_entry(&opt, name, i, w + h),
            &problem,
            &rollout,
            1,
            1.0,
        );
        let down = meta_loss_at(
            &with_entry(&opt, name, i, w - h),
            &problem,
            &rollout,
            1,
            1.0,
        );
        let fd = (up - down) / (2.0 * h);
        let an = grads.get(name).unwrap().data()[i];
        let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        worst = worst.max(err);
        assert!(err < 1e-3, "{name}[{i}]: analytic {an:e} vs fd {fd:e}");
    }
    assert!(worst.is_finite());
}

/// The same five steps written out by hand on one tape.
fn hand_unrolled(
    opt: &LearnedOptimizer,
    problem: &Problem,
    rollout: &Rollout,
    steps: usize,
    alpha: f64,
) -> (f64, ParamTree) {
    let tape = Tape::new();
    let weights = opt.weight_vars(&tape, true);
    let mut memory = rollout.memory.to_vars(&tape);
    let mut expert = rollout.expert.clone();
    let mut x: VarTree = rollout.x.to_vars(&tape, false);
    let mut total = tape.scalar(0.0);
    for t in 0..steps {
        let batch = problem.batch(rollout.step + t);
        let (_, g) = problem.loss_and_grad(&x.values(), batch.as_ref()).unwrap();
        let delta = opt.step_var(&weights, &mut memory, &g).unwrap();
        let target = adam_step(&mut expert, &g, &AdamConfig::new(3e-2)).unwrap();
        let imit = imitation_mse(&delta, &target).unwrap();
        let mut next = VarTree::new();
        for (k, v) in x.iter() {
            next.insert(k.clone(), v.add(delta.get(k).unwrap()).unwrap());
        }
        x = next;
        let nb = problem.batch(rollout.step + t + 1);
        let f = problem.loss_var(&x, nb.as_ref()).unwrap();
        total = total.add(f.add(imit.scale(alpha)).unwrap()).unwrap();
    }
    let g = tape.backward(total).unwrap();
    let grads = opt
        .trainable()
        .names()
        .map(|k| (k.clone(), g.wrt(weights.get(k).unwrap())))
        .collect();
    (total.item(), grads)
}

#[test]
fn truncated_segment_equals_hand_unrolled_tape() {
    let cfg = MetaTrainConfig::default();
    let (problem, x0, _) = iteration_problem(&cfg, 4).unwrap();
    let opt = LearnedOptimizer::init(&LoptConfig::default(), 2).unwrap();
    let mut rollout = Rollout::new(&opt, x0).unwrap();
    // first segment, then the second starts from detached state
    segment_gradient(&opt, &problem, &mut rollout, 5, 3e-2, 1.0).unwrap();
    let (want_loss, want) = hand_unrolled(&opt, &problem, &rollout, 5, 1.0);
    let (loss, got, _, _) = segment_gradient(&opt, &problem, &mut rollout, 5, 3e-2, 1.0).unwrap();
    assert!((loss - want_loss).abs() <= 1e-12 * want_loss.abs().max(1.0));
    for (k, w) in want.iter() {
        let d = got.get(k).unwrap().max_abs_diff(w);
        assert!(
            d <= 1e-10 * (1.0 + w.data().iter().fold(0.0f64, |a, b| a.max(b.abs()))),
            "{k}: {d:e}"
        );
    }
    assert_eq!(rollout.step, 10);
}

#[test]
fn expert_follows_the_learned_trajectory() {
    let (problem, x0) = quadratic_problem(5, 8);
    let a = LearnedOptimizer::init(&LoptConfig::default(), 1).unwrap();
    let mut b = a.clone();
    b.set_trainable(a.trainable().map(|t| t.map(|v| v * 1.5)))
        .unwrap();

    let mut ra = Rollout::new(&a, x0.clone()).unwrap();
    let mut rb = Rollout::new(&b, x0.clone()).unwrap();
    segment_gradient(&a, &problem, &mut ra, 4, 3e-2, 1.0).unwrap();
    segment_gradient(&b, &problem, &mut rb, 4, 3e-2, 1.0).unwrap();
    // same start, different iterates, so the expert saw different gradients
    assert_ne!(ra.expert, rb.expert);

    // replay: Adam fed the gradients at the learned optimizer's own iterates
    let mut replay = Rollout::new(&a, x0).unwrap();
    let mut expert = replay.expert.clone();
    for _ in 0..4 {
        let (_, g) = problem.loss_and_grad(&replay.x, None).unwrap();
        adam_step(&mut expert, &g, &AdamConfig::new(3e-2)).unwrap();
        segment_gradient(&a, &problem, &mut replay, 1, 3e-2, 1.0).unwrap();
    }
    for (k, m) in expert.m.iter() {
        assert!(ra.expert.m.get(k).unwrap().max_abs_diff(m) < 1e-12);
    }
}

#[test]
fn meta_training_is_reproducible() {
    let cfg = MetaTrainConfig {
        iterations: 3,
        horizon: 10,
        truncation: 5,
        seed: 21,
        ..MetaTrainConfig::default()
    };
    let run = || {
        let mut opt = LearnedOptimizer::init(&LoptConfig::default(), 4).unwrap();
        let mut state = MetaState::new(&opt);
        let mut records = Vec::new();
        meta_train(&mut opt, &cfg, &mut state, |r| {
            records.push(r.clone());
            Ok(())
        })
        .unwrap();
        (opt.trainable().hash(), records)
    };
    let (h1, r1) = run();
    let (h2, r2) = run();
    assert_eq!(h1, h2);
    assert_eq!(r1, r2);
}

#[test]
fn split_training_equals_one_run() {
    let base = MetaTrainConfig {
        iterations: 4,
        horizon: 10,
        truncation: 5,
        seed: 3,
        ..MetaTrainConfig::default()
    };
    let mut whole = LearnedOptimizer::init(&LoptConfig::default(), 9).unwrap();
    let mut st = MetaState::new(&whole);
    meta_train(&mut whole, &base, &mut st, |_| Ok(())).unwrap();

    let mut split = LearnedOptimizer::init(&LoptConfig::default(), 9).unwrap();
    let mut st2 = MetaState::new(&split);
    let first = MetaTrainConfig {
        iterations: 2,
        ..base.clone()
    };
    meta_train(&mut split, &first, &mut st2, |_| Ok(())).unwrap();
    meta_train(&mut split, &base, &mut st2, |_| Ok(())).unwrap();
    assert_eq!(whole.trainable().hash(), split.trainable().hash());
    assert_eq!(st, st2);
}
