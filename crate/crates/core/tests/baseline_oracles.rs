//! Baseline optimizers against hand-rolled scalar references.

use mnemosyne::baselines::{
    adam_step, rmsprop_step, AdamConfig, AdamState, Baseline, BaselineKind,
    CachedAttentionOptimizer, CachedAttentionWeights, RmsPropConfig,
};
use mnemosyne::cam::ExactKernelMemory;
use mnemosyne::lopt::{LearnedOptimizer, LoptConfig};
use mnemosyne::{ParamTree, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tree(v: &[f64]) -> ParamTree {
    let mut t = ParamTree::new();
    t.insert("a", Tensor::vector(v[..2].to_vec()));
    t.insert(
        "b",
        Tensor::matrix(1, v.len() - 2, v[2..].to_vec()).unwrap(),
    );
    t
}

fn grad_stream(seed: u64, steps: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..steps)
        .map(|_| (0..5).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect()
}

#[test]
fn adam_matches_reference() {
    let gs = grad_stream(1, 10);
    let mut st = AdamState::new(&tree(&gs[0]));
    let cfg = AdamConfig::new(3e-2);
    let (mut m, mut v) = ([0.0f64; 5], [0.0f64; 5]);
    for (t, g) in gs.iter().enumerate() {
        let got = adam_step(&mut st, &tree(g), &cfg).unwrap().flatten();
        let step = (t + 1) as f64;
        for i in 0..5 {
            m[i] = 0.9 * m[i] + 0.1 * g[i];
            v[i] = 0.999 * v[i] + 0.001 * g[i].powi(2);
            let mh = m[i] / (1.0 - 0.9f64.powf(step));
            let vh = v[i] / (1.0 - 0.999f64.powf(step));
            let want = -3e-2 * mh / (vh.sqrt() + 1e-8);
            assert!((got[i] - want).abs() < 1e-12, "step {t} coord {i}");
        }
    }
}

#[test]
fn rmsprop_and_sgd_match_reference() {
    let gs = grad_stream(2, 10);
    let mut acc = tree(&gs[0]).zeros_like();
    let cfg = RmsPropConfig::new(1e-2);
    let mut v = [0.0f64; 5];
    let mut sgd = Baseline::new(BaselineKind::Sgd, 0.5, &tree(&gs[0]));
    for g in &gs {
        let got = rmsprop_step(&mut acc, &tree(g), &cfg).unwrap().flatten();
        let s = sgd.step(&tree(g)).unwrap().flatten();
        for i in 0..5 {
            v[i] = 0.9 * v[i] + 0.1 * g[i] * g[i];
            assert!((got[i] + 1e-2 * g[i] / (v[i].sqrt() + 1e-8)).abs() < 1e-12);
            assert!((s[i] + 0.5 * g[i]).abs() < 1e-15);
        }
    }
}

#[test]
fn sign_flip_flips_updates() {
    for kind in [BaselineKind::Adam, BaselineKind::RmsProp, BaselineKind::Sgd] {
        let gs = grad_stream(3, 6);
        let mut a = Baseline::new(kind, 1e-2, &tree(&gs[0]));
        let mut b = a.clone();
        for g in &gs {
            let neg: Vec<f64> = g.iter().map(|x| -x).collect();
            let ua = a.step(&tree(g)).unwrap().flatten();
            let ub = b.step(&tree(&neg)).unwrap().flatten();
            for (x, y) in ua.iter().zip(&ub) {
                assert_eq!(*x, -*y, "{}", kind.name());
            }
        }
    }
}

#[test]
fn state_round_trip_continues_trajectory() {
    for kind in [BaselineKind::Adam, BaselineKind::RmsProp, BaselineKind::Sgd] {
        let gs = grad_stream(4, 8);
        let mut a = Baseline::new(kind, 1e-2, &tree(&gs[0]));
        for g in &gs[..4] {
            a.step(&tree(g)).unwrap();
        }
        let saved: ParamTree = a.state_sections().into_iter().collect();
        let mut b = Baseline::new(kind, 1e-2, &tree(&gs[0]));
        b.load_state(&saved).unwrap();
        assert_eq!(a, b);
        for g in &gs[4..] {
            assert_eq!(a.step(&tree(g)).unwrap(), b.step(&tree(g)).unwrap());
        }
    }
}

fn attention_weights() -> CachedAttentionWeights {
    let opt = LearnedOptimizer::init(&LoptConfig::default(), 5).unwrap();
    CachedAttentionWeights::from_tree(opt.trainable(), "cw/").unwrap()
}

fn tokens(seed: u64, n: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..16).map(|_| rng.random_range(-0.5..0.5)).collect())
        .collect()
}

fn mat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (r, c) = w.dims2();
    (0..c)
        .map(|j| (0..r).map(|i| x[i] * w.data()[i * c + j]).sum())
        .collect()
}

#[test]
fn cache_of_one_sees_only_current_token() {
    let w = attention_weights();
    let mut opt = CachedAttentionOptimizer::new(w.clone(), 1, 1).unwrap();
    for xi in tokens(6, 5) {
        let out = opt.attend(0, &xi);
        let v = mat(&xi, &w.w_v);
        for j in 0..16 {
            assert!((out[j] - xi[j] - v[j]).abs() < 1e-14);
        }
        assert_eq!(opt.cache_len(0), 1);
    }
}

#[test]
fn cache_evicts_oldest_first() {
    let w = attention_weights();
    let mut opt = CachedAttentionOptimizer::new(w.clone(), 3, 1).unwrap();
    let xs = tokens(7, 6);
    let mut got = Vec::new();
    for xi in &xs {
        got = opt.attend(0, xi);
    }
    assert_eq!(opt.cache_len(0), 3);
    let mut mem = ExactKernelMemory::new(0.0);
    for xi in &xs[3..] {
        mem.update(&mat(xi, &w.w_k), &mat(xi, &w.w_v));
    }
    let want = mem.read(&mat(&xs[5], &w.w_q)).unwrap();
    for j in 0..16 {
        assert!((got[j] - xs[5][j] - want[j]).abs() < 1e-12);
    }
}

#[test]
fn unfilled_cache_equals_exact_kernel_memory() {
    let w = attention_weights();
    for h in [10, 50, 100] {
        let mut opt = CachedAttentionOptimizer::new(w.clone(), h, 1).unwrap();
        let mut mem = ExactKernelMemory::new(0.0);
        for xi in tokens(h as u64, h) {
            let got = opt.attend(0, &xi);
            mem.update(&mat(&xi, &w.w_k), &mat(&xi, &w.w_v));
            let want = mem.read(&mat(&xi, &w.w_q)).unwrap();
            for j in 0..16 {
                assert!((got[j] - xi[j] - want[j]).abs() < 1e-8);
            }
        }
    }
}

#[test]
fn cached_optimizer_step_shapes() {
    let mut opt = CachedAttentionOptimizer::new(attention_weights(), 10, 3).unwrap();
    let u = opt.step(&[0.1, -0.2, 0.0], 10.0).unwrap();
    assert_eq!(u.len(), 3);
    assert!(u.iter().all(|x| x.is_finite()));
    assert!(opt.step(&[0.1], 10.0).is_err());
    assert_eq!(opt.state_floats(), 3 * 32);
}
