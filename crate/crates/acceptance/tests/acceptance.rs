//! One PASS/FAIL line per acceptance criterion; exits non-zero if any fails.

use std::collections::BTreeSet;
use std::fs;
use std::time::Instant;

use mnemosyne::baselines::{CachedAttentionOptimizer, CachedAttentionWeights};
use mnemosyne::cam::{CamConfig, CamLayer, CamState, ExactKernelMemory};
use mnemosyne::gradcheck::{max_gradient_error, op_cases};
use mnemosyne::harness::{
    self, encode_idx, load_meta_checkpoint, meta_checkpoint, parse_idx, Checkpoint,
    ExperimentConfig, RngState, RunManifest, IDX_IMAGES,
};
use mnemosyne::lopt::{LearnedOptimizer, LoptConfig};
use mnemosyne::memlab::{
    self, compact_model, energy_regular, pattern_rho, retrieval_experiment, theorem1_sign_check,
    variance_experiment, PatternSet, RetrievalParams, SignCheckParams,
};
use mnemosyne::meta::{
    compare_with_grid, iteration_problem, meta_train, run_optimizer, run_segment, segment_gradient,
    LearnedStepper, MetaState, MetaTrainConfig, Problem, Rollout, Scaling,
};
use mnemosyne::optimizee::{Activation, Architecture, OptimizeeSpec, TaskSpec};
use mnemosyne::rf::{sample_projections, Mechanism, RfSpec};
use mnemosyne::tasks::{derive_seed, TaskKind};
use mnemosyne::topo::{make_repr_seq, TopoConfig, TopoEncoder};
use mnemosyne::{ParamTree, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Tolerances and sizes, as stated by each criterion.
const KERNEL_PAIRS: usize = 50;
const KERNEL_DRAWS: usize = 10_000;
const KERNEL_REL_TOL: f64 = 0.02;
const KERNEL_FEATURES: [usize; 3] = [16, 64, 256];
const SLOPE_TARGET: f64 = -0.5;
const SLOPE_TOL: f64 = 0.1;
const VARIANCE_ORDER_FEATURES: usize = 16;
const VARIANCE_ORDER_RATE: f64 = 0.95;
const CAM_STEPS: usize = 200;
const CAM_TOL: f64 = 1e-10;
const LATENCY_TOL: f64 = 0.20;
const CACHE_TOL: f64 = 1e-8;
const PERFORMER_TOL: f64 = 1e-10;
const OP_GRAD_TOL: f64 = 1e-4;
const META_GRAD_TOL: f64 = 1e-3;
const META_GRAD_SAMPLES: usize = 20;
const META_ITERATIONS: usize = 2000;
const META_DROP: f64 = 0.5;
const ADAM_RATIO: f64 = 1.5;
const LONG_STEPS: usize = 2000;
const RETRIEVAL_COMPACT_RATE: f64 = 0.95;
const SIGN_RATE: f64 = 0.99;
const VARIANCE_TOL: f64 = 0.10;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn uniform_pairs(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<(Vec<f64>, Vec<f64>)> {
    (0..n)
        .map(|_| {
            let mut v = || {
                (0..dim)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect::<Vec<f64>>()
            };
            (v(), v())
        })
        .collect()
}

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

/// Kernel estimates on uniform pairs in `[-1, 1]^4`, so `||x||, ||y|| <= 2`.
fn criterion_1() -> Verdict {
    let t0 = Instant::now();
    let rows =
        memlab::kernel_bench(4, &KERNEL_FEATURES, KERNEL_PAIRS, KERNEL_DRAWS, false, 1).unwrap();
    let r_max = *KERNEL_FEATURES.last().unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for m in Mechanism::ALL {
        let at = |r: usize| {
            rows.iter()
                .filter(move |x| x.mechanism == m.name() && x.r == r)
        };
        let worst = at(r_max).map(|x| x.rel_error).fold(0.0, f64::max);
        let xs: Vec<f64> = KERNEL_FEATURES.iter().map(|&r| (r as f64).ln()).collect();
        let ys: Vec<f64> = KERNEL_FEATURES
            .iter()
            .map(|&r| {
                let v: Vec<f64> = at(r).map(|x| x.variance.sqrt() / x.exact).collect();
                (v.iter().sum::<f64>() / v.len() as f64).ln()
            })
            .collect();
        let s = slope(&xs, &ys);
        pass &= worst < KERNEL_REL_TOL && (s - SLOPE_TARGET).abs() <= SLOPE_TOL;
        parts.push(format!(
            "{} max rel err {:.4} at r={r_max}, slope {:.3}",
            m.name(),
            worst,
            s
        ));
    }
    let secs = t0.elapsed().as_secs_f64();
    pass &= secs < 60.0;
    verdict(pass, format!("{}; {:.1}s", parts.join("; "), secs))
}

/// Sample variance and the standard error of that variance.
fn variance_with_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    (m2 * n / (n - 1.0), ((m4 - m2 * m2) / n).max(0.0).sqrt())
}

fn criterion_2() -> Verdict {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let pairs = uniform_pairs(&mut rng, KERNEL_PAIRS, 4);
    let estimates = |m: Mechanism| -> Vec<Vec<f64>> {
        let projs: Vec<_> = (0..KERNEL_DRAWS)
            .map(|d| {
                let spec = RfSpec::new(
                    m,
                    VARIANCE_ORDER_FEATURES,
                    4,
                    derive_seed(2, &format!("{}/{d}", m.name())),
                )
                .with_orthogonal(false);
                sample_projections(&spec).unwrap()
            })
            .collect();
        pairs
            .iter()
            .map(|(x, y)| {
                projs
                    .iter()
                    .map(|p| p.kernel_estimate(x, y).unwrap())
                    .collect()
            })
            .collect()
    };
    let hyp = estimates(Mechanism::HyperbolicCosine);
    let fav = estimates(Mechanism::FavorPlus);
    let mut ok = 0;
    let mut lower = 0;
    for (h, f) in hyp.iter().zip(&fav) {
        let (vh, sh) = variance_with_se(h);
        let (vf, sf) = variance_with_se(f);
        // a pair fails only when hyperbolic is worse by more than three standard errors
        if vh - vf <= 3.0 * (sh * sh + sf * sf).sqrt() {
            ok += 1;
        }
        if vh <= vf {
            lower += 1;
        }
    }
    let rate = ok as f64 / KERNEL_PAIRS as f64;
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        rate >= VARIANCE_ORDER_RATE && secs < 120.0,
        format!(
            "hyperbolic not worse (3 sigma) on {ok}/{KERNEL_PAIRS} pairs, point estimate lower on {lower}/{KERNEL_PAIRS}, r={VARIANCE_ORDER_FEATURES}; {secs:.1}s"
        ),
    )
}

fn rows(rng: &mut ChaCha8Rng, n: usize, d: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            (0..d)
                .map(|_| scale * rng.random_range(-1.0..1.0))
                .collect()
        })
        .collect()
}

fn as_row(v: &[f64]) -> Tensor {
    Tensor::matrix(1, v.len(), v.to_vec()).unwrap()
}

fn small_cam(m: Mechanism, tau: f64) -> CamConfig {
    CamConfig {
        input_dim: 5,
        qk_dim: 4,
        features: 16,
        discount: tau,
        mechanism: m,
        ..CamConfig::default()
    }
}

fn criterion_3() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut state_dev, mut read_dev): (f64, f64) = (0.0, 0.0);
    for m in Mechanism::ALL {
        for tau in [0.0, 0.1, 1.0] {
            let cfg = small_cam(m, tau);
            let layer = CamLayer::new(&cfg, 30).unwrap();
            let proj = &layer.projections()[0];
            let phi = |z: &[f64]| match m {
                Mechanism::FavorPlusPlus => proj.phi_favor_pp(z, cfg.rho).unwrap(),
                _ => proj.phi(z).unwrap(),
            };
            let keys = rows(&mut rng, CAM_STEPS, 4, 0.6);
            let vals = rows(&mut rng, CAM_STEPS, 5, 1.0);
            let queries = rows(&mut rng, CAM_STEPS, 4, 0.6);
            let phi_k: Vec<Vec<f64>> = keys.iter().map(|k| phi(k)).collect();
            let mut s = layer.init_state(1);
            for t in 0..CAM_STEPS {
                layer
                    .update(&mut s, &as_row(&keys[t]), &as_row(&vals[t]))
                    .unwrap();
                // batch sums over the whole prefix
                let r = phi_k[0].len();
                let mut n = vec![0.0; r * 5];
                let mut psi = vec![0.0; r];
                let mut num = vec![0.0; 5];
                let mut den = 0.0;
                let fq = phi(&queries[t]);
                for mu in 0..=t {
                    let lam = (-tau * (t - mu) as f64).exp();
                    let w = lam * fq.iter().zip(&phi_k[mu]).map(|(a, b)| a * b).sum::<f64>();
                    den += w;
                    for i in 0..r {
                        psi[i] += lam * phi_k[mu][i];
                        for j in 0..5 {
                            n[i * 5 + j] += lam * phi_k[mu][i] * vals[mu][j];
                        }
                    }
                    for j in 0..5 {
                        num[j] += w * vals[mu][j];
                    }
                }
                for (g, w) in s.memory_matrix(0, 0, 0).data().iter().zip(&n) {
                    state_dev = state_dev.max((g - w).abs());
                }
                for (g, w) in s.psi(0, 0, 0).iter().zip(&psi) {
                    state_dev = state_dev.max((g - w).abs());
                }
                let got = layer.read(&mut s, &as_row(&queries[t])).unwrap();
                for (g, x) in got.data().iter().zip(&num) {
                    read_dev = read_dev.max((g - x / den).abs());
                }
            }
        }
    }
    verdict(
        state_dev < CAM_TOL && read_dev < CAM_TOL,
        format!("state max dev {state_dev:.2e}, read-out max dev {read_dev:.2e} (3 mechanisms x tau in {{0, 0.1, 1}}, {CAM_STEPS} steps)"),
    )
}

fn serialized_len(s: &CamState) -> usize {
    Checkpoint {
        metadata: String::new(),
        rng: RngState::default(),
        sections: s.to_sections("cam"),
    }
    .to_bytes()
    .len()
}

/// Median time of `reps` update+read steps, each on a fresh clone of `state`.
fn step_latency(layer: &CamLayer, state: &CamState, inputs: &[Vec<f64>], reps: usize) -> f64 {
    let mut times: Vec<f64> = (0..reps)
        .map(|i| {
            let mut s = state.clone();
            let x = as_row(&inputs[i % inputs.len()]);
            let t = Instant::now();
            for _ in 0..8 {
                layer.update(&mut s, &x, &x).unwrap();
                std::hint::black_box(layer.read(&mut s, &x).unwrap());
            }
            t.elapsed().as_secs_f64() / 8.0
        })
        .collect();
    times.sort_by(f64::total_cmp);
    times[reps / 2]
}

fn criterion_4() -> Verdict {
    let cfg = CamConfig::default();
    let layer = CamLayer::new(&cfg, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let inputs = rows(&mut rng, 256, cfg.qk_dim, 0.3);
    let mut s = layer.init_state(1);
    let mut size_1 = 0;
    let mut at_10 = None;
    let mut at_10k = None;
    for t in 1..=100_000usize {
        let x = as_row(&inputs[t % inputs.len()]);
        layer.update(&mut s, &x, &x).unwrap();
        match t {
            1 => size_1 = serialized_len(&s),
            10 => at_10 = Some(s.clone()),
            10_000 => at_10k = Some(s.clone()),
            _ => {}
        }
    }
    let size_big = serialized_len(&s);
    let (s10, s10k) = (at_10.unwrap(), at_10k.unwrap());
    step_latency(&layer, &s10, &inputs, 200);
    let l10 = step_latency(&layer, &s10, &inputs, 2001);
    let l10k = step_latency(&layer, &s10k, &inputs, 2001);
    let ratio = l10k / l10;
    verdict(
        size_1 == size_big && (ratio - 1.0).abs() <= LATENCY_TOL,
        format!(
            "state bytes {size_1} at t=1, {size_big} at t=1e5; step latency {:.2}us at t=10, {:.2}us at t=1e4 (ratio {ratio:.3})",
            l10 * 1e6,
            l10k * 1e6
        ),
    )
}

fn mat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (r, c) = w.dims2();
    (0..c)
        .map(|j| (0..r).map(|i| x[i] * w.data()[i * c + j]).sum())
        .collect()
}

fn criterion_5() -> Verdict {
    let opt = LearnedOptimizer::init(&LoptConfig::default(), 5).unwrap();
    let w = CachedAttentionWeights::from_tree(opt.trainable(), "cw/").unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let xs = rows(&mut rng, 64, 16, 0.5);
    let mut cached = CachedAttentionOptimizer::new(w.clone(), usize::MAX, 1).unwrap();
    let mut exact = ExactKernelMemory::new(0.0);
    let mut dev: f64 = 0.0;
    for xi in &xs {
        let got = cached.attend(0, xi);
        exact.update(&mat(xi, &w.w_k), &mat(xi, &w.w_v));
        let want = exact.read(&mat(xi, &w.w_q)).unwrap();
        for j in 0..16 {
            dev = dev.max((got[j] - xi[j] - want[j]).abs());
        }
    }
    verdict(dev < CACHE_TOL, format!("max dev {dev:.2e} over t = 1..64"))
}

/// Token-by-token quadratic attention plus the residual MLP of a Performer block.
fn performer_oracle(
    w: &ParamTree,
    prefix: &str,
    phi: impl Fn(&[f64]) -> Vec<f64>,
    x: &Tensor,
) -> Vec<Vec<f64>> {
    let g = |n: &str| w.get(&format!("{prefix}{n}")).unwrap();
    let n = x.dims2().0;
    let phi_q: Vec<_> = (0..n).map(|i| phi(&mat(x.row(i), g("w_q")))).collect();
    let phi_k: Vec<_> = (0..n).map(|i| phi(&mat(x.row(i), g("w_k")))).collect();
    let v: Vec<_> = (0..n).map(|i| mat(x.row(i), g("w_v"))).collect();
    (0..n)
        .map(|i| {
            let weights: Vec<f64> = (0..n)
                .map(|j| phi_q[i].iter().zip(&phi_k[j]).map(|(a, b)| a * b).sum())
                .collect();
            let total: f64 = weights.iter().sum();
            let d = v[0].len();
            let a: Vec<f64> = (0..d)
                .map(|c| (0..n).map(|j| weights[j] * v[j][c]).sum::<f64>() / total)
                .collect();
            let mut h = mat(&a, g("w1"));
            for (hv, b) in h.iter_mut().zip(g("b1").data()) {
                *hv = (*hv + b).max(0.0);
            }
            let m = mat(&h, g("w2"));
            (0..d).map(|c| a[c] + m[c] + g("b2").data()[c]).collect()
        })
        .collect()
}

fn criterion_6() -> Verdict {
    let l_max = 3;
    let mut counts = Vec::new();
    let mut counts_ok = true;
    for chunk_len in [4usize, 8, 16] {
        let cfg = TopoConfig {
            chunk_len,
            l_max,
            ..TopoConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(chunk_len as u64);
        let (mut w, mut fixed) = (ParamTree::new(), ParamTree::new());
        let enc = TopoEncoder::init(&cfg, "", &mut rng, &mut w, &mut fixed).unwrap();
        for levels in [1u32, 2] {
            let len = chunk_len.pow(levels) * l_max;
            let g = Tensor::from_fn(&[len], |_| rng.random_range(-1.0..1.0));
            let tape = Tape::untraced();
            let vars = w.to_vars(&tape, false);
            let m = enc
                .hpe(&vars, tape.constant(make_repr_seq(&g).unwrap()))
                .unwrap();
            let tokens = m.value().dims2().0;
            counts_ok &= tokens == l_max;
            counts.push(format!("L={chunk_len},h={levels}:{tokens}"));
        }
    }
    let cfg = TopoConfig {
        chunk_len: 4,
        l_max: 3,
        ..TopoConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(60);
    let (mut w, mut fixed) = (ParamTree::new(), ParamTree::new());
    let enc = TopoEncoder::init(&cfg, "t/", &mut rng, &mut w, &mut fixed).unwrap();
    let proj = enc.pool_block().projection();
    let mut dev: f64 = 0.0;
    for n in [1, 2, 7, 16, 33, 64] {
        let x = Tensor::from_fn(&[n, 16], |_| rng.random_range(-1.0..1.0));
        let tape = Tape::untraced();
        let vars = w.to_vars(&tape, false);
        let got = enc
            .pool_block()
            .encode(&vars, tape.constant(x.clone()))
            .unwrap()
            .value();
        let want = performer_oracle(&w, "t/pool/", |z| proj.phi(z).unwrap(), &x);
        for i in 0..n {
            for (g, e) in got.row(i).iter().zip(&want[i]) {
                dev = dev.max((g - e).abs());
            }
        }
    }
    verdict(
        counts_ok && dev < PERFORMER_TOL,
        format!(
            "meta-tokens (l_max={l_max}) {}; Performer vs quadratic max dev {dev:.2e} for n <= 64",
            counts.join(" ")
        ),
    )
}

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

fn criterion_7() -> Verdict {
    let t0 = Instant::now();
    let mut op_worst: f64 = 0.0;
    let mut worst_name = String::new();
    let mut n_cases = 0;
    for seed in [1, 2, 3] {
        for c in op_cases(seed) {
            let err = max_gradient_error(&c.inputs, &c.f, 1e-6).unwrap();
            n_cases += 1;
            if err >= op_worst {
                op_worst = err;
                worst_name = c.name;
            }
        }
    }

    let (problem, x0) = quadratic_problem(8, 7);
    let opt = LearnedOptimizer::init(&LoptConfig::default(), 7).unwrap();
    let mut rollout = Rollout::new(&opt, x0).unwrap();
    segment_gradient(&opt, &problem, &mut rollout, 3, 3e-2, 1.0).unwrap();
    let (_, grads, _, _) =
        segment_gradient(&opt, &problem, &mut rollout.clone(), 1, 3e-2, 1.0).unwrap();
    let loss_at = |o: &LearnedOptimizer| {
        let tape = Tape::untraced();
        let weights = o.weight_vars(&tape, false);
        let mut r = rollout.clone();
        run_segment(o, &weights, &problem, &mut r, 1, 3e-2, 1.0)
            .unwrap()
            .meta_loss
            .item()
    };
    let names: Vec<String> = opt.trainable().names().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut meta_worst: f64 = 0.0;
    let h = 1e-5;
    for _ in 0..META_GRAD_SAMPLES {
        let name = &names[rng.random_range(0..names.len())];
        let i = rng.random_range(0..opt.trainable().get(name).unwrap().numel());
        let shifted = |d: f64| {
            let mut o = opt.clone();
            let mut t = o.trainable().clone();
            t.get_mut(name).unwrap().data_mut()[i] += d;
            o.set_trainable(t).unwrap();
            loss_at(&o)
        };
        let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
        let an = grads.get(name).unwrap().data()[i];
        meta_worst = meta_worst.max((fd - an).abs() / fd.abs().max(an.abs()).max(1e-6));
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        op_worst < OP_GRAD_TOL && meta_worst < META_GRAD_TOL && secs < 120.0,
        format!(
            "{n_cases} op cases, worst rel err {op_worst:.2e} ({worst_name}); 1-step meta-gradient worst rel err {meta_worst:.2e} over {META_GRAD_SAMPLES} entries; {secs:.1}s"
        ),
    )
}

/// Mean full-horizon meta-loss over fixed sampled tasks, with no gradient.
fn evaluate_meta_loss(opt: &LearnedOptimizer, cfg: &MetaTrainConfig, tasks: usize) -> f64 {
    let eval_cfg = MetaTrainConfig {
        seed: derive_seed(cfg.seed, "acceptance/eval"),
        ..cfg.clone()
    };
    let segments = cfg.horizon / cfg.truncation;
    let mut total = 0.0;
    for k in 0..tasks {
        let (problem, x0, _) = iteration_problem(&eval_cfg, k).unwrap();
        let mut rollout = Rollout::new(opt, x0).unwrap();
        let mut loss = 0.0;
        for _ in 0..segments {
            let tape = Tape::untraced();
            let w = opt.weight_vars(&tape, false);
            loss += match run_segment(
                opt,
                &w,
                &problem,
                &mut rollout,
                cfg.truncation,
                cfg.expert_lr,
                cfg.imitation_weight,
            ) {
                Ok(out) => out.meta_loss.item(),
                Err(_) => f64::INFINITY,
            };
        }
        total += loss / segments as f64;
    }
    total / tasks as f64
}

fn held_out(kind: TaskKind) -> OptimizeeSpec {
    let (dim, shape, noise) = match kind {
        TaskKind::Spiral => (2, 1.0, 0.03),
        _ => (6, 2.0, 1.0),
    };
    OptimizeeSpec {
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
    }
}

/// Meta-trains once; criteria 8 and 9 both use the result.
fn trained_optimizer() -> (LearnedOptimizer, MetaTrainConfig, Vec<f64>, f64) {
    let cfg = MetaTrainConfig {
        iterations: META_ITERATIONS,
        ..MetaTrainConfig::default()
    };
    let mut opt =
        LearnedOptimizer::init(&LoptConfig::default(), derive_seed(cfg.seed, "lopt/init")).unwrap();
    let mut state = MetaState::new(&opt);
    let t0 = Instant::now();
    let mut curve = Vec::new();
    meta_train(&mut opt, &cfg, &mut state, |r| {
        curve.push(r.meta_loss);
        Ok(())
    })
    .unwrap();
    (opt, cfg, curve, t0.elapsed().as_secs_f64())
}

fn criterion_8(trained: &(LearnedOptimizer, MetaTrainConfig, Vec<f64>, f64)) -> Verdict {
    let (opt, cfg, curve, secs) = trained;
    let initial =
        LearnedOptimizer::init(&LoptConfig::default(), derive_seed(cfg.seed, "lopt/init")).unwrap();
    let before = evaluate_meta_loss(&initial, cfg, 20);
    let after = evaluate_meta_loss(opt, cfg, 20);
    let window = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let drop_ok = after <= (1.0 - META_DROP) * before;

    let mut parts = vec![format!(
        "meta-loss on 20 fixed sampled tasks {before:.4} -> {after:.4} ({:.1}% drop; training windows first 50 {:.3}, last 200 {:.3}; {:.0}s)",
        100.0 * (1.0 - after / before),
        window(&curve[..50.min(curve.len())]),
        window(&curve[curve.len().saturating_sub(200)..]),
        secs
    )];
    let mut held_ok = true;
    for kind in [TaskKind::TwoGaussians, TaskKind::Spiral] {
        let problem = held_out(kind).build().unwrap();
        let x0 = problem.init_params(1);
        let cmp = compare_with_grid(opt, &problem, &x0, 100, 3).unwrap();
        let ok = cmp.learned < cmp.best_sgd() && cmp.learned <= ADAM_RATIO * cmp.best_adam();
        if kind == TaskKind::TwoGaussians {
            held_ok &= ok;
        }
        parts.push(format!(
            "{}{} mlp-48x3-relu: learned {:.4}, best sgd {:.4}, best adam {:.4} ({})",
            if kind == TaskKind::TwoGaussians {
                ""
            } else {
                "[info] "
            },
            kind.name(),
            cmp.learned,
            cmp.best_sgd(),
            cmp.best_adam(),
            if ok { "meets bar" } else { "misses bar" }
        ));
    }
    verdict(drop_ok && held_ok, parts.join("; "))
}

fn criterion_9(trained: &(LearnedOptimizer, MetaTrainConfig, Vec<f64>, f64)) -> Verdict {
    let opt = &trained.0;
    let mut pass = true;
    let mut parts = Vec::new();
    for kind in [TaskKind::TwoGaussians, TaskKind::Spiral] {
        let problem = held_out(kind).build().unwrap();
        let x0 = problem.init_params(1);
        let mut stepper = LearnedStepper::new(opt, &x0).unwrap();
        let curve = run_optimizer(&mut stepper, &problem, &x0, LONG_STEPS, 3).unwrap();
        let ok = curve.val.len() == LONG_STEPS && curve.val[LONG_STEPS - 1] <= curve.val[99];
        pass &= ok;
        parts.push(format!(
            "{}: val loss step 100 {:.4}, step {LONG_STEPS} {}",
            kind.name(),
            curve.val.get(99).copied().unwrap_or(f64::NAN),
            curve
                .val
                .get(LONG_STEPS - 1)
                .map_or("diverged".to_string(), |v| format!("{v:.4}"))
        ));
    }
    verdict(pass, parts.join("; "))
}

fn criterion_10() -> Verdict {
    let t0 = Instant::now();
    let params = RetrievalParams {
        dim: 64,
        patterns: 5,
        rho: 0.1,
        tau_sep: 0.25,
        features: 4096,
        trials: 100,
        seed: 10,
        rf_rho: None,
    };
    let rows = retrieval_experiment(&params, threads()).unwrap();
    let rate = |name: &str| {
        rows.iter()
            .find(|r| r.mechanism == name)
            .unwrap()
            .success_rate
    };
    let (regular, compact) = (rate("regular"), rate("compact"));

    // compact vs regular energy at N=16, M=4, r=4096 over 20 seeds
    let mut close = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let set = PatternSet::random(16, 4, 4, &mut rng).unwrap();
        let model = compact_model(&set, 4096, pattern_rho(&set).unwrap(), true, seed).unwrap();
        let xi = memlab::random_pattern(16, &mut rng);
        let exact = energy_regular(&xi, &set);
        if ((model.energy(&xi) - exact) / exact).abs() < 0.05 {
            close += 1;
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        regular == 1.0 && compact >= RETRIEVAL_COMPACT_RATE && secs < 300.0,
        format!(
            "success regular {regular:.2}, compact {compact:.2} (N=64, M=5, rho=0.1, r=4096, 100 trials); [info] compact energy within 5% at N=16, M=4: {close}/20 seeds; {secs:.0}s"
        ),
    )
}

fn criterion_11() -> Verdict {
    let t0 = Instant::now();
    let mut agree = 0;
    let mut disagree = 0;
    let mut inconclusive = 0;
    let mut cases = (0, 0);
    let mut parts = Vec::new();
    for dim in [16usize, 32] {
        let p = SignCheckParams {
            dim,
            patterns: 2,
            tau_sep: 1.0,
            rho: 0.125,
            draws: 200,
            features: 4096,
            configurations: 100,
            rf_rho: None,
            seed: 11 + dim as u64,
        };
        let row = theorem1_sign_check(&p, threads()).unwrap();
        agree += row.agree;
        disagree += row.disagree;
        inconclusive += row.inconclusive;
        cases.0 += row.case1;
        cases.1 += row.case2;
        parts.push(format!(
            "N={dim}: {}/{}/{} agree/disagree/inconclusive",
            row.agree, row.disagree, row.inconclusive
        ));
    }
    let conclusive = agree + disagree;
    let rate = if conclusive > 0 {
        agree as f64 / conclusive as f64
    } else {
        f64::NAN
    };
    let secs = t0.elapsed().as_secs_f64();
    verdict(
        conclusive > 0 && rate >= SIGN_RATE && cases.0 > 0 && cases.1 > 0 && secs < 600.0,
        format!(
            "{}; sign agreement {} of {conclusive} conclusive ({inconclusive} inconclusive); cases {}+{}; {secs:.0}s",
            parts.join(", "),
            if rate.is_nan() { "n/a".to_string() } else { format!("{:.3}", rate) },
            cases.0,
            cases.1
        ),
    )
}

fn criterion_12() -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for m in [1, 2] {
        let row = variance_experiment(4, m, 0.95, 1, 100_000, 12 + m as u64).unwrap();
        let rel = (row.monte_carlo / row.closed_form - 1.0).abs();
        pass &= rel <= VARIANCE_TOL;
        parts.push(format!(
            "M={m}: closed form {:.4e}, monte carlo {:.4e} (rel diff {:.3}); as printed {:.4e}",
            row.closed_form, row.monte_carlo, rel, row.closed_form_as_printed
        ));
    }
    verdict(pass, parts.join("; "))
}

fn criterion_13() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    // checkpoint round trip through disk, including the RNG position
    let opt = LearnedOptimizer::init(&LoptConfig::default(), 13).unwrap();
    let mut state = MetaState::new(&opt);
    state.iteration = 17;
    state.meta_adam.t = 17;
    let cfg = ExperimentConfig::default();
    let manifest = RunManifest::new("acceptance", cfg.hash(), cfg.run.seed);
    let ck = meta_checkpoint(&cfg, &manifest, &opt, &state);
    let path = dir.path().join("ck.mnemo");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    let (info, opt2, state2) = load_meta_checkpoint(&back).unwrap();
    let again = meta_checkpoint(&info.config, &info.manifest, &opt2, &state2);
    let round_trip = back.to_bytes() == ck.to_bytes()
        && again.to_bytes() == ck.to_bytes()
        && back.rng == ck.rng
        && state2 == state;

    // identical seeds, single thread
    let mut cfg = ExperimentConfig::default();
    cfg.run.threads = 1;
    cfg.run.checkpoint_every = 2;
    cfg.meta.iterations = 4;
    cfg.meta.horizon = 20;
    let run = |name: &str| {
        let out = dir.path().join(name);
        harness::run_meta_train(&cfg, &out, None, |_| {}).unwrap();
        (
            fs::read(out.join("curves.jsonl")).unwrap(),
            fs::read(out.join("checkpoint.mnemo")).unwrap(),
        )
    };
    let identical = run("a") == run("b");

    // corrupted IDX files
    let good = encode_idx(IDX_IMAGES, &[4, 3, 3], &[9; 36]);
    let mut bad_magic = good.clone();
    bad_magic[2] = 0x09;
    let magic_err = parse_idx(&bad_magic, "images.idx", IDX_IMAGES)
        .err()
        .map(|e| e.to_string());
    let trunc_err = parse_idx(&good[..30], "images.idx", IDX_IMAGES)
        .err()
        .map(|e| e.to_string());
    let positional = |e: &Option<String>| {
        e.as_ref()
            .is_some_and(|m| m.contains("images.idx") && m.contains("offset"))
    };
    let idx_ok = parse_idx(&good, "images.idx", IDX_IMAGES).is_ok()
        && positional(&magic_err)
        && positional(&trunc_err);

    verdict(
        round_trip && identical && idx_ok,
        format!(
            "checkpoint round trip {}; identical-seed outputs {}; IDX errors: \"{}\" / \"{}\"",
            if round_trip {
                "bit-identical"
            } else {
                "differs"
            },
            if identical {
                "byte-identical"
            } else {
                "differ"
            },
            magic_err.unwrap_or_default(),
            trunc_err.unwrap_or_default()
        ),
    )
}

fn main() {
    let selected: Option<BTreeSet<usize>> = std::env::var("MNEMO_CRITERIA")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |i: usize| selected.as_ref().is_none_or(|s| s.contains(&i));
    let mut trained = None;
    let mut failed = Vec::new();
    for i in 1..=13 {
        if !wanted(i) {
            continue;
        }
        let t0 = Instant::now();
        let v = match i {
            1 => criterion_1(),
            2 => criterion_2(),
            3 => criterion_3(),
            4 => criterion_4(),
            5 => criterion_5(),
            6 => criterion_6(),
            7 => criterion_7(),
            8 | 9 => {
                let t = trained.get_or_insert_with(trained_optimizer);
                if i == 8 {
                    criterion_8(t)
                } else {
                    criterion_9(t)
                }
            }
            10 => criterion_10(),
            11 => criterion_11(),
            12 => criterion_12(),
            _ => criterion_13(),
        };
        println!(
            "criterion {i:>2}: {}  {}  [{:.1}s]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            t0.elapsed().as_secs_f64()
        );
        if !v.pass {
            failed.push(i);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
