//! Hand-designed optimizers and the finite-cache attention optimizer.
//!
//! Every optimizer returns the update `delta` to add to the parameters.

use std::collections::VecDeque;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tree::ParamTree;

/// Learning rates swept in comparisons.
pub const LR_GRID: [f64; 7] = [1e-1, 3e-2, 1e-2, 3e-3, 1e-3, 3e-4, 1e-4];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamTree,
    pub v: ParamTree,
    pub t: u64,
}

impl AdamState {
    pub fn new(like: &ParamTree) -> Self {
        Self {
            m: like.zeros_like(),
            v: like.zeros_like(),
            t: 0,
        }
    }
}

/// Bias-corrected Adam: `-lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_step(state: &mut AdamState, grads: &ParamTree, cfg: &AdamConfig) -> Result<ParamTree> {
    check_finite(grads)?;
    state.m.check_same_structure(grads)?;
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    state.m = state
        .m
        .zip_map(grads, |m, g| cfg.beta1 * m + (1.0 - cfg.beta1) * g)?;
    state.v = state
        .v
        .zip_map(grads, |v, g| cfg.beta2 * v + (1.0 - cfg.beta2) * g * g)?;
    state.m.zip_map(&state.v, |m, v| {
        -cfg.lr * (m / c1) / ((v / c2).sqrt() + cfg.eps)
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RmsPropConfig {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
}

impl RmsPropConfig {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            decay: 0.9,
            eps: 1e-8,
        }
    }
}

/// `v <- decay v + (1 - decay) g^2`, update `-lr g / (sqrt(v) + eps)`.
pub fn rmsprop_step(
    v: &mut ParamTree,
    grads: &ParamTree,
    cfg: &RmsPropConfig,
) -> Result<ParamTree> {
    check_finite(grads)?;
    *v = v.zip_map(grads, |v, g| cfg.decay * v + (1.0 - cfg.decay) * g * g)?;
    grads.zip_map(v, |g, v| -cfg.lr * g / (v.sqrt() + cfg.eps))
}

pub fn sgd_step(grads: &ParamTree, lr: f64) -> Result<ParamTree> {
    check_finite(grads)?;
    Ok(grads.scale(-lr))
}

fn check_finite(grads: &ParamTree) -> Result<()> {
    if grads.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite("gradient"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BaselineKind {
    Sgd,
    Adam,
    RmsProp,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
            Self::RmsProp => "rmsprop",
        }
    }
}

/// A baseline optimizer together with its running state.
#[derive(Clone, Debug, PartialEq)]
pub enum Baseline {
    Sgd { lr: f64 },
    Adam { cfg: AdamConfig, state: AdamState },
    RmsProp { cfg: RmsPropConfig, v: ParamTree },
}

impl Baseline {
    pub fn new(kind: BaselineKind, lr: f64, like: &ParamTree) -> Self {
        match kind {
            BaselineKind::Sgd => Self::Sgd { lr },
            BaselineKind::Adam => Self::Adam {
                cfg: AdamConfig::new(lr),
                state: AdamState::new(like),
            },
            BaselineKind::RmsProp => Self::RmsProp {
                cfg: RmsPropConfig::new(lr),
                v: like.zeros_like(),
            },
        }
    }

    pub fn kind(&self) -> BaselineKind {
        match self {
            Self::Sgd { .. } => BaselineKind::Sgd,
            Self::Adam { .. } => BaselineKind::Adam,
            Self::RmsProp { .. } => BaselineKind::RmsProp,
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            Self::Sgd { lr } => *lr,
            Self::Adam { cfg, .. } => cfg.lr,
            Self::RmsProp { cfg, .. } => cfg.lr,
        }
    }

    pub fn step(&mut self, grads: &ParamTree) -> Result<ParamTree> {
        match self {
            Self::Sgd { lr } => sgd_step(grads, *lr),
            Self::Adam { cfg, state } => adam_step(state, grads, cfg),
            Self::RmsProp { cfg, v } => rmsprop_step(v, grads, cfg),
        }
    }

    /// Named state tensors for checkpointing.
    pub fn state_sections(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        match self {
            Self::Sgd { .. } => {}
            Self::Adam { state, .. } => {
                out.push(("t".to_string(), Tensor::scalar(state.t as f64)));
                out.extend(state.m.iter().map(|(k, v)| (format!("m/{k}"), v.clone())));
                out.extend(state.v.iter().map(|(k, v)| (format!("v/{k}"), v.clone())));
            }
            Self::RmsProp { v, .. } => {
                out.extend(v.iter().map(|(k, t)| (format!("v/{k}"), t.clone())));
            }
        }
        out
    }

    /// Restores state written by [`Baseline::state_sections`].
    pub fn load_state(&mut self, sections: &ParamTree) -> Result<()> {
        match self {
            Self::Sgd { .. } => {}
            Self::Adam { state, .. } => {
                state.t = sections.get("t")?.data()[0] as u64;
                let m = sections.subtree("m/");
                let v = sections.subtree("v/");
                state.m.check_same_structure(&m)?;
                state.v.check_same_structure(&v)?;
                state.m = m;
                state.v = v;
            }
            Self::RmsProp { v, .. } => {
                let loaded = sections.subtree("v/");
                v.check_same_structure(&loaded)?;
                *v = loaded;
            }
        }
        Ok(())
    }
}

/// `kind:lr` such as `adam:3e-2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BaselineSpec {
    pub kind: BaselineKind,
    pub lr: f64,
}

impl BaselineSpec {
    pub fn parse(s: &str) -> Result<Self> {
        let (kind, lr) = s
            .split_once(':')
            .ok_or_else(|| Error::param("baselines", format!("expected kind:lr, got `{s}`")))?;
        let kind = match kind.trim() {
            "sgd" => BaselineKind::Sgd,
            "adam" => BaselineKind::Adam,
            "rmsprop" => BaselineKind::RmsProp,
            other => {
                return Err(Error::param(
                    "baselines",
                    format!("unknown optimizer `{other}`"),
                ))
            }
        };
        let lr: f64 = lr
            .trim()
            .parse()
            .map_err(|_| Error::param("baselines", format!("bad learning rate in `{s}`")))?;
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::param(
                "baselines",
                format!("learning rate must be positive in `{s}`"),
            ));
        }
        Ok(Self { kind, lr })
    }

    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        s.split(',')
            .filter(|p| !p.trim().is_empty())
            .map(Self::parse)
            .collect()
    }

    pub fn build(&self, like: &ParamTree) -> Baseline {
        Baseline::new(self.kind, self.lr, like)
    }
}

impl fmt::Display for BaselineSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind.name(), self.lr)
    }
}

/// Weights of a single-layer attention optimizer over a cache of past gradients.
///
/// Matrices are input-major: `w_in: 2 x d`, `w_q, w_k: d x n`, `w_v: d x d`,
/// `w1: d x h`, `w2: h x 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct CachedAttentionWeights {
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub scale: f64,
}

impl CachedAttentionWeights {
    /// Embedding, first CAM layer and output head of a coordinate-wise optimizer.
    pub fn from_tree(w: &ParamTree, prefix: &str) -> Result<Self> {
        let g = |n: &str| w.get(&format!("{prefix}{n}")).cloned();
        Ok(Self {
            w_in: g("embed/w")?,
            b_in: g("embed/b")?,
            w_q: g("cam0/w_q")?,
            w_k: g("cam0/w_k")?,
            w_v: g("cam0/w_v")?,
            w1: g("head/w1")?,
            b1: g("head/b1")?,
            w2: g("head/w2")?,
            b2: g("head/b2")?,
            scale: g("head/scale")?.data()[0],
        })
    }

    fn width(&self) -> usize {
        self.w_in.dims2().1
    }
}

/// Per-coordinate FIFO caches of the last `h` `(key, value)` pairs.
#[derive(Clone, Debug)]
pub struct CachedAttentionOptimizer {
    weights: CachedAttentionWeights,
    capacity: usize,
    caches: Vec<VecDeque<(Vec<f64>, Vec<f64>)>>,
}

impl CachedAttentionOptimizer {
    pub fn new(
        weights: CachedAttentionWeights,
        capacity: usize,
        coordinates: usize,
    ) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::param("cache_len", "must be at least 1"));
        }
        Ok(Self {
            weights,
            capacity,
            caches: vec![VecDeque::with_capacity(capacity.min(1024)); coordinates],
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn cache_len(&self, coordinate: usize) -> usize {
        self.caches[coordinate].len()
    }

    /// Stored floats across all caches.
    pub fn state_floats(&self) -> usize {
        self.caches
            .iter()
            .flat_map(|c| c.iter().map(|(k, v)| k.len() + v.len()))
            .sum()
    }

    /// Pushes the newest token and returns `xi + attention` for it.
    pub fn attend(&mut self, coordinate: usize, xi: &[f64]) -> Vec<f64> {
        let w = &self.weights;
        let k = row_mat(xi, &w.w_k);
        let v = row_mat(xi, &w.w_v);
        let q = row_mat(xi, &w.w_q);
        let cache = &mut self.caches[coordinate];
        if cache.len() == self.capacity {
            cache.pop_front();
        }
        cache.push_back((k, v));
        let logits: Vec<f64> = cache.iter().map(|(k, _)| crate::rf::dot(&q, k)).collect();
        let lse = crate::tensor::log_sum_exp(&logits);
        let mut out = xi.to_vec();
        for (l, (_, v)) in logits.iter().zip(cache.iter()) {
            let a = (l - lse).exp();
            for (o, x) in out.iter_mut().zip(v) {
                *o += a * x;
            }
        }
        out
    }

    /// Update for every coordinate of a flat gradient vector.
    pub fn step(&mut self, grads: &[f64], preprocess_p: f64) -> Result<Vec<f64>> {
        if grads.len() != self.caches.len() {
            return Err(Error::StructureMismatch(format!(
                "{} gradients for {} coordinates",
                grads.len(),
                self.caches.len()
            )));
        }
        let d = self.weights.width();
        let mut out = Vec::with_capacity(grads.len());
        for (i, &g) in grads.iter().enumerate() {
            let [a, b] = crate::lopt::preprocess_scalar(g, preprocess_p)?;
            let w = &self.weights;
            let xi: Vec<f64> = (0..d)
                .map(|j| a * w.w_in.data()[j] + b * w.w_in.data()[d + j] + w.b_in.data()[j])
                .collect();
            let h = self.attend(i, &xi);
            let w = &self.weights;
            let mut hidden = row_mat(&h, &w.w1);
            for (x, b) in hidden.iter_mut().zip(w.b1.data()) {
                *x = (*x + b).max(0.0);
            }
            out.push(w.scale * (row_mat(&hidden, &w.w2)[0] + w.b2.data()[0]));
        }
        Ok(out)
    }
}

fn row_mat(x: &[f64], w: &Tensor) -> Vec<f64> {
    let (r, c) = w.dims2();
    let mut out = vec![0.0; c];
    for (i, &xi) in x.iter().enumerate().take(r) {
        for (o, wv) in out.iter_mut().zip(&w.data()[i * c..(i + 1) * c]) {
            *o += xi * wv;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree(vals: &[f64]) -> ParamTree {
        let mut t = ParamTree::new();
        t.insert("x", Tensor::vector(vals.to_vec()));
        t
    }

    #[test]
    fn zero_gradients_give_zero_updates() {
        let g = tree(&[0.0, 0.0]);
        let mut adam = AdamState::new(&g);
        let mut v = g.zeros_like();
        for _ in 0..3 {
            assert_eq!(
                adam_step(&mut adam, &g, &AdamConfig::new(0.1))
                    .unwrap()
                    .flatten(),
                [0.0, 0.0]
            );
            assert_eq!(
                rmsprop_step(&mut v, &g, &RmsPropConfig::new(0.1))
                    .unwrap()
                    .flatten(),
                [0.0, 0.0]
            );
        }
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let g = tree(&[2.5, -0.01]);
        let mut s = AdamState::new(&g);
        let d = adam_step(&mut s, &g, &AdamConfig::new(0.03))
            .unwrap()
            .flatten();
        assert!((d[0] + 0.03).abs() < 1e-9);
        assert!((d[1] - 0.03).abs() < 1e-6);
    }

    #[test]
    fn sgd_unit_rate() {
        assert_eq!(
            sgd_step(&tree(&[1.5, -2.0]), 1.0).unwrap().flatten(),
            [-1.5, 2.0]
        );
    }

    #[test]
    fn parse_specs() {
        let s = BaselineSpec::parse("adam:3e-2").unwrap();
        assert_eq!(s.kind, BaselineKind::Adam);
        assert_eq!(s.lr, 0.03);
        let list = BaselineSpec::parse_list("adam:1e-3,adam:1e-4,sgd:1e-2").unwrap();
        assert_eq!(list.len(), 3);
        assert_eq!(list[2].kind, BaselineKind::Sgd);
        assert!(BaselineSpec::parse("lion:1e-3").is_err());
        assert!(BaselineSpec::parse("adam").is_err());
        assert!(BaselineSpec::parse("sgd:-1").is_err());
    }

    #[test]
    fn nan_gradient_rejected() {
        assert!(sgd_step(&tree(&[f64::NAN]), 0.1).is_err());
    }
}
