//! Compact associative memory (CAM) temporal encoder.
//!
//! The hidden state of one head is `(N_t, Psi_t)` with
//! `N_t = sum_mu exp(-tau (t - mu)) phi(k_mu) v_mu^T` and
//! `Psi_t = sum_mu exp(-tau (t - mu)) phi(k_mu)`, updated in O(1) per pattern.
//! A query `xi` reads `delta = N_t^T phi(q) / (phi(q)^T Psi_t)` with
//! `q = W_Q xi` and returns `xi + delta`.
//!
//! Every state is batched: row `b` of each matrix is an independent memory.
//! Weight matrices are stored input-major (`d x N` for `W_Q`), so projections
//! are `xi * W` on row vectors.
//!
//! With FAVOR++ the state can be thickened: one `(N, Psi)` slice per grid
//! point `rho_j = (2j - 1) / (2c)`, plus the running key sum and squared-norm
//! sum needed to compute the streaming `gamma_t` and pick the slice closest to
//! `rho*` at read time (ties go to the lower index).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rf::{self, Mechanism, RfProjection, RfSpec};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Added to `phi(q)^T Psi_t` before dividing.
pub const DENOMINATOR_EPS: f64 = 1e-30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CamConfig {
    /// Width `d` of the encoded vectors `xi`.
    pub input_dim: usize,
    /// Width `N` of queries and keys (split evenly across heads).
    pub qk_dim: usize,
    pub heads: usize,
    /// Random features `r` per head.
    pub features: usize,
    /// Exponential discount `tau`.
    pub discount: f64,
    pub mechanism: Mechanism,
    pub orthogonal: bool,
    /// FAVOR++ parameter when the state is not thickened.
    pub rho: f64,
    /// Grid size `c` of the thickened FAVOR++ state.
    pub thicken: Option<usize>,
    pub num_layers: usize,
}

impl Default for CamConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            qk_dim: 16,
            heads: 1,
            features: 16,
            discount: 0.1,
            mechanism: Mechanism::HyperbolicCosine,
            orthogonal: true,
            rho: 0.5,
            thicken: None,
            num_layers: 2,
        }
    }
}

impl CamConfig {
    /// One layer of width 8.
    pub fn light() -> Self {
        Self {
            input_dim: 8,
            qk_dim: 8,
            num_layers: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.qk_dim == 0 {
            return Err(Error::param("cam.input_dim", "dimensions must be positive"));
        }
        if self.heads == 0 || !self.qk_dim.is_multiple_of(self.heads) || !self.input_dim.is_multiple_of(self.heads) {
            return Err(Error::param(
                "cam.heads",
                format!(
                    "{} heads must divide qk_dim {} and input_dim {}",
                    self.heads, self.qk_dim, self.input_dim
                ),
            ));
        }
        if !(self.discount >= 0.0) || !self.discount.is_finite() {
            return Err(Error::param(
                "cam.discount",
                format!("must be >= 0, got {}", self.discount),
            ));
        }
        if self.num_layers == 0 {
            return Err(Error::param("cam.num_layers", "must be at least 1"));
        }
        if let Some(c) = self.thicken {
            if c == 0 {
                return Err(Error::param("cam.thicken", "grid needs at least one point"));
            }
            if self.mechanism != Mechanism::FavorPlusPlus {
                return Err(Error::param(
                    "cam.thicken",
                    "thickening applies to FAVOR++ only",
                ));
            }
        }
        self.head_spec(0, 0).validate()
    }

    pub fn head_qk_dim(&self) -> usize {
        self.qk_dim / self.heads
    }

    pub fn head_value_dim(&self) -> usize {
        self.input_dim / self.heads
    }

    fn head_spec(&self, head: usize, seed: u64) -> RfSpec {
        RfSpec {
            mechanism: self.mechanism,
            features: self.features,
            input_dim: self.head_qk_dim(),
            orthogonal: self.orthogonal,
            rho: self.rho,
            seed: seed.wrapping_add(head as u64),
        }
    }

    /// FAVOR++ parameters of the state slices.
    pub fn rho_grid(&self) -> Vec<f64> {
        match self.thicken {
            Some(c) => (1..=c)
                .map(|j| (2 * j - 1) as f64 / (2 * c) as f64)
                .collect(),
            None => vec![self.rho],
        }
    }
}

/// Index of the grid point closest to `rho`; the lower index wins a tie.
pub fn nearest_grid_index(grid: &[f64], rho: f64) -> usize {
    let mut best = 0;
    let mut best_dist = f64::INFINITY;
    for (j, g) in grid.iter().enumerate() {
        let d = (g - rho).abs();
        if d < best_dist {
            best = j;
            best_dist = d;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct CamWeights {
    /// `d x N`
    pub w_q: Tensor,
    /// `d x N`
    pub w_k: Tensor,
    /// `d x d`
    pub w_v: Tensor,
}

impl CamWeights {
    /// Gaussian init with std `1/sqrt(d)`.
    pub fn init<R: Rng + ?Sized>(config: &CamConfig, rng: &mut R) -> Self {
        let d = config.input_dim;
        let n = config.qk_dim;
        let std = 1.0 / (d as f64).sqrt();
        let mut gauss = |rows: usize, cols: usize| {
            Tensor::from_fn(&[rows, cols], |_| {
                std * rng.sample::<f64, _>(StandardNormal)
            })
        };
        Self {
            w_q: gauss(d, n),
            w_k: gauss(d, n),
            w_v: gauss(d, d),
        }
    }
}

/// Per-layer fixed random projections, one per head.
#[derive(Clone, Debug, PartialEq)]
pub struct CamLayer {
    config: CamConfig,
    projections: Vec<RfProjection>,
}

impl CamLayer {
    pub fn new(config: &CamConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let projections = (0..config.heads)
            .map(|h| rf::sample_projections(&config.head_spec(h, seed)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            projections,
        })
    }

    /// Rebuild from stored `omega` matrices (one per head).
    pub fn from_omegas(config: &CamConfig, omegas: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        if omegas.len() != config.heads {
            return Err(Error::StructureMismatch(format!(
                "{} projection matrices for {} heads",
                omegas.len(),
                config.heads
            )));
        }
        let projections = omegas
            .into_iter()
            .enumerate()
            .map(|(h, w)| RfProjection::from_omega(config.head_spec(h, 0), w))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            projections,
        })
    }

    pub fn config(&self) -> &CamConfig {
        &self.config
    }

    pub fn projections(&self) -> &[RfProjection] {
        &self.projections
    }

    pub fn init_state(&self, batch: usize) -> CamState {
        CamState::zeros(&self.config, batch)
    }

    /// Absorb one `(key, value)` pattern per batch row.
    pub fn update_var<'t>(
        &self,
        state: &mut CamVars<'t>,
        keys: Var<'t>,
        values: Var<'t>,
    ) -> Result<()> {
        let cfg = &self.config;
        let (b, n) = keys.value().dims2();
        let (bv, d) = values.value().dims2();
        if b != state.batch || bv != b || n != cfg.qk_dim || d != cfg.input_dim {
            return Err(Error::ShapeMismatch {
                op: "cam_update",
                left: vec![state.batch, cfg.qk_dim, cfg.input_dim],
                right: vec![b, n, d],
            });
        }
        let tape = keys.tape();
        let (nh, dh) = (cfg.head_qk_dim(), cfg.head_value_dim());
        let grid = cfg.rho_grid();
        for h in 0..cfg.heads {
            let k_h = head_cols(keys, h, nh)?;
            let v_h = head_cols(values, h, dh)?;
            for (s, &rho) in grid.iter().enumerate() {
                let logs = self.projections[h].log_phi_var(k_h, rho)?;
                let slice = &mut state.slices[s][h];
                let lv = logs.value();
                let mut keep = Vec::with_capacity(b);
                for (row, c) in slice.log_scale.iter_mut().enumerate() {
                    let top = lv
                        .row(row)
                        .iter()
                        .copied()
                        .fold(f64::NEG_INFINITY, f64::max);
                    let decayed = *c - cfg.discount;
                    let next = decayed.max(top);
                    keep.push((decayed - next).exp());
                    *c = next;
                }
                let scale = tape.constant(Tensor::matrix(b, 1, slice.log_scale.clone())?);
                let phi = logs.sub(scale)?.exp();
                slice.n = slice.n.decay_outer_add(&keep, phi, v_h)?;
                slice.psi = slice
                    .psi
                    .mul(tape.constant(Tensor::matrix(b, 1, keep)?))?
                    .add(phi)?;
            }
        }
        if let Some(stats) = &mut state.key_stats {
            stats.push(&keys.value(), cfg.heads)?;
        }
        state.t += 1;
        Ok(())
    }

    /// `N_t^T phi(q) / (phi(q)^T Psi_t)` for every batch row, concatenated over heads.
    pub fn read_var<'t>(&self, state: &mut CamVars<'t>, queries: Var<'t>) -> Result<Var<'t>> {
        let cfg = &self.config;
        if state.t == 0 {
            return Err(Error::EmptyMemory(
                "query against a memory holding no patterns".into(),
            ));
        }
        let (b, n) = queries.value().dims2();
        if b != state.batch || n != cfg.qk_dim {
            return Err(Error::ShapeMismatch {
                op: "cam_step",
                left: vec![state.batch, cfg.qk_dim],
                right: vec![b, n],
            });
        }
        let tape = queries.tape();
        let nh = cfg.head_qk_dim();
        let grid = cfg.rho_grid();
        let mut outs = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let q_h = head_cols(queries, h, nh)?;
            let choice = match &state.key_stats {
                Some(stats) => stats.select(&q_h.value(), h, nh, state.t, &grid)?,
                None => vec![0; b],
            };
            let mut used: Vec<usize> = choice.clone();
            used.sort_unstable();
            used.dedup();
            let mut combined: Option<Var<'t>> = None;
            for &s in &used {
                let (n_s, psi_s) = (state.slices[s][h].n, state.slices[s][h].psi);
                let phi = self.projections[h].phi_var_row_scaled(q_h, grid[s])?;
                let num = phi.vecmat_rows(n_s)?;
                let den = phi.mul(psi_s)?.sum_axis(1)?;
                let den_v = den.value();
                if let Some(bad) = den_v.data().iter().position(|&v| !(v >= DENOMINATOR_EPS)) {
                    if choice[bad] == s {
                        return Err(Error::EmptyMemory(format!(
                            "denominator {} below {DENOMINATOR_EPS:e} in row {bad}",
                            den_v.data()[bad]
                        )));
                    }
                }
                let delta = num.div(den.add_scalar(DENOMINATOR_EPS))?;
                let delta = if used.len() == 1 {
                    delta
                } else {
                    let mask: Vec<f64> = choice
                        .iter()
                        .map(|&c| if c == s { 1.0 } else { 0.0 })
                        .collect();
                    delta.mul(tape.constant(Tensor::matrix(b, 1, mask)?))?
                };
                combined = Some(match combined {
                    Some(acc) => acc.add(delta)?,
                    None => delta,
                });
            }
            state.selected[h] = choice;
            outs.push(combined.expect("at least one slice is used"));
        }
        if outs.len() == 1 {
            Ok(outs.pop().unwrap())
        } else {
            tape.concat(&outs, 1)
        }
    }

    /// One CAM cell step: store `(W_K xi, W_V xi)`, then read with `W_Q xi` and add the residual.
    pub fn step_var<'t>(
        &self,
        w: &CamWeightVars<'t>,
        state: &mut CamVars<'t>,
        xi: Var<'t>,
    ) -> Result<Var<'t>> {
        let k = xi.matmul(w.w_k)?;
        let v = xi.matmul(w.w_v)?;
        self.update_var(state, k, v)?;
        let q = xi.matmul(w.w_q)?;
        let delta = self.read_var(state, q)?;
        xi.add(delta)
    }

    /// Value-only update with explicit keys (`B x N`) and values (`B x d`).
    pub fn update(&self, state: &mut CamState, keys: &Tensor, values: &Tensor) -> Result<()> {
        let tape = Tape::untraced();
        let mut vars = state.to_vars(&tape);
        self.update_var(
            &mut vars,
            tape.constant(keys.clone()),
            tape.constant(values.clone()),
        )?;
        *state = vars.to_state();
        Ok(())
    }

    /// Value-only read of `delta` for explicit queries (`B x N`).
    pub fn read(&self, state: &mut CamState, queries: &Tensor) -> Result<Tensor> {
        let tape = Tape::untraced();
        let mut vars = state.to_vars(&tape);
        let out = self.read_var(&mut vars, tape.constant(queries.clone()))?;
        state.selected = vars.selected;
        Ok(out.value().as_ref().clone())
    }

    /// Value-only output `xi + delta` against the current memory (no update).
    pub fn step(&self, state: &mut CamState, weights: &CamWeights, xi: &Tensor) -> Result<Tensor> {
        let q = crate::tensor::matmul(xi, &weights.w_q)?;
        let delta = self.read(state, &q)?;
        xi.zip_map(&delta, "cam_step", |a, b| a + b)
    }

    /// Batched cell step: update with each row's own pattern, then read.
    pub fn forward_batch(
        &self,
        state: &mut CamState,
        weights: &CamWeights,
        xis: &Tensor,
    ) -> Result<Tensor> {
        let tape = Tape::untraced();
        let wv = CamWeightVars::constants(&tape, weights);
        let mut vars = state.to_vars(&tape);
        let out = self.step_var(&wv, &mut vars, tape.constant(xis.clone()))?;
        *state = vars.to_state();
        Ok(out.value().as_ref().clone())
    }
}

fn head_cols<'t>(x: Var<'t>, head: usize, width: usize) -> Result<Var<'t>> {
    let (_, cols) = x.value().dims2();
    if cols == width {
        Ok(x)
    } else {
        x.slice(1, head * width, width)
    }
}

pub struct CamWeightVars<'t> {
    pub w_q: Var<'t>,
    pub w_k: Var<'t>,
    pub w_v: Var<'t>,
}

impl<'t> CamWeightVars<'t> {
    pub fn constants(tape: &'t Tape, w: &CamWeights) -> Self {
        Self {
            w_q: tape.constant(w.w_q.clone()),
            w_k: tape.constant(w.w_k.clone()),
            w_v: tape.constant(w.w_v.clone()),
        }
    }

    pub fn params(tape: &'t Tape, w: &CamWeights) -> Self {
        Self {
            w_q: tape.param(w.w_q.clone()),
            w_k: tape.param(w.w_k.clone()),
            w_v: tape.param(w.w_v.clone()),
        }
    }
}

/// Running `sum_j k_j` (`B x N`) and `sum_j ||k_j||^2` per head (`B x H`).
#[derive(Clone, Debug, PartialEq)]
pub struct KeyStats {
    pub key_sum: Tensor,
    pub key_norm_sq: Tensor,
}

impl KeyStats {
    fn zeros(batch: usize, qk_dim: usize, heads: usize) -> Self {
        Self {
            key_sum: Tensor::zeros(&[batch, qk_dim]),
            key_norm_sq: Tensor::zeros(&[batch, heads]),
        }
    }

    fn push(&mut self, keys: &Tensor, heads: usize) -> Result<()> {
        let (b, n) = keys.dims2();
        let nh = n / heads;
        for row in 0..b {
            let k = keys.row(row);
            for (s, v) in self.key_sum.data_mut()[row * n..(row + 1) * n]
                .iter_mut()
                .zip(k)
            {
                *s += v;
            }
            for h in 0..heads {
                let part = &k[h * nh..(h + 1) * nh];
                self.key_norm_sq.data_mut()[row * heads + h] += rf::dot(part, part);
            }
        }
        Ok(())
    }

    fn select(
        &self,
        q_head: &Tensor,
        head: usize,
        nh: usize,
        t: usize,
        grid: &[f64],
    ) -> Result<Vec<usize>> {
        let (b, _) = q_head.dims2();
        let heads = self.key_norm_sq.dims2().1;
        let n = self.key_sum.dims2().1;
        (0..b)
            .map(|row| {
                let ks = &self.key_sum.data()[row * n + head * nh..row * n + (head + 1) * nh];
                let kn = self.key_norm_sq.data()[row * heads + head];
                let gamma = rf::gamma_unidirectional(ks, kn, q_head.row(row), t)?;
                let rho = rf::optimal_rho(gamma, nh)?;
                Ok(nearest_grid_index(grid, rho))
            })
            .collect()
    }
}

/// One `(N, Psi)` pair for a batch of memories.
///
/// Row `b` stores `exp(-log_scale[b])` times the true sums; the factor cancels
/// in the readout and keeps the stored values near unit scale.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice {
    /// `B x (r * d_h)`
    pub n: Tensor,
    /// `B x r`
    pub psi: Tensor,
    pub log_scale: Vec<f64>,
}

/// Value form of a batched CAM state.
#[derive(Clone, Debug, PartialEq)]
pub struct CamState {
    pub batch: usize,
    pub t: usize,
    /// Indexed `[slice][head]`.
    pub slices: Vec<Vec<Slice>>,
    pub key_stats: Option<KeyStats>,
    /// Slice chosen per head and row at the last read.
    pub selected: Vec<Vec<usize>>,
}

impl CamState {
    pub fn zeros(config: &CamConfig, batch: usize) -> Self {
        let r = config.features;
        let dh = config.head_value_dim();
        let slice = Slice {
            n: Tensor::zeros(&[batch, r * dh]),
            psi: Tensor::zeros(&[batch, r]),
            log_scale: vec![f64::NEG_INFINITY; batch],
        };
        Self {
            batch,
            t: 0,
            slices: vec![vec![slice; config.heads]; config.rho_grid().len()],
            key_stats: config
                .thicken
                .map(|_| KeyStats::zeros(batch, config.qk_dim, config.heads)),
            selected: vec![vec![0; batch]; config.heads],
        }
    }

    pub fn to_vars<'t>(&self, tape: &'t Tape) -> CamVars<'t> {
        CamVars {
            batch: self.batch,
            t: self.t,
            slices: self
                .slices
                .iter()
                .map(|heads| {
                    heads
                        .iter()
                        .map(|sl| SliceVars {
                            n: tape.constant(sl.n.clone()),
                            psi: tape.constant(sl.psi.clone()),
                            log_scale: sl.log_scale.clone(),
                        })
                        .collect()
                })
                .collect(),
            key_stats: self.key_stats.clone(),
            selected: self.selected.clone(),
        }
    }

    /// True `N_t` of head `h`, slice `s`, batch row `b` as an `r x d_h` matrix.
    pub fn memory_matrix(&self, s: usize, h: usize, b: usize) -> Tensor {
        let sl = &self.slices[s][h];
        let r = sl.psi.dims2().1;
        let k = sl.log_scale[b].exp();
        Tensor::matrix(
            r,
            sl.n.dims2().1 / r,
            sl.n.row(b).iter().map(|x| x * k).collect(),
        )
        .expect("sized")
    }

    /// True `Psi_t` of head `h`, slice `s`, batch row `b`.
    pub fn psi(&self, s: usize, h: usize, b: usize) -> Vec<f64> {
        let sl = &self.slices[s][h];
        let k = sl.log_scale[b].exp();
        sl.psi.row(b).iter().map(|x| x * k).collect()
    }

    /// Named tensors for checkpointing: the pattern count is a 1-element section.
    pub fn to_sections(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = vec![(format!("{prefix}/t"), Tensor::scalar(self.t as f64))];
        for (s, heads) in self.slices.iter().enumerate() {
            for (h, sl) in heads.iter().enumerate() {
                out.push((format!("{prefix}/s{s}/h{h}/N"), sl.n.clone()));
                out.push((format!("{prefix}/s{s}/h{h}/Psi"), sl.psi.clone()));
                out.push((
                    format!("{prefix}/s{s}/h{h}/scale"),
                    Tensor::vector(sl.log_scale.clone()),
                ));
            }
        }
        if let Some(k) = &self.key_stats {
            out.push((format!("{prefix}/Sigma"), k.key_sum.clone()));
            out.push((format!("{prefix}/Lambda"), k.key_norm_sq.clone()));
        }
        out
    }

    pub fn from_sections(
        config: &CamConfig,
        batch: usize,
        prefix: &str,
        get: &mut dyn FnMut(&str) -> Result<Tensor>,
    ) -> Result<Self> {
        let mut state = Self::zeros(config, batch);
        state.t = get(&format!("{prefix}/t"))?.data()[0] as usize;
        for (s, heads) in state.slices.iter_mut().enumerate() {
            for (h, sl) in heads.iter_mut().enumerate() {
                sl.n = expect_shape(get(&format!("{prefix}/s{s}/h{h}/N"))?, sl.n.shape())?;
                sl.psi = expect_shape(get(&format!("{prefix}/s{s}/h{h}/Psi"))?, sl.psi.shape())?;
                sl.log_scale =
                    expect_shape(get(&format!("{prefix}/s{s}/h{h}/scale"))?, &[batch])?.into_data();
            }
        }
        if let Some(k) = &mut state.key_stats {
            k.key_sum = expect_shape(get(&format!("{prefix}/Sigma"))?, k.key_sum.shape())?;
            k.key_norm_sq = expect_shape(get(&format!("{prefix}/Lambda"))?, k.key_norm_sq.shape())?;
        }
        Ok(state)
    }
}

fn expect_shape(t: Tensor, shape: &[usize]) -> Result<Tensor> {
    if t.shape() != shape {
        return Err(Error::ShapeMismatch {
            op: "cam_state",
            left: shape.to_vec(),
            right: t.shape().to_vec(),
        });
    }
    Ok(t)
}

#[derive(Clone, Debug)]
pub struct SliceVars<'t> {
    pub n: Var<'t>,
    pub psi: Var<'t>,
    pub log_scale: Vec<f64>,
}

/// Tape form of a [`CamState`]; scales and slice-selection statistics stay plain values.
pub struct CamVars<'t> {
    pub batch: usize,
    pub t: usize,
    pub slices: Vec<Vec<SliceVars<'t>>>,
    pub key_stats: Option<KeyStats>,
    pub selected: Vec<Vec<usize>>,
}

impl CamVars<'_> {
    pub fn to_state(&self) -> CamState {
        CamState {
            batch: self.batch,
            t: self.t,
            slices: self
                .slices
                .iter()
                .map(|heads| {
                    heads
                        .iter()
                        .map(|sl| Slice {
                            n: sl.n.value().as_ref().clone(),
                            psi: sl.psi.value().as_ref().clone(),
                            log_scale: sl.log_scale.clone(),
                        })
                        .collect()
                })
                .collect(),
            key_stats: self.key_stats.clone(),
            selected: self.selected.clone(),
        }
    }
}

/// Discounted attention with the exact kernel `exp(q^T k)`; keeps every pattern.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ExactKernelMemory {
    discount: f64,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    log_weights: Vec<f64>,
}

impl ExactKernelMemory {
    pub fn new(discount: f64) -> Self {
        Self {
            discount,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn update(&mut self, key: &[f64], value: &[f64]) {
        for w in &mut self.log_weights {
            *w -= self.discount;
        }
        self.keys.push(key.to_vec());
        self.values.push(value.to_vec());
        self.log_weights.push(0.0);
    }

    pub fn read(&self, query: &[f64]) -> Result<Vec<f64>> {
        if self.keys.is_empty() {
            return Err(Error::EmptyMemory(
                "query against a memory holding no patterns".into(),
            ));
        }
        let logits: Vec<f64> = self
            .keys
            .iter()
            .zip(&self.log_weights)
            .map(|(k, w)| w + rf::dot(query, k))
            .collect();
        let lse = crate::tensor::log_sum_exp(&logits);
        let mut out = vec![0.0; self.values[0].len()];
        for (l, v) in logits.iter().zip(&self.values) {
            let a = (l - lse).exp();
            for (o, x) in out.iter_mut().zip(v) {
                *o += a * x;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Tensor {
        Tensor::from_fn(&[r, c], |_| scale * rng.random_range(-1.0..1.0))
    }

    #[test]
    fn init_state_is_zero() {
        let cfg = CamConfig::default();
        let s = CamLayer::new(&cfg, 1).unwrap().init_state(3);
        assert_eq!(s.t, 0);
        assert!(s
            .slices
            .iter()
            .flatten()
            .all(|sl| sl.n.sum() == 0.0 && sl.psi.sum() == 0.0));
        assert!(s.key_stats.is_none());

        let thick = CamConfig {
            mechanism: Mechanism::FavorPlusPlus,
            thicken: Some(5),
            ..CamConfig::default()
        };
        let s = CamLayer::new(&thick, 1).unwrap().init_state(2);
        assert_eq!(s.slices.len(), 5);
        let k = s.key_stats.unwrap();
        assert_eq!(k.key_sum.sum(), 0.0);
        assert_eq!(k.key_norm_sq.sum(), 0.0);
    }

    #[test]
    fn empty_memory_query_fails() {
        let cfg = CamConfig::default();
        let layer = CamLayer::new(&cfg, 1).unwrap();
        let mut s = layer.init_state(1);
        let err = layer.read(&mut s, &Tensor::zeros(&[1, 16])).unwrap_err();
        assert!(matches!(err, Error::EmptyMemory(_)));
    }

    #[test]
    fn undiscounted_update_adds_outer_product() {
        let cfg = CamConfig {
            input_dim: 3,
            qk_dim: 2,
            features: 4,
            discount: 0.0,
            ..CamConfig::default()
        };
        let layer = CamLayer::new(&cfg, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = layer.init_state(1);
        layer
            .update(
                &mut s,
                &rand_matrix(&mut rng, 1, 2, 1.0),
                &rand_matrix(&mut rng, 1, 3, 1.0),
            )
            .unwrap();
        let before = s.memory_matrix(0, 0, 0);
        let k = rand_matrix(&mut rng, 1, 2, 1.0);
        let v = rand_matrix(&mut rng, 1, 3, 1.0);
        layer.update(&mut s, &k, &v).unwrap();
        let phi = layer.projections()[0].phi(k.data()).unwrap();
        let after = s.memory_matrix(0, 0, 0);
        for i in 0..4 {
            for j in 0..3 {
                let want = before.data()[i * 3 + j] + phi[i] * v.data()[j];
                assert!((after.data()[i * 3 + j] - want).abs() < 1e-14 * want.abs().max(1.0));
            }
        }
        assert_eq!(s.t, 2);
    }

    #[test]
    fn single_pattern_reads_back_its_value() {
        let cfg = CamConfig {
            input_dim: 4,
            qk_dim: 4,
            features: 8,
            ..CamConfig::default()
        };
        let layer = CamLayer::new(&cfg, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = layer.init_state(1);
        let v = rand_matrix(&mut rng, 1, 4, 2.0);
        layer
            .update(&mut s, &rand_matrix(&mut rng, 1, 4, 1.0), &v)
            .unwrap();
        for _ in 0..5 {
            let delta = layer
                .read(&mut s, &rand_matrix(&mut rng, 1, 4, 1.5))
                .unwrap();
            assert!(delta.max_abs_diff(&v) < 1e-12);
        }
    }

    #[test]
    fn update_dimension_mismatch() {
        let cfg = CamConfig::default();
        let layer = CamLayer::new(&cfg, 2).unwrap();
        let mut s = layer.init_state(1);
        assert!(layer
            .update(&mut s, &Tensor::zeros(&[1, 3]), &Tensor::zeros(&[1, 16]))
            .is_err());
    }

    #[test]
    fn grid_tie_goes_to_lower_index() {
        let cfg = CamConfig {
            mechanism: Mechanism::FavorPlusPlus,
            thicken: Some(8),
            ..CamConfig::default()
        };
        let grid = cfg.rho_grid();
        assert_eq!(grid[0], 1.0 / 16.0);
        assert_eq!(grid[7], 15.0 / 16.0);
        assert_eq!(nearest_grid_index(&grid, 0.25), 1);
        assert_eq!(nearest_grid_index(&grid, 0.2501), 2);
        assert_eq!(nearest_grid_index(&grid, 0.99), 7);
    }

    #[test]
    fn config_validation() {
        let bad = CamConfig {
            heads: 3,
            ..CamConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = CamConfig {
            discount: -0.1,
            ..CamConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = CamConfig {
            thicken: Some(4),
            ..CamConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(CamConfig::light().validate().is_ok());
    }
}
