//! Random-feature linearizations of the softmax kernel `K(x, y) = exp(x^T y)`.
//!
//! Three positive maps are provided: FAVOR+, hyperbolic-cosine (antithetic
//! FAVOR+) and FAVOR++ with its free parameter `rho`. Each returns an
//! `r`-vector `phi(z)` with `E[phi(x)^T phi(y)] = exp(x^T y)`.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Var;
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mechanism {
    FavorPlus,
    HyperbolicCosine,
    FavorPlusPlus,
}

impl Mechanism {
    pub const ALL: [Mechanism; 3] = [
        Mechanism::FavorPlus,
        Mechanism::HyperbolicCosine,
        Mechanism::FavorPlusPlus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::FavorPlus => "favor+",
            Mechanism::HyperbolicCosine => "hyperbolic",
            Mechanism::FavorPlusPlus => "favor++",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "favor+" | "favor-plus" | "fp" => Ok(Mechanism::FavorPlus),
            "hyperbolic" | "hyperbolic-cosine" | "hyp" => Ok(Mechanism::HyperbolicCosine),
            "favor++" | "favor-plus-plus" | "fpp" => Ok(Mechanism::FavorPlusPlus),
            other => Err(Error::param(
                "mechanism",
                format!("unknown mechanism `{other}`"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RfSpec {
    pub mechanism: Mechanism,
    /// Output feature count `r`.
    pub features: usize,
    pub input_dim: usize,
    pub orthogonal: bool,
    /// FAVOR++ free parameter, strictly inside (0, 1).
    pub rho: f64,
    pub seed: u64,
}

impl RfSpec {
    pub fn new(mechanism: Mechanism, features: usize, input_dim: usize, seed: u64) -> Self {
        Self {
            mechanism,
            features,
            input_dim,
            orthogonal: true,
            rho: 0.5,
            seed,
        }
    }

    pub fn with_orthogonal(mut self, orthogonal: bool) -> Self {
        self.orthogonal = orthogonal;
        self
    }

    pub fn with_rho(mut self, rho: f64) -> Self {
        self.rho = rho;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.features == 0 {
            return Err(Error::param("features", "must be at least 1"));
        }
        if self.input_dim == 0 {
            return Err(Error::param("input_dim", "must be at least 1"));
        }
        if self.mechanism == Mechanism::HyperbolicCosine && !self.features.is_multiple_of(2) {
            return Err(Error::param(
                "features",
                format!(
                    "hyperbolic features need an even count, got {}",
                    self.features
                ),
            ));
        }
        if self.mechanism == Mechanism::FavorPlusPlus {
            check_rho(self.rho)?;
        }
        Ok(())
    }

    /// Number of sampled projection rows.
    pub fn base_rows(&self) -> usize {
        match self.mechanism {
            Mechanism::HyperbolicCosine => self.features / 2,
            _ => self.features,
        }
    }
}

fn check_rho(rho: f64) -> Result<()> {
    if !(rho > 0.0 && rho < 1.0) {
        return Err(Error::param(
            "rho",
            format!("must lie strictly inside (0, 1), got {rho}"),
        ));
    }
    Ok(())
}

/// Derived FAVOR++ constants for a given `rho` and input dimension.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FavorPpConstants {
    pub a_hat: f64,
    pub b: f64,
    pub c: f64,
    /// `log D` with `D = (1 + 4 a_hat)^(N/4)`.
    pub log_d: f64,
}

impl FavorPpConstants {
    pub fn new(rho: f64, input_dim: usize) -> Result<Self> {
        check_rho(rho)?;
        let a_hat = 1.0 / rho - 1.0;
        Ok(Self {
            a_hat,
            b: (1.0 + 4.0 * a_hat).sqrt(),
            c: -0.5,
            log_d: 0.25 * input_dim as f64 * (1.0 + 4.0 * a_hat).ln(),
        })
    }

    pub fn d(&self) -> f64 {
        self.log_d.exp()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RfProjection {
    spec: RfSpec,
    /// `base_rows x N`.
    omega: Tensor,
    norms_sq: Vec<f64>,
}

pub fn sample_projections(spec: &RfSpec) -> Result<RfProjection> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let omega = sample_omega(&mut rng, spec.base_rows(), spec.input_dim, spec.orthogonal);
    RfProjection::from_omega(spec.clone(), omega)
}

/// Gaussian rows, optionally made block-orthogonal with chi(N)-distributed norms.
pub fn sample_omega<R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    n: usize,
    orthogonal: bool,
) -> Tensor {
    let mut data = Vec::with_capacity(rows * n);
    if !orthogonal {
        data.extend((0..rows * n).map(|_| rng.sample::<f64, _>(StandardNormal)));
        return Tensor::matrix(rows, n, data).expect("sized");
    }
    let chi2 = ChiSquared::new(n as f64).expect("positive dof");
    let mut remaining = rows;
    while remaining > 0 {
        let take = remaining.min(n);
        let block = gram_schmidt_block(rng, n);
        for row in block.chunks(n).take(take) {
            let norm = chi2.sample(rng).sqrt();
            data.extend(row.iter().map(|v| v * norm));
        }
        remaining -= take;
    }
    Tensor::matrix(rows, n, data).expect("sized")
}

/// `n` orthonormal rows from Gram-Schmidt on a Gaussian `n x n` block.
fn gram_schmidt_block<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..n)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        // two passes keep the block orthogonal to ~1e-15
        for _ in 0..2 {
            for u in &rows {
                let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                for (a, b) in v.iter_mut().zip(u) {
                    *a -= p * b;
                }
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-8 {
            continue;
        }
        rows.push(v.into_iter().map(|a| a / norm).collect());
    }
    rows.concat()
}

impl RfProjection {
    pub fn from_omega(spec: RfSpec, omega: Tensor) -> Result<Self> {
        spec.validate()?;
        if omega.shape() != [spec.base_rows(), spec.input_dim] {
            return Err(Error::InvalidShape {
                op: "rf_projection",
                shape: omega.shape().to_vec(),
                reason: format!("expected [{}, {}]", spec.base_rows(), spec.input_dim),
            });
        }
        let n = spec.input_dim;
        let norms_sq = omega
            .data()
            .chunks(n)
            .map(|r| r.iter().map(|v| v * v).sum())
            .collect();
        Ok(Self {
            spec,
            omega,
            norms_sq,
        })
    }

    pub fn spec(&self) -> &RfSpec {
        &self.spec
    }

    pub fn omega(&self) -> &Tensor {
        &self.omega
    }

    pub fn norms_sq(&self) -> &[f64] {
        &self.norms_sq
    }

    pub fn features(&self) -> usize {
        self.spec.features
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    fn check_input(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.spec.input_dim {
            return Err(Error::ShapeMismatch {
                op: "phi",
                left: vec![self.spec.input_dim],
                right: vec![z.len()],
            });
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("random-feature input"));
        }
        Ok(())
    }

    /// `omega_i^T z` for every projection row.
    pub fn project(&self, z: &[f64]) -> Vec<f64> {
        self.omega
            .data()
            .chunks(self.spec.input_dim)
            .map(|w| w.iter().zip(z).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// The spec's own mechanism (FAVOR++ at `spec.rho`).
    pub fn phi(&self, z: &[f64]) -> Result<Vec<f64>> {
        match self.spec.mechanism {
            Mechanism::FavorPlus => self.phi_favor_plus(z),
            Mechanism::HyperbolicCosine => self.phi_hyperbolic(z),
            Mechanism::FavorPlusPlus => self.phi_favor_pp(z, self.spec.rho),
        }
    }

    pub fn phi_favor_plus(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_input(z)?;
        let r = self.omega.shape()[0] as f64;
        let shift = -0.5 * dot(z, z) - 0.5 * r.ln();
        Ok(self
            .project(z)
            .into_iter()
            .map(|p| (p + shift).exp())
            .collect())
    }

    /// `r/2` antithetic pairs, laid out as all `exp(+w^T z)` terms then all `exp(-w^T z)` terms.
    pub fn phi_hyperbolic(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_input(z)?;
        let r = 2.0 * self.omega.shape()[0] as f64;
        let shift = -0.5 * dot(z, z) - 0.5 * r.ln();
        let proj = self.project(z);
        let mut out: Vec<f64> = proj.iter().map(|p| (p + shift).exp()).collect();
        out.extend(proj.iter().map(|p| (-p + shift).exp()));
        Ok(out)
    }

    pub fn phi_favor_pp(&self, z: &[f64], rho: f64) -> Result<Vec<f64>> {
        Ok(self
            .log_phi_favor_pp(z, rho)?
            .into_iter()
            .map(f64::exp)
            .collect())
    }

    /// Log-magnitudes of the (always positive) FAVOR++ features.
    pub fn log_phi_favor_pp(&self, z: &[f64], rho: f64) -> Result<Vec<f64>> {
        self.check_input(z)?;
        let k = FavorPpConstants::new(rho, self.spec.input_dim)?;
        let r = self.omega.shape()[0] as f64;
        let shift = k.log_d - 0.5 * r.ln() + k.c * dot(z, z);
        Ok(self
            .project(z)
            .into_iter()
            .zip(&self.norms_sq)
            .map(|(p, n2)| -k.a_hat * n2 + k.b * p + shift)
            .collect())
    }

    /// Batched features on a tape: `z` is `P x N`, the result `P x r`.
    pub fn phi_var<'t>(&self, z: Var<'t>, rho: f64) -> Result<Var<'t>> {
        Ok(self.log_phi_var(z, rho)?.exp())
    }

    /// Features of each row divided by that row's largest feature.
    ///
    /// Attention ratios are invariant to a per-query factor, so this changes
    /// neither values nor gradients of a normalized readout while keeping the
    /// features away from underflow for large queries.
    pub fn phi_var_row_scaled<'t>(&self, z: Var<'t>, rho: f64) -> Result<Var<'t>> {
        let logs = self.log_phi_var(z, rho)?;
        let v = logs.value();
        let (p, _) = v.dims2();
        let maxes: Vec<f64> = (0..p)
            .map(|i| v.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let maxes = z.tape().constant(Tensor::matrix(p, 1, maxes)?);
        Ok(logs.sub(maxes)?.exp())
    }

    /// Log-features on a tape.
    pub fn log_phi_var<'t>(&self, z: Var<'t>, rho: f64) -> Result<Var<'t>> {
        let tape = z.tape();
        let omega_t = tape.constant(tensor::transpose(&self.omega)?);
        let proj = z.matmul(omega_t)?;
        let sq = z.square().sum_axis(1)?;
        let base = self.omega.shape()[0] as f64;
        match self.spec.mechanism {
            Mechanism::FavorPlus => {
                let shift = sq.scale(-0.5).add_scalar(-0.5 * base.ln());
                proj.add(shift)
            }
            Mechanism::HyperbolicCosine => {
                let shift = sq.scale(-0.5).add_scalar(-0.5 * (2.0 * base).ln());
                let pos = proj.add(shift)?;
                let neg = proj.neg().add(shift)?;
                tape.concat(&[pos, neg], 1)
            }
            Mechanism::FavorPlusPlus => {
                let k = FavorPpConstants::new(rho, self.spec.input_dim)?;
                let row: Vec<f64> = self
                    .norms_sq
                    .iter()
                    .map(|n2| -k.a_hat * n2 + k.log_d - 0.5 * base.ln())
                    .collect();
                let row = tape.constant(Tensor::matrix(1, row.len(), row)?);
                let shift = sq.scale(k.c);
                proj.scale(k.b).add(row)?.add(shift)
            }
        }
    }

    /// `phi(x)^T phi(y)` with the spec's mechanism.
    pub fn kernel_estimate(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let (fx, fy) = (self.phi(x)?, self.phi(y)?);
        Ok(dot(&fx, &fy))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Smallest value returned for `rho*` at `gamma = 0`.
pub const RHO_EPS: f64 = 1e-6;

/// Variance-derivative-optimal FAVOR++ parameter for a data statistic `gamma`.
pub fn optimal_rho(gamma: f64, input_dim: usize) -> Result<f64> {
    if gamma.is_nan() || gamma < 0.0 {
        return Err(Error::param(
            "gamma",
            format!("must be nonnegative, got {gamma}"),
        ));
    }
    if gamma == 0.0 {
        return Ok(1.0 - RHO_EPS);
    }
    let n = input_dim as f64;
    let s = 2.0 * gamma + n;
    if !gamma.is_finite() {
        return Ok(f64::MIN_POSITIVE);
    }
    // (sqrt(s^2 + 8 n g) - s) / (4 g), rationalised to avoid cancellation at small g
    let rho = 2.0 * n / ((s * s + 8.0 * n * gamma).sqrt() + s);
    Ok(rho.clamp(f64::MIN_POSITIVE, 1.0 - RHO_EPS))
}

/// `(1/M^2) sum_ij ||q_i + k_j||^2` computed through running sums.
pub fn gamma_bidirectional(queries: &[Vec<f64>], keys: &[Vec<f64>]) -> Result<f64> {
    if queries.len() != keys.len() || queries.is_empty() {
        return Err(Error::param(
            "queries",
            format!(
                "need equal nonzero counts, got {} and {}",
                queries.len(),
                keys.len()
            ),
        ));
    }
    let m = queries.len() as f64;
    let n = queries[0].len();
    let mut qs = vec![0.0; n];
    let mut ks = vec![0.0; n];
    let (mut qn, mut kn) = (0.0, 0.0);
    for (q, k) in queries.iter().zip(keys) {
        qn += dot(q, q);
        kn += dot(k, k);
        for i in 0..n {
            qs[i] += q[i];
            ks[i] += k[i];
        }
    }
    Ok((m * qn + m * kn + 2.0 * dot(&qs, &ks)) / (m * m))
}

/// Running key statistics for the streaming (causal) `gamma_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct GammaStream {
    pub key_sum: Vec<f64>,
    pub key_norm_sq_sum: f64,
    pub count: usize,
}

impl GammaStream {
    pub fn new(dim: usize) -> Self {
        Self {
            key_sum: vec![0.0; dim],
            key_norm_sq_sum: 0.0,
            count: 0,
        }
    }

    pub fn push(&mut self, key: &[f64]) {
        for (s, k) in self.key_sum.iter_mut().zip(key) {
            *s += k;
        }
        self.key_norm_sq_sum += dot(key, key);
        self.count += 1;
    }

    pub fn gamma(&self, query: &[f64]) -> Result<f64> {
        gamma_unidirectional(&self.key_sum, self.key_norm_sq_sum, query, self.count)
    }
}

/// `(1/t) sum_{j<=t} ||q + k_j||^2` from `sum_j k_j`, `sum_j ||k_j||^2` and `t`.
pub fn gamma_unidirectional(
    key_sum: &[f64],
    key_norm_sq_sum: f64,
    query: &[f64],
    t: usize,
) -> Result<f64> {
    if t == 0 {
        return Err(Error::EmptyMemory("gamma_t needs at least one key".into()));
    }
    let t = t as f64;
    Ok((t * dot(query, query) + key_norm_sq_sum + 2.0 * dot(query, key_sum)) / t)
}
