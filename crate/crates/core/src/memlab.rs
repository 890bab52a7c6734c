//! Associative-memory experiments over `{-1, +1}^N` patterns.
//!
//! Two energies are compared: the regular exponential energy
//! `E_reg(xi) = -sum_mu exp(xi^T xi_mu)` and the compact random-feature energy
//! `E_rand(xi) = phi(xi)^T M` with `M = -sum_mu phi(xi_mu)` and FAVOR++ features.
//! Both are negative, so they are handled as `log(-E)`; larger means lower energy.

use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rf::{self, sample_projections, FavorPpConstants, Mechanism, RfProjection, RfSpec};
use crate::tasks::rng_for;
use crate::tensor::log_sum_exp;

/// Attempts allowed when drawing a separated pattern set.
pub const REJECTION_BUDGET: usize = 100_000;

/// `f(0..n)` on up to `threads` scoped workers, in index order.
pub fn par_map<T: Send>(
    n: usize,
    threads: usize,
    f: impl Fn(usize) -> Result<T> + Sync,
) -> Result<Vec<T>> {
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(&f).collect();
    }
    let chunk = n.div_ceil(threads);
    let f = &f;
    let parts: Vec<Result<Vec<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|w| {
                s.spawn(move || {
                    (w * chunk..((w + 1) * chunk).min(n))
                        .map(f)
                        .collect::<Result<Vec<T>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker panicked"))
            .collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn hamming(a: &[f64], b: &[f64]) -> usize {
    a.iter().zip(b).filter(|(x, y)| x != y).count()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatternSet {
    dim: usize,
    patterns: Vec<Vec<f64>>,
    min_hamming: usize,
}

impl PatternSet {
    pub fn new(patterns: Vec<Vec<f64>>) -> Result<Self> {
        let dim = patterns.first().map_or(0, Vec::len);
        for p in &patterns {
            if p.len() != dim {
                return Err(Error::ShapeMismatch {
                    op: "pattern_set",
                    left: vec![dim],
                    right: vec![p.len()],
                });
            }
            if p.iter().any(|&v| v != 1.0 && v != -1.0) {
                return Err(Error::param("patterns", "entries must be +1 or -1"));
            }
        }
        let mut min_hamming = dim;
        for i in 0..patterns.len() {
            for j in 0..i {
                min_hamming = min_hamming.min(hamming(&patterns[i], &patterns[j]));
            }
        }
        Ok(Self {
            dim,
            patterns,
            min_hamming,
        })
    }

    /// `m` uniform patterns, each redrawn until it is at least `min_sep` bits from the others.
    pub fn random(dim: usize, m: usize, min_sep: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut patterns: Vec<Vec<f64>> = Vec::with_capacity(m);
        let mut attempts = 0;
        while patterns.len() < m {
            attempts += 1;
            if attempts > REJECTION_BUDGET {
                return Err(Error::Infeasible(format!(
                    "no {m} patterns in dimension {dim} with pairwise distance >= {min_sep} after {REJECTION_BUDGET} draws"
                )));
            }
            let p = random_pattern(dim, rng);
            if patterns.iter().all(|q| hamming(q, &p) >= min_sep) {
                patterns.push(p);
            }
        }
        Self::new(patterns)
    }

    /// A random pattern and its negation: separation exactly `N`.
    pub fn antipodal(dim: usize, rng: &mut impl Rng) -> Self {
        let p = random_pattern(dim, rng);
        let q = p.iter().map(|v| -v).collect();
        Self::new(vec![p, q]).expect("valid")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn patterns(&self) -> &[Vec<f64>] {
        &self.patterns
    }

    pub fn min_hamming(&self) -> usize {
        self.min_hamming
    }
}

pub fn random_pattern(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..dim)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect()
}

/// `xi` with `bits` distinct random coordinates negated; also returns the flipped indices.
pub fn corrupt(xi: &[f64], bits: usize, rng: &mut impl Rng) -> (Vec<f64>, Vec<usize>) {
    let idx = sample(rng, xi.len(), bits.min(xi.len())).into_vec();
    let mut out = xi.to_vec();
    for &i in &idx {
        out[i] = -out[i];
    }
    (out, idx)
}

/// `log(-E_reg(xi))`.
pub fn log_neg_energy_regular(xi: &[f64], patterns: &PatternSet) -> f64 {
    let dots: Vec<f64> = patterns.patterns.iter().map(|p| dot(xi, p)).collect();
    log_sum_exp(&dots)
}

pub fn energy_regular(xi: &[f64], patterns: &PatternSet) -> f64 {
    -log_neg_energy_regular(xi, patterns).exp()
}

/// The compact energy's memory vector, kept as `log |M_i|` (every entry of `M` is negative).
#[derive(Clone, Debug, PartialEq)]
pub struct CompactMemory {
    projection: RfProjection,
    rho: f64,
    consts: FavorPpConstants,
    log_mem: Vec<f64>,
    count: usize,
}

impl CompactMemory {
    pub fn new(projection: RfProjection, rho: f64) -> Result<Self> {
        let consts = FavorPpConstants::new(rho, projection.input_dim())?;
        let r = projection.omega().shape()[0];
        Ok(Self {
            projection,
            rho,
            consts,
            log_mem: vec![f64::NEG_INFINITY; r],
            count: 0,
        })
    }

    pub fn from_patterns(
        projection: RfProjection,
        rho: f64,
        patterns: &PatternSet,
    ) -> Result<Self> {
        let mut m = Self::new(projection, rho)?;
        for p in patterns.patterns() {
            m.insert(p)?;
        }
        Ok(m)
    }

    /// `M <- M - phi(xi)`, in `O(N r)`.
    pub fn insert(&mut self, xi: &[f64]) -> Result<()> {
        let logs = self.projection.log_phi_favor_pp(xi, self.rho)?;
        for (m, l) in self.log_mem.iter_mut().zip(logs) {
            *m = log_add_exp(*m, l);
        }
        self.count += 1;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn projection(&self) -> &RfProjection {
        &self.projection
    }

    /// `log |M_i|` per feature.
    pub fn log_memory(&self) -> &[f64] {
        &self.log_mem
    }

    /// `log(-E_rand)` from projections `omega_i^T xi` and `||xi||^2`; `O(r)`.
    pub fn log_neg_energy_projected(&self, proj: &[f64], norm_sq: f64) -> f64 {
        let k = &self.consts;
        let r = self.log_mem.len() as f64;
        let shift = k.log_d - 0.5 * r.ln() + k.c * norm_sq;
        let terms: Vec<f64> = proj
            .iter()
            .zip(self.projection.norms_sq())
            .zip(&self.log_mem)
            .map(|((p, n2), m)| -k.a_hat * n2 + k.b * p + shift + m)
            .collect();
        log_sum_exp(&terms)
    }

    pub fn log_neg_energy(&self, xi: &[f64]) -> f64 {
        self.log_neg_energy_projected(&self.projection.project(xi), dot(xi, xi))
    }

    /// `E_rand(xi)`; zero for an empty memory.
    pub fn energy(&self, xi: &[f64]) -> f64 {
        -self.log_neg_energy(xi).exp()
    }
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyKind {
    RegularExp,
    CompactRf,
}

impl EnergyKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::RegularExp => "regular",
            Self::CompactRf => "compact",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EnergyModel {
    Regular(PatternSet),
    Compact(CompactMemory),
}

/// Per-state quantities that let a single-coordinate flip be scored without a full recomputation.
enum Cache {
    /// `xi^T xi_mu` per pattern.
    Dots(Vec<f64>),
    /// `omega_i^T xi` per projection row.
    Proj(Vec<f64>),
}

impl EnergyModel {
    pub fn kind(&self) -> EnergyKind {
        match self {
            Self::Regular(_) => EnergyKind::RegularExp,
            Self::Compact(_) => EnergyKind::CompactRf,
        }
    }

    pub fn log_neg_energy(&self, xi: &[f64]) -> f64 {
        match self {
            Self::Regular(p) => log_neg_energy_regular(xi, p),
            Self::Compact(c) => c.log_neg_energy(xi),
        }
    }

    pub fn energy(&self, xi: &[f64]) -> f64 {
        -self.log_neg_energy(xi).exp()
    }

    fn cache(&self, xi: &[f64]) -> Cache {
        match self {
            Self::Regular(p) => Cache::Dots(p.patterns.iter().map(|q| dot(xi, q)).collect()),
            Self::Compact(c) => Cache::Proj(c.projection.project(xi)),
        }
    }

    /// `log(-E)` of the current state and of the state with coordinate `j` negated.
    fn flip_scores(
        &self,
        xi: &[f64],
        cache: &Cache,
        j: usize,
        scratch: &mut Vec<f64>,
    ) -> (f64, f64) {
        let n2 = xi.len() as f64;
        match (self, cache) {
            (Self::Regular(p), Cache::Dots(d)) => {
                scratch.clear();
                scratch.extend(
                    d.iter()
                        .zip(&p.patterns)
                        .map(|(v, q)| v - 2.0 * xi[j] * q[j]),
                );
                (log_sum_exp(d), log_sum_exp(scratch))
            }
            (Self::Compact(c), Cache::Proj(pr)) => {
                let n = xi.len();
                let w = c.projection.omega().data();
                scratch.clear();
                scratch.extend(
                    pr.iter()
                        .enumerate()
                        .map(|(i, v)| v - 2.0 * xi[j] * w[i * n + j]),
                );
                (
                    c.log_neg_energy_projected(pr, n2),
                    c.log_neg_energy_projected(scratch, n2),
                )
            }
            _ => unreachable!("cache built by the same model"),
        }
    }

    fn apply_flip(&self, xi: &[f64], cache: &mut Cache, j: usize) {
        match (self, cache) {
            (Self::Regular(p), Cache::Dots(d)) => {
                for (v, q) in d.iter_mut().zip(&p.patterns) {
                    *v -= 2.0 * xi[j] * q[j];
                }
            }
            (Self::Compact(c), Cache::Proj(pr)) => {
                let n = xi.len();
                let w = c.projection.omega().data();
                for (i, v) in pr.iter_mut().enumerate() {
                    *v -= 2.0 * xi[j] * w[i * n + j];
                }
            }
            _ => unreachable!("cache built by the same model"),
        }
    }
}

/// One accepted flip with the energies around it (as `log(-E)`).
#[derive(Clone, Debug, PartialEq)]
pub struct Flip {
    pub step: usize,
    pub coordinate: usize,
    pub log_neg_before: f64,
    pub log_neg_after: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub state: Vec<f64>,
    /// Proposals made.
    pub steps: usize,
    pub flips: Vec<Flip>,
    /// Ended at a state no single flip improves.
    pub converged: bool,
}

impl Trajectory {
    /// Every accepted flip strictly lowered the energy.
    pub fn energy_monotone(&self) -> bool {
        self.flips
            .iter()
            .all(|f| f.log_neg_after > f.log_neg_before)
    }
}

/// Asynchronous dynamics: a uniformly random coordinate is proposed each step
/// and set to whichever sign gives the lower energy; exact ties keep the value.
///
/// After `N` consecutive proposals without a change, every coordinate is checked;
/// the run ends if none would change, otherwise proposals continue.
pub fn flip_dynamics(
    xi0: &[f64],
    model: &EnergyModel,
    max_steps: usize,
    rng: &mut impl Rng,
) -> Trajectory {
    let n = xi0.len();
    let mut xi = xi0.to_vec();
    let mut cache = model.cache(&xi);
    let mut scratch = Vec::new();
    let mut flips = Vec::new();
    let mut quiet = 0;
    let mut steps = 0;
    let mut converged = false;
    while steps < max_steps && n > 0 {
        let j = rng.random_range(0..n);
        steps += 1;
        let (stay, flip) = model.flip_scores(&xi, &cache, j, &mut scratch);
        if flip > stay {
            model.apply_flip(&xi, &mut cache, j);
            xi[j] = -xi[j];
            flips.push(Flip {
                step: steps,
                coordinate: j,
                log_neg_before: stay,
                log_neg_after: flip,
            });
            quiet = 0;
            continue;
        }
        quiet += 1;
        if quiet >= n {
            let stuck = (0..n).all(|k| {
                let (s, f) = model.flip_scores(&xi, &cache, k, &mut scratch);
                f <= s
            });
            if stuck {
                converged = true;
                break;
            }
            quiet = 0;
        }
    }
    Trajectory {
        state: xi,
        steps,
        flips,
        converged,
    }
}

/// FAVOR++ parameter for a pattern set: `rho*` at the mean `||xi_a + xi_b||^2` over pattern pairs.
pub fn pattern_rho(patterns: &PatternSet) -> Result<f64> {
    if patterns.is_empty() {
        return Ok(0.5);
    }
    let g = rf::gamma_bidirectional(patterns.patterns(), patterns.patterns())?;
    rf::optimal_rho(g, patterns.dim())
}

pub fn compact_model(
    patterns: &PatternSet,
    features: usize,
    rho: f64,
    orthogonal: bool,
    seed: u64,
) -> Result<CompactMemory> {
    let spec = RfSpec::new(Mechanism::FavorPlusPlus, features, patterns.dim(), seed)
        .with_rho(rho)
        .with_orthogonal(orthogonal);
    CompactMemory::from_patterns(sample_projections(&spec)?, rho, patterns)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RetrievalParams {
    pub dim: usize,
    pub patterns: usize,
    /// Corrupted fraction of bits.
    pub rho: f64,
    /// Required pairwise separation as a fraction of `dim`.
    pub tau_sep: f64,
    pub features: usize,
    pub trials: usize,
    pub seed: u64,
    /// FAVOR++ parameter; `None` picks `rho*` per pattern set.
    pub rf_rho: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RetrievalRow {
    pub n: usize,
    pub m: usize,
    pub rho: f64,
    pub tau_sep: f64,
    pub r: usize,
    pub mechanism: &'static str,
    pub trials: usize,
    pub success_rate: f64,
    pub wall_time: f64,
}

/// Fraction of exact recoveries of a stored pattern from `floor(rho N)` corrupted bits,
/// for both energies on the same pattern sets and corruptions.
/// Trials are seeded independently and spread over `threads` workers; results do not depend on `threads`.
pub fn retrieval_experiment(p: &RetrievalParams, threads: usize) -> Result<Vec<RetrievalRow>> {
    if !(p.rho >= 0.0 && p.rho < p.tau_sep / 2.0) {
        return Err(Error::param(
            "rho",
            format!(
                "corruption {} must be below tau_sep / 2 = {}",
                p.rho,
                p.tau_sep / 2.0
            ),
        ));
    }
    if p.trials == 0 || p.patterns == 0 || p.dim == 0 || p.features == 0 {
        return Err(Error::param(
            "retrieval",
            "dim, patterns, features and trials must be positive",
        ));
    }
    let min_sep = (p.tau_sep * p.dim as f64).ceil() as usize;
    let bits = (p.rho * p.dim as f64).floor() as usize;
    let max_steps = 200 * p.dim;
    let trials = par_map(p.trials, threads, |t| -> Result<[(bool, f64); 2]> {
        let mut rng = rng_for(p.seed, &format!("trial/{t}"));
        let set = PatternSet::random(p.dim, p.patterns, min_sep, &mut rng)?;
        let l = rng.random_range(0..set.len());
        let (start, _) = corrupt(&set.patterns[l], bits, &mut rng);
        let rf_rho = match p.rf_rho {
            Some(r) => r,
            None => pattern_rho(&set)?,
        };
        let compact = compact_model(&set, p.features, rf_rho, true, rng.random())?;
        let dyn_seed: u64 = rng.random();
        let target = set.patterns[l].clone();
        let mut out = [(false, 0.0); 2];
        for (slot, model) in [EnergyModel::Regular(set), EnergyModel::Compact(compact)]
            .iter()
            .enumerate()
        {
            let t0 = Instant::now();
            let traj = flip_dynamics(
                &start,
                model,
                max_steps,
                &mut ChaCha8Rng::seed_from_u64(dyn_seed),
            );
            out[slot] = (traj.state == target, t0.elapsed().as_secs_f64());
        }
        Ok(out)
    })?;
    let mut wins = [0usize; 2];
    let mut time = [0f64; 2];
    for t in &trials {
        for slot in 0..2 {
            wins[slot] += t[slot].0 as usize;
            time[slot] += t[slot].1;
        }
    }
    Ok([EnergyKind::RegularExp, EnergyKind::CompactRf]
        .iter()
        .enumerate()
        .map(|(i, k)| RetrievalRow {
            n: p.dim,
            m: p.patterns,
            rho: p.rho,
            tau_sep: p.tau_sep,
            r: if *k == EnergyKind::RegularExp {
                0
            } else {
                p.features
            },
            mechanism: k.name(),
            trials: p.trials,
            success_rate: wins[i] as f64 / p.trials as f64,
            wall_time: time[i],
        })
        .collect())
}

/// `log` of the largest pattern count covered by the storage theorem:
/// `2 N (tau - 2 rho) + log((1 - e^-2) / (2 e^2))`.
pub fn log_capacity_bound(dim: usize, tau: f64, rho: f64) -> f64 {
    2.0 * dim as f64 * (tau - 2.0 * rho) + ((1.0 - (-2f64).exp()) / (2.0 * 2f64.exp())).ln()
}

/// Errors naming the first violated condition of the storage theorem.
pub fn check_storage_hypothesis(dim: usize, m: usize, tau: f64, rho: f64) -> Result<()> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::HypothesisViolated(format!(
            "separation tau = {tau} must lie in (0, 1]"
        )));
    }
    if !(rho > 0.0 && rho < tau / 2.0) {
        return Err(Error::HypothesisViolated(format!(
            "radius rho = {rho} must lie in (0, tau/2 = {})",
            tau / 2.0
        )));
    }
    if ((rho * dim as f64).floor() as usize) == 0 {
        return Err(Error::HypothesisViolated(format!(
            "radius rho * N = {} admits no corrupted bit",
            rho * dim as f64
        )));
    }
    let bound = log_capacity_bound(dim, tau, rho);
    if (m as f64).ln() > bound {
        return Err(Error::HypothesisViolated(format!(
            "M = {m} exceeds the capacity bound exp({bound:.3})"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SignCheckParams {
    pub dim: usize,
    pub patterns: usize,
    pub tau_sep: f64,
    pub rho: f64,
    /// Independent projection draws averaged per configuration.
    pub draws: usize,
    /// Features per draw.
    pub features: usize,
    pub configurations: usize,
    /// FAVOR++ parameter; `None` picks `rho*` per pattern set.
    pub rf_rho: Option<f64>,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SignCheckRow {
    pub n: usize,
    pub m: usize,
    pub rho: f64,
    pub tau_sep: f64,
    pub r: usize,
    pub configurations: usize,
    pub case1: usize,
    pub case2: usize,
    pub agree: usize,
    pub disagree: usize,
    pub inconclusive: usize,
    pub sign_rate: f64,
    pub wall_time: f64,
}

/// Empirical check of the storage theorem's sign claim.
///
/// Each configuration draws a separated pattern set, a near pattern `xi_l`, an input
/// in its Hamming ball and one coordinate. Even configurations flip a coordinate
/// that agrees with `xi_l` (energy should rise), odd ones a corrupted coordinate
/// (energy should fall). The mean of `E_rand(flipped) - E_rand(input)` over
/// independent draws is conclusive when it is more than three standard errors from zero.
pub fn theorem1_sign_check(p: &SignCheckParams, threads: usize) -> Result<SignCheckRow> {
    check_storage_hypothesis(p.dim, p.patterns, p.tau_sep, p.rho)?;
    if p.draws < 2 || p.features == 0 || p.configurations == 0 {
        return Err(Error::param(
            "sign_check",
            "need draws >= 2, features >= 1 and configurations >= 1",
        ));
    }
    let t0 = Instant::now();
    let min_sep = (p.tau_sep * p.dim as f64).ceil() as usize;
    let max_bits = (p.rho * p.dim as f64).floor() as usize;
    let mut row = SignCheckRow {
        n: p.dim,
        m: p.patterns,
        rho: p.rho,
        tau_sep: p.tau_sep,
        r: p.features,
        configurations: p.configurations,
        ..SignCheckRow::default()
    };
    // Some(true) agrees with the theorem, Some(false) contradicts it, None is inconclusive.
    let verdicts = par_map(p.configurations, threads, |c| -> Result<Option<bool>> {
        let mut rng = rng_for(p.seed, &format!("configuration/{c}"));
        let set = if p.patterns == 2 && min_sep == p.dim {
            PatternSet::antipodal(p.dim, &mut rng)
        } else {
            PatternSet::random(p.dim, p.patterns, min_sep, &mut rng)?
        };
        let l = rng.random_range(0..set.len());
        let bits = rng.random_range(1..=max_bits);
        let (input, flipped) = corrupt(&set.patterns[l], bits, &mut rng);
        let case1 = c % 2 == 0;
        let i = if case1 {
            let clean: Vec<usize> = (0..p.dim).filter(|k| !flipped.contains(k)).collect();
            clean[rng.random_range(0..clean.len())]
        } else {
            flipped[rng.random_range(0..flipped.len())]
        };
        let mut moved = input.clone();
        moved[i] = -moved[i];
        let rf_rho = match p.rf_rho {
            Some(r) => r,
            None => pattern_rho(&set)?,
        };
        let mut d = Vec::with_capacity(p.draws);
        for _ in 0..p.draws {
            let mem = compact_model(&set, p.features, rf_rho, false, rng.random())?;
            d.push(mem.energy(&moved) - mem.energy(&input));
        }
        let n = p.draws as f64;
        let mean = d.iter().sum::<f64>() / n;
        let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        if !mean.is_finite() || mean.abs() <= 3.0 * se {
            return Ok(None);
        }
        Ok(Some((mean > 0.0) == case1))
    })?;
    for (c, v) in verdicts.iter().enumerate() {
        if c % 2 == 0 {
            row.case1 += 1;
        } else {
            row.case2 += 1;
        }
        match v {
            Some(true) => row.agree += 1,
            Some(false) => row.disagree += 1,
            None => row.inconclusive += 1,
        }
    }
    let conclusive = row.agree + row.disagree;
    row.sign_rate = if conclusive > 0 {
        row.agree as f64 / conclusive as f64
    } else {
        f64::NAN
    };
    row.wall_time = t0.elapsed().as_secs_f64();
    Ok(row)
}

/// Denominator used in the exponent of `Psi(x)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PsiForm {
    /// `1 + 8 A_hat`, from evaluating the Gaussian expectation with `A = -4 A_hat`.
    Derived,
    /// `1 - 8 A_hat`, as written in the theorem statement.
    AsPrinted,
}

/// Variance formulas are only evaluated for `rho > 8/9`, where `1 - 8 A_hat > 0`.
pub fn check_variance_rho(rho: f64) -> Result<()> {
    if !(rho > 8.0 / 9.0 && rho < 1.0) {
        return Err(Error::VarianceDiverges(rho));
    }
    Ok(())
}

/// `log Psi(x)` for `||x||^2 = norm_sq`:
/// `4 log D - 2N - (N/2) log(1 + 8 A_hat) + B^2 ||x||^2 / (2 den)`.
pub fn log_psi(norm_sq: f64, dim: usize, rho: f64, form: PsiForm) -> Result<f64> {
    check_variance_rho(rho)?;
    let k = FavorPpConstants::new(rho, dim)?;
    Ok(log_psi_shifted(&k, norm_sq, -2.0 * dim as f64, dim, form))
}

/// `log Psi` with the `-2N` term (half the summed squared norms of the four inputs) passed in.
fn log_psi_shifted(
    k: &FavorPpConstants,
    norm_sq: f64,
    shift: f64,
    dim: usize,
    form: PsiForm,
) -> f64 {
    let n = dim as f64;
    let den = match form {
        PsiForm::Derived => 1.0 + 8.0 * k.a_hat,
        PsiForm::AsPrinted => 1.0 - 8.0 * k.a_hat,
    };
    4.0 * k.log_d + shift - 0.5 * n * (1.0 + 8.0 * k.a_hat).ln() + k.b * k.b * norm_sq / (2.0 * den)
}

/// `Var(E_rand(xi_tilde) - E_rand(xi_hat)) = (V1 + V2 - 2 V3 - V4 - V5 + 2 V6) / r`,
/// where `xi_tilde` is `xi_hat` with coordinate `flip` negated.
pub fn variance_closed_form(
    patterns: &PatternSet,
    xi_hat: &[f64],
    flip: usize,
    rho: f64,
    features: usize,
    form: PsiForm,
) -> Result<f64> {
    if xi_hat.len() != patterns.dim() || flip >= xi_hat.len() {
        return Err(Error::param(
            "xi_hat",
            "length must match patterns and flip index must be in range",
        ));
    }
    let mut xi_tilde = xi_hat.to_vec();
    xi_tilde[flip] = -xi_tilde[flip];
    variance_closed_form_real(patterns.patterns(), xi_hat, &xi_tilde, rho, features, form)
}

/// [`variance_closed_form`] for arbitrary real memory vectors and query pair.
pub fn variance_closed_form_real(
    pats: &[Vec<f64>],
    xi_hat: &[f64],
    xi_tilde: &[f64],
    rho: f64,
    features: usize,
    form: PsiForm,
) -> Result<f64> {
    check_variance_rho(rho)?;
    if features == 0 {
        return Err(Error::param("features", "must be at least 1"));
    }
    let n = xi_hat.len();
    if xi_tilde.len() != n || pats.iter().any(|p| p.len() != n) {
        return Err(Error::param("xi_hat", "all vectors must share one length"));
    }
    let k = FavorPpConstants::new(rho, n)?;
    let pair_sum = |a: &[f64], b: &[f64]| -> f64 {
        let mut logs = Vec::with_capacity(pats.len() * pats.len());
        for p1 in pats {
            for p2 in pats {
                let s: f64 = (0..n).map(|i| (p1[i] + p2[i] + a[i] + b[i]).powi(2)).sum();
                let shift = -0.5 * (dot(p1, p1) + dot(p2, p2) + dot(a, a) + dot(b, b));
                logs.push(log_psi_shifted(&k, s, shift, n, form));
            }
        }
        log_sum_exp(&logs)
    };
    let log_v1 = pair_sum(xi_hat, xi_hat);
    let log_v2 = pair_sum(xi_tilde, xi_tilde);
    let log_v3 = pair_sum(xi_hat, xi_tilde);
    let lse_hat = log_sum_exp(&pats.iter().map(|p| dot(p, xi_hat)).collect::<Vec<_>>());
    let lse_tilde = log_sum_exp(&pats.iter().map(|p| dot(p, xi_tilde)).collect::<Vec<_>>());
    let terms = [
        (1.0, log_v1),
        (1.0, log_v2),
        (-2.0, log_v3),
        (-1.0, 2.0 * lse_hat),
        (-1.0, 2.0 * lse_tilde),
        (2.0, lse_hat + lse_tilde),
    ];
    let top = terms.iter().map(|t| t.1).fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = terms.iter().map(|(c, l)| c * (l - top).exp()).sum();
    Ok(s * top.exp() / features as f64)
}

/// Sample variance of `E_rand(xi_tilde) - E_rand(xi_hat)` over `draws` independent i.i.d. projections.
pub fn variance_monte_carlo(
    patterns: &PatternSet,
    xi_hat: &[f64],
    flip: usize,
    rho: f64,
    features: usize,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    let mut xi_tilde = xi_hat.to_vec();
    xi_tilde[flip] = -xi_tilde[flip];
    variance_monte_carlo_real(
        patterns.patterns(),
        xi_hat,
        &xi_tilde,
        rho,
        features,
        draws,
        seed,
    )
}

pub fn variance_monte_carlo_real(
    pats: &[Vec<f64>],
    xi_hat: &[f64],
    xi_tilde: &[f64],
    rho: f64,
    features: usize,
    draws: usize,
    seed: u64,
) -> Result<f64> {
    if draws < 2 {
        return Err(Error::param("draws", "need at least 2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(draws);
    for _ in 0..draws {
        let spec = RfSpec::new(
            Mechanism::FavorPlusPlus,
            features,
            xi_hat.len(),
            rng.random(),
        )
        .with_rho(rho)
        .with_orthogonal(false);
        let mut mem = CompactMemory::new(sample_projections(&spec)?, rho)?;
        for p in pats {
            mem.insert(p)?;
        }
        samples.push(mem.energy(xi_tilde) - mem.energy(xi_hat));
    }
    let mean = samples.iter().sum::<f64>() / draws as f64;
    Ok(samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (draws - 1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VarianceRow {
    pub n: usize,
    pub m: usize,
    pub rho: f64,
    pub r: usize,
    pub draws: usize,
    pub closed_form: f64,
    pub closed_form_as_printed: f64,
    pub monte_carlo: f64,
    pub variance_ratio: f64,
    pub wall_time: f64,
}

/// Closed form (both `Psi` denominators) against Monte Carlo for one random configuration.
pub fn variance_experiment(
    dim: usize,
    m: usize,
    rho: f64,
    features: usize,
    draws: usize,
    seed: u64,
) -> Result<VarianceRow> {
    check_variance_rho(rho)?;
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let set = PatternSet::random(dim, m, 1, &mut rng)?;
    let xi_hat = set.patterns()[0].clone();
    let flip = rng.random_range(0..dim);
    let closed_form = variance_closed_form(&set, &xi_hat, flip, rho, features, PsiForm::Derived)?;
    let closed_form_as_printed =
        variance_closed_form(&set, &xi_hat, flip, rho, features, PsiForm::AsPrinted)?;
    let monte_carlo =
        variance_monte_carlo(&set, &xi_hat, flip, rho, features, draws, rng.random())?;
    Ok(VarianceRow {
        n: dim,
        m,
        rho,
        r: features,
        draws,
        closed_form,
        closed_form_as_printed,
        monte_carlo,
        variance_ratio: monte_carlo / closed_form,
        wall_time: t0.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KernelBenchRow {
    pub mechanism: &'static str,
    pub r: usize,
    pub pair_id: usize,
    pub exact: f64,
    pub mean: f64,
    pub variance: f64,
    pub rel_error: f64,
}

/// Mean and variance of `phi(x)^T phi(y)` over `draws` projections for every
/// mechanism, feature count and pair; inputs uniform in `[-1, 1]^N`.
pub fn kernel_bench(
    dim: usize,
    features: &[usize],
    pairs: usize,
    draws: usize,
    orthogonal: bool,
    seed: u64,
) -> Result<Vec<KernelBenchRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<(Vec<f64>, Vec<f64>)> = (0..pairs)
        .map(|_| {
            let mut v = || {
                (0..dim)
                    .map(|_| rng.random_range(-1.0..1.0))
                    .collect::<Vec<f64>>()
            };
            (v(), v())
        })
        .collect();
    let mut rows = Vec::new();
    for mech in Mechanism::ALL {
        for &r in features {
            let r = if mech == Mechanism::HyperbolicCosine {
                r + r % 2
            } else {
                r
            };
            let projs: Vec<RfProjection> = (0..draws)
                .map(|d| {
                    let spec = RfSpec::new(
                        mech,
                        r,
                        dim,
                        crate::tasks::derive_seed(seed, &format!("{}/{r}/{d}", mech.name())),
                    )
                    .with_orthogonal(orthogonal);
                    sample_projections(&spec)
                })
                .collect::<Result<_>>()?;
            for (id, (x, y)) in pts.iter().enumerate() {
                let exact = dot(x, y).exp();
                let est: Vec<f64> = projs
                    .iter()
                    .map(|p| p.kernel_estimate(x, y))
                    .collect::<Result<_>>()?;
                let mean = est.iter().sum::<f64>() / draws as f64;
                let variance =
                    est.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (draws.max(2) - 1) as f64;
                rows.push(KernelBenchRow {
                    mechanism: mech.name(),
                    r,
                    pair_id: id,
                    exact,
                    mean,
                    variance,
                    rel_error: (mean - exact).abs() / exact,
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CamBenchRow {
    pub tau: f64,
    pub r: usize,
    pub mechanism: &'static str,
    pub steps: usize,
    /// Mean over steps of `||cam - exact|| / ||exact||`.
    pub rel_error: f64,
    pub step_micros: f64,
    pub state_floats: usize,
}

fn uniform_stream(rng: &mut ChaCha8Rng, steps: usize, dim: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..steps)
        .map(|_| {
            (0..dim)
                .map(|_| scale * rng.random_range(-1.0..1.0))
                .collect()
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den.max(1e-300)).sqrt()
}

/// CAM read-out against exact discounted attention over a random stream, for every
/// discount and feature count; latency covers one update plus one read.
pub fn cam_bench(
    taus: &[f64],
    features: &[usize],
    mechanism: Mechanism,
    dim: usize,
    steps: usize,
    seed: u64,
) -> Result<Vec<CamBenchRow>> {
    use crate::cam::{CamConfig, CamLayer, ExactKernelMemory};
    use crate::tensor::Tensor;
    let mut rng = rng_for(seed, "cam-bench/stream");
    let keys = uniform_stream(&mut rng, steps, dim, 0.5);
    let values = uniform_stream(&mut rng, steps, dim, 1.0);
    let queries = uniform_stream(&mut rng, steps, dim, 0.5);
    let mut rows = Vec::new();
    for &tau in taus {
        for &r in features {
            let cfg = CamConfig {
                input_dim: dim,
                qk_dim: dim,
                heads: 1,
                features: r,
                discount: tau,
                mechanism,
                num_layers: 1,
                ..CamConfig::default()
            };
            let layer = CamLayer::new(
                &cfg,
                crate::tasks::derive_seed(seed, &format!("cam-bench/{tau}/{r}")),
            )?;
            let mut state = layer.init_state(1);
            let mut exact = ExactKernelMemory::new(tau);
            let (mut err, mut elapsed) = (0.0, 0.0);
            for t in 0..steps {
                let k = Tensor::matrix(1, dim, keys[t].clone())?;
                let v = Tensor::matrix(1, dim, values[t].clone())?;
                let q = Tensor::matrix(1, dim, queries[t].clone())?;
                let t0 = Instant::now();
                layer.update(&mut state, &k, &v)?;
                let out = layer.read(&mut state, &q)?;
                elapsed += t0.elapsed().as_secs_f64();
                exact.update(&keys[t], &values[t]);
                err += rel_err(out.data(), &exact.read(&queries[t])?);
            }
            rows.push(CamBenchRow {
                tau,
                r,
                mechanism: mechanism.name(),
                steps,
                rel_error: err / steps as f64,
                step_micros: 1e6 * elapsed / steps as f64,
                state_floats: state.to_sections("s").iter().map(|(_, t)| t.numel()).sum(),
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CacheBenchRow {
    pub cache_len: usize,
    pub steps: usize,
    /// Mean over steps of the error against attention over the full history.
    pub rel_error: f64,
    pub step_micros: f64,
    pub state_floats: usize,
}

/// Attention restricted to the last `h` patterns against attention over all of them (no discount).
pub fn cache_bench(
    cache_lens: &[usize],
    dim: usize,
    steps: usize,
    seed: u64,
) -> Result<Vec<CacheBenchRow>> {
    use crate::cam::ExactKernelMemory;
    let mut rng = rng_for(seed, "cam-bench/stream");
    let keys = uniform_stream(&mut rng, steps, dim, 0.5);
    let values = uniform_stream(&mut rng, steps, dim, 1.0);
    let queries = uniform_stream(&mut rng, steps, dim, 0.5);
    let mut rows = Vec::new();
    for &h in cache_lens {
        if h == 0 {
            return Err(Error::param("cache_len", "must be at least 1"));
        }
        let mut full = ExactKernelMemory::new(0.0);
        let (mut err, mut elapsed) = (0.0, 0.0);
        for t in 0..steps {
            full.update(&keys[t], &values[t]);
            let lo = (t + 1).saturating_sub(h);
            let t0 = Instant::now();
            let mut window = ExactKernelMemory::new(0.0);
            for j in lo..=t {
                window.update(&keys[j], &values[j]);
            }
            let out = window.read(&queries[t])?;
            elapsed += t0.elapsed().as_secs_f64();
            err += rel_err(&out, &full.read(&queries[t])?);
        }
        rows.push(CacheBenchRow {
            cache_len: h,
            steps,
            rel_error: err / steps as f64,
            step_micros: 1e6 * elapsed / steps as f64,
            state_floats: 2 * dim * h.min(steps),
        });
    }
    Ok(rows)
}
