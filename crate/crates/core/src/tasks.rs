//! Synthetic datasets and objectives, plus seed derivation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Seed for a named component of a run: first 8 bytes of `sha256(name || run_seed)`.
pub fn derive_seed(run_seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(name.as_bytes());
    h.update(run_seed.to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn rng_for(run_seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(run_seed, name))
}

/// Labelled examples, one row per example.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if inputs.rank() != 2 || inputs.dims2().0 != labels.len() {
            return Err(Error::InvalidShape {
                op: "dataset",
                shape: inputs.shape().to_vec(),
                reason: format!("{} labels", labels.len()),
            });
        }
        if labels.iter().any(|&l| l >= classes) {
            return Err(Error::param(
                "dataset.labels",
                format!("label out of range for {classes} classes"),
            ));
        }
        Ok(Self {
            inputs,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.dims2().1
    }

    /// Rows `idx` as a batch.
    pub fn batch(&self, idx: &[usize]) -> Batch {
        let d = self.dim();
        let mut x = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            x.extend_from_slice(self.inputs.row(i));
        }
        Batch {
            inputs: Tensor::matrix(idx.len(), d, x).expect("sized"),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn full(&self) -> Batch {
        Batch {
            inputs: self.inputs.clone(),
            labels: self.labels.clone(),
        }
    }

    /// Same examples in a seed-determined order.
    pub fn shuffled(&self, seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let b = self.batch(&idx);
        Self {
            inputs: b.inputs,
            labels: b.labels,
            classes: self.classes,
        }
    }

    /// Raw little-endian bytes of inputs and labels, for determinism checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for x in self.inputs.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for &l in &self.labels {
            out.extend_from_slice(&(l as u64).to_le_bytes());
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

/// Two isotropic Gaussian classes whose means are `separation` standard deviations apart.
pub fn two_gaussians(n: usize, dim: usize, separation: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dir: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    dir.iter_mut().for_each(|v| *v *= 0.5 * separation / norm);
    let mut x = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let sign = if label == 0 { -1.0 } else { 1.0 };
        for d in &dir {
            let z: f64 = rng.sample(StandardNormal);
            x.push(sign * d + z);
        }
        labels.push(label);
    }
    Dataset::new(Tensor::matrix(n, dim, x).expect("sized"), labels, 2)
        .expect("valid")
        .shuffled(seed ^ 0x5eed)
}

/// Two interleaved 2-D spirals with Gaussian jitter `noise`.
pub fn spiral(n: usize, turns: f64, noise: f64, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Vec::with_capacity(n * 2);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let s: f64 = rng.random::<f64>();
        let r = 0.2 + 0.8 * s;
        let theta = turns * std::f64::consts::TAU * s + std::f64::consts::PI * label as f64;
        let (a, b): (f64, f64) = (rng.sample(StandardNormal), rng.sample(StandardNormal));
        x.push(r * theta.cos() + noise * a);
        x.push(r * theta.sin() + noise * b);
        labels.push(label);
    }
    Dataset::new(Tensor::matrix(n, 2, x).expect("sized"), labels, 2)
        .expect("valid")
        .shuffled(seed ^ 0x5eed)
}

/// `f(x) = 0.5 * ||x - target||^2`.
#[derive(Clone, Debug, PartialEq)]
pub struct Quadratic {
    pub target: Tensor,
}

impl Quadratic {
    pub fn sample(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            target: Tensor::from_fn(&[dim], |_| rng.sample(StandardNormal)),
        }
    }

    pub fn value(&self, x: &Tensor) -> f64 {
        0.5 * x
            .data()
            .iter()
            .zip(self.target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
    }

    pub fn gradient(&self, x: &Tensor) -> Tensor {
        x.zip_map(&self.target, "quadratic", |a, b| a - b)
            .expect("same shape")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    TwoGaussians,
    Spiral,
    Quadratic,
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "two_gaussians" => Ok(Self::TwoGaussians),
            "spiral" => Ok(Self::Spiral),
            "quadratic" => Ok(Self::Quadratic),
            _ => Err(Error::param(
                "task",
                format!("expected two_gaussians|spiral|quadratic, got `{s}`"),
            )),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::TwoGaussians => "two_gaussians",
            Self::Spiral => "spiral",
            Self::Quadratic => "quadratic",
        }
    }
}
