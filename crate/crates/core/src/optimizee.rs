//! Trainable problems for the learned optimizer: small MLPs, tiny attention
//! classifiers and quadratics, with a sampler over their hyperparameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tasks::{self, Batch, Dataset, Quadratic, TaskKind};
use crate::tensor::Tensor;
use crate::tree::{ParamTree, VarTree};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Relu,
}

impl Activation {
    fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Self::Sigmoid => x.sigmoid(),
            Self::Relu => x.relu(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Mlp {
        hidden: Vec<usize>,
        activation: Activation,
    },
    /// Each input feature is a token; exact softmax attention, mean-pooled.
    TinyAttention {
        layers: usize,
        heads: usize,
        hidden: usize,
        mlp: usize,
        head_dim: usize,
    },
    /// Parameters are the point `x` itself.
    Quadratic { dim: usize },
}

impl Architecture {
    pub fn name(&self) -> String {
        match self {
            Self::Mlp { hidden, activation } => format!(
                "mlp{}-{}",
                hidden.iter().map(|h| format!("-{h}")).collect::<String>(),
                match activation {
                    Activation::Sigmoid => "sigmoid",
                    Activation::Relu => "relu",
                }
            ),
            Self::TinyAttention {
                layers,
                heads,
                hidden,
                mlp,
                head_dim,
            } => format!("attn-l{layers}-h{heads}-d{hidden}-m{mlp}-k{head_dim}"),
            Self::Quadratic { dim } => format!("quadratic-{dim}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Input dimension (two_gaussians) or problem dimension (quadratic).
    pub dim: usize,
    /// Class separation in standard deviations (two_gaussians) or spiral turns.
    pub shape: f64,
    pub noise: f64,
    pub size: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn build(&self) -> Objective {
        match self.kind {
            TaskKind::TwoGaussians => split(
                tasks::two_gaussians(self.size + self.size / 4, self.dim, self.shape, self.seed),
                self.size,
            ),
            TaskKind::Spiral => split(
                tasks::spiral(self.size + self.size / 4, self.shape, self.noise, self.seed),
                self.size,
            ),
            TaskKind::Quadratic => Objective::Quadratic(Quadratic::sample(self.dim, self.seed)),
        }
    }
}

/// First `n` examples train, the remaining quarter validates.
fn split(all: Dataset, n: usize) -> Objective {
    let total = all.len();
    let train: Vec<usize> = (0..n).collect();
    let val: Vec<usize> = (n..total).collect();
    let mk = |idx: &[usize]| {
        let b = all.batch(idx);
        Dataset::new(b.inputs, b.labels, all.classes).expect("valid subset")
    };
    Objective::Classification {
        train: mk(&train),
        val: mk(&val),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizeeSpec {
    pub architecture: Architecture,
    pub task: TaskSpec,
    pub batch_size: usize,
}

impl OptimizeeSpec {
    pub fn build(&self) -> Result<Optimizee> {
        let objective = self.task.build();
        match (&self.architecture, &objective) {
            (Architecture::Quadratic { dim }, Objective::Quadratic(q))
                if *dim == q.target.numel() => {}
            (Architecture::Quadratic { .. }, _) | (_, Objective::Quadratic(_)) => {
                return Err(Error::param(
                    "optimizee",
                    "quadratic architecture and quadratic task must be paired with equal dims",
                ))
            }
            _ => {}
        }
        if self.batch_size == 0 {
            return Err(Error::param("optimizee.batch_size", "must be positive"));
        }
        Ok(Optimizee {
            spec: self.clone(),
            objective,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Objective {
    Classification { train: Dataset, val: Dataset },
    Quadratic(Quadratic),
}

/// Ranges that optimizees are sampled from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeeDistribution {
    pub tasks: Vec<TaskKind>,
    /// Probability of a tiny attention model instead of an MLP on classification tasks.
    pub attention_prob: f64,
    pub mlp_layers: (usize, usize),
    pub mlp_width: (usize, usize),
    pub activations: Vec<Activation>,
    pub attn_layers: (usize, usize),
    pub attn_heads: (usize, usize),
    pub attn_hidden: (usize, usize),
    pub attn_mlp: (usize, usize),
    pub attn_head_dim: (usize, usize),
    pub gaussian_dim: (usize, usize),
    pub gaussian_separation: (f64, f64),
    pub spiral_turns: (f64, f64),
    pub spiral_noise: f64,
    pub quadratic_dim: (usize, usize),
    pub dataset_size: usize,
    pub batch_size: usize,
}

impl Default for OptimizeeDistribution {
    fn default() -> Self {
        Self {
            tasks: vec![TaskKind::TwoGaussians, TaskKind::Spiral],
            attention_prob: 0.0,
            mlp_layers: (1, 2),
            mlp_width: (20, 40),
            activations: vec![Activation::Sigmoid, Activation::Relu],
            attn_layers: (1, 3),
            attn_heads: (1, 3),
            attn_hidden: (16, 64),
            attn_mlp: (16, 64),
            attn_head_dim: (8, 16),
            gaussian_dim: (2, 8),
            gaussian_separation: (1.0, 4.0),
            spiral_turns: (0.5, 1.25),
            spiral_noise: 0.03,
            quadratic_dim: (10, 50),
            dataset_size: 512,
            batch_size: 64,
        }
    }
}

fn check_range<T: PartialOrd + Copy + std::fmt::Debug>(field: &str, r: (T, T)) -> Result<()> {
    if r.0 > r.1 {
        return Err(Error::param(field, format!("empty range {r:?}")));
    }
    Ok(())
}

impl OptimizeeDistribution {
    pub fn validate(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::param(
                "optimizees.tasks",
                "at least one task required",
            ));
        }
        if self.activations.is_empty() {
            return Err(Error::param(
                "optimizees.activations",
                "at least one activation required",
            ));
        }
        if !(0.0..=1.0).contains(&self.attention_prob) {
            return Err(Error::param(
                "optimizees.attention_prob",
                "must lie in [0, 1]",
            ));
        }
        check_range("optimizees.mlp_layers", self.mlp_layers)?;
        check_range("optimizees.mlp_width", self.mlp_width)?;
        check_range("optimizees.attn_layers", self.attn_layers)?;
        check_range("optimizees.attn_heads", self.attn_heads)?;
        check_range("optimizees.attn_hidden", self.attn_hidden)?;
        check_range("optimizees.attn_mlp", self.attn_mlp)?;
        check_range("optimizees.attn_head_dim", self.attn_head_dim)?;
        check_range("optimizees.gaussian_dim", self.gaussian_dim)?;
        check_range("optimizees.gaussian_separation", self.gaussian_separation)?;
        check_range("optimizees.spiral_turns", self.spiral_turns)?;
        check_range("optimizees.quadratic_dim", self.quadratic_dim)?;
        if self.mlp_width.0 == 0
            || self.attn_hidden.0 == 0
            || self.attn_head_dim.0 == 0
            || self.attn_heads.0 == 0
        {
            return Err(Error::param(
                "optimizees",
                "widths and head counts must be positive",
            ));
        }
        if self.gaussian_dim.0 == 0 || self.quadratic_dim.0 == 0 {
            return Err(Error::param("optimizees", "dimensions must be positive"));
        }
        if self.dataset_size == 0 || self.batch_size == 0 {
            return Err(Error::param(
                "optimizees",
                "dataset_size and batch_size must be positive",
            ));
        }
        Ok(())
    }

    pub fn sample(&self, seed: u64) -> OptimizeeSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kind = self.tasks[rng.random_range(0..self.tasks.len())];
        let task_seed = rng.random();
        let task = match kind {
            TaskKind::TwoGaussians => TaskSpec {
                kind,
                dim: rng.random_range(self.gaussian_dim.0..=self.gaussian_dim.1),
                shape: uniform(&mut rng, self.gaussian_separation),
                noise: 1.0,
                size: self.dataset_size,
                seed: task_seed,
            },
            TaskKind::Spiral => TaskSpec {
                kind,
                dim: 2,
                shape: uniform(&mut rng, self.spiral_turns),
                noise: self.spiral_noise,
                size: self.dataset_size,
                seed: task_seed,
            },
            TaskKind::Quadratic => TaskSpec {
                kind,
                dim: rng.random_range(self.quadratic_dim.0..=self.quadratic_dim.1),
                shape: 0.0,
                noise: 0.0,
                size: 0,
                seed: task_seed,
            },
        };
        let architecture = if kind == TaskKind::Quadratic {
            Architecture::Quadratic { dim: task.dim }
        } else if rng.random::<f64>() < self.attention_prob {
            Architecture::TinyAttention {
                layers: rng.random_range(self.attn_layers.0..=self.attn_layers.1),
                heads: rng.random_range(self.attn_heads.0..=self.attn_heads.1),
                hidden: rng.random_range(self.attn_hidden.0..=self.attn_hidden.1),
                mlp: rng.random_range(self.attn_mlp.0..=self.attn_mlp.1),
                head_dim: rng.random_range(self.attn_head_dim.0..=self.attn_head_dim.1),
            }
        } else {
            let layers = rng.random_range(self.mlp_layers.0..=self.mlp_layers.1);
            Architecture::Mlp {
                hidden: (0..layers)
                    .map(|_| rng.random_range(self.mlp_width.0..=self.mlp_width.1))
                    .collect(),
                activation: self.activations[rng.random_range(0..self.activations.len())],
            }
        };
        OptimizeeSpec {
            architecture,
            task,
            batch_size: self.batch_size,
        }
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// A built problem: architecture plus data or objective.
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizee {
    pub spec: OptimizeeSpec,
    pub objective: Objective,
}

impl Optimizee {
    /// Gaussian weights with std `1/sqrt(fan_in)`, zero biases.
    pub fn init_params(&self, seed: u64) -> ParamTree {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamTree::new();
        match (&self.spec.architecture, &self.objective) {
            (Architecture::Quadratic { dim }, _) => {
                p.insert(
                    "x",
                    Tensor::from_fn(&[*dim], |_| rng.sample(StandardNormal)),
                );
            }
            (Architecture::Mlp { hidden, .. }, Objective::Classification { train: d, .. }) => {
                let mut fan_in = d.dim();
                for (i, &h) in hidden.iter().enumerate() {
                    p.insert(format!("l{i}/w"), gaussian(&mut rng, fan_in, h));
                    p.insert(format!("l{i}/b"), Tensor::zeros(&[1, h]));
                    fan_in = h;
                }
                p.insert("out/w", gaussian(&mut rng, fan_in, d.classes));
                p.insert("out/b", Tensor::zeros(&[1, d.classes]));
            }
            (
                Architecture::TinyAttention {
                    layers,
                    heads,
                    hidden,
                    mlp,
                    head_dim,
                },
                Objective::Classification { train: d, .. },
            ) => {
                let (h, a) = (*hidden, heads * head_dim);
                p.insert("embed/w", gaussian(&mut rng, 1, h));
                p.insert(
                    "embed/pos",
                    gaussian(&mut rng, 1, d.dim() * h)
                        .reshape(&[d.dim(), h])
                        .expect("sized"),
                );
                for l in 0..*layers {
                    p.insert(format!("a{l}/q"), gaussian(&mut rng, h, a));
                    p.insert(format!("a{l}/k"), gaussian(&mut rng, h, a));
                    p.insert(format!("a{l}/v"), gaussian(&mut rng, h, a));
                    p.insert(format!("a{l}/o"), gaussian(&mut rng, a, h));
                    p.insert(format!("a{l}/m1"), gaussian(&mut rng, h, *mlp));
                    p.insert(format!("a{l}/b1"), Tensor::zeros(&[1, *mlp]));
                    p.insert(format!("a{l}/m2"), gaussian(&mut rng, *mlp, h));
                    p.insert(format!("a{l}/b2"), Tensor::zeros(&[1, h]));
                }
                p.insert("out/w", gaussian(&mut rng, h, d.classes));
                p.insert("out/b", Tensor::zeros(&[1, d.classes]));
            }
            (_, Objective::Quadratic(_)) => unreachable!("checked in build"),
        }
        p
    }

    /// Example indices for optimizer step `step` under data order `data_seed`.
    pub fn batch_indices(&self, step: usize, data_seed: u64) -> Vec<usize> {
        match &self.objective {
            Objective::Quadratic(_) => Vec::new(),
            Objective::Classification { train: d, .. } => {
                let n = d.len();
                let b = self.spec.batch_size.min(n);
                let mut rng = ChaCha8Rng::seed_from_u64(tasks::derive_seed(
                    data_seed,
                    &format!("batch/{step}"),
                ));
                rand::seq::index::sample(&mut rng, n, b).into_vec()
            }
        }
    }

    pub fn batch(&self, step: usize, data_seed: u64) -> Option<Batch> {
        match &self.objective {
            Objective::Quadratic(_) => None,
            Objective::Classification { train: d, .. } => {
                Some(d.batch(&self.batch_indices(step, data_seed)))
            }
        }
    }

    /// The whole training set.
    pub fn full_batch(&self) -> Option<Batch> {
        match &self.objective {
            Objective::Quadratic(_) => None,
            Objective::Classification { train: d, .. } => Some(d.full()),
        }
    }

    /// The held-out examples.
    pub fn val_batch(&self) -> Option<Batch> {
        match &self.objective {
            Objective::Quadratic(_) => None,
            Objective::Classification { val, .. } => Some(val.full()),
        }
    }

    /// Loss on the tape; `batch` is ignored for quadratics.
    pub fn loss_var<'t>(&self, params: &VarTree<'t>, batch: Option<&Batch>) -> Result<Var<'t>> {
        match (&self.spec.architecture, &self.objective) {
            (Architecture::Quadratic { .. }, Objective::Quadratic(q)) => {
                let x = params.get("x")?;
                let t = x.tape().constant(q.target.clone());
                Ok(x.sub(t)?.square().sum().scale(0.5))
            }
            (Architecture::Mlp { hidden, activation }, Objective::Classification { .. }) => {
                let batch = batch
                    .ok_or_else(|| Error::param("batch", "classification loss needs a batch"))?;
                let tape = params.get("out/w")?.tape();
                let mut h = tape.constant(batch.inputs.clone());
                for i in 0..hidden.len() {
                    let z = h
                        .matmul(params.get(&format!("l{i}/w"))?)?
                        .add(params.get(&format!("l{i}/b"))?)?;
                    h = activation.apply(z);
                }
                let logits = h.matmul(params.get("out/w")?)?.add(params.get("out/b")?)?;
                logits.softmax_cross_entropy(&batch.labels)
            }
            (
                Architecture::TinyAttention {
                    layers,
                    heads,
                    head_dim,
                    ..
                },
                Objective::Classification { .. },
            ) => {
                let batch = batch
                    .ok_or_else(|| Error::param("batch", "classification loss needs a batch"))?;
                attention_logits(params, &batch.inputs, *layers, *heads, *head_dim)?
                    .softmax_cross_entropy(&batch.labels)
            }
            _ => unreachable!("checked in build"),
        }
    }

    pub fn loss(&self, params: &ParamTree, batch: Option<&Batch>) -> Result<f64> {
        let tape = Tape::untraced();
        Ok(self.loss_var(&params.to_vars(&tape, false), batch)?.item())
    }

    pub fn loss_and_grad(
        &self,
        params: &ParamTree,
        batch: Option<&Batch>,
    ) -> Result<(f64, ParamTree)> {
        let tape = Tape::new();
        let vars = params.to_vars(&tape, true);
        let loss = self.loss_var(&vars, batch)?;
        let g = tape.backward(loss)?;
        let grads = vars.iter().map(|(k, v)| (k.clone(), g.wrt(*v))).collect();
        Ok((loss.item(), grads))
    }

    /// Classification accuracy on the full dataset.
    pub fn accuracy(&self, params: &ParamTree) -> Result<Option<f64>> {
        let Objective::Classification { train: d, .. } = &self.objective else {
            return Ok(None);
        };
        let tape = Tape::untraced();
        let vars = params.to_vars(&tape, false);
        let logits = match &self.spec.architecture {
            Architecture::Mlp { hidden, activation } => {
                let mut h = tape.constant(d.inputs.clone());
                for i in 0..hidden.len() {
                    h = activation.apply(
                        h.matmul(vars.get(&format!("l{i}/w"))?)?
                            .add(vars.get(&format!("l{i}/b"))?)?,
                    );
                }
                h.matmul(vars.get("out/w")?)?.add(vars.get("out/b")?)?
            }
            Architecture::TinyAttention {
                layers,
                heads,
                head_dim,
                ..
            } => attention_logits(&vars, &d.inputs, *layers, *heads, *head_dim)?,
            Architecture::Quadratic { .. } => return Ok(None),
        };
        let lv = logits.value();
        let correct = d
            .labels
            .iter()
            .enumerate()
            .filter(|(i, &l)| {
                let row = lv.row(*i);
                let best = (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b });
                best == l
            })
            .count();
        Ok(Some(correct as f64 / d.len() as f64))
    }
}

fn gaussian(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let std = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(&[fan_in, fan_out], |_| {
        std * rng.sample::<f64, _>(StandardNormal)
    })
}

/// Tokens are the input features; attention is restricted to each example's own tokens.
fn attention_logits<'t>(
    params: &VarTree<'t>,
    inputs: &Tensor,
    layers: usize,
    heads: usize,
    head_dim: usize,
) -> Result<Var<'t>> {
    let (b, t) = inputs.dims2();
    let tape = params.get("out/w")?.tape();
    let x = tape.constant(inputs.reshape(&[b * t, 1])?);
    let pos_idx: Vec<usize> = (0..b * t).map(|i| i % t).collect();
    let mut h = x
        .matmul(params.get("embed/w")?)?
        .add(params.get("embed/pos")?.gather_rows(&pos_idx)?)?;
    let mask = tape.constant(Tensor::from_fn(&[b * t, b * t], |i| {
        if (i / (b * t)) / t == (i % (b * t)) / t {
            1.0
        } else {
            0.0
        }
    }));
    let inv = 1.0 / (head_dim as f64).sqrt();
    for l in 0..layers {
        let q = h.matmul(params.get(&format!("a{l}/q"))?)?;
        let k = h.matmul(params.get(&format!("a{l}/k"))?)?;
        let v = h.matmul(params.get(&format!("a{l}/v"))?)?;
        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let qh = q.slice(1, hd * head_dim, head_dim)?;
            let kh = k.slice(1, hd * head_dim, head_dim)?;
            let vh = v.slice(1, hd * head_dim, head_dim)?;
            let scores = qh.matmul(kh.transpose()?)?.scale(inv);
            let sv = scores.value();
            let n = b * t;
            // Row max over the example's own block; a constant shift leaves softmax unchanged.
            let shift: Vec<f64> = (0..n)
                .map(|i| {
                    let blk = (i / t) * t;
                    sv.row(i)[blk..blk + t]
                        .iter()
                        .copied()
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect();
            let w = scores
                .sub(tape.constant(Tensor::matrix(n, 1, shift)?))?
                .mul(mask)?
                .exp()
                .mul(mask)?;
            let w = w.div(w.sum_axis(1)?)?;
            outs.push(w.matmul(vh)?);
        }
        let attn = if heads == 1 {
            outs[0]
        } else {
            tape.concat(&outs, 1)?
        };
        h = h.add(attn.matmul(params.get(&format!("a{l}/o"))?)?)?;
        let m = h
            .matmul(params.get(&format!("a{l}/m1"))?)?
            .add(params.get(&format!("a{l}/b1"))?)?
            .relu()
            .matmul(params.get(&format!("a{l}/m2"))?)?
            .add(params.get(&format!("a{l}/b2"))?)?;
        h = h.add(m)?;
    }
    let pooled = h.group_sum_rows(t)?.scale(1.0 / t as f64);
    pooled
        .matmul(params.get("out/w")?)?
        .add(params.get("out/b")?)
}
