//! Meta-training: truncated unrolls of sampled optimizees, a task plus
//! imitation loss, and meta-Adam on the optimizer's trainable weights.
//!
//! Gradients fed to the learned optimizer are constants on the meta tape, so
//! meta-gradients are first order: exact for one-step unrolls, and through
//! longer segments they follow parameters and CAM memory but not the
//! dependence of later gradients on earlier updates.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{adam_step, AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::lopt::{LearnedOptimizer, OptimizerMemory};
use crate::optimizee::{Optimizee, OptimizeeDistribution};
use crate::tape::{Tape, Var};
use crate::tasks::{derive_seed, rng_for, Batch};
use crate::tensor::Tensor;
use crate::tree::{ParamTree, VarTree};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaTrainConfig {
    pub iterations: usize,
    pub horizon: usize,
    pub truncation: usize,
    pub meta_lr: f64,
    pub expert_lr: f64,
    /// Weight of the imitation term.
    pub imitation_weight: f64,
    /// Per-coordinate scales are `exp(U(-sigma, sigma))`.
    pub scaling_sigma: f64,
    pub seed: u64,
    pub optimizees: OptimizeeDistribution,
}

impl Default for MetaTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            horizon: 100,
            truncation: 5,
            meta_lr: 3e-4,
            expert_lr: 3e-2,
            imitation_weight: 1.0,
            scaling_sigma: 3.0,
            seed: 0,
            optimizees: OptimizeeDistribution::default(),
        }
    }
}

impl MetaTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::param("meta.horizon", "must be positive"));
        }
        if self.truncation == 0 || !self.horizon.is_multiple_of(self.truncation) {
            return Err(Error::param(
                "meta.truncation",
                format!("must be positive and divide horizon {}", self.horizon),
            ));
        }
        if !(self.meta_lr > 0.0 && self.meta_lr.is_finite()) {
            return Err(Error::param("meta.meta_lr", "must be positive and finite"));
        }
        if !(self.expert_lr > 0.0 && self.expert_lr.is_finite()) {
            return Err(Error::param(
                "meta.expert_lr",
                "must be positive and finite",
            ));
        }
        if !(self.imitation_weight >= 0.0 && self.imitation_weight.is_finite()) {
            return Err(Error::param(
                "meta.imitation_weight",
                "must be nonnegative and finite",
            ));
        }
        if !(self.scaling_sigma >= 0.0 && self.scaling_sigma <= 20.0) {
            return Err(Error::param("meta.scaling_sigma", "must lie in [0, 20]"));
        }
        self.optimizees.validate()
    }
}

/// Per-coordinate reparametrisation: the optimizer works on `x`, the objective sees `c * x`.
#[derive(Clone, Debug, PartialEq)]
pub struct Scaling {
    pub factors: ParamTree,
}

impl Scaling {
    pub fn identity(like: &ParamTree) -> Self {
        Self {
            factors: like.map(|t| Tensor::ones(t.shape())),
        }
    }

    pub fn sample(like: &ParamTree, sigma: f64, rng: &mut impl Rng) -> Self {
        Self {
            factors: like.map(|t| {
                Tensor::from_fn(t.shape(), |_| {
                    (sigma * (2.0 * rng.random::<f64>() - 1.0)).exp()
                })
            }),
        }
    }

    /// Optimizer-space point whose image is `base`.
    pub fn to_scaled(&self, base: &ParamTree) -> Result<ParamTree> {
        base.zip_map(&self.factors, |x, c| x / c)
    }

    pub fn to_base(&self, x: &ParamTree) -> Result<ParamTree> {
        x.zip_map(&self.factors, |x, c| x * c)
    }

    fn apply<'t>(&self, x: &VarTree<'t>) -> Result<VarTree<'t>> {
        let mut out = VarTree::new();
        for (k, v) in x.iter() {
            let c = v.tape().constant(self.factors.get(k)?.clone());
            out.insert(k.clone(), v.mul(c)?);
        }
        Ok(out)
    }
}

/// An optimizee seen through a [`Scaling`].
#[derive(Clone, Debug)]
pub struct Problem {
    pub optimizee: Optimizee,
    pub scaling: Scaling,
    pub data_seed: u64,
}

impl Problem {
    pub fn batch(&self, step: usize) -> Option<Batch> {
        self.optimizee.batch(step, self.data_seed)
    }

    pub fn loss_var<'t>(&self, x: &VarTree<'t>, batch: Option<&Batch>) -> Result<Var<'t>> {
        self.optimizee.loss_var(&self.scaling.apply(x)?, batch)
    }

    pub fn loss_and_grad(&self, x: &ParamTree, batch: Option<&Batch>) -> Result<(f64, ParamTree)> {
        let tape = Tape::new();
        let vars = x.to_vars(&tape, true);
        let loss = self.loss_var(&vars, batch)?;
        let g = tape.backward(loss)?;
        Ok((
            loss.item(),
            vars.iter().map(|(k, v)| (k.clone(), g.wrt(*v))).collect(),
        ))
    }
}

/// Optimizer-side state carried across segments.
#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub x: ParamTree,
    pub memory: OptimizerMemory,
    pub expert: AdamState,
    pub step: usize,
}

impl Rollout {
    pub fn new(opt: &LearnedOptimizer, x: ParamTree) -> Result<Self> {
        Ok(Self {
            memory: opt.init_memory(&x)?,
            expert: AdamState::new(&x),
            x,
            step: 0,
        })
    }
}

pub struct SegmentOutput<'t> {
    pub meta_loss: Var<'t>,
    /// Objective at the point the optimizer was queried, one per step.
    pub losses: Vec<f64>,
    pub imitation: Vec<f64>,
}

/// Mean squared difference over every coordinate of two update trees.
pub fn imitation_mse<'t>(updates: &VarTree<'t>, expert: &ParamTree) -> Result<Var<'t>> {
    let mut total: Option<Var<'t>> = None;
    let mut n = 0;
    for (k, e) in expert.iter() {
        let u = updates.get(k)?;
        let term = u.sub(u.tape().constant(e.clone()))?.square().sum();
        n += e.numel();
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    let total = total.ok_or_else(|| Error::StructureMismatch("no update leaves".into()))?;
    Ok(total.scale(1.0 / n.max(1) as f64))
}

/// `steps` optimizer steps on one tape, starting from detached state.
///
/// Meta-loss is `sum_t f(x_{t+1}) + alpha * sum_t mse(delta_t, adam_t)`, with the
/// objective evaluated on the batch of the following step and the expert Adam
/// driven by the learned optimizer's own gradients.
pub fn run_segment<'t>(
    opt: &LearnedOptimizer,
    weights: &VarTree<'t>,
    problem: &Problem,
    rollout: &mut Rollout,
    steps: usize,
    expert_lr: f64,
    alpha: f64,
) -> Result<SegmentOutput<'t>> {
    let tape = weights
        .iter()
        .next()
        .map(|(_, v)| v.tape())
        .ok_or_else(|| Error::StructureMismatch("empty optimizer weights".into()))?;
    let expert_cfg = AdamConfig::new(expert_lr);
    let mut memory = rollout.memory.to_vars(tape);
    let mut x = rollout.x.to_vars(tape, false);
    let mut meta_loss: Option<Var<'t>> = None;
    let mut losses = Vec::with_capacity(steps);
    let mut imitation = Vec::with_capacity(steps);
    let mut batch = problem.batch(rollout.step);
    for _ in 0..steps {
        let (loss, grads) = problem.loss_and_grad(&x.values(), batch.as_ref())?;
        if !loss.is_finite() || !grads.is_finite() {
            return Err(Error::NonFinite("optimizee loss or gradient"));
        }
        losses.push(loss);
        let delta = opt.step_var(weights, &mut memory, &grads)?;
        let expert = adam_step(&mut rollout.expert, &grads, &expert_cfg)?;
        let imit = imitation_mse(&delta, &expert)?;
        imitation.push(imit.item());
        let mut next = VarTree::new();
        for (k, v) in x.iter() {
            next.insert(k.clone(), v.add(delta.get(k)?)?);
        }
        x = next;
        rollout.step += 1;
        batch = problem.batch(rollout.step);
        let f = problem.loss_var(&x, batch.as_ref())?;
        let term = if alpha > 0.0 {
            f.add(imit.scale(alpha))?
        } else {
            f
        };
        meta_loss = Some(match meta_loss {
            Some(m) => m.add(term)?,
            None => term,
        });
    }
    rollout.x = x.values();
    rollout.memory = memory.to_memory();
    Ok(SegmentOutput {
        meta_loss: meta_loss.unwrap_or_else(|| tape.scalar(0.0)),
        losses,
        imitation,
    })
}

/// Meta-loss and its gradient for one segment; the rollout advances.
pub fn segment_gradient(
    opt: &LearnedOptimizer,
    problem: &Problem,
    rollout: &mut Rollout,
    steps: usize,
    expert_lr: f64,
    alpha: f64,
) -> Result<(f64, ParamTree, Vec<f64>, Vec<f64>)> {
    let tape = Tape::new();
    let weights = opt.weight_vars(&tape, true);
    let out = run_segment(opt, &weights, problem, rollout, steps, expert_lr, alpha)?;
    let g = tape.backward(out.meta_loss)?;
    let grads: ParamTree = opt
        .trainable()
        .names()
        .map(|k| Ok((k.clone(), g.wrt(weights.get(k)?))))
        .collect::<Result<_>>()?;
    Ok((out.meta_loss.item(), grads, out.losses, out.imitation))
}

/// One line of the meta-training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub iteration: usize,
    pub optimizee_seed: u64,
    pub init_seed: u64,
    pub data_seed: u64,
    pub scaling_seed: u64,
    pub architecture: String,
    pub task: String,
    pub losses: Vec<f64>,
    pub imitation: Vec<f64>,
    /// Mean over segments of the segment meta-loss.
    pub meta_loss: f64,
    pub diverged: bool,
}

/// Seeds of outer iteration `it`, all derived from the run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IterationSeeds {
    pub optimizee: u64,
    pub init: u64,
    pub data: u64,
    pub scaling: u64,
}

impl IterationSeeds {
    pub fn new(run_seed: u64, it: usize) -> Self {
        Self {
            optimizee: derive_seed(run_seed, &format!("optimizee/{it}")),
            init: derive_seed(run_seed, &format!("init/{it}")),
            data: derive_seed(run_seed, &format!("data/{it}")),
            scaling: derive_seed(run_seed, &format!("scaling/{it}")),
        }
    }
}

/// Everything needed to resume meta-training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaState {
    pub iteration: usize,
    pub meta_adam: AdamState,
}

impl MetaState {
    pub fn new(opt: &LearnedOptimizer) -> Self {
        Self {
            iteration: 0,
            meta_adam: AdamState::new(opt.trainable()),
        }
    }
}

/// Builds the scaled problem and start point of outer iteration `it`.
pub fn iteration_problem(
    cfg: &MetaTrainConfig,
    it: usize,
) -> Result<(Problem, ParamTree, IterationSeeds)> {
    let seeds = IterationSeeds::new(cfg.seed, it);
    let spec = cfg.optimizees.sample(seeds.optimizee);
    let optimizee = spec.build()?;
    let base = optimizee.init_params(seeds.init);
    let scaling = if cfg.scaling_sigma > 0.0 {
        Scaling::sample(
            &base,
            cfg.scaling_sigma,
            &mut rng_for(seeds.scaling, "scaling"),
        )
    } else {
        Scaling::identity(&base)
    };
    let x0 = scaling.to_scaled(&base)?;
    Ok((
        Problem {
            optimizee,
            scaling,
            data_seed: seeds.data,
        },
        x0,
        seeds,
    ))
}

/// Runs outer iterations `state.iteration..cfg.iterations`, calling `on_record` after each.
///
/// A non-finite meta-loss stops training with [`Error::MetaLossDiverged`] after the
/// offending record (flagged `diverged`) has been emitted.
pub fn meta_train(
    opt: &mut LearnedOptimizer,
    cfg: &MetaTrainConfig,
    state: &mut MetaState,
    mut on_record: impl FnMut(&RolloutRecord) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    let meta_cfg = AdamConfig::new(cfg.meta_lr);
    while state.iteration < cfg.iterations {
        let it = state.iteration;
        let (problem, x0, seeds) = iteration_problem(cfg, it)?;
        let mut rollout = Rollout::new(opt, x0)?;
        let mut record = RolloutRecord {
            iteration: it,
            optimizee_seed: seeds.optimizee,
            init_seed: seeds.init,
            data_seed: seeds.data,
            scaling_seed: seeds.scaling,
            architecture: problem.optimizee.spec.architecture.name(),
            task: problem.optimizee.spec.task.kind.name().to_string(),
            losses: Vec::with_capacity(cfg.horizon),
            imitation: Vec::with_capacity(cfg.horizon),
            meta_loss: 0.0,
            diverged: false,
        };
        let segments = cfg.horizon / cfg.truncation;
        for seg in 0..segments {
            let result = segment_gradient(
                opt,
                &problem,
                &mut rollout,
                cfg.truncation,
                cfg.expert_lr,
                cfg.imitation_weight,
            );
            let ok = match result {
                Ok((loss, grads, losses, imitation)) if loss.is_finite() && grads.is_finite() => {
                    record.losses.extend(losses);
                    record.imitation.extend(imitation);
                    record.meta_loss += loss / segments as f64;
                    let delta = adam_step(&mut state.meta_adam, &grads, &meta_cfg)?;
                    opt.set_trainable(opt.trainable().add(&delta)?)?;
                    true
                }
                Ok(_) | Err(Error::NonFinite(_)) => false,
                Err(e) => return Err(e),
            };
            if !ok {
                record.diverged = true;
                record.meta_loss = f64::NAN;
                on_record(&record)?;
                return Err(Error::MetaLossDiverged {
                    iteration: it,
                    segment: seg,
                });
            }
        }
        state.iteration += 1;
        on_record(&record)?;
    }
    Ok(())
}

/// Per-step losses of one optimizer run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    /// Minibatch loss at the point each update was computed from.
    pub train: Vec<f64>,
    /// Held-out loss after each update.
    pub val: Vec<f64>,
    /// Full training-set loss after the last update.
    pub final_loss: f64,
}

/// Any optimizer as a map from gradients to updates.
pub trait Stepper {
    fn step(&mut self, grads: &ParamTree) -> Result<ParamTree>;
}

impl Stepper for crate::baselines::Baseline {
    fn step(&mut self, grads: &ParamTree) -> Result<ParamTree> {
        crate::baselines::Baseline::step(self, grads)
    }
}

/// A learned optimizer with its memory for one run.
pub struct LearnedStepper<'a> {
    pub opt: &'a LearnedOptimizer,
    pub memory: OptimizerMemory,
}

impl<'a> LearnedStepper<'a> {
    pub fn new(opt: &'a LearnedOptimizer, like: &ParamTree) -> Result<Self> {
        Ok(Self {
            opt,
            memory: opt.init_memory(like)?,
        })
    }
}

impl Stepper for LearnedStepper<'_> {
    fn step(&mut self, grads: &ParamTree) -> Result<ParamTree> {
        self.opt.step(&mut self.memory, grads)
    }
}

/// Trains `optimizee` from `x0` for `steps` steps in data order `data_seed`.
///
/// Stops early (leaving the remaining entries out) if the loss becomes non-finite.
pub fn run_optimizer(
    stepper: &mut dyn Stepper,
    optimizee: &Optimizee,
    x0: &ParamTree,
    steps: usize,
    data_seed: u64,
) -> Result<Curve> {
    let val_batch = optimizee.val_batch();
    let full = optimizee.full_batch();
    let mut x = x0.clone();
    let mut curve = Curve {
        train: Vec::with_capacity(steps),
        val: Vec::with_capacity(steps),
        final_loss: f64::NAN,
    };
    for t in 0..steps {
        let batch = optimizee.batch(t, data_seed);
        let (loss, grads) = optimizee.loss_and_grad(&x, batch.as_ref())?;
        if !loss.is_finite() || !grads.is_finite() {
            return Ok(curve);
        }
        curve.train.push(loss);
        x = x.add(&stepper.step(&grads)?)?;
        curve.val.push(optimizee.loss(&x, val_batch.as_ref())?);
    }
    curve.final_loss = optimizee.loss(&x, full.as_ref())?;
    Ok(curve)
}

/// Final losses of a learned optimizer and of every grid learning rate for SGD and Adam,
/// all from the same start point and data order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridComparison {
    pub learned: f64,
    /// `(lr, final loss)`; diverged runs report infinity.
    pub sgd: Vec<(f64, f64)>,
    pub adam: Vec<(f64, f64)>,
}

impl GridComparison {
    pub fn best_sgd(&self) -> f64 {
        self.sgd.iter().map(|p| p.1).fold(f64::INFINITY, f64::min)
    }

    pub fn best_adam(&self) -> f64 {
        self.adam.iter().map(|p| p.1).fold(f64::INFINITY, f64::min)
    }
}

fn final_or_inf(c: &Curve) -> f64 {
    if c.final_loss.is_finite() {
        c.final_loss
    } else {
        f64::INFINITY
    }
}

pub fn compare_with_grid(
    opt: &LearnedOptimizer,
    optimizee: &Optimizee,
    x0: &ParamTree,
    steps: usize,
    data_seed: u64,
) -> Result<GridComparison> {
    use crate::baselines::{Baseline, BaselineKind, LR_GRID};
    let mut learned = LearnedStepper::new(opt, x0)?;
    let learned = final_or_inf(&run_optimizer(
        &mut learned,
        optimizee,
        x0,
        steps,
        data_seed,
    )?);
    let run = |kind| -> Result<Vec<(f64, f64)>> {
        LR_GRID
            .iter()
            .map(|&lr| {
                let mut b = Baseline::new(kind, lr, x0);
                Ok((
                    lr,
                    final_or_inf(&run_optimizer(&mut b, optimizee, x0, steps, data_seed)?),
                ))
            })
            .collect()
    };
    Ok(GridComparison {
        learned,
        sgd: run(BaselineKind::Sgd)?,
        adam: run(BaselineKind::Adam)?,
    })
}
