//! The learned optimizer: gradients in, parameter updates out, with CAM memory.
//!
//! Coordinate-wise mode treats every scalar as an independent sequence:
//! preprocessed gradient -> embedding -> CAM layers -> MLP head -> `s * delta`.
//! All coordinate-wise leaves are stacked into one batch in traversal order.
//!
//! Tensor-wise mode encodes each leaf into meta-tokens, runs the CAM layers
//! over those tokens, compresses them into one vector `e`, and maps every
//! `(|g_i|, sign g_i, e)` row through the head.
//!
//! Super mode routes each leaf once, when memory is created: leaves with more
//! than `super_threshold` scalars go coordinate-wise (light network), the
//! rest tensor-wise.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cam::{CamConfig, CamLayer, CamState, CamVars, CamWeightVars, CamWeights};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::topo::{self, TopoConfig, TopoEncoder};
use crate::tree::{ParamTree, VarTree};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Coordinate,
    Tensor,
    Super,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "coordinate" => Ok(Self::Coordinate),
            "tensor" => Ok(Self::Tensor),
            "super" => Ok(Self::Super),
            _ => Err(Error::param(
                "mode",
                format!("expected coordinate|tensor|super, got `{s}`"),
            )),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Coordinate => "coordinate",
            Self::Tensor => "tensor",
            Self::Super => "super",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub cam: CamConfig,
    pub mlp_hidden: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            cam: CamConfig::default(),
            mlp_hidden: 16,
        }
    }
}

impl NetConfig {
    pub fn light() -> Self {
        Self {
            cam: CamConfig::light(),
            mlp_hidden: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoptConfig {
    pub mode: Mode,
    pub coordinate: NetConfig,
    /// Coordinate-wise network used by Super mode.
    pub light: NetConfig,
    pub tensor: NetConfig,
    pub topo: TopoConfig,
    /// Initial output scale `s`.
    pub output_scale: f64,
    /// Gradient preprocessing constant `p`.
    pub preprocess_p: f64,
    pub super_threshold: usize,
}

impl Default for LoptConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Coordinate,
            coordinate: NetConfig::default(),
            light: NetConfig::light(),
            tensor: NetConfig::default(),
            topo: TopoConfig::default(),
            output_scale: 0.01,
            preprocess_p: 10.0,
            super_threshold: 4096,
        }
    }
}

impl LoptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.preprocess_p > 0.0) {
            return Err(Error::param("lopt.preprocess_p", "must be positive"));
        }
        if !self.output_scale.is_finite() {
            return Err(Error::param("lopt.output_scale", "must be finite"));
        }
        if self.mode != Mode::Tensor {
            self.coord_net().cam.validate()?;
            if self.coord_net().mlp_hidden == 0 {
                return Err(Error::param(
                    "lopt.coordinate.mlp_hidden",
                    "must be positive",
                ));
            }
        }
        if self.mode != Mode::Coordinate {
            self.tensor.cam.validate()?;
            self.topo.validate()?;
            if self.tensor.cam.input_dim != self.topo.latent_dim {
                return Err(Error::param(
                    "lopt.tensor.cam.input_dim",
                    format!(
                        "must equal topo.latent_dim ({} vs {})",
                        self.tensor.cam.input_dim, self.topo.latent_dim
                    ),
                ));
            }
            if self.tensor.mlp_hidden == 0 {
                return Err(Error::param("lopt.tensor.mlp_hidden", "must be positive"));
            }
        }
        Ok(())
    }

    fn coord_net(&self) -> &NetConfig {
        if self.mode == Mode::Super {
            &self.light
        } else {
            &self.coordinate
        }
    }

    fn route(&self, numel: usize) -> Route {
        match self.mode {
            Mode::Coordinate => Route::Coordinate,
            Mode::Tensor => Route::Tensor,
            Mode::Super if numel > self.super_threshold => Route::Coordinate,
            Mode::Super => Route::Tensor,
        }
    }
}

/// `(log|g| / p, sign g)` when `|g| >= e^-p`, else `(-1, e^p g)`.
pub fn preprocess_scalar(g: f64, p: f64) -> Result<[f64; 2]> {
    if g.is_nan() {
        return Err(Error::NonFinite("gradient"));
    }
    if g.abs() >= (-p).exp() {
        Ok([g.abs().ln() / p, crate::tensor::sign(g)])
    } else {
        Ok([-1.0, p.exp() * g])
    }
}

/// Preprocessed gradients of all scalars, one row each.
pub fn preprocess_gradient(grads: &[f64], p: f64) -> Result<Tensor> {
    let mut data = Vec::with_capacity(grads.len() * 2);
    for &g in grads {
        data.extend(preprocess_scalar(g, p)?);
    }
    Tensor::matrix(grads.len(), 2, data)
}

/// `x + delta` leaf by leaf.
pub fn apply_updates(params: &ParamTree, updates: &ParamTree) -> Result<ParamTree> {
    params.add(updates)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Route {
    Coordinate,
    Tensor,
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor {
    Tensor::from_fn(&[rows, cols], |_| {
        std * rng.sample::<f64, _>(StandardNormal)
    })
}

fn init_cam_layers<R: Rng + ?Sized>(
    cfg: &CamConfig,
    prefix: &str,
    rng: &mut R,
    trainable: &mut ParamTree,
    fixed: &mut ParamTree,
) -> Result<Vec<CamLayer>> {
    (0..cfg.num_layers)
        .map(|l| {
            let w = CamWeights::init(cfg, rng);
            trainable.insert(format!("{prefix}cam{l}/w_q"), w.w_q);
            trainable.insert(format!("{prefix}cam{l}/w_k"), w.w_k);
            trainable.insert(format!("{prefix}cam{l}/w_v"), w.w_v);
            let layer = CamLayer::new(cfg, rng.random())?;
            for (h, p) in layer.projections().iter().enumerate() {
                fixed.insert(format!("{prefix}cam{l}/h{h}/omega"), p.omega().clone());
            }
            Ok(layer)
        })
        .collect()
}

fn load_cam_layers(cfg: &CamConfig, prefix: &str, fixed: &ParamTree) -> Result<Vec<CamLayer>> {
    (0..cfg.num_layers)
        .map(|l| {
            let omegas = (0..cfg.heads)
                .map(|h| fixed.get(&format!("{prefix}cam{l}/h{h}/omega")).cloned())
                .collect::<Result<Vec<_>>>()?;
            CamLayer::from_omegas(cfg, omegas)
        })
        .collect()
}

fn init_head<R: Rng + ?Sized>(
    prefix: &str,
    input: usize,
    hidden: usize,
    scale: f64,
    rng: &mut R,
    w: &mut ParamTree,
) {
    w.insert(
        format!("{prefix}head/w1"),
        gaussian(rng, input, hidden, 1.0 / (input as f64).sqrt()),
    );
    w.insert(format!("{prefix}head/b1"), Tensor::zeros(&[1, hidden]));
    w.insert(
        format!("{prefix}head/w2"),
        gaussian(rng, hidden, 1, 1.0 / (hidden as f64).sqrt()),
    );
    w.insert(format!("{prefix}head/b2"), Tensor::zeros(&[1, 1]));
    w.insert(format!("{prefix}head/scale"), Tensor::full(&[1, 1], scale));
}

fn head<'t>(w: &VarTree<'t>, prefix: &str, x: Var<'t>) -> Result<Var<'t>> {
    let g = |n: &str| w.get(&format!("{prefix}head/{n}"));
    let h = x.matmul(g("w1")?)?.add(g("b1")?)?.relu();
    h.matmul(g("w2")?)?.add(g("b2")?)?.mul(g("scale")?)
}

fn cam_weights<'t>(w: &VarTree<'t>, prefix: &str, l: usize) -> Result<CamWeightVars<'t>> {
    Ok(CamWeightVars {
        w_q: w.get(&format!("{prefix}cam{l}/w_q"))?,
        w_k: w.get(&format!("{prefix}cam{l}/w_k"))?,
        w_v: w.get(&format!("{prefix}cam{l}/w_v"))?,
    })
}

const CW: &str = "cw/";
const TW: &str = "tw/";

#[derive(Clone, Debug, PartialEq)]
pub struct LearnedOptimizerWeights {
    /// Meta-learned parameters.
    pub trainable: ParamTree,
    /// Random projections, sampled once.
    pub fixed: ParamTree,
}

#[derive(Clone, Debug)]
pub struct LearnedOptimizer {
    config: LoptConfig,
    weights: LearnedOptimizerWeights,
    coord_layers: Vec<CamLayer>,
    tensor_layers: Vec<CamLayer>,
    topo: Option<TopoEncoder>,
}

impl LearnedOptimizer {
    pub fn init(config: &LoptConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut trainable = ParamTree::new();
        let mut fixed = ParamTree::new();
        let mut coord_layers = Vec::new();
        let mut tensor_layers = Vec::new();
        let mut topo = None;
        if config.mode != Mode::Tensor {
            let net = config.coord_net();
            let d = net.cam.input_dim;
            trainable.insert(
                format!("{CW}embed/w"),
                gaussian(&mut rng, 2, d, 1.0 / 2f64.sqrt()),
            );
            trainable.insert(format!("{CW}embed/b"), Tensor::zeros(&[1, d]));
            coord_layers = init_cam_layers(&net.cam, CW, &mut rng, &mut trainable, &mut fixed)?;
            init_head(
                CW,
                d,
                net.mlp_hidden,
                config.output_scale,
                &mut rng,
                &mut trainable,
            );
        }
        if config.mode != Mode::Coordinate {
            let net = &config.tensor;
            topo = Some(TopoEncoder::init(
                &config.topo,
                &format!("{TW}topo/"),
                &mut rng,
                &mut trainable,
                &mut fixed,
            )?);
            tensor_layers = init_cam_layers(&net.cam, TW, &mut rng, &mut trainable, &mut fixed)?;
            init_head(
                TW,
                topo::REPR_DIM + net.cam.input_dim,
                net.mlp_hidden,
                config.output_scale,
                &mut rng,
                &mut trainable,
            );
        }
        Ok(Self {
            config: config.clone(),
            weights: LearnedOptimizerWeights { trainable, fixed },
            coord_layers,
            tensor_layers,
            topo,
        })
    }

    /// Rebuilds from stored weights; errors if any expected leaf is absent or misshapen.
    pub fn from_weights(config: &LoptConfig, weights: LearnedOptimizerWeights) -> Result<Self> {
        let reference = Self::init(config, 0)?;
        reference
            .weights
            .trainable
            .check_same_structure(&weights.trainable)?;
        reference
            .weights
            .fixed
            .check_same_structure(&weights.fixed)?;
        let coord_layers = if config.mode != Mode::Tensor {
            load_cam_layers(&config.coord_net().cam, CW, &weights.fixed)?
        } else {
            Vec::new()
        };
        let (tensor_layers, topo) = if config.mode != Mode::Coordinate {
            (
                load_cam_layers(&config.tensor.cam, TW, &weights.fixed)?,
                Some(TopoEncoder::load(
                    &config.topo,
                    &format!("{TW}topo/"),
                    &weights.fixed,
                )?),
            )
        } else {
            (Vec::new(), None)
        };
        Ok(Self {
            config: config.clone(),
            weights,
            coord_layers,
            tensor_layers,
            topo,
        })
    }

    pub fn config(&self) -> &LoptConfig {
        &self.config
    }

    pub fn weights(&self) -> &LearnedOptimizerWeights {
        &self.weights
    }

    pub fn trainable(&self) -> &ParamTree {
        &self.weights.trainable
    }

    /// Replaces the meta-learned parameters (same structure required).
    pub fn set_trainable(&mut self, trainable: ParamTree) -> Result<()> {
        self.weights.trainable.check_same_structure(&trainable)?;
        self.weights.trainable = trainable;
        Ok(())
    }

    /// Fresh memory for a parameter tree; fixes the routing of every leaf.
    pub fn init_memory(&self, params: &ParamTree) -> Result<OptimizerMemory> {
        let mut routes = BTreeMap::new();
        let mut coord_count = 0;
        let mut tensor = BTreeMap::new();
        for (name, t) in params.iter() {
            let route = self.config.route(t.numel());
            routes.insert(name.clone(), (route, t.shape().to_vec()));
            match route {
                Route::Coordinate => coord_count += t.numel(),
                Route::Tensor => {
                    let l = self.config.topo.meta_token_count(t.numel());
                    tensor.insert(
                        name.clone(),
                        self.tensor_layers.iter().map(|c| c.init_state(l)).collect(),
                    );
                }
            }
        }
        let coordinate = if coord_count > 0 {
            self.coord_layers
                .iter()
                .map(|c| c.init_state(coord_count))
                .collect()
        } else {
            Vec::new()
        };
        Ok(OptimizerMemory {
            routes,
            coordinate,
            tensor,
            steps: 0,
        })
    }

    /// One update on a tape. Gradients enter as constants.
    pub fn step_var<'t>(
        &self,
        weights: &VarTree<'t>,
        memory: &mut MemoryVars<'t>,
        grads: &ParamTree,
    ) -> Result<VarTree<'t>> {
        let tape = memory_tape(weights)?;
        check_routes(&memory.routes, grads)?;
        let mut updates = VarTree::new();
        let coord_names: Vec<&String> = memory
            .routes
            .iter()
            .filter(|(_, (r, _))| *r == Route::Coordinate)
            .map(|(k, _)| k)
            .collect();
        if !coord_names.is_empty() {
            let mut flat = Vec::new();
            for name in &coord_names {
                flat.extend_from_slice(grads.get(name)?.data());
            }
            let pre = tape.constant(preprocess_gradient(&flat, self.config.preprocess_p)?);
            let mut x = pre
                .matmul(weights.get(&format!("{CW}embed/w"))?)?
                .add(weights.get(&format!("{CW}embed/b"))?)?;
            for (l, layer) in self.coord_layers.iter().enumerate() {
                x = layer.step_var(&cam_weights(weights, CW, l)?, &mut memory.coordinate[l], x)?;
            }
            let delta = head(weights, CW, x)?;
            let mut start = 0;
            for name in coord_names {
                let shape = &memory.routes[name].1;
                let n: usize = shape.iter().product();
                let part = if n == flat.len() {
                    delta
                } else {
                    delta.slice(0, start, n)?
                };
                updates.insert(name.clone(), part.reshape(shape)?);
                start += n;
            }
        }
        let names: Vec<String> = memory.tensor.keys().cloned().collect();
        for name in names {
            let g = grads.get(&name)?;
            let enc = self.topo.as_ref().expect("tensor route implies encoder");
            let repr = tape.constant(topo::make_repr_seq(g)?);
            let mut m = enc.hpe(weights, repr)?;
            let states = memory.tensor.get_mut(&name).expect("present");
            for (l, layer) in self.tensor_layers.iter().enumerate() {
                m = layer.step_var(&cam_weights(weights, TW, l)?, &mut states[l], m)?;
            }
            let e = enc.spe(weights, m)?;
            let rows = topo::broadcast_concat(repr, e)?;
            let delta = head(weights, TW, rows)?;
            updates.insert(name.clone(), delta.reshape(g.shape())?);
        }
        memory.steps += 1;
        Ok(updates)
    }

    /// Value-only update.
    pub fn step(&self, memory: &mut OptimizerMemory, grads: &ParamTree) -> Result<ParamTree> {
        let tape = Tape::untraced();
        let weights = self.weight_vars(&tape, false);
        let mut vars = memory.to_vars(&tape);
        let updates = self.step_var(&weights, &mut vars, grads)?;
        *memory = vars.to_memory();
        Ok(updates.values())
    }

    /// Trainable leaves as parameters (if `trainable`) plus fixed leaves as constants.
    pub fn weight_vars<'t>(&self, tape: &'t Tape, trainable: bool) -> VarTree<'t> {
        let mut w = self.weights.trainable.to_vars(tape, trainable);
        w.extend(self.weights.fixed.to_vars(tape, false));
        w
    }

    /// `leaf -> route` lines for logging.
    pub fn routing_summary(memory: &OptimizerMemory) -> Vec<String> {
        memory
            .routes
            .iter()
            .map(|(k, (r, s))| {
                let n: usize = s.iter().product();
                format!(
                    "{k} ({n} params) -> {}",
                    match r {
                        Route::Coordinate => "coordinate",
                        Route::Tensor => "tensor",
                    }
                )
            })
            .collect()
    }
}

fn memory_tape<'t>(weights: &VarTree<'t>) -> Result<&'t Tape> {
    weights
        .iter()
        .next()
        .map(|(_, v)| v.tape())
        .ok_or_else(|| Error::StructureMismatch("empty optimizer weights".into()))
}

fn check_routes(routes: &BTreeMap<String, (Route, Vec<usize>)>, grads: &ParamTree) -> Result<()> {
    if routes.len() != grads.len() {
        return Err(Error::StructureMismatch(format!(
            "memory built for {} leaves, got {} gradients",
            routes.len(),
            grads.len()
        )));
    }
    for (name, (_, shape)) in routes {
        let g = grads.get(name)?;
        if g.shape() != shape.as_slice() {
            return Err(Error::StructureMismatch(format!(
                "leaf `{name}`: memory shape {shape:?}, gradient shape {:?}",
                g.shape()
            )));
        }
    }
    Ok(())
}

/// CAM states of one optimizee: a stacked coordinate-wise batch and per-leaf tensor-wise batches.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerMemory {
    pub routes: BTreeMap<String, (Route, Vec<usize>)>,
    /// One state per CAM layer; batch = all coordinate-routed scalars.
    pub coordinate: Vec<CamState>,
    /// Per leaf, one state per CAM layer; batch = meta-token count.
    pub tensor: BTreeMap<String, Vec<CamState>>,
    pub steps: u64,
}

impl OptimizerMemory {
    pub fn to_vars<'t>(&self, tape: &'t Tape) -> MemoryVars<'t> {
        MemoryVars {
            routes: self.routes.clone(),
            coordinate: self.coordinate.iter().map(|s| s.to_vars(tape)).collect(),
            tensor: self
                .tensor
                .iter()
                .map(|(k, v)| (k.clone(), v.iter().map(|s| s.to_vars(tape)).collect()))
                .collect(),
            steps: self.steps,
        }
    }

    /// Stored floats across all CAM states.
    pub fn state_floats(&self) -> usize {
        self.sections().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn sections(&self) -> Vec<(String, Tensor)> {
        let mut out = vec![("steps".to_string(), Tensor::scalar(self.steps as f64))];
        for (l, s) in self.coordinate.iter().enumerate() {
            out.extend(s.to_sections(&format!("coordinate/{l}")));
        }
        for (name, states) in &self.tensor {
            for (l, s) in states.iter().enumerate() {
                out.extend(s.to_sections(&format!("tensor/{name}/{l}")));
            }
        }
        out
    }

    /// Restores state values into a memory created by [`LearnedOptimizer::init_memory`].
    pub fn load_sections(&mut self, opt: &LearnedOptimizer, sections: &ParamTree) -> Result<()> {
        self.steps = sections.get("steps")?.data()[0] as u64;
        let mut get = |k: &str| sections.get(k).cloned();
        let coord_cfg = &opt.config.coord_net().cam;
        for (l, s) in self.coordinate.iter_mut().enumerate() {
            *s = CamState::from_sections(coord_cfg, s.batch, &format!("coordinate/{l}"), &mut get)?;
        }
        for (name, states) in self.tensor.iter_mut() {
            for (l, s) in states.iter_mut().enumerate() {
                *s = CamState::from_sections(
                    &opt.config.tensor.cam,
                    s.batch,
                    &format!("tensor/{name}/{l}"),
                    &mut get,
                )?;
            }
        }
        Ok(())
    }
}

pub struct MemoryVars<'t> {
    pub routes: BTreeMap<String, (Route, Vec<usize>)>,
    pub coordinate: Vec<CamVars<'t>>,
    pub tensor: BTreeMap<String, Vec<CamVars<'t>>>,
    pub steps: u64,
}

impl MemoryVars<'_> {
    pub fn to_memory(&self) -> OptimizerMemory {
        OptimizerMemory {
            routes: self.routes.clone(),
            coordinate: self.coordinate.iter().map(CamVars::to_state).collect(),
            tensor: self
                .tensor
                .iter()
                .map(|(k, v)| (k.clone(), v.iter().map(CamVars::to_state).collect()))
                .collect(),
            steps: self.steps,
        }
    }
}
