//! Topological encoder: turns one gradient tensor into a handful of meta-tokens.
//!
//! Each scalar becomes a representation token `(|g|, sign g)`, tokens are
//! embedded to the latent width, and a bidirectional Performer layer encodes
//! fixed-length chunks, keeping the latent of each chunk's first token. The
//! chunking repeats until at most `l_max` tokens remain. A second Performer
//! layer (the spatial encoder) compresses CAM outputs over meta-tokens into a
//! single vector `e`, which is broadcast back to every parameter token.
//!
//! Tokens carry no positional encoding; chunk order is the only position signal.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rf::{self, Mechanism, RfProjection, RfSpec};
use crate::tape::Var;
use crate::tensor::Tensor;
use crate::tree::{ParamTree, VarTree};

/// Width of a representation token.
pub const REPR_DIM: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopoConfig {
    pub latent_dim: usize,
    pub qk_dim: usize,
    pub features: usize,
    pub mechanism: Mechanism,
    pub orthogonal: bool,
    pub mlp_hidden: usize,
    /// Chunk length `L`.
    pub chunk_len: usize,
    /// Target meta-token count.
    pub l_max: usize,
    /// Fixed pooling depth; `None` picks the smallest depth reaching `l_max`.
    pub h_pool: Option<usize>,
}

impl Default for TopoConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            qk_dim: 8,
            features: 16,
            mechanism: Mechanism::HyperbolicCosine,
            orthogonal: true,
            mlp_hidden: 16,
            chunk_len: 128,
            l_max: 8,
            h_pool: None,
        }
    }
}

impl TopoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chunk_len < 2 {
            return Err(Error::param(
                "topo.chunk_len",
                format!("must be >= 2, got {}", self.chunk_len),
            ));
        }
        if self.l_max == 0 {
            return Err(Error::param("topo.l_max", "must be at least 1"));
        }
        if self.latent_dim == 0 || self.qk_dim == 0 || self.mlp_hidden == 0 {
            return Err(Error::param("topo.latent_dim", "widths must be positive"));
        }
        self.rf_spec(0).validate()
    }

    fn rf_spec(&self, seed: u64) -> RfSpec {
        RfSpec::new(self.mechanism, self.features, self.qk_dim, seed)
            .with_orthogonal(self.orthogonal)
    }

    /// Pooling depth applied to a sequence of `len` tokens.
    pub fn pooling_levels(&self, len: usize) -> usize {
        if len <= self.l_max {
            return 0;
        }
        if let Some(h) = self.h_pool {
            return h;
        }
        let (mut cur, mut h) = (len, 0);
        while cur > self.l_max {
            cur = cur.div_ceil(self.chunk_len);
            h += 1;
        }
        h
    }

    /// Meta-token count for a sequence of `len` tokens.
    pub fn meta_token_count(&self, len: usize) -> usize {
        pooled_len(len, self.chunk_len, self.pooling_levels(len))
    }
}

/// Length after `levels` rounds of chunking by `chunk_len`.
pub fn pooled_len(len: usize, chunk_len: usize, levels: usize) -> usize {
    (0..levels).fold(len, |n, _| n.div_ceil(chunk_len))
}

/// `(|g_i|, sign g_i)` per scalar in row-major order, as an `n x 2` matrix.
pub fn make_repr_seq(grad: &Tensor) -> Result<Tensor> {
    if grad.data().iter().any(|g| g.is_nan()) {
        return Err(Error::NonFinite("gradient passed to make_repr_seq"));
    }
    let data = grad
        .data()
        .iter()
        .flat_map(|&g| [g.abs(), crate::tensor::sign(g)])
        .collect();
    Tensor::matrix(grad.numel(), REPR_DIM, data)
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Tensor {
    Tensor::from_fn(&[rows, cols], |_| {
        std * rng.sample::<f64, _>(StandardNormal)
    })
}

/// One bidirectional Performer attention layer followed by a residual MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct PerformerBlock {
    prefix: String,
    projection: RfProjection,
}

impl PerformerBlock {
    /// Adds trainable weights under `prefix` and stores the feature matrix in `fixed`.
    pub fn init<R: Rng + ?Sized>(
        cfg: &TopoConfig,
        prefix: &str,
        input_dim: usize,
        rng: &mut R,
        trainable: &mut ParamTree,
        fixed: &mut ParamTree,
    ) -> Result<Self> {
        let d = cfg.latent_dim;
        let s_in = 1.0 / (input_dim as f64).sqrt();
        trainable.insert(
            format!("{prefix}w_q"),
            gaussian(rng, input_dim, cfg.qk_dim, s_in),
        );
        trainable.insert(
            format!("{prefix}w_k"),
            gaussian(rng, input_dim, cfg.qk_dim, s_in),
        );
        trainable.insert(format!("{prefix}w_v"), gaussian(rng, input_dim, d, s_in));
        trainable.insert(
            format!("{prefix}w1"),
            gaussian(rng, d, cfg.mlp_hidden, 1.0 / (d as f64).sqrt()),
        );
        trainable.insert(format!("{prefix}b1"), Tensor::zeros(&[1, cfg.mlp_hidden]));
        trainable.insert(
            format!("{prefix}w2"),
            gaussian(rng, cfg.mlp_hidden, d, 1.0 / (cfg.mlp_hidden as f64).sqrt()),
        );
        trainable.insert(format!("{prefix}b2"), Tensor::zeros(&[1, d]));
        let projection = rf::sample_projections(&cfg.rf_spec(rng.random()))?;
        fixed.insert(format!("{prefix}omega"), projection.omega().clone());
        Ok(Self {
            prefix: prefix.to_string(),
            projection,
        })
    }

    pub fn load(cfg: &TopoConfig, prefix: &str, fixed: &ParamTree) -> Result<Self> {
        let omega = fixed.get(&format!("{prefix}omega"))?.clone();
        Ok(Self {
            prefix: prefix.to_string(),
            projection: RfProjection::from_omega(cfg.rf_spec(0), omega)?,
        })
    }

    pub fn projection(&self) -> &RfProjection {
        &self.projection
    }

    fn w<'t>(&self, weights: &VarTree<'t>, name: &str) -> Result<Var<'t>> {
        weights.get(&format!("{}{name}", self.prefix))
    }

    fn mlp_residual<'t>(&self, weights: &VarTree<'t>, a: Var<'t>) -> Result<Var<'t>> {
        let h = a
            .matmul(self.w(weights, "w1")?)?
            .add(self.w(weights, "b1")?)?
            .relu();
        let m = h
            .matmul(self.w(weights, "w2")?)?
            .add(self.w(weights, "b2")?)?;
        a.add(m)
    }

    /// Full layer over `n x d_in` tokens: every token attends to every token.
    pub fn encode<'t>(&self, weights: &VarTree<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let n = x.value().dims2().0;
        let idx = vec![0; n];
        let (q, k, v) = self.qkv(weights, x)?;
        let fq = self.projection.phi_var_row_scaled(q, 0.5)?;
        let fk = self.projection.phi_var(k, 0.5)?;
        let s = fk.outer_rows(v)?.group_sum_rows(n)?.gather_rows(&idx)?;
        let z = fk.group_sum_rows(n)?.gather_rows(&idx)?;
        let num = fq.vecmat_rows(s)?;
        let den = fq.mul(z)?.sum_axis(1)?;
        self.mlp_residual(weights, num.div(den)?)
    }

    /// Encodes each chunk of `chunk_len` tokens and returns the latent of its first token.
    pub fn chunk_summaries<'t>(
        &self,
        weights: &VarTree<'t>,
        x: Var<'t>,
        chunk_len: usize,
    ) -> Result<Var<'t>> {
        let n = x.value().dims2().0;
        if n == 0 {
            return Err(Error::InvalidShape {
                op: "chunk_encode",
                shape: x.shape(),
                reason: "empty sequence".into(),
            });
        }
        let starts: Vec<usize> = (0..n).step_by(chunk_len).collect();
        let (q, k, v) = self.qkv(weights, x)?;
        let fq = self
            .projection
            .phi_var_row_scaled(q.gather_rows(&starts)?, 0.5)?;
        let fk = self.projection.phi_var(k, 0.5)?;
        let s = fk.outer_rows(v)?.group_sum_rows(chunk_len)?;
        let z = fk.group_sum_rows(chunk_len)?;
        let num = fq.vecmat_rows(s)?;
        let den = fq.mul(z)?.sum_axis(1)?;
        self.mlp_residual(weights, num.div(den)?)
    }

    fn qkv<'t>(&self, weights: &VarTree<'t>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        Ok((
            x.matmul(self.w(weights, "w_q")?)?,
            x.matmul(self.w(weights, "w_k")?)?,
            x.matmul(self.w(weights, "w_v")?)?,
        ))
    }
}

/// Pooling and spatial encoders of one learned optimizer.
#[derive(Clone, Debug, PartialEq)]
pub struct TopoEncoder {
    config: TopoConfig,
    prefix: String,
    pool: PerformerBlock,
    spatial: PerformerBlock,
}

impl TopoEncoder {
    pub fn init<R: Rng + ?Sized>(
        config: &TopoConfig,
        prefix: &str,
        rng: &mut R,
        trainable: &mut ParamTree,
        fixed: &mut ParamTree,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.latent_dim;
        trainable.insert(
            format!("{prefix}embed/w"),
            gaussian(rng, REPR_DIM, d, 1.0 / (REPR_DIM as f64).sqrt()),
        );
        trainable.insert(format!("{prefix}embed/b"), Tensor::zeros(&[1, d]));
        let pool =
            PerformerBlock::init(config, &format!("{prefix}pool/"), d, rng, trainable, fixed)?;
        let spatial =
            PerformerBlock::init(config, &format!("{prefix}spe/"), d, rng, trainable, fixed)?;
        Ok(Self {
            config: config.clone(),
            prefix: prefix.to_string(),
            pool,
            spatial,
        })
    }

    pub fn load(config: &TopoConfig, prefix: &str, fixed: &ParamTree) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            prefix: prefix.to_string(),
            pool: PerformerBlock::load(config, &format!("{prefix}pool/"), fixed)?,
            spatial: PerformerBlock::load(config, &format!("{prefix}spe/"), fixed)?,
        })
    }

    pub fn config(&self) -> &TopoConfig {
        &self.config
    }

    pub fn pool_block(&self) -> &PerformerBlock {
        &self.pool
    }

    pub fn spatial_block(&self) -> &PerformerBlock {
        &self.spatial
    }

    /// `n x 2` representation tokens to `l x d` meta-tokens.
    pub fn hpe<'t>(&self, weights: &VarTree<'t>, repr: Var<'t>) -> Result<Var<'t>> {
        let n = repr.value().dims2().0;
        let mut x = repr
            .matmul(weights.get(&format!("{}embed/w", self.prefix))?)?
            .add(weights.get(&format!("{}embed/b", self.prefix))?)?;
        for _ in 0..self.config.pooling_levels(n) {
            x = self
                .pool
                .chunk_summaries(weights, x, self.config.chunk_len)?;
        }
        Ok(x)
    }

    /// `l x d` CAM outputs to a `1 x d` encoding: the latent of token 0 after one attention layer.
    pub fn spe<'t>(&self, weights: &VarTree<'t>, cam_out: Var<'t>) -> Result<Var<'t>> {
        let l = cam_out.value().dims2().0;
        self.spatial.chunk_summaries(weights, cam_out, l.max(1))
    }
}

/// Appends the same `1 x d` row `e` to every `n x 2` token.
pub fn broadcast_concat<'t>(repr: Var<'t>, e: Var<'t>) -> Result<Var<'t>> {
    let n = repr.value().dims2().0;
    let tiled = e.gather_rows(&vec![0; n])?;
    repr.tape().concat(&[repr, tiled], 1)
}
