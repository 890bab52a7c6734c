//! Run configuration, checkpoints, IDX ingestion, manifests and output writers.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{AdamState, BaselineSpec};
use crate::error::{Error, Result};
use crate::lopt::{LearnedOptimizer, LearnedOptimizerWeights, LoptConfig};
use crate::meta::{
    run_optimizer, Curve, LearnedStepper, MetaState, MetaTrainConfig, RolloutRecord,
};
use crate::optimizee::{Activation, Architecture, Optimizee, OptimizeeSpec, TaskSpec};
use crate::tasks::{Dataset, TaskKind};
use crate::tensor::Tensor;
use crate::tree::ParamTree;

pub const MAGIC: &[u8; 6] = b"MNEMO1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub threads: usize,
    /// Outer iterations between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs/default"),
            threads: 1,
            checkpoint_every: 100,
        }
    }
}

/// Everything a run reads from its config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunConfig,
    pub lopt: LoptConfig,
    pub meta: MetaTrainConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)
            .map_err(|e| Error::Config(e.message().to_string() + &span_hint(text, e.span())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Missing files surface as [`Error::Io`] naming the path.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.run.threads == 0 || self.run.threads > 256 {
            return Err(Error::param(
                "run.threads",
                format!("must lie in 1..=256, got {}", self.run.threads),
            ));
        }
        if self.meta.seed != 0 && self.meta.seed != self.run.seed {
            return Err(Error::param("meta.seed", "set the seed under [run]"));
        }
        self.lopt.validate()?;
        self.meta.validate()
    }

    /// Meta-training settings with the run seed applied.
    pub fn meta_config(&self) -> MetaTrainConfig {
        MetaTrainConfig {
            seed: self.run.seed,
            ..self.meta.clone()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex sha256 of the canonical JSON form, leaving out the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.run.out = PathBuf::new();
        sha_hex(
            serde_json::to_string(&c)
                .expect("config serializes")
                .as_bytes(),
        )
    }
}

fn span_hint(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    match span {
        Some(r) => {
            let line = text[..r.start.min(text.len())].lines().count().max(1);
            format!(" (line {line})")
        }
        None => String::new(),
    }
}

pub fn sha_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Provenance of one run; its hash tags every output row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub git_rev: String,
    pub seed: u64,
    pub crate_version: String,
}

impl RunManifest {
    pub fn new(command: &str, config_hash: String, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            config_hash,
            git_rev: git_rev(),
            seed,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    /// First 16 hex digits of the sha256 of the manifest JSON.
    pub fn hash(&self) -> String {
        sha_hex(
            serde_json::to_string(self)
                .expect("manifest serializes")
                .as_bytes(),
        )[..16]
            .to_string()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut v = serde_json::to_value(self).expect("manifest serializes");
        v["hash"] = self.hash().into();
        let text = serde_json::to_string_pretty(&v).expect("json") + "\n";
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// `git rev-parse HEAD` of the working directory, or `"unknown"`.
pub fn git_rev() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".to_string())
}

/// One JSON object per line, each carrying the manifest hash.
pub struct JsonlWriter<W: Write> {
    out: W,
    manifest: String,
}

impl<W: Write> JsonlWriter<W> {
    pub fn new(out: W, manifest_hash: &str) -> Self {
        Self {
            out,
            manifest: manifest_hash.to_string(),
        }
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> std::io::Result<()> {
        let mut v = serde_json::to_value(record).map_err(std::io::Error::other)?;
        if let Some(obj) = v.as_object_mut() {
            obj.insert("manifest".into(), self.manifest.clone().into());
        }
        serde_json::to_writer(&mut self.out, &v).map_err(std::io::Error::other)?;
        self.out.write_all(b"\n")
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.out.flush()
    }
}

/// Writes `rows` as CSV with a trailing `manifest` column; the header is written even with no rows.
pub fn write_csv<W: Write, T: Serialize>(
    out: W,
    header: &[&str],
    rows: &[T],
    manifest_hash: &str,
) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    let csv_err = |e: csv::Error| Error::Config(format!("csv: {e}"));
    w.write_record(header.iter().copied().chain(["manifest"]))
        .map_err(csv_err)?;
    for r in rows {
        w.serialize((r, manifest_hash)).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))
}

/// Seed plus position in the seed-derived stream; all run randomness is a function of these.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub counter: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Free-form JSON.
    pub metadata: String,
    pub rng: RngState,
    pub sections: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Layout, little-endian throughout:
    /// magic, `u32` version, `u64` metadata length and UTF-8 bytes, `u64` seed, `u64` counter,
    /// `u64` section count, then per section `u32` name length, name, `u32` rank,
    /// `u64` per dimension and the row-major `f64` payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(self.metadata.len() as u64).to_le_bytes());
        b.extend_from_slice(self.metadata.as_bytes());
        b.extend_from_slice(&self.rng.seed.to_le_bytes());
        b.extend_from_slice(&self.rng.counter.to_le_bytes());
        b.extend_from_slice(&(self.sections.len() as u64).to_le_bytes());
        for (name, t) in &self.sections {
            b.extend_from_slice(&(name.len() as u32).to_le_bytes());
            b.extend_from_slice(name.as_bytes());
            b.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8], path: &str) -> Result<Self> {
        let mut r = Reader::new(bytes, path);
        let magic = r.take(MAGIC.len(), "magic")?;
        if magic != MAGIC {
            return Err(r.error_at(
                0,
                format!(
                    "bad magic: expected {:?}, found {:?}",
                    "MNEMO1",
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(r.error_at(
                6,
                format!("unsupported version {version}, expected {VERSION}"),
            ));
        }
        let meta_len = r.len_u64("metadata length")?;
        let at = r.pos;
        let metadata = String::from_utf8(r.take(meta_len, "metadata")?.to_vec())
            .map_err(|_| r.error_at(at, "metadata is not UTF-8".into()))?;
        let rng = RngState {
            seed: r.u64("rng seed")?,
            counter: r.u64("rng counter")?,
        };
        let count = r.len_u64("section count")?;
        let mut sections = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32("section name length")? as usize;
            let at = r.pos;
            let name = String::from_utf8(r.take(name_len, "section name")?.to_vec())
                .map_err(|_| r.error_at(at, "section name is not UTF-8".into()))?;
            let rank = r.u32("rank")? as usize;
            if rank > 8 {
                return Err(r.error_at(
                    r.pos - 4,
                    format!("section `{name}` has implausible rank {rank}"),
                ));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.len_u64("dimension")?);
            }
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = match numel {
                Some(n) if n.checked_mul(8).is_some_and(|b| b <= r.remaining()) => n,
                _ => {
                    return Err(r.error_at(
                        r.pos,
                        format!("section `{name}` payload {shape:?} exceeds file"),
                    ))
                }
            };
            let payload = r.take(numel * 8, "payload")?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            sections.push((name, Tensor::new(shape, data)?));
        }
        if r.remaining() != 0 {
            return Err(r.error_at(r.pos, format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self {
            metadata,
            rng,
            sections,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }

    /// Sections under `prefix`, with the prefix stripped.
    pub fn tree(&self, prefix: &str) -> ParamTree {
        self.sections
            .iter()
            .filter_map(|(n, t)| n.strip_prefix(prefix).map(|k| (k.to_string(), t.clone())))
            .collect()
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], path: &'a str) -> Self {
        Self {
            bytes,
            pos: 0,
            path,
        }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn error_at(&self, offset: usize, reason: String) -> Error {
        Error::Format {
            path: self.path.to_string(),
            offset: offset as u64,
            reason,
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(self.error_at(
                self.pos,
                format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.remaining()
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8, what)?.try_into().expect("8 bytes"),
        ))
    }

    fn len_u64(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        let v = self.u64(what)?;
        usize::try_from(v)
            .ok()
            .filter(|&v| v <= self.bytes.len())
            .ok_or_else(|| {
                self.error_at(
                    at,
                    format!("{what} {v} exceeds file size {}", self.bytes.len()),
                )
            })
    }
}

/// Metadata stored with meta-training checkpoints.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetaCheckpointInfo {
    pub config: ExperimentConfig,
    pub manifest: RunManifest,
}

pub fn meta_checkpoint(
    cfg: &ExperimentConfig,
    manifest: &RunManifest,
    opt: &LearnedOptimizer,
    state: &MetaState,
) -> Checkpoint {
    let w = opt.weights();
    let mut sections = Vec::new();
    let mut push = |prefix: &str, tree: &ParamTree| {
        sections.extend(
            tree.iter()
                .map(|(k, t)| (format!("{prefix}{k}"), t.clone())),
        );
    };
    push("trainable/", &w.trainable);
    push("fixed/", &w.fixed);
    push("meta_adam/m/", &state.meta_adam.m);
    push("meta_adam/v/", &state.meta_adam.v);
    sections.push((
        "meta_adam/t".into(),
        Tensor::scalar(state.meta_adam.t as f64),
    ));
    // the output directory is left out so identical runs write identical files
    let mut config = cfg.clone();
    config.run.out = PathBuf::new();
    let info = MetaCheckpointInfo {
        config,
        manifest: manifest.clone(),
    };
    Checkpoint {
        metadata: serde_json::to_string(&info).expect("metadata serializes"),
        rng: RngState {
            seed: cfg.run.seed,
            counter: state.iteration as u64,
        },
        sections,
    }
}

/// Optimizer, resumable meta-state and the config the checkpoint was written with.
pub fn load_meta_checkpoint(
    ck: &Checkpoint,
) -> Result<(MetaCheckpointInfo, LearnedOptimizer, MetaState)> {
    let info: MetaCheckpointInfo = serde_json::from_str(&ck.metadata)
        .map_err(|e| Error::Config(format!("checkpoint metadata: {e}")))?;
    let weights = LearnedOptimizerWeights {
        trainable: ck.tree("trainable/"),
        fixed: ck.tree("fixed/"),
    };
    let opt = LearnedOptimizer::from_weights(&info.config.lopt, weights)?;
    let t = ck
        .sections
        .iter()
        .find(|(n, _)| n == "meta_adam/t")
        .ok_or_else(|| Error::StructureMismatch("checkpoint lacks meta_adam/t".into()))?;
    let meta_adam = AdamState {
        m: ck.tree("meta_adam/m/"),
        v: ck.tree("meta_adam/v/"),
        t: t.1.data()[0] as u64,
    };
    meta_adam.m.check_same_structure(opt.trainable())?;
    meta_adam.v.check_same_structure(opt.trainable())?;
    let state = MetaState {
        iteration: ck.rng.counter as usize,
        meta_adam,
    };
    Ok((info, opt, state))
}

/// Meta-trains into `out`: `manifest.json`, `curves.jsonl` and `checkpoint.mnemo`.
///
/// When `resume` is given, training continues from it and curves are appended.
pub fn run_meta_train(
    cfg: &ExperimentConfig,
    out: &Path,
    resume: Option<&Path>,
    mut progress: impl FnMut(&RolloutRecord),
) -> Result<RunManifest> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let manifest = RunManifest::new("meta-train", cfg.hash(), cfg.run.seed);
    manifest.write(&out.join("manifest.json"))?;
    let (mut opt, mut state) = match resume {
        Some(p) => {
            let (info, opt, state) = load_meta_checkpoint(&Checkpoint::load(p)?)?;
            if info.config.lopt != cfg.lopt || info.config.run.seed != cfg.run.seed {
                return Err(Error::Config(format!(
                    "{}: optimizer config or seed differs from the checkpoint",
                    p.display()
                )));
            }
            (opt, state)
        }
        None => {
            let opt = LearnedOptimizer::init(
                &cfg.lopt,
                crate::tasks::derive_seed(cfg.run.seed, "lopt/init"),
            )?;
            let state = MetaState::new(&opt);
            (opt, state)
        }
    };
    let curves_path = out.join("curves.jsonl");
    let file = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&curves_path)
        .map_err(|e| Error::io(&curves_path, e))?;
    let mut jsonl = JsonlWriter::new(BufWriter::new(file), &manifest.hash());
    let ck_path = out.join("checkpoint.mnemo");
    let meta_cfg = cfg.meta_config();
    let every = if cfg.run.checkpoint_every == 0 {
        meta_cfg.iterations.max(1)
    } else {
        cfg.run.checkpoint_every
    };
    // iteration randomness depends only on (seed, iteration), so chunked runs match one long run
    let result = loop {
        let stop = ((state.iteration / every + 1) * every).min(meta_cfg.iterations);
        let chunk = MetaTrainConfig {
            iterations: stop,
            ..meta_cfg.clone()
        };
        let r = crate::meta::meta_train(&mut opt, &chunk, &mut state, |rec| {
            jsonl.write(rec).map_err(|e| Error::io(&curves_path, e))?;
            progress(rec);
            Ok(())
        });
        jsonl.flush().map_err(|e| Error::io(&curves_path, e))?;
        meta_checkpoint(cfg, &manifest, &opt, &state).save(&ck_path)?;
        if r.is_err() || state.iteration >= meta_cfg.iterations {
            break r;
        }
    };
    result.map(|_| manifest)
}

/// `kind[:key=value,...]` with keys `dim`, `shape`, `noise`, `size`, `seed`.
pub fn parse_task(s: &str) -> Result<TaskSpec> {
    let (kind, rest) = s.split_once(':').unwrap_or((s, ""));
    let kind = TaskKind::parse(kind.trim())?;
    let mut t = match kind {
        TaskKind::TwoGaussians => TaskSpec {
            kind,
            dim: 6,
            shape: 2.0,
            noise: 0.0,
            size: 512,
            seed: 0,
        },
        TaskKind::Spiral => TaskSpec {
            kind,
            dim: 2,
            shape: 1.0,
            noise: 0.03,
            size: 512,
            seed: 0,
        },
        TaskKind::Quadratic => TaskSpec {
            kind,
            dim: 20,
            shape: 0.0,
            noise: 0.0,
            size: 0,
            seed: 0,
        },
    };
    for kv in rest.split(',').filter(|p| !p.trim().is_empty()) {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::param("task", format!("expected key=value, got `{kv}`")))?;
        let bad = || {
            Error::param(
                format!("task.{}", k.trim()),
                format!("cannot parse `{}`", v.trim()),
            )
        };
        match k.trim() {
            "dim" => t.dim = v.trim().parse().map_err(|_| bad())?,
            "shape" | "sep" | "turns" => t.shape = v.trim().parse().map_err(|_| bad())?,
            "noise" => t.noise = v.trim().parse().map_err(|_| bad())?,
            "size" => t.size = v.trim().parse().map_err(|_| bad())?,
            "seed" => t.seed = v.trim().parse().map_err(|_| bad())?,
            other => return Err(Error::param("task", format!("unknown key `{other}`"))),
        }
    }
    if kind == TaskKind::Spiral && t.dim != 2 {
        return Err(Error::param("task.dim", "spiral inputs are 2-dimensional"));
    }
    if t.dim == 0 || (kind != TaskKind::Quadratic && t.size < 4) {
        return Err(Error::param(
            "task",
            "dim must be positive and size at least 4",
        ));
    }
    Ok(t)
}

/// `mlp:W1xW2x...:relu|sigmoid`, `attention:layers=L,heads=H,hidden=D,mlp=M,head_dim=K` or `quadratic`.
pub fn parse_architecture(s: &str, task: &TaskSpec) -> Result<Architecture> {
    let mut parts = s.split(':');
    match parts.next().unwrap_or("").trim() {
        "quadratic" => Ok(Architecture::Quadratic { dim: task.dim }),
        "mlp" => {
            let widths = parts.next().unwrap_or("");
            let hidden = widths
                .split('x')
                .filter(|w| !w.is_empty())
                .map(|w| w.trim().parse::<usize>().ok().filter(|&v| v > 0))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| Error::param("arch", format!("bad widths `{widths}`")))?;
            let activation = match parts.next().unwrap_or("relu").trim() {
                "relu" => Activation::Relu,
                "sigmoid" => Activation::Sigmoid,
                a => return Err(Error::param("arch", format!("unknown activation `{a}`"))),
            };
            Ok(Architecture::Mlp { hidden, activation })
        }
        "attention" => {
            let (mut layers, mut heads, mut hidden, mut mlp, mut head_dim) = (1, 2, 8, 16, 4);
            for kv in parts
                .next()
                .unwrap_or("")
                .split(',')
                .filter(|p| !p.is_empty())
            {
                let (k, v) = kv.split_once('=').ok_or_else(|| {
                    Error::param("arch", format!("expected key=value, got `{kv}`"))
                })?;
                let v: usize = v.trim().parse().ok().filter(|&v| v > 0).ok_or_else(|| {
                    Error::param(format!("arch.{k}"), "must be a positive integer")
                })?;
                match k.trim() {
                    "layers" => layers = v,
                    "heads" => heads = v,
                    "hidden" => hidden = v,
                    "mlp" => mlp = v,
                    "head_dim" => head_dim = v,
                    other => return Err(Error::param("arch", format!("unknown key `{other}`"))),
                }
            }
            Ok(Architecture::TinyAttention {
                layers,
                heads,
                hidden,
                mlp,
                head_dim,
            })
        }
        other => Err(Error::param(
            "arch",
            format!("expected mlp|attention|quadratic, got `{other}`"),
        )),
    }
}

/// One row of `optimize` output.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepRow {
    pub step: usize,
    pub optimizer: String,
    pub train_loss: f64,
    pub val_loss: f64,
}

pub const STEP_HEADER: [&str; 4] = ["step", "optimizer", "train_loss", "val_loss"];

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizeReport {
    /// Parameter hash of the shared starting point, recomputed before each optimizer's run.
    pub init_hashes: Vec<(String, String)>,
    pub curves: Vec<(String, Curve)>,
}

impl OptimizeReport {
    pub fn rows(&self) -> Vec<StepRow> {
        let mut rows = Vec::new();
        for (name, c) in &self.curves {
            for (i, (tr, va)) in c.train.iter().zip(&c.val).enumerate() {
                rows.push(StepRow {
                    step: i,
                    optimizer: name.clone(),
                    train_loss: *tr,
                    val_loss: *va,
                });
            }
        }
        rows
    }
}

/// The learned optimizer and each baseline from one initialisation and data order.
pub fn run_optimize(
    opt: &LearnedOptimizer,
    spec: &OptimizeeSpec,
    baselines: &[BaselineSpec],
    steps: usize,
    seed: u64,
) -> Result<OptimizeReport> {
    let optimizee: Optimizee = spec.build()?;
    let init_seed = crate::tasks::derive_seed(seed, "optimize/init");
    let data_seed = crate::tasks::derive_seed(seed, "optimize/data");
    let mut report = OptimizeReport {
        init_hashes: Vec::new(),
        curves: Vec::new(),
    };
    let x0 = optimizee.init_params(init_seed);
    let mut learned = LearnedStepper::new(opt, &x0)?;
    report.init_hashes.push(("learned".into(), x0.hash()));
    report.curves.push((
        "learned".into(),
        run_optimizer(&mut learned, &optimizee, &x0, steps, data_seed)?,
    ));
    for b in baselines {
        let x = optimizee.init_params(init_seed);
        report.init_hashes.push((b.to_string(), x.hash()));
        let mut stepper = b.build(&x);
        report.curves.push((
            b.to_string(),
            run_optimizer(&mut stepper, &optimizee, &x, steps, data_seed)?,
        ));
    }
    Ok(report)
}

/// Header and payload of an IDX file.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

pub const IDX_IMAGES: u32 = 0x0000_0803;
pub const IDX_LABELS: u32 = 0x0000_0801;

/// Parses an unsigned-byte IDX file whose big-endian magic must equal `expected`.
pub fn parse_idx(bytes: &[u8], path: &str, expected: u32) -> Result<IdxArray> {
    let err = |offset: usize, reason: String| Error::Format {
        path: path.to_string(),
        offset: offset as u64,
        reason,
    };
    if bytes.len() < 4 {
        return Err(err(
            bytes.len(),
            format!("truncated header: {} of 4 magic bytes", bytes.len()),
        ));
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    if magic != expected {
        return Err(err(
            0,
            format!("wrong magic: expected {expected:#010x}, found {magic:#010x}"),
        ));
    }
    let rank = (magic & 0xff) as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(err(
            bytes.len(),
            format!(
                "truncated header: need {header} bytes, file has {}",
                bytes.len()
            ),
        ));
    }
    let dims: Vec<usize> = (0..rank)
        .map(|i| {
            u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes")) as usize
        })
        .collect();
    let want = dims.iter().product::<usize>();
    let have = bytes.len() - header;
    if have != want {
        let at = header + have.min(want);
        return Err(err(
            at,
            format!("payload of {have} bytes, dimensions {dims:?} need {want}"),
        ));
    }
    Ok(IdxArray {
        dims,
        data: bytes[header..].to_vec(),
    })
}

pub fn encode_idx(magic: u32, dims: &[usize], data: &[u8]) -> Vec<u8> {
    let mut b = magic.to_be_bytes().to_vec();
    for &d in dims {
        b.extend_from_slice(&(d as u32).to_be_bytes());
    }
    b.extend_from_slice(data);
    b
}

/// Images flattened to rows scaled into `[0, 1]`, labels as classes; shuffled by `seed`.
pub fn ingest_idx(images: &Path, labels: &Path, seed: u64) -> Result<Dataset> {
    let read = |p: &Path| fs::read(p).map_err(|e| Error::io(p, e));
    let img = parse_idx(&read(images)?, &images.display().to_string(), IDX_IMAGES)?;
    let lab = parse_idx(&read(labels)?, &labels.display().to_string(), IDX_LABELS)?;
    let n = img.dims[0];
    if lab.dims[0] != n {
        return Err(Error::Format {
            path: labels.display().to_string(),
            offset: 4,
            reason: format!("{} labels for {n} images", lab.dims[0]),
        });
    }
    let width = img.dims[1..].iter().product::<usize>();
    let inputs = Tensor::matrix(
        n,
        width,
        img.data.iter().map(|&p| p as f64 / 255.0).collect(),
    )?;
    let labels: Vec<usize> = lab.data.iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1).max(10);
    Ok(Dataset::new(inputs, labels, classes)?.shuffled(seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_spec_from_cli_text() {
        let b = BaselineSpec::parse("adam:3e-2").unwrap();
        assert_eq!(b.kind, crate::baselines::BaselineKind::Adam);
        assert_eq!(b.lr, 0.03);
    }

    #[test]
    fn task_and_arch_parsing() {
        let t = parse_task("two_gaussians:dim=3,sep=4,seed=2").unwrap();
        assert_eq!((t.dim, t.shape, t.seed), (3, 4.0, 2));
        assert!(parse_task("spiral:dim=3").is_err());
        assert!(parse_task("circle").is_err());
        let a = parse_architecture("mlp:8x4:sigmoid", &t).unwrap();
        assert_eq!(
            a,
            Architecture::Mlp {
                hidden: vec![8, 4],
                activation: Activation::Sigmoid
            }
        );
        assert!(parse_architecture("mlp:8xq", &t).is_err());
    }

    #[test]
    fn config_rejects_unknown_and_out_of_range_fields() {
        let e = ExperimentConfig::from_toml("[run]\nthreads = 0\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("run.threads"), "{e}");
        let e = ExperimentConfig::from_toml("[run]\nsed = 1\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("sed"), "{e}");
        let e = ExperimentConfig::from_toml("[meta]\nhorizon = 0\n")
            .unwrap_err()
            .to_string();
        assert!(e.contains("meta.horizon"), "{e}");
    }

    #[test]
    fn config_toml_round_trip() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }
}
