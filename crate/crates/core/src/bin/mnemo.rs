use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mnemosyne::baselines::BaselineSpec;
use mnemosyne::harness::{self, Checkpoint, ExperimentConfig, RunManifest};
use mnemosyne::lopt::Mode;
use mnemosyne::memlab;
use mnemosyne::optimizee::OptimizeeSpec;
use mnemosyne::rf::Mechanism;
use mnemosyne::Error;

#[derive(Parser)]
#[command(
    name = "mnemo",
    version,
    about = "Learned optimizers with compact associative memory"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train a learned optimizer from a TOML config.
    MetaTrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Train one optimizee with a meta-trained optimizer and baselines.
    Optimize {
        #[arg(long)]
        checkpoint: PathBuf,
        /// e.g. `spiral`, `two_gaussians:dim=6,sep=2`, `quadratic:dim=20`
        #[arg(long)]
        task: String,
        /// e.g. `mlp:48x48:relu`; defaults to `mlp:32:relu`, or `quadratic` for quadratic tasks
        #[arg(long)]
        arch: Option<String>,
        #[arg(long)]
        steps: usize,
        #[arg(long, default_value = "adam:1e-3,adam:1e-4,sgd:1e-2")]
        baselines: String,
        #[arg(long, default_value_t = 64)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Expected optimizer mode; errors if the checkpoint differs.
        #[arg(long)]
        mode: Option<String>,
        /// CSV path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Associative-memory and kernel experiments.
    Memlab {
        #[command(subcommand)]
        command: Memlab,
    },
}

#[derive(Args, Serialize)]
struct Common {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// CSV path; stdout when absent.
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Serialize)]
#[serde(tag = "experiment", rename_all = "kebab-case")]
enum Memlab {
    Retrieval {
        #[arg(long, default_value_t = 64)]
        n: usize,
        #[arg(long, default_value_t = 5)]
        m: usize,
        #[arg(long, default_value_t = 0.1)]
        rho: f64,
        #[arg(long, default_value_t = 0.25)]
        tau: f64,
        #[arg(long, default_value_t = 4096)]
        features: usize,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        /// FAVOR++ parameter; optimal for each pattern set when absent.
        #[arg(long)]
        rf_rho: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    SignCheck {
        #[arg(long, default_value_t = 16)]
        n: usize,
        #[arg(long, default_value_t = 2)]
        m: usize,
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        #[arg(long, default_value_t = 0.125)]
        rho: f64,
        #[arg(long, default_value_t = 200)]
        draws: usize,
        #[arg(long, default_value_t = 256)]
        features: usize,
        #[arg(long, default_value_t = 100)]
        configurations: usize,
        #[arg(long)]
        rf_rho: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    Variance {
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        m: usize,
        #[arg(long, default_value_t = 0.95)]
        rho: f64,
        #[arg(long, default_value_t = 1)]
        features: usize,
        #[arg(long, default_value_t = 100_000)]
        draws: usize,
        #[command(flatten)]
        common: Common,
    },
    KernelBench {
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, value_delimiter = ',', default_value = "16,64,256,1024")]
        features: Vec<usize>,
        #[arg(long, default_value_t = 50)]
        pairs: usize,
        #[arg(long, default_value_t = 1000)]
        draws: usize,
        #[arg(long)]
        iid: bool,
        #[command(flatten)]
        common: Common,
    },
    CamBench {
        #[arg(long, default_value_t = 8)]
        n: usize,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,1")]
        tau: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "16,64,256")]
        features: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "10,50,100")]
        cache: Vec<usize>,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long, default_value = "hyperbolic-cosine")]
        mechanism: String,
        #[command(flatten)]
        common: Common,
    },
}

impl Memlab {
    fn common(&self) -> &Common {
        match self {
            Memlab::Retrieval { common, .. }
            | Memlab::SignCheck { common, .. }
            | Memlab::Variance { common, .. }
            | Memlab::KernelBench { common, .. }
            | Memlab::CamBench { common, .. } => common,
        }
    }
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::MetaTrain {
            config,
            seed,
            out,
            iterations,
            resume,
            quiet,
        } => {
            let mut cfg = ExperimentConfig::load(&config).map_err(config_failure)?;
            if let Some(s) = seed {
                cfg.run.seed = s;
                cfg.meta.seed = 0;
            }
            if let Some(o) = out {
                cfg.run.out = o;
            }
            if let Some(i) = iterations {
                cfg.meta.iterations = i;
            }
            cfg.validate().map_err(config_failure)?;
            let out = cfg.run.out.clone();
            let manifest = harness::run_meta_train(&cfg, &out, resume.as_deref(), |rec| {
                if !quiet && (rec.iteration + 1) % 25 == 0 {
                    eprintln!("iter {:>6}  meta-loss {:.4}", rec.iteration, rec.meta_loss);
                }
            })?;
            eprintln!("wrote {} (manifest {})", out.display(), manifest.hash());
            Ok(())
        }
        Command::Optimize {
            checkpoint,
            task,
            arch,
            steps,
            baselines,
            batch_size,
            seed,
            mode,
            out,
        } => {
            let task = harness::parse_task(&task).map_err(|e| Failure::Usage(e.to_string()))?;
            let default_arch = if task.kind == mnemosyne::tasks::TaskKind::Quadratic {
                "quadratic"
            } else {
                "mlp:32:relu"
            };
            let architecture =
                harness::parse_architecture(arch.as_deref().unwrap_or(default_arch), &task)
                    .map_err(|e| Failure::Usage(e.to_string()))?;
            let baselines =
                BaselineSpec::parse_list(&baselines).map_err(|e| Failure::Usage(e.to_string()))?;
            let (info, opt, _) = harness::load_meta_checkpoint(&Checkpoint::load(&checkpoint)?)?;
            if let Some(m) = mode {
                let m = Mode::parse(&m).map_err(|e| Failure::Usage(e.to_string()))?;
                if m != info.config.lopt.mode {
                    return Err(Failure::Runtime(Error::Config(format!(
                        "{}: checkpoint holds a {} optimizer, --mode asked for {}",
                        checkpoint.display(),
                        info.config.lopt.mode.name(),
                        m.name()
                    ))));
                }
            }
            let spec = OptimizeeSpec {
                architecture,
                task,
                batch_size,
            };
            let args = serde_json::json!({
                "checkpoint_manifest": info.manifest.hash(),
                "spec": spec,
                "steps": steps,
                "baselines": baselines.iter().map(|b| b.to_string()).collect::<Vec<_>>(),
                "seed": seed,
            });
            let manifest = RunManifest::new(
                "optimize",
                harness::sha_hex(args.to_string().as_bytes()),
                seed,
            );
            let report = harness::run_optimize(&opt, &spec, &baselines, steps, seed)?;
            for (name, h) in &report.init_hashes {
                eprintln!("{name:<14} init params {h}");
            }
            emit(
                out.as_deref(),
                &manifest,
                &harness::STEP_HEADER,
                &report.rows(),
            )
        }
        Command::Memlab { command } => memlab_cmd(command),
    }
}

fn config_failure(e: Error) -> Failure {
    match e {
        Error::Io { .. } | Error::Config(_) | Error::InvalidParameter { .. } => {
            Failure::Usage(e.to_string())
        }
        other => Failure::Runtime(other),
    }
}

/// Writes CSV rows to `out` (plus a sibling manifest) or stdout (manifest on stderr).
fn emit<T: Serialize>(
    out: Option<&Path>,
    manifest: &RunManifest,
    header: &[&str],
    rows: &[T],
) -> Result<(), Failure> {
    match out {
        Some(p) => {
            let f = File::create(p).map_err(|e| Error::io(p, e))?;
            harness::write_csv(f, header, rows, &manifest.hash())?;
            manifest.write(&p.with_extension("manifest.json"))?;
        }
        None => {
            let stdout = std::io::stdout();
            harness::write_csv(stdout.lock(), header, rows, &manifest.hash())?;
            let _ = writeln!(
                std::io::stderr(),
                "{}",
                serde_json::to_string(manifest).expect("manifest serializes")
            );
        }
    }
    Ok(())
}

fn memlab_cmd(cmd: Memlab) -> Result<(), Failure> {
    let args = serde_json::to_string(&cmd).expect("arguments serialize");
    let common = cmd.common();
    let manifest = RunManifest::new("memlab", harness::sha_hex(args.as_bytes()), common.seed);
    let (out, threads, seed) = (common.out.clone(), common.threads.max(1), common.seed);
    let out = out.as_deref();
    match cmd {
        Memlab::Retrieval {
            n,
            m,
            rho,
            tau,
            features,
            trials,
            rf_rho,
            ..
        } => {
            let params = memlab::RetrievalParams {
                dim: n,
                patterns: m,
                rho,
                tau_sep: tau,
                features,
                trials,
                seed,
                rf_rho,
            };
            let rows = memlab::retrieval_experiment(&params, threads)?;
            emit(
                out,
                &manifest,
                &[
                    "N",
                    "M",
                    "rho",
                    "tau_sep",
                    "r",
                    "mechanism",
                    "trials",
                    "success_rate",
                    "wall_time",
                ],
                &rows,
            )
        }
        Memlab::SignCheck {
            n,
            m,
            tau,
            rho,
            draws,
            features,
            configurations,
            rf_rho,
            ..
        } => {
            let params = memlab::SignCheckParams {
                dim: n,
                patterns: m,
                tau_sep: tau,
                rho,
                draws,
                features,
                configurations,
                rf_rho,
                seed,
            };
            let row = memlab::theorem1_sign_check(&params, threads)?;
            emit(
                out,
                &manifest,
                &[
                    "N",
                    "M",
                    "rho",
                    "tau_sep",
                    "r",
                    "configurations",
                    "case1",
                    "case2",
                    "agree",
                    "disagree",
                    "inconclusive",
                    "sign_rate",
                    "wall_time",
                ],
                &[row],
            )
        }
        Memlab::Variance {
            n,
            m,
            rho,
            features,
            draws,
            ..
        } => {
            let row = memlab::variance_experiment(n, m, rho, features, draws, seed)?;
            emit(
                out,
                &manifest,
                &[
                    "N",
                    "M",
                    "rho",
                    "r",
                    "draws",
                    "closed_form",
                    "closed_form_as_printed",
                    "monte_carlo",
                    "variance_ratio",
                    "wall_time",
                ],
                &[row],
            )
        }
        Memlab::KernelBench {
            n,
            features,
            pairs,
            draws,
            iid,
            ..
        } => {
            let rows = memlab::kernel_bench(n, &features, pairs, draws, !iid, seed)?;
            emit(
                out,
                &manifest,
                &[
                    "mechanism",
                    "r",
                    "pair_id",
                    "exact",
                    "mean",
                    "variance",
                    "rel_error",
                ],
                &rows,
            )
        }
        Memlab::CamBench {
            n,
            tau,
            features,
            cache,
            steps,
            mechanism,
            ..
        } => {
            let mech = Mechanism::parse(&mechanism).map_err(|e| Failure::Usage(e.to_string()))?;
            let cam = memlab::cam_bench(&tau, &features, mech, n, steps, seed)?;
            let cached = memlab::cache_bench(&cache, n, steps, seed)?;
            #[derive(Serialize)]
            struct Row {
                kind: &'static str,
                tau: f64,
                r: usize,
                cache_len: Option<usize>,
                mechanism: &'static str,
                steps: usize,
                rel_error: f64,
                step_micros: f64,
                state_floats: usize,
            }
            let mut rows: Vec<Row> = cam
                .into_iter()
                .map(|c| Row {
                    kind: "cam",
                    tau: c.tau,
                    r: c.r,
                    cache_len: None,
                    mechanism: c.mechanism,
                    steps: c.steps,
                    rel_error: c.rel_error,
                    step_micros: c.step_micros,
                    state_floats: c.state_floats,
                })
                .collect();
            rows.extend(cached.into_iter().map(|c| Row {
                kind: "cache",
                tau: 0.0,
                r: 0,
                cache_len: Some(c.cache_len),
                mechanism: "exact",
                steps: c.steps,
                rel_error: c.rel_error,
                step_micros: c.step_micros,
                state_floats: c.state_floats,
            }));
            emit(
                out,
                &manifest,
                &[
                    "kind",
                    "tau",
                    "r",
                    "cache_len",
                    "mechanism",
                    "steps",
                    "rel_error",
                    "step_micros",
                    "state_floats",
                ],
                &rows,
            )
        }
    }
}
