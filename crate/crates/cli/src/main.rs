mod commands;
mod config;
mod error;
mod outputs;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use resvm::dataset::{Split, SynthConfig};
use resvm::ssm::ScanDims;
use resvm::verify::VerifyOptions;

use commands::{BenchArgs, EvalArgs, TrainArgs};
use config::RunConfig;
use error::Result;

/// Selective state-space vision backbones: training, evaluation, dataset
/// tooling and self-verification.
#[derive(Parser)]
#[command(name = "resvm", version)]
struct Cli {
    /// Base directory for run directories and reports.
    #[arg(long, global = true, env = "RESVM_RUN_DIR", default_value = "runs")]
    runs: PathBuf,
    #[command(subcommand)]
    command: Command,
}

// Parsed once per process; boxing the large variant buys nothing.
#[allow(clippy::large_enum_variant)]
#[derive(Subcommand)]
enum Command {
    /// Train a model and write logs, checkpoints, curves and a summary.
    Train(TrainCli),
    /// Evaluate a checkpoint on a split of its run's dataset.
    Eval(EvalCli),
    /// Report class balance and image-size statistics for a dataset.
    Analyze {
        /// Dataset root: one directory of images per class.
        root: PathBuf,
        /// Report path [default: <runs>/analysis/<root name>.txt].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw a seeded per-class train/val split and write the split list.
    Split {
        root: PathBuf,
        #[arg(long, default_value_t = 0.7)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Split-list path [default: <root>/split.txt].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the synthetic fine-grained dataset.
    Synth(SynthCli),
    /// Run every self-check suite; exits with 2 if any fails.
    Verify(VerifyCli),
    /// Time the chunked scan against the sequential recurrence.
    BenchScan(BenchCli),
}

#[derive(Args)]
struct TrainCli {
    /// TOML run config with [model], [data] and [train] tables.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Train on the synthetic dataset, generated inside the run directory.
    #[arg(long)]
    synth: bool,
    /// Dataset root: one directory of images per class.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    split_list: Option<PathBuf>,
    /// nano, micro or small.
    #[arg(long)]
    model: Option<String>,
    /// plain or res.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    scan_chunk: Option<usize>,
    /// Record train top-1 every this many epochs.
    #[arg(long)]
    train_eval_every: Option<usize>,
    /// Any config key, as section.key=value. Applied after the flags above.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    sets: Vec<String>,
    /// Run directory [default: <runs>/<name>].
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Run name [default: <model>-<variant>-seed<seed>].
    #[arg(long)]
    name: Option<String>,
}

impl TrainCli {
    fn overrides(&self) -> Vec<String> {
        let quote = |s: &str| format!("{s:?}");
        let path = |p: &PathBuf| quote(&p.display().to_string());
        let mut out = Vec::new();
        let mut push = |key: &str, value: Option<String>| {
            if let Some(v) = value {
                out.push(format!("{key}={v}"));
            }
        };
        push("data.synth", self.synth.then(|| "true".into()));
        push("data.root", self.data.as_ref().map(path));
        push("data.split_list", self.split_list.as_ref().map(path));
        push("model.preset", self.model.as_deref().map(quote));
        push("model.variant", self.variant.as_deref().map(quote));
        push("train.epochs", self.epochs.map(|v| v.to_string()));
        push(
            "train.warmup_epochs",
            self.warmup_epochs.map(|v| v.to_string()),
        );
        push("train.batch_size", self.batch_size.map(|v| v.to_string()));
        push("train.lr", self.lr.map(|v| format!("{v:?}")));
        push("train.seed", self.seed.map(|v| v.to_string()));
        push("train.scan_chunk", self.scan_chunk.map(|v| v.to_string()));
        push(
            "train.train_eval_every",
            self.train_eval_every.map(|v| v.to_string()),
        );
        out.extend(self.sets.iter().cloned());
        out
    }
}

#[derive(Args)]
struct EvalCli {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Run config [default: config.toml beside the checkpoint].
    #[arg(long)]
    config: Option<PathBuf>,
    /// train, val or test [default: val when present, else train].
    #[arg(long)]
    split: Option<Split>,
    #[arg(long = "k", value_delimiter = ',', default_value = "1,5")]
    ks: Vec<usize>,
    /// Report path [default: eval_<split>.json beside the checkpoint].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthCli {
    out: PathBuf,
    #[arg(long, default_value_t = SynthConfig::default().classes)]
    classes: usize,
    #[arg(long, default_value_t = SynthConfig::default().per_class)]
    per_class: usize,
    #[arg(long, default_value_t = SynthConfig::default().size)]
    size: usize,
    #[arg(long, default_value_t = SynthConfig::default().seed)]
    seed: u64,
    #[arg(long, default_value_t = SynthConfig::default().noise)]
    noise: f64,
}

#[derive(Args)]
struct VerifyCli {
    /// Fewer trials, and skip the whole-model gradient check.
    #[arg(long)]
    quick: bool,
    /// Also write the suite reports as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Mutation fixture: verify a scan that drops chunk carries.
    #[arg(long, hide = true)]
    corrupt_scan: bool,
}

#[derive(Args)]
struct BenchCli {
    #[arg(long, default_value_t = 2)]
    batch: usize,
    #[arg(long, default_value_t = 1024)]
    len: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 16)]
    state: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,16,64,256")]
    chunks: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(t) => {
            let config = RunConfig::load(t.config.as_deref(), &t.overrides())?;
            let run_dir = t.run_dir.clone().unwrap_or_else(|| {
                let name = t.name.clone().unwrap_or_else(|| {
                    format!(
                        "{}-{}-seed{}",
                        config.model.preset, config.model.variant, config.train.seed
                    )
                });
                cli.runs.join(name)
            });
            commands::cmd_train(TrainArgs { config, run_dir }).map(drop)
        }
        Command::Eval(e) => commands::cmd_eval(EvalArgs {
            checkpoint: e.checkpoint,
            config: e.config,
            split: e.split,
            ks: e.ks,
            out: e.out,
        })
        .map(drop),
        Command::Analyze { root, out } => {
            let out = out.unwrap_or_else(|| {
                let name = root
                    .file_name()
                    .map_or_else(|| "dataset".into(), |n| n.to_string_lossy().into_owned());
                cli.runs.join("analysis").join(format!("{name}.txt"))
            });
            commands::cmd_analyze(&root, &out)
        }
        Command::Split {
            root,
            ratio,
            seed,
            out,
        } => {
            let out = out.unwrap_or_else(|| root.join(commands::SPLIT_FILE));
            commands::cmd_split(&root, ratio, seed, &out)
        }
        Command::Synth(s) => commands::cmd_synth(
            &SynthConfig {
                classes: s.classes,
                per_class: s.per_class,
                size: s.size,
                seed: s.seed,
                noise: s.noise,
            },
            &s.out,
        ),
        Command::Verify(v) => {
            let opts = if v.quick {
                VerifyOptions {
                    grad_trials: 10,
                    micro_model: false,
                    ..VerifyOptions::default()
                }
            } else {
                VerifyOptions::default()
            };
            commands::cmd_verify(&opts, v.corrupt_scan, v.json.as_deref()).map(drop)
        }
        Command::BenchScan(b) => commands::cmd_bench_scan(&BenchArgs {
            dims: ScanDims {
                batch: b.batch,
                len: b.len,
                dim: b.dim,
                state: b.state,
            },
            chunks: b.chunks,
            reps: b.reps,
            seed: b.seed,
        }),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
