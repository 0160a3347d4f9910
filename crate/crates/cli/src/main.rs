//! Benchmark CLI: `train`, `eval`, `gradcheck`, and `gen-data` over the
//! temporal predictive-coding library.

use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use tpc_core::config::{Algorithm, RunConfig, TaskKind};
use tpc_core::tasks::{generate_copy_batch, synthetic_corpus};

#[derive(Parser)]
#[command(name = "tpc", about = "Sequence learning with temporal predictive coding", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics CSV, summary JSON and a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint and print the metrics as JSON.
    Eval(EvalArgs),
    /// Run the gradient oracles and print one line per check.
    Gradcheck(GradcheckArgs),
    /// Dump a generated batch (or a synthetic corpus) to a file.
    GenData(GenDataArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Task to configure defaults for.
    #[arg(long, default_value = "copy")]
    task: String,
    /// Learning algorithm: spatial_bp | bptt | tpc | tpc_rtrl.
    #[arg(long, default_value = "tpc_rtrl")]
    algorithm: String,
    /// Configuration file of `key = value` lines; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sets both the data and init seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Additional `key=value` overrides, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let task = TaskKind::parse(&self.task)
            .with_context(|| format!("unknown task `{}`", self.task))?;
        let algorithm = Algorithm::parse(&self.algorithm)
            .with_context(|| format!("unknown algorithm `{}`", self.algorithm))?;
        let mut cfg = RunConfig::defaults(task, algorithm);
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            cfg.apply_file(&text)?;
            // the task/algorithm flags still win over the file
            cfg.task = task;
            cfg.algorithm = algorithm;
        }
        if let Some(seed) = self.seed {
            cfg.seed_data = seed;
            cfg.seed_init = seed;
        }
        for kv in &self.sets {
            let Some((k, v)) = kv.split_once('=') else {
                bail!("--set expects KEY=VALUE, got `{kv}`");
            };
            cfg.apply(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Output directory; defaults to $TPC_OUT_DIR or ./runs.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Parameter checkpoint written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Deliberately corrupt one influence-matrix entry (test hook); the
    /// command must then exit nonzero.
    #[arg(long)]
    inject_fault: bool,
}

#[derive(Args)]
struct GenDataArgs {
    /// What to dump: `copy` (a batch as JSON) or `char-corpus` (plain text).
    #[arg(long, default_value = "copy")]
    kind: String,
    #[arg(long, default_value_t = 16)]
    batch_size: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Corpus size for `char-corpus`.
    #[arg(long, default_value_t = 200_000)]
    bytes: usize,
    #[arg(long)]
    out: PathBuf,
}

fn default_out_dir() -> PathBuf {
    std::env::var_os("TPC_OUT_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn run_name(cfg: &RunConfig) -> String {
    format!(
        "{}_{}_s{}",
        cfg.task.name(),
        cfg.algorithm.name(),
        cfg.seed_init
    )
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Train(args) => {
            let cfg = args.config.resolve()?;
            let out_dir = args
                .out_dir
                .unwrap_or_else(|| default_out_dir().join(run_name(&cfg)));
            let summary = if cfg.float64 {
                tpc_core::trainer::run_training::<f64>(&cfg, &out_dir)
            } else {
                tpc_core::trainer::run_training::<f32>(&cfg, &out_dir)
            };
            match summary {
                Ok(s) => {
                    eprintln!(
                        "done: {} batches, best eval accuracy {:.4}, best eval loss {:.4}",
                        s.batches_run, s.best_eval_accuracy, s.best_eval_loss
                    );
                    eprintln!("artifacts in {}", out_dir.display());
                    Ok(())
                }
                Err(e) => {
                    eprintln!("training aborted: {e}");
                    eprintln!("metrics written so far remain in {}", out_dir.display());
                    std::process::exit(2);
                }
            }
        }
        Command::Eval(args) => {
            let cfg = args.config.resolve()?;
            let metrics = if cfg.float64 {
                tpc_core::trainer::eval_checkpoint::<f64>(&args.checkpoint, &cfg)?
            } else {
                tpc_core::trainer::eval_checkpoint::<f32>(&args.checkpoint, &cfg)?
            };
            println!("{}", serde_json::to_string_pretty(&metrics)?);
            Ok(())
        }
        Command::Gradcheck(args) => {
            let reports = tpc_core::oracle::run_all(args.inject_fault)?;
            let mut failed = false;
            for r in &reports {
                println!(
                    "{} {:45} max rel err {:.3e} (tolerance {:.0e}) {}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.max_err,
                    r.tolerance,
                    r.detail
                );
                failed |= !r.passed;
            }
            if failed {
                std::process::exit(1);
            }
            Ok(())
        }
        Command::GenData(args) => {
            match args.kind.as_str() {
                "copy" => {
                    let batch = generate_copy_batch::<f64>(args.batch_size, args.seed, false);
                    let dump: Vec<serde_json::Value> = batch
                        .sequences
                        .iter()
                        .map(|s| {
                            serde_json::json!({
                                "inputs": s.input_tokens,
                                "targets": s.targets,
                                "mask": s.mask,
                            })
                        })
                        .collect();
                    std::fs::write(&args.out, serde_json::to_string_pretty(&dump)?)?;
                }
                "char-corpus" => {
                    std::fs::write(&args.out, synthetic_corpus(args.bytes, args.seed))?;
                }
                other => bail!("unknown gen-data kind `{other}`"),
            }
            eprintln!("wrote {}", args.out.display());
            Ok(())
        }
    }
}
