use clap::{Parser, Subcommand, ValueEnum};
use dtram::harness::{self, HarnessError, RunConfig, Split};
use dtram::model::Mode;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "dtram", version, about = "Recurrent visual attention with learned stopping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    Greedy,
    Sample,
}

#[derive(Subcommand)]
enum Command {
    /// Train fixed-length models along a curriculum, or fine-tune learned stopping.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// ram or dtram
        #[arg(long)]
        mode: Option<String>,
        /// Starting checkpoint for dtram fine-tuning.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Extra key=value overrides applied after the config file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Error rate and step statistics of a checkpoint, as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "data/mnist")]
        data_dir: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, value_enum, default_value = "greedy")]
        policy: Policy,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 5000)]
        validation_size: usize,
    },
    /// Confidence-threshold stopping sweep on a fixed-length checkpoint, as CSV.
    SweepThreshold {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "data/mnist")]
        data_dir: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Comma-separated thresholds.
        #[arg(long, value_delimiter = ',')]
        thresholds: Vec<f64>,
        #[arg(long, default_value_t = 5000)]
        validation_size: usize,
    },
    /// Gradient, estimator and round-trip self checks.
    Verify,
    /// Per-step greedy trajectory of one image, as JSON.
    Trace {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "data/mnist")]
        data_dir: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        index: usize,
        #[arg(long, default_value_t = 5000)]
        validation_size: usize,
    },
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("plain data serializes")
}

fn run(cli: Cli) -> Result<bool, HarnessError> {
    match cli.command {
        Command::Train {
            config,
            data_dir,
            out,
            seed,
            mode,
            checkpoint,
            overrides,
        } => {
            let mut cfg = match config {
                Some(path) => {
                    let text = std::fs::read_to_string(&path)
                        .map_err(|e| HarnessError::Usage(format!("{}: {e}", path.display())))?;
                    RunConfig::parse(&text)?
                }
                None => RunConfig::default(),
            };
            if let Some(d) = data_dir {
                cfg.data_dir = d;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(m) = mode {
                cfg.mode = m.parse()?;
            }
            if let Some(c) = checkpoint {
                cfg.init_checkpoint = Some(c);
            }
            for kv in &overrides {
                let (k, v) = kv
                    .split_once('=')
                    .ok_or_else(|| HarnessError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
                cfg.set(k.trim(), v.trim())?;
            }
            let outcome = harness::cmd_train(&cfg, &mut std::io::stderr())?;
            for p in &outcome.checkpoints {
                println!("{}", p.display());
            }
            Ok(true)
        }
        Command::Eval {
            checkpoint,
            data_dir,
            split,
            policy,
            seed,
            validation_size,
        } => {
            let data = harness::load_split(&data_dir, split, validation_size)?;
            let mode = match policy {
                Policy::Greedy => Mode::Greedy,
                Policy::Sample => Mode::Sample,
            };
            let out = harness::cmd_eval(&checkpoint, &data, split, mode, seed)?;
            println!("{}", to_json(&out));
            Ok(true)
        }
        Command::SweepThreshold {
            checkpoint,
            data_dir,
            split,
            thresholds,
            validation_size,
        } => {
            let thresholds = if thresholds.is_empty() {
                harness::DEFAULT_THRESHOLDS.to_vec()
            } else {
                thresholds
            };
            let data = harness::load_split(&data_dir, split, validation_size)?;
            let rows = harness::cmd_sweep_threshold(&checkpoint, &thresholds, &data)?;
            harness::write_sweep_csv(&rows, std::io::stdout())?;
            Ok(true)
        }
        Command::Verify => {
            let report = harness::cmd_verify();
            println!("{}", to_json(&report));
            Ok(report.passed)
        }
        Command::Trace {
            checkpoint,
            data_dir,
            split,
            index,
            validation_size,
        } => {
            let data = harness::load_split(&data_dir, split, validation_size)?;
            let out = harness::cmd_trace(&checkpoint, &data, index)?;
            println!("{}", to_json(&out));
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("verification failed");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
