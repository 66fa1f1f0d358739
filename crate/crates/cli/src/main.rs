//! `ovaproto`: generate data, train, evaluate and export curves from one JSON config.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ovaproto::experiment::{self, ExperimentConfig, MODEL_JSON};
use ovaproto::Error;

#[derive(Parser)]
#[command(name = "ovaproto", version, about = "Open-set recognition with one-vs-all prototype classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write train.csv, ind_test.csv and ood_test.csv.
    GenData(ConfigArgs),
    /// Train on train.csv; write model.json and train_log.jsonl.
    Train(ConfigArgs),
    /// Evaluate a checkpoint; write metrics.json, scores.csv, roc.csv, rc.csv and decisions.csv.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint to evaluate [default: <out>/model.json].
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Rebuild roc.csv and rc.csv from an existing scores.csv.
    Curves {
        #[arg(long)]
        scores: PathBuf,
        /// Output directory [default: the directory holding the scores].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the resolved configuration.
    Config(ConfigArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON experiment config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config entry, e.g. `--set train.epochs=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (same as `--set out_dir=...`).
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Exit status by failure class.
const EXIT_CONFIG: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_RUNTIME: u8 = 4;

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Parameter { .. } | Error::Config(_) => EXIT_CONFIG,
            Error::Format { .. }
            | Error::NoSamples { .. }
            | Error::Input(_)
            | Error::Label { .. }
            | Error::Init(_)
            | Error::Io { .. }
            | Error::Json { .. } => EXIT_DATA,
            _ => EXIT_RUNTIME,
        };
        Failure { code, message: e.to_string() }
    }
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig, Failure> {
        let text = match &self.config {
            Some(path) => Some(
                fs::read_to_string(path)
                    .map_err(|e| Failure { code: EXIT_CONFIG, message: format!("{}: {e}", path.display()) })?,
            ),
            None => None,
        };
        let mut cfg = ExperimentConfig::from_json_with_overrides(text.as_deref(), &self.overrides)?;
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        Ok(cfg)
    }
}

/// `println!` that tolerates a closed stdout (e.g. piped into `head`).
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData(args) => {
            let cfg = args.resolve()?;
            let (train, ind, ood) = experiment::cmd_gen_data(&cfg)?;
            say!(
                "wrote {} train, {} InD test and {} OOD test samples to {}",
                train.len(),
                ind.len(),
                ood.len(),
                cfg.out_dir.display()
            );
        }
        Command::Train(args) => {
            let cfg = args.resolve()?;
            let (_, log) = experiment::cmd_train(&cfg)?;
            if let Some(last) = log.last() {
                let loss = serde_json::to_string(&last.loss).expect("loss serializes");
                say!(
                    "epoch {}/{}: lr {} train_accuracy {:.4} loss {loss}",
                    last.epoch + 1,
                    log.epochs.len(),
                    last.lr,
                    last.train_accuracy
                );
            }
            say!("wrote {}", cfg.out_dir.join(MODEL_JSON).display());
        }
        Command::Eval { config, model } => {
            let cfg = config.resolve()?;
            let model = model.unwrap_or_else(|| cfg.out_dir.join(MODEL_JSON));
            let ev = experiment::cmd_eval(&cfg, &model)?;
            say!("accuracy {:.4}", ev.report.accuracy);
            for (rule, m) in &ev.report.per_rule {
                say!(
                    "{rule}: ood auroc {:.4} aupr {:.4} fpr95 {:.4}; misd aurc x1e3 {:.3}",
                    m.ood.auroc,
                    m.ood.aupr,
                    m.ood.fpr95,
                    m.misd.aurc_x1e3
                );
            }
        }
        Command::Curves { scores, out } => {
            let out = out.unwrap_or_else(|| scores.parent().map(Path::to_path_buf).unwrap_or_default());
            experiment::cmd_curves(&scores, &out)?;
            say!("wrote curves to {}", out.display());
        }
        Command::Config(args) => say!("{}", args.resolve()?.to_json().trim_end()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
