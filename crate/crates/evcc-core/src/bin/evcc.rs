//! Command-line entry point.
//!
//! Exit codes: 0 success, 2 config error, 3 data/format error,
//! 4 non-finite loss abort, 5 gradient-check failure, 1 other.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use evcc_core::config::RunConfig;
use evcc_core::error::{EvccError, Result};
use evcc_core::flops::model_flop_report;
use evcc_core::gradcheck::{DEFAULT_H, DEFAULT_TOL};
use evcc_core::train;

#[derive(Parser)]
#[command(name = "evcc", about = "Three-branch fusion classifier: training, evaluation, and efficiency accounting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of key=value lines; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Cap the number of dataset samples (data.take_n).
    #[arg(long)]
    take_n: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::parse(&std::fs::read_to_string(path)?)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(take_n) = self.take_n {
            cfg.data.take_n = take_n;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics + checkpoint to the output directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,

        /// Output directory for config echo, metrics log, and checkpoint.
        #[arg(long, default_value = "runs/train")]
        out: PathBuf,

        /// Resume from a checkpoint file.
        #[arg(long)]
        resume: Option<PathBuf>,

        /// Stop (and checkpoint) after this many steps while keeping the
        /// full-schedule learning rate, for later --resume.
        #[arg(long)]
        stop_after: Option<u64>,
    },

    /// Evaluate a checkpoint; reports loss, accuracy, and routing stats.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,

        /// Checkpoint to evaluate.
        #[arg(long)]
        checkpoint: PathBuf,

        /// Evaluate the test split instead of the train split.
        #[arg(long)]
        test: bool,
    },

    /// Check tape gradients against central finite differences.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,

        /// Run in double precision (always on; kept for interface parity).
        #[arg(long, default_value_t = true)]
        double: bool,

        /// Central-difference step.
        #[arg(long, default_value_t = DEFAULT_H)]
        h: f64,

        /// Max relative error tolerance.
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
    },

    /// Print the analytical MAC/FLOP report for a configuration.
    Flops {
        #[command(flatten)]
        cfg: ConfigArgs,

        /// Also print machine-readable key=value records.
        #[arg(long)]
        kv: bool,
    },

    /// Train/eval over a knob grid (loss.lambda, fusion.depth, prune.r).
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,

        /// Knob to sweep.
        #[arg(long)]
        knob: String,

        /// Comma-separated knob values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,

        /// Comma-separated seeds (one run per value x seed).
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,

        #[arg(long, default_value = "runs/sweep")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { cfg, out, resume, stop_after } => {
            let cfg = cfg.load()?;
            let outcome = train::run_train_until(&cfg, &out, resume.as_deref(), stop_after)?;
            println!("{}", outcome.final_train.to_line());
            println!("{}", outcome.final_test.to_line());
            println!("checkpoint: {}", outcome.checkpoint.display());
            println!("metrics:    {}", outcome.metrics_log.display());
        }
        Command::Eval { cfg, checkpoint, test } => {
            let cfg = cfg.load()?;
            let record = train::run_eval(&cfg, &checkpoint, test)?;
            println!("{}", record.to_line());
        }
        Command::Gradcheck { cfg, double, h, tol } => {
            let cfg = cfg.load()?;
            // gradient checking always runs in double precision
            let _ = double;
            let report = train::run_gradcheck(&cfg, h, tol)?;
            for g in &report.groups {
                if g.skipped_frozen {
                    println!("{:<28} skipped (frozen)", g.name);
                } else {
                    println!(
                        "{:<28} max_rel_err={:<12.3e} {}",
                        g.name,
                        g.max_rel_err,
                        if g.passed { "pass" } else { "FAIL" }
                    );
                }
            }
            println!(
                "gradcheck: {} groups, max_rel_err={:.3e}, tol={:.1e}",
                report.groups.len(),
                report.max_rel_err(),
                report.tol
            );
            if !report.passed() {
                return Err(EvccError::GradCheck(format!(
                    "groups failing at tol {}: {}",
                    report.tol,
                    report.failing_groups().join(", ")
                )));
            }
            println!("gradcheck: PASS");
        }
        Command::Flops { cfg, kv } => {
            let cfg = cfg.load()?;
            let report = model_flop_report(&cfg)?;
            print!("{}", report.to_text());
            if kv {
                println!();
                print!("{}", report.to_kv());
            }
        }
        Command::Sweep { cfg, knob, values, seeds, out } => {
            let cfg = cfg.load()?;
            if values.is_empty() {
                return Err(EvccError::Config("sweep needs --values".into()));
            }
            let cells = train::run_sweep(&cfg, &knob, &values, &seeds, &out)?;
            print!("{}", train::sweep_table(&knob, &cells));
            println!("records: {}", out.join("sweep.log").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
