//! Command-line front end; all functionality lives in the library.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mealvision::config::RunConfig;
use mealvision::dataset::TestSplit;
use mealvision::runner;

#[derive(Parser)]
#[command(
    name = "mealvision",
    about = "Meal assessment from a single RGB image: synthetic data, training, evaluation, prediction and reports"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Configuration file (flat `key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline overrides, e.g. --set train.seed=7 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self, seed: Option<u64>) -> Result<RunConfig, runner::RunnerError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        for (i, entry) in self.sets.iter().enumerate() {
            let Some((key, value)) = entry.split_once('=') else {
                return Err(mealvision::config::ConfigError::Malformed {
                    line: i + 1,
                    text: entry.clone(),
                }
                .into());
            };
            cfg.set(key.trim(), value.trim(), i + 1)?;
        }
        if let Some(seed) = seed {
            cfg.train.seed = seed;
        }
        cfg.finish()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with a 6:1:1 scene split manifest.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of scenes (each rendered as 6 captures).
        #[arg(long, default_value_t = 80)]
        count: usize,
        /// Generation seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on a dataset's train split.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset directory (with manifest.json).
        #[arg(long)]
        data: PathBuf,
        /// Run output directory.
        #[arg(long)]
        out: PathBuf,
        /// Seed override.
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from a training checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one test split.
    Evaluate {
        /// Checkpoint file.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Test subset: fixed, free or full.
        #[arg(long, default_value = "full", value_parser = parse_split)]
        split: TestSplit,
        /// Output directory for the report.
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict on a single RGB image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input image path.
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render plots from a training log and/or evaluation reports.
    Report {
        /// Training log (train_log.jsonl).
        #[arg(long)]
        log: Option<PathBuf>,
        /// Evaluation report JSON files (repeatable).
        #[arg(long = "reports", value_delimiter = ',')]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_split(s: &str) -> Result<TestSplit, String> {
    s.parse()
}

fn run() -> Result<(), runner::RunnerError> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData {
            config,
            out,
            count,
            seed,
        } => {
            let cfg = config.resolve(None)?;
            let summary = runner::cmd_gen_data(&cfg, &out, count, seed)?;
            println!(
                "generated {} scenes ({} samples); splits {}:{}:{} scenes at {}",
                summary.scenes,
                summary.samples,
                summary.train_scenes,
                summary.val_scenes,
                summary.test_scenes,
                out.display()
            );
        }
        Command::Train {
            config,
            data,
            out,
            seed,
            resume,
        } => {
            let cfg = config.resolve(seed)?;
            let outcome = runner::cmd_train(&cfg, &data, &out, resume.as_deref())?;
            println!(
                "trained {} iterations in {:.1}s; checkpoint {}",
                outcome.summary.iterations_run,
                outcome.summary.wall_seconds,
                outcome.checkpoint.display()
            );
            if let Some(best) = outcome.summary.best_validation {
                println!(
                    "best validation AP50 {:.1}% at iteration {}",
                    best.ap50_percent, best.iteration
                );
            }
        }
        Command::Evaluate {
            checkpoint,
            data,
            split,
            out,
        } => {
            let report = runner::cmd_evaluate(&checkpoint, &data, split, &out)?;
            println!(
                "split {:?}: F_sum {:.2}% F_min {:.2}% | AP50 {:.1}% AP75 {:.1}% mAP {:.1}% | MAD {:.2} mm ARD {:.2}% | volume APE {:.1}%",
                split,
                report.f_sum,
                report.f_min,
                report.ap50,
                report.ap75,
                report.map,
                report.mad_mm,
                report.ard_percent,
                report.volume_ape_percent
            );
            println!(
                "mean inference {:.3} s/image on CPU (GPU reference figure: 0.2 s/image)",
                report.mean_inference_seconds
            );
        }
        Command::Predict {
            checkpoint,
            image,
            out,
        } => {
            let outcome = runner::cmd_predict(&checkpoint, &image, &out)?;
            println!(
                "{} detections; overlay {}, result {}",
                outcome.detections,
                outcome.overlay.display(),
                outcome.result.display()
            );
        }
        Command::Report { log, reports, out } => {
            let outcome = runner::cmd_report(log.as_deref(), &reports, &out)?;
            for p in outcome.plots {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
