//! Command-line driver for the mmkd workflow: generate synthetic data, train
//! the teacher on full modalities, distill a student under modality dropout,
//! evaluate robustness, and compare reports.
//!
//! Exit codes: 0 success, 2 config error, 3 divergence, 4 I/O, 1 otherwise.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mmkd::eval::EvalReport;
use mmkd::pipeline;
use mmkd::{MmkdError, RunConfig};

#[derive(Parser)]
#[command(
    name = "mmkd",
    about = "Robust multi-modal segmentation distillation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file; omitted keys keep defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a single config key, e.g. `--set loss.alpha=100`. Repeatable;
    /// applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

impl ConfigArgs {
    fn build(&self) -> Result<RunConfig, MmkdError> {
        let mut config = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| MmkdError::io(path, e))?;
                RunConfig::parse(&text)?
            }
            None => RunConfig::default(),
        };
        for s in &self.sets {
            let (key, value) = s.split_once('=').ok_or_else(|| {
                MmkdError::Config(format!("--set '{s}' is not of the form key=value"))
            })?;
            config.set(key.trim(), value.trim())?;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-modal dataset under data.root.
    GenData(ConfigArgs),
    /// Stage one: train the teacher with cross-entropy on all modalities.
    TrainTeacher {
        #[command(flatten)]
        config: ConfigArgs,
        /// Resume from an interrupted run directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Stage two: distill a fresh student from a frozen teacher checkpoint.
    TrainStudent {
        #[command(flatten)]
        config: ConfigArgs,
        /// Teacher checkpoint to distill from.
        #[arg(long)]
        teacher: PathBuf,
        /// Resume from an interrupted run directory.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint: per-subset mIoU plus missing and noisy
    /// modality aggregates.
    Evaluate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset split to evaluate ("val" or "train").
        #[arg(long, default_value = "val")]
        split: String,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare saved reports side by side with deltas against the first.
    Report {
        /// Reports as `name=path` pairs (or bare paths, named by file stem).
        #[arg(required = true)]
        reports: Vec<String>,
    },
}

fn run(cli: Cli) -> Result<(), MmkdError> {
    match cli.command {
        Command::GenData(args) => {
            let config = args.build()?;
            pipeline::gen_data(&config)?;
            println!("wrote dataset under {}", config.data_root.display());
        }
        Command::TrainTeacher { config, resume } => {
            let config = config.build()?;
            let run_dir = match &resume {
                Some(dir) => dir.clone(),
                None => pipeline::new_run_dir(&config),
            };
            let resume_ckpt = resume.as_ref().map(|d| d.join("teacher-last.rsck"));
            let outcome = pipeline::train_teacher(&config, &run_dir, resume_ckpt.as_deref(), None)?;
            println!("run dir: {}", outcome.run_dir.display());
            println!(
                "best checkpoint: {} (val {:.2})",
                outcome.best_checkpoint.display(),
                outcome.best_val
            );
            println!("last checkpoint: {}", outcome.last_checkpoint.display());
        }
        Command::TrainStudent {
            config,
            teacher,
            resume,
        } => {
            let config = config.build()?;
            let run_dir = match &resume {
                Some(dir) => dir.clone(),
                None => pipeline::new_run_dir(&config),
            };
            let resume_ckpt = resume.as_ref().map(|d| d.join("student-last.rsck"));
            let outcome =
                pipeline::train_student(&config, &run_dir, &teacher, resume_ckpt.as_deref(), None)?;
            println!("run dir: {}", outcome.run_dir.display());
            println!(
                "best checkpoint: {} (val {:.2})",
                outcome.best_checkpoint.display(),
                outcome.best_val
            );
            println!("last checkpoint: {}", outcome.last_checkpoint.display());
        }
        Command::Evaluate {
            config,
            checkpoint,
            split,
            out,
        } => {
            let config = config.build()?;
            let report = pipeline::evaluate(&config, &checkpoint, &split)?;
            let text = report.to_text();
            match out {
                Some(path) => {
                    std::fs::write(&path, &text).map_err(|e| MmkdError::io(&path, e))?;
                    println!("wrote report to {}", path.display());
                }
                None => print!("{text}"),
            }
        }
        Command::Report { reports } => {
            let mut named = Vec::with_capacity(reports.len());
            for entry in &reports {
                let (name, path) = match entry.split_once('=') {
                    Some((n, p)) => (n.to_string(), PathBuf::from(p)),
                    None => {
                        let path = PathBuf::from(entry);
                        let name = path
                            .file_stem()
                            .map(|s| s.to_string_lossy().into_owned())
                            .unwrap_or_else(|| entry.clone());
                        (name, path)
                    }
                };
                let text = std::fs::read_to_string(&path).map_err(|e| MmkdError::io(&path, e))?;
                named.push((name, EvalReport::from_text(&text)?));
            }
            print!("{}", pipeline::report_compare(&named)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
