//! `bhfa` command-line front end.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime error,
//! 3 checkpoint/architecture mismatch, 4 selftest failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde_json::json;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::episodes::write_bhft_dataset;
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::selftest::{run_all, SelftestOptions};
use crate::trainer::{log_csv, Trainer};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_CHECKPOINT: i32 = 3;
pub const EXIT_SELFTEST: i32 = 4;

pub const CHECKPOINT_FILE: &str = "checkpoint.bhfa";
pub const LOG_FILE: &str = "train_log.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved";
pub const REPORT_FILE: &str = "eval_report.json";
pub const CONFUSION_FILE: &str = "confusion.csv";

#[derive(Debug, Parser)]
#[command(name = "bhfa", version, about = "Distributional few-shot classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train an encoder and write checkpoint, log and run manifest.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides `output.dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replaces `train.seed`.
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Evaluate a checkpoint on the test split.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Run the built-in invariant suites.
    Selftest {
        #[arg(long, hide = true)]
        perturb_bc: bool,
    },
    /// Write a synthetic dataset as `dataset.bhft` + `manifest.json`.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        /// Reads the `dataset.*` keys; defaults otherwise.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Replaces `dataset.seed`.
        #[arg(long)]
        seed_override: Option<u64>,
    },
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } => EXIT_CONFIG,
        Error::CheckpointMismatch(_) => EXIT_CHECKPOINT,
        _ => EXIT_RUNTIME,
    }
}

/// Config problems, including an unreadable config file, map to exit 1.
fn load_config(path: &Path, seed: Option<u64>) -> std::result::Result<RunConfig, i32> {
    RunConfig::load(path).map(|c| c.with_seed_override(seed)).map_err(|e| {
        eprintln!("error: {e}");
        EXIT_CONFIG
    })
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let data = cfg.load_data()?;
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let mut trainer = Trainer::new(cfg.init_model()?, cfg.train.clone())?;
    let log = trainer.run(&data.base, |t| t.save(&ckpt_path))?;
    trainer.save(&ckpt_path)?;
    write(&out.join(LOG_FILE), log_csv(&log))?;
    write(&out.join(RESOLVED_CONFIG_FILE), cfg.to_text())?;
    let manifest = json!({
        "command": "train",
        "config": cfg,
        "config_text": cfg.to_text(),
        "seeds": { "data": cfg.dataset.seed, "train": cfg.train.seed },
        "versions": { "bhfa": env!("CARGO_PKG_VERSION") },
        "episodes": log.len(),
        "parameters": trainer.model().parameter_count(),
        "checkpoint": CHECKPOINT_FILE,
        "log": LOG_FILE,
    });
    write(&out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest).expect("json") + "\n")?;
    let last = log.last().map_or(0.0, |r| r.total);
    println!("trained {} episodes, final total loss {last:.4}", log.len());
    Ok(())
}

pub fn cmd_evaluate(cfg: &RunConfig, ckpt: &Path, out: &Path) -> Result<f64> {
    let expected = cfg.architecture()?;
    let found = checkpoint::read_architecture(ckpt)?;
    if found != expected {
        return Err(Error::CheckpointMismatch(format!(
            "{} holds {found:?}, config describes {expected:?}",
            ckpt.display()
        )));
    }
    let model = checkpoint::load(ckpt)?.model;
    let data = cfg.load_data()?;
    let report = evaluate(&model, &data.test, &cfg.eval.spec, cfg.eval.runs, cfg.eval_seed())?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(&out.join(REPORT_FILE), report.to_json() + "\n")?;
    write(&out.join(CONFUSION_FILE), report.confusion_csv())?;
    println!("mean_aa {:.4} ± {:.4} over {} runs", report.mean_aa, report.std_aa, report.runs);
    Ok(report.mean_aa)
}

/// Runs every suite; returns the first failing suite's name.
pub fn cmd_selftest(opts: &SelftestOptions) -> Option<&'static str> {
    let mut first_failure = None;
    for o in run_all(opts) {
        let status = if o.passed { "PASS" } else { "FAIL" };
        println!("{status} {:<16} {:>7.2}s  {}", o.name, o.seconds, o.detail);
        if !o.passed && first_failure.is_none() {
            first_failure = Some(o.name);
        }
    }
    first_failure
}

pub fn cmd_synth_data(cfg: &RunConfig, out: &Path) -> Result<usize> {
    let params = cfg.synth_params();
    let ds = crate::episodes::synth_blobs(&params)?;
    write_bhft_dataset(out, &ds, Some(&params))?;
    println!("wrote {} images in {} classes to {}", ds.len(), ds.n_classes(), out.display());
    Ok(ds.len())
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Train { config, out, seed_override } => {
            let cfg = match load_config(&config, seed_override) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            cmd_train(&cfg, &out)
        }
        Command::Evaluate { config, checkpoint, out, seed_override } => {
            let cfg = match load_config(&config, seed_override) {
                Ok(c) => c,
                Err(code) => return code,
            };
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            cmd_evaluate(&cfg, &checkpoint, &out).map(|_| ())
        }
        Command::Selftest { perturb_bc } => {
            return match cmd_selftest(&SelftestOptions { perturb_bc }) {
                None => EXIT_OK,
                Some(name) => {
                    eprintln!("selftest failed: {name}");
                    EXIT_SELFTEST
                }
            };
        }
        Command::SynthData { out, config, seed_override } => {
            let mut cfg = match config {
                Some(path) => match load_config(&path, None) {
                    Ok(c) => c,
                    Err(code) => return code,
                },
                None => RunConfig::default(),
            };
            if let Some(s) = seed_override {
                cfg.dataset.seed = s;
            }
            cmd_synth_data(&cfg, &out).map(|_| ())
        }
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
