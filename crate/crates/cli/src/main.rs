//! `qat`: train, sweep, export and oracle commands.

mod export;
mod svg;
mod sweep;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use qat_core::harness::{run_training, RunStatus, TrainConfig};
use qat_core::oracle::suite::{run_suite, Fault, SuiteOptions};
use qat_core::Error;

pub const EXIT_FAILURE: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "qat", version, about = "Quantization-aware training with transition-rate scheduling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write metrics and a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Override a config key, e.g. `--set tr.lambda=0.002`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train the same config across a grid of TR factors.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Comma-separated TR factors; defaults to 0.001, 0.002, ..., 0.01.
        #[arg(long, value_delimiter = ',')]
        lambdas: Vec<f64>,
        /// Number of concurrent training processes.
        #[arg(long, default_value_t = 1)]
        parallel: usize,
        /// Reuse a non-empty output directory.
        #[arg(long)]
        force: bool,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Turn a metrics CSV into smoothed series and SVG charts.
    Export {
        /// Run directory or metrics CSV file.
        input: PathBuf,
        /// Output directory; defaults to `<run>/plots`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// EMA momentum applied to per-step series.
        #[arg(long)]
        smooth: Option<f64>,
        /// Maximum points per series.
        #[arg(long, default_value_t = 500)]
        points: usize,
    },
    /// Run the independent verification suite.
    Oracle {
        /// Only run checks whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
        /// Test hook: deliberately break one oracle.
        #[arg(long, value_parser = ["rounding"])]
        inject_fault: Option<String>,
        /// Also write the JSON report to this file.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, default_value_t = 20)]
        points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Maps a library error onto the exit-code contract.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Diverged { .. } => EXIT_DIVERGED,
        Error::Config { .. }
        | Error::Format { .. }
        | Error::InvalidArgument(_)
        | Error::Io(_)
        | Error::Csv(_)
        | Error::Checkpoint(_) => EXIT_CONFIG,
        _ => EXIT_FAILURE,
    }
}

pub fn load_config(path: &Path, seed: Option<u64>, overrides: &[String]) -> qat_core::Result<TrainConfig> {
    let mut cfg = TrainConfig::from_file(path)?;
    for kv in overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config {
            key: kv.clone(),
            reason: "expected KEY=VALUE".into(),
        })?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Trains `cfg` into `out`. Partial metrics are written on divergence.
pub fn train_into(cfg: &TrainConfig, out: &Path) -> qat_core::Result<RunStatus> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.txt"), cfg.to_text())?;
    let run = run_training(cfg)?;
    run.metrics.write_steps_csv(&out.join("metrics.csv"))?;
    run.metrics.write_epochs_csv(&out.join("epochs.csv"))?;
    run.checkpoint.save(&out.join("checkpoint.bin"))?;
    Ok(run.metrics.status)
}

fn cmd_train(config: &Path, out: &Path, seed: Option<u64>, overrides: &[String]) -> Result<(), (u8, String)> {
    let fail = |e: Error| (exit_code(&e), e.to_string());
    let cfg = load_config(config, seed, overrides).map_err(fail)?;
    match train_into(&cfg, out).map_err(fail)? {
        RunStatus::Completed => {
            let acc = std::fs::read_to_string(out.join("epochs.csv"))
                .ok()
                .and_then(|s| export::last_test_acc(&s));
            match acc {
                Some(a) => println!("final test accuracy: {a:.2}%"),
                None => println!("final test accuracy: n/a"),
            }
            Ok(())
        }
        RunStatus::Diverged { step, loss } => {
            Err((EXIT_DIVERGED, format!("diverged at step {step} (loss {loss}); partial metrics in {}", out.display())))
        }
    }
}

fn cmd_oracle(
    filter: Option<String>,
    fault: Option<String>,
    report: Option<&Path>,
    points: usize,
    seed: u64,
) -> Result<(), (u8, String)> {
    let opts = SuiteOptions {
        filter,
        fault: fault.map(|_| Fault::Rounding),
        gradient_points: points,
        seed,
        ..SuiteOptions::default()
    };
    let results = run_suite(&opts).map_err(|e| (EXIT_FAILURE, e.to_string()))?;
    let passed = results.iter().all(|r| r.passed);
    let checks: Vec<serde_json::Value> = results
        .iter()
        .map(|r| {
            serde_json::json!({
                "name": r.name,
                "passed": r.passed,
                "max_error": r.max_error,
                "detail": r.detail,
            })
        })
        .collect();
    let doc = serde_json::json!({
        "passed": passed,
        "filter": opts.filter,
        "fault": opts.fault.map(|_| "rounding"),
        "checks": checks,
    });
    let text = serde_json::to_string_pretty(&doc).expect("json");
    println!("{text}");
    if let Some(p) = report {
        std::fs::write(p, &text).map_err(|e| (EXIT_CONFIG, format!("{}: {e}", p.display())))?;
    }
    if passed {
        Ok(())
    } else {
        let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
        Err((EXIT_FAILURE, format!("oracle violations: {}", failed.join(", "))))
    }
}

fn main() -> ExitCode {
    // kernels are single-threaded, so deterministic mode needs no switch
    let _deterministic = std::env::var("QAT_DETERMINISTIC").is_ok_and(|v| v == "1");
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train {
            config,
            out,
            seed,
            overrides,
        } => cmd_train(&config, &out, seed, &overrides),
        Command::Sweep {
            config,
            out,
            seed,
            lambdas,
            parallel,
            force,
            overrides,
        } => sweep::cmd_sweep(&sweep::SweepArgs {
            config,
            out,
            seed,
            lambdas,
            parallel,
            force,
            overrides,
        }),
        Command::Export {
            input,
            out,
            smooth,
            points,
        } => export::cmd_export(&input, out.as_deref(), smooth, points),
        Command::Oracle {
            filter,
            inject_fault,
            report,
            points,
            seed,
        } => cmd_oracle(filter, inject_fault, report.as_deref(), points, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
