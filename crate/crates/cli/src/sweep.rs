//! TR-factor sweeps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Child, Command};

use qat_core::harness::RunStatus;

use crate::{exit_code, export, load_config, train_into, EXIT_CONFIG, EXIT_DIVERGED, EXIT_FAILURE};

pub struct SweepArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub lambdas: Vec<f64>,
    pub parallel: usize,
    pub force: bool,
    pub overrides: Vec<String>,
}

pub fn default_grid() -> Vec<f64> {
    (1..=10).map(|i| f64::from(i) * 1e-3).collect()
}

fn run_dir(out: &Path, lambda: f64) -> PathBuf {
    out.join(format!("lambda_{lambda}"))
}

fn status_name(code: Option<i32>) -> &'static str {
    match code {
        Some(0) => "completed",
        Some(c) if c == i32::from(EXIT_DIVERGED) => "diverged",
        _ => "failed",
    }
}

pub fn cmd_sweep(args: &SweepArgs) -> Result<(), (u8, String)> {
    let fail = |e: qat_core::Error| (exit_code(&e), e.to_string());
    let mut overrides = args.overrides.clone();
    overrides.push("tr.enabled=true".into());
    let base = load_config(&args.config, args.seed, &overrides).map_err(fail)?;
    let grid = if args.lambdas.is_empty() { default_grid() } else { args.lambdas.clone() };
    if let Some(bad) = grid.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
        return Err((EXIT_CONFIG, format!("invalid TR factor {bad}")));
    }
    let occupied = args.out.read_dir().is_ok_and(|mut d| d.next().is_some());
    if occupied && !args.force {
        return Err((
            EXIT_CONFIG,
            format!("{} is not empty; pass --force to reuse it", args.out.display()),
        ));
    }
    std::fs::create_dir_all(&args.out).map_err(|e| (EXIT_CONFIG, e.to_string()))?;

    let mut statuses: Vec<&'static str> = vec!["failed"; grid.len()];
    if args.parallel <= 1 {
        for (i, &lambda) in grid.iter().enumerate() {
            let mut cfg = base.clone();
            cfg.tr_lambda = lambda;
            eprintln!("sweep: lambda={lambda}");
            statuses[i] = match train_into(&cfg, &run_dir(&args.out, lambda)) {
                Ok(RunStatus::Completed) => "completed",
                Ok(RunStatus::Diverged { .. }) => "diverged",
                Err(e) => {
                    eprintln!("sweep: lambda={lambda}: {e}");
                    "failed"
                }
            };
        }
    } else {
        let base_path = args.out.join("base_config.txt");
        std::fs::write(&base_path, base.to_text()).map_err(|e| (EXIT_FAILURE, e.to_string()))?;
        let exe = std::env::current_exe().map_err(|e| (EXIT_FAILURE, e.to_string()))?;
        let mut running: Vec<(usize, Child)> = Vec::new();
        let mut next = 0;
        while next < grid.len() || !running.is_empty() {
            while next < grid.len() && running.len() < args.parallel {
                let lambda = grid[next];
                let child = Command::new(&exe)
                    .arg("train")
                    .arg("--config")
                    .arg(&base_path)
                    .arg("--out")
                    .arg(run_dir(&args.out, lambda))
                    .arg("--set")
                    .arg(format!("tr.lambda={lambda}"))
                    .spawn()
                    .map_err(|e| (EXIT_FAILURE, e.to_string()))?;
                running.push((next, child));
                next += 1;
            }
            // wait on the oldest child; runs are similar in length
            let (i, mut child) = running.remove(0);
            let code = child.wait().map_err(|e| (EXIT_FAILURE, e.to_string()))?.code();
            statuses[i] = status_name(code);
        }
    }

    let mut summary = String::from("lambda,final_test_acc,status\n");
    for (&lambda, status) in grid.iter().zip(&statuses) {
        let acc = std::fs::read_to_string(run_dir(&args.out, lambda).join("epochs.csv"))
            .ok()
            .filter(|_| *status == "completed")
            .and_then(|s| export::last_test_acc(&s))
            .map_or_else(String::new, |a| a.to_string());
        writeln!(summary, "{lambda},{acc},{status}").expect("string write");
    }
    std::fs::write(args.out.join("summary.csv"), &summary).map_err(|e| (EXIT_FAILURE, e.to_string()))?;
    print!("{summary}");
    if statuses.iter().all(|s| *s == "completed") {
        Ok(())
    } else {
        Err((EXIT_FAILURE, "some sweep runs did not complete".into()))
    }
}
