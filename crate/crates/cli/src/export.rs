//! Smoothed, downsampled series and SVG charts from a metrics CSV.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use qat_core::harness::{read_steps_csv, StepRow};
use qat_core::metrics::update_running_tr;

use crate::svg::{line_chart, Series};
use crate::{exit_code, EXIT_CONFIG, EXIT_FAILURE};

/// Test accuracy in the last row of an epochs CSV.
pub fn last_test_acc(epochs_csv: &str) -> Option<f64> {
    epochs_csv.lines().skip(1).filter(|l| !l.trim().is_empty()).last()?.split(',').nth(3)?.parse().ok()
}

/// EMA with the running-TR update rule, seeded from zero like the trainer.
pub fn smooth(values: &[f64], m: f64) -> qat_core::Result<Vec<f64>> {
    let mut acc = 0.0;
    values
        .iter()
        .map(|&v| {
            acc = update_running_tr(acc, v, m)?;
            Ok(acc)
        })
        .collect()
}

/// Every `ceil(n / max)`-th index plus the last one.
pub fn downsample_indices(n: usize, max: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let stride = n.div_ceil(max.max(1));
    let mut idx: Vec<usize> = (0..n).step_by(stride).collect();
    if idx.last() != Some(&(n - 1)) {
        idx.push(n - 1);
    }
    idx
}

struct LayerSeries {
    layer: String,
    step: Vec<f64>,
    k: Vec<f64>,
    running: Vec<f64>,
    target: Vec<f64>,
    lr: Vec<f64>,
    ess_latent: Vec<f64>,
    ess_quant: Vec<f64>,
    dist_tp: Vec<f64>,
    loss: Vec<f64>,
}

fn split_layers(rows: &[StepRow]) -> Vec<LayerSeries> {
    let mut out: Vec<LayerSeries> = Vec::new();
    for r in rows {
        let pos = match out.iter().position(|l| l.layer == r.layer) {
            Some(p) => p,
            None => {
                out.push(LayerSeries {
                    layer: r.layer.clone(),
                    step: vec![],
                    k: vec![],
                    running: vec![],
                    target: vec![],
                    lr: vec![],
                    ess_latent: vec![],
                    ess_quant: vec![],
                    dist_tp: vec![],
                    loss: vec![],
                });
                out.len() - 1
            }
        };
        let l = &mut out[pos];
        l.step.push(r.step as f64);
        l.k.push(r.k);
        l.running.push(r.running);
        l.target.push(r.target);
        l.lr.push(r.lr);
        l.ess_latent.push(r.ess_latent);
        l.ess_quant.push(r.ess_quant);
        l.dist_tp.push(r.dist_tp);
        l.loss.push(r.loss);
    }
    out
}

fn resolve_input(input: &Path) -> PathBuf {
    if input.is_dir() {
        input.join("metrics.csv")
    } else {
        input.to_path_buf()
    }
}

pub fn cmd_export(input: &Path, out: Option<&Path>, m: Option<f64>, points: usize) -> Result<(), (u8, String)> {
    let csv_path = resolve_input(input);
    let rows = read_steps_csv(&csv_path).map_err(|e| (exit_code(&e), e.to_string()))?;
    if rows.is_empty() {
        return Err((EXIT_CONFIG, format!("{} has no rows", csv_path.display())));
    }
    if let Some(m) = m {
        if !(0.0..1.0).contains(&m) {
            return Err((EXIT_CONFIG, format!("--smooth must be in [0, 1), got {m}")));
        }
    }
    let out_dir = out.map_or_else(
        || csv_path.parent().unwrap_or(Path::new(".")).join("plots"),
        Path::to_path_buf,
    );
    std::fs::create_dir_all(&out_dir).map_err(|e| (EXIT_FAILURE, e.to_string()))?;

    let mut layers = split_layers(&rows);
    if let Some(m) = m {
        for l in &mut layers {
            for v in [&mut l.k, &mut l.ess_latent, &mut l.ess_quant, &mut l.dist_tp, &mut l.loss] {
                *v = smooth(v, m).map_err(|e| (EXIT_CONFIG, e.to_string()))?;
            }
        }
    }

    let mut csv = String::from("step,layer,k,K,R,U,ess_latent,ess_quant,dist_tp,loss\n");
    let mut tr = Vec::new();
    let mut talr = Vec::new();
    let mut ess = Vec::new();
    let mut dist = Vec::new();
    for l in &layers {
        let idx = downsample_indices(l.step.len(), points);
        let pick = |v: &[f64]| -> Vec<(f64, f64)> { idx.iter().map(|&i| (l.step[i], v[i])).collect() };
        for &i in &idx {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{},{},{},{},{}",
                l.step[i], l.layer, l.k[i], l.running[i], l.target[i], l.lr[i], l.ess_latent[i], l.ess_quant[i], l.dist_tp[i], l.loss[i]
            );
        }
        let series = |label: &str, v: &[f64], dashed: bool| Series {
            label: format!("{} {label}", l.layer),
            points: pick(v),
            dashed,
        };
        tr.push(series("R", &l.target, true));
        tr.push(series("K", &l.running, false));
        talr.push(series("U", &l.lr, false));
        ess.push(series("latent", &l.ess_latent, false));
        ess.push(series("quantized", &l.ess_quant, true));
        dist.push(series("dist", &l.dist_tp, false));
    }
    let files = [
        ("tr.svg", line_chart("Target and running transition rate", "step", &tr)),
        ("talr.svg", line_chart("Learning rate applied to latent weights", "step", &talr)),
        ("ess.svg", line_chart("Average effective step size", "step", &ess)),
        ("dist_tp.svg", line_chart("Mean distance to transition points", "step", &dist)),
        ("series.csv", csv),
    ];
    for (name, body) in files {
        std::fs::write(out_dir.join(name), body).map_err(|e| (EXIT_FAILURE, e.to_string()))?;
    }
    println!("wrote {}", out_dir.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothing_matches_running_update() {
        let s = smooth(&[1.0, 1.0], 0.99).unwrap();
        assert!((s[0] - 0.01).abs() < 1e-15);
        assert!((s[1] - (0.99 * 0.01 + 0.01)).abs() < 1e-15);
    }

    #[test]
    fn downsampling_keeps_ends() {
        assert_eq!(downsample_indices(10, 3), vec![0, 4, 8, 9]);
        assert_eq!(downsample_indices(3, 10), vec![0, 1, 2]);
        assert!(downsample_indices(0, 5).is_empty());
    }

    #[test]
    fn last_accuracy_is_parsed() {
        let csv = "epoch,step,train_loss,test_acc,seconds\n1,10,0.5,81.5,1.2\n2,20,0.4,90.25,2.3\n";
        assert_eq!(last_test_acc(csv), Some(90.25));
    }
}
