//! Run metrics and their CSV form.

use std::path::Path;

use crate::error::{Error, Result};

/// Header of the per-step metrics CSV.
pub const STEP_HEADER: [&str; 10] = [
    "step", "layer", "k", "K", "R", "U", "ess_latent", "ess_quant", "dist_tp", "loss",
];

pub const EPOCH_HEADER: [&str; 5] = ["epoch", "step", "train_loss", "test_acc", "seconds"];

/// One quantized layer after one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRow {
    /// 1-based optimizer step.
    pub step: usize,
    pub layer: String,
    /// Transition rate of this step.
    pub k: f64,
    /// Running transition rate.
    pub running: f64,
    /// Target transition rate.
    pub target: f64,
    /// TALR for the next update under TR scheduling, otherwise the learning
    /// rate applied in this step.
    pub lr: f64,
    pub ess_latent: f64,
    pub ess_quant: f64,
    pub dist_tp: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    pub test_acc: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum RunStatus {
    Completed,
    Diverged { step: usize, loss: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub rows: Vec<StepRow>,
    pub epochs: Vec<EpochRow>,
    pub status: RunStatus,
    /// Steps at which transitions were recounted independently.
    pub oracle_checks: usize,
    /// Wall-clock seconds of the training loop (evaluation excluded).
    pub train_seconds: f64,
    /// Per-channel input standardization constants.
    pub input_mean: Vec<f32>,
    pub input_std: Vec<f32>,
}

impl RunMetrics {
    pub fn final_test_acc(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.test_acc)
    }

    pub fn layers(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.layer) {
                out.push(r.layer.clone());
            }
        }
        out
    }

    pub fn layer_rows<'a>(&'a self, layer: &'a str) -> impl Iterator<Item = &'a StepRow> + 'a {
        self.rows.iter().filter(move |r| r.layer == layer)
    }

    pub fn write_steps_csv(&self, path: &Path) -> Result<()> {
        write_steps_csv(&self.rows, path)
    }

    pub fn write_epochs_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(EPOCH_HEADER)?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.step.to_string(),
                e.train_loss.to_string(),
                e.test_acc.to_string(),
                format!("{:.3}", e.seconds),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn write_steps_csv(rows: &[StepRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(STEP_HEADER)?;
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.layer.clone(),
            r.k.to_string(),
            r.running.to_string(),
            r.target.to_string(),
            r.lr.to_string(),
            r.ess_latent.to_string(),
            r.ess_quant.to_string(),
            r.dist_tp.to_string(),
            r.loss.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a per-step metrics CSV written by [`write_steps_csv`].
pub fn read_steps_csv(path: &Path) -> Result<Vec<StepRow>> {
    let mut rd = csv::Reader::from_path(path)?;
    let header: Vec<String> = rd.headers()?.iter().map(str::to_string).collect();
    if header != STEP_HEADER {
        return Err(Error::Format {
            path: path.to_path_buf(),
            offset: 0,
            reason: format!("unexpected header {header:?}"),
        });
    }
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec?;
        let offset = rec.position().map_or(0, |p| p.byte());
        let num = |i: usize| -> Result<f64> {
            rec[i].parse().map_err(|_| Error::Format {
                path: path.to_path_buf(),
                offset,
                reason: format!("column {} is not a number: `{}`", STEP_HEADER[i], &rec[i]),
            })
        };
        rows.push(StepRow {
            step: num(0)? as usize,
            layer: rec[1].to_string(),
            k: num(2)?,
            running: num(3)?,
            target: num(4)?,
            lr: num(5)?,
            ess_latent: num(6)?,
            ess_quant: num(7)?,
            dist_tp: num(8)?,
            loss: num(9)?,
        });
    }
    Ok(rows)
}
