//! Brute-force verifiers that re-derive quantities without going through
//! the code paths they check.
//!
//! Transition recounts re-quantize raw latent snapshots with their own
//! arithmetic instead of the `quant` module, finite differences only use
//! forward evaluations, and the ESS check works from raw values and codes.

pub mod suite;

use crate::error::{Error, Result};
use crate::quant::{Discretization, QuantRole, QuantizerSpec};
use crate::schedule::TrController;
use crate::tensor::{Scalar, Tensor};

/// Central finite-difference gradient of a scalar function.
pub fn fd_gradient<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>>
where
    F: Fn(&Tensor<f64>) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::invalid(format!("finite-difference step {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite("finite-difference evaluation"));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// `||a - b|| / max(||b||, floor)` in the Euclidean norm.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm.max(floor)
}

/// Clip-only surrogate of a quantizer: `clip(gamma * x / s, alpha, beta) / gamma`.
/// Its derivative is what the straight-through estimator reports.
pub fn clip_surrogate(x: f64, spec: &QuantizerSpec) -> f64 {
    (spec.gamma * x / spec.scale()).clamp(spec.alpha, spec.beta) / spec.gamma
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum OracleRounding {
    /// Matches the production quantizer.
    #[default]
    HalfAwayFromZero,
    /// Deliberately different tie rule, used for fault injection.
    HalfEven,
}

fn oracle_code<T: Scalar>(x: T, spec: &QuantizerSpec, rounding: OracleRounding) -> i32 {
    let v = T::from_f64_lossy(spec.gamma) * x / T::from_f64_lossy(spec.scale());
    let lo = T::from_f64_lossy(spec.alpha);
    let hi = T::from_f64_lossy(spec.beta);
    let v = if v < lo {
        lo
    } else if v > hi {
        hi
    } else {
        v
    };
    let v = v.as_f64();
    match (spec.discretization, spec.role) {
        (Discretization::Signum, QuantRole::Weight) => {
            if v < 0.0 {
                -1
            } else {
                1
            }
        }
        (Discretization::Signum, QuantRole::Activation) => {
            if v < 0.5 {
                0
            } else {
                1
            }
        }
        (Discretization::Round, _) => {
            let fl = v.floor();
            let frac = v - fl;
            let up = if frac > 0.5 {
                true
            } else if frac < 0.5 {
                false
            } else {
                match rounding {
                    OracleRounding::HalfAwayFromZero => v > 0.0,
                    OracleRounding::HalfEven => (fl as i64) % 2 != 0,
                }
            };
            (if up { fl + 1.0 } else { fl }) as i32
        }
    }
}

/// Re-quantizes both snapshots with one spec and counts level changes.
pub fn recount_transitions<T: Scalar>(
    w_before: &Tensor<T>,
    w_after: &Tensor<T>,
    spec: &QuantizerSpec,
) -> Result<usize> {
    recount_transitions_with(w_before, spec, w_after, spec, OracleRounding::default())
}

/// Like [`recount_transitions`] but with separate specs for the two
/// snapshots (a trainable scale may have moved) and a selectable tie rule.
pub fn recount_transitions_with<T: Scalar>(
    w_before: &Tensor<T>,
    spec_before: &QuantizerSpec,
    w_after: &Tensor<T>,
    spec_after: &QuantizerSpec,
    rounding: OracleRounding,
) -> Result<usize> {
    if w_before.shape() != w_after.shape() {
        return Err(Error::shape(
            "recount_transitions",
            format!("{:?} vs {:?}", w_before.shape(), w_after.shape()),
        ));
    }
    Ok(w_before
        .data()
        .iter()
        .zip(w_after.data())
        .filter(|(&a, &b)| oracle_code(a, spec_before, rounding) != oracle_code(b, spec_after, rounding))
        .count())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EssReport {
    /// Mean `|Δw_q|`.
    pub avg_ess: f64,
    /// Fraction of changed codes.
    pub tr: f64,
    /// Indices whose codes moved by more than one level.
    pub multi_level: Vec<usize>,
    /// Single-level (or unchanged) indices where `|Δw_q| != delta * 1[changed]`.
    pub violations: Vec<usize>,
}

impl EssReport {
    pub fn identity_holds(&self) -> bool {
        self.multi_level.is_empty() && self.violations.is_empty()
    }
}

/// Checks `|Δw_q| = delta * 1[code changed]` elementwise.
pub fn verify_ess_identity(
    wq_before: &[f64],
    wq_after: &[f64],
    codes_before: &[i32],
    codes_after: &[i32],
    delta: f64,
) -> Result<EssReport> {
    let n = wq_before.len();
    if wq_after.len() != n || codes_before.len() != n || codes_after.len() != n || n == 0 {
        return Err(Error::shape(
            "verify_ess_identity",
            format!(
                "lengths {}, {}, {}, {}",
                n,
                wq_after.len(),
                codes_before.len(),
                codes_after.len()
            ),
        ));
    }
    let mut report = EssReport {
        avg_ess: 0.0,
        tr: 0.0,
        multi_level: vec![],
        violations: vec![],
    };
    let mut total = 0.0;
    let mut changed = 0usize;
    for i in 0..n {
        let step = (wq_after[i] - wq_before[i]).abs();
        total += step;
        let jump = (codes_after[i] - codes_before[i]).abs();
        if jump > 0 {
            changed += 1;
        }
        if jump > 1 {
            report.multi_level.push(i);
            continue;
        }
        let expected = if jump == 1 { delta } else { 0.0 };
        if (step - expected).abs() > 1e-12 {
            report.violations.push(i);
        }
    }
    report.avg_ess = total / n as f64;
    report.tr = changed as f64 / n as f64;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ControlSample {
    pub step: usize,
    pub target: f64,
    pub measured: f64,
    pub running: f64,
    pub talr: f64,
}

/// Closed-loop run of `controller` against a synthetic plant mapping the
/// current TALR to a measured transition rate.
pub fn simulate_controller<P, R>(
    plant: P,
    mut controller: TrController,
    target: R,
    steps: usize,
) -> Result<Vec<ControlSample>>
where
    P: Fn(f64) -> f64,
    R: Fn(usize) -> f64,
{
    let mut out = Vec::with_capacity(steps);
    for step in 0..steps {
        let measured = plant(controller.talr);
        let r = target(step);
        let talr = controller.observe(measured, r)?;
        out.push(ControlSample {
            step,
            target: r,
            measured,
            running: controller.running_tr,
            talr,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::UpdateRule;

    #[test]
    fn fd_of_half_squared_norm() {
        let x = Tensor::from_vec(vec![0.3, -1.2, 2.0]);
        let g = fd_gradient(|t| Ok(0.5 * t.data().iter().map(|v| v * v).sum::<f64>()), &x, 1e-5).unwrap();
        for (a, b) in g.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn fd_rejects_non_finite() {
        let x = Tensor::from_vec(vec![0.0]);
        assert!(fd_gradient(|t| Ok(t.data()[0].ln()), &x, 1e-5).is_err());
    }

    #[test]
    fn fd_through_clip_matches_mask() {
        let spec = QuantizerSpec::weight(2, 0.5).unwrap();
        for (x, expect) in [(0.1, 2.0), (0.4, 0.0), (-0.7, 0.0), (-0.3, 2.0)] {
            let g = fd_gradient(|t| Ok(clip_surrogate(t.data()[0], &spec)), &Tensor::from_vec(vec![x]), 1e-6).unwrap();
            assert!((g.data()[0] - expect).abs() < 1e-6, "x={x}");
        }
    }

    #[test]
    fn fd_through_full_quantizer_is_flat() {
        let spec = QuantizerSpec::weight(2, 0.5).unwrap();
        let f = |t: &Tensor<f64>| {
            let (q, _) = crate::quant::quantize_forward(t, &spec)?;
            Ok(q.data()[0])
        };
        let g = fd_gradient(f, &Tensor::from_vec(vec![0.1]), 1e-6).unwrap();
        assert_eq!(g.data()[0], 0.0);
    }

    #[test]
    fn recount_examples() {
        let spec = QuantizerSpec::weight(2, 1.0).unwrap();
        let w = Tensor::from_vec(vec![0.1f32, -0.3, 0.45]);
        assert_eq!(recount_transitions(&w, &w, &spec).unwrap(), 0);
        // w_n = 2w: 0.2 -> 0.6 crosses the 0.5 boundary
        let after = Tensor::from_vec(vec![0.3f32, -0.3, 0.45]);
        assert_eq!(recount_transitions(&w, &after, &spec).unwrap(), 1);
    }

    #[test]
    fn recount_sees_scale_only_changes() {
        let w = Tensor::from_vec(vec![-0.2f64, 0.05, 0.3]);
        let before = QuantizerSpec::weight(2, 0.3).unwrap();
        let after = QuantizerSpec::weight(2, 0.2).unwrap();
        let n = recount_transitions_with(&w, &before, &w, &after, OracleRounding::default()).unwrap();
        assert!(n > 0);
    }

    #[test]
    fn half_even_differs_only_on_ties() {
        let spec = QuantizerSpec::weight(2, 1.0).unwrap();
        assert_eq!(oracle_code(0.25f64, &spec, OracleRounding::HalfAwayFromZero), 1);
        assert_eq!(oracle_code(0.25f64, &spec, OracleRounding::HalfEven), 0);
        assert_eq!(oracle_code(0.3f64, &spec, OracleRounding::HalfEven), 1);
    }

    #[test]
    fn ess_identity_cases() {
        let r = verify_ess_identity(&[-0.5, 0.0], &[0.0, 0.0], &[-1, 0], &[0, 0], 0.5).unwrap();
        assert!(r.identity_holds());
        assert!((r.avg_ess - 0.5 * r.tr).abs() < 1e-12);

        let r = verify_ess_identity(&[-1.0, 0.0], &[0.0, 0.0], &[-2, 0], &[0, 0], 0.5).unwrap();
        assert_eq!(r.multi_level, vec![0]);
        assert_eq!(r.avg_ess, 0.5);

        let r = verify_ess_identity(&[0.5, 0.0], &[0.5, 0.0], &[1, 0], &[1, 0], 0.5).unwrap();
        assert!(r.identity_holds());
        assert_eq!(r.avg_ess, 0.0);
    }

    #[test]
    fn simulated_additive_tracks_linear_plant() {
        let c = TrController::new("sim", 0.1, 0.1, UpdateRule::Additive, 0.0).unwrap();
        let traj = simulate_controller(|u| (10.0 * u).min(1.0), c, |_| 0.01, 300).unwrap();
        let settle = traj.iter().position(|s| (s.running - 0.01).abs() < 1e-3).unwrap();
        assert!(traj[settle..].iter().all(|s| (s.running - 0.01).abs() < 1e-3));
    }

    #[test]
    fn simulated_flat_when_on_target() {
        let c = TrController::new("sim", 0.001, 0.1, UpdateRule::Additive, 0.0).unwrap();
        let traj = simulate_controller(|u| (10.0 * u).min(1.0), c, |_| 0.01, 50).unwrap();
        assert!(traj.iter().all(|s| s.talr == 0.001 && s.running == 0.01));
    }
}
