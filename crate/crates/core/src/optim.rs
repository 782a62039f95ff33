//! Gradient terms (SGD with momentum, Adam, AdamW) and the two ways of
//! applying them: a scheduled learning rate, or a per-layer TALR.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Scalar;

pub const SGD_MOMENTUM: f64 = 0.9;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
    AdamW,
}

impl OptimizerKind {
    pub fn decay_mode(self) -> DecayMode {
        match self {
            Self::AdamW => DecayMode::Decoupled,
            Self::Sgd | Self::Adam => DecayMode::Coupled,
        }
    }

    pub fn gradient_rule(self) -> GradientRule {
        match self {
            Self::Sgd => GradientRule::Sgd {
                momentum: SGD_MOMENTUM,
            },
            Self::Adam | Self::AdamW => GradientRule::Adam {
                beta1: ADAM_BETA1,
                beta2: ADAM_BETA2,
                eps: ADAM_EPS,
            },
        }
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "adam" => Ok(Self::Adam),
            "adamw" => Ok(Self::AdamW),
            other => Err(Error::invalid(format!("unknown optimizer `{other}`"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Adam => "adam",
            Self::AdamW => "adamw",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GradientRule {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

/// How weight decay enters the update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecayMode {
    /// `w -= step * (g + wd * w)`
    Coupled,
    /// `w -= step * g; w -= step * wd * w` (both from the pre-update `w`)
    Decoupled,
}

/// Moment buffers for one parameter tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState<T> {
    pub first: Vec<T>,
    pub second: Vec<T>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            first: vec![T::zero(); len],
            second: vec![T::zero(); len],
            step: 0,
        }
    }
}

fn check_len<T>(grad: &[T], state: &OptimizerState<T>) -> Result<()> {
    if grad.len() != state.first.len() {
        return Err(Error::shape(
            "optimizer",
            format!("gradient of length {} for state of length {}", grad.len(), state.first.len()),
        ));
    }
    Ok(())
}

/// Momentum buffer update `b = momentum * b + grad`; returns `b`.
pub fn gradient_term_sgd<T: Scalar>(grad: &[T], state: &mut OptimizerState<T>, momentum: f64) -> Result<Vec<T>> {
    check_len(grad, state)?;
    let m = T::from_f64_lossy(momentum);
    state.step += 1;
    for (b, &g) in state.first.iter_mut().zip(grad) {
        *b = m * *b + g;
    }
    Ok(state.first.clone())
}

/// Bias-corrected `m_hat / (sqrt(v_hat) + eps)`.
pub fn gradient_term_adam<T: Scalar>(
    grad: &[T],
    state: &mut OptimizerState<T>,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<Vec<T>> {
    check_len(grad, state)?;
    state.step += 1;
    let (b1, b2) = (T::from_f64_lossy(beta1), T::from_f64_lossy(beta2));
    let t = state.step as i32;
    let c1 = T::from_f64_lossy(1.0 - beta1.powi(t));
    let c2 = T::from_f64_lossy(1.0 - beta2.powi(t));
    let eps = T::from_f64_lossy(eps);
    let one = T::one();
    let out = state
        .first
        .iter_mut()
        .zip(state.second.iter_mut())
        .zip(grad)
        .map(|((m, v), &g)| {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            (*m / c1) / ((*v / c2).sqrt() + eps)
        })
        .collect();
    Ok(out)
}

pub fn gradient_term<T: Scalar>(rule: GradientRule, grad: &[T], state: &mut OptimizerState<T>) -> Result<Vec<T>> {
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    match rule {
        GradientRule::Sgd { momentum } => gradient_term_sgd(grad, state, momentum),
        GradientRule::Adam { beta1, beta2, eps } => gradient_term_adam(grad, state, beta1, beta2, eps),
    }
}

fn descend<T: Scalar>(w: &mut [T], g: &[T], step: f64, weight_decay: f64, decay: DecayMode) -> Result<()> {
    if w.len() != g.len() {
        return Err(Error::shape(
            "update",
            format!("{} weights, {} gradient terms", w.len(), g.len()),
        ));
    }
    let step = T::from_f64_lossy(step);
    let wd = T::from_f64_lossy(weight_decay);
    match decay {
        DecayMode::Coupled => {
            for (x, &gi) in w.iter_mut().zip(g) {
                *x = *x - step * (gi + wd * *x);
            }
        }
        DecayMode::Decoupled => {
            for (x, &gi) in w.iter_mut().zip(g) {
                *x = *x - step * gi - step * wd * *x;
            }
        }
    }
    Ok(())
}

/// `w <- w - mu * g` with weight decay per `decay`.
pub fn apply_plain<T: Scalar>(w: &mut [T], g: &[T], lr: f64, weight_decay: f64, decay: DecayMode) -> Result<()> {
    descend(w, g, lr, weight_decay, decay)
}

/// `w <- w - U * g`. Weight decay is scaled by the TALR as well.
pub fn apply_talr<T: Scalar>(w: &mut [T], g: &[T], talr: f64, weight_decay: f64, decay: DecayMode) -> Result<()> {
    if !(talr >= 0.0) {
        return Err(Error::invalid(format!("TALR must be nonnegative, got {talr}")));
    }
    descend(w, g, talr, weight_decay, decay)
}

/// Identifies a trainable tensor: a quantized layer's latent weights or any
/// other parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKey {
    Latent(usize),
    Plain(usize),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UpdateMode {
    /// Scheduled learning rate times `lr_scale`.
    PlainLr { lr_scale: f64 },
    /// Learning rate supplied by the given controller.
    Talr { controller: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub name: String,
    pub mode: UpdateMode,
    pub params: Vec<ParamKey>,
    pub weight_decay: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sgd_without_momentum_passes_gradient() {
        let mut st = OptimizerState::<f64>::new(2);
        let g = gradient_term_sgd(&[0.3, -1.0], &mut st, 0.0).unwrap();
        assert_eq!(g, vec![0.3, -1.0]);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut st = OptimizerState::<f64>::new(1);
        gradient_term_sgd(&[1.0], &mut st, 0.9).unwrap();
        let g = gradient_term_sgd(&[1.0], &mut st, 0.9).unwrap();
        assert_relative_eq!(g[0], 1.9, epsilon = 1e-15);
    }

    #[test]
    fn sgd_momentum_decays_geometrically() {
        let mut st = OptimizerState::<f64>::new(1);
        gradient_term_sgd(&[1.0], &mut st, 0.9).unwrap();
        let mut prev = 1.0;
        for _ in 0..10 {
            let g = gradient_term_sgd(&[0.0], &mut st, 0.9).unwrap()[0];
            assert_relative_eq!(g, 0.9 * prev, epsilon = 1e-15);
            prev = g;
        }
    }

    #[test]
    fn adam_first_step_is_sign_like() {
        let mut st = OptimizerState::<f64>::new(3);
        let g = gradient_term_adam(&[0.5, -2.0, 1e-3], &mut st, 0.9, 0.999, 1e-8).unwrap();
        for (gi, v) in g.iter().zip([0.5f64, -2.0, 1e-3]) {
            assert_relative_eq!(*gi, v / (v.abs() + 1e-8), epsilon = 1e-12);
        }
    }

    #[test]
    fn adam_zero_gradient_gives_zero() {
        let mut st = OptimizerState::<f32>::new(2);
        for _ in 0..5 {
            let g = gradient_term_adam(&[0.0, 0.0], &mut st, 0.9, 0.999, 1e-8).unwrap();
            assert_eq!(g, vec![0.0, 0.0]);
        }
    }

    #[test]
    fn adam_constant_gradient_tends_to_sign() {
        let mut st = OptimizerState::<f64>::new(2);
        let mut g = vec![];
        for _ in 0..5000 {
            g = gradient_term_adam(&[0.37, -4.0], &mut st, 0.9, 0.999, 1e-8).unwrap();
        }
        assert_relative_eq!(g[0], 1.0, epsilon = 1e-6);
        assert_relative_eq!(g[1], -1.0, epsilon = 1e-6);
        assert!(st.second.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn plain_update_examples() {
        let mut w = vec![1.0f64];
        apply_plain(&mut w, &[1.0], 0.0, 0.0, DecayMode::Coupled).unwrap();
        assert_eq!(w, vec![1.0]);
        apply_plain(&mut w, &[0.0], 0.1, 0.0, DecayMode::Coupled).unwrap();
        assert_eq!(w, vec![1.0]);
        apply_plain(&mut w, &[1.0], 0.1, 0.0, DecayMode::Coupled).unwrap();
        assert_relative_eq!(w[0], 0.9, epsilon = 1e-15);
    }

    #[test]
    fn decoupled_decay() {
        let mut w = vec![2.0f64];
        apply_plain(&mut w, &[1.0], 0.1, 0.5, DecayMode::Decoupled).unwrap();
        assert_relative_eq!(w[0], 2.0 - 0.1 - 0.1, epsilon = 1e-15);
        let mut w = vec![2.0f64];
        apply_plain(&mut w, &[1.0], 0.1, 0.5, DecayMode::Coupled).unwrap();
        assert_relative_eq!(w[0], 2.0 - 0.1 * 2.0, epsilon = 1e-15);
    }

    #[test]
    fn talr_update_examples() {
        let mut w = vec![1.0f64, -3.0];
        apply_talr(&mut w, &[5.0, 7.0], 0.0, 0.0, DecayMode::Coupled).unwrap();
        assert_eq!(w, vec![1.0, -3.0]);
        let mut w = vec![1.0f64];
        apply_talr(&mut w, &[2.0], 0.05, 0.0, DecayMode::Coupled).unwrap();
        assert_relative_eq!(w[0], 0.9, epsilon = 1e-15);
        assert!(apply_talr(&mut w, &[2.0], -0.1, 0.0, DecayMode::Coupled).is_err());
    }

    #[test]
    fn talr_matches_plain_bitwise_when_rates_agree() {
        let g = [0.3f32, -0.7, 1e-3];
        for decay in [DecayMode::Coupled, DecayMode::Decoupled] {
            let mut a = vec![0.1f32, 0.2, -0.9];
            let mut b = a.clone();
            apply_plain(&mut a, &g, 0.037, 1e-4, decay).unwrap();
            apply_talr(&mut b, &g, 0.037, 1e-4, decay).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn length_mismatch_is_error() {
        let mut st = OptimizerState::<f64>::new(2);
        assert!(gradient_term_sgd(&[1.0], &mut st, 0.9).is_err());
        let mut w = vec![0.0f64; 2];
        assert!(apply_plain(&mut w, &[1.0], 0.1, 0.0, DecayMode::Coupled).is_err());
    }
}
