//! Time-indexed schedules for learning rates and target transition rates,
//! and the transition-adaptive learning-rate controller.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::metrics::update_running_tr;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Constant,
    Cosine,
    Linear,
    Step,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "cosine" => Ok(Self::Cosine),
            "linear" => Ok(Self::Linear),
            "step" => Ok(Self::Step),
            other => Err(Error::invalid(format!("unknown schedule kind `{other}`"))),
        }
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Constant => "constant",
            Self::Cosine => "cosine",
            Self::Linear => "linear",
            Self::Step => "step",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub initial: f64,
    pub total_steps: usize,
    /// Step kind only: steps per constant segment.
    pub period: usize,
    /// Step kind only: factor applied at each segment boundary.
    pub divisor: f64,
}

impl Schedule {
    pub fn new(kind: ScheduleKind, initial: f64, total_steps: usize) -> Result<Self> {
        if !(initial >= 0.0 && initial.is_finite()) {
            return Err(Error::invalid(format!("schedule initial value {initial}")));
        }
        if total_steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        Ok(Self {
            kind,
            initial,
            total_steps,
            period: total_steps,
            divisor: 1.0,
        })
    }

    pub fn cosine(initial: f64, total_steps: usize) -> Result<Self> {
        Self::new(ScheduleKind::Cosine, initial, total_steps)
    }

    pub fn constant(initial: f64, total_steps: usize) -> Result<Self> {
        Self::new(ScheduleKind::Constant, initial, total_steps)
    }

    pub fn linear(initial: f64, total_steps: usize) -> Result<Self> {
        Self::new(ScheduleKind::Linear, initial, total_steps)
    }

    pub fn step(initial: f64, total_steps: usize, period: usize, divisor: f64) -> Result<Self> {
        if period == 0 || !(divisor > 0.0) {
            return Err(Error::invalid(format!(
                "step schedule needs period > 0 and divisor > 0 (got {period}, {divisor})"
            )));
        }
        Ok(Self {
            period,
            divisor,
            ..Self::new(ScheduleKind::Step, initial, total_steps)?
        })
    }

    /// Value at step `t` for `0 <= t <= total_steps`.
    pub fn value(&self, t: usize) -> Result<f64> {
        if t > self.total_steps {
            return Err(Error::invalid(format!(
                "step {t} outside schedule of {} steps",
                self.total_steps
            )));
        }
        let frac = t as f64 / self.total_steps as f64;
        let v = match self.kind {
            ScheduleKind::Constant => self.initial,
            ScheduleKind::Cosine => self.initial * 0.5 * (1.0 + (PI * frac).cos()),
            ScheduleKind::Linear => self.initial * (1.0 - frac),
            ScheduleKind::Step => {
                self.initial / self.divisor.powi((t / self.period) as i32)
            }
        };
        Ok(v.max(0.0))
    }
}

/// Initial target transition rate `lambda * sqrt(bits_w)`.
pub fn initial_target_tr(lambda: f64, bits_w: u32) -> f64 {
    lambda * f64::from(bits_w).sqrt()
}

/// `max(0, U + gain * (R - K))`
pub fn update_talr_additive(talr: f64, gain: f64, target: f64, running: f64) -> f64 {
    (talr + gain * (target - running)).max(0.0)
}

/// `U * R / K`; `None` when `K = 0` (the update is skipped).
pub fn update_talr_multiplicative(talr: f64, target: f64, running: f64) -> Option<f64> {
    (running > 0.0).then(|| talr * (target / running))
}

/// `m' U + (1 - m') U R / K`; `None` when `K = 0`.
pub fn update_talr_momentum(talr: f64, momentum: f64, target: f64, running: f64) -> Option<f64> {
    // Written as U * (1 + (1 - m') (R/K - 1)) so that R = K is an exact fixed point.
    (running > 0.0).then(|| talr * (1.0 + (1.0 - momentum) * (target / running - 1.0)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum UpdateRule {
    Additive,
    Multiplicative,
    /// Multiplicative update smoothed with the given momentum.
    Momentum(f64),
}

impl UpdateRule {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Additive => "additive",
            Self::Multiplicative => "multiplicative",
            Self::Momentum(_) => "momentum",
        }
    }
}

/// Per-layer feedback controller driving the running transition rate
/// toward a scheduled target by adjusting the layer's learning rate.
#[derive(Clone, Debug, PartialEq)]
pub struct TrController {
    pub layer_id: String,
    pub talr: f64,
    pub gain: f64,
    pub rule: UpdateRule,
    /// EMA momentum for the running transition rate.
    pub tr_momentum: f64,
    pub running_tr: f64,
    /// Multiplicative/momentum updates skipped because the running rate was 0.
    pub skipped_updates: usize,
}

impl TrController {
    pub fn new(
        layer_id: impl Into<String>,
        initial_talr: f64,
        gain: f64,
        rule: UpdateRule,
        tr_momentum: f64,
    ) -> Result<Self> {
        if !(initial_talr >= 0.0) || !(gain > 0.0) {
            return Err(Error::invalid(format!(
                "controller needs talr >= 0 and gain > 0 (got {initial_talr}, {gain})"
            )));
        }
        if !(0.0..1.0).contains(&tr_momentum) {
            return Err(Error::invalid(format!("TR momentum {tr_momentum} outside [0, 1)")));
        }
        if let UpdateRule::Momentum(m) = rule {
            if !(0.0..1.0).contains(&m) {
                return Err(Error::invalid(format!("TALR momentum {m} outside [0, 1)")));
            }
        }
        Ok(Self {
            layer_id: layer_id.into(),
            talr: initial_talr,
            gain,
            rule,
            tr_momentum,
            running_tr: 0.0,
            skipped_updates: 0,
        })
    }

    /// Applies the configured rule for a given target and running rate.
    pub fn adjust(&mut self, target: f64, running: f64) -> f64 {
        let next = match self.rule {
            UpdateRule::Additive => Some(update_talr_additive(self.talr, self.gain, target, running)),
            UpdateRule::Multiplicative => update_talr_multiplicative(self.talr, target, running),
            UpdateRule::Momentum(m) => update_talr_momentum(self.talr, m, target, running),
        };
        match next {
            Some(u) => self.talr = u,
            None => self.skipped_updates += 1,
        }
        self.talr
    }

    /// One controller iteration: fold the measured rate into the running
    /// rate, then adjust the TALR toward `target`. Returns the new TALR.
    pub fn observe(&mut self, measured_tr: f64, target: f64) -> Result<f64> {
        self.running_tr = update_running_tr(self.running_tr, measured_tr, self.tr_momentum)?;
        Ok(self.adjust(target, self.running_tr))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn initial_target_examples() {
        assert_relative_eq!(initial_target_tr(5e-3, 2), 7.0711e-3, epsilon = 1e-7);
        assert_eq!(initial_target_tr(0.02, 1), 0.02);
        assert_relative_eq!(initial_target_tr(1e-3, 4), 2e-3, epsilon = 1e-18);
    }

    #[test]
    fn schedule_endpoints() {
        let c = Schedule::cosine(0.1, 1000).unwrap();
        assert_eq!(c.value(0).unwrap(), 0.1);
        assert!(c.value(1000).unwrap().abs() < 1e-18);
        let l = Schedule::linear(0.1, 1000).unwrap();
        assert_eq!(l.value(1000).unwrap(), 0.0);
        assert!(c.value(1001).is_err());
    }

    #[test]
    fn step_schedule_example() {
        let s = Schedule::step(0.1, 1000, 100, 5.0).unwrap();
        assert_relative_eq!(s.value(250).unwrap(), 0.004, epsilon = 1e-15);
        assert_eq!(s.value(99).unwrap(), 0.1);
    }

    #[test]
    fn additive_examples() {
        assert_relative_eq!(update_talr_additive(0.1, 0.1, 0.005, 0.003), 0.1002, epsilon = 1e-12);
        assert_eq!(update_talr_additive(0.1, 0.1, 0.004, 0.004), 0.1);
        assert_eq!(update_talr_additive(0.0001, 0.1, 0.0, 0.01), 0.0);
    }

    #[test]
    fn multiplicative_examples() {
        assert_eq!(update_talr_multiplicative(0.1, 0.01, 0.01), Some(0.1));
        assert_relative_eq!(update_talr_multiplicative(0.1, 0.01, 0.005).unwrap(), 0.2, epsilon = 1e-12);
        assert_eq!(update_talr_multiplicative(0.1, 0.0, 0.01), Some(0.0));
        assert_eq!(update_talr_multiplicative(0.1, 0.01, 0.0), None);
    }

    #[test]
    fn momentum_examples() {
        assert_eq!(update_talr_momentum(0.1, 0.99, 0.02, 0.02), Some(0.1));
        assert_relative_eq!(
            update_talr_momentum(0.1, 0.0, 0.01, 0.005).unwrap(),
            update_talr_multiplicative(0.1, 0.01, 0.005).unwrap(),
            epsilon = 1e-15
        );
        assert_relative_eq!(update_talr_momentum(0.1, 0.99, 0.01, 0.005).unwrap(), 0.101, epsilon = 1e-12);
    }

    #[test]
    fn skipped_update_is_counted() {
        let mut c = TrController::new("l", 0.1, 0.1, UpdateRule::Multiplicative, 0.99).unwrap();
        assert_eq!(c.adjust(0.01, 0.0), 0.1);
        assert_eq!(c.skipped_updates, 1);
    }

    #[test]
    fn observe_runs_ema_then_rule() {
        let mut c = TrController::new("l", 0.1, 0.1, UpdateRule::Additive, 0.99).unwrap();
        let u = c.observe(0.01, 0.005).unwrap();
        assert_relative_eq!(c.running_tr, 1e-4, epsilon = 1e-18);
        assert_relative_eq!(u, 0.1 + 0.1 * (0.005 - 1e-4), epsilon = 1e-15);
    }

    fn rules() -> impl Strategy<Value = UpdateRule> {
        prop_oneof![
            Just(UpdateRule::Additive),
            Just(UpdateRule::Multiplicative),
            (0.0f64..0.999).prop_map(UpdateRule::Momentum),
        ]
    }

    proptest! {
        #[test]
        fn control_direction(rule in rules(), u in 0.0f64..1.0, r in 1e-5f64..0.1, k in 1e-5f64..0.1, gain in 1e-4f64..1.0) {
            let mut c = TrController::new("l", u, gain, rule, 0.0).unwrap();
            let next = c.adjust(r, k);
            prop_assert!(next >= 0.0);
            if k < r { prop_assert!(next >= u); }
            if k > r { prop_assert!(next <= u); }
        }

        #[test]
        fn fixed_point_when_on_target(rule in rules(), u in 0.0f64..1.0, r in 1e-5f64..0.1) {
            let mut c = TrController::new("l", u, 0.1, rule, 0.0).unwrap();
            prop_assert_eq!(c.adjust(r, r), u);
        }

        #[test]
        fn schedules_nonnegative(kind in 0usize..4, init in 0.0f64..1.0, total in 1usize..500, t_frac in 0.0f64..=1.0) {
            let s = match kind {
                0 => Schedule::cosine(init, total),
                1 => Schedule::linear(init, total),
                2 => Schedule::constant(init, total),
                _ => Schedule::step(init, total, 7, 5.0),
            }.unwrap();
            let t = ((total as f64) * t_frac) as usize;
            prop_assert!(s.value(t).unwrap() >= 0.0);
        }
    }
}
