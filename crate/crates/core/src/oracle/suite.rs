//! Named oracle checks, run by tests, the acceptance suite and `qat oracle`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    clip_surrogate, fd_gradient, recount_transitions_with, relative_error, simulate_controller, verify_ess_identity,
    OracleRounding,
};
use crate::error::Result;
use crate::metrics::{avg_effective_step_size, compute_tr};
use crate::quant::{quantize_on_tape, QuantizedParam, QuantizerSpec};
use crate::schedule::{Schedule, TrController, UpdateRule};
use crate::tensor::{BatchNormMode, NodeId, Tape, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-3;
pub const ESS_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// The recount uses round-half-to-even instead of the production rule.
    Rounding,
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    /// Substring a check name must contain to run.
    pub filter: Option<String>,
    pub fault: Option<Fault>,
    /// Random points per gradient check.
    pub gradient_points: usize,
    /// Random layers for the transition recount.
    pub transition_layers: usize,
    pub seed: u64,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            filter: None,
            fault: None,
            gradient_points: 20,
            transition_layers: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst observed error (relative for gradients, absolute otherwise).
    pub max_error: f64,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, max_error: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.to_string(),
            passed,
            max_error,
            detail: detail.into(),
        }
    }
}

type Build = fn(&mut Tape<f64>, &[NodeId], &mut ChaCha8Rng) -> Result<NodeId>;

fn away_from_zero(v: f64) -> f64 {
    if v.abs() < 0.01 {
        v + 0.02f64.copysign(v)
    } else {
        v
    }
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| away_from_zero(rng.random_range(-1.0..1.0))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// Records `sum(r * out)` with a fixed random projection `r`.
fn project(tape: &mut Tape<f64>, out: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = random_tensor(tape.shape(out), &mut rng);
    let r = tape.leaf(r, false);
    let m = tape.mul(out, r)?;
    Ok(tape.sum(m))
}

/// Largest relative error between autodiff and central differences over
/// the inputs of `build`.
fn gradient_error(inputs: &[Tensor<f64>], build: Build, op_seed: u64) -> Result<f64> {
    let eval = |xs: &[Tensor<f64>], backward: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = xs.iter().map(|x| tape.leaf(x.clone(), true)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(op_seed);
        let out = build(&mut tape, &ids, &mut rng)?;
        let loss = project(&mut tape, out, op_seed ^ 0x9e37)?;
        let value = tape.value(loss).data()[0];
        let mut grads = Vec::new();
        if backward {
            tape.backward(loss)?;
            for (id, x) in ids.iter().zip(xs) {
                grads.push(tape.grad(*id).map_or_else(|| vec![0.0; x.numel()], <[f64]>::to_vec));
            }
        }
        Ok((value, grads))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut worst = 0.0f64;
    for (i, a) in analytic.iter().enumerate() {
        let fd = fd_gradient(
            |xi| {
                let mut xs = inputs.to_vec();
                xs[i] = xi.clone();
                eval(&xs, false).map(|r| r.0)
            },
            &inputs[i],
            FD_STEP,
        )?;
        worst = worst.max(relative_error(a, fd.data(), 1e-8));
    }
    Ok(worst)
}

fn primitives() -> Vec<(&'static str, Vec<Vec<usize>>, Build)> {
    vec![
        ("matmul", vec![vec![3, 4], vec![4, 2]], |t, x, _| t.matmul(x[0], x[1])),
        ("linear", vec![vec![3, 4], vec![5, 4]], |t, x, _| t.linear(x[0], x[1])),
        ("add_bias", vec![vec![2, 3, 2, 2], vec![3]], |t, x, _| t.add_bias(x[0], x[1])),
        ("add", vec![vec![2, 5], vec![2, 5]], |t, x, _| t.add(x[0], x[1])),
        ("mul", vec![vec![2, 5], vec![2, 5]], |t, x, _| t.mul(x[0], x[1])),
        ("scale", vec![vec![7]], |t, x, _| Ok(t.scale(x[0], -1.7))),
        ("relu", vec![vec![3, 4]], |t, x, _| Ok(t.relu(x[0]))),
        ("sum", vec![vec![6]], |t, x, _| Ok(t.sum(x[0]))),
        ("mean", vec![vec![2, 3]], |t, x, _| t.mean(x[0])),
        ("reshape", vec![vec![2, 6]], |t, x, _| t.reshape(x[0], &[3, 4])),
        ("global_avg_pool", vec![vec![2, 3, 3, 3]], |t, x, _| t.global_avg_pool(x[0])),
        ("shortcut_pad", vec![vec![2, 2, 4, 4]], |t, x, _| t.shortcut_pad(x[0], 2, 4)),
        ("conv2d", vec![vec![2, 2, 5, 5], vec![3, 2, 3, 3]], |t, x, _| t.conv2d(x[0], x[1], 2, 1)),
        ("batch_norm_train", vec![vec![4, 3, 2, 2], vec![3], vec![3]], |t, x, _| {
            Ok(t.batch_norm(x[0], x[1], x[2], BatchNormMode::Train { eps: 1e-5 })?.0)
        }),
        ("batch_norm_eval", vec![vec![4, 3], vec![3], vec![3]], |t, x, _| {
            let mode = BatchNormMode::Eval {
                mean: vec![0.1, -0.2, 0.3],
                var: vec![0.5, 1.5, 2.0],
                eps: 1e-5,
            };
            Ok(t.batch_norm(x[0], x[1], x[2], mode)?.0)
        }),
        ("softmax_cross_entropy", vec![vec![4, 5]], |t, x, rng| {
            let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
            t.softmax_cross_entropy(x[0], &labels)
        }),
    ]
}

fn gradient_checks(opts: &SuiteOptions, want: &dyn Fn(&str) -> bool, out: &mut Vec<CheckResult>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for (name, shapes, build) in primitives() {
        let full = format!("gradient.{name}");
        if !want(&full) {
            continue;
        }
        let mut worst = 0.0f64;
        for p in 0..opts.gradient_points {
            let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| random_tensor(s, &mut rng)).collect();
            worst = worst.max(gradient_error(&inputs, build, opts.seed.wrapping_add(p as u64))?);
        }
        out.push(CheckResult::new(
            &full,
            worst <= FD_TOLERANCE,
            worst,
            format!("{} points, max relative error {worst:.3e}", opts.gradient_points),
        ));
    }
    let full = "gradient.quantizer_surrogate";
    if want(full) {
        let mut worst = 0.0f64;
        for _ in 0..opts.gradient_points {
            let bits = [2u32, 3, 4][rng.random_range(0..3)];
            let spec = QuantizerSpec::weight(bits, rng.random_range(0.2..2.0))?.with_trainable_scale(true);
            let x = random_tensor(&[12], &mut rng);
            // keep points away from the clip edges where the surrogate has kinks
            let lo = spec.alpha * spec.scale() / spec.gamma;
            let hi = spec.beta * spec.scale() / spec.gamma;
            let x = x.map(|v| {
                if (v - lo).abs() < 1e-3 || (v - hi).abs() < 1e-3 {
                    v + 2e-3
                } else {
                    v
                }
            });
            let mut tape = Tape::new();
            let xi = tape.leaf(x.clone(), true);
            let si = tape.leaf(Tensor::from_vec(vec![spec.scale()]), true);
            let (q, _) = quantize_on_tape(&mut tape, xi, si, &spec)?;
            let loss = project(&mut tape, q, 17)?;
            tape.backward(loss)?;
            let gx = tape.grad(xi).unwrap().to_vec();
            let gs = tape.grad(si).unwrap().to_vec();
            let r = random_tensor(&[12], &mut ChaCha8Rng::seed_from_u64(17));
            let surrogate = |xs: &Tensor<f64>, sp: &QuantizerSpec| -> f64 {
                xs.data().iter().zip(r.data()).map(|(&v, &w)| w * clip_surrogate(v, sp)).sum()
            };
            let fdx = fd_gradient(|t| Ok(surrogate(t, &spec)), &x, FD_STEP)?;
            let fds = fd_gradient(
                |t| {
                    let mut sp = spec.clone();
                    sp.set_scale(t.data()[0])?;
                    Ok(surrogate(&x, &sp))
                },
                &Tensor::from_vec(vec![spec.scale()]),
                FD_STEP,
            )?;
            worst = worst
                .max(relative_error(&gx, fdx.data(), 1e-8))
                .max(relative_error(&gs, fds.data(), 1e-8));
        }
        out.push(CheckResult::new(
            full,
            worst <= FD_TOLERANCE,
            worst,
            format!("{} points, max relative error {worst:.3e}", opts.gradient_points),
        ));
    }
    Ok(())
}

fn random_spec(bits: u32, rng: &mut ChaCha8Rng) -> Result<QuantizerSpec> {
    QuantizerSpec::weight(bits, rng.random_range(0.1..1.0))
}

/// Tracked transitions of a random perturbation against the independent
/// recount. Returns `(mismatching layers, layers)`.
fn transition_mismatches(opts: &SuiteOptions, rounding: OracleRounding) -> Result<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x7472);
    let mut bad = 0;
    for layer in 0..opts.transition_layers {
        let bits = [1u32, 2, 4][layer % 3];
        let spec = random_spec(bits, &mut rng)?;
        let n = rng.random_range(1..=1024);
        let s = spec.scale();
        // a quarter of the weights sit exactly on a transition point after
        // the update, so tie handling is exercised
        let before: Vec<f64> = (0..n).map(|_| rng.random_range(-1.5 * s..1.5 * s)).collect();
        let noise = rng.random_range(0.001..0.2) * s;
        let after: Vec<f64> = before
            .iter()
            .map(|&w| {
                if rng.random_range(0..4) == 0 {
                    let k = rng.random_range(-3i32..3);
                    (f64::from(k) + 0.5) * s / spec.gamma
                } else {
                    w + rng.random_range(-noise..noise)
                }
            })
            .collect();
        let mut p = QuantizedParam::new(Tensor::from_vec(before.clone()), spec.clone())?;
        p.latent = Tensor::from_vec(after.clone());
        let tracked = p.refresh()?;
        let recount = recount_transitions_with(
            &Tensor::from_vec(before),
            &spec,
            &Tensor::from_vec(after),
            &spec,
            rounding,
        )?;
        let k = compute_tr(p.prev_codes(), p.codes())?;
        if tracked != recount || k != recount as f64 / n as f64 {
            bad += 1;
        }
    }
    Ok((bad, opts.transition_layers))
}

fn transition_checks(opts: &SuiteOptions, want: &dyn Fn(&str) -> bool, out: &mut Vec<CheckResult>) -> Result<()> {
    let rounding = match opts.fault {
        Some(Fault::Rounding) => OracleRounding::HalfEven,
        None => OracleRounding::HalfAwayFromZero,
    };
    if want("transitions.random") {
        let (bad, total) = transition_mismatches(opts, rounding)?;
        out.push(CheckResult::new(
            "transitions.random",
            bad == 0,
            bad as f64,
            format!("{bad} of {total} layers disagree with the recount"),
        ));
    }
    if want("transitions.crossing") {
        let spec = QuantizerSpec::weight(2, 1.0)?;
        let before = Tensor::from_vec(vec![0.2, -0.3, 0.0]);
        let after = Tensor::from_vec(vec![0.3, -0.3, 0.0]);
        let n = recount_transitions_with(&before, &spec, &after, &spec, rounding)?;
        out.push(CheckResult::new(
            "transitions.crossing",
            n == 1,
            (n as f64 - 1.0).abs(),
            format!("one boundary crossing counted as {n}"),
        ));
    }
    if want("transitions.scale_change") {
        // w fixed, s shrinks from 0.3 to 0.2: w_n moves from -1.33 to -2
        let w = Tensor::from_vec(vec![-0.2]);
        let (a, b) = (QuantizerSpec::weight(2, 0.3)?, QuantizerSpec::weight(2, 0.2)?);
        let n = recount_transitions_with(&w, &a, &w, &b, rounding)?;
        out.push(CheckResult::new(
            "transitions.scale_change",
            n == 1,
            (n as f64 - 1.0).abs(),
            format!("scale-only change produced {n} transition(s)"),
        ));
    }
    Ok(())
}

/// A layer and an update in which every changed code moves one level.
fn single_level_update(n: usize, rng: &mut ChaCha8Rng) -> Result<(QuantizedParam<f64>, Vec<f64>)> {
    let spec = QuantizerSpec::weight(4, 1.0)?;
    let g = spec.gamma;
    let before: Vec<f64> = (0..n).map(|_| rng.random_range(spec.alpha + 1.0..spec.beta - 1.0) / g).collect();
    let step = 0.4 / g;
    let after = before.iter().map(|&w| w + rng.random_range(-step..step)).collect();
    Ok((QuantizedParam::new(Tensor::from_vec(before), spec)?, after))
}

fn ess_checks(opts: &SuiteOptions, want: &dyn Fn(&str) -> bool, out: &mut Vec<CheckResult>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x657373);
    if want("ess.single_level") {
        let mut worst = 0.0f64;
        let mut flagged = 0;
        for _ in 0..50 {
            let n = rng.random_range(1..512);
            let (mut p, after) = single_level_update(n, &mut rng)?;
            let q_before = p.quantized().clone();
            p.latent = Tensor::from_vec(after);
            p.refresh()?;
            let delta = p.spec.level_spacing();
            let ess = avg_effective_step_size(&q_before, p.quantized())?;
            let k = compute_tr(p.prev_codes(), p.codes())?;
            worst = worst.max((ess - delta * k).abs());
            let report = verify_ess_identity(q_before.data(), p.quantized().data(), p.prev_codes(), p.codes(), delta)?;
            if !report.identity_holds() {
                flagged += 1;
            }
        }
        out.push(CheckResult::new(
            "ess.single_level",
            worst <= ESS_TOLERANCE && flagged == 0,
            worst,
            format!("max |ess - delta * k| = {worst:.3e}, {flagged} reports flagged"),
        ));
    }
    if want("ess.multi_level") {
        let spec = QuantizerSpec::weight(4, 1.0)?;
        let delta = spec.level_spacing();
        let mut p = QuantizedParam::new(Tensor::from_vec(vec![0.0, 0.0, 0.1]), spec)?;
        let q_before = p.quantized().clone();
        p.latent = Tensor::from_vec(vec![2.0 * delta, 0.0, 0.1]);
        p.refresh()?;
        let r = verify_ess_identity(q_before.data(), p.quantized().data(), p.prev_codes(), p.codes(), delta)?;
        let jump = (p.quantized().data()[0] - q_before.data()[0]).abs();
        let ok = r.multi_level == vec![0] && (jump - 2.0 * delta).abs() < ESS_TOLERANCE && r.avg_ess >= delta * r.tr;
        out.push(CheckResult::new(
            "ess.multi_level",
            ok,
            (jump - 2.0 * delta).abs(),
            format!("flagged {:?}, |dw_q| = {jump}", r.multi_level),
        ));
    }
    if want("ess.none") {
        let spec = QuantizerSpec::weight(2, 1.0)?;
        let p = QuantizedParam::new(Tensor::from_vec(vec![0.1, -0.6, 0.3]), spec)?;
        let q = p.quantized().data().to_vec();
        let r = verify_ess_identity(&q, &q, p.codes(), p.codes(), p.spec.level_spacing())?;
        out.push(CheckResult::new(
            "ess.none",
            r.identity_holds() && r.avg_ess == 0.0 && r.tr == 0.0,
            r.avg_ess,
            "no transitions",
        ));
    }
    Ok(())
}

/// Worst relative overshoot below a step-down target after the drop.
pub fn step_down_undershoot(rule: UpdateRule) -> Result<f64> {
    let c = TrController::new("sim", 0.001, 0.001, rule, 0.9)?;
    let target = |t: usize| if t < 400 { 0.01 } else { 0.002 };
    let traj = simulate_controller(|u| (10.0 * u).min(1.0), c, target, 800)?;
    Ok(traj[400..]
        .iter()
        .map(|s| ((0.002 - s.measured) / 0.002).max(0.0))
        .fold(0.0, f64::max))
}

fn controller_checks(want: &dyn Fn(&str) -> bool, out: &mut Vec<CheckResult>) -> Result<()> {
    if want("controller.tracking") {
        let eta = 0.1;
        let c = 10.0;
        let c0 = TrController::new("sim", 0.0001, eta, UpdateRule::Additive, 0.0)?;
        let budget = (10.0 / eta * (1.0f64).max(1.0 / c)) as usize;
        let traj = simulate_controller(|u| (c * u).min(1.0), c0, |_| 0.01, budget * 3)?;
        let settle = traj.iter().position(|s| (s.running - 0.01).abs() < 1e-3);
        let held = settle.is_some_and(|i| traj[i..].iter().all(|s| (s.running - 0.01).abs() < 1e-3));
        let err = traj.last().map_or(1.0, |s| (s.running - 0.01).abs());
        out.push(CheckResult::new(
            "controller.tracking",
            held && settle.is_some_and(|i| i <= budget),
            err,
            format!("settled at step {settle:?} (budget {budget})"),
        ));
    }
    if want("controller.flat") {
        let c = TrController::new("sim", 0.001, 0.1, UpdateRule::Additive, 0.0)?;
        let traj = simulate_controller(|u| (10.0 * u).min(1.0), c, |_| 0.01, 100)?;
        let drift = traj.iter().map(|s| (s.talr - 0.001).abs()).fold(0.0, f64::max);
        out.push(CheckResult::new("controller.flat", drift == 0.0, drift, "target met from the start"));
    }
    if want("controller.step_down") {
        let add = step_down_undershoot(UpdateRule::Additive)?;
        let mul = step_down_undershoot(UpdateRule::Multiplicative)?;
        out.push(CheckResult::new(
            "controller.step_down",
            mul > add,
            mul - add,
            format!("undershoot after a 5x target drop: multiplicative {mul:.3}, additive {add:.3}"),
        ));
    }
    if want("controller.schedule") {
        let s = Schedule::step(0.1, 300, 100, 5.0)?;
        let v = s.value(250)?;
        out.push(CheckResult::new(
            "controller.schedule",
            (v - 0.004).abs() < 1e-15,
            (v - 0.004).abs(),
            format!("step schedule at t=250 is {v}"),
        ));
    }
    Ok(())
}

/// Runs every check whose name contains `opts.filter`.
pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<CheckResult>> {
    let want = |name: &str| opts.filter.as_deref().is_none_or(|f| name.contains(f));
    let mut out = Vec::new();
    gradient_checks(opts, &want, &mut out)?;
    transition_checks(opts, &want, &mut out)?;
    ess_checks(opts, &want, &mut out)?;
    controller_checks(&want, &mut out)?;
    Ok(out)
}
