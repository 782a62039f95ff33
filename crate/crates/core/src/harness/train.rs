//! The training loop: forward with quantizers, straight-through backward,
//! gradient terms, updates with a learning rate or per-layer TALR, then
//! transition measurement and controller updates.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::{init_from_pretrained, Checkpoint};
use super::config::{DataKind, TrainConfig};
use super::report::{EpochRow, RunMetrics, RunStatus, StepRow};
use crate::data::{self, augment_crop_flip, epoch_order, Dataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{avg_effective_step_size_codes, mean_abs_diff, mean_distance_to_transition_points, update_running_tr};
use crate::model::{Mode, ModelSpec, Network, ParamRole};
use crate::optim::{apply_plain, apply_talr, gradient_term, OptimizerState, ParamGroup, ParamKey, UpdateMode};
use crate::oracle::recount_transitions_with;
use crate::quant::QuantizerSpec;
use crate::schedule::{initial_target_tr, Schedule, ScheduleKind, TrController};
use crate::tensor::{Scalar, Tape, Tensor};

/// Learning-rate multiplier for quantizer scale parameters.
pub const SCALE_LR_FACTOR: f64 = 0.1;
const EVAL_BATCH: usize = 500;
const CROP_PAD: usize = 4;

/// Train and test splits standardized with the train split's per-channel
/// statistics.
#[derive(Clone, Debug)]
pub struct LoadedData {
    pub train: Dataset,
    pub test: Dataset,
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

pub fn load_datasets(cfg: &TrainConfig) -> Result<LoadedData> {
    let path = || {
        cfg.data_path.clone().ok_or_else(|| Error::Config {
            key: "data.path".into(),
            reason: "required for this dataset".into(),
        })
    };
    let (mut train, mut test) = match cfg.data_kind {
        DataKind::Synthetic => {
            let mk = |per_class, split| {
                data::make_synthetic_with_noise(
                    cfg.synthetic_classes,
                    per_class,
                    cfg.synthetic_dim,
                    cfg.data_seed,
                    split,
                    cfg.synthetic_noise,
                )
            };
            (mk(cfg.synthetic_per_class, Split::Train)?, mk(cfg.synthetic_test_per_class, Split::Test)?)
        }
        DataKind::Mnist => {
            let dir = path()?;
            (data::load_mnist_dir(&dir, Split::Train)?, data::load_mnist_dir(&dir, Split::Test)?)
        }
        DataKind::Cifar10 => {
            let dir = path()?;
            (
                data::load_cifar_bin(&data::cifar_files(&dir, Split::Train), Split::Train)?,
                data::load_cifar_bin(&data::cifar_files(&dir, Split::Test), Split::Test)?,
            )
        }
    };
    if let Some(n) = cfg.train_subset {
        train = train.take(n);
    }
    if let Some(n) = cfg.test_subset {
        test = test.take(n);
    }
    if train.len() < cfg.batch_size {
        return Err(Error::Config {
            key: "batch_size".into(),
            reason: format!("{} exceeds the {} training samples", cfg.batch_size, train.len()),
        });
    }
    let (mean, std) = train.channel_stats();
    train.standardize(&mean, &std)?;
    test.standardize(&mean, &std)?;
    Ok(LoadedData { train, test, mean, std })
}

/// Total optimizer steps for a training set of `n` samples (incomplete
/// final batches are dropped).
pub fn total_steps(cfg: &TrainConfig, n: usize) -> usize {
    cfg.steps.unwrap_or(cfg.epochs * (n / cfg.batch_size))
}

/// Parameter groups: per-layer latent groups (TALR when TR scheduling is on),
/// full-precision weights, biases and batch-norm parameters, and scales.
pub fn build_param_groups<T: Scalar>(net: &Network<T>, cfg: &TrainConfig) -> Vec<ParamGroup> {
    let mut groups = Vec::new();
    for (i, l) in net.quant_layers.iter().enumerate() {
        groups.push(ParamGroup {
            name: l.name.clone(),
            mode: if cfg.tr_enabled {
                UpdateMode::Talr { controller: i }
            } else {
                UpdateMode::PlainLr { lr_scale: 1.0 }
            },
            params: vec![ParamKey::Latent(i)],
            weight_decay: cfg.weight_decay,
        });
    }
    let select = |roles: &[ParamRole]| -> Vec<ParamKey> {
        net.params
            .iter()
            .enumerate()
            .filter(|(_, p)| p.trainable && roles.contains(&p.role))
            .map(|(i, _)| ParamKey::Plain(i))
            .collect()
    };
    for (name, roles, lr_scale, wd) in [
        ("weights", &[ParamRole::Weight][..], 1.0, cfg.weight_decay),
        ("bias_bn", &[ParamRole::Bias, ParamRole::BnGamma, ParamRole::BnBeta][..], 1.0, 0.0),
        ("scales", &[ParamRole::WeightScale, ParamRole::ActScale][..], SCALE_LR_FACTOR, 0.0),
    ] {
        let params = select(roles);
        if !params.is_empty() {
            groups.push(ParamGroup {
                name: name.to_string(),
                mode: UpdateMode::PlainLr { lr_scale },
                params,
                weight_decay: wd,
            });
        }
    }
    groups
}

/// Checks that TALR updates reach latent weights only, that every latent
/// tensor is updated exactly once, and that TR scheduling routes every
/// latent tensor through a controller.
pub fn audit_groups<T: Scalar>(groups: &[ParamGroup], net: &Network<T>, tr_enabled: bool) -> Result<()> {
    let mut latent_seen = vec![0usize; net.quant_layers.len()];
    let mut plain_seen = vec![0usize; net.params.len()];
    for g in groups {
        for &key in &g.params {
            match (key, g.mode) {
                (ParamKey::Plain(i), UpdateMode::Talr { .. }) => {
                    return Err(Error::invalid(format!(
                        "group `{}` applies a TALR to `{}`",
                        g.name, net.params[i].name
                    )))
                }
                (ParamKey::Plain(i), _) => plain_seen[i] += 1,
                (ParamKey::Latent(i), mode) => {
                    latent_seen[i] += 1;
                    if tr_enabled != matches!(mode, UpdateMode::Talr { .. }) {
                        return Err(Error::invalid(format!(
                            "latent `{}` routed through group `{}` with mode {mode:?}",
                            net.quant_layers[i].name, g.name
                        )));
                    }
                }
            }
        }
    }
    if let Some(i) = latent_seen.iter().position(|&n| n != 1) {
        return Err(Error::invalid(format!(
            "latent `{}` is in {} groups",
            net.quant_layers[i].name, latent_seen[i]
        )));
    }
    if let Some(i) = plain_seen.iter().position(|&n| n > 1) {
        return Err(Error::invalid(format!("`{}` is in several groups", net.params[i].name)));
    }
    Ok(())
}

/// Outcome of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepOutcome {
    Continue,
    EpochEnd,
    Finished,
    Diverged,
}

/// Stepwise driver for one run.
pub struct Trainer<T: Scalar> {
    pub cfg: TrainConfig,
    pub net: Network<T>,
    pub groups: Vec<ParamGroup>,
    pub controllers: Vec<TrController>,
    pub train: Dataset,
    pub test: Dataset,
    pub lr_schedule: Schedule,
    pub target_schedule: Schedule,
    pub total_steps: usize,
    pub step: usize,
    pub metrics: RunMetrics,
    running: Vec<f64>,
    plain_states: Vec<OptimizerState<T>>,
    latent_states: Vec<OptimizerState<T>>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    epoch: usize,
    epoch_loss: f64,
    epoch_batches: usize,
}

fn schedule(kind: ScheduleKind, initial: f64, total: usize, period: usize, divisor: f64) -> Result<Schedule> {
    match kind {
        ScheduleKind::Step => Schedule::step(initial, total, period, divisor),
        other => Schedule::new(other, initial, total),
    }
}

impl<T: Scalar> Trainer<T> {
    pub fn new(cfg: TrainConfig, train: Dataset, test: Dataset) -> Result<Self> {
        if T::BITS != cfg.precision {
            return Err(Error::Config {
                key: "precision".into(),
                reason: format!("trainer built for {} bits", T::BITS),
            });
        }
        let spec = ModelSpec {
            arch: cfg.model,
            input: train.sample_shape(),
            num_classes: train.num_classes,
            bits_w: cfg.bits_w,
            bits_a: cfg.bits_a,
            weight_scale_trainable: cfg.weight_scale_trainable(),
        };
        let mut net = Network::<T>::new(spec, cfg.seed)?;
        if let Some(path) = &cfg.init_checkpoint {
            init_from_pretrained(&mut net, &Checkpoint::load(path)?)?;
        }
        let groups = build_param_groups(&net, &cfg);
        audit_groups(&groups, &net, cfg.tr_enabled)?;
        let total_steps = total_steps(&cfg, train.len());
        if total_steps == 0 {
            return Err(Error::Config {
                key: "epochs".into(),
                reason: "no complete batch fits in the training set".into(),
            });
        }
        let lr_schedule = schedule(cfg.lr_schedule, cfg.lr, total_steps, cfg.lr_step_period, cfg.lr_step_divisor)?;
        let r0 = cfg.tr_target.unwrap_or_else(|| initial_target_tr(cfg.tr_lambda, cfg.bits_w.min(8)));
        let target_schedule = schedule(cfg.tr_schedule, r0, total_steps, cfg.tr_step_period, cfg.tr_step_divisor)?;
        let gain = cfg.tr_gain.unwrap_or(cfg.lr);
        let controllers = net
            .quant_layers
            .iter()
            .map(|l| TrController::new(l.name.clone(), cfg.lr, gain, cfg.tr_rule, cfg.tr_momentum))
            .collect::<Result<Vec<_>>>()?;
        let plain_states = net.params.iter().map(|p| OptimizerState::new(p.tensor.numel())).collect();
        let latent_states = net.quant_layers.iter().map(|l| OptimizerState::new(l.param.len())).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(3);
        let order = epoch_order(train.len(), &mut rng);
        let (input_mean, input_std) = (Vec::new(), Vec::new());
        Ok(Self {
            running: vec![0.0; net.quant_layers.len()],
            metrics: RunMetrics {
                rows: Vec::new(),
                epochs: Vec::new(),
                status: RunStatus::Completed,
                oracle_checks: 0,
                train_seconds: 0.0,
                input_mean,
                input_std,
            },
            cfg,
            net,
            groups,
            controllers,
            train,
            test,
            lr_schedule,
            target_schedule,
            total_steps,
            step: 0,
            plain_states,
            latent_states,
            rng,
            order,
            cursor: 0,
            epoch: 0,
            epoch_loss: 0.0,
            epoch_batches: 0,
        })
    }

    /// Runs until the configured number of steps or divergence.
    pub fn run(&mut self) -> Result<()> {
        loop {
            match self.step()? {
                StepOutcome::Finished | StepOutcome::Diverged => return Ok(()),
                StepOutcome::Continue | StepOutcome::EpochEnd => {}
            }
        }
    }

    /// One optimizer step, followed by evaluation when an epoch ends.
    pub fn step(&mut self) -> Result<StepOutcome> {
        if self.step >= self.total_steps || self.metrics.status != RunStatus::Completed {
            return Ok(StepOutcome::Finished);
        }
        let started = Instant::now();
        let outcome = self.optimizer_step();
        self.metrics.train_seconds += started.elapsed().as_secs_f64();
        let loss = match outcome {
            Ok(loss) => loss,
            Err(Error::Diverged { step, loss }) => {
                self.metrics.status = RunStatus::Diverged { step, loss };
                return Ok(StepOutcome::Diverged);
            }
            Err(e) => return Err(e),
        };
        self.epoch_loss += loss;
        self.epoch_batches += 1;
        let epoch_done = self.cursor + self.cfg.batch_size > self.order.len();
        if epoch_done || self.step == self.total_steps {
            self.finish_epoch()?;
            if self.step == self.total_steps {
                return Ok(StepOutcome::Finished);
            }
            return Ok(StepOutcome::EpochEnd);
        }
        Ok(StepOutcome::Continue)
    }

    fn finish_epoch(&mut self) -> Result<()> {
        self.epoch += 1;
        let test_acc = self.evaluate()?;
        self.metrics.epochs.push(EpochRow {
            epoch: self.epoch,
            step: self.step,
            train_loss: self.epoch_loss / self.epoch_batches.max(1) as f64,
            test_acc,
            seconds: self.metrics.train_seconds,
        });
        self.epoch_loss = 0.0;
        self.epoch_batches = 0;
        if self.cursor + self.cfg.batch_size > self.order.len() {
            self.order = epoch_order(self.train.len(), &mut self.rng);
            self.cursor = 0;
        }
        Ok(())
    }

    /// Test accuracy in percent using running batch-norm statistics.
    pub fn evaluate(&mut self) -> Result<f64> {
        let n = self.test.len();
        if n == 0 {
            return Ok(0.0);
        }
        let mut correct = 0usize;
        let idx: Vec<usize> = (0..n).collect();
        for chunk in idx.chunks(EVAL_BATCH) {
            let (x, labels) = self.test.batch(chunk);
            let pred = self.net.predict(x.cast())?;
            correct += pred.iter().zip(&labels).filter(|(p, l)| p == l).count();
        }
        Ok(100.0 * correct as f64 / n as f64)
    }

    fn optimizer_step(&mut self) -> Result<f64> {
        let t = self.step + 1;
        let b = self.cfg.batch_size;
        let (mut x, labels) = self.train.batch(&self.order[self.cursor..self.cursor + b]);
        self.cursor += b;
        if self.cfg.augment_enabled() {
            augment_crop_flip(&mut x, CROP_PAD, &mut self.rng);
        }

        let mut tape = Tape::new();
        let fp = self.net.forward(&mut tape, x.cast(), Mode::Train)?;
        let loss_node = tape.softmax_cross_entropy(fp.logits, &labels)?;
        let loss = tape.value(loss_node).data()[0].as_f64();
        if !loss.is_finite() {
            return Err(Error::Diverged { step: t, loss });
        }
        tape.backward(loss_node)?;

        let lr = self.lr_schedule.value(t - 1)?;
        let before: Vec<(Tensor<T>, QuantizerSpec)> = self
            .net
            .quant_layers
            .iter()
            .map(|l| (l.param.latent.clone(), l.param.spec.clone()))
            .collect();
        let decay = self.cfg.optimizer.decay_mode();
        let rule = self.cfg.optimizer.gradient_rule();
        for g in &self.groups {
            for &key in &g.params {
                let (node, state, values) = match key {
                    ParamKey::Plain(i) => (
                        fp.param_nodes[i].expect("every parameter is recorded"),
                        &mut self.plain_states[i],
                        self.net.params[i].tensor.data_mut(),
                    ),
                    ParamKey::Latent(i) => (
                        fp.latent_nodes[i],
                        &mut self.latent_states[i],
                        self.net.quant_layers[i].param.latent.data_mut(),
                    ),
                };
                let grad = tape.take_grad(node).unwrap_or_else(|| vec![T::zero(); values.len()]);
                let term = match gradient_term(rule, &grad, state) {
                    Ok(v) => v,
                    Err(Error::NonFinite(_)) => return Err(Error::Diverged { step: t, loss }),
                    Err(e) => return Err(e),
                };
                match g.mode {
                    UpdateMode::PlainLr { lr_scale } => apply_plain(values, &term, lr * lr_scale, g.weight_decay, decay)?,
                    UpdateMode::Talr { controller } => {
                        let u = if self.cfg.tr_pinned { lr } else { self.controllers[controller].talr };
                        apply_talr(values, &term, u, g.weight_decay, decay)?
                    }
                }
            }
        }
        self.net.clamp_scales();
        let transitions = self.net.requantize()?;

        let target = self.target_schedule.value(t)?;
        let check = self.cfg.oracle_check_every > 0 && (t == 1 || t.is_multiple_of(self.cfg.oracle_check_every));
        if check {
            self.metrics.oracle_checks += 1;
        }
        for (i, (&changed, (w_before, spec_before))) in transitions.iter().zip(&before).enumerate() {
            let layer = &self.net.quant_layers[i];
            let n = layer.param.len();
            if check {
                let recount = recount_transitions_with(
                    w_before,
                    spec_before,
                    &layer.param.latent,
                    &layer.param.spec,
                    Default::default(),
                )?;
                if recount != changed {
                    return Err(Error::TransitionMismatch {
                        layer: layer.name.clone(),
                        step: t,
                        tracked: changed,
                        recounted: recount,
                    });
                }
            }
            let k = changed as f64 / n as f64;
            let (running, u) = if self.cfg.tr_enabled && !self.cfg.tr_pinned {
                let u = self.controllers[i].observe(k, target)?;
                (self.controllers[i].running_tr, u)
            } else {
                self.running[i] = update_running_tr(self.running[i], k, self.cfg.tr_momentum)?;
                let u = if self.cfg.tr_enabled { self.lr_schedule.value(t)? } else { lr };
                (self.running[i], u)
            };
            let spec = &layer.param.spec;
            self.metrics.rows.push(StepRow {
                step: t,
                layer: layer.name.clone(),
                k,
                running,
                target,
                lr: u,
                ess_latent: mean_abs_diff(w_before.data(), layer.param.latent.data()),
                ess_quant: avg_effective_step_size_codes(layer.param.prev_codes(), layer.param.codes(), spec.gamma)?,
                dist_tp: mean_distance_to_transition_points(&layer.param.normalized(), spec),
                loss,
            });
        }
        self.step = t;
        Ok(loss)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.net, &self.controllers)
    }
}

pub struct TrainOutput {
    pub metrics: RunMetrics,
    pub checkpoint: Checkpoint,
}

/// Loads data and trains to completion (or divergence, reported in
/// `metrics.status`).
pub fn run_training(cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    run_training_on(cfg, load_datasets(cfg)?)
}

/// Like [`run_training`] with preloaded data.
pub fn run_training_on(cfg: &TrainConfig, data: LoadedData) -> Result<TrainOutput> {
    let LoadedData { train, test, mean, std } = data;
    match cfg.precision {
        64 => finish::<f64>(cfg, train, test, mean, std),
        _ => finish::<f32>(cfg, train, test, mean, std),
    }
}

fn finish<T: Scalar>(cfg: &TrainConfig, train: Dataset, test: Dataset, mean: Vec<f32>, std: Vec<f32>) -> Result<TrainOutput> {
    let mut trainer = Trainer::<T>::new(cfg.clone(), train, test)?;
    trainer.run()?;
    let checkpoint = trainer.checkpoint();
    let mut metrics = trainer.metrics;
    metrics.input_mean = mean;
    metrics.input_std = std;
    Ok(TrainOutput { metrics, checkpoint })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Overhead {
    pub plain_seconds: f64,
    pub tr_seconds: f64,
    pub ratio: f64,
    pub plain_runs: Vec<f64>,
    pub tr_runs: Vec<f64>,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Median training-loop wall-clock with TR scheduling off and on, over
/// `repeats` interleaved runs each (at least 3).
pub fn measure_overhead(cfg: &TrainConfig, repeats: usize) -> Result<Overhead> {
    let mut plain = cfg.clone();
    plain.tr_enabled = false;
    let mut tr = cfg.clone();
    tr.tr_enabled = true;
    compare_wall_clock(&plain, &tr, repeats)
}

/// Median training-loop wall-clock of two configs sharing one dataset, over
/// `repeats` interleaved runs each (at least 3). `ratio` is `b / a`.
pub fn compare_wall_clock(a: &TrainConfig, b: &TrainConfig, repeats: usize) -> Result<Overhead> {
    let data = load_datasets(a)?;
    let (mut plain_runs, mut tr_runs) = (Vec::new(), Vec::new());
    for _ in 0..repeats.max(3) {
        for (c, sink) in [(a, &mut plain_runs), (b, &mut tr_runs)] {
            let out = run_training_on(c, data.clone())?;
            sink.push(out.metrics.train_seconds);
        }
    }
    let (p, t) = (median(&plain_runs), median(&tr_runs));
    Ok(Overhead {
        plain_seconds: p,
        tr_seconds: t,
        ratio: t / p,
        plain_runs,
        tr_runs,
    })
}
