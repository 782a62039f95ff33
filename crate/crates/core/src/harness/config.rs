//! Flat `key = value` run configuration.
//!
//! One assignment per line; `#` starts a comment. Values may be bare or
//! double-quoted. Keys are dotted (`tr.lambda`), so a config file is also a
//! valid TOML document without tables. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::Arch;
use crate::optim::OptimizerKind;
use crate::schedule::{ScheduleKind, UpdateRule};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightScaleMode {
    /// Frozen under TR scheduling, learned otherwise.
    Auto,
    Learned,
    Fixed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataKind {
    Synthetic,
    Mnist,
    Cifar10,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: Arch,
    pub bits_w: u32,
    pub bits_a: u32,
    pub optimizer: OptimizerKind,

    pub tr_enabled: bool,
    pub tr_lambda: f64,
    /// Overrides `lambda * sqrt(bits_w)` as the initial target when set.
    pub tr_target: Option<f64>,
    pub tr_momentum: f64,
    pub tr_rule: UpdateRule,
    pub tr_schedule: ScheduleKind,
    pub tr_step_period: usize,
    pub tr_step_divisor: f64,
    /// Controller gain; defaults to the initial learning rate.
    pub tr_gain: Option<f64>,
    /// Keep measuring but drive latent weights with the LR schedule.
    pub tr_pinned: bool,

    pub lr: f64,
    pub lr_schedule: ScheduleKind,
    pub lr_step_period: usize,
    pub lr_step_divisor: f64,
    pub weight_decay: f64,
    pub weight_scale: WeightScaleMode,

    pub epochs: usize,
    /// Total optimizer steps; overrides `epochs` when set.
    pub steps: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,

    pub data_kind: DataKind,
    pub data_path: Option<PathBuf>,
    /// Seed of the synthetic generator (independent of the run seed).
    pub data_seed: u64,
    pub train_subset: Option<usize>,
    pub test_subset: Option<usize>,
    pub synthetic_classes: usize,
    pub synthetic_per_class: usize,
    pub synthetic_test_per_class: usize,
    pub synthetic_dim: usize,
    /// Standard deviation of the per-dimension Gaussian noise.
    pub synthetic_noise: f64,
    /// Crop/flip augmentation; defaults to on for CIFAR-10 only.
    pub augment: Option<bool>,

    pub init_checkpoint: Option<PathBuf>,
    /// 32 or 64.
    pub precision: u32,
    /// Recount transitions independently every this many steps (0 = never).
    pub oracle_check_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: Arch::CnnSmall,
            bits_w: 2,
            bits_a: 2,
            optimizer: OptimizerKind::Sgd,
            tr_enabled: false,
            tr_lambda: 5e-3,
            tr_target: None,
            tr_momentum: 0.99,
            tr_rule: UpdateRule::Additive,
            tr_schedule: ScheduleKind::Cosine,
            tr_step_period: 1000,
            tr_step_divisor: 5.0,
            tr_gain: None,
            tr_pinned: false,
            lr: 0.01,
            lr_schedule: ScheduleKind::Cosine,
            lr_step_period: 1000,
            lr_step_divisor: 5.0,
            weight_decay: 0.0,
            weight_scale: WeightScaleMode::Auto,
            epochs: 1,
            steps: None,
            batch_size: 64,
            seed: 0,
            data_kind: DataKind::Synthetic,
            data_path: None,
            data_seed: 0,
            train_subset: None,
            test_subset: None,
            synthetic_classes: 10,
            synthetic_per_class: 200,
            synthetic_test_per_class: 50,
            synthetic_dim: 64,
            synthetic_noise: crate::data::SYNTHETIC_NOISE,
            augment: None,
            init_checkpoint: None,
            precision: 32,
            oracle_check_every: 50,
        }
    }
}

/// Every accepted key, in the order [`TrainConfig::to_text`] writes them.
pub const CONFIG_KEYS: &[&str] = &[
    "model",
    "bits.w",
    "bits.a",
    "optimizer",
    "tr.enabled",
    "tr.lambda",
    "tr.target",
    "tr.momentum",
    "tr.rule",
    "tr.rule_momentum",
    "tr.schedule",
    "tr.step_period",
    "tr.step_divisor",
    "tr.gain",
    "tr.pinned",
    "lr.initial",
    "lr.schedule",
    "lr.step_period",
    "lr.step_divisor",
    "weight_decay",
    "quant.weight_scale",
    "epochs",
    "steps",
    "batch_size",
    "seed",
    "data.kind",
    "data.path",
    "data.seed",
    "data.train_subset",
    "data.test_subset",
    "data.synthetic.classes",
    "data.synthetic.per_class",
    "data.synthetic.test_per_class",
    "data.synthetic.dim",
    "data.synthetic.noise",
    "data.augment",
    "init.checkpoint",
    "precision",
    "oracle.check_every",
];

fn bad(key: &str, reason: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        reason: reason.into(),
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value.parse().map_err(|_| bad(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(bad(key, format!("expected a boolean, got `{value}`"))),
    }
}

fn parse_optional<V: FromStr>(key: &str, value: &str) -> Result<Option<V>> {
    if value.is_empty() || value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn positive(key: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(bad(key, format!("must be positive, got {v}")))
    }
}

fn unquote(raw: &str) -> &str {
    let raw = raw.trim();
    if raw.len() >= 2 && raw.starts_with('"') && raw.ends_with('"') {
        &raw[1..raw.len() - 1]
    } else {
        raw
    }
}

/// Drops a trailing `# comment` that is not inside quotes.
fn strip_comment(line: &str) -> &str {
    let mut quoted = false;
    for (i, ch) in line.char_indices() {
        match ch {
            '"' => quoted = !quoted,
            '#' if !quoted => return &line[..i],
            _ => {}
        }
    }
    line
}

impl TrainConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (no, raw) in text.lines().enumerate() {
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(bad(line, format!("line {}: expected `key = value`", no + 1)));
            };
            cfg.set(key.trim(), unquote(value))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Assigns one key. Call [`validate`](Self::validate) afterwards.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = unquote(value);
        match key {
            "model" => self.model = value.parse().map_err(|e: Error| bad(key, e.to_string()))?,
            "bits.w" => self.bits_w = parse(key, value)?,
            "bits.a" => self.bits_a = parse(key, value)?,
            "optimizer" => self.optimizer = value.parse().map_err(|e: Error| bad(key, e.to_string()))?,
            "tr.enabled" => self.tr_enabled = parse_bool(key, value)?,
            "tr.lambda" => self.tr_lambda = positive(key, parse(key, value)?)?,
            "tr.target" => self.tr_target = parse_optional(key, value)?,
            "tr.momentum" => self.tr_momentum = parse(key, value)?,
            "tr.rule" => {
                self.tr_rule = match (value, self.tr_rule) {
                    ("additive", _) => UpdateRule::Additive,
                    ("multiplicative", _) => UpdateRule::Multiplicative,
                    ("momentum", UpdateRule::Momentum(m)) => UpdateRule::Momentum(m),
                    ("momentum", _) => UpdateRule::Momentum(0.99),
                    _ => return Err(bad(key, format!("unknown rule `{value}`"))),
                }
            }
            "tr.rule_momentum" => {
                let m: f64 = parse(key, value)?;
                if !(0.0..1.0).contains(&m) {
                    return Err(bad(key, format!("{m} outside [0, 1)")));
                }
                self.tr_rule = UpdateRule::Momentum(m);
            }
            "tr.schedule" => self.tr_schedule = value.parse().map_err(|e: Error| bad(key, e.to_string()))?,
            "tr.step_period" => self.tr_step_period = parse(key, value)?,
            "tr.step_divisor" => self.tr_step_divisor = positive(key, parse(key, value)?)?,
            "tr.gain" => self.tr_gain = parse_optional(key, value)?,
            "tr.pinned" => self.tr_pinned = parse_bool(key, value)?,
            "lr.initial" => self.lr = parse(key, value)?,
            "lr.schedule" => self.lr_schedule = value.parse().map_err(|e: Error| bad(key, e.to_string()))?,
            "lr.step_period" => self.lr_step_period = parse(key, value)?,
            "lr.step_divisor" => self.lr_step_divisor = positive(key, parse(key, value)?)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "quant.weight_scale" => {
                self.weight_scale = match value {
                    "auto" => WeightScaleMode::Auto,
                    "learned" => WeightScaleMode::Learned,
                    "fixed" => WeightScaleMode::Fixed,
                    _ => return Err(bad(key, format!("expected auto, learned or fixed, got `{value}`"))),
                }
            }
            "epochs" => self.epochs = parse(key, value)?,
            "steps" => self.steps = parse_optional(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "data.kind" => {
                self.data_kind = match value {
                    "synthetic" => DataKind::Synthetic,
                    "mnist" => DataKind::Mnist,
                    "cifar10" => DataKind::Cifar10,
                    _ => return Err(bad(key, format!("unknown dataset `{value}`"))),
                }
            }
            "data.path" => self.data_path = parse_optional(key, value)?,
            "data.seed" => self.data_seed = parse(key, value)?,
            "data.train_subset" => self.train_subset = parse_optional(key, value)?,
            "data.test_subset" => self.test_subset = parse_optional(key, value)?,
            "data.synthetic.classes" => self.synthetic_classes = parse(key, value)?,
            "data.synthetic.per_class" => self.synthetic_per_class = parse(key, value)?,
            "data.synthetic.test_per_class" => self.synthetic_test_per_class = parse(key, value)?,
            "data.synthetic.dim" => self.synthetic_dim = parse(key, value)?,
            "data.synthetic.noise" => self.synthetic_noise = parse(key, value)?,
            "data.augment" => self.augment = Some(parse_bool(key, value)?),
            "init.checkpoint" => self.init_checkpoint = parse_optional(key, value)?,
            "precision" => self.precision = parse(key, value)?,
            "oracle.check_every" => self.oracle_check_every = parse(key, value)?,
            _ => return Err(bad(key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for (key, bits) in [("bits.w", self.bits_w), ("bits.a", self.bits_a)] {
            if !(1..=8).contains(&bits) && bits != 32 {
                return Err(bad(key, format!("{bits} (use 1-8, or 32 for full precision)")));
            }
        }
        if !(0.0..1.0).contains(&self.tr_momentum) {
            return Err(bad("tr.momentum", format!("{} outside [0, 1)", self.tr_momentum)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(bad("lr.initial", format!("must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(bad("weight_decay", "must be nonnegative"));
        }
        if let Some(g) = self.tr_gain {
            positive("tr.gain", g)?;
        }
        if let Some(r) = self.tr_target {
            if !(0.0..=1.0).contains(&r) {
                return Err(bad("tr.target", format!("{r} outside [0, 1]")));
            }
        }
        if !(self.synthetic_noise >= 0.0 && self.synthetic_noise.is_finite()) {
            return Err(bad("data.synthetic.noise", "must be finite and nonnegative"));
        }
        if self.batch_size < 2 {
            return Err(bad("batch_size", "batch norm needs at least 2 samples per batch"));
        }
        if self.steps == Some(0) || (self.steps.is_none() && self.epochs == 0) {
            return Err(bad("steps", "training needs at least one step"));
        }
        if self.precision != 32 && self.precision != 64 {
            return Err(bad("precision", format!("{} (use 32 or 64)", self.precision)));
        }
        if matches!(self.data_kind, DataKind::Mnist | DataKind::Cifar10) {
            match &self.data_path {
                None => return Err(bad("data.path", "required for this dataset")),
                Some(p) if !p.exists() => {
                    return Err(bad("data.path", format!("{} does not exist", p.display())))
                }
                _ => {}
            }
        }
        if let Some(p) = &self.init_checkpoint {
            if !p.exists() {
                return Err(bad("init.checkpoint", format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// Whether weight-quantizer scales receive gradient updates.
    pub fn weight_scale_trainable(&self) -> bool {
        match self.weight_scale {
            WeightScaleMode::Auto => !self.tr_enabled,
            WeightScaleMode::Learned => true,
            WeightScaleMode::Fixed => false,
        }
    }

    pub fn augment_enabled(&self) -> bool {
        self.augment.unwrap_or(self.data_kind == DataKind::Cifar10)
    }

    /// Serializes every key; parsing the result yields an equal config.
    pub fn to_text(&self) -> String {
        fn opt<V: ToString>(v: &Option<V>) -> String {
            v.as_ref().map_or_else(|| "none".to_string(), ToString::to_string)
        }
        fn path(v: &Option<PathBuf>) -> String {
            v.as_ref().map_or_else(|| "none".to_string(), |p| p.display().to_string())
        }
        let rule_momentum = match self.tr_rule {
            UpdateRule::Momentum(m) => Some(m),
            _ => None,
        };
        let values: Vec<(&str, String)> = vec![
            ("model", self.model.to_string()),
            ("bits.w", self.bits_w.to_string()),
            ("bits.a", self.bits_a.to_string()),
            ("optimizer", self.optimizer.to_string()),
            ("tr.enabled", self.tr_enabled.to_string()),
            ("tr.lambda", self.tr_lambda.to_string()),
            ("tr.target", opt(&self.tr_target)),
            ("tr.momentum", self.tr_momentum.to_string()),
            ("tr.rule", self.tr_rule.name().to_string()),
            ("tr.rule_momentum", rule_momentum.map_or_else(String::new, |m| m.to_string())),
            ("tr.schedule", self.tr_schedule.to_string()),
            ("tr.step_period", self.tr_step_period.to_string()),
            ("tr.step_divisor", self.tr_step_divisor.to_string()),
            ("tr.gain", opt(&self.tr_gain)),
            ("tr.pinned", self.tr_pinned.to_string()),
            ("lr.initial", self.lr.to_string()),
            ("lr.schedule", self.lr_schedule.to_string()),
            ("lr.step_period", self.lr_step_period.to_string()),
            ("lr.step_divisor", self.lr_step_divisor.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            (
                "quant.weight_scale",
                match self.weight_scale {
                    WeightScaleMode::Auto => "auto",
                    WeightScaleMode::Learned => "learned",
                    WeightScaleMode::Fixed => "fixed",
                }
                .to_string(),
            ),
            ("epochs", self.epochs.to_string()),
            ("steps", opt(&self.steps)),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            (
                "data.kind",
                match self.data_kind {
                    DataKind::Synthetic => "synthetic",
                    DataKind::Mnist => "mnist",
                    DataKind::Cifar10 => "cifar10",
                }
                .to_string(),
            ),
            ("data.path", path(&self.data_path)),
            ("data.seed", self.data_seed.to_string()),
            ("data.train_subset", opt(&self.train_subset)),
            ("data.test_subset", opt(&self.test_subset)),
            ("data.synthetic.classes", self.synthetic_classes.to_string()),
            ("data.synthetic.per_class", self.synthetic_per_class.to_string()),
            ("data.synthetic.test_per_class", self.synthetic_test_per_class.to_string()),
            ("data.synthetic.dim", self.synthetic_dim.to_string()),
            ("data.synthetic.noise", self.synthetic_noise.to_string()),
            ("data.augment", self.augment_enabled().to_string()),
            ("init.checkpoint", path(&self.init_checkpoint)),
            ("precision", self.precision.to_string()),
            ("oracle.check_every", self.oracle_check_every.to_string()),
        ];
        let mut out = String::new();
        for (k, v) in values {
            if v.is_empty() {
                continue;
            }
            let _ = writeln!(out, "{k} = \"{v}\"");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_quotes_and_defaults() {
        let cfg = TrainConfig::parse(
            "# smoke run\nmodel = \"mlp\"\nbits.w = 1 # binary\ntr.enabled = true\ntr.lambda = 2e-3\n\n",
        )
        .unwrap();
        assert_eq!(cfg.model, Arch::Mlp);
        assert_eq!(cfg.bits_w, 1);
        assert!(cfg.tr_enabled);
        assert_eq!(cfg.tr_lambda, 2e-3);
        assert_eq!(cfg.batch_size, 64);
    }

    #[test]
    fn unknown_key_is_named() {
        match TrainConfig::parse("tr.lamda = 1e-3") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "tr.lamda"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(TrainConfig::parse("bits.w = 9").is_err());
        assert!(TrainConfig::parse("tr.momentum = 1.0").is_err());
        assert!(TrainConfig::parse("data.kind = mnist").is_err());
        assert!(TrainConfig::parse("data.kind = mnist\ndata.path = /nonexistent/x").is_err());
        assert!(TrainConfig::parse("just words").is_err());
    }

    #[test]
    fn text_roundtrip() {
        let mut cfg = TrainConfig::default();
        cfg.set("tr.rule_momentum", "0.9").unwrap();
        cfg.set("steps", "123").unwrap();
        cfg.set("tr.target", "0.004").unwrap();
        let back = TrainConfig::parse(&cfg.to_text()).unwrap();
        let mut expect = cfg.clone();
        expect.augment = Some(cfg.augment_enabled());
        assert_eq!(back, expect);
        assert_eq!(CONFIG_KEYS.len(), 39);
    }

    #[test]
    fn weight_scale_follows_tr_in_auto_mode() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.weight_scale_trainable());
        cfg.tr_enabled = true;
        assert!(!cfg.weight_scale_trainable());
        cfg.weight_scale = WeightScaleMode::Learned;
        assert!(cfg.weight_scale_trainable());
    }
}
