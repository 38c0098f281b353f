//! Flat `key = value` experiment configuration.
//!
//! Grammar, one entry per line:
//!
//! ```text
//! line    := blank | comment | entry
//! comment := '#' any*
//! entry   := key '=' value
//! key     := section '.' name      (e.g. `bilevel.t1`), or `method`
//! value   := any* (trimmed; lists are comma separated)
//! ```
//!
//! Unknown keys and duplicate keys are rejected. `method`, `model.rank`,
//! `model.mode` and `train.steps` are required; every other key has a
//! default listed in [`KEYS`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::adapter::{SingularMode, W0Init};
use crate::bilevel::{BiLevelConfig, HypergradMode, OptimizerKind, OptimizerSpec};
use crate::regularizers::{R2Sign, RegWeights};
use crate::tasks::{Activation, BaselineConfig, BaselineForm, LossKind, ModelSpec, TeacherTask};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("duplicate config key `{0}`")]
    DuplicateKey(String),
    #[error("missing required config key `{0}`")]
    Missing(&'static str),
    #[error("bad value for `{key}`: {message}")]
    BadValue { key: String, message: String },
}

/// Every accepted key with its default; `None` marks a required key.
pub const KEYS: &[(&str, Option<&str>)] = &[
    ("method", None),
    ("task.d_in", Some("32")),
    ("task.d_out", Some("32")),
    ("task.n_train", Some("32")),
    ("task.n_test", Some("256")),
    ("task.noise_std", Some("0.5")),
    ("task.teacher_rank", Some("4")),
    ("model.hidden", Some("32")),
    ("model.rank", None),
    ("model.alpha", Some("8")),
    ("model.mode", None),
    ("model.w0_gain", Some("1")),
    ("model.activation", Some("tanh")),
    ("model.loss", Some("mse")),
    ("train.steps", None),
    ("split.lower_fraction", Some("0.8")),
    ("bilevel.t1", Some("1")),
    ("bilevel.t2", Some("1")),
    ("bilevel.hypergrad", Some("unrolled_exact")),
    ("bilevel.gamma1", Some("0.1")),
    ("bilevel.gamma2", Some("0")),
    ("bilevel.r2_sign", Some("entropy")),
    ("bilevel.lower_batch", Some("0")),
    ("bilevel.upper_batch", Some("0")),
    ("bilevel.grad_clip", Some("0")),
    ("lower.optimizer", Some("sgd")),
    ("lower.lr", Some("0.2")),
    ("lower.weight_decay", Some("0")),
    ("upper.optimizer", Some("adamw")),
    ("upper.lr", Some("0.05")),
    ("upper.weight_decay", Some("0")),
    ("lora.optimizer", Some("adamw")),
    ("lora.lr", Some("0.01")),
    ("lora.weight_decay", Some("0")),
    ("lora.batch", Some("0")),
    ("lora.form", Some("pseudo_svd")),
    ("run.seeds", Some("1")),
    ("run.out", Some("")),
    ("run.snapshot_every", Some("10")),
    ("gradcheck.widths", Some("3,4,3")),
    ("gradcheck.rank", Some("2")),
    ("gradcheck.samples", Some("6")),
    ("gradcheck.trials", Some("50")),
    ("gradcheck.lr", Some("0.05")),
    ("gradcheck.inject_fault", Some("none")),
];

fn known(key: &str) -> bool {
    KEYS.iter().any(|(k, _)| *k == key)
}

/// Raw key/value pairs as written, before defaults and typing.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawConfig {
    entries: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut raw = Self::default();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: idx + 1,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            let key = key.trim();
            if !known(key) {
                return Err(ConfigError::UnknownKey(key.to_string()));
            }
            if raw.entries.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(ConfigError::DuplicateKey(key.to_string()));
            }
        }
        Ok(raw)
    }

    /// Overrides replace file values; the key must still be a known one.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        if !known(key) {
            return Err(ConfigError::UnknownKey(key.to_string()));
        }
        self.entries.insert(key.to_string(), value.trim().to_string());
        Ok(())
    }

    /// Parses a `key=value` override.
    pub fn apply_override(&mut self, spec: &str) -> Result<(), ConfigError> {
        let (k, v) = spec.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: 0,
            message: format!("override `{spec}` is not key=value"),
        })?;
        self.set(k.trim(), v)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn resolve(&self) -> Result<ExperimentConfig, ConfigError> {
        ExperimentConfig::from_raw(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Lora,
    Bilora,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Lora => "lora",
            Self::Bilora => "bilora",
        }
    }
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "lora" => Ok(Self::Lora),
            "bilora" => Ok(Self::Bilora),
            other => Err(format!("unknown method `{other}` (expected lora or bilora)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultInjection {
    None,
    /// Flips the sign of the analytic adapter gradient.
    AdapterSign,
    /// Flips the sign of the unrolled correction term of the hypergradient.
    HypergradSign,
}

impl FromStr for FaultInjection {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "adapter_sign" => Ok(Self::AdapterSign),
            "hypergrad_sign" => Ok(Self::HypergradSign),
            other => Err(format!("unknown fault `{other}` (expected none, adapter_sign or hypergrad_sign)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckSettings {
    pub widths: Vec<usize>,
    pub rank: usize,
    pub samples: usize,
    pub trials: usize,
    /// SGD step of the unroll in the hypergradient check.
    pub lr: f64,
    pub inject_fault: FaultInjection,
}

/// Fully typed configuration of one experiment (all seeds).
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub method: Method,
    pub task: TeacherTask,
    /// `widths` already includes the task's input and output sizes.
    pub model: ModelSpec,
    pub steps: usize,
    pub lower_fraction: f64,
    /// `global_steps` equals `steps`; `seed` is replaced per run.
    pub bilevel: BiLevelConfig,
    /// `epochs` equals `steps`; `seed` is replaced per run.
    pub lora: BaselineConfig,
    pub seeds: Vec<u64>,
    pub out: Option<PathBuf>,
    pub snapshot_every: usize,
    pub gradcheck: GradcheckSettings,
    resolved: BTreeMap<String, String>,
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::BadValue {
        key: key.to_string(),
        message: format!("`{value}`: {e}"),
    })
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: fmt::Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|s| parse_value(key, s.trim())).collect()
}

fn optimizer(kind: OptimizerKind, lr: f64, weight_decay: f64) -> OptimizerSpec {
    OptimizerSpec { kind, lr, weight_decay }
}

impl ExperimentConfig {
    fn from_raw(raw: &RawConfig) -> Result<Self, ConfigError> {
        let mut resolved = BTreeMap::new();
        for (key, default) in KEYS {
            let value = match (raw.get(key), default) {
                (Some(v), _) => v.to_string(),
                (None, Some(d)) => d.to_string(),
                (None, None) => return Err(ConfigError::Missing(key)),
            };
            resolved.insert(key.to_string(), value);
        }
        let s = |k: &str| resolved[k].as_str();
        let bad = |key: &str, message: String| ConfigError::BadValue {
            key: key.to_string(),
            message,
        };
        let usize_ = |k: &str| parse_value::<usize>(k, s(k));
        let f64_ = |k: &str| -> Result<f64, ConfigError> {
            let x = parse_value::<f64>(k, s(k))?;
            if x.is_finite() {
                Ok(x)
            } else {
                Err(bad(k, "must be finite".into()))
            }
        };
        let nonneg = |k: &str| -> Result<f64, ConfigError> {
            let x = f64_(k)?;
            if x >= 0.0 {
                Ok(x)
            } else {
                Err(bad(k, format!("must be >= 0, got {x}")))
            }
        };
        let positive = |k: &str| -> Result<usize, ConfigError> {
            let x = usize_(k)?;
            if x > 0 {
                Ok(x)
            } else {
                Err(bad(k, "must be >= 1".into()))
            }
        };

        let task = TeacherTask {
            d_in: positive("task.d_in")?,
            d_out: positive("task.d_out")?,
            n_train: positive("task.n_train")?,
            n_test: positive("task.n_test")?,
            noise_std: nonneg("task.noise_std")?,
            teacher_rank: positive("task.teacher_rank")?,
        };
        let hidden: Vec<usize> = parse_list("model.hidden", s("model.hidden"))?;
        if hidden.contains(&0) {
            return Err(bad("model.hidden", "widths must be >= 1".into()));
        }
        let mut widths = vec![task.d_in];
        widths.extend(&hidden);
        widths.push(task.d_out);
        let gain = nonneg("model.w0_gain")?;
        let model = ModelSpec {
            widths,
            rank: positive("model.rank")?,
            alpha: f64_("model.alpha")?,
            mode: parse_value("model.mode", s("model.mode"))?,
            w0_init: if gain > 0.0 { W0Init::Gaussian(gain) } else { W0Init::Zero },
            activation: parse_value::<Activation>("model.activation", s("model.activation"))?,
            loss: parse_value::<LossKind>("model.loss", s("model.loss"))?,
        };
        if model.loss == LossKind::SoftmaxCrossEntropy {
            return Err(bad(
                "model.loss",
                "the teacher task is a regression; use mse".into(),
            ));
        }
        let steps = positive("train.steps")?;
        let lower_fraction = f64_("split.lower_fraction")?;
        if !(lower_fraction > 0.0 && lower_fraction <= 1.0) {
            return Err(bad("split.lower_fraction", format!("must be in (0, 1], got {lower_fraction}")));
        }
        let clip = nonneg("bilevel.grad_clip")?;
        let bilevel = BiLevelConfig {
            t1: positive("bilevel.t1")?,
            t2: positive("bilevel.t2")?,
            lower: optimizer(
                parse_value("lower.optimizer", s("lower.optimizer"))?,
                nonneg("lower.lr")?,
                nonneg("lower.weight_decay")?,
            ),
            upper: optimizer(
                parse_value("upper.optimizer", s("upper.optimizer"))?,
                nonneg("upper.lr")?,
                nonneg("upper.weight_decay")?,
            ),
            weights: RegWeights::new(nonneg("bilevel.gamma1")?, nonneg("bilevel.gamma2")?)
                .map_err(|e| bad("bilevel.gamma1", e.to_string()))?,
            r2_sign: parse_value::<R2Sign>("bilevel.r2_sign", s("bilevel.r2_sign"))?,
            hypergrad: parse_value::<HypergradMode>("bilevel.hypergrad", s("bilevel.hypergrad"))?,
            global_steps: steps,
            lower_batch: usize_("bilevel.lower_batch")?,
            upper_batch: usize_("bilevel.upper_batch")?,
            grad_clip: (clip > 0.0).then_some(clip),
            seed: 0,
        };
        let method: Method = parse_value("method", s("method"))?;
        if method == Method::Bilora && model.mode == SingularMode::RealValue && bilevel.weights.gamma2 > 0.0 {
            return Err(bad(
                "bilevel.gamma2",
                "the entropy penalty needs values in (0, 1); use softmax or approx_binary".into(),
            ));
        }
        if method == Method::Bilora {
            bilevel.validate().map_err(|e| bad("bilevel", e.to_string()))?;
        }
        let form = match s("lora.form") {
            "pseudo_svd" => BaselineForm::PseudoSvd,
            "two_factor" => BaselineForm::TwoFactor,
            other => return Err(bad("lora.form", format!("`{other}` (expected pseudo_svd or two_factor)"))),
        };
        let lora = BaselineConfig {
            optimizer: optimizer(
                parse_value("lora.optimizer", s("lora.optimizer"))?,
                nonneg("lora.lr")?,
                nonneg("lora.weight_decay")?,
            ),
            epochs: steps,
            batch: usize_("lora.batch")?,
            form,
            grad_clip: None,
            seed: 0,
        };
        if method == Method::Lora && model.mode != SingularMode::RealValue {
            return Err(bad("model.mode", "the lora method needs real_value".into()));
        }
        let seeds: Vec<u64> = parse_list("run.seeds", s("run.seeds"))?;
        if seeds.is_empty() {
            return Err(bad("run.seeds", "at least one seed is required".into()));
        }
        let gradcheck = GradcheckSettings {
            widths: parse_list("gradcheck.widths", s("gradcheck.widths"))?,
            rank: positive("gradcheck.rank")?,
            samples: positive("gradcheck.samples")?,
            trials: positive("gradcheck.trials")?,
            lr: nonneg("gradcheck.lr")?,
            inject_fault: parse_value("gradcheck.inject_fault", s("gradcheck.inject_fault"))?,
        };
        if gradcheck.widths.len() < 2 || gradcheck.widths.contains(&0) {
            return Err(bad("gradcheck.widths", "need at least two positive widths".into()));
        }
        let out = Some(s("run.out")).filter(|o| !o.is_empty()).map(PathBuf::from);
        Ok(Self {
            method,
            task,
            model,
            steps,
            lower_fraction,
            bilevel,
            lora,
            seeds,
            out,
            snapshot_every: usize_("run.snapshot_every")?,
            gradcheck,
            resolved,
        })
    }

    /// Value of `key` after defaults were applied.
    pub fn value(&self, key: &str) -> Option<&str> {
        self.resolved.get(key).map(String::as_str)
    }

    /// Every key with its resolved value, in [`KEYS`] order. Parsing this
    /// text yields the same configuration.
    pub fn echo(&self) -> String {
        let mut out = String::new();
        for (key, _) in KEYS {
            out.push_str(&format!("{key} = {}\n", self.resolved[*key]));
        }
        out
    }
}

impl FromStr for ExperimentConfig {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RawConfig::parse(s)?.resolve()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "method = bilora\nmodel.rank = 4\nmodel.mode = softmax\ntrain.steps = 10\n";

    #[test]
    fn minimal_config_resolves_with_defaults() {
        let c: ExperimentConfig = MINIMAL.parse().unwrap();
        assert_eq!(c.method, Method::Bilora);
        assert_eq!(c.model.widths, vec![32, 32, 32]);
        assert_eq!(c.bilevel.global_steps, 10);
        assert_eq!(c.lora.epochs, 10);
        assert_eq!(c.seeds, vec![1]);
        assert_eq!(c.out, None);
        assert_eq!(c.value("bilevel.t1"), Some("1"));
    }

    #[test]
    fn missing_required_key_is_named() {
        for key in ["method", "model.rank", "model.mode", "train.steps"] {
            let text: String = MINIMAL.lines().filter(|l| !l.starts_with(key)).map(|l| format!("{l}\n")).collect();
            assert_eq!(text.parse::<ExperimentConfig>().unwrap_err(), ConfigError::Missing(key));
        }
    }

    #[test]
    fn typos_and_duplicates_rejected() {
        let typo = format!("{MINIMAL}bilevel.gama1 = 0.1\n");
        assert_eq!(
            typo.parse::<ExperimentConfig>().unwrap_err(),
            ConfigError::UnknownKey("bilevel.gama1".into())
        );
        let dup = format!("{MINIMAL}method = lora\n");
        assert!(matches!(dup.parse::<ExperimentConfig>(), Err(ConfigError::DuplicateKey(_))));
        assert!(matches!(
            "just words".parse::<ExperimentConfig>(),
            Err(ConfigError::Syntax { line: 1, .. })
        ));
    }

    #[test]
    fn bad_values_rejected() {
        for extra in [
            "bilevel.t1 = 0",
            "split.lower_fraction = 1.5",
            "lower.optimizer = adamw",
            "run.seeds =",
            "model.hidden = 4,0",
            "upper.lr = -1",
            "upper.lr = nan",
        ] {
            let text = format!("{MINIMAL}{extra}\n");
            assert!(matches!(text.parse::<ExperimentConfig>(), Err(ConfigError::BadValue { .. })), "{extra}");
        }
        let real_entropy = format!("{}bilevel.gamma2 = 0.1\n", MINIMAL.replace("softmax", "real_value"));
        assert!(matches!(real_entropy.parse::<ExperimentConfig>(), Err(ConfigError::BadValue { .. })));
        let lora_softmax = MINIMAL.replace("bilora", "lora");
        assert!(lora_softmax.parse::<ExperimentConfig>().is_err());
    }

    #[test]
    fn echo_reparses_to_same_config() {
        let mut raw = RawConfig::parse(MINIMAL).unwrap();
        raw.apply_override("bilevel.gamma2=0.05").unwrap();
        raw.apply_override("run.seeds = 3,4").unwrap();
        let c = raw.resolve().unwrap();
        let again: ExperimentConfig = c.echo().parse().unwrap();
        assert_eq!(again, c);
        assert_eq!(again.echo(), c.echo());
        assert!(raw.apply_override("nope=1").is_err());
    }
}
