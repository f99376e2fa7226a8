//! Flat `key = value` experiment configuration.
//!
//! Grammar, one entry per line:
//!
//! ```text
//! line    := blank | comment | entry
//! comment := '#' anything
//! entry   := key ws* '=' ws* value ws* ('#' anything)?
//! key     := [a-z_][a-z0-9_]*
//! value   := integer | float | 'true' | 'false' | identifier | list
//! list    := integer (',' integer)*
//! ```
//!
//! Keys are the field names of [`ExperimentConfig`]; unknown keys and
//! duplicate keys are errors. Omitted keys keep their defaults.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::alignment::{AlignMode, TargetKind};
use crate::data::{self, LabelMode, PointDataset};
use crate::error::{Error, Result};
use crate::ssl::{AugmentConfig, TrainConfig};
use crate::weighting::WeightingScheme;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    TwoMoons,
    ImbalancedBlobs,
}

impl FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_moons" => Ok(Self::TwoMoons),
            "imbalanced_blobs" => Ok(Self::ImbalancedBlobs),
            other => Err(Error::Config(format!(
                "dataset must be two_moons or imbalanced_blobs; got `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for DatasetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::TwoMoons => "two_moons",
            Self::ImbalancedBlobs => "imbalanced_blobs",
        })
    }
}

/// Every configurable knob of one experiment, flat.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    // weighting
    pub scheme: String,
    pub lambda_max: f64,
    pub warmup_steps: u64,
    pub tau: f64,
    pub tau_base: f64,
    pub laplace_mu: f64,
    pub laplace_b: f64,
    pub n_sigma: u32,
    pub per_class_stats: bool,
    // alignment
    pub ua_target: TargetKind,
    pub align_mode: AlignMode,
    // training
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    pub momentum: f64,
    pub model_ema_momentum: f64,
    pub total_steps: u64,
    pub learning_rate: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub hidden_dims: Vec<usize>,
    pub weak_noise: f64,
    pub strong_noise: f64,
    pub strong_scale_min: f64,
    pub strong_scale_max: f64,
    pub seed: u64,
    pub eval_interval: u64,
    pub full_metrics: bool,
    // data
    pub dataset: DatasetKind,
    pub n_per_moon: usize,
    pub noise: f64,
    pub num_classes: usize,
    pub n_head: usize,
    pub gamma: f64,
    pub n_labels: usize,
    pub label_mode: LabelMode,
    pub data_seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            scheme: "truncated_gaussian".into(),
            lambda_max: 1.0,
            warmup_steps: 1000,
            tau: 0.95,
            tau_base: 0.95,
            laplace_mu: 1.0,
            laplace_b: 0.3,
            n_sigma: 2,
            per_class_stats: t.per_class_stats,
            ua_target: t.ua_target,
            align_mode: t.align_mode,
            labeled_batch: t.labeled_batch,
            unlabeled_batch: t.unlabeled_batch,
            momentum: t.momentum,
            model_ema_momentum: t.model_ema_momentum,
            total_steps: t.total_steps,
            learning_rate: t.learning_rate,
            sgd_momentum: t.sgd_momentum,
            weight_decay: t.weight_decay,
            hidden_dims: t.hidden_dims,
            weak_noise: t.augment.weak_noise,
            strong_noise: t.augment.strong_noise,
            strong_scale_min: t.augment.strong_scale_range.0,
            strong_scale_max: t.augment.strong_scale_range.1,
            seed: t.seed,
            eval_interval: t.eval_interval,
            full_metrics: t.full_metrics,
            dataset: DatasetKind::TwoMoons,
            n_per_moon: 500,
            noise: 0.1,
            num_classes: 2,
            n_head: 500,
            gamma: 10.0,
            n_labels: 4,
            label_mode: LabelMode::Balanced,
            data_seed: 0,
        }
    }
}

/// All accepted keys, in canonical order.
pub const KEYS: &[&str] = &[
    "scheme",
    "lambda_max",
    "warmup_steps",
    "tau",
    "tau_base",
    "laplace_mu",
    "laplace_b",
    "n_sigma",
    "per_class_stats",
    "ua_target",
    "align_mode",
    "labeled_batch",
    "unlabeled_batch",
    "momentum",
    "model_ema_momentum",
    "total_steps",
    "learning_rate",
    "sgd_momentum",
    "weight_decay",
    "hidden_dims",
    "weak_noise",
    "strong_noise",
    "strong_scale_min",
    "strong_scale_max",
    "seed",
    "eval_interval",
    "full_metrics",
    "dataset",
    "n_per_moon",
    "noise",
    "num_classes",
    "n_head",
    "gamma",
    "n_labels",
    "label_mode",
    "data_seed",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("bad value `{value}` for `{key}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` expects true or false, got `{value}`"))),
    }
}

fn parse_enum<T: FromStr<Err = Error>>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|e: Error| match e {
        Error::Config(m) => Error::Config(m),
        other => Error::Config(format!("`{key}`: {other}")),
    })
}

impl ExperimentConfig {
    /// Assigns one key. Unknown keys are rejected by name.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "scheme" => {
                scheme_from_name(v, self)?;
                self.scheme = v.to_string();
            }
            "lambda_max" => self.lambda_max = parse_value(key, v)?,
            "warmup_steps" => self.warmup_steps = parse_value(key, v)?,
            "tau" => self.tau = parse_value(key, v)?,
            "tau_base" => self.tau_base = parse_value(key, v)?,
            "laplace_mu" => self.laplace_mu = parse_value(key, v)?,
            "laplace_b" => self.laplace_b = parse_value(key, v)?,
            "n_sigma" => self.n_sigma = parse_value(key, v)?,
            "per_class_stats" => self.per_class_stats = parse_bool(key, v)?,
            "ua_target" => self.ua_target = parse_enum(key, v)?,
            "align_mode" => self.align_mode = parse_enum(key, v)?,
            "labeled_batch" => self.labeled_batch = parse_value(key, v)?,
            "unlabeled_batch" => self.unlabeled_batch = parse_value(key, v)?,
            "momentum" => self.momentum = parse_value(key, v)?,
            "model_ema_momentum" => self.model_ema_momentum = parse_value(key, v)?,
            "total_steps" => self.total_steps = parse_value(key, v)?,
            "learning_rate" => self.learning_rate = parse_value(key, v)?,
            "sgd_momentum" => self.sgd_momentum = parse_value(key, v)?,
            "weight_decay" => self.weight_decay = parse_value(key, v)?,
            "hidden_dims" => {
                self.hidden_dims = if v.is_empty() {
                    Vec::new()
                } else {
                    v.split(',')
                        .map(|d| parse_value(key, d.trim()))
                        .collect::<Result<_>>()?
                }
            }
            "weak_noise" => self.weak_noise = parse_value(key, v)?,
            "strong_noise" => self.strong_noise = parse_value(key, v)?,
            "strong_scale_min" => self.strong_scale_min = parse_value(key, v)?,
            "strong_scale_max" => self.strong_scale_max = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "eval_interval" => self.eval_interval = parse_value(key, v)?,
            "full_metrics" => self.full_metrics = parse_bool(key, v)?,
            "dataset" => self.dataset = parse_enum(key, v)?,
            "n_per_moon" => self.n_per_moon = parse_value(key, v)?,
            "noise" => self.noise = parse_value(key, v)?,
            "num_classes" => self.num_classes = parse_value(key, v)?,
            "n_head" => self.n_head = parse_value(key, v)?,
            "gamma" => self.gamma = parse_value(key, v)?,
            "n_labels" => self.n_labels = parse_value(key, v)?,
            "label_mode" => self.label_mode = parse_enum(key, v)?,
            "data_seed" => self.data_seed = parse_value(key, v)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "scheme" => self.scheme.clone(),
            "lambda_max" => self.lambda_max.to_string(),
            "warmup_steps" => self.warmup_steps.to_string(),
            "tau" => self.tau.to_string(),
            "tau_base" => self.tau_base.to_string(),
            "laplace_mu" => self.laplace_mu.to_string(),
            "laplace_b" => self.laplace_b.to_string(),
            "n_sigma" => self.n_sigma.to_string(),
            "per_class_stats" => self.per_class_stats.to_string(),
            "ua_target" => self.ua_target.to_string(),
            "align_mode" => self.align_mode.to_string(),
            "labeled_batch" => self.labeled_batch.to_string(),
            "unlabeled_batch" => self.unlabeled_batch.to_string(),
            "momentum" => self.momentum.to_string(),
            "model_ema_momentum" => self.model_ema_momentum.to_string(),
            "total_steps" => self.total_steps.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "sgd_momentum" => self.sgd_momentum.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "hidden_dims" => self
                .hidden_dims
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(","),
            "weak_noise" => self.weak_noise.to_string(),
            "strong_noise" => self.strong_noise.to_string(),
            "strong_scale_min" => self.strong_scale_min.to_string(),
            "strong_scale_max" => self.strong_scale_max.to_string(),
            "seed" => self.seed.to_string(),
            "eval_interval" => self.eval_interval.to_string(),
            "full_metrics" => self.full_metrics.to_string(),
            "dataset" => self.dataset.to_string(),
            "n_per_moon" => self.n_per_moon.to_string(),
            "noise" => self.noise.to_string(),
            "num_classes" => self.num_classes.to_string(),
            "n_head" => self.n_head.to_string(),
            "gamma" => self.gamma.to_string(),
            "n_labels" => self.n_labels.to_string(),
            "label_mode" => self.label_mode.to_string(),
            "data_seed" => self.data_seed.to_string(),
            _ => return None,
        })
    }

    /// Parses config text on top of the defaults.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}: line {}: expected `key = value`, got `{line}`",
                    origin.display(),
                    i + 1
                ))
            })?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("duplicate key `{key}` on line {}", i + 1)));
            }
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text, path)
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Canonical text form: every key, fixed order. Parsing it yields `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            writeln!(s, "{k} = {}", self.get(k).expect("every listed key has a value")).unwrap();
        }
        s
    }

    pub fn weighting_scheme(&self) -> Result<WeightingScheme> {
        scheme_from_name(&self.scheme, self)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            scheme: self.weighting_scheme()?,
            ua_target: self.ua_target,
            align_mode: self.align_mode,
            labeled_batch: self.labeled_batch,
            unlabeled_batch: self.unlabeled_batch,
            momentum: self.momentum,
            model_ema_momentum: self.model_ema_momentum,
            total_steps: self.total_steps,
            learning_rate: self.learning_rate,
            sgd_momentum: self.sgd_momentum,
            weight_decay: self.weight_decay,
            hidden_dims: self.hidden_dims.clone(),
            augment: AugmentConfig {
                weak_noise: self.weak_noise,
                strong_noise: self.strong_noise,
                strong_scale_range: (self.strong_scale_min, self.strong_scale_max),
            },
            per_class_stats: self.per_class_stats,
            seed: self.seed,
            eval_interval: self.eval_interval,
            full_metrics: self.full_metrics,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn generate(&self, seed: u64) -> Result<PointDataset> {
        match self.dataset {
            DatasetKind::TwoMoons => data::two_moons(self.n_per_moon, self.noise, seed),
            DatasetKind::ImbalancedBlobs => data::imbalanced_blobs(self.num_classes, self.n_head, self.gamma, seed),
        }
    }

    /// Training set with `n_labels` marked, and a held-out evaluation set
    /// from the same generator.
    pub fn datasets(&self) -> Result<(PointDataset, PointDataset)> {
        let wrap = |e: Error| match e {
            Error::InvalidArgument(m) => Error::Config(m),
            other => other,
        };
        let train = self.generate(self.data_seed).map_err(wrap)?;
        let train = data::select_labels(train, self.n_labels, self.label_mode, self.seed).map_err(wrap)?;
        let eval = self.generate(self.data_seed.wrapping_add(1_000_003)).map_err(wrap)?;
        Ok((train, eval))
    }
}

fn scheme_from_name(name: &str, c: &ExperimentConfig) -> Result<WeightingScheme> {
    let lambda_max = c.lambda_max;
    let scheme = match name {
        "fixed" => WeightingScheme::Fixed { lambda_max },
        "rampup" => WeightingScheme::RampUp {
            lambda_max,
            warmup_steps: c.warmup_steps,
        },
        "threshold" => WeightingScheme::Threshold { lambda_max, tau: c.tau },
        "classwise_threshold" => WeightingScheme::ClasswiseThreshold {
            lambda_max,
            tau_base: c.tau_base,
            per_class_counts: vec![0; c.num_classes.max(2)],
        },
        "linear" => WeightingScheme::Linear { lambda_max },
        "quadratic" => WeightingScheme::Quadratic { lambda_max },
        "laplacian" => WeightingScheme::Laplacian {
            lambda_max,
            mu: c.laplace_mu,
            b: c.laplace_b,
        },
        "truncated_laplacian" => WeightingScheme::TruncatedLaplacian {
            lambda_max,
            n_sigma: c.n_sigma,
        },
        "truncated_gaussian" => WeightingScheme::TruncatedGaussian {
            lambda_max,
            n_sigma: c.n_sigma,
        },
        other => {
            return Err(Error::Config(format!(
                "unknown scheme `{other}`; expected fixed, rampup, threshold, classwise_threshold, \
                 linear, quadratic, laplacian, truncated_laplacian or truncated_gaussian"
            )))
        }
    };
    Ok(scheme)
}
