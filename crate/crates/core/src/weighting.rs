//! Sample-weighting functions for pseudo-labels.
//!
//! Every function maps the confidence `max(p)` of an unlabeled prediction to a
//! loss weight in `[0, lambda_max]`. The truncated Gaussian keeps `lambda_max`
//! above the running mean confidence and decays as a Gaussian below it, with
//! mean and variance tracked by [`GaussianStats`].

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::metrics::BatchOutcome;

/// Lower bound on the effective variance used in the Gaussian exponent.
pub const VAR_FLOOR: f64 = 1e-12;

/// EMA estimates of the mean and (unbiased) variance of batch confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    mu_hat: f64,
    var_hat: f64,
    momentum: f64,
    step: u64,
}

impl GaussianStats {
    /// Fresh estimates: mean `1/C`, variance `1.0`.
    pub fn new(num_classes: usize, momentum: f64) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::invalid("num_classes must be positive"));
        }
        Self::from_parts(1.0 / num_classes as f64, 1.0, momentum, 0)
    }

    pub fn from_parts(mu_hat: f64, var_hat: f64, momentum: f64, step: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&mu_hat) {
            return Err(Error::invalid(format!("mu_hat {mu_hat} outside [0, 1]")));
        }
        if !(var_hat >= 0.0 && var_hat.is_finite()) {
            return Err(Error::invalid(format!("var_hat {var_hat} must be finite and non-negative")));
        }
        check_momentum(momentum)?;
        Ok(Self {
            mu_hat,
            var_hat,
            momentum,
            step,
        })
    }

    pub fn mu_hat(&self) -> f64 {
        self.mu_hat
    }

    pub fn var_hat(&self) -> f64 {
        self.var_hat
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Folds one unlabeled batch of confidences into the running estimates.
    ///
    /// The batch variance is the population variance rescaled by
    /// `B / (B - 1)`, so batches need at least two entries.
    pub fn update(&mut self, confidences: &[f64]) -> Result<()> {
        let (mean, var) = batch_moments(confidences)?;
        let b = confidences.len() as f64;
        let m = self.momentum;
        self.mu_hat = (m * self.mu_hat + (1.0 - m) * mean).clamp(0.0, 1.0);
        self.var_hat = (m * self.var_hat + (1.0 - m) * (b / (b - 1.0)) * var).max(0.0);
        self.step += 1;
        Ok(())
    }

    pub fn updated(&self, confidences: &[f64]) -> Result<Self> {
        let mut next = self.clone();
        next.update(confidences)?;
        Ok(next)
    }
}

fn check_momentum(momentum: f64) -> Result<()> {
    // m = 1 freezes the estimate; allowed for ablations even though defaults sit below it.
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::invalid(format!("momentum {momentum} outside [0, 1]")));
    }
    Ok(())
}

fn check_confidence(confidence: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&confidence) {
        return Err(Error::invalid(format!("confidence {confidence} outside [0, 1]")));
    }
    Ok(())
}

fn check_lambda(lambda_max: f64) -> Result<()> {
    if !(lambda_max > 0.0 && lambda_max.is_finite()) {
        return Err(Error::invalid(format!("lambda_max {lambda_max} must be positive")));
    }
    Ok(())
}

fn check_n_sigma(n_sigma: u32) -> Result<()> {
    if !(1..=3).contains(&n_sigma) {
        return Err(Error::invalid(format!("n_sigma {n_sigma} must be 1, 2 or 3")));
    }
    Ok(())
}

/// Mean and population variance of a batch of confidences (length ≥ 2).
fn batch_moments(confidences: &[f64]) -> Result<(f64, f64)> {
    if confidences.len() < 2 {
        return Err(Error::invalid(format!(
            "confidence batch needs at least 2 entries, got {}",
            confidences.len()
        )));
    }
    for &c in confidences {
        check_confidence(c)?;
    }
    let n = confidences.len() as f64;
    let mean = confidences.iter().sum::<f64>() / n;
    let var = confidences.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var))
}

/// Variance actually used in the exponent: `var_hat / n_sigma^2`, floored.
pub fn effective_variance(var_hat: f64, n_sigma: u32) -> f64 {
    (var_hat / f64::from(n_sigma * n_sigma)).max(VAR_FLOOR)
}

pub fn truncated_gaussian_weight(
    confidence: f64,
    stats: &GaussianStats,
    lambda_max: f64,
    n_sigma: u32,
) -> Result<f64> {
    check_confidence(confidence)?;
    check_lambda(lambda_max)?;
    check_n_sigma(n_sigma)?;
    if confidence >= stats.mu_hat {
        return Ok(lambda_max);
    }
    let var = effective_variance(stats.var_hat, n_sigma);
    let d = confidence - stats.mu_hat;
    Ok(lambda_max * (-(d * d) / (2.0 * var)).exp())
}

/// Hard confidence threshold. `tau = 0` accepts everything and `tau > 1`
/// accepts nothing.
pub fn step_weight(confidence: f64, tau: f64, lambda_max: f64) -> Result<f64> {
    check_tau(tau)?;
    check_lambda(lambda_max)?;
    Ok(if confidence >= tau { lambda_max } else { 0.0 })
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!("tau {tau} must be finite and non-negative")));
    }
    Ok(())
}

/// `lambda_max * min(t / T, 1)`.
pub fn rampup_weight(step: u64, warmup_steps: u64, lambda_max: f64) -> Result<f64> {
    if warmup_steps == 0 {
        return Err(Error::invalid("warmup_steps must be positive"));
    }
    check_lambda(lambda_max)?;
    Ok(lambda_max * (step as f64 / warmup_steps as f64).min(1.0))
}

pub fn fixed_weight(lambda_max: f64) -> f64 {
    lambda_max
}

/// Alternative weighting functions compared against the truncated Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AblationKind {
    /// `max(p)`
    Linear,
    /// `1 - (max(p) - 1)^2`
    Quadratic,
    /// `exp(-|max(p) - mu| / b)` with fixed `mu`, `b`.
    Laplacian { mu: f64, b: f64 },
    /// Laplacian decay below `mu_hat` with `b = sqrt(var_hat) / n_sigma`, flat above.
    TruncatedLaplacian { n_sigma: u32 },
}

impl AblationKind {
    pub const DEFAULT_LAPLACE_MU: f64 = 1.0;
    pub const DEFAULT_LAPLACE_B: f64 = 0.3;
}

impl FromStr for AblationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "quadratic" => Ok(Self::Quadratic),
            "laplacian" => Ok(Self::Laplacian {
                mu: Self::DEFAULT_LAPLACE_MU,
                b: Self::DEFAULT_LAPLACE_B,
            }),
            "truncated_laplacian" => Ok(Self::TruncatedLaplacian { n_sigma: 2 }),
            other => Err(Error::invalid(format!("unknown weighting function kind `{other}`"))),
        }
    }
}

pub fn ablation_weight(
    kind: AblationKind,
    confidence: f64,
    lambda_max: f64,
    stats: &GaussianStats,
) -> Result<f64> {
    check_confidence(confidence)?;
    check_lambda(lambda_max)?;
    let unit = match kind {
        AblationKind::Linear => confidence,
        AblationKind::Quadratic => 1.0 - (confidence - 1.0).powi(2),
        AblationKind::Laplacian { mu, b } => {
            check_laplace(mu, b)?;
            (-(confidence - mu).abs() / b).exp()
        }
        AblationKind::TruncatedLaplacian { n_sigma } => {
            check_n_sigma(n_sigma)?;
            if confidence >= stats.mu_hat {
                1.0
            } else {
                let b = (stats.var_hat.sqrt() / f64::from(n_sigma)).max(VAR_FLOOR.sqrt());
                (-(stats.mu_hat - confidence) / b).exp()
            }
        }
    };
    Ok(lambda_max * unit)
}

fn check_laplace(mu: f64, b: f64) -> Result<()> {
    if !(mu > 0.0 && mu <= 1.0) {
        return Err(Error::invalid(format!("laplacian mu {mu} outside (0, 1]")));
    }
    if !(b > 0.0 && b.is_finite()) {
        return Err(Error::invalid(format!("laplacian b {b} must be positive")));
    }
    Ok(())
}

/// Per-class threshold `tau_base * count_c / max_c' count_c'`, or `tau_base`
/// while every count is still zero.
pub fn classwise_threshold(tau_base: f64, counts: &[u64], class: usize) -> Result<f64> {
    let count = *counts.get(class).ok_or(Error::ClassIndex {
        index: class,
        num_classes: counts.len(),
    })?;
    let max = counts.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return Ok(tau_base);
    }
    Ok(tau_base * (count as f64 / max as f64))
}

/// Weight under [`WeightingScheme::ClasswiseThreshold`]; other schemes are rejected.
pub fn classwise_threshold_weight(
    confidence: f64,
    pseudo_class: usize,
    scheme: &WeightingScheme,
) -> Result<f64> {
    let WeightingScheme::ClasswiseThreshold {
        lambda_max,
        tau_base,
        per_class_counts,
    } = scheme
    else {
        return Err(Error::invalid(format!("expected classwise_threshold scheme, got {}", scheme.name())));
    };
    let tau = classwise_threshold(*tau_base, per_class_counts, pseudo_class)?;
    Ok(if confidence >= tau { *lambda_max } else { 0.0 })
}

/// Adds one to `count_c` for every outcome predicted as `c` with confidence
/// at or above `tau_base`. No-op for other schemes.
pub fn update_class_counts(outcomes: &[BatchOutcome], scheme: &mut WeightingScheme) -> Result<()> {
    if let WeightingScheme::ClasswiseThreshold {
        tau_base,
        per_class_counts,
        ..
    } = scheme
    {
        for o in outcomes {
            let n = per_class_counts.len();
            let slot = per_class_counts.get_mut(o.pseudo_label).ok_or(Error::ClassIndex {
                index: o.pseudo_label,
                num_classes: n,
            })?;
            if o.confidence >= *tau_base {
                *slot += 1;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum WeightingScheme {
    Fixed {
        lambda_max: f64,
    },
    RampUp {
        lambda_max: f64,
        warmup_steps: u64,
    },
    Threshold {
        lambda_max: f64,
        tau: f64,
    },
    ClasswiseThreshold {
        lambda_max: f64,
        tau_base: f64,
        per_class_counts: Vec<u64>,
    },
    Linear {
        lambda_max: f64,
    },
    Quadratic {
        lambda_max: f64,
    },
    Laplacian {
        lambda_max: f64,
        mu: f64,
        b: f64,
    },
    TruncatedLaplacian {
        lambda_max: f64,
        n_sigma: u32,
    },
    TruncatedGaussian {
        lambda_max: f64,
        n_sigma: u32,
    },
}

impl WeightingScheme {
    pub fn truncated_gaussian() -> Self {
        Self::TruncatedGaussian {
            lambda_max: 1.0,
            n_sigma: 2,
        }
    }

    pub fn lambda_max(&self) -> f64 {
        match *self {
            Self::Fixed { lambda_max }
            | Self::RampUp { lambda_max, .. }
            | Self::Threshold { lambda_max, .. }
            | Self::ClasswiseThreshold { lambda_max, .. }
            | Self::Linear { lambda_max }
            | Self::Quadratic { lambda_max }
            | Self::Laplacian { lambda_max, .. }
            | Self::TruncatedLaplacian { lambda_max, .. }
            | Self::TruncatedGaussian { lambda_max, .. } => lambda_max,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Fixed { .. } => "fixed",
            Self::RampUp { .. } => "rampup",
            Self::Threshold { .. } => "threshold",
            Self::ClasswiseThreshold { .. } => "classwise_threshold",
            Self::Linear { .. } => "linear",
            Self::Quadratic { .. } => "quadratic",
            Self::Laplacian { .. } => "laplacian",
            Self::TruncatedLaplacian { .. } => "truncated_laplacian",
            Self::TruncatedGaussian { .. } => "truncated_gaussian",
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_lambda(self.lambda_max())?;
        match self {
            Self::RampUp { warmup_steps, .. } if *warmup_steps == 0 => {
                Err(Error::invalid("warmup_steps must be positive"))
            }
            Self::Threshold { tau, .. } => check_tau(*tau),
            Self::ClasswiseThreshold {
                tau_base,
                per_class_counts,
                ..
            } => {
                if per_class_counts.is_empty() {
                    return Err(Error::invalid("classwise threshold needs at least one class"));
                }
                check_tau(*tau_base)
            }
            Self::Laplacian { mu, b, .. } => check_laplace(*mu, *b),
            Self::TruncatedLaplacian { n_sigma, .. } | Self::TruncatedGaussian { n_sigma, .. } => {
                check_n_sigma(*n_sigma)
            }
            _ => Ok(()),
        }
    }

    /// Weight of one sample. `step` is the number of completed training steps
    /// (only ramp-up reads it) and `stats` the estimates for the sample's class.
    pub fn weight(&self, confidence: f64, pseudo_class: usize, step: u64, stats: &GaussianStats) -> Result<f64> {
        check_confidence(confidence)?;
        match *self {
            Self::Fixed { lambda_max } => Ok(fixed_weight(lambda_max)),
            Self::RampUp {
                lambda_max,
                warmup_steps,
            } => rampup_weight(step, warmup_steps, lambda_max),
            Self::Threshold { lambda_max, tau } => step_weight(confidence, tau, lambda_max),
            Self::ClasswiseThreshold { .. } => classwise_threshold_weight(confidence, pseudo_class, self),
            Self::Linear { lambda_max } => ablation_weight(AblationKind::Linear, confidence, lambda_max, stats),
            Self::Quadratic { lambda_max } => {
                ablation_weight(AblationKind::Quadratic, confidence, lambda_max, stats)
            }
            Self::Laplacian { lambda_max, mu, b } => {
                ablation_weight(AblationKind::Laplacian { mu, b }, confidence, lambda_max, stats)
            }
            Self::TruncatedLaplacian { lambda_max, n_sigma } => ablation_weight(
                AblationKind::TruncatedLaplacian { n_sigma },
                confidence,
                lambda_max,
                stats,
            ),
            Self::TruncatedGaussian { lambda_max, n_sigma } => {
                truncated_gaussian_weight(confidence, stats, lambda_max, n_sigma)
            }
        }
    }
}

impl fmt::Display for WeightingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Scheme plus the mutable state it reads: confidence statistics (global and
/// optionally one per class) and the completed-step counter.
#[derive(Debug, Clone)]
pub struct SampleWeighter {
    scheme: WeightingScheme,
    global: GaussianStats,
    per_class: Option<Vec<GaussianStats>>,
    step: u64,
}

impl SampleWeighter {
    pub fn new(scheme: WeightingScheme, num_classes: usize, momentum: f64, per_class_stats: bool) -> Result<Self> {
        scheme.validate()?;
        if let WeightingScheme::ClasswiseThreshold { per_class_counts, .. } = &scheme {
            if per_class_counts.len() != num_classes {
                return Err(Error::DimensionMismatch {
                    expected: num_classes,
                    actual: per_class_counts.len(),
                });
            }
        }
        let global = GaussianStats::new(num_classes, momentum)?;
        let per_class = per_class_stats.then(|| vec![global.clone(); num_classes]);
        Ok(Self {
            scheme,
            global,
            per_class,
            step: 0,
        })
    }

    pub fn scheme(&self) -> &WeightingScheme {
        &self.scheme
    }

    pub fn stats(&self) -> &GaussianStats {
        &self.global
    }

    pub fn class_stats(&self) -> Option<&[GaussianStats]> {
        self.per_class.as_deref()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Updates the confidence statistics from this step's unlabeled batch.
    /// Must run before any weight of the same step is computed.
    pub fn observe(&mut self, confidences: &[f64], pseudo_labels: &[usize]) -> Result<()> {
        if confidences.len() != pseudo_labels.len() {
            return Err(Error::DimensionMismatch {
                expected: confidences.len(),
                actual: pseudo_labels.len(),
            });
        }
        self.global.update(confidences)?;
        if let Some(per_class) = self.per_class.as_mut() {
            for (c, stats) in per_class.iter_mut().enumerate() {
                let mine: Vec<f64> = confidences
                    .iter()
                    .zip(pseudo_labels)
                    .filter(|(_, &l)| l == c)
                    .map(|(&conf, _)| conf)
                    .collect();
                // A class seen fewer than twice keeps its previous estimate.
                if mine.len() >= 2 {
                    stats.update(&mine)?;
                }
            }
        }
        Ok(())
    }

    pub fn weight(&self, confidence: f64, pseudo_class: usize) -> Result<f64> {
        let stats = match &self.per_class {
            Some(per_class) => per_class.get(pseudo_class).ok_or(Error::ClassIndex {
                index: pseudo_class,
                num_classes: per_class.len(),
            })?,
            None => &self.global,
        };
        self.scheme.weight(confidence, pseudo_class, self.step, stats)
    }

    /// Closes the step: classwise counts absorb the batch, step counter advances.
    pub fn finish_step(&mut self, outcomes: &[BatchOutcome]) -> Result<()> {
        update_class_counts(outcomes, &mut self.scheme)?;
        self.step += 1;
        Ok(())
    }
}
