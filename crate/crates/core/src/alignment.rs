//! Prediction alignment against a target class distribution.
//!
//! Uniform alignment rescales each prediction by `target / E[p]` and
//! renormalizes. The aligned vector only feeds the weight computation; the
//! pseudo-label still comes from the raw prediction. Distribution alignment
//! uses the same arithmetic but routes the result into the loss target.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::prob::ProbVector;

/// Entries of the estimated marginal are clamped to at least this before division.
pub const MARGINAL_FLOOR: f64 = 1e-8;

/// EMA of the mean prediction over unlabeled batches.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalEstimate {
    marginal: ProbVector,
    momentum: f64,
}

impl MarginalEstimate {
    pub fn new(num_classes: usize, momentum: f64) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::invalid("num_classes must be positive"));
        }
        Self::from_marginal(ProbVector::uniform(num_classes), momentum)
    }

    pub fn from_marginal(marginal: ProbVector, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::invalid(format!("momentum {momentum} outside [0, 1]")));
        }
        Ok(Self { marginal, momentum })
    }

    pub fn marginal(&self) -> &ProbVector {
        &self.marginal
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn num_classes(&self) -> usize {
        self.marginal.num_classes()
    }

    pub fn update(&mut self, batch: &[ProbVector]) -> Result<()> {
        let mean = batch_mean(batch, self.num_classes())?;
        self.blend(&mean)
    }

    /// EMA of one-hot label frequencies, for the estimated labeled marginal.
    pub fn update_from_labels(&mut self, labels: &[usize]) -> Result<()> {
        if labels.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let c = self.num_classes();
        let mut freq = vec![0.0; c];
        for &l in labels {
            *freq.get_mut(l).ok_or(Error::ClassIndex {
                index: l,
                num_classes: c,
            })? += 1.0;
        }
        let n = labels.len() as f64;
        freq.iter_mut().for_each(|f| *f /= n);
        self.blend(&freq)
    }

    fn blend(&mut self, batch_mean: &[f64]) -> Result<()> {
        let m = self.momentum;
        let mixed: Vec<f64> = self
            .marginal
            .as_slice()
            .iter()
            .zip(batch_mean)
            .map(|(old, new)| m * old + (1.0 - m) * new)
            .collect();
        // Renormalizing absorbs rounding drift so the sum stays within tolerance.
        self.marginal = ProbVector::normalized(mixed)?;
        Ok(())
    }
}

fn batch_mean(batch: &[ProbVector], num_classes: usize) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut mean = vec![0.0; num_classes];
    for p in batch {
        check_len(p, num_classes)?;
        for (acc, v) in mean.iter_mut().zip(p.as_slice()) {
            *acc += v;
        }
    }
    let n = batch.len() as f64;
    mean.iter_mut().for_each(|v| *v /= n);
    Ok(mean)
}

fn check_len(p: &ProbVector, num_classes: usize) -> Result<()> {
    if p.num_classes() != num_classes {
        return Err(Error::DimensionMismatch {
            expected: num_classes,
            actual: p.num_classes(),
        });
    }
    Ok(())
}

/// Distribution the predictions are aligned towards.
#[derive(Debug, Clone, PartialEq)]
pub enum AlignmentTarget {
    Uniform,
    TrueMarginal { dist: ProbVector },
    /// EMA of labeled-batch label frequencies, maintained by [`Aligner`].
    EstimatedLabeledMarginal,
}

/// Value of the `ua_target` config key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetKind {
    Uniform,
    True,
    Estimated,
    Off,
}

impl FromStr for TargetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "true" => Ok(Self::True),
            "estimated" => Ok(Self::Estimated),
            "off" => Ok(Self::Off),
            other => Err(Error::Config(format!(
                "ua_target must be one of uniform, true, estimated, off; got `{other}`"
            ))),
        }
    }
}

impl fmt::Display for TargetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Uniform => "uniform",
            Self::True => "true",
            Self::Estimated => "estimated",
            Self::Off => "off",
        })
    }
}

/// `p * target / marginal`, elementwise, before normalization.
pub fn align_unnormalized(p: &ProbVector, est: &MarginalEstimate, target: &ProbVector) -> Result<Vec<f64>> {
    let c = est.num_classes();
    check_len(p, c)?;
    check_len(target, c)?;
    Ok(p.as_slice()
        .iter()
        .zip(est.marginal.as_slice())
        .zip(target.as_slice())
        .map(|((pi, mi), ti)| pi * ti / mi.max(MARGINAL_FLOOR))
        .collect())
}

/// Aligned prediction used for the weight computation.
pub fn uniform_align(p: &ProbVector, est: &MarginalEstimate, target: &ProbVector) -> Result<ProbVector> {
    let raw = align_unnormalized(p, est, target)?;
    if raw.iter().all(|v| *v == 0.0) {
        // All mass sat on classes the target gives zero weight; keep p.
        return Ok(p.clone());
    }
    ProbVector::normalized(raw)
}

/// Same arithmetic as [`uniform_align`]; the caller uses the result as a
/// soft loss target.
pub fn distribution_align(p: &ProbVector, est: &MarginalEstimate, target: &ProbVector) -> Result<ProbVector> {
    uniform_align(p, est, target)
}

/// Where the aligned prediction is used.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignMode {
    /// Weights from the aligned vector, pseudo-labels from the raw one.
    Weight,
    /// Aligned vector becomes the soft loss target.
    Target,
}

impl FromStr for AlignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ua" => Ok(Self::Weight),
            "da" => Ok(Self::Target),
            other => Err(Error::Config(format!("align_mode must be ua or da; got `{other}`"))),
        }
    }
}

impl fmt::Display for AlignMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Weight => "ua",
            Self::Target => "da",
        })
    }
}

/// Per-run alignment state: the unlabeled marginal and, for the estimated
/// target, the labeled marginal.
#[derive(Debug, Clone)]
pub struct Aligner {
    target: AlignmentTarget,
    unlabeled: MarginalEstimate,
    labeled: MarginalEstimate,
}

impl Aligner {
    pub fn new(target: AlignmentTarget, num_classes: usize, momentum: f64) -> Result<Self> {
        if let AlignmentTarget::TrueMarginal { dist } = &target {
            check_len(dist, num_classes)?;
        }
        Ok(Self {
            target,
            unlabeled: MarginalEstimate::new(num_classes, momentum)?,
            labeled: MarginalEstimate::new(num_classes, momentum)?,
        })
    }

    pub fn estimate(&self) -> &MarginalEstimate {
        &self.unlabeled
    }

    pub fn target(&self) -> &AlignmentTarget {
        &self.target
    }

    pub fn observe_unlabeled(&mut self, batch: &[ProbVector]) -> Result<()> {
        self.unlabeled.update(batch)
    }

    pub fn observe_labels(&mut self, labels: &[usize]) -> Result<()> {
        if matches!(self.target, AlignmentTarget::EstimatedLabeledMarginal) {
            self.labeled.update_from_labels(labels)?;
        }
        Ok(())
    }

    pub fn target_distribution(&self) -> ProbVector {
        match &self.target {
            AlignmentTarget::Uniform => ProbVector::uniform(self.unlabeled.num_classes()),
            AlignmentTarget::TrueMarginal { dist } => dist.clone(),
            AlignmentTarget::EstimatedLabeledMarginal => self.labeled.marginal.clone(),
        }
    }

    pub fn align(&self, p: &ProbVector) -> Result<ProbVector> {
        uniform_align(p, &self.unlabeled, &self.target_distribution())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn update_marginal_examples() {
        let mut est = MarginalEstimate::new(2, 0.0).unwrap();
        est.update(&[pv(&[0.2, 0.8]), pv(&[0.6, 0.4])]).unwrap();
        let m = est.marginal().as_slice();
        assert!((m[0] - 0.4).abs() < 1e-15 && (m[1] - 0.6).abs() < 1e-15);

        let mut frozen = MarginalEstimate::new(2, 1.0).unwrap();
        frozen.update(&[pv(&[0.2, 0.8])]).unwrap();
        assert_eq!(frozen.marginal().as_slice(), &[0.5, 0.5]);

        assert_eq!(MarginalEstimate::new(4, 0.9).unwrap().marginal().as_slice(), &[0.25; 4]);
        assert!(est.update(&[]).is_err());
    }

    #[test]
    fn align_hand_example() {
        let est = MarginalEstimate::from_marginal(pv(&[0.8, 0.2]), 0.999).unwrap();
        let out = uniform_align(&pv(&[0.8, 0.2]), &est, &ProbVector::uniform(2)).unwrap();
        assert!((out.as_slice()[0] - 0.5).abs() < 1e-15);
        assert!((out.as_slice()[1] - 0.5).abs() < 1e-15);
        let unnorm = align_unnormalized(&pv(&[0.8, 0.2]), &est, &ProbVector::uniform(2)).unwrap();
        assert!((unnorm[0] - 0.5).abs() < 1e-15 && (unnorm[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn align_uniform_marginal_is_identity() {
        let est = MarginalEstimate::new(3, 0.9).unwrap();
        let p = pv(&[0.1, 0.3, 0.6]);
        let out = uniform_align(&p, &est, &ProbVector::uniform(3)).unwrap();
        for (a, b) in out.as_slice().iter().zip(p.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
        let da = distribution_align(&p, &est, &ProbVector::uniform(3)).unwrap();
        assert_eq!(da, out);
    }

    #[test]
    fn target_equal_to_marginal_is_identity() {
        let marg = pv(&[0.7, 0.2, 0.1]);
        let est = MarginalEstimate::from_marginal(marg.clone(), 0.9).unwrap();
        let p = pv(&[0.3, 0.3, 0.4]);
        let out = uniform_align(&p, &est, &marg).unwrap();
        for (a, b) in out.as_slice().iter().zip(p.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_marginal_is_floored() {
        let est = MarginalEstimate::from_marginal(pv(&[1.0, 0.0]), 0.9).unwrap();
        let out = uniform_align(&pv(&[0.5, 0.5]), &est, &ProbVector::uniform(2)).unwrap();
        assert!(out.as_slice().iter().all(|v| v.is_finite()));
        assert!(out.as_slice()[1] > 0.999);
    }

    #[test]
    fn label_marginal_tracks_frequencies() {
        let mut a = Aligner::new(AlignmentTarget::EstimatedLabeledMarginal, 2, 0.0).unwrap();
        a.observe_labels(&[0, 0, 0, 1]).unwrap();
        assert_eq!(a.target_distribution().as_slice(), &[0.75, 0.25]);
        assert!(a.observe_labels(&[2]).is_err());
    }

    #[test]
    fn parse_target_kinds() {
        for s in ["uniform", "true", "estimated", "off"] {
            assert_eq!(s.parse::<TargetKind>().unwrap().to_string(), s);
        }
        assert!("other".parse::<TargetKind>().is_err());
    }
}
