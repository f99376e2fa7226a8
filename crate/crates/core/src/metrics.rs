//! Quantity and quality of pseudo-labels.
//!
//! Quantity is the mean sample weight. Quality is the weight-normalized
//! fraction of pseudo-labels that agree with the ground truth; the truth is
//! only available to analysis code, never to the loss.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::weighting::{GaussianStats, WeightingScheme};

/// One unlabeled sample as seen by the weighting step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchOutcome {
    /// Confidence the weight was computed from.
    pub confidence: f64,
    pub pseudo_label: usize,
    pub weight: f64,
    pub true_label: Option<usize>,
}

impl BatchOutcome {
    pub fn new(confidence: f64, pseudo_label: usize, weight: f64, true_label: Option<usize>) -> Self {
        Self {
            confidence,
            pseudo_label,
            weight,
            true_label,
        }
    }

    pub fn is_correct(&self) -> Option<bool> {
        self.true_label.map(|t| t == self.pseudo_label)
    }
}

fn non_empty(outcomes: &[BatchOutcome]) -> Result<()> {
    if outcomes.is_empty() {
        return Err(Error::EmptyBatch);
    }
    Ok(())
}

fn correctness(outcomes: &[BatchOutcome]) -> Result<Vec<bool>> {
    outcomes
        .iter()
        .enumerate()
        .map(|(i, o)| o.is_correct().ok_or(Error::MissingTruth(i)))
        .collect()
}

/// Mean sample weight.
pub fn quantity(outcomes: &[BatchOutcome]) -> Result<f64> {
    non_empty(outcomes)?;
    Ok(outcomes.iter().map(|o| o.weight).sum::<f64>() / outcomes.len() as f64)
}

/// Weighted fraction of correct pseudo-labels. `Ok(None)` when the total
/// weight is zero.
pub fn quality(outcomes: &[BatchOutcome]) -> Result<Option<f64>> {
    non_empty(outcomes)?;
    let correct = correctness(outcomes)?;
    let total: f64 = outcomes.iter().map(|o| o.weight).sum();
    if total <= 0.0 {
        return Ok(None);
    }
    let hit: f64 = outcomes
        .iter()
        .zip(&correct)
        .filter(|(_, &ok)| ok)
        .map(|(o, _)| o.weight)
        .sum();
    Ok(Some(hit / total))
}

/// Weights normalized to sum to one.
pub fn pmf(outcomes: &[BatchOutcome]) -> Result<Vec<f64>> {
    non_empty(outcomes)?;
    let total: f64 = outcomes.iter().map(|o| o.weight).sum();
    if total <= 0.0 {
        return Err(Error::ZeroTotalWeight);
    }
    Ok(outcomes.iter().map(|o| o.weight / total).collect())
}

/// Quality restricted to outcomes pseudo-labeled as each class.
pub fn per_class_quality(outcomes: &[BatchOutcome], num_classes: usize) -> Result<Vec<Option<f64>>> {
    let correct = correctness(outcomes)?;
    let mut hit = vec![0.0; num_classes];
    let mut total = vec![0.0; num_classes];
    for (o, ok) in outcomes.iter().zip(correct) {
        if o.pseudo_label >= num_classes {
            return Err(Error::ClassIndex {
                index: o.pseudo_label,
                num_classes,
            });
        }
        total[o.pseudo_label] += o.weight;
        if ok {
            hit[o.pseudo_label] += o.weight;
        }
    }
    Ok(hit
        .into_iter()
        .zip(total)
        .map(|(h, t)| (t > 0.0).then(|| h / t))
        .collect())
}

/// Default bin count for confidence histograms.
pub const DEFAULT_BINS: usize = 20;

/// Counts of all and of wrong pseudo-labels per confidence bin.
///
/// Bins split `[0, 1]` evenly and are closed on the right; the first bin
/// also holds confidence 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfidenceHistogram {
    pub all: Vec<u64>,
    pub wrong: Vec<u64>,
}

impl ConfidenceHistogram {
    pub fn bins(&self) -> usize {
        self.all.len()
    }

    pub fn edges(&self) -> Vec<f64> {
        let n = self.bins();
        (0..=n).map(|i| i as f64 / n as f64).collect()
    }

    pub fn centers(&self) -> Vec<f64> {
        let n = self.bins() as f64;
        (0..self.bins()).map(|i| (i as f64 + 0.5) / n).collect()
    }
}

/// Bin index for a confidence under right-closed equal-width bins.
pub fn bin_index(confidence: f64, bins: usize) -> usize {
    let scaled = (confidence.clamp(0.0, 1.0) * bins as f64).ceil() as usize;
    scaled.saturating_sub(1).min(bins - 1)
}

/// Outcomes without ground truth count towards `all` only.
pub fn confidence_histogram(outcomes: &[BatchOutcome], bins: usize) -> Result<ConfidenceHistogram> {
    if bins == 0 {
        return Err(Error::invalid("histogram needs at least one bin"));
    }
    let mut hist = ConfidenceHistogram {
        all: vec![0; bins],
        wrong: vec![0; bins],
    };
    for o in outcomes {
        let b = bin_index(o.confidence, bins);
        hist.all[b] += 1;
        if o.is_correct() == Some(false) {
            hist.wrong[b] += 1;
        }
    }
    Ok(hist)
}

/// Result of checking a truncated-Gaussian batch against the quantity bound.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub quantity: f64,
    /// Fraction of outcomes with confidence at or above `mu_hat`.
    pub above_fraction: f64,
    /// Every above-mean outcome carries exactly `lambda_max`.
    pub upper_branch_exact: bool,
    /// `quantity >= lambda_max * above_fraction`.
    pub above_fraction_bound: bool,
    /// `Some(quantity >= lambda_max / 2)` when `mu_hat` is the batch mean and
    /// the confidences are symmetric about it; `None` otherwise.
    pub symmetric_half_bound: Option<bool>,
    /// `lambda_max / 2 * (1 + exp(-(1/C - mu_hat)^2 / (2 var_hat)))`, reported only.
    pub nominal_lower_bound: f64,
}

impl BoundReport {
    pub fn holds(&self) -> bool {
        self.upper_branch_exact && self.above_fraction_bound && self.symmetric_half_bound.unwrap_or(true)
    }
}

const SYMMETRY_TOL: f64 = 1e-12;

pub fn quantity_lower_bound_check(
    outcomes: &[BatchOutcome],
    stats: &GaussianStats,
    num_classes: usize,
    scheme: &WeightingScheme,
) -> Result<BoundReport> {
    let WeightingScheme::TruncatedGaussian { lambda_max, .. } = *scheme else {
        return Err(Error::invalid(format!(
            "bound check applies to truncated_gaussian outcomes, got {}",
            scheme.name()
        )));
    };
    if num_classes == 0 {
        return Err(Error::invalid("num_classes must be positive"));
    }
    let q = quantity(outcomes)?;
    let mu = stats.mu_hat();
    let n = outcomes.len() as f64;

    let above: Vec<&BatchOutcome> = outcomes.iter().filter(|o| o.confidence >= mu).collect();
    let above_fraction = above.len() as f64 / n;
    let upper_branch_exact = above.iter().all(|o| o.weight == lambda_max);
    let above_fraction_bound = q >= lambda_max * above_fraction * (1.0 - 1e-12);

    let mut sorted: Vec<f64> = outcomes.iter().map(|o| o.confidence).collect();
    sorted.sort_by(f64::total_cmp);
    let mean = sorted.iter().sum::<f64>() / n;
    let symmetric = (mean - mu).abs() <= SYMMETRY_TOL
        && sorted
            .iter()
            .zip(sorted.iter().rev())
            .all(|(lo, hi)| (lo + hi - 2.0 * mean).abs() <= SYMMETRY_TOL);
    let symmetric_half_bound = symmetric.then(|| q >= lambda_max / 2.0);

    let var = stats.var_hat().max(crate::weighting::VAR_FLOOR);
    let d = 1.0 / num_classes as f64 - mu;
    let nominal_lower_bound = lambda_max / 2.0 * (1.0 + (-(d * d) / (2.0 * var)).exp());

    Ok(BoundReport {
        quantity: q,
        above_fraction,
        upper_branch_exact,
        above_fraction_bound,
        symmetric_half_bound,
        nominal_lower_bound,
    })
}

/// Snapshot of a training run at one evaluation point.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub step: u64,
    pub sup_loss: f64,
    pub unsup_loss: f64,
    pub quantity: f64,
    pub quality: Option<f64>,
    pub per_class_quality: Vec<Option<f64>>,
    pub eval_error: f64,
    pub mu_hat: f64,
    pub var_hat: f64,
    pub marginal: Vec<f64>,
}

impl MetricsRecord {
    pub fn csv_header(num_classes: usize) -> String {
        let mut h = String::from("step,sup_loss,unsup_loss,quantity,quality,eval_error,mu_hat,var_hat");
        for c in 0..num_classes {
            write!(h, ",qc_{c}").unwrap();
        }
        h
    }

    /// Undefined qualities are written as empty fields.
    pub fn to_csv_row(&self) -> String {
        let mut row = format!(
            "{},{},{},{},{},{},{},{}",
            self.step,
            self.sup_loss,
            self.unsup_loss,
            self.quantity,
            fmt_opt(self.quality),
            self.eval_error,
            self.mu_hat,
            self.var_hat
        );
        for q in &self.per_class_quality {
            row.push(',');
            row.push_str(&fmt_opt(*q));
        }
        row
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_csv(records: &[MetricsRecord], num_classes: usize) -> String {
    let mut out = MetricsRecord::csv_header(num_classes);
    out.push('\n');
    for r in records {
        out.push_str(&r.to_csv_row());
        out.push('\n');
    }
    out
}

/// Header of an outcome dump.
pub const OUTCOMES_HEADER: &str = "confidence,pseudo_label,weight,true_label";

/// One row per outcome; a missing truth is an empty field.
pub fn outcomes_csv(outcomes: &[BatchOutcome]) -> String {
    let mut out = format!("{OUTCOMES_HEADER}\n");
    for o in outcomes {
        let truth = o.true_label.map(|t| t.to_string()).unwrap_or_default();
        writeln!(out, "{},{},{},{truth}", o.confidence, o.pseudo_label, o.weight).unwrap();
    }
    out
}

/// Inverse of [`outcomes_csv`]. `origin` only labels error messages.
pub fn parse_outcomes_csv(text: &str, origin: &std::path::Path) -> Result<Vec<BatchOutcome>> {
    let bad = |line: usize, msg: String| Error::Parse {
        path: origin.into(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == OUTCOMES_HEADER => {}
        _ => return Err(bad(1, format!("expected header `{OUTCOMES_HEADER}`"))),
    }
    let mut outcomes = Vec::new();
    for (i, line) in lines {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 4 {
            return Err(bad(i + 1, format!("expected 4 fields, got {}", f.len())));
        }
        let float = |s: &str| -> Result<f64> {
            let v: f64 = s.parse().map_err(|e| bad(i + 1, format!("`{s}`: {e}")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(bad(i + 1, format!("non-finite value `{s}`")))
            }
        };
        let int = |s: &str| s.parse::<usize>().map_err(|e| bad(i + 1, format!("`{s}`: {e}")));
        let confidence = float(f[0])?;
        if !(0.0..=1.0).contains(&confidence) {
            return Err(bad(i + 1, format!("confidence {confidence} outside [0, 1]")));
        }
        let true_label = if f[3].is_empty() { None } else { Some(int(f[3])?) };
        outcomes.push(BatchOutcome::new(confidence, int(f[1])?, float(f[2])?, true_label));
    }
    Ok(outcomes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn o(conf: f64, pseudo: usize, w: f64, truth: usize) -> BatchOutcome {
        BatchOutcome::new(conf, pseudo, w, Some(truth))
    }

    #[test]
    fn quantity_examples() {
        let all_max = vec![o(0.3, 0, 2.0, 0), o(0.9, 1, 2.0, 0)];
        assert_eq!(quantity(&all_max).unwrap(), 2.0);
        let mixed = [1.0, 0.0, 0.0, 1.0].map(|w| o(0.5, 0, w, 0));
        assert_eq!(quantity(&mixed).unwrap(), 0.5);
        assert!(matches!(quantity(&[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn quality_examples() {
        assert_eq!(quality(&[o(0.5, 1, 0.3, 1), o(0.7, 0, 2.0, 0)]).unwrap(), Some(1.0));
        assert_eq!(quality(&[o(0.5, 1, 1.0, 1), o(0.7, 0, 1.0, 1)]).unwrap(), Some(0.5));
        let q = quality(&[o(0.5, 1, 0.9, 1), o(0.7, 0, 0.1, 1)]).unwrap().unwrap();
        assert!((q - 0.9).abs() < 1e-15);
        assert_eq!(quality(&[o(0.5, 1, 0.0, 1)]).unwrap(), None);
        assert!(matches!(
            quality(&[BatchOutcome::new(0.5, 0, 1.0, None)]),
            Err(Error::MissingTruth(0))
        ));
    }

    #[test]
    fn pmf_examples() {
        let uniform = vec![o(0.5, 0, 0.7, 0); 4];
        assert_eq!(pmf(&uniform).unwrap(), vec![0.25; 4]);
        assert_eq!(pmf(&[o(0.5, 0, 2.0, 0), o(0.5, 0, 0.0, 0)]).unwrap(), vec![1.0, 0.0]);
        assert!(matches!(pmf(&[o(0.5, 0, 0.0, 0)]), Err(Error::ZeroTotalWeight)));
    }

    #[test]
    fn per_class_single_class_matches_global() {
        let batch = vec![o(0.5, 1, 0.4, 1), o(0.6, 1, 0.6, 0)];
        let pcq = per_class_quality(&batch, 3).unwrap();
        assert_eq!(pcq[0], None);
        assert_eq!(pcq[2], None);
        assert_eq!(pcq[1], quality(&batch).unwrap());
    }

    #[test]
    fn histogram_two_bins() {
        let h = confidence_histogram(&[o(0.3, 0, 1.0, 0), o(0.7, 0, 1.0, 1)], 2).unwrap();
        assert_eq!(h.all, vec![1, 1]);
        assert_eq!(h.wrong, vec![0, 1]);
        // right-closed: 0.5 lands in the first bin, 0 in the first, 1 in the last
        assert_eq!(bin_index(0.5, 2), 0);
        assert_eq!(bin_index(0.0, 2), 0);
        assert_eq!(bin_index(1.0, 2), 1);
        assert_eq!(confidence_histogram(&[], 20).unwrap().all, vec![0; 20]);
    }

    #[test]
    fn bound_check_rejects_other_schemes() {
        let stats = GaussianStats::new(2, 0.9).unwrap();
        let r = quantity_lower_bound_check(&[o(0.5, 0, 1.0, 0)], &stats, 2, &WeightingScheme::Fixed { lambda_max: 1.0 });
        assert!(r.is_err());
    }

    #[test]
    fn csv_header_layout() {
        assert_eq!(
            MetricsRecord::csv_header(2),
            "step,sup_loss,unsup_loss,quantity,quality,eval_error,mu_hat,var_hat,qc_0,qc_1"
        );
        let rec = MetricsRecord {
            step: 3,
            sup_loss: 0.5,
            unsup_loss: 0.25,
            quantity: 1.0,
            quality: None,
            per_class_quality: vec![Some(1.0), None],
            eval_error: 0.125,
            mu_hat: 0.5,
            var_hat: 1.0,
            marginal: vec![0.5, 0.5],
        };
        assert_eq!(rec.to_csv_row(), "3,0.5,0.25,1,,0.125,0.5,1,1,");
    }
}
