//! Points on the probability simplex.

use crate::error::{Error, Result};

/// Tolerance on `|sum - 1|` accepted when validating a probability vector.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// A categorical distribution over `C` classes.
///
/// Entries are finite, non-negative and sum to one within [`SIMPLEX_TOL`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("probability vector must have at least one class"));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::invalid(format!("probability entry {v} is not a finite non-negative number")));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::invalid(format!("probabilities sum to {sum}, expected 1")));
        }
        Ok(Self(values))
    }

    /// Divides by the sum. Fails if the sum is not strictly positive.
    pub fn normalized(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("cannot normalize negative or non-finite mass"));
        }
        let sum: f64 = values.iter().sum();
        if sum <= 0.0 {
            return Err(Error::invalid("cannot normalize a zero vector"));
        }
        Ok(Self(values.into_iter().map(|v| v / sum).collect()))
    }

    pub fn uniform(num_classes: usize) -> Self {
        assert!(num_classes > 0, "uniform distribution needs at least one class");
        Self(vec![1.0 / num_classes as f64; num_classes])
    }

    pub fn one_hot(index: usize, num_classes: usize) -> Result<Self> {
        if index >= num_classes {
            return Err(Error::ClassIndex { index, num_classes });
        }
        let mut v = vec![0.0; num_classes];
        v[index] = 1.0;
        Ok(Self(v))
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// The confidence `max(p)`.
    pub fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Index of the largest entry; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate().skip(1) {
            if v > self.0[best] {
                best = i;
            }
        }
        best
    }
}

impl AsRef<[f64]> for ProbVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_off_simplex() {
        assert!(ProbVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbVector::new(vec![-0.1, 1.1]).is_err());
        assert!(ProbVector::new(vec![]).is_err());
        assert!(ProbVector::new(vec![f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        let p = ProbVector::new(vec![0.25, 0.5, 0.25 - 0.0, 0.0]).unwrap();
        assert_eq!(p.argmax(), 1);
        let tie = ProbVector::new(vec![0.5, 0.5]).unwrap();
        assert_eq!(tie.argmax(), 0);
    }

    #[test]
    fn normalized_divides_by_sum() {
        let p = ProbVector::normalized(vec![1.0, 3.0]).unwrap();
        assert_eq!(p.as_slice(), &[0.25, 0.75]);
        assert!(ProbVector::normalized(vec![0.0, 0.0]).is_err());
    }
}
