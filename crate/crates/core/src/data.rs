//! Synthetic 2-D datasets and labeled/unlabeled splits.
//!
//! Ground-truth labels of unlabeled points stay inside [`PointDataset`]; the
//! training path only sees a [`TrainView`], and analysis code reads the truth
//! through [`PointDataset::oracle_labels`].

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub type Point = [f64; 2];

#[derive(Debug, Clone, PartialEq)]
pub struct PointDataset {
    points: Vec<Point>,
    labels: Vec<usize>,
    labeled_mask: Vec<bool>,
    num_classes: usize,
}

/// What the trainer is allowed to see: labeled pairs and bare unlabeled points.
#[derive(Debug, Clone)]
pub struct TrainView {
    pub labeled: Vec<(Point, usize)>,
    pub unlabeled: Vec<Point>,
    /// Position of each unlabeled point in the parent dataset.
    pub unlabeled_index: Vec<usize>,
}

impl PointDataset {
    pub fn new(points: Vec<Point>, labels: Vec<usize>, labeled_mask: Vec<bool>, num_classes: usize) -> Result<Self> {
        let n = points.len();
        if labels.len() != n || labeled_mask.len() != n {
            return Err(Error::invalid(format!(
                "points ({n}), labels ({}) and mask ({}) differ in length",
                labels.len(),
                labeled_mask.len()
            )));
        }
        if num_classes == 0 {
            return Err(Error::invalid("num_classes must be positive"));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::ClassIndex {
                index: l,
                num_classes,
            });
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("dataset contains non-finite coordinates"));
        }
        Ok(Self {
            points,
            labels,
            labeled_mask,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn labeled_mask(&self) -> &[bool] {
        &self.labeled_mask
    }

    pub fn num_labeled(&self) -> usize {
        self.labeled_mask.iter().filter(|m| **m).count()
    }

    /// Ground truth for every point. For evaluation and pseudo-label
    /// analysis only; never feed this to a loss.
    pub fn oracle_labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_classes];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }

    pub fn labeled_class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for (&l, _) in self.labels.iter().zip(&self.labeled_mask).filter(|(_, m)| **m) {
            counts[l] += 1;
        }
        counts
    }

    pub fn train_view(&self) -> TrainView {
        let mut view = TrainView {
            labeled: Vec::new(),
            unlabeled: Vec::new(),
            unlabeled_index: Vec::new(),
        };
        for (i, (&p, &m)) in self.points.iter().zip(&self.labeled_mask).enumerate() {
            if m {
                view.labeled.push((p, self.labels[i]));
            } else {
                view.unlabeled.push(p);
                view.unlabeled_index.push(i);
            }
        }
        view
    }

    pub fn with_mask(mut self, labeled_mask: Vec<bool>) -> Result<Self> {
        if labeled_mask.len() != self.len() {
            return Err(Error::DimensionMismatch {
                expected: self.len(),
                actual: labeled_mask.len(),
            });
        }
        self.labeled_mask = labeled_mask;
        Ok(self)
    }

    /// `x0,x1,label,is_labeled` with a header row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x0,x1,label,is_labeled\n");
        for ((p, l), m) in self.points.iter().zip(&self.labels).zip(&self.labeled_mask) {
            writeln!(s, "{},{},{},{}", p[0], p[1], l, u8::from(*m)).unwrap();
        }
        s
    }

    /// Inverse of [`PointDataset::to_csv`]. The class count is one more than the
    /// largest label, or `num_classes` when given.
    pub fn from_csv(text: &str, num_classes: Option<usize>) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::Parse {
            path: "<dataset>".into(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == "x0,x1,label,is_labeled" => {}
            _ => return Err(bad(1, "expected header `x0,x1,label,is_labeled`".into())),
        }
        let (mut points, mut labels, mut mask) = (Vec::new(), Vec::new(), Vec::new());
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad(i + 1, format!("expected 4 fields, got {}", f.len())));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|e| bad(i + 1, format!("`{s}`: {e}")));
            points.push([num(f[0])?, num(f[1])?]);
            labels.push(f[2].trim().parse::<usize>().map_err(|e| bad(i + 1, format!("label: {e}")))?);
            mask.push(match f[3].trim() {
                "1" | "true" => true,
                "0" | "false" => false,
                other => return Err(bad(i + 1, format!("is_labeled `{other}`"))),
            });
        }
        let c = num_classes.unwrap_or_else(|| labels.iter().max().map_or(1, |m| m + 1));
        Self::new(points, labels, mask, c)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load_csv(path: &Path, num_classes: Option<usize>) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, num_classes)
    }
}

fn shuffled(points: Vec<Point>, labels: Vec<usize>, num_classes: usize, rng: &mut ChaCha8Rng) -> Result<PointDataset> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.shuffle(rng);
    let pts = order.iter().map(|&i| points[i]).collect();
    let lbl = order.iter().map(|&i| labels[i]).collect();
    let n = order.len();
    PointDataset::new(pts, lbl, vec![false; n], num_classes)
}

/// Noise-free position on one of the two moons at angle `theta ∈ [0, π]`.
pub fn moon_point(class: usize, theta: f64) -> Point {
    if class == 0 {
        [theta.cos(), theta.sin()]
    } else {
        [1.0 - theta.cos(), 0.5 - theta.sin()]
    }
}

/// Two interleaved half circles of unit radius, the second shifted by
/// `(1, -0.5)` and flipped, plus isotropic Gaussian noise. No points are
/// labeled yet.
pub fn two_moons(n_per_moon: usize, noise: f64, seed: u64) -> Result<PointDataset> {
    if n_per_moon < 2 {
        return Err(Error::invalid(format!("n_per_moon must be at least 2, got {n_per_moon}")));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::invalid(format!("noise {noise} must be non-negative")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = Normal::new(0.0, noise).map_err(|e| Error::invalid(e.to_string()))?;
    let mut points = Vec::with_capacity(2 * n_per_moon);
    let mut labels = Vec::with_capacity(2 * n_per_moon);
    for class in 0..2 {
        for i in 0..n_per_moon {
            let theta = PI * i as f64 / (n_per_moon - 1) as f64;
            let [x, y] = moon_point(class, theta);
            points.push([x + gauss.sample(&mut rng), y + gauss.sample(&mut rng)]);
            labels.push(class);
        }
    }
    shuffled(points, labels, 2, &mut rng)
}

/// Class sizes `round(n_head * gamma^(-c / (C - 1)))`.
pub fn long_tail_sizes(num_classes: usize, n_head: usize, gamma: f64) -> Result<Vec<usize>> {
    if num_classes < 2 {
        return Err(Error::invalid("imbalanced data needs at least 2 classes"));
    }
    if !(gamma >= 1.0 && gamma.is_finite()) {
        return Err(Error::invalid(format!("imbalance ratio {gamma} must be at least 1")));
    }
    let last = (num_classes - 1) as f64;
    Ok((0..num_classes)
        .map(|c| (n_head as f64 * gamma.powf(-(c as f64) / last)).round() as usize)
        .collect())
}

/// Gaussian blobs (std 0.5) centred on a circle of radius 5, with class sizes
/// decaying exponentially from head to tail.
pub fn imbalanced_blobs(num_classes: usize, n_head: usize, gamma: f64, seed: u64) -> Result<PointDataset> {
    let sizes = long_tail_sizes(num_classes, n_head, gamma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = Normal::new(0.0, 0.5).expect("valid std");
    let mut points = Vec::new();
    let mut labels = Vec::new();
    for (c, &n) in sizes.iter().enumerate() {
        let angle = 2.0 * PI * c as f64 / num_classes as f64;
        let centre = [5.0 * angle.cos(), 5.0 * angle.sin()];
        for _ in 0..n {
            points.push([centre[0] + gauss.sample(&mut rng), centre[1] + gauss.sample(&mut rng)]);
            labels.push(c);
        }
    }
    shuffled(points, labels, num_classes, &mut rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelMode {
    Balanced,
    Random,
}

impl FromStr for LabelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "balanced" => Ok(Self::Balanced),
            "random" => Ok(Self::Random),
            other => Err(Error::Config(format!("label_mode must be balanced or random; got `{other}`"))),
        }
    }
}

impl std::fmt::Display for LabelMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Balanced => "balanced",
            Self::Random => "random",
        })
    }
}

/// Marks `n_labels` points as labeled, replacing any previous mask.
pub fn select_labels(dataset: PointDataset, n_labels: usize, mode: LabelMode, seed: u64) -> Result<PointDataset> {
    let n = dataset.len();
    if n_labels > n {
        return Err(Error::invalid(format!("cannot label {n_labels} of {n} points")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![false; n];
    match mode {
        LabelMode::Random => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            idx.into_iter().take(n_labels).for_each(|i| mask[i] = true);
        }
        LabelMode::Balanced => {
            let c = dataset.num_classes();
            if n_labels % c != 0 {
                return Err(Error::invalid(format!(
                    "balanced labeling needs n_labels divisible by {c}, got {n_labels}"
                )));
            }
            let per_class = n_labels / c;
            for class in 0..c {
                let mut idx: Vec<usize> = (0..n).filter(|&i| dataset.labels[i] == class).collect();
                if idx.len() < per_class {
                    return Err(Error::invalid(format!(
                        "class {class} has {} points, need {per_class} labels",
                        idx.len()
                    )));
                }
                idx.shuffle(&mut rng);
                idx.into_iter().take(per_class).for_each(|i| mask[i] = true);
            }
        }
    }
    dataset.with_mask(mask)
}
