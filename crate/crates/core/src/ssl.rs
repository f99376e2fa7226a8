//! Pseudo-label training step and loop.
//!
//! Per step: supervised cross-entropy on weakly augmented labeled points;
//! predictions on weakly augmented unlabeled points update the confidence
//! statistics and the marginal estimate; the weighting scheme turns each
//! (optionally aligned) confidence into a loss weight; the weighted
//! cross-entropy of strongly augmented views against the raw pseudo-labels
//! is added; one SGD step and one model-EMA update follow.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::alignment::{AlignMode, Aligner, AlignmentTarget, TargetKind};
use crate::data::{Point, PointDataset};
use crate::error::{Error, Result};
use crate::metrics::{self, BatchOutcome, MetricsRecord};
use crate::nn::{ema_update, sgd_step, Mlp, OptimizerState};
use crate::prob::ProbVector;
use crate::weighting::{GaussianStats, SampleWeighter, WeightingScheme};

/// Input perturbations for the weak (`ω`) and strong (`Ω`) views.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub weak_noise: f64,
    pub strong_noise: f64,
    pub strong_scale_range: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            weak_noise: 0.05,
            strong_noise: 0.15,
            strong_scale_range: (0.9, 1.1),
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.weak_noise >= 0.0 && self.weak_noise <= self.strong_noise && self.strong_noise.is_finite()) {
            return Err(Error::Config(format!(
                "need 0 <= weak_noise <= strong_noise, got {} and {}",
                self.weak_noise, self.strong_noise
            )));
        }
        let (lo, hi) = self.strong_scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("strong scale range [{lo}, {hi}] is invalid")));
        }
        Ok(())
    }
}

fn gaussian_jitter<R: Rng + ?Sized>(x: Point, std: f64, rng: &mut R) -> Point {
    if std == 0.0 {
        return x;
    }
    let n = Normal::new(0.0, std).expect("finite std");
    [x[0] + n.sample(rng), x[1] + n.sample(rng)]
}

/// `x + N(0, weak_noise^2 I)`.
pub fn augment_weak<R: Rng + ?Sized>(x: Point, cfg: &AugmentConfig, rng: &mut R) -> Point {
    gaussian_jitter(x, cfg.weak_noise, rng)
}

/// `(x + N(0, strong_noise^2 I)) * s`, `s ~ U[lo, hi]`.
pub fn augment_strong<R: Rng + ?Sized>(x: Point, cfg: &AugmentConfig, rng: &mut R) -> Point {
    let y = gaussian_jitter(x, cfg.strong_noise, rng);
    let (lo, hi) = cfg.strong_scale_range;
    let s = if lo == hi { lo } else { rng.random_range(lo..=hi) };
    [y[0] * s, y[1] * s]
}

/// Class index of the largest probability (lowest index on ties) and its one-hot vector.
pub fn pseudo_label(p: &ProbVector) -> (usize, ProbVector) {
    let idx = p.argmax();
    (idx, ProbVector::one_hot(idx, p.num_classes()).expect("argmax is in range"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub scheme: WeightingScheme,
    pub ua_target: TargetKind,
    pub align_mode: AlignMode,
    pub labeled_batch: usize,
    pub unlabeled_batch: usize,
    /// EMA momentum for the confidence statistics and the marginal estimate.
    pub momentum: f64,
    pub model_ema_momentum: f64,
    pub total_steps: u64,
    pub learning_rate: f64,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub hidden_dims: Vec<usize>,
    pub augment: AugmentConfig,
    pub per_class_stats: bool,
    pub seed: u64,
    pub eval_interval: u64,
    /// Recompute quantity/quality over the whole unlabeled set at each evaluation.
    pub full_metrics: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scheme: WeightingScheme::truncated_gaussian(),
            ua_target: TargetKind::Uniform,
            align_mode: AlignMode::Weight,
            labeled_batch: 4,
            unlabeled_batch: 64,
            momentum: 0.999,
            model_ema_momentum: 0.999,
            total_steps: 5000,
            learning_rate: 0.05,
            sgd_momentum: 0.9,
            weight_decay: 5e-4,
            hidden_dims: vec![32, 32],
            augment: AugmentConfig::default(),
            per_class_stats: false,
            seed: 0,
            eval_interval: 100,
            full_metrics: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.scheme.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.labeled_batch < 1 {
            return Err(Error::Config("labeled_batch must be at least 1".into()));
        }
        if self.unlabeled_batch < 2 {
            return Err(Error::Config("unlabeled_batch must be at least 2".into()));
        }
        for (name, m) in [("momentum", self.momentum), ("model_ema_momentum", self.model_ema_momentum)] {
            if !(0.0..=1.0).contains(&m) {
                return Err(Error::Config(format!("{name} {m} outside [0, 1]")));
            }
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) {
            return Err(Error::Config(format!("sgd_momentum {} outside [0, 1)", self.sgd_momentum)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be non-negative".into()));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden_dims entries must be positive".into()));
        }
        if self.eval_interval == 0 {
            return Err(Error::Config("eval_interval must be positive".into()));
        }
        self.augment.validate()
    }

    pub fn layer_dims(&self, input_dim: usize, num_classes: usize) -> Vec<usize> {
        std::iter::once(input_dim)
            .chain(self.hidden_dims.iter().copied())
            .chain(std::iter::once(num_classes))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub points: Vec<Point>,
    pub labels: Vec<usize>,
}

/// Unlabeled points only; ground truth never enters the training step.
#[derive(Debug, Clone)]
pub struct UnlabeledBatch {
    pub points: Vec<Point>,
}

/// Weights and loss targets for one unlabeled batch.
#[derive(Debug, Clone)]
pub struct WeighedBatch {
    pub outcomes: Vec<BatchOutcome>,
    pub targets: Vec<ProbVector>,
    /// `argmax` of the raw weak-view predictions.
    pub raw_pseudo_labels: Vec<usize>,
    /// Step counter of the confidence statistics when the weights were taken.
    pub stats_step: u64,
}

/// Updates the statistics (and marginal estimate) from `probs`, then weighs
/// each prediction.
///
/// With weight-side alignment the weight reads `max(UA(p))` while the
/// pseudo-label stays `argmax(p)`. With target-side alignment the aligned
/// vector is the soft target and its argmax is reported as pseudo-label.
pub fn weigh_batch(
    weighter: &mut SampleWeighter,
    aligner: Option<&mut Aligner>,
    mode: AlignMode,
    probs: &[ProbVector],
) -> Result<WeighedBatch> {
    let confidences: Vec<f64> = probs.iter().map(ProbVector::max).collect();
    let raw_pseudo_labels: Vec<usize> = probs.iter().map(ProbVector::argmax).collect();
    weighter.observe(&confidences, &raw_pseudo_labels)?;
    let aligner = match aligner {
        Some(a) => {
            a.observe_unlabeled(probs)?;
            Some(&*a)
        }
        None => None,
    };
    let (outcomes, targets) = weigh_with(weighter, aligner, mode, probs)?;
    Ok(WeighedBatch {
        outcomes,
        targets,
        raw_pseudo_labels,
        stats_step: weighter.stats().step(),
    })
}

/// Weighs predictions against the current state without updating it.
fn weigh_with(
    weighter: &SampleWeighter,
    aligner: Option<&Aligner>,
    mode: AlignMode,
    probs: &[ProbVector],
) -> Result<(Vec<BatchOutcome>, Vec<ProbVector>)> {
    let mut outcomes = Vec::with_capacity(probs.len());
    let mut targets = Vec::with_capacity(probs.len());
    for p in probs {
        let (raw_label, one_hot) = pseudo_label(p);
        let (confidence, label, target) = match (aligner, mode) {
            (None, _) => (p.max(), raw_label, one_hot),
            (Some(a), AlignMode::Weight) => (a.align(p)?.max(), raw_label, one_hot),
            (Some(a), AlignMode::Target) => {
                let aligned = a.align(p)?;
                (aligned.max(), aligned.argmax(), aligned)
            }
        };
        let confidence = confidence.clamp(0.0, 1.0);
        let weight = weighter.weight(confidence, label)?;
        outcomes.push(BatchOutcome::new(confidence, label, weight, None));
        targets.push(target);
    }
    Ok((outcomes, targets))
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    /// 1-based index of the step just taken.
    pub step: u64,
    pub sup_loss: f64,
    pub unsup_loss: f64,
    pub total_loss: f64,
    pub outcomes: Vec<BatchOutcome>,
    pub raw_pseudo_labels: Vec<usize>,
    pub stats_step_at_weighting: u64,
}

/// Owns everything mutated during training: model, EMA model, optimizer,
/// weighting state, alignment state and the augmentation RNG.
#[derive(Debug, Clone)]
pub struct Trainer {
    config: TrainConfig,
    model: Mlp,
    ema_model: Mlp,
    opt: OptimizerState,
    weighter: SampleWeighter,
    aligner: Option<Aligner>,
    rng: ChaCha8Rng,
    step: u64,
}

impl Trainer {
    /// `true_marginal` is required when `ua_target = true`.
    pub fn new(config: TrainConfig, num_classes: usize, true_marginal: Option<ProbVector>) -> Result<Self> {
        config.validate()?;
        if num_classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        let mut scheme = config.scheme.clone();
        if let WeightingScheme::ClasswiseThreshold { per_class_counts, .. } = &mut scheme {
            per_class_counts.resize(num_classes, 0);
        }
        let model = Mlp::new(&config.layer_dims(2, num_classes), config.seed)?;
        let opt = OptimizerState::new(
            &model,
            config.learning_rate,
            config.sgd_momentum,
            config.weight_decay,
            config.total_steps.max(1),
        )?;
        let weighter = SampleWeighter::new(scheme, num_classes, config.momentum, config.per_class_stats)?;
        let target = match config.ua_target {
            TargetKind::Off => None,
            TargetKind::Uniform => Some(AlignmentTarget::Uniform),
            TargetKind::Estimated => Some(AlignmentTarget::EstimatedLabeledMarginal),
            TargetKind::True => Some(AlignmentTarget::TrueMarginal {
                dist: true_marginal.ok_or_else(|| Error::Config("ua_target=true needs the labeled class distribution".into()))?,
            }),
        };
        let aligner = target
            .map(|t| Aligner::new(t, num_classes, config.momentum))
            .transpose()?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed_a06));
        Ok(Self {
            ema_model: model.clone(),
            model,
            opt,
            weighter,
            aligner,
            rng,
            step: 0,
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Mlp {
        &self.model
    }

    pub fn ema_model(&self) -> &Mlp {
        &self.ema_model
    }

    pub fn weighter(&self) -> &SampleWeighter {
        &self.weighter
    }

    pub fn aligner(&self) -> Option<&Aligner> {
        self.aligner.as_ref()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    pub fn train_step(&mut self, labeled: &LabeledBatch, unlabeled: &UnlabeledBatch) -> Result<StepOutput> {
        let step = self.step + 1;
        self.step_unchecked(labeled, unlabeled).map_err(|e| match e {
            Error::NonFinite { detail, .. } => Error::NonFinite { step, detail },
            other => other,
        })
    }

    fn step_unchecked(&mut self, labeled: &LabeledBatch, unlabeled: &UnlabeledBatch) -> Result<StepOutput> {
        if labeled.points.len() != labeled.labels.len() {
            return Err(Error::DimensionMismatch {
                expected: labeled.points.len(),
                actual: labeled.labels.len(),
            });
        }
        if labeled.points.is_empty() || unlabeled.points.len() < 2 {
            return Err(Error::EmptyBatch);
        }
        let c = self.num_classes();
        let aug = self.config.augment.clone();
        let mut grads = self.model.zeros_like();

        // Supervised loss on weak views.
        let xs: Vec<Vec<f64>> = labeled
            .points
            .iter()
            .map(|&x| augment_weak(x, &aug, &mut self.rng).to_vec())
            .collect();
        let ys = labeled
            .labels
            .iter()
            .map(|&l| ProbVector::one_hot(l, c))
            .collect::<Result<Vec<_>>>()?;
        let (sup_loss, _) = self.model.loss_and_grad(&xs, &ys, &vec![1.0; xs.len()], &mut grads)?;
        if let Some(a) = self.aligner.as_mut() {
            a.observe_labels(&labeled.labels)?;
        }

        // Weak-view predictions, statistics, weights and pseudo-labels.
        let probs = unlabeled
            .points
            .iter()
            .map(|&u| self.model.predict(&augment_weak(u, &aug, &mut self.rng)))
            .collect::<Result<Vec<_>>>()?;
        if probs.iter().any(|p| p.as_slice().iter().any(|v| !v.is_finite())) {
            return Err(self.non_finite("weak-view prediction"));
        }
        let weighed = weigh_batch(&mut self.weighter, self.aligner.as_mut(), self.config.align_mode, &probs)?;

        // Unsupervised loss on strong views.
        let strong: Vec<Vec<f64>> = unlabeled
            .points
            .iter()
            .map(|&u| augment_strong(u, &aug, &mut self.rng).to_vec())
            .collect();
        let weights: Vec<f64> = weighed.outcomes.iter().map(|o| o.weight).collect();
        let (unsup_loss, _) = self.model.loss_and_grad(&strong, &weighed.targets, &weights, &mut grads)?;

        let total_loss = sup_loss + unsup_loss;
        if !total_loss.is_finite() {
            return Err(self.non_finite(&format!("loss sup={sup_loss} unsup={unsup_loss}")));
        }
        sgd_step(&mut self.model, &grads, &mut self.opt)?;
        if self.model.params().any(|p| !p.is_finite()) {
            return Err(self.non_finite("parameters after SGD step"));
        }
        ema_update(&mut self.ema_model, &self.model, self.config.model_ema_momentum)?;
        self.weighter.finish_step(&weighed.outcomes)?;
        self.step += 1;

        Ok(StepOutput {
            step: self.step,
            sup_loss,
            unsup_loss,
            total_loss,
            outcomes: weighed.outcomes,
            raw_pseudo_labels: weighed.raw_pseudo_labels,
            stats_step_at_weighting: weighed.stats_step,
        })
    }

    fn non_finite(&self, detail: &str) -> Error {
        Error::NonFinite {
            step: self.step + 1,
            detail: detail.to_string(),
        }
    }

    /// Outcomes for un-augmented points under the current model and
    /// weighting state, leaving all state untouched.
    pub fn assess(&self, points: &[Point]) -> Result<Vec<BatchOutcome>> {
        let probs = points
            .iter()
            .map(|p| self.model.predict(p))
            .collect::<Result<Vec<_>>>()?;
        Ok(weigh_with(&self.weighter, self.aligner.as_ref(), self.config.align_mode, &probs)?.0)
    }
}

/// Fraction of points the model misclassifies.
pub fn eval_error(model: &Mlp, points: &[Point], labels: &[usize]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut wrong = 0usize;
    for (p, &l) in points.iter().zip(labels) {
        if model.predict(p)?.argmax() != l {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / points.len() as f64)
}

/// Everything produced by [`run_training`].
#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub records: Vec<MetricsRecord>,
    pub model: Mlp,
    pub ema_model: Mlp,
    /// Final outcomes over the whole unlabeled set, ground truth attached.
    pub final_outcomes: Vec<BatchOutcome>,
    pub stats: GaussianStats,
    pub marginal: Option<Vec<f64>>,
    pub num_classes: usize,
}

impl TrainingRun {
    pub fn final_quantity(&self) -> Option<f64> {
        metrics::quantity(&self.final_outcomes).ok()
    }

    pub fn final_quality(&self) -> Option<f64> {
        metrics::quality(&self.final_outcomes).ok().flatten()
    }

    pub fn final_eval_error(&self) -> Option<f64> {
        self.records.last().map(|r| r.eval_error)
    }
}

fn attach_truth(outcomes: &mut [BatchOutcome], truth: impl IntoIterator<Item = usize>) {
    for (o, t) in outcomes.iter_mut().zip(truth) {
        o.true_label = Some(t);
    }
}

/// Labeled class frequencies, used as the `true` alignment target.
pub fn labeled_marginal(dataset: &PointDataset) -> Result<ProbVector> {
    let counts = dataset.labeled_class_counts();
    ProbVector::normalized(counts.into_iter().map(|c| c as f64).collect())
}

/// Trains for `total_steps`, sampling batches with replacement, and records
/// metrics every `eval_interval` steps and at the last step. `eval` is scored
/// with the EMA model.
pub fn run_training(config: &TrainConfig, dataset: &PointDataset, eval: &PointDataset) -> Result<TrainingRun> {
    config.validate()?;
    let c = dataset.num_classes();
    if eval.num_classes() != c {
        return Err(Error::Config("train and eval datasets disagree on class count".into()));
    }
    let view = dataset.train_view();
    let labeled_counts = dataset.labeled_class_counts();
    if let Some(missing) = labeled_counts.iter().position(|&n| n == 0) {
        return Err(Error::Config(format!("class {missing} has no labeled point")));
    }
    if view.unlabeled.len() < 2 {
        return Err(Error::Config("need at least 2 unlabeled points".into()));
    }
    let truth = dataset.oracle_labels();
    let unlabeled_truth: Vec<usize> = view.unlabeled_index.iter().map(|&i| truth[i]).collect();

    let mut trainer = Trainer::new(config.clone(), c, Some(labeled_marginal(dataset)?))?;
    let mut sampler = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1));
    let unlabeled_ids: Vec<usize> = (0..view.unlabeled.len()).collect();
    let labeled_ids: Vec<usize> = (0..view.labeled.len()).collect();
    let mut records = Vec::new();

    for step in 1..=config.total_steps {
        let lb: Vec<usize> = (0..config.labeled_batch)
            .map(|_| *labeled_ids.choose(&mut sampler).expect("non-empty"))
            .collect();
        let ub: Vec<usize> = (0..config.unlabeled_batch)
            .map(|_| *unlabeled_ids.choose(&mut sampler).expect("non-empty"))
            .collect();
        let labeled = LabeledBatch {
            points: lb.iter().map(|&i| view.labeled[i].0).collect(),
            labels: lb.iter().map(|&i| view.labeled[i].1).collect(),
        };
        let unlabeled = UnlabeledBatch {
            points: ub.iter().map(|&i| view.unlabeled[i]).collect(),
        };
        let out = trainer.train_step(&labeled, &unlabeled)?;

        if step % config.eval_interval == 0 || step == config.total_steps {
            let mut outcomes = if config.full_metrics {
                trainer.assess(&view.unlabeled)?
            } else {
                out.outcomes.clone()
            };
            if config.full_metrics {
                attach_truth(&mut outcomes, unlabeled_truth.iter().copied());
            } else {
                attach_truth(&mut outcomes, ub.iter().map(|&i| unlabeled_truth[i]));
            }
            let stats = trainer.weighter().stats();
            records.push(MetricsRecord {
                step,
                sup_loss: out.sup_loss,
                unsup_loss: out.unsup_loss,
                quantity: metrics::quantity(&outcomes)?,
                quality: metrics::quality(&outcomes)?,
                per_class_quality: metrics::per_class_quality(&outcomes, c)?,
                eval_error: eval_error(trainer.ema_model(), eval.points(), eval.oracle_labels())?,
                mu_hat: stats.mu_hat(),
                var_hat: stats.var_hat(),
                marginal: trainer
                    .aligner()
                    .map(|a| a.estimate().marginal().as_slice().to_vec())
                    .unwrap_or_default(),
            });
        }
    }

    let mut final_outcomes = trainer.assess(&view.unlabeled)?;
    attach_truth(&mut final_outcomes, unlabeled_truth.iter().copied());
    Ok(TrainingRun {
        records,
        model: trainer.model().clone(),
        ema_model: trainer.ema_model().clone(),
        final_outcomes,
        stats: trainer.weighter().stats().clone(),
        marginal: trainer.aligner().map(|a| a.estimate().marginal().as_slice().to_vec()),
        num_classes: c,
    })
}
