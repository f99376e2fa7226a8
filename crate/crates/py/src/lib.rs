//! Python bindings: confidence statistics, weighting functions, alignment,
//! pseudo-label metrics, data generation and end-to-end training runs.

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict};

use pseudolab::alignment::{uniform_align as align, MarginalEstimate};
use pseudolab::config::{ExperimentConfig, KEYS};
use pseudolab::data;
use pseudolab::metrics::{self, BatchOutcome};
use pseudolab::ssl;
use pseudolab::weighting::{self, WeightingScheme};
use pseudolab::{Error, ProbVector};

fn to_py(err: Error) -> PyErr {
    match err {
        Error::NonFinite { .. } => PyRuntimeError::new_err(err.to_string()),
        Error::Io { .. } => PyOSError::new_err(err.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

/// Running mean and variance of the unlabeled confidences.
#[pyclass(name = "GaussianStats", from_py_object)]
#[derive(Clone)]
struct PyGaussianStats {
    inner: weighting::GaussianStats,
}

#[pymethods]
impl PyGaussianStats {
    #[new]
    #[pyo3(signature = (num_classes, momentum=0.999))]
    fn new(num_classes: usize, momentum: f64) -> PyResult<Self> {
        Ok(Self {
            inner: weighting::GaussianStats::new(num_classes, momentum).map_err(to_py)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (mu_hat, var_hat, momentum=0.999, step=0))]
    fn from_parts(mu_hat: f64, var_hat: f64, momentum: f64, step: u64) -> PyResult<Self> {
        Ok(Self {
            inner: weighting::GaussianStats::from_parts(mu_hat, var_hat, momentum, step).map_err(to_py)?,
        })
    }

    /// Folds one batch of confidences (at least two) into the estimate.
    fn update(&mut self, confidences: Vec<f64>) -> PyResult<()> {
        self.inner.update(&confidences).map_err(to_py)
    }

    #[getter]
    fn mu_hat(&self) -> f64 {
        self.inner.mu_hat()
    }

    #[getter]
    fn var_hat(&self) -> f64 {
        self.inner.var_hat()
    }

    #[getter]
    fn momentum(&self) -> f64 {
        self.inner.momentum()
    }

    #[getter]
    fn step(&self) -> u64 {
        self.inner.step()
    }

    fn __repr__(&self) -> String {
        format!(
            "GaussianStats(mu_hat={}, var_hat={}, momentum={}, step={})",
            self.inner.mu_hat(),
            self.inner.var_hat(),
            self.inner.momentum(),
            self.inner.step()
        )
    }
}

#[pyfunction]
#[pyo3(signature = (confidence, stats, lambda_max=1.0, n_sigma=2))]
fn truncated_gaussian_weight(confidence: f64, stats: &PyGaussianStats, lambda_max: f64, n_sigma: u32) -> PyResult<f64> {
    weighting::truncated_gaussian_weight(confidence, &stats.inner, lambda_max, n_sigma).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (confidence, tau=0.95, lambda_max=1.0))]
fn step_weight(confidence: f64, tau: f64, lambda_max: f64) -> PyResult<f64> {
    weighting::step_weight(confidence, tau, lambda_max).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (step, warmup_steps, lambda_max=1.0))]
fn rampup_weight(step: u64, warmup_steps: u64, lambda_max: f64) -> PyResult<f64> {
    weighting::rampup_weight(step, warmup_steps, lambda_max).map_err(to_py)
}

fn config_from(overrides: Option<&Bound<'_, PyDict>>) -> PyResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(d) = overrides {
        for (k, v) in d.iter() {
            let key: String = k.extract()?;
            let value = if v.is_instance_of::<PyBool>() {
                if v.extract::<bool>()? { "true" } else { "false" }.to_string()
            } else if let Ok(items) = v.extract::<Vec<usize>>() {
                items.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
            } else {
                v.str()?.to_string()
            };
            cfg.set(&key, &value).map_err(to_py)?;
        }
    }
    Ok(cfg)
}

/// Weights of `confidences` under a scheme named as in config files,
/// e.g. `scheme_weights("threshold", [0.9, 0.97], tau=0.95)`. Extra keyword
/// arguments are config keys; `stats` feeds the Gaussian-family schemes.
#[pyfunction]
#[pyo3(signature = (scheme, confidences, stats=None, step=0, **params))]
fn scheme_weights(
    scheme: &str,
    confidences: Vec<f64>,
    stats: Option<&PyGaussianStats>,
    step: u64,
    params: Option<&Bound<'_, PyDict>>,
) -> PyResult<Vec<f64>> {
    let mut cfg = config_from(params)?;
    cfg.set("scheme", scheme).map_err(to_py)?;
    let scheme: WeightingScheme = cfg.weighting_scheme().map_err(to_py)?;
    let default_stats = weighting::GaussianStats::new(cfg.num_classes, cfg.momentum).map_err(to_py)?;
    let s = stats.map_or(&default_stats, |s| &s.inner);
    confidences
        .iter()
        .map(|&c| scheme.weight(c, 0, step, s).map_err(to_py))
        .collect()
}

/// Aligns `p` by `target / marginal` and renormalizes. `target` defaults to
/// uniform.
#[pyfunction]
#[pyo3(signature = (p, marginal, target=None))]
fn uniform_align(p: Vec<f64>, marginal: Vec<f64>, target: Option<Vec<f64>>) -> PyResult<Vec<f64>> {
    let c = p.len();
    let p = ProbVector::new(p).map_err(to_py)?;
    let est = MarginalEstimate::from_marginal(ProbVector::new(marginal).map_err(to_py)?, 0.999).map_err(to_py)?;
    let target = match target {
        Some(t) => ProbVector::new(t).map_err(to_py)?,
        None => ProbVector::uniform(c),
    };
    Ok(align(&p, &est, &target).map_err(to_py)?.into_inner())
}

fn outcomes(
    weights: &[f64],
    pseudo_labels: &[usize],
    true_labels: Option<&[usize]>,
    confidences: Option<&[f64]>,
) -> PyResult<Vec<BatchOutcome>> {
    let n = weights.len();
    if pseudo_labels.len() != n || true_labels.is_some_and(|t| t.len() != n) || confidences.is_some_and(|c| c.len() != n)
    {
        return Err(PyValueError::new_err("all sequences must have the same length"));
    }
    Ok((0..n)
        .map(|i| {
            BatchOutcome::new(
                confidences.map_or(1.0, |c| c[i]),
                pseudo_labels[i],
                weights[i],
                true_labels.map(|t| t[i]),
            )
        })
        .collect())
}

/// Mean sample weight.
#[pyfunction]
fn quantity(weights: Vec<f64>) -> PyResult<f64> {
    let o = outcomes(&weights, &vec![0; weights.len()], None, None)?;
    metrics::quantity(&o).map_err(to_py)
}

/// Weighted share of correct pseudo-labels; `None` when all weights are zero.
#[pyfunction]
fn quality(weights: Vec<f64>, pseudo_labels: Vec<usize>, true_labels: Vec<usize>) -> PyResult<Option<f64>> {
    let o = outcomes(&weights, &pseudo_labels, Some(&true_labels), None)?;
    metrics::quality(&o).map_err(to_py)
}

/// Per-class quality, `None` for classes nobody was assigned or that carry no weight.
#[pyfunction]
fn per_class_quality(
    weights: Vec<f64>,
    pseudo_labels: Vec<usize>,
    true_labels: Vec<usize>,
    num_classes: usize,
) -> PyResult<Vec<Option<f64>>> {
    let o = outcomes(&weights, &pseudo_labels, Some(&true_labels), None)?;
    metrics::per_class_quality(&o, num_classes).map_err(to_py)
}

/// `(all, wrong)` counts per confidence bin.
#[pyfunction]
#[pyo3(signature = (confidences, pseudo_labels, true_labels, bins=20))]
fn confidence_histogram(
    confidences: Vec<f64>,
    pseudo_labels: Vec<usize>,
    true_labels: Vec<usize>,
    bins: usize,
) -> PyResult<(Vec<u64>, Vec<u64>)> {
    let w = vec![1.0; confidences.len()];
    let o = outcomes(&w, &pseudo_labels, Some(&true_labels), Some(&confidences))?;
    let h = metrics::confidence_histogram(&o, bins).map_err(to_py)?;
    Ok((h.all, h.wrong))
}

/// `(points, labels)` of two interleaving half circles.
#[pyfunction]
#[pyo3(signature = (n_per_moon=500, noise=0.1, seed=0))]
fn two_moons(n_per_moon: usize, noise: f64, seed: u64) -> PyResult<(Vec<[f64; 2]>, Vec<usize>)> {
    let ds = data::two_moons(n_per_moon, noise, seed).map_err(to_py)?;
    Ok((ds.points().to_vec(), ds.oracle_labels().to_vec()))
}

/// Every config key with its default value, as strings.
#[pyfunction]
fn default_config(py: Python<'_>) -> PyResult<Bound<'_, PyDict>> {
    let cfg = ExperimentConfig::default();
    let d = PyDict::new(py);
    for k in KEYS {
        d.set_item(*k, cfg.get(k))?;
    }
    Ok(d)
}

/// Trains one configuration (config keys as keyword arguments) and returns
/// the metric trace and final numbers. The GIL is released while training.
#[pyfunction]
#[pyo3(signature = (**config))]
fn run(py: Python<'_>, config: Option<&Bound<'_, PyDict>>) -> PyResult<Py<PyDict>> {
    let cfg = config_from(config)?;
    let train_cfg = cfg.train_config().map_err(to_py)?;
    let (train, eval) = cfg.datasets().map_err(to_py)?;
    let result = py.detach(|| ssl::run_training(&train_cfg, &train, &eval)).map_err(to_py)?;

    let records = result
        .records
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("step", r.step)?;
            d.set_item("sup_loss", r.sup_loss)?;
            d.set_item("unsup_loss", r.unsup_loss)?;
            d.set_item("quantity", r.quantity)?;
            d.set_item("quality", r.quality)?;
            d.set_item("eval_error", r.eval_error)?;
            d.set_item("mu_hat", r.mu_hat)?;
            d.set_item("var_hat", r.var_hat)?;
            d.set_item("per_class_quality", r.per_class_quality.clone())?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    let out = PyDict::new(py);
    out.set_item("records", records)?;
    out.set_item("final_eval_error", result.final_eval_error())?;
    out.set_item("final_quantity", result.final_quantity())?;
    out.set_item("final_quality", result.final_quality())?;
    out.set_item("mu_hat", result.stats.mu_hat())?;
    out.set_item("var_hat", result.stats.var_hat())?;
    out.set_item("checkpoint", result.ema_model.to_text())?;
    Ok(out.unbind())
}

#[pymodule]
pub fn pseudolab_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGaussianStats>()?;
    m.add_function(wrap_pyfunction!(truncated_gaussian_weight, m)?)?;
    m.add_function(wrap_pyfunction!(step_weight, m)?)?;
    m.add_function(wrap_pyfunction!(rampup_weight, m)?)?;
    m.add_function(wrap_pyfunction!(scheme_weights, m)?)?;
    m.add_function(wrap_pyfunction!(uniform_align, m)?)?;
    m.add_function(wrap_pyfunction!(quantity, m)?)?;
    m.add_function(wrap_pyfunction!(quality, m)?)?;
    m.add_function(wrap_pyfunction!(per_class_quality, m)?)?;
    m.add_function(wrap_pyfunction!(confidence_histogram, m)?)?;
    m.add_function(wrap_pyfunction!(two_moons, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
