//! Implementation of the `pseudolab` subcommands.
//!
//! Each command returns a [`Result`]; [`exit_code`] maps failures to the
//! process exit status (2 for configuration problems, 3 when training hits a
//! non-finite value, 1 otherwise).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::data::PointDataset;
use crate::error::{Error, Result};
use crate::metrics::{self, confidence_histogram};
use crate::nn::Mlp;
use crate::render::{self, BoundingBox, Grid};
use crate::ssl::{self, TrainingRun};
use crate::weighting::GaussianStats;

pub const METRICS_FILE: &str = "metrics.csv";
pub const OUTCOMES_FILE: &str = "outcomes_final.csv";
pub const MODEL_FILE: &str = "model.ckpt";
pub const EMA_MODEL_FILE: &str = "ema_model.ckpt";
pub const DATASET_FILE: &str = "dataset.csv";
pub const CONFIG_FILE: &str = "config.txt";
pub const STATE_FILE: &str = "state.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const SUMMARY_FILE: &str = "summary.csv";

/// Process exit status for an error.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::NonFinite { .. } => 3,
        _ => 1,
    }
}

fn as_config_error(err: Error) -> Error {
    match err {
        Error::Config(_) | Error::Io { .. } => err,
        other => Error::Config(other.to_string()),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// Loads `path` (or the defaults) and applies `key=value` overrides.
pub fn resolve_config<S: AsRef<str>>(path: Option<&Path>, overrides: &[S]) -> Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply_overrides(overrides)?;
    Ok(cfg)
}

/// Provenance written next to every run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub run_id: String,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub config_text: String,
    pub started_unix: u64,
    pub finished_unix: u64,
}

impl RunManifest {
    /// Short hex digest of the canonical config text, which includes the seed.
    pub fn run_id(config: &ExperimentConfig) -> String {
        let digest = Sha256::digest(config.to_text().as_bytes());
        hex::encode(&digest[..6])
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "run_id = {}", self.run_id).unwrap();
        writeln!(s, "seed = {}", self.seed).unwrap();
        writeln!(s, "out_dir = {}", self.out_dir.display()).unwrap();
        writeln!(s, "config = {CONFIG_FILE}").unwrap();
        writeln!(s, "started_unix = {}", self.started_unix).unwrap();
        writeln!(s, "finished_unix = {}", self.finished_unix).unwrap();
        s
    }
}

/// Estimator state at the end of a run, as `key = value` lines.
pub fn state_text(run: &TrainingRun) -> String {
    let mut s = String::new();
    writeln!(s, "step = {}", run.stats.step()).unwrap();
    writeln!(s, "mu_hat = {}", run.stats.mu_hat()).unwrap();
    writeln!(s, "var_hat = {}", run.stats.var_hat()).unwrap();
    writeln!(s, "momentum = {}", run.stats.momentum()).unwrap();
    if let Some(m) = &run.marginal {
        let parts: Vec<String> = m.iter().map(f64::to_string).collect();
        writeln!(s, "marginal = {}", parts.join(",")).unwrap();
    }
    s
}

/// Reads the statistics back from [`state_text`] output.
pub fn parse_state(text: &str, origin: &Path) -> Result<GaussianStats> {
    let mut fields = std::collections::HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
            path: origin.into(),
            line: i + 1,
            msg: "expected `key = value`".into(),
        })?;
        fields.insert(k.trim().to_string(), v.trim().to_string());
    }
    let get = |k: &str| -> Result<&str> {
        fields.get(k).map(String::as_str).ok_or_else(|| Error::Parse {
            path: origin.into(),
            line: 0,
            msg: format!("missing `{k}`"),
        })
    };
    let num = |k: &str| -> Result<f64> {
        get(k)?.parse().map_err(|e| Error::Parse {
            path: origin.into(),
            line: 0,
            msg: format!("`{k}`: {e}"),
        })
    };
    let step = get("step")?.parse().map_err(|e| Error::Parse {
        path: origin.into(),
        line: 0,
        msg: format!("`step`: {e}"),
    })?;
    GaussianStats::from_parts(num("mu_hat")?, num("var_hat")?, num("momentum")?, step)
}

/// What a finished `run` leaves behind.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub manifest: RunManifest,
    pub final_eval_error: Option<f64>,
    pub final_quantity: Option<f64>,
    pub final_quality: Option<f64>,
}

/// Trains one configuration and writes every artifact under `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunSummary> {
    let started_unix = unix_now();
    let train_cfg = cfg.train_config().map_err(as_config_error)?;
    let (train, eval) = cfg.datasets().map_err(as_config_error)?;
    create_dir(out)?;
    write(&out.join(CONFIG_FILE), cfg.to_text())?;
    train.save_csv(&out.join(DATASET_FILE))?;

    let run = ssl::run_training(&train_cfg, &train, &eval).map_err(|e| match e {
        Error::InvalidArgument(m) => Error::Config(m),
        other => other,
    })?;

    write(&out.join(METRICS_FILE), metrics::metrics_csv(&run.records, run.num_classes))?;
    write(&out.join(OUTCOMES_FILE), metrics::outcomes_csv(&run.final_outcomes))?;
    run.model.save(&out.join(MODEL_FILE))?;
    run.ema_model.save(&out.join(EMA_MODEL_FILE))?;
    write(&out.join(STATE_FILE), state_text(&run))?;

    let manifest = RunManifest {
        run_id: RunManifest::run_id(cfg),
        seed: cfg.seed,
        out_dir: out.to_path_buf(),
        config_text: cfg.to_text(),
        started_unix,
        finished_unix: unix_now(),
    };
    write(&out.join(MANIFEST_FILE), manifest.to_text())?;
    Ok(RunSummary {
        manifest,
        final_eval_error: run.final_eval_error(),
        final_quantity: run.final_quantity(),
        final_quality: run.final_quality(),
    })
}

/// `pseudolab run`.
pub fn cmd_run<S: AsRef<str>>(
    config: Option<&Path>,
    overrides: &[S],
    full_metrics: bool,
    out: &Path,
) -> Result<RunSummary> {
    let mut cfg = resolve_config(config, overrides)?;
    if full_metrics {
        cfg.full_metrics = true;
    }
    run_experiment(&cfg, out)
}

/// One swept key and its values.
#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub key: String,
    pub values: Vec<String>,
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("axis `{s}` is not key=v1,v2,...")))?;
        let values: Vec<String> = v.split(',').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect();
        if values.is_empty() {
            return Err(Error::Config(format!("axis `{}` has no values", k.trim())));
        }
        Ok(Self {
            key: k.trim().to_string(),
            values,
        })
    }
}

/// Cartesian product of `axes`, first axis slowest.
pub fn grid_points(axes: &[Axis]) -> Vec<Vec<(String, String)>> {
    let mut cells: Vec<Vec<(String, String)>> = vec![Vec::new()];
    for axis in axes {
        cells = cells
            .into_iter()
            .flat_map(|cell| {
                axis.values.iter().map(move |v| {
                    let mut c = cell.clone();
                    c.push((axis.key.clone(), v.clone()));
                    c
                })
            })
            .collect();
    }
    cells
}

/// Result of one sweep cell.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub index: usize,
    pub dir: PathBuf,
    pub assignments: Vec<(String, String)>,
    pub seed: u64,
    pub outcome: std::result::Result<RunSummary, String>,
    pub exit_code: i32,
}

impl CellResult {
    pub fn status(&self) -> &'static str {
        match self.exit_code {
            0 => "ok",
            2 => "config_error",
            3 => "nan_abort",
            _ => "error",
        }
    }
}

/// Everything `sweep` produced.
#[derive(Debug, Clone)]
pub struct SweepReport {
    pub cells: Vec<CellResult>,
    pub summary_path: PathBuf,
}

impl SweepReport {
    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.exit_code != 0).count()
    }
}

fn median(xs: &mut [f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    Some(if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    })
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// `summary.csv`: one row per cell plus the median and max−min spread of the
/// final eval error over the cells that differ only in seed.
pub fn summary_csv(cells: &[CellResult], axis_keys: &[String]) -> String {
    let group_key = |c: &CellResult| -> Vec<(String, String)> {
        c.assignments.iter().filter(|(k, _)| k != "seed").cloned().collect()
    };
    let mut s = String::from("cell,dir,seed");
    for k in axis_keys.iter().filter(|k| *k != "seed") {
        write!(s, ",{k}").unwrap();
    }
    s.push_str(",status,final_eval_error,final_quantity,final_quality,median_eval_error,spread_eval_error\n");
    for c in cells {
        let key = group_key(c);
        let mut errs: Vec<f64> = cells
            .iter()
            .filter(|o| group_key(o) == key)
            .filter_map(|o| o.outcome.as_ref().ok().and_then(|r| r.final_eval_error))
            .collect();
        let spread = if errs.is_empty() {
            None
        } else {
            let lo = errs.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = errs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Some(hi - lo)
        };
        let med = median(&mut errs);
        let dir = c.dir.file_name().map(|d| d.to_string_lossy().into_owned()).unwrap_or_default();
        write!(s, "{},{dir},{}", c.index, c.seed).unwrap();
        for (_, v) in &key {
            write!(s, ",{v}").unwrap();
        }
        let (e, q, ql) = match &c.outcome {
            Ok(r) => (r.final_eval_error, r.final_quantity, r.final_quality),
            Err(_) => (None, None, None),
        };
        writeln!(
            s,
            ",{},{},{},{},{},{}",
            c.status(),
            opt(e),
            opt(q),
            opt(ql),
            opt(med),
            opt(spread)
        )
        .unwrap();
    }
    s
}

/// `pseudolab sweep`. `seeds`, when given, becomes a `seed` axis. Cells run
/// in parallel; a failing cell is recorded and the rest continue.
pub fn cmd_sweep<S: AsRef<str>>(
    config: Option<&Path>,
    overrides: &[S],
    seeds: Option<&[u64]>,
    axes: &[Axis],
    full_metrics: bool,
    out: &Path,
) -> Result<SweepReport> {
    let mut base = resolve_config(config, overrides)?;
    if full_metrics {
        base.full_metrics = true;
    }
    let mut axes = axes.to_vec();
    if let Some(seeds) = seeds {
        if axes.iter().any(|a| a.key == "seed") {
            return Err(Error::Config("seeds given both by --seeds and a seed axis".into()));
        }
        axes.insert(
            0,
            Axis {
                key: "seed".into(),
                values: seeds.iter().map(u64::to_string).collect(),
            },
        );
    }
    let mut keys = std::collections::HashSet::new();
    for a in &axes {
        if !keys.insert(a.key.as_str()) {
            return Err(Error::Config(format!("axis `{}` given twice", a.key)));
        }
        for v in &a.values {
            base.clone().set(&a.key, v)?;
        }
    }
    create_dir(out)?;

    let cells: Vec<CellResult> = grid_points(&axes)
        .into_par_iter()
        .enumerate()
        .map(|(index, assignments)| {
            let dir = out.join(format!("cell_{index:03}"));
            let mut cfg = base.clone();
            for (k, v) in &assignments {
                cfg.set(k, v).expect("axis values were checked");
            }
            let outcome = run_experiment(&cfg, &dir);
            let exit_code = outcome.as_ref().map_or_else(exit_code, |_| 0);
            let outcome = outcome.map_err(|e| {
                let msg = e.to_string();
                let _ = fs::create_dir_all(&dir);
                let _ = fs::write(dir.join("error.txt"), format!("{msg}\n"));
                msg
            });
            CellResult {
                index,
                dir,
                assignments,
                seed: cfg.seed,
                outcome,
                exit_code,
            }
        })
        .collect();

    let axis_keys: Vec<String> = axes.iter().map(|a| a.key.clone()).collect();
    let summary_path = out.join(SUMMARY_FILE);
    write(&summary_path, summary_csv(&cells, &axis_keys))?;
    Ok(SweepReport { cells, summary_path })
}

/// What `boundary` wrote.
#[derive(Debug, Clone)]
pub struct BoundaryReport {
    pub csv_path: PathBuf,
    pub svg_path: PathBuf,
    pub rows: usize,
    pub grid_accuracy: f64,
    pub contour_segments: usize,
}

/// `pseudolab boundary`: evaluates a checkpoint on a grid around the dataset
/// and writes `boundary.csv` and `boundary.svg` into `out`.
pub fn cmd_boundary(checkpoint: &Path, dataset: &Path, resolution: usize, out: &Path) -> Result<BoundaryReport> {
    let model = Mlp::load(checkpoint)?;
    let data = PointDataset::load_csv(dataset, Some(model.num_classes())).map_err(|e| match e {
        Error::Parse { line, msg, .. } => Error::Parse {
            path: dataset.into(),
            line,
            msg,
        },
        other => other,
    })?;
    let bbox = BoundingBox::around(data.points(), 0.1)?;
    let grid = Grid::evaluate(&model, bbox, resolution)?;
    let c = grid.num_classes();
    let contour_segments = (0..if c == 2 { 1 } else { c })
        .map(|k| render::marching_squares(&grid, &grid.margin_field(k)).len())
        .sum();
    create_dir(out)?;
    let csv_path = out.join("boundary.csv");
    let svg_path = out.join("boundary.svg");
    write(&csv_path, grid.to_csv())?;
    write(&svg_path, render::boundary_svg(&grid, &data))?;
    Ok(BoundaryReport {
        csv_path,
        svg_path,
        rows: resolution * resolution,
        grid_accuracy: grid.accuracy(&data),
        contour_segments,
    })
}

/// `bin_lo,bin_hi,all,wrong,weight_at_center`. The weight column is filled
/// when a run directory supplies the scheme and final estimator state.
pub fn histogram_csv(
    outcomes: &[metrics::BatchOutcome],
    bins: usize,
    curve: Option<(&ExperimentConfig, &GaussianStats)>,
) -> Result<String> {
    let hist = confidence_histogram(outcomes, bins)?;
    let scheme = curve.map(|(cfg, _)| cfg.weighting_scheme()).transpose()?;
    let edges = hist.edges();
    let centers = hist.centers();
    let mut s = String::from("bin_lo,bin_hi,all,wrong,weight_at_center\n");
    for b in 0..bins {
        let w = match (&scheme, curve) {
            (Some(scheme), Some((_, stats))) => scheme.weight(centers[b], 0, stats.step(), stats)?.to_string(),
            _ => String::new(),
        };
        writeln!(s, "{},{},{},{},{w}", edges[b], edges[b + 1], hist.all[b], hist.wrong[b]).unwrap();
    }
    Ok(s)
}

/// `pseudolab hist`.
pub fn cmd_hist(outcomes: &Path, bins: usize, run_dir: Option<&Path>, out: &Path) -> Result<()> {
    if bins == 0 {
        return Err(Error::Config("--bins must be positive".into()));
    }
    let parsed = metrics::parse_outcomes_csv(&read(outcomes)?, outcomes)?;
    let curve = match run_dir {
        Some(dir) => {
            let cfg = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
            let state_path = dir.join(STATE_FILE);
            let stats = parse_state(&read(&state_path)?, &state_path)?;
            Some((cfg, stats))
        }
        None => None,
    };
    let text = histogram_csv(&parsed, bins, curve.as_ref().map(|(c, s)| (c, s)))?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write(out, text)
}
