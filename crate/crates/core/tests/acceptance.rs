//! Acceptance checks, one line per criterion. Runs as a plain binary so the
//! report is printed even when everything passes.

mod common;

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use pseudolab::alignment::{align_unnormalized, uniform_align, AlignMode, Aligner, AlignmentTarget, MarginalEstimate};
use pseudolab::cli::{self, Axis};
use pseudolab::config::ExperimentConfig;
use pseudolab::metrics::{self, BatchOutcome};
use pseudolab::ssl::{self, weigh_batch};
use pseudolab::weighting::{truncated_gaussian_weight, GaussianStats, SampleWeighter, WeightingScheme};
use pseudolab::ProbVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn metric_oracles() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    let mut total = 0usize;
    for batch in 0..1000 {
        let n = rng.random_range(1..=10_000);
        let c = rng.random_range(2..=10);
        let o = common::random_outcomes(&mut rng, n, c);
        total += n;
        let q = metrics::quantity(&o).map_err(|e| e.to_string())?;
        worst = worst.max(common::rel_err(q, common::quantity(&o)));
        match (metrics::quality(&o).map_err(|e| e.to_string())?, common::quality(&o)) {
            (Some(a), Some(b)) => worst = worst.max(common::rel_err(a, b)),
            (None, None) => {}
            other => return Err(format!("batch {batch}: quality {other:?}")),
        }
        let pmf = metrics::pmf(&o).map_err(|e| e.to_string())?;
        for (a, b) in pmf.iter().zip(common::pmf(&o)) {
            worst = worst.max(common::rel_err(*a, b));
        }
        let pcq = metrics::per_class_quality(&o, c).map_err(|e| e.to_string())?;
        for (k, (a, b)) in pcq.iter().zip(common::per_class_quality(&o, c)).enumerate() {
            match (a, b) {
                (Some(a), Some(b)) => worst = worst.max(common::rel_err(*a, b)),
                (None, None) => {}
                other => return Err(format!("batch {batch} class {k}: {other:?}")),
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(worst < 1e-10, || format!("max relative error {worst:e}"))?;
    ensure(secs < 10.0, || format!("took {secs:.2}s"))?;
    Ok(format!("1000 batches, {total} outcomes, max rel err {worst:.1e}, {secs:.2}s"))
}

fn scheme_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let stats = GaussianStats::new(2, 0.999).unwrap();
    let mut worst: f64 = 0.0;
    for case in 0..500 {
        let n = rng.random_range(1..=500);
        let c = rng.random_range(2..=10);
        let lambda = rng.random_range(0.05..3.0);
        let tau = rng.random_range(0.0..1.0);
        let raw = common::random_outcomes(&mut rng, n, c);

        let step = WeightingScheme::Threshold { lambda_max: lambda, tau };
        let o: Vec<BatchOutcome> = raw
            .iter()
            .map(|x| BatchOutcome {
                weight: step.weight(x.confidence, x.pseudo_label, 0, &stats).unwrap(),
                ..*x
            })
            .collect();
        let accepted: Vec<&BatchOutcome> = o.iter().filter(|x| x.confidence >= tau).collect();
        let q = metrics::quantity(&o).unwrap();
        worst = worst.max((q - lambda * accepted.len() as f64 / n as f64).abs());
        let correct = accepted.iter().filter(|x| x.pseudo_label == x.true_label.unwrap()).count();
        match metrics::quality(&o).unwrap() {
            Some(ql) => worst = worst.max((ql - correct as f64 / accepted.len() as f64).abs()),
            None => ensure(accepted.is_empty(), || format!("case {case}: quality undefined"))?,
        }

        let fixed = WeightingScheme::Fixed { lambda_max: lambda };
        let o: Vec<BatchOutcome> = raw
            .iter()
            .map(|x| BatchOutcome {
                weight: fixed.weight(x.confidence, x.pseudo_label, 0, &stats).unwrap(),
                ..*x
            })
            .collect();
        let acc = o.iter().filter(|x| x.pseudo_label == x.true_label.unwrap()).count() as f64 / n as f64;
        worst = worst.max((metrics::quality(&o).unwrap().unwrap() - acc).abs());
        worst = worst.max((metrics::quantity(&o).unwrap() - lambda).abs());
    }
    ensure(worst <= 1e-12, || format!("max abs error {worst:e}"))?;
    Ok(format!("500 cases, max abs err {worst:.1e}"))
}

fn gaussian_properties() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut max_jump: f64 = 0.0;
    for _ in 0..1000 {
        let mu = rng.random_range(0.01..=1.0);
        let var = rng.random_range(1e-4..0.5);
        let n = rng.random_range(1..=3);
        let s = GaussianStats::from_parts(mu, var, 0.999, 0).unwrap();
        let left = truncated_gaussian_weight(mu - 1e-13, &s, 1.0, n).unwrap();
        let right = truncated_gaussian_weight(mu, &s, 1.0, n).unwrap();
        max_jump = max_jump.max((left - right).abs());
    }
    ensure(max_jump < 1e-9, || format!("discontinuity {max_jump:e} at the mean"))?;

    for pair in 0..10_000 {
        let s = GaussianStats::from_parts(rng.random(), rng.random_range(0.0..0.5), 0.999, 0).unwrap();
        let n = rng.random_range(1..=3);
        let lambda = rng.random_range(0.1..5.0);
        let (a, b): (f64, f64) = (rng.random(), rng.random());
        let (lo, hi) = (a.min(b), a.max(b));
        let (wl, wh) = (
            truncated_gaussian_weight(lo, &s, lambda, n).unwrap(),
            truncated_gaussian_weight(hi, &s, lambda, n).unwrap(),
        );
        ensure(wl <= wh, || format!("pair {pair}: w({lo})={wl} > w({hi})={wh}"))?;
        ensure(hi < s.mu_hat() || wh == lambda, || format!("pair {pair}: upper branch {wh} != {lambda}"))?;
        let oracle = common::gaussian_weight(hi, s.mu_hat(), s.var_hat(), lambda, n);
        ensure((wh - oracle).abs() <= 1e-12 * lambda, || format!("pair {pair}: {wh} vs oracle {oracle}"))?;
    }

    let mut symmetric = 0;
    for trial in 0..2000 {
        let lambda = rng.random_range(0.1..5.0);
        let n = rng.random_range(1..=3);
        let scheme = WeightingScheme::TruncatedGaussian { lambda_max: lambda, n_sigma: n };
        let (batch, stats) = if trial % 2 == 0 {
            let b: Vec<f64> = (0..rng.random_range(2..300)).map(|_| rng.random()).collect();
            let s = GaussianStats::new(rng.random_range(2..10), rng.random_range(0.0..1.0))
                .unwrap()
                .updated(&b)
                .unwrap();
            (b, s)
        } else {
            // mirrored pairs, so the batch is symmetric about its mean
            let centre: f64 = rng.random_range(0.3..0.7);
            let mut b = Vec::new();
            for _ in 0..rng.random_range(1..100) {
                let d = rng.random_range(0.0..0.3);
                b.push(centre - d);
                b.push(centre + d);
            }
            let mean = b.iter().sum::<f64>() / b.len() as f64;
            (b, GaussianStats::from_parts(mean, rng.random_range(1e-4..0.3), 0.999, 0).unwrap())
        };
        let o: Vec<BatchOutcome> = batch
            .iter()
            .map(|&c| BatchOutcome::new(c, 0, scheme.weight(c, 0, 0, &stats).unwrap(), None))
            .collect();
        let r = metrics::quantity_lower_bound_check(&o, &stats, 2, &scheme).map_err(|e| e.to_string())?;
        ensure(r.upper_branch_exact, || format!("trial {trial}: above-mean weight below lambda"))?;
        ensure(r.above_fraction_bound, || format!("trial {trial}: quantity {} < lambda*{}", r.quantity, r.above_fraction))?;
        if let Some(half) = r.symmetric_half_bound {
            symmetric += 1;
            ensure(half, || format!("trial {trial}: symmetric quantity {} < lambda/2", r.quantity))?;
        }
    }
    ensure(symmetric >= 500, || format!("only {symmetric} symmetric batches recognised"))?;
    Ok(format!(
        "jump {max_jump:.1e}, 10000 monotone pairs, 2000 bound batches ({symmetric} symmetric)"
    ))
}

fn ema_correctness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let b: Vec<f64> = (0..rng.random_range(2..200)).map(|_| rng.random()).collect();
        let s = GaussianStats::from_parts(rng.random(), rng.random(), 0.0, 0).unwrap().updated(&b).unwrap();
        let (mean, var) = common::ema_step(0.0, 0.0, 0.0, &b);
        worst = worst.max(common::rel_err(s.mu_hat(), mean)).max(common::rel_err(s.var_hat(), var));
    }
    ensure(worst < 1e-13, || format!("m=0 batch statistics off by {worst:e}"))?;

    for m in [0.5, 0.9, 0.99, 0.999] {
        let x: f64 = rng.random();
        let mut s = GaussianStats::new(2, m).unwrap();
        let (gap_mu, gap_var) = ((s.mu_hat() - x).abs(), s.var_hat());
        for k in 1..=2000 {
            s.update(&[x, x]).unwrap();
            let bound = m.powi(k);
            // each update may round by an ulp, so allow k ulps on top of the bound
            let slack = f64::from(k) * f64::EPSILON;
            ensure((s.mu_hat() - x).abs() <= bound * gap_mu + slack, || {
                format!("m={m} k={k}: mean error {} > {}", (s.mu_hat() - x).abs(), bound * gap_mu)
            })?;
            ensure(s.var_hat() <= bound * gap_var + slack, || {
                format!("m={m} k={k}: variance {} > {}", s.var_hat(), bound * gap_var)
            })?;
        }
    }
    Ok(format!("m=0 rel err {worst:.1e}; geometric decay for m in {{0.5,0.9,0.99,0.999}}"))
}

fn ua_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_id: f64 = 0.0;
    let mut worst_mean: f64 = 0.0;
    for _ in 0..1000 {
        let c = rng.random_range(2..=10);
        let p = common::random_simplex(&mut rng, c);
        let est = MarginalEstimate::new(c, 0.999).unwrap();
        let out = uniform_align(&ProbVector::new(p.clone()).unwrap(), &est, &ProbVector::uniform(c)).unwrap();
        for (a, b) in out.as_slice().iter().zip(&p) {
            worst_id = worst_id.max((a - b).abs());
        }

        let batch: Vec<ProbVector> = (0..rng.random_range(1..64))
            .map(|_| ProbVector::new(common::random_simplex(&mut rng, c)).unwrap())
            .collect();
        let mut est = MarginalEstimate::new(c, 0.0).unwrap();
        est.update(&batch).unwrap();
        let u = ProbVector::uniform(c);
        let mut mean = vec![0.0; c];
        for p in &batch {
            for (m, v) in mean.iter_mut().zip(align_unnormalized(p, &est, &u).unwrap()) {
                *m += v / batch.len() as f64;
            }
        }
        for m in mean {
            worst_mean = worst_mean.max((m - 1.0 / c as f64).abs());
        }
    }
    ensure(worst_id < 1e-12, || format!("uniform-marginal identity off by {worst_id:e}"))?;
    ensure(worst_mean < 1e-12, || format!("batch-mean identity off by {worst_mean:e}"))?;

    let mut changes = 0;
    let mut seen = 0;
    for c in [2usize, 3, 5, 10] {
        let mut w = SampleWeighter::new(WeightingScheme::truncated_gaussian(), c, 0.9, false).unwrap();
        let mut a = Aligner::new(AlignmentTarget::Uniform, c, 0.9).unwrap();
        for _ in 0..50 {
            let raw: Vec<Vec<f64>> = (0..50)
                .map(|_| {
                    // skew towards class 0 so the marginal estimate drifts
                    let mut p = common::random_simplex(&mut rng, c);
                    p[0] += 1.0;
                    let s: f64 = p.iter().sum();
                    p.iter().map(|v| v / s).collect()
                })
                .collect();
            let probs = common::pvs(&raw);
            let out = weigh_batch(&mut w, Some(&mut a), AlignMode::Weight, &probs).unwrap();
            for (o, p) in out.outcomes.iter().zip(&raw) {
                seen += 1;
                if o.pseudo_label != common::argmax(p) {
                    changes += 1;
                }
            }
        }
    }
    ensure(changes == 0, || format!("{changes} argmax changes out of {seen}"))?;
    Ok(format!(
        "identity {worst_id:.1e}, batch mean {worst_mean:.1e}, {seen} vectors with 0 label changes"
    ))
}

fn gradient_check() -> Check {
    let start = Instant::now();
    let err = common::max_gradient_error(11);
    let secs = start.elapsed().as_secs_f64();
    ensure(err < 1e-4, || format!("max relative error {err:e}"))?;
    ensure(secs < 5.0, || format!("took {secs:.2}s"))?;
    Ok(format!("2-16-16-2, max rel err {err:.1e}, {secs:.2}s"))
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn two_moons_end_to_end() -> Check {
    let mut acc = Vec::new();
    let mut quality = Vec::new();
    let mut quantity = Vec::new();
    let mut fix_quantity = Vec::new();
    let mut slowest: f64 = 0.0;
    for seed in 0..3u64 {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = seed;
        let (train, eval) = cfg.datasets().map_err(|e| e.to_string())?;
        ensure(train.len() == 1000 && train.num_labeled() == 4, || "dataset shape".into())?;

        let start = Instant::now();
        let run = ssl::run_training(&cfg.train_config().unwrap(), &train, &eval).map_err(|e| e.to_string())?;
        slowest = slowest.max(start.elapsed().as_secs_f64());
        acc.push(1.0 - run.final_eval_error().unwrap());
        quality.push(run.final_quality().unwrap_or(0.0));
        quantity.push(run.final_quantity().unwrap());

        let mut fix = cfg.clone();
        fix.set("scheme", "threshold").unwrap();
        fix.set("tau", "0.95").unwrap();
        fix.set("ua_target", "off").unwrap();
        let run = ssl::run_training(&fix.train_config().unwrap(), &train, &eval).map_err(|e| e.to_string())?;
        fix_quantity.push(run.final_quantity().unwrap());
    }
    let (a, ql, q, fq) = (median(acc.clone()), median(quality), median(quantity), median(fix_quantity));
    let summary = format!(
        "acc {a:.3} (seeds {acc:.3?}), quality {ql:.3}, quantity {q:.3} vs threshold {fq:.3}, slowest {slowest:.1}s"
    );
    ensure(a >= 0.95, || format!("median accuracy below 0.95: {summary}"))?;
    ensure(q >= fq, || format!("quantity below threshold baseline: {summary}"))?;
    ensure(ql >= 0.90, || format!("quality below 0.90: {summary}"))?;
    ensure(slowest < 60.0, || format!("too slow: {summary}"))?;
    Ok(summary)
}

fn baseline_sanity() -> Check {
    let mut cfg = ExperimentConfig::default();
    cfg.set("scheme", "fixed").unwrap();
    cfg.set("lambda_max", "0.8").unwrap();
    cfg.set("eval_interval", "1").unwrap();
    cfg.set("total_steps", "1000").unwrap();
    let (train, eval) = cfg.datasets().map_err(|e| e.to_string())?;
    let run = ssl::run_training(&cfg.train_config().unwrap(), &train, &eval).map_err(|e| e.to_string())?;
    let worst = run.records.iter().map(|r| (r.quantity - 0.8).abs()).fold(0.0, f64::max);
    ensure(worst <= 1e-12 && run.records.len() == 1000, || format!("fixed quantity deviates from lambda by {worst:e}"))?;

    cfg.set("scheme", "threshold").unwrap();
    cfg.set("tau", "0.95").unwrap();
    let run = ssl::run_training(&cfg.train_config().unwrap(), &train, &eval).map_err(|e| e.to_string())?;
    let first = &run.records[0];
    ensure(first.step == 1 && first.quantity < 0.8, || format!("threshold quantity at step 1 = {}", first.quantity))?;
    Ok(format!(
        "fixed quantity within {worst:.1e} of 0.8 on all 1000 steps; threshold step-1 quantity {:.3}",
        first.quantity
    ))
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |name: &str| -> Result<Vec<u8>, String> {
        let out = dir.path().join(name);
        let o = Command::new(env!("CARGO_BIN_EXE_pseudolab"))
            .args(["run", "--out", out.to_str().unwrap(), "--set", "seed=7"])
            .output()
            .map_err(|e| e.to_string())?;
        ensure(o.status.success(), || String::from_utf8_lossy(&o.stderr).into_owned())?;
        std::fs::read(out.join(cli::METRICS_FILE)).map_err(|e| e.to_string())
    };
    let (a, b) = (run("a")?, run("b")?);
    ensure(!a.is_empty() && a == b, || "metrics.csv differs between runs".into())?;
    Ok(format!("two runs, {} identical bytes of metrics.csv", a.len()))
}

fn ablation_sweep() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let start = Instant::now();
    let axes: Vec<Axis> = ["n_sigma=1,2,3", "momentum=0.99,0.999,0.9999", "ua_target=uniform,true,estimated"]
        .iter()
        .map(|a| a.parse().unwrap())
        .collect();
    let report = cli::cmd_sweep(None::<&Path>, &[] as &[&str], None, &axes, false, dir.path()).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<String> = report
        .cells
        .iter()
        .filter(|c| c.exit_code != 0)
        .map(|c| format!("cell {} ({})", c.index, c.status()))
        .collect();
    ensure(report.cells.len() == 27, || format!("{} cells", report.cells.len()))?;
    ensure(failed.is_empty(), || format!("failed: {}", failed.join(", ")))?;
    let summary = std::fs::read_to_string(&report.summary_path).map_err(|e| e.to_string())?;
    ensure(summary.lines().count() == 28, || "summary row count".into())?;
    ensure(secs < 1800.0, || format!("took {secs:.0}s"))?;
    let worst = report
        .cells
        .iter()
        .filter_map(|c| c.outcome.as_ref().ok().and_then(|r| r.final_eval_error))
        .fold(0.0, f64::max);
    Ok(format!("27 cells, 0 failures, worst eval error {worst:.3}, {secs:.1}s"))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("metric oracles", metric_oracles),
        ("scheme-formula equivalence", scheme_equivalence),
        ("truncated-Gaussian properties", gaussian_properties),
        ("EMA correctness", ema_correctness),
        ("alignment identities", ua_identities),
        ("gradient check", gradient_check),
        ("two-moon end-to-end", two_moons_end_to_end),
        ("baseline sanity", baseline_sanity),
        ("run determinism", determinism),
        ("ablation sweep", ablation_sweep),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                failures += 1;
                println!("FAIL {:>2} {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failures} failed", criteria.len() - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
