//! Reference implementations used as test oracles. They are written from the
//! formulas directly and share no code with the library beyond plain data.

#![allow(dead_code)]

use pseudolab::metrics::BatchOutcome;
use pseudolab::nn::Mlp;
use pseudolab::ProbVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `sum_i w_i / N`, accumulated in index order after sorting by weight so
/// the summation order differs from the library's.
pub fn quantity(o: &[BatchOutcome]) -> f64 {
    let mut w: Vec<f64> = o.iter().map(|x| x.weight).collect();
    w.sort_by(f64::total_cmp);
    w.iter().sum::<f64>() / o.len() as f64
}

/// Bucket the weight of correct and wrong pseudo-labels separately.
pub fn quality(o: &[BatchOutcome]) -> Option<f64> {
    let mut right = 0.0;
    let mut wrong = 0.0;
    for x in o {
        if x.pseudo_label == x.true_label.expect("oracle needs truth") {
            right += x.weight;
        } else {
            wrong += x.weight;
        }
    }
    let total = right + wrong;
    (total > 0.0).then(|| right / total)
}

pub fn pmf(o: &[BatchOutcome]) -> Vec<f64> {
    let total: f64 = o.iter().map(|x| x.weight).sum();
    o.iter().map(|x| x.weight / total).collect()
}

pub fn per_class_quality(o: &[BatchOutcome], c: usize) -> Vec<Option<f64>> {
    (0..c)
        .map(|k| {
            let sub: Vec<BatchOutcome> = o.iter().filter(|x| x.pseudo_label == k).copied().collect();
            if sub.is_empty() {
                None
            } else {
                quality(&sub)
            }
        })
        .collect()
}

/// Truncated Gaussian written with the `n_sigma` factor moved into the
/// numerator: `λ exp(-n² (c - μ)² / (2 v))` below the mean.
pub fn gaussian_weight(conf: f64, mu: f64, var: f64, lambda: f64, n_sigma: u32) -> f64 {
    if conf >= mu {
        return lambda;
    }
    let n2 = f64::from(n_sigma).powi(2);
    let v = var.max(1e-12 * n2);
    lambda * (-(n2 * (conf - mu).powi(2)) / (2.0 * v)).exp()
}

/// One EMA step with the unbiased (two-pass) sample variance.
pub fn ema_step(mu: f64, var: f64, m: f64, batch: &[f64]) -> (f64, f64) {
    let n = batch.len() as f64;
    let mean = batch.iter().sum::<f64>() / n;
    let sample_var = batch.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (m * mu + (1.0 - m) * mean, m * var + (1.0 - m) * sample_var)
}

/// `p_c · t_c / m_c`, renormalized.
pub fn align(p: &[f64], marginal: &[f64], target: &[f64]) -> Vec<f64> {
    let raw: Vec<f64> = p
        .iter()
        .zip(marginal)
        .zip(target)
        .map(|((a, m), t)| a * t / m.max(1e-8))
        .collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

/// Forward pass through the public layer data, ReLU between layers, softmax
/// at the end computed with the log-sum-exp form.
pub fn forward(model: &Mlp, x: &[f64]) -> Vec<f64> {
    let mut a = x.to_vec();
    let n = model.layers().len();
    for (l, layer) in model.layers().iter().enumerate() {
        let mut z = vec![0.0; layer.outputs];
        for j in 0..layer.outputs {
            let mut s = layer.bias[j];
            for i in 0..layer.inputs {
                s += layer.weight[j * layer.inputs + i] * a[i];
            }
            z[j] = if l + 1 < n { s.max(0.0) } else { s };
        }
        a = z;
    }
    let max = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + a.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    a.iter().map(|z| (z - lse).exp()).collect()
}

/// `(1/B) Σ w_i · (-Σ_c t_ic log p_ic)` under [`forward`].
pub fn weighted_ce(model: &Mlp, xs: &[Vec<f64>], targets: &[Vec<f64>], weights: &[f64]) -> f64 {
    let b = xs.len() as f64;
    xs.iter()
        .zip(targets)
        .zip(weights)
        .map(|((x, t), w)| {
            let p = forward(model, x);
            w * t.iter().zip(&p).map(|(ti, pi)| if *ti > 0.0 { -ti * pi.ln() } else { 0.0 }).sum::<f64>()
        })
        .sum::<f64>()
        / b
}

/// Random point on the simplex.
pub fn random_simplex<R: Rng>(rng: &mut R, c: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..c).map(|_| -rng.random::<f64>().max(1e-300).ln()).collect();
    let s: f64 = raw.iter().sum();
    raw.iter().map(|v| v / s).collect()
}

/// Random batch of outcomes with truth attached.
pub fn random_outcomes<R: Rng>(rng: &mut R, n: usize, c: usize) -> Vec<BatchOutcome> {
    (0..n)
        .map(|_| {
            BatchOutcome::new(
                rng.random::<f64>(),
                rng.random_range(0..c),
                rng.random::<f64>() * 2.0,
                Some(rng.random_range(0..c)),
            )
        })
        .collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
    }
}

/// Labeled one-hot batch plus a weighted soft-target batch, summed the way
/// the trainer sums L_s and L_u.
pub struct Problem {
    xs_l: Vec<Vec<f64>>,
    ys_l: Vec<Vec<f64>>,
    xs_u: Vec<Vec<f64>>,
    ys_u: Vec<Vec<f64>>,
    w_u: Vec<f64>,
}

pub fn problem(seed: u64) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pts = |n: usize| -> Vec<Vec<f64>> {
        (0..n).map(|_| vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]).collect()
    };
    let xs_l = pts(5);
    let xs_u = pts(12);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let ys_l = (0..5)
        .map(|_| {
            let k = rng.random_range(0..2);
            (0..2).map(|c| f64::from(u8::from(c == k))).collect()
        })
        .collect();
    let ys_u = (0..12).map(|_| random_simplex(&mut rng, 2)).collect();
    let w_u = (0..12).map(|_| rng.random::<f64>()).collect();
    Problem {
        xs_l,
        ys_l,
        xs_u,
        ys_u,
        w_u,
    }
}

pub fn oracle_loss(m: &Mlp, p: &Problem) -> f64 {
    weighted_ce(m, &p.xs_l, &p.ys_l, &vec![1.0; p.xs_l.len()]) + weighted_ce(m, &p.xs_u, &p.ys_u, &p.w_u)
}

pub fn pvs(v: &[Vec<f64>]) -> Vec<ProbVector> {
    v.iter().map(|t| ProbVector::new(t.clone()).unwrap()).collect()
}

/// Max relative error of the analytic gradient against central differences.
pub fn max_gradient_error(seed: u64) -> f64 {
    let mut model = Mlp::new(&[2, 16, 16, 2], seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for (i, p) in model.params_mut().enumerate() {
        // non-zero biases, so no hidden unit sits exactly at the ReLU kink
        *p += rng.random_range(-0.3..0.3) * if i % 2 == 0 { 1.0 } else { 0.5 };
    }
    let prob = problem(seed);
    let mut grads = model.zeros_like();
    let (ls, _) = model
        .loss_and_grad(&prob.xs_l, &pvs(&prob.ys_l), &vec![1.0; prob.xs_l.len()], &mut grads)
        .unwrap();
    let (lu, _) = model.loss_and_grad(&prob.xs_u, &pvs(&prob.ys_u), &prob.w_u, &mut grads).unwrap();
    assert!((ls + lu - oracle_loss(&model, &prob)).abs() < 1e-12);

    let analytic: Vec<f64> = grads.params().copied().collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, g) in analytic.iter().enumerate() {
        let mut plus = model.clone();
        *plus.params_mut().nth(k).unwrap() += h;
        let mut minus = model.clone();
        *minus.params_mut().nth(k).unwrap() -= h;
        let numeric = (oracle_loss(&plus, &prob) - oracle_loss(&minus, &prob)) / (2.0 * h);
        let err = (g - numeric).abs() / g.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}
