//! A small fully-connected classifier with hand-derived gradients.
//!
//! ReLU hidden layers, softmax output, SGD with momentum and decoupled weight
//! decay, a truncated cosine learning-rate schedule and parameter EMA.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::prob::ProbVector;

/// Probabilities are clamped to at least this before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Dense affine layer, `y = W x + b` with `W` stored row-major (`outputs x inputs`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.weight.chunks_exact(self.inputs).zip(&self.bias).map(|(row, b)| {
            b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>()
        }));
    }
}

/// Multilayer perceptron; also used as the container for gradients and
/// momentum buffers since they share its shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

impl Mlp {
    /// Uniform fan-in initialization, `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero biases.
    pub fn new(dims: &[usize], seed: u64) -> Result<Self> {
        let mut model = Self::zeros(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in &mut model.layers {
            let bound = (6.0 / layer.inputs as f64).sqrt();
            for w in &mut layer.weight {
                *w = rng.random_range(-bound..bound);
            }
        }
        Ok(model)
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::invalid("an MLP needs at least input and output dimensions"));
        }
        if dims.contains(&0) {
            return Err(Error::invalid("layer dimensions must be positive"));
        }
        Ok(Self {
            layers: dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self.layers.iter().map(|l| Dense::zeros(l.inputs, l.outputs)).collect(),
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].inputs)
            .chain(self.layers.iter().map(|l| l.outputs))
            .collect()
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map(|l| l.outputs).unwrap_or(0)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn params(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weight.iter_mut().chain(l.bias.iter_mut()))
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    fn check_shape(&self, other: &Self) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::invalid(format!(
                "shape mismatch: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.apply(&cur, &mut next);
            if i < last {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    pub fn predict(&self, x: &[f64]) -> Result<ProbVector> {
        checked_softmax(&self.forward(x)?)
    }

    /// Forward pass keeping every layer input for the backward pass.
    /// The last entry holds the logits.
    fn forward_trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut out = Vec::with_capacity(layer.outputs);
            layer.apply(&acts[i], &mut out);
            if i < last {
                out.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(out);
        }
        acts
    }

    /// Accumulates `d loss / d params` into `grads` given `d loss / d logits`.
    fn backward(&self, acts: &[Vec<f64>], dlogits: &[f64], grads: &mut Mlp) {
        let mut delta = dlogits.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let input = &acts[l];
            let g = &mut grads.layers[l];
            for (j, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                g.bias[j] += d;
                let row = &mut g.weight[j * layer.inputs..(j + 1) * layer.inputs];
                for (gw, xi) in row.iter_mut().zip(input) {
                    *gw += d * xi;
                }
            }
            if l > 0 {
                let mut prev = vec![0.0; layer.inputs];
                for (j, &d) in delta.iter().enumerate() {
                    let row = &layer.weight[j * layer.inputs..(j + 1) * layer.inputs];
                    for (p, w) in prev.iter_mut().zip(row) {
                        *p += w * d;
                    }
                }
                // ReLU mask from the post-activation input of this layer.
                for (p, a) in prev.iter_mut().zip(input) {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
    }

    /// Weighted cross-entropy of the model on a batch. Adds the parameter
    /// gradient into `grads` and returns the loss and the predicted
    /// distributions.
    pub fn loss_and_grad(
        &self,
        inputs: &[Vec<f64>],
        targets: &[ProbVector],
        weights: &[f64],
        grads: &mut Mlp,
    ) -> Result<(f64, Vec<ProbVector>)> {
        if inputs.len() != targets.len() {
            return Err(Error::DimensionMismatch {
                expected: inputs.len(),
                actual: targets.len(),
            });
        }
        self.check_shape(grads)?;
        let mut traces = Vec::with_capacity(inputs.len());
        let mut probs = Vec::with_capacity(inputs.len());
        for x in inputs {
            self.check_input(x)?;
            let acts = self.forward_trace(x);
            probs.push(checked_softmax(acts.last().expect("trace has logits"))?);
            traces.push(acts);
        }
        let (loss, dlogits) = weighted_cross_entropy(&probs, targets, weights)?;
        for (acts, d) in traces.iter().zip(&dlogits) {
            self.backward(acts, d, grads);
        }
        Ok((loss, probs))
    }

    /// Text checkpoint; see [`Mlp::from_text`] for the layout.
    pub fn to_text(&self) -> String {
        let mut s = String::from("mlp-checkpoint 1\n");
        let dims: Vec<String> = self.dims().iter().map(|d| d.to_string()).collect();
        writeln!(s, "dims {}", dims.join(" ")).unwrap();
        for (i, layer) in self.layers.iter().enumerate() {
            writeln!(s, "weight {i} {} {}", layer.outputs, layer.inputs).unwrap();
            for row in layer.weight.chunks_exact(layer.inputs) {
                writeln!(s, "{}", join_floats(row)).unwrap();
            }
            writeln!(s, "bias {i} {}", layer.outputs).unwrap();
            writeln!(s, "{}", join_floats(&layer.bias)).unwrap();
        }
        s
    }

    /// Parses the checkpoint layout:
    ///
    /// ```text
    /// mlp-checkpoint 1
    /// dims d0 d1 ... dL
    /// weight <layer> <rows> <cols>   # then <rows> lines of <cols> floats
    /// bias <layer> <len>             # then one line of <len> floats
    /// ```
    ///
    /// Floats use the shortest round-trip decimal form.
    pub fn from_text(text: &str) -> Result<Self> {
        let bad = |line: usize, msg: String| Error::Parse {
            path: "<checkpoint>".into(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let mut next = |what: &str| lines.next().ok_or_else(|| bad(0, format!("unexpected end, expected {what}")));

        let (n, magic) = next("header")?;
        if magic != "mlp-checkpoint 1" {
            return Err(bad(n, format!("bad header `{magic}`")));
        }
        let (n, dims_line) = next("dims")?;
        let dims: Vec<usize> = dims_line
            .strip_prefix("dims ")
            .ok_or_else(|| bad(n, "expected `dims`".into()))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|e| bad(n, format!("{e}"))))
            .collect::<Result<_>>()?;
        let mut model = Self::zeros(&dims).map_err(|e| bad(n, e.to_string()))?;
        for (i, layer) in model.layers.iter_mut().enumerate() {
            let (n, head) = next("weight header")?;
            let expect = format!("weight {i} {} {}", layer.outputs, layer.inputs);
            if head != expect {
                return Err(bad(n, format!("expected `{expect}`, got `{head}`")));
            }
            for r in 0..layer.outputs {
                let (n, row) = next("weight row")?;
                let vals = parse_floats(row, layer.inputs).map_err(|m| bad(n, m))?;
                layer.weight[r * layer.inputs..(r + 1) * layer.inputs].copy_from_slice(&vals);
            }
            let (n, head) = next("bias header")?;
            let expect = format!("bias {i} {}", layer.outputs);
            if head != expect {
                return Err(bad(n, format!("expected `{expect}`, got `{head}`")));
            }
            let (n, row) = next("bias row")?;
            layer.bias = parse_floats(row, layer.outputs).map_err(|m| bad(n, m))?;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| match e {
            Error::Parse { line, msg, .. } => Error::Parse {
                path: path.into(),
                line,
                msg,
            },
            other => other,
        })
    }
}

fn join_floats(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

fn parse_floats(line: &str, expected: usize) -> std::result::Result<Vec<f64>, String> {
    let vals: Vec<f64> = line
        .split_whitespace()
        .map(|t| t.parse::<f64>().map_err(|e| format!("`{t}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    if vals.len() != expected {
        return Err(format!("expected {expected} values, got {}", vals.len()));
    }
    Ok(vals)
}

/// Softmax that reports non-finite logits instead of panicking. The step in
/// the error is 0; the training loop fills in its own.
fn checked_softmax(logits: &[f64]) -> Result<ProbVector> {
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite {
            step: 0,
            detail: "non-finite logits".into(),
        });
    }
    Ok(softmax(logits))
}

/// Max-shifted softmax. Logits must be finite.
pub fn softmax(logits: &[f64]) -> ProbVector {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    ProbVector::normalized(exps).expect("softmax of finite logits")
}

/// `(1/B) * sum_i w_i * H(target_i, prob_i)` and its gradient with respect
/// to each logit vector, `(w_i / B) * (prob_i - target_i)`.
pub fn weighted_cross_entropy(
    probs: &[ProbVector],
    targets: &[ProbVector],
    weights: &[f64],
) -> Result<(f64, Vec<Vec<f64>>)> {
    let b = probs.len();
    if targets.len() != b {
        return Err(Error::DimensionMismatch {
            expected: b,
            actual: targets.len(),
        });
    }
    if weights.len() != b {
        return Err(Error::DimensionMismatch {
            expected: b,
            actual: weights.len(),
        });
    }
    if b == 0 {
        return Ok((0.0, Vec::new()));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0 && w.is_finite())) {
        return Err(Error::invalid(format!("sample weight {w} must be finite and non-negative")));
    }
    let scale = 1.0 / b as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(b);
    for ((p, t), &w) in probs.iter().zip(targets).zip(weights) {
        if p.num_classes() != t.num_classes() {
            return Err(Error::DimensionMismatch {
                expected: p.num_classes(),
                actual: t.num_classes(),
            });
        }
        if w == 0.0 {
            grads.push(vec![0.0; p.num_classes()]);
            continue;
        }
        let h: f64 = t
            .as_slice()
            .iter()
            .zip(p.as_slice())
            .filter(|(ti, _)| **ti > 0.0)
            .map(|(ti, pi)| -ti * pi.max(PROB_FLOOR).ln())
            .sum();
        loss += w * h;
        grads.push(
            p.as_slice()
                .iter()
                .zip(t.as_slice())
                .map(|(pi, ti)| w * scale * (pi - ti))
                .collect(),
        );
    }
    Ok((loss * scale, grads))
}

/// `lr0 * cos(7 pi k / (16 K))`.
pub fn cosine_lr(step: u64, total_steps: u64, lr0: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::invalid("total_steps must be positive"));
    }
    if step > total_steps {
        return Err(Error::invalid(format!("step {step} exceeds total_steps {total_steps}")));
    }
    Ok(lr0 * (7.0 * PI * step as f64 / (16.0 * total_steps as f64)).cos())
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub total_steps: u64,
    step: u64,
    velocity: Mlp,
}

impl OptimizerState {
    pub fn new(model: &Mlp, lr0: f64, momentum: f64, weight_decay: f64, total_steps: u64) -> Result<Self> {
        if !(lr0 >= 0.0 && lr0.is_finite()) {
            return Err(Error::invalid(format!("learning rate {lr0} must be non-negative")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::invalid(format!("SGD momentum {momentum} outside [0, 1)")));
        }
        if !(weight_decay >= 0.0 && weight_decay.is_finite()) {
            return Err(Error::invalid(format!("weight decay {weight_decay} must be non-negative")));
        }
        if total_steps == 0 {
            return Err(Error::invalid("total_steps must be positive"));
        }
        Ok(Self {
            lr0,
            momentum,
            weight_decay,
            total_steps,
            step: 0,
            velocity: model.zeros_like(),
        })
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> Result<f64> {
        cosine_lr(self.step, self.total_steps, self.lr0)
    }
}

/// One SGD step at the scheduled rate: `v = mu v + g`,
/// `theta = theta - lr (v + wd theta)`.
pub fn sgd_step(model: &mut Mlp, grads: &Mlp, opt: &mut OptimizerState) -> Result<()> {
    model.check_shape(grads)?;
    model.check_shape(&opt.velocity)?;
    let lr = opt.current_lr()?;
    let (mu, wd) = (opt.momentum, opt.weight_decay);
    for ((p, g), v) in model.params_mut().zip(grads.params()).zip(opt.velocity.params_mut()) {
        *v = mu * *v + g;
        *p -= lr * (*v + wd * *p);
    }
    opt.step += 1;
    Ok(())
}

/// `ema = decay * ema + (1 - decay) * model`, elementwise.
pub fn ema_update(ema: &mut Mlp, model: &Mlp, decay: f64) -> Result<()> {
    ema.check_shape(model)?;
    if !(0.0..=1.0).contains(&decay) {
        return Err(Error::invalid(format!("EMA momentum {decay} outside [0, 1]")));
    }
    for (e, p) in ema.params_mut().zip(model.params()) {
        *e = decay * *e + (1.0 - decay) * p;
    }
    Ok(())
}
