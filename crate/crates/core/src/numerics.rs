//! Small differentiable models, softmax cross-entropy, analytic gradients and
//! the client-side SGD loop (with the optional proximal term).
//!
//! Parameter layout is layer-major and row-major within a layer:
//!
//! * logistic (`hidden == 0`): `W (C x d)`, then `b (C)`
//! * MLP (`hidden > 0`): `W1 (h x d)`, `b1 (h)`, `W2 (C x h)`, `b2 (C)`,
//!   with a tanh hidden activation.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Model architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arch {
    pub input_dim: usize,
    /// Hidden width; 0 selects plain logistic regression.
    #[serde(default)]
    pub hidden: usize,
    pub classes: usize,
}

impl Arch {
    pub fn logistic(input_dim: usize, classes: usize) -> Self {
        Self { input_dim, hidden: 0, classes }
    }

    pub fn mlp(input_dim: usize, hidden: usize, classes: usize) -> Self {
        Self { input_dim, hidden, classes }
    }

    pub fn param_count(&self) -> usize {
        let (d, h, c) = (self.input_dim, self.hidden, self.classes);
        if h == 0 {
            c * d + c
        } else {
            h * d + h + c * h + c
        }
    }
}

/// Flat model weights tagged with their architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    arch: Arch,
    values: Vec<f64>,
}

impl ModelParams {
    pub fn new(arch: Arch, values: Vec<f64>) -> Result<Self> {
        if values.len() != arch.param_count() {
            return Err(Error::Dimension(format!(
                "{} values for an architecture with {} parameters",
                values.len(),
                arch.param_count()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(Self { arch, values })
    }

    pub fn zeros(arch: Arch) -> Self {
        Self { arch, values: vec![0.0; arch.param_count()] }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` per layer, biases included.
    pub fn init(arch: Arch, rng: &mut impl Rng) -> Self {
        let mut values = Vec::with_capacity(arch.param_count());
        let mut layer = |rows: usize, fan_in: usize, values: &mut Vec<f64>| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for _ in 0..rows * fan_in + rows {
                values.push(rng.random_range(-bound..=bound));
            }
        };
        if arch.hidden == 0 {
            layer(arch.classes, arch.input_dim, &mut values);
        } else {
            layer(arch.hidden, arch.input_dim, &mut values);
            layer(arch.classes, arch.hidden, &mut values);
        }
        Self { arch, values }
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Same architecture, new values. Panics on length mismatch; callers
    /// derive `values` from a model of the same architecture.
    pub fn with_values(&self, values: Vec<f64>) -> ModelParams {
        assert_eq!(values.len(), self.values.len(), "parameter length mismatch");
        ModelParams { arch: self.arch, values }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn distance_sq(&self, other: &ModelParams) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    /// `self - other`, element-wise.
    pub fn delta(&self, other: &ModelParams) -> Vec<f64> {
        self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect()
    }

    pub fn check_same_arch(&self, other: &ModelParams) -> Result<()> {
        if self.arch != other.arch {
            return Err(Error::Dimension(format!("architecture mismatch: {:?} vs {:?}", self.arch, other.arch)));
        }
        Ok(())
    }

    /// Little-endian bytes of every value; used for bit-identity checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.values.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

/// Mean cross-entropy and 0/1 accuracy over a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalResult {
    pub loss: f64,
    pub accuracy: f64,
}

fn check_data(params: &ModelParams, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation dataset".into()));
    }
    let arch = params.arch();
    if data.dim() != arch.input_dim {
        return Err(Error::Dimension(format!("data has {} features, model expects {}", data.dim(), arch.input_dim)));
    }
    if data.classes() > arch.classes {
        return Err(Error::Dimension(format!("data has {} classes, model outputs {}", data.classes(), arch.classes)));
    }
    Ok(())
}

/// Logits for one input, writing hidden activations into `hidden_out`.
fn logits(params: &ModelParams, x: &[f64], hidden_out: &mut [f64], out: &mut [f64]) {
    let Arch { input_dim: d, hidden: h, classes: c } = params.arch;
    let w = &params.values;
    if h == 0 {
        let (wm, b) = w.split_at(c * d);
        for k in 0..c {
            let row = &wm[k * d..(k + 1) * d];
            out[k] = b[k] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
        }
    } else {
        let (w1, rest) = w.split_at(h * d);
        let (b1, rest) = rest.split_at(h);
        let (w2, b2) = rest.split_at(c * h);
        for j in 0..h {
            let row = &w1[j * d..(j + 1) * d];
            hidden_out[j] = (b1[j] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()).tanh();
        }
        for k in 0..c {
            let row = &w2[k * h..(k + 1) * h];
            out[k] = b2[k] + row.iter().zip(hidden_out.iter()).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

/// In-place softmax; returns log-sum-exp of the input logits.
fn softmax_in_place(z: &mut [f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
    max + sum.ln()
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = k;
        }
    }
    best
}

/// Mean softmax cross-entropy and accuracy (argmax, ties to the lowest class).
pub fn forward_loss(params: &ModelParams, data: &Dataset) -> Result<EvalResult> {
    check_data(params, data)?;
    let arch = params.arch();
    let mut hidden = vec![0.0; arch.hidden];
    let mut z = vec![0.0; arch.classes];
    let mut loss = 0.0;
    let mut correct = 0usize;
    for i in 0..data.len() {
        logits(params, data.row(i), &mut hidden, &mut z);
        let y = data.labels()[i];
        if argmax(&z) == y {
            correct += 1;
        }
        let zy = z[y];
        let lse = softmax_in_place(&mut z);
        loss += lse - zy;
    }
    let n = data.len() as f64;
    Ok(EvalResult { loss: loss / n, accuracy: correct as f64 / n })
}

/// Mean loss and its gradient over `rows` (all rows when `None`).
pub fn loss_and_gradient(params: &ModelParams, data: &Dataset, rows: Option<&[usize]>) -> Result<(f64, Vec<f64>)> {
    check_data(params, data)?;
    let Arch { input_dim: d, hidden: h, classes: c } = params.arch;
    let mut grad = vec![0.0; params.values.len()];
    let mut hidden = vec![0.0; h];
    let mut z = vec![0.0; c];
    let mut dhidden = vec![0.0; h];
    let mut loss = 0.0;

    let all: Vec<usize>;
    let rows = match rows {
        Some(r) => r,
        None => {
            all = (0..data.len()).collect();
            &all
        }
    };
    if rows.is_empty() {
        return Err(Error::Empty("gradient batch".into()));
    }

    for &i in rows {
        let x = data.row(i);
        let y = data.labels()[i];
        logits(params, x, &mut hidden, &mut z);
        let zy = z[y];
        loss += softmax_in_place(&mut z) - zy;
        // z now holds softmax; dL/dz = p - onehot(y)
        z[y] -= 1.0;
        if h == 0 {
            let (gw, gb) = grad.split_at_mut(c * d);
            for k in 0..c {
                let dz = z[k];
                for j in 0..d {
                    gw[k * d + j] += dz * x[j];
                }
                gb[k] += dz;
            }
        } else {
            let w2 = &params.values[h * d + h..h * d + h + c * h];
            let (gw1, rest) = grad.split_at_mut(h * d);
            let (gb1, rest) = rest.split_at_mut(h);
            let (gw2, gb2) = rest.split_at_mut(c * h);
            dhidden.iter_mut().for_each(|v| *v = 0.0);
            for k in 0..c {
                let dz = z[k];
                for j in 0..h {
                    gw2[k * h + j] += dz * hidden[j];
                    dhidden[j] += w2[k * h + j] * dz;
                }
                gb2[k] += dz;
            }
            for j in 0..h {
                let dpre = dhidden[j] * (1.0 - hidden[j] * hidden[j]);
                for m in 0..d {
                    gw1[j * d + m] += dpre * x[m];
                }
                gb1[j] += dpre;
            }
        }
    }
    let n = rows.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((loss / n, grad))
}

/// Gradient of `f(w) + mu/2 * ||w - anchor||^2` over the full dataset.
pub fn gradient(
    params: &ModelParams,
    data: &Dataset,
    proximal_anchor: Option<&ModelParams>,
    mu: f64,
) -> Result<Vec<f64>> {
    let (_, mut g) = loss_and_gradient(params, data, None)?;
    add_proximal(&mut g, params, proximal_anchor, mu)?;
    Ok(g)
}

fn add_proximal(g: &mut [f64], params: &ModelParams, anchor: Option<&ModelParams>, mu: f64) -> Result<()> {
    if mu < 0.0 || !mu.is_finite() {
        return Err(Error::config("mu", "proximal coefficient must be a finite value >= 0"));
    }
    if mu == 0.0 {
        return Ok(());
    }
    let anchor = anchor.ok_or_else(|| Error::config("mu", "mu > 0 requires a proximal anchor"))?;
    params.check_same_arch(anchor)?;
    for ((gi, w), a) in g.iter_mut().zip(&params.values).zip(&anchor.values) {
        *gi += mu * (w - a);
    }
    Ok(())
}

/// Client optimiser settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingHyperParams {
    /// Learning rate.
    pub eta: f64,
    /// Multiplicative learning-rate decay applied after each full pass.
    #[serde(default = "one")]
    pub lambda_decay: f64,
    /// Momentum.
    #[serde(default)]
    pub nu: f64,
    /// Proximal coefficient; 0 disables the FedProx term.
    #[serde(default)]
    pub mu: f64,
    /// Local minibatch steps per round.
    pub tau: usize,
    /// Minibatch size; 0 means full batch.
    #[serde(default)]
    pub batch_size: usize,
}

fn one() -> f64 {
    1.0
}

impl TrainingHyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::config("eta", "learning rate must be finite and >= 0"));
        }
        if !(self.lambda_decay > 0.0 && self.lambda_decay <= 1.0) {
            return Err(Error::config("lambda_decay", "must lie in (0, 1]"));
        }
        if !(self.nu >= 0.0 && self.nu < 1.0) {
            return Err(Error::config("nu", "momentum must lie in [0, 1)"));
        }
        if !(self.mu >= 0.0) || !self.mu.is_finite() {
            return Err(Error::config("mu", "must be finite and >= 0"));
        }
        if self.tau == 0 {
            return Err(Error::config("tau", "need at least one local step"));
        }
        Ok(())
    }

    /// Learning rate during pass `epoch` (0-based).
    pub fn effective_lr(&self, epoch: usize) -> f64 {
        self.eta * self.lambda_decay.powi(epoch as i32)
    }
}

/// `tau` SGD steps with momentum from `start`. Minibatches come from a fresh
/// shuffle of the client's rows at the start of each pass; a full-batch run
/// uses rows in natural order and never touches `rng`. With `mu > 0` every
/// gradient carries the proximal pull toward `start`.
pub fn local_train(
    start: &ModelParams,
    data: &Dataset,
    hp: &TrainingHyperParams,
    rng: &mut impl Rng,
) -> Result<ModelParams> {
    hp.validate()?;
    check_data(start, data)?;
    let n = data.len();
    let batch = if hp.batch_size == 0 { n } else { hp.batch_size.min(n) };
    let steps_per_epoch = n.div_ceil(batch);
    let mut order: Vec<usize> = (0..n).collect();
    let mut w = start.clone();
    let mut velocity = vec![0.0; w.values.len()];

    for step in 0..hp.tau {
        let epoch = step / steps_per_epoch;
        let pos = step % steps_per_epoch;
        if pos == 0 && batch < n {
            order.shuffle(rng);
        }
        let rows = &order[pos * batch..((pos + 1) * batch).min(n)];
        let (_, mut g) = loss_and_gradient(&w, data, Some(rows))?;
        add_proximal(&mut g, &w, Some(start), hp.mu)?;
        let lr = hp.effective_lr(epoch);
        for ((wi, vi), gi) in w.values.iter_mut().zip(velocity.iter_mut()).zip(&g) {
            *vi = hp.nu * *vi + gi;
            *wi -= lr * *vi;
        }
        if !w.is_finite() {
            return Err(Error::NonFinite(format!("local training step {step}")));
        }
    }
    Ok(w)
}
