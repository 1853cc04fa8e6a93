//! Small dense models with hand-derived backpropagation, and the softmax /
//! cross-entropy / KL kernels shared by every training rule.
//!
//! Parameters live in one flat [`ParamVector`]. Layer `l` stores its weight
//! matrix (`out x in`, row-major) followed by its bias (`out`).

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound applied to probabilities before taking a logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub name: String,
    pub dims: Vec<usize>,
}

impl LayerShape {
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

/// Flat parameter storage with per-layer shape metadata.
///
/// Also used for momenta, model differences and gradients, which all live in
/// the same space as the model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    shapes: Vec<LayerShape>,
}

impl ParamVector {
    pub fn zeros(shapes: Vec<LayerShape>) -> Self {
        let n = shapes.iter().map(LayerShape::numel).sum();
        ParamVector {
            values: vec![0.0; n],
            shapes,
        }
    }

    pub fn from_values(shapes: Vec<LayerShape>, values: Vec<f64>) -> Result<Self> {
        let n: usize = shapes.iter().map(LayerShape::numel).sum();
        if n != values.len() {
            return Err(Error::config(format!(
                "parameter length {} does not match shapes ({} expected)",
                values.len(),
                n
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::input("parameter values must be finite"));
        }
        Ok(ParamVector { values, shapes })
    }

    pub fn zeros_like(&self) -> Self {
        ParamVector {
            values: vec![0.0; self.values.len()],
            shapes: self.shapes.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    pub fn same_shape(&self, other: &ParamVector) -> bool {
        self.shapes == other.shapes
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `self += a * other`
    pub fn add_scaled(&mut self, a: f64, other: &ParamVector) {
        debug_assert_eq!(self.len(), other.len());
        for (x, y) in self.values.iter_mut().zip(&other.values) {
            *x += a * y;
        }
    }

    pub fn scale(&mut self, a: f64) {
        for x in &mut self.values {
            *x *= a;
        }
    }

    /// `self - other`
    pub fn sub(&self, other: &ParamVector) -> ParamVector {
        debug_assert_eq!(self.len(), other.len());
        ParamVector {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
            shapes: self.shapes.clone(),
        }
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn norm_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::input(format!(
                "matrix data length {} is not {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Logistic,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation and the output.
    fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - out * out,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub num_classes: usize,
    pub activation: Activation,
}

impl ModelSpec {
    pub fn logistic(input_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Logistic,
            input_dim,
            hidden: Vec::new(),
            num_classes,
            activation: Activation::Relu,
        }
    }

    pub fn mlp(
        input_dim: usize,
        hidden: Vec<usize>,
        num_classes: usize,
        activation: Activation,
    ) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp,
            input_dim,
            hidden,
            num_classes,
            activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("model needs at least 2 classes"));
        }
        if self.input_dim == 0 {
            return Err(Error::config("input dimension must be positive"));
        }
        match self.kind {
            ModelKind::Logistic if !self.hidden.is_empty() => {
                Err(Error::config("logistic model takes no hidden layers"))
            }
            ModelKind::Mlp if self.hidden.is_empty() => {
                Err(Error::config("mlp needs at least one hidden layer"))
            }
            _ if self.hidden.contains(&0) => {
                Err(Error::config("hidden layer widths must be positive"))
            }
            _ => Ok(()),
        }
    }

    /// `(fan_in, fan_out)` per layer, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = Vec::with_capacity(self.hidden.len() + 2);
        widths.push(self.input_dim);
        widths.extend_from_slice(&self.hidden);
        widths.push(self.num_classes);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn shapes(&self) -> Vec<LayerShape> {
        self.layer_dims()
            .iter()
            .enumerate()
            .flat_map(|(l, &(fan_in, fan_out))| {
                [
                    LayerShape {
                        name: format!("fc{l}.weight"),
                        dims: vec![fan_out, fan_in],
                    },
                    LayerShape {
                        name: format!("fc{l}.bias"),
                        dims: vec![fan_out],
                    },
                ]
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|&(i, o)| o * i + o).sum()
    }

    pub fn zeros(&self) -> ParamVector {
        ParamVector::zeros(self.shapes())
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut values = Vec::with_capacity(self.param_count());
        for (fan_in, fan_out) in self.layer_dims() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            values.extend((0..fan_out * fan_in + fan_out).map(|_| dist.sample(rng)));
        }
        ParamVector {
            values,
            shapes: self.shapes(),
        }
    }

    fn check(&self, params: &ParamVector, batch: &Batch) -> Result<()> {
        if params.shapes() != self.shapes().as_slice() {
            return Err(Error::config("parameter shapes do not match the model"));
        }
        if batch.features.cols != self.input_dim {
            return Err(Error::config(format!(
                "batch has {} features, model expects {}",
                batch.features.cols, self.input_dim
            )));
        }
        Ok(())
    }
}

/// Mini-batch of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Matrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Matrix, labels: Vec<usize>) -> Result<Self> {
        if features.rows != labels.len() {
            return Err(Error::input(format!(
                "{} feature rows but {} labels",
                features.rows,
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::input("batch must hold at least one sample"));
        }
        Ok(Batch { features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Ce,
    Combined,
}

/// Training objective: plain cross-entropy, or `(1-λ)·CE + λ·KL(p̂ ‖ p_τ)`,
/// optionally with an L2 penalty `weight_decay/2 · ‖θ‖²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub lambda: f64,
    pub tau: f64,
    pub weight_decay: f64,
}

impl LossSpec {
    pub fn ce() -> Self {
        LossSpec {
            kind: LossKind::Ce,
            lambda: 0.0,
            tau: 1.0,
            weight_decay: 0.0,
        }
    }

    pub fn combined(lambda: f64, tau: f64) -> Self {
        LossSpec {
            kind: LossKind::Combined,
            lambda,
            tau,
            weight_decay: 0.0,
        }
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config(format!(
                "lambda {} outside [0, 1]",
                self.lambda
            )));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::config(format!(
                "temperature {} must be positive",
                self.tau
            )));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::config("weight decay must be non-negative"));
        }
        Ok(())
    }
}

/// Per-layer activations kept for the backward pass.
struct Trace {
    /// `inputs[l]` is the input to layer `l` (row-major, n x fan_in).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of hidden layers.
    pre: Vec<Vec<f64>>,
    logits: Matrix,
}

fn forward_trace(spec: &ModelSpec, params: &ParamVector, x: &Matrix) -> Trace {
    let dims = spec.layer_dims();
    let n = x.rows;
    let w = params.values();
    let mut inputs = Vec::with_capacity(dims.len());
    let mut pre = Vec::with_capacity(dims.len().saturating_sub(1));
    let mut current = x.data.clone();
    let mut offset = 0;
    for (l, &(fan_in, fan_out)) in dims.iter().enumerate() {
        let weight = &w[offset..offset + fan_out * fan_in];
        let bias = &w[offset + fan_out * fan_in..offset + fan_out * fan_in + fan_out];
        offset += fan_out * fan_in + fan_out;
        let mut z = vec![0.0; n * fan_out];
        for s in 0..n {
            let a = &current[s * fan_in..(s + 1) * fan_in];
            for o in 0..fan_out {
                let row = &weight[o * fan_in..(o + 1) * fan_in];
                let mut acc = bias[o];
                for (wi, ai) in row.iter().zip(a) {
                    acc += wi * ai;
                }
                z[s * fan_out + o] = acc;
            }
        }
        let last = l + 1 == dims.len();
        let next = if last {
            z.clone()
        } else {
            z.iter().map(|&v| spec.activation.apply(v)).collect()
        };
        inputs.push(std::mem::replace(&mut current, next));
        if !last {
            pre.push(z);
        }
    }
    Trace {
        inputs,
        pre,
        logits: Matrix {
            rows: n,
            cols: spec.num_classes,
            data: current,
        },
    }
}

/// Logits `f(x | θ)` for every row of the batch.
pub fn forward(spec: &ModelSpec, params: &ParamVector, batch: &Batch) -> Result<Matrix> {
    spec.check(params, batch)?;
    let logits = forward_trace(spec, params, &batch.features).logits;
    if logits.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::input("forward pass produced non-finite logits"));
    }
    Ok(logits)
}

/// Temperature softmax `exp(z_i/τ) / Σ_j exp(z_j/τ)`, max-shifted.
pub fn softmax_temp(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::config(format!("temperature {tau} must be positive")));
    }
    if logits.is_empty() {
        return Err(Error::input("softmax of an empty vector"));
    }
    Ok(softmax_unchecked(logits, tau))
}

fn softmax_unchecked(logits: &[f64], tau: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| ((z - max) / tau).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// Cross-entropy at unit temperature and its gradient w.r.t. the logits.
pub fn ce_loss_grad(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::input(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let mut p = softmax_temp(logits, 1.0)?;
    let loss = -p[label].max(PROB_FLOOR).ln();
    p[label] -= 1.0;
    Ok((loss, p))
}

pub(crate) fn check_distribution(p: &[f64]) -> Result<()> {
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(Error::input(
            "probability vector has a negative or non-finite entry",
        ));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::input(format!(
            "probability vector sums to {sum}, not 1"
        )));
    }
    Ok(())
}

/// `KL(p̂ ‖ softmax(z/τ))` and its gradient `(p − p̂)/τ` w.r.t. the student
/// logits `z`. The target is treated as a constant.
pub fn kl_loss_grad(logits: &[f64], target: &[f64], tau: f64) -> Result<(f64, Vec<f64>)> {
    if logits.len() != target.len() {
        return Err(Error::input(
            "target length differs from the number of classes",
        ));
    }
    check_distribution(target)?;
    let p = softmax_temp(logits, tau)?;
    let loss = p
        .iter()
        .zip(target)
        .filter(|(_, &t)| t > 0.0)
        .map(|(&pi, &t)| t * (t.ln() - pi.max(PROB_FLOOR).ln()))
        .sum();
    let grad = p.iter().zip(target).map(|(pi, t)| (pi - t) / tau).collect();
    Ok((loss, grad))
}

/// Per-sample loss and logit gradient for the given objective (without the
/// weight-decay term).
fn sample_loss_grad(
    loss: &LossSpec,
    logits: &[f64],
    label: usize,
    target: Option<&[f64]>,
) -> Result<(f64, Vec<f64>)> {
    let (ce, mut g) = ce_loss_grad(logits, label)?;
    match loss.kind {
        LossKind::Ce => Ok((ce, g)),
        LossKind::Combined => {
            let target = target.ok_or_else(|| Error::config("combined loss needs targets"))?;
            let (kl, gk) = kl_loss_grad(logits, target, loss.tau)?;
            let lam = loss.lambda;
            for (a, b) in g.iter_mut().zip(&gk) {
                *a = (1.0 - lam) * *a + lam * b;
            }
            Ok(((1.0 - lam) * ce + lam * kl, g))
        }
    }
}

fn check_targets(loss: &LossSpec, batch: &Batch, targets: Option<&[Vec<f64>]>) -> Result<()> {
    if loss.kind == LossKind::Combined {
        match targets {
            None => {
                return Err(Error::config(
                    "combined loss requires a target distribution per sample",
                ))
            }
            Some(t) if t.len() != batch.len() => {
                return Err(Error::config(format!(
                    "{} targets for a batch of {}",
                    t.len(),
                    batch.len()
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Mini-batch mean loss plus `weight_decay/2 · ‖θ‖²`.
pub fn loss_value(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
    loss: &LossSpec,
    targets: Option<&[Vec<f64>]>,
) -> Result<f64> {
    spec.check(params, batch)?;
    loss.validate()?;
    check_targets(loss, batch, targets)?;
    let logits = forward_trace(spec, params, &batch.features).logits;
    let mut total = 0.0;
    for s in 0..batch.len() {
        let t = targets.map(|t| t[s].as_slice());
        total += sample_loss_grad(loss, logits.row(s), batch.labels[s], t)?.0;
    }
    let mut value = total / batch.len() as f64;
    if loss.weight_decay > 0.0 {
        value += 0.5 * loss.weight_decay * params.norm_sq();
    }
    Ok(value)
}

/// Mini-batch mean loss and its gradient w.r.t. the parameters.
pub fn loss_and_grad(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
    loss: &LossSpec,
    targets: Option<&[Vec<f64>]>,
) -> Result<(f64, ParamVector)> {
    spec.check(params, batch)?;
    loss.validate()?;
    check_targets(loss, batch, targets)?;
    let trace = forward_trace(spec, params, &batch.features);
    let n = batch.len();
    let inv_n = 1.0 / n as f64;
    let k = spec.num_classes;

    let mut total = 0.0;
    let mut delta = vec![0.0; n * k];
    for s in 0..n {
        let t = targets.map(|t| t[s].as_slice());
        let (l, g) = sample_loss_grad(loss, trace.logits.row(s), batch.labels[s], t)?;
        total += l;
        for (d, gi) in delta[s * k..(s + 1) * k].iter_mut().zip(&g) {
            *d = gi * inv_n;
        }
    }

    let dims = spec.layer_dims();
    let w = params.values();
    let mut grad = params.zeros_like();
    let offsets: Vec<usize> = dims
        .iter()
        .scan(0, |off, &(i, o)| {
            let start = *off;
            *off += o * i + o;
            Some(start)
        })
        .collect();

    for l in (0..dims.len()).rev() {
        let (fan_in, fan_out) = dims[l];
        let off = offsets[l];
        let input = &trace.inputs[l];
        {
            let g = grad.values_mut();
            let (gw, gb) = g[off..off + fan_out * fan_in + fan_out].split_at_mut(fan_out * fan_in);
            for s in 0..n {
                let d = &delta[s * fan_out..(s + 1) * fan_out];
                let a = &input[s * fan_in..(s + 1) * fan_in];
                for o in 0..fan_out {
                    let dv = d[o];
                    gb[o] += dv;
                    for (gwi, ai) in gw[o * fan_in..(o + 1) * fan_in].iter_mut().zip(a) {
                        *gwi += dv * ai;
                    }
                }
            }
        }
        if l > 0 {
            let weight = &w[off..off + fan_out * fan_in];
            let pre = &trace.pre[l - 1];
            let mut prev = vec![0.0; n * fan_in];
            for s in 0..n {
                let d = &delta[s * fan_out..(s + 1) * fan_out];
                let back = &mut prev[s * fan_in..(s + 1) * fan_in];
                for o in 0..fan_out {
                    let dv = d[o];
                    for (b, wi) in back.iter_mut().zip(&weight[o * fan_in..(o + 1) * fan_in]) {
                        *b += dv * wi;
                    }
                }
                let off = s * fan_in;
                for (j, b) in back.iter_mut().enumerate() {
                    *b *= spec.activation.derivative(pre[off + j], input[off + j]);
                }
            }
            delta = prev;
        }
    }

    let mut value = total * inv_n;
    if loss.weight_decay > 0.0 {
        value += 0.5 * loss.weight_decay * params.norm_sq();
        grad.add_scaled(loss.weight_decay, params);
    }
    Ok((value, grad))
}

/// Gradient of [`loss_value`].
pub fn grad(
    spec: &ModelSpec,
    params: &ParamVector,
    batch: &Batch,
    loss: &LossSpec,
    targets: Option<&[Vec<f64>]>,
) -> Result<ParamVector> {
    loss_and_grad(spec, params, batch, loss, targets).map(|(_, g)| g)
}
