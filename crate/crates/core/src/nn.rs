//! Fully-connected network engine: parameters, forward pass, softmax
//! cross-entropy with analytic gradients, and SGD/Adam steps.
//!
//! Parameters are stored as `f32`; reductions over a batch (loss means and
//! gradient sums) are accumulated in `f64`.

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major `f32` tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::ShapeMismatch(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {expected} values, got {}",
                values.len()
            )));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

/// MLP shape: `input_dim -> hidden... -> output_classes` with a softmax head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<(usize, Activation)>,
    pub output_classes: usize,
}

impl Architecture {
    /// ReLU hidden layers of the given widths.
    pub fn relu(input_dim: usize, hidden: &[usize], output_classes: usize) -> Self {
        Self {
            input_dim,
            hidden: hidden.iter().map(|&w| (w, Activation::Relu)).collect(),
            output_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidArchitecture("input_dim must be >= 1".into()));
        }
        if self.hidden.iter().any(|&(w, _)| w == 0) {
            return Err(Error::InvalidArchitecture(
                "hidden widths must be >= 1".into(),
            ));
        }
        if self.output_classes < 2 {
            return Err(Error::InvalidArchitecture(
                "output_classes must be >= 2".into(),
            ));
        }
        Ok(())
    }

    /// `(in, out)` of every dense layer in order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for &(w, _) in &self.hidden {
            dims.push((prev, w));
            prev = w;
        }
        dims.push((prev, self.output_classes));
        dims
    }

    pub fn weight_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o).sum()
    }
}

/// One dense layer: weights `[in, out]` and bias `[out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    name: String,
    weights: Tensor,
    bias: Tensor,
}

impl Layer {
    pub fn new(name: impl Into<String>, weights: Tensor, bias: Tensor) -> Result<Self> {
        let name = name.into();
        if weights.shape().len() != 2 {
            return Err(Error::ShapeMismatch(format!(
                "layer `{name}` weights must be rank 2, got {:?}",
                weights.shape()
            )));
        }
        if bias.shape() != [weights.cols()] {
            return Err(Error::ShapeMismatch(format!(
                "layer `{name}` bias shape {:?} does not match {} outputs",
                bias.shape(),
                weights.cols()
            )));
        }
        Ok(Self {
            name,
            weights,
            bias,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn weights_mut(&mut self) -> &mut [f32] {
        self.weights.values_mut()
    }

    pub fn bias_mut(&mut self) -> &mut [f32] {
        self.bias.values_mut()
    }

    pub fn fan_in(&self) -> usize {
        self.weights.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.cols()
    }
}

/// Ordered, named layers of a fully-connected network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    layers: Vec<Layer>,
}

impl ModelParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Empty("model has no layers"));
        }
        for pair in layers.windows(2) {
            if pair[0].fan_out() != pair[1].fan_in() {
                return Err(Error::ShapeMismatch(format!(
                    "layer `{}` outputs {} but `{}` expects {}",
                    pair[0].name,
                    pair[0].fan_out(),
                    pair[1].name,
                    pair[1].fan_in()
                )));
            }
        }
        for (i, l) in layers.iter().enumerate() {
            if layers[..i].iter().any(|o| o.name == l.name) {
                return Err(Error::ShapeMismatch(format!(
                    "duplicate layer name `{}`",
                    l.name
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn weight_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len()).sum()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Same shapes and names, every value zero.
    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    name: l.name.clone(),
                    weights: Tensor::zeros(l.weights.shape.clone()),
                    bias: Tensor::zeros(l.bias.shape.clone()),
                })
                .collect(),
        }
    }

    /// Errors unless `other` has identical layer names and shapes.
    pub fn check_congruent(&self, other: &ModelParams) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} layers vs {} layers",
                self.layers.len(),
                other.layers.len()
            )));
        }
        for (a, b) in self.layers.iter().zip(&other.layers) {
            if a.name != b.name
                || a.weights.shape != b.weights.shape
                || a.bias.shape != b.bias.shape
            {
                return Err(Error::ShapeMismatch(format!(
                    "layer `{}` {:?} vs layer `{}` {:?}",
                    a.name, a.weights.shape, b.name, b.weights.shape
                )));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.bias.is_finite())
    }

    /// All parameter values (weights then bias, layer by layer).
    pub fn iter_values(&self) -> impl Iterator<Item = f32> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.values.iter().chain(&l.bias.values).copied())
    }

    pub fn iter_values_mut(&mut self) -> impl Iterator<Item = &mut f32> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.values.iter_mut().chain(l.bias.values.iter_mut()))
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and NaN payloads.
    pub fn bit_eq(&self, other: &ModelParams) -> bool {
        self.check_congruent(other).is_ok()
            && self
                .iter_values()
                .zip(other.iter_values())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// He-uniform fan-in initialization, zero biases. Deterministic in `seed`.
pub fn init_random(arch: &Architecture, seed: u64) -> Result<ModelParams> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = arch
        .layer_dims()
        .into_iter()
        .enumerate()
        .map(|(i, (fan_in, fan_out))| {
            let bound = (6.0 / fan_in as f64).sqrt() as f32;
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            let w: Vec<f32> = (0..fan_in * fan_out)
                .map(|_| dist.sample(&mut rng))
                .collect();
            Layer::new(
                format!("dense_{i}"),
                Tensor::new(vec![fan_in, fan_out], w)?,
                Tensor::zeros(vec![fan_out]),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    ModelParams::new(layers)
}

/// `inputs[n, in] x weights[in, out] + bias`.
fn affine(inputs: &[f32], n: usize, layer: &Layer) -> Vec<f32> {
    let (fan_in, fan_out) = (layer.fan_in(), layer.fan_out());
    let w = layer.weights.values();
    let b = layer.bias.values();
    let mut out = Vec::with_capacity(n * fan_out);
    for r in 0..n {
        out.extend_from_slice(b);
        let row = &inputs[r * fan_in..(r + 1) * fan_in];
        let dst = &mut out[r * fan_out..];
        for (i, &a) in row.iter().enumerate() {
            if a == 0.0 {
                continue;
            }
            let wrow = &w[i * fan_out..(i + 1) * fan_out];
            for (d, &wv) in dst.iter_mut().zip(wrow) {
                *d += a * wv;
            }
        }
    }
    out
}

fn check_inputs(params: &ModelParams, inputs: &Tensor) -> Result<()> {
    if inputs.shape().len() != 2 || inputs.cols() != params.input_dim() {
        return Err(Error::ShapeMismatch(format!(
            "inputs {:?} do not match model input dim {}",
            inputs.shape(),
            params.input_dim()
        )));
    }
    Ok(())
}

/// Pre-activations of every layer; hidden layers are ReLU'd in place of
/// the returned activations.
struct Trace {
    /// Inputs to each layer (`acts[0]` is the batch itself).
    acts: Vec<Vec<f32>>,
    logits: Vec<f32>,
}

fn trace(params: &ModelParams, inputs: &Tensor) -> Trace {
    let n = inputs.rows();
    let last = params.layers.len() - 1;
    let mut acts = Vec::with_capacity(params.layers.len());
    let mut cur = inputs.values().to_vec();
    for (i, layer) in params.layers.iter().enumerate() {
        let mut z = affine(&cur, n, layer);
        acts.push(cur);
        if i == last {
            return Trace { acts, logits: z };
        }
        for v in &mut z {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        cur = z;
    }
    unreachable!("model has at least one layer")
}

fn softmax_row(logits: &[f32], out: &mut [f32]) {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for (o, &z) in out.iter_mut().zip(logits) {
        let e = ((z - max) as f64).exp();
        *o = e as f32;
        sum += e;
    }
    for o in out.iter_mut() {
        *o = (*o as f64 / sum) as f32;
    }
}

/// Class probabilities `[n, classes]`; each row is a softmax distribution.
pub fn forward(params: &ModelParams, inputs: &Tensor) -> Result<Tensor> {
    check_inputs(params, inputs)?;
    let n = inputs.rows();
    let k = params.output_dim();
    let t = trace(params, inputs);
    let mut probs = vec![0.0f32; n * k];
    for r in 0..n {
        softmax_row(
            &t.logits[r * k..(r + 1) * k],
            &mut probs[r * k..(r + 1) * k],
        );
    }
    Tensor::new(vec![n, k], probs)
}

/// Raw output-layer scores `[n, classes]` (before softmax).
pub fn logits(params: &ModelParams, inputs: &Tensor) -> Result<Tensor> {
    check_inputs(params, inputs)?;
    let t = trace(params, inputs);
    Tensor::new(vec![inputs.rows(), params.output_dim()], t.logits)
}

/// Mean softmax cross-entropy over the batch and its gradient with respect to
/// every parameter.
pub fn loss_and_grads(
    params: &ModelParams,
    inputs: &Tensor,
    labels: &[usize],
) -> Result<(f64, ModelParams)> {
    check_inputs(params, inputs)?;
    let n = inputs.rows();
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{n} input rows but {} labels",
            labels.len()
        )));
    }
    let k = params.output_dim();
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidLabel { label, classes: k });
    }

    let t = trace(params, inputs);
    let inv_n = 1.0 / n as f64;

    // dL/dlogits = (softmax - onehot) / n
    let mut loss = 0.0f64;
    let mut delta = vec![0.0f64; n * k];
    for r in 0..n {
        let z = &t.logits[r * k..(r + 1) * k];
        let max = z.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let sum: f64 = z.iter().map(|&v| (v as f64 - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - z[labels[r]] as f64;
        for j in 0..k {
            let p = (z[j] as f64 - lse).exp();
            let y = if j == labels[r] { 1.0 } else { 0.0 };
            delta[r * k + j] = (p - y) * inv_n;
        }
    }
    loss *= inv_n;

    let mut grads = params.zeros_like();
    for li in (0..params.layers.len()).rev() {
        let layer = &params.layers[li];
        let (fan_in, fan_out) = (layer.fan_in(), layer.fan_out());
        let a = &t.acts[li];
        let w = layer.weights.values();

        let mut dw = vec![0.0f64; fan_in * fan_out];
        let mut db = vec![0.0f64; fan_out];
        for r in 0..n {
            let d = &delta[r * fan_out..(r + 1) * fan_out];
            for (acc, &dv) in db.iter_mut().zip(d) {
                *acc += dv;
            }
            let arow = &a[r * fan_in..(r + 1) * fan_in];
            for (i, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let av = av as f64;
                for (acc, &dv) in dw[i * fan_out..(i + 1) * fan_out].iter_mut().zip(d) {
                    *acc += av * dv;
                }
            }
        }
        let g = &mut grads.layers[li];
        for (dst, src) in g.weights.values.iter_mut().zip(&dw) {
            *dst = *src as f32;
        }
        for (dst, src) in g.bias.values.iter_mut().zip(&db) {
            *dst = *src as f32;
        }

        if li == 0 {
            break;
        }
        // Propagate through weights, then through the ReLU of the layer below
        // (its output is `a`; zero output means inactive).
        let mut prev = vec![0.0f64; n * fan_in];
        for r in 0..n {
            let d = &delta[r * fan_out..(r + 1) * fan_out];
            let arow = &a[r * fan_in..(r + 1) * fan_in];
            for i in 0..fan_in {
                if arow[i] <= 0.0 {
                    continue;
                }
                let wrow = &w[i * fan_out..(i + 1) * fan_out];
                prev[r * fan_in + i] = wrow.iter().zip(d).map(|(&wv, &dv)| wv as f64 * dv).sum();
            }
        }
        delta = prev;
    }
    Ok((loss, grads))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

/// Client training hyper-parameters. Defaults follow the reference SA setup:
/// Adam, learning rate 0.01, batch 64, 5 local epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub client_lr: f32,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub optimizer: Optimizer,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub adam_epsilon: f32,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            client_lr: 0.01,
            batch_size: 64,
            local_epochs: 5,
            optimizer: Optimizer::Adam,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-7,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::Config {
                key: key.into(),
                reason: reason.into(),
            })
        };
        if !(self.client_lr > 0.0 && self.client_lr < 1.0) {
            return bad("client_lr", "must lie in (0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if self.local_epochs == 0 {
            return bad("local_epochs", "must be >= 1");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) {
            return bad("adam_beta1", "must lie in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam_beta2", "must lie in [0, 1)");
        }
        if self.adam_epsilon.is_nan() || self.adam_epsilon <= 0.0 {
            return bad("adam_epsilon", "must be positive");
        }
        Ok(())
    }
}

/// Optimizer moments. Create a fresh one per client update.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState {
    step: i32,
    moments: Option<(ModelParams, ModelParams)>,
}

impl OptimizerState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> i32 {
        self.step
    }
}

/// Applies one optimizer update to `params` in place.
pub fn optimizer_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    hp: &Hyperparams,
    state: &mut OptimizerState,
) -> Result<()> {
    params.check_congruent(grads)?;
    let lr = hp.client_lr;
    state.step += 1;
    match hp.optimizer {
        Optimizer::Sgd => {
            for (p, g) in params.iter_values_mut().zip(grads.iter_values()) {
                *p -= lr * g;
            }
        }
        Optimizer::Adam => {
            let (m, v) = state
                .moments
                .get_or_insert_with(|| (params.zeros_like(), params.zeros_like()));
            let (b1, b2, eps) = (hp.adam_beta1, hp.adam_beta2, hp.adam_epsilon);
            let c1 = 1.0 - b1.powi(state.step);
            let c2 = 1.0 - b2.powi(state.step);
            for (((p, g), m), v) in params
                .iter_values_mut()
                .zip(grads.iter_values())
                .zip(m.iter_values_mut())
                .zip(v.iter_values_mut())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
    Ok(())
}
