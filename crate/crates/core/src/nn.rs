//! Dense feed-forward network with analytic backpropagation.
//!
//! Hidden layers use a rectifier, the output layer is linear and the loss is
//! mean softmax cross-entropy. Weights are stored row-major as `[fan_in][fan_out]`
//! so the forward pass streams each input row once.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::StreamKey;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub fan_in: usize,
    pub fan_out: usize,
    /// Row-major `[fan_in][fan_out]`.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        DenseLayer {
            fan_in,
            fan_out,
            weights: vec![0.0; fan_in * fan_out],
            bias: vec![0.0; fan_out],
        }
    }

    #[inline]
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.fan_out + j]
    }

    #[inline]
    pub fn weight_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.weights[i * self.fan_out + j]
    }

    fn affine(&self, input: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.bias);
        for (x, row) in input.iter().zip(self.weights.chunks_exact(self.fan_out)) {
            if *x == 0.0 {
                continue;
            }
            for (o, w) in out.iter_mut().zip(row) {
                *o += x * w;
            }
        }
    }
}

/// Weights and biases of the whole network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    layers: Vec<DenseLayer>,
}

/// One partial derivative per parameter, laid out exactly like [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    layers: Vec<DenseLayer>,
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "layer dims need at least 2 entries, got {dims:?}"
        )));
    }
    if dims.contains(&0) {
        return Err(Error::InvalidConfig(format!(
            "layer dims must be positive, got {dims:?}"
        )));
    }
    Ok(())
}

/// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights, zero biases.
pub fn init_params(layer_dims: &[usize], seed: u64) -> Result<ModelParams> {
    validate_dims(layer_dims)?;
    let mut rng = StreamKey::root(seed).child("init", 0).rng();
    let layers = layer_dims
        .windows(2)
        .map(|pair| {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut layer = DenseLayer::zeros(fan_in, fan_out);
            for w in &mut layer.weights {
                *w = rng.random_range(-bound..=bound);
            }
            layer
        })
        .collect();
    Ok(ModelParams { layers })
}

impl ModelParams {
    pub fn zeros(layer_dims: &[usize]) -> Result<Self> {
        validate_dims(layer_dims)?;
        Ok(ModelParams {
            layers: layer_dims
                .windows(2)
                .map(|p| DenseLayer::zeros(p[0], p[1]))
                .collect(),
        })
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidConfig("model needs at least one layer".into()));
        }
        for layer in &layers {
            if layer.weights.len() != layer.fan_in * layer.fan_out
                || layer.bias.len() != layer.fan_out
            {
                return Err(Error::Shape(format!(
                    "layer {}x{} has {} weights and {} biases",
                    layer.fan_in,
                    layer.fan_out,
                    layer.weights.len(),
                    layer.bias.len()
                )));
            }
        }
        for pair in layers.windows(2) {
            if pair[0].fan_out != pair[1].fan_in {
                return Err(Error::Shape(format!(
                    "layer output {} does not feed next layer input {}",
                    pair[0].fan_out, pair[1].fan_in
                )));
            }
        }
        Ok(ModelParams { layers })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].fan_in];
        dims.extend(self.layers.iter().map(|l| l.fan_out));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// All parameters in a fixed order: per layer, weights then biases.
    pub fn iter(&self) -> impl Iterator<Item = &f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.layers
            .iter_mut()
            .flat_map(|l| l.weights.iter_mut().chain(l.bias.iter_mut()))
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.layer_dims() == other.layer_dims()
    }

    /// Per-sample logits for a row-major `[n][input_dim]` input block.
    pub fn predict_logits(&self, inputs: &[f64]) -> Result<Vec<f64>> {
        let d = self.input_dim();
        if !inputs.len().is_multiple_of(d) {
            return Err(Error::Shape(format!(
                "input length {} is not a multiple of input dim {d}",
                inputs.len()
            )));
        }
        let k = self.output_dim();
        let mut logits = Vec::with_capacity(inputs.len() / d * k);
        let mut scratch = Scratch::new(self);
        for row in inputs.chunks_exact(d) {
            self.forward_row(row, &mut scratch);
            logits.extend_from_slice(scratch.acts.last().unwrap());
        }
        Ok(logits)
    }

    /// Arg-max class per row.
    pub fn predict(&self, inputs: &[f64]) -> Result<Vec<usize>> {
        let k = self.output_dim();
        Ok(self
            .predict_logits(inputs)?
            .chunks_exact(k)
            .map(argmax)
            .collect())
    }

    fn forward_row(&self, input: &[f64], scratch: &mut Scratch) {
        let last = self.layers.len() - 1;
        for (idx, layer) in self.layers.iter().enumerate() {
            let (prev, rest) = scratch.acts.split_at_mut(idx);
            let src: &[f64] = if idx == 0 { input } else { &prev[idx - 1] };
            let out = &mut rest[0];
            layer.affine(src, out);
            if idx != last {
                for v in out.iter_mut() {
                    *v = v.max(0.0);
                }
            }
        }
    }
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Gradients {
            layers: params
                .layers
                .iter()
                .map(|l| DenseLayer::zeros(l.fan_in, l.fan_out))
                .collect(),
        }
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> + '_ {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()))
    }

    fn scale(&mut self, factor: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|w| *w *= factor);
            l.bias.iter_mut().for_each(|b| *b *= factor);
        }
    }
}

/// Row-major `[n][d]` inputs with one class label per row.
///
/// Segmentation batches are flattened so that every pixel is a row with a
/// binary label.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    pub dim: usize,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, labels: Vec<usize>, dim: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidInput("batch must contain at least one row".into()));
        }
        if dim == 0 || inputs.len() != labels.len() * dim {
            return Err(Error::Shape(format!(
                "{} inputs cannot form {} rows of dim {dim}",
                inputs.len(),
                labels.len()
            )));
        }
        Ok(Batch { inputs, labels, dim })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }
}

struct Scratch {
    acts: Vec<Vec<f64>>,
    deltas: Vec<Vec<f64>>,
}

impl Scratch {
    fn new(params: &ModelParams) -> Self {
        Scratch {
            acts: params.layers.iter().map(|l| vec![0.0; l.fan_out]).collect(),
            deltas: params.layers.iter().map(|l| vec![0.0; l.fan_out]).collect(),
        }
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Writes softmax probabilities into `out` and returns `log(sum(exp(z - max)))`
/// along with the max used for the shift.
fn softmax_into(logits: &[f64], out: &mut [f64]) -> (f64, f64) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
    (sum.ln(), max)
}

pub fn forward(params: &ModelParams, batch: &Batch) -> Result<Vec<f64>> {
    check_batch_dim(params, batch)?;
    params.predict_logits(&batch.inputs)
}

fn check_batch_dim(params: &ModelParams, batch: &Batch) -> Result<()> {
    if batch.dim != params.input_dim() {
        return Err(Error::Shape(format!(
            "batch feature dim {} does not match model input dim {}",
            batch.dim,
            params.input_dim()
        )));
    }
    Ok(())
}

/// Mean softmax cross-entropy over the batch and its exact gradient.
pub fn loss_and_grad(params: &ModelParams, batch: &Batch) -> Result<(f64, Gradients)> {
    check_batch_dim(params, batch)?;
    let k = params.output_dim();
    if let Some(&label) = batch.labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidLabel { label, classes: k });
    }

    let mut grads = Gradients::zeros_like(params);
    let mut scratch = Scratch::new(params);
    let mut probs = vec![0.0; k];
    let mut total = 0.0;
    let last = params.layers.len() - 1;

    for (i, &label) in batch.labels.iter().enumerate() {
        let input = batch.row(i);
        params.forward_row(input, &mut scratch);

        let logits = &scratch.acts[last];
        let (log_sum, max) = softmax_into(logits, &mut probs);
        total += log_sum - (logits[label] - max);

        let out_delta = &mut scratch.deltas[last];
        out_delta.copy_from_slice(&probs);
        out_delta[label] -= 1.0;

        for l in (0..=last).rev() {
            let layer = &params.layers[l];
            let src: &[f64] = if l == 0 { input } else { &scratch.acts[l - 1] };
            let (lower, upper) = scratch.deltas.split_at_mut(l);
            let delta = &upper[0];
            let g = &mut grads.layers[l];
            for (b, d) in g.bias.iter_mut().zip(delta.iter()) {
                *b += d;
            }
            for (x, grow) in src.iter().zip(g.weights.chunks_exact_mut(layer.fan_out)) {
                if *x == 0.0 {
                    continue;
                }
                for (gw, d) in grow.iter_mut().zip(delta.iter()) {
                    *gw += x * d;
                }
            }
            if l > 0 {
                let below = &mut lower[l - 1];
                let act = &scratch.acts[l - 1];
                for (idx, (bd, row)) in below
                    .iter_mut()
                    .zip(layer.weights.chunks_exact(layer.fan_out))
                    .enumerate()
                {
                    *bd = if act[idx] > 0.0 {
                        row.iter().zip(delta.iter()).map(|(w, d)| w * d).sum()
                    } else {
                        0.0
                    };
                }
            }
        }
    }

    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    Ok((total / n, grads))
}

/// `p' = p - lr * g`, returning a new parameter set.
pub fn sgd_step(params: &ModelParams, grads: &Gradients, lr: f64) -> Result<ModelParams> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::InvalidConfig(format!("learning rate must be >= 0, got {lr}")));
    }
    let shapes_match = params.layers.len() == grads.layers.len()
        && params
            .layers
            .iter()
            .zip(&grads.layers)
            .all(|(p, g)| p.fan_in == g.fan_in && p.fan_out == g.fan_out);
    if !shapes_match {
        return Err(Error::Shape("gradients do not match parameter shapes".into()));
    }
    let mut next = params.clone();
    for (p, g) in next.iter_mut().zip(grads.iter()) {
        *p -= lr * g;
    }
    Ok(next)
}
