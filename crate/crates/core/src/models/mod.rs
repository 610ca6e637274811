//! Softmax regression and tanh MLP classifiers with cross-entropy loss,
//! hand-written backprop, and SGD / proximal local training.

mod checkpoint;
mod train;

pub use checkpoint::{decode_params, encode_params, CHECKPOINT_MAGIC};
pub use train::{epoch_seed, local_train, local_train_on, prox_objective, train_epoch, TrainingConfig};

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::LabeledDataset;
use crate::error::{domain, Result};
use crate::rng::rng_from;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum ModelKind {
    #[default]
    Softmax,
    Mlp { hidden: usize },
}

/// Layer widths, input first. Two entries is softmax regression; every
/// extra entry is a tanh hidden layer.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ModelShape {
    layers: Vec<usize>,
}

/// Where one dense layer's weights (row-major, `fan_out x fan_in`) and
/// biases sit in the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpan {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Range<usize>,
    pub bias: Range<usize>,
}

impl ModelShape {
    pub fn new(layers: Vec<usize>) -> Result<Self> {
        if layers.len() < 2 || layers.contains(&0) {
            return Err(domain(format!("invalid layer widths {layers:?}")));
        }
        let count = layers.windows(2).try_fold(0usize, |acc, w| {
            w[0].checked_mul(w[1])?.checked_add(w[1])?.checked_add(acc)
        });
        if count.is_none() {
            return Err(domain(format!("parameter count of {layers:?} overflows")));
        }
        Ok(Self { layers })
    }

    pub fn softmax(inputs: usize, classes: usize) -> Result<Self> {
        Self::new(vec![inputs, classes])
    }

    pub fn mlp(inputs: usize, hidden: usize, classes: usize) -> Result<Self> {
        Self::new(vec![inputs, hidden, classes])
    }

    pub fn for_kind(kind: ModelKind, inputs: usize, classes: usize) -> Result<Self> {
        match kind {
            ModelKind::Softmax => Self::softmax(inputs, classes),
            ModelKind::Mlp { hidden } => Self::mlp(inputs, hidden, classes),
        }
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn inputs(&self) -> usize {
        self.layers[0]
    }

    pub fn outputs(&self) -> usize {
        *self.layers.last().unwrap()
    }

    pub fn spans(&self) -> Vec<LayerSpan> {
        let mut offset = 0;
        self.layers
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let weights = offset..offset + fan_in * fan_out;
                let bias = weights.end..weights.end + fan_out;
                offset = bias.end;
                LayerSpan { fan_in, fan_out, weights, bias }
            })
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Range covering the final dense layer (weights then bias).
    pub fn output_layer(&self) -> Range<usize> {
        let last = self.spans().pop().unwrap();
        last.weights.start..last.bias.end
    }
}

/// Flat trainable parameters plus the shape that interprets them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    shape: ModelShape,
    values: Vec<f64>,
}

/// Gradient aligned with a [`ModelParams`] vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector(pub Vec<f64>);

impl GradientVector {
    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl ModelParams {
    pub fn from_values(shape: ModelShape, values: Vec<f64>) -> Result<Self> {
        if values.len() != shape.param_count() {
            return Err(domain(format!(
                "{} values for a shape with {} parameters",
                values.len(),
                shape.param_count()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(domain("non-finite parameter"));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: ModelShape) -> Self {
        let values = vec![0.0; shape.param_count()];
        Self { shape, values }
    }

    /// Softmax regression starts at zero. Hidden and output weights of an
    /// MLP are uniform in `±1/sqrt(fan_in)`; biases start at zero.
    pub fn init(shape: ModelShape, seed: u64) -> Self {
        let mut params = Self::zeros(shape);
        if params.shape.layers.len() > 2 {
            let mut rng = rng_from(seed);
            for span in params.shape.spans() {
                let bound = 1.0 / (span.fan_in as f64).sqrt();
                for v in &mut params.values[span.weights] {
                    *v = rng.random_range(-bound..=bound);
                }
            }
        }
        params
    }

    pub fn shape(&self) -> &ModelShape {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// FNV-1a over the little-endian bytes of every value.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.values {
            for b in v.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    pub fn squared_distance(&self, other: &ModelParams) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

fn check_batch(params: &ModelParams, batch: &LabeledDataset, indices: Option<&[usize]>) -> Result<()> {
    let n = indices.map_or(batch.len(), <[usize]>::len);
    if n == 0 {
        return Err(domain("empty batch"));
    }
    if batch.n_features() != params.shape.inputs() {
        return Err(domain(format!(
            "batch has {} features, model expects {}",
            batch.n_features(),
            params.shape.inputs()
        )));
    }
    if batch.n_classes() > params.shape.outputs() {
        return Err(domain(format!(
            "batch has {} classes, model outputs {}",
            batch.n_classes(),
            params.shape.outputs()
        )));
    }
    Ok(())
}

/// Per-sample activations of one forward pass. `acts[0]` is the input,
/// the last entry holds the log-softmax of the logits.
struct Forward {
    acts: Vec<Vec<f64>>,
}

fn forward(params: &ModelParams, spans: &[LayerSpan], x: &[f64]) -> Forward {
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(spans.len() + 1);
    acts.push(x.to_vec());
    for (l, span) in spans.iter().enumerate() {
        let input = &acts[l];
        let w = &params.values[span.weights.clone()];
        let b = &params.values[span.bias.clone()];
        let mut z: Vec<f64> = b.to_vec();
        for (o, zo) in z.iter_mut().enumerate() {
            let row = &w[o * span.fan_in..(o + 1) * span.fan_in];
            *zo += row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
        }
        if l + 1 < spans.len() {
            z.iter_mut().for_each(|v| *v = v.tanh());
        } else {
            log_softmax_in_place(&mut z);
        }
        acts.push(z);
    }
    Forward { acts }
}

fn log_softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter_mut().for_each(|v| *v -= lse);
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Mean loss and, if requested, its gradient over `indices` (or the whole batch).
pub(crate) fn loss_and_gradient(
    params: &ModelParams,
    batch: &LabeledDataset,
    indices: Option<&[usize]>,
    want_grad: bool,
) -> Result<(f64, Option<GradientVector>)> {
    check_batch(params, batch, indices)?;
    let spans = params.shape.spans();
    let n = indices.map_or(batch.len(), <[usize]>::len);
    let mut total = 0.0;
    let mut grad = if want_grad { vec![0.0; params.len()] } else { Vec::new() };

    for k in 0..n {
        let i = indices.map_or(k, |ix| ix[k]);
        let fwd = forward(params, &spans, batch.row(i));
        let label = batch.label(i);
        let logp = fwd.acts.last().unwrap();
        total -= logp[label];
        if !want_grad {
            continue;
        }
        // dL/dz at the output: softmax - onehot.
        let mut delta: Vec<f64> = logp.iter().map(|v| v.exp()).collect();
        delta[label] -= 1.0;
        for l in (0..spans.len()).rev() {
            let span = &spans[l];
            let input = &fwd.acts[l];
            for (o, &d) in delta.iter().enumerate() {
                if d == 0.0 {
                    continue;
                }
                let row = &mut grad[span.weights.start + o * span.fan_in..span.weights.start + (o + 1) * span.fan_in];
                row.iter_mut().zip(input).for_each(|(g, a)| *g += d * a);
                grad[span.bias.start + o] += d;
            }
            if l == 0 {
                break;
            }
            let w = &params.values[span.weights.clone()];
            let mut prev = vec![0.0; span.fan_in];
            for (o, &d) in delta.iter().enumerate() {
                let row = &w[o * span.fan_in..(o + 1) * span.fan_in];
                prev.iter_mut().zip(row).for_each(|(p, wv)| *p += d * wv);
            }
            // tanh' = 1 - a^2
            prev.iter_mut().zip(input).for_each(|(p, a)| *p *= 1.0 - a * a);
            delta = prev;
        }
    }

    let scale = 1.0 / n as f64;
    let grad = want_grad.then(|| {
        grad.iter_mut().for_each(|g| *g *= scale);
        GradientVector(grad)
    });
    Ok((total * scale, grad))
}

/// Mean cross-entropy over the batch.
pub fn loss(params: &ModelParams, batch: &LabeledDataset) -> Result<f64> {
    Ok(loss_and_gradient(params, batch, None, false)?.0)
}

/// Gradient of the mean batch loss.
pub fn gradient(params: &ModelParams, batch: &LabeledDataset) -> Result<GradientVector> {
    Ok(loss_and_gradient(params, batch, None, true)?.1.unwrap())
}

/// Gradient over a subset of rows (repeats allowed).
pub fn gradient_on(params: &ModelParams, data: &LabeledDataset, indices: &[usize]) -> Result<GradientVector> {
    Ok(loss_and_gradient(params, data, Some(indices), true)?.1.unwrap())
}

pub fn predict(params: &ModelParams, x: &[f64]) -> usize {
    let spans = params.shape.spans();
    argmax(forward(params, &spans, x).acts.last().unwrap())
}

/// Returns `(accuracy, mean loss)`. Argmax ties go to the lowest class id.
pub fn evaluate(params: &ModelParams, data: &LabeledDataset) -> Result<(f64, f64)> {
    check_batch(params, data, None)?;
    let spans = params.shape.spans();
    let mut correct = 0usize;
    let mut total = 0.0;
    for i in 0..data.len() {
        let fwd = forward(params, &spans, data.row(i));
        let logp = fwd.acts.last().unwrap();
        if argmax(logp) == data.label(i) {
            correct += 1;
        }
        total -= logp[data.label(i)];
    }
    let n = data.len() as f64;
    Ok((correct as f64 / n, total / n))
}
