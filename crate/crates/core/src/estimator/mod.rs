//! Continuous familiarity modeling: a small feed-forward regressor `f(b)` trained
//! with squared error to predict the URPS from the familiarity vector.
//!
//! The output head is `scale * softplus(z)`, so every prediction is strictly
//! positive and can be used directly as a divisor.

mod gradcheck;
mod train;

pub use gradcheck::{gradient_check, gradient_check_settings, sample_parameters, GradCheckEntry, GradCheckReport};
pub use train::{train, TrainConfig};

use serde::{Deserialize, Serialize};

use crate::data::{FamiliarityVector, FeatureKind, FeatureSchema, Interaction};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Softplus,
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Softplus => softplus(z),
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative with respect to the pre-activation.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Softplus => sigmoid(z),
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[inline]
pub fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    Log1p,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub transform: Transform,
    pub mean: f64,
    pub std: f64,
}

impl Normalizer {
    /// Fits transform-space mean and standard deviation; a zero spread maps to std 1.
    pub fn fit(kind: FeatureKind, column: impl Iterator<Item = f64>) -> Self {
        let transform = match kind {
            FeatureKind::Count => Transform::Log1p,
            _ => Transform::Identity,
        };
        let values: Vec<f64> = column.map(|v| transform.apply(v)).collect();
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        Self {
            transform,
            mean,
            std,
        }
    }

    #[inline]
    pub fn apply(&self, value: f64) -> f64 {
        (self.transform.apply(value) - self.mean) / self.std
    }
}

impl Transform {
    #[inline]
    pub fn apply(self, value: f64) -> f64 {
        match self {
            // counts are non-negative; the clamp keeps stray negatives finite
            Transform::Log1p => value.max(0.0).ln_1p(),
            Transform::Identity => value,
        }
    }
}

/// Maps a raw familiarity vector into the model's input space.
pub fn normalize(b: &FamiliarityVector, normalizers: &[Normalizer]) -> Result<Vec<f64>> {
    if b.len() != normalizers.len() {
        return Err(Error::Arity {
            expected: normalizers.len(),
            found: b.len(),
        });
    }
    Ok(b.values()
        .iter()
        .zip(normalizers)
        .map(|(&v, n)| n.apply(v))
        .collect())
}

/// Dense layer, `y = act(W x + b)` with `W` stored row-major as `outputs x inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            inputs,
            outputs,
            activation,
            weights: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub seed: u64,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
    /// Validation loss after each epoch.
    pub validation_history: Vec<f64>,
    pub samples: usize,
}

/// The trained regressor `f(b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressorModel {
    pub schema_hash: String,
    pub normalizers: Vec<Normalizer>,
    pub layers: Vec<DenseLayer>,
    /// Multiplier on the softplus head; the mean training target after fitting.
    pub output_scale: f64,
    pub config: Option<TrainConfig>,
    pub metadata: TrainingMetadata,
}

impl RegressorModel {
    /// Assembles a model, checking that layer shapes chain from the inputs to one
    /// softplus output.
    pub fn new(normalizers: Vec<Normalizer>, layers: Vec<DenseLayer>, output_scale: f64) -> Result<Self> {
        let model = Self {
            schema_hash: String::new(),
            normalizers,
            layers,
            output_scale,
            config: None,
            metadata: TrainingMetadata::default(),
        };
        model.check()?;
        Ok(model)
    }

    pub fn check(&self) -> Result<()> {
        if self.layers.is_empty() || self.param_count() == 0 {
            return Err(Error::InvalidArgument("model has no parameters".into()));
        }
        let mut width = self.normalizers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.inputs != width
                || layer.weights.len() != layer.inputs * layer.outputs
                || layer.bias.len() != layer.outputs
            {
                return Err(Error::InvalidArgument(format!(
                    "layer {i} shape does not chain (expects {width} inputs)"
                )));
            }
            width = layer.outputs;
        }
        let head = self.layers.last().expect("non-empty");
        if width != 1 || head.activation != Activation::Softplus {
            return Err(Error::InvalidArgument(
                "last layer must be a single softplus unit".into(),
            ));
        }
        if !(self.output_scale > 0.0 && self.output_scale.is_finite()) {
            return Err(Error::NonPositive {
                what: "output scale",
                value: self.output_scale,
            });
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.normalizers.len()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    /// Flat parameter addressing: each layer's weights, then its biases.
    pub fn param(&self, mut idx: usize) -> f64 {
        for layer in &self.layers {
            if idx < layer.weights.len() {
                return layer.weights[idx];
            }
            idx -= layer.weights.len();
            if idx < layer.bias.len() {
                return layer.bias[idx];
            }
            idx -= layer.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_param(&mut self, mut idx: usize, value: f64) {
        for layer in &mut self.layers {
            if idx < layer.weights.len() {
                layer.weights[idx] = value;
                return;
            }
            idx -= layer.weights.len();
            if idx < layer.bias.len() {
                layer.bias[idx] = value;
                return;
            }
            idx -= layer.bias.len();
        }
        panic!("parameter index out of range");
    }

    /// Debiasing factor `f(b)`; always strictly positive.
    pub fn forward(&self, b: &FamiliarityVector) -> Result<f64> {
        let x = normalize(b, &self.normalizers)?;
        Ok(self.forward_normalized(&x))
    }

    pub fn forward_normalized(&self, x: &[f64]) -> f64 {
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for layer in &self.layers {
            next.clear();
            for o in 0..layer.outputs {
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                let z = layer.bias[o] + dot(row, &cur);
                next.push(layer.activation.apply(z));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        // softplus underflows to 0 for z < -745; keep the divisor positive
        (self.output_scale * cur[0]).max(f64::MIN_POSITIVE)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let model: RegressorModel = serde_json::from_str(text)?;
        model.check()?;
        Ok(model)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Normalized inputs with their targets, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub width: usize,
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
}

impl Batch {
    pub fn new(width: usize, inputs: Vec<f64>, targets: Vec<f64>) -> Result<Self> {
        if inputs.len() != width * targets.len() {
            return Err(Error::InvalidArgument("batch inputs do not match targets".into()));
        }
        Ok(Self {
            width,
            inputs,
            targets,
        })
    }

    /// Normalizes `(b, s)` pairs with the model's normalizers.
    pub fn from_records<'a>(
        model: &RegressorModel,
        records: impl IntoIterator<Item = (&'a FamiliarityVector, f64)>,
    ) -> Result<Self> {
        let mut inputs = Vec::new();
        let mut targets = Vec::new();
        for (b, s) in records {
            inputs.extend(normalize(b, &model.normalizers)?);
            targets.push(s);
        }
        Self::new(model.input_dim(), inputs, targets)
    }

    pub fn from_log(model: &RegressorModel, log: &[Interaction]) -> Result<Self> {
        Self::from_records(model, log.iter().map(|r| (&r.familiarity, r.urps)))
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.width..(i + 1) * self.width]
    }
}

/// Mean squared error of the model on a batch.
pub fn mse_loss(model: &RegressorModel, batch: &Batch) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Empty("mse_loss needs a non-empty batch"));
    }
    Ok(loss_over(model, batch, 0..batch.len()))
}

pub(crate) fn loss_over(
    model: &RegressorModel,
    batch: &Batch,
    rows: impl ExactSizeIterator<Item = usize>,
) -> f64 {
    let n = rows.len() as f64;
    let mut total = 0.0;
    for i in rows {
        let r = model.forward_normalized(batch.row(i)) - batch.targets[i];
        total += r * r;
    }
    total / n
}

/// Gradients laid out like the model's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &RegressorModel) -> Self {
        Self {
            weights: model.layers.iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            bias: model.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    /// Same flat addressing as [`RegressorModel::param`].
    pub fn get(&self, mut idx: usize) -> f64 {
        for (w, b) in self.weights.iter().zip(&self.bias) {
            if idx < w.len() {
                return w[idx];
            }
            idx -= w.len();
            if idx < b.len() {
                return b[idx];
            }
            idx -= b.len();
        }
        panic!("parameter index out of range");
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.bias)
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
            .collect()
    }

    fn reset(&mut self) {
        self.weights.iter_mut().chain(self.bias.iter_mut()).for_each(|v| v.fill(0.0));
    }
}

/// Per-layer activation buffers reused across samples.
pub(crate) struct Workspace {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    delta: Vec<Vec<f64>>,
}

impl Workspace {
    pub(crate) fn new(model: &RegressorModel) -> Self {
        let sizes: Vec<usize> = model.layers.iter().map(|l| l.outputs).collect();
        Self {
            pre: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            post: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            delta: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// Exact gradient of [`mse_loss`] with respect to every weight and bias.
pub fn backward(model: &RegressorModel, batch: &Batch) -> Result<Gradients> {
    if batch.is_empty() {
        return Err(Error::Empty("backward needs a non-empty batch"));
    }
    let mut grads = Gradients::zeros_like(model);
    let mut ws = Workspace::new(model);
    backward_into(model, batch, 0..batch.len(), &mut ws, &mut grads);
    Ok(grads)
}

/// Accumulates the gradient of the mean squared error over `rows` into `grads`
/// (overwriting it) and returns that loss.
pub(crate) fn backward_into(
    model: &RegressorModel,
    batch: &Batch,
    rows: impl ExactSizeIterator<Item = usize>,
    ws: &mut Workspace,
    grads: &mut Gradients,
) -> f64 {
    grads.reset();
    let n = rows.len() as f64;
    let last = model.layers.len() - 1;
    let mut loss = 0.0;
    for i in rows {
        let x = batch.row(i);
        for (l, layer) in model.layers.iter().enumerate() {
            let (done, rest) = ws.post.split_at_mut(l);
            let input: &[f64] = if l == 0 { x } else { &done[l - 1] };
            let out = &mut rest[0];
            let pre = &mut ws.pre[l];
            for o in 0..layer.outputs {
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                let z = layer.bias[o] + dot(row, input);
                pre[o] = z;
                out[o] = layer.activation.apply(z);
            }
        }
        let pred = model.output_scale * ws.post[last][0];
        let residual = pred - batch.targets[i];
        loss += residual * residual;

        // dL/d(head activation) for this sample
        let mut upstream = 2.0 * residual / n * model.output_scale;
        for l in (0..=last).rev() {
            let layer = &model.layers[l];
            let pre = &ws.pre[l];
            let post = &ws.post[l];
            if l == last {
                ws.delta[l][0] = upstream * layer.activation.derivative(pre[0], post[0]);
            } else {
                let above = &model.layers[l + 1];
                for j in 0..layer.outputs {
                    upstream = 0.0;
                    for o in 0..above.outputs {
                        upstream += above.weights[o * above.inputs + j] * ws.delta[l + 1][o];
                    }
                    ws.delta[l][j] = upstream * layer.activation.derivative(pre[j], post[j]);
                }
            }
            let input: &[f64] = if l == 0 { x } else { &ws.post[l - 1] };
            let gw = &mut grads.weights[l];
            let gb = &mut grads.bias[l];
            for o in 0..layer.outputs {
                let d = ws.delta[l][o];
                if d == 0.0 {
                    continue;
                }
                gb[o] += d;
                let row = &mut gw[o * layer.inputs..(o + 1) * layer.inputs];
                for (g, &a) in row.iter_mut().zip(input) {
                    *g += d * a;
                }
            }
        }
    }
    loss / n
}

/// Schema-aware input normalizers fit on a log.
pub fn fit_normalizers(log: &[Interaction], schema: &FeatureSchema) -> Vec<Normalizer> {
    schema
        .kinds
        .iter()
        .enumerate()
        .map(|(f, &kind)| Normalizer::fit(kind, log.iter().map(|r| r.familiarity.values()[f])))
        .collect()
}
