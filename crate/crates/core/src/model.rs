//! Flat-parameter classifiers with hand-derived gradients.
//!
//! Parameters are stored as one flat vector, laid out layer by layer with the
//! row-major weight matrix first and the bias vector after it:
//!
//! * logistic regression: `W[classes x input]`, `b[classes]`
//! * one-hidden-layer MLP: `W1[hidden x input]`, `b1[hidden]`,
//!   `W2[classes x hidden]`, `b2[classes]`
//!
//! The hidden activation is ReLU. Losses are mean softmax cross-entropy.

use std::ops::{Deref, DerefMut, Range};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::seed;

const INIT_SCALE: f64 = 0.05;

/// Flat parameter or update vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        check_len(self.len(), other.len())?;
        Ok(self.iter().zip(other.iter()).map(|(a, b)| a - b).collect())
    }

    /// Elementwise `self + other`.
    pub fn add(&self, other: &ParamVector) -> Result<ParamVector> {
        check_len(self.len(), other.len())?;
        Ok(self.iter().zip(other.iter()).map(|(a, b)| a + b).collect())
    }

    pub fn l2_norm(&self) -> f64 {
        self.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

impl Deref for ParamVector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

impl FromIterator<f64> for ParamVector {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    LogisticRegression,
    /// One hidden ReLU layer.
    Mlp1h,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    /// Ignored for logistic regression.
    pub hidden_dim: usize,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn logistic(input_dim: usize, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::LogisticRegression,
            input_dim,
            hidden_dim: 0,
            num_classes,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::Mlp1h,
            input_dim,
            hidden_dim,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 {
            return Err(Error::invalid("model dimensions must be >= 1"));
        }
        if self.kind == ModelKind::Mlp1h && self.hidden_dim == 0 {
            return Err(Error::invalid("mlp hidden_dim must be >= 1"));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layer_ranges().last().map_or(0, |r| r.end)
    }

    /// Ranges of the flat vector occupied by each weight matrix and bias
    /// vector, in layout order.
    pub fn layer_ranges(&self) -> Vec<Range<usize>> {
        let shapes: Vec<usize> = match self.kind {
            ModelKind::LogisticRegression => {
                vec![self.num_classes * self.input_dim, self.num_classes]
            }
            ModelKind::Mlp1h => vec![
                self.hidden_dim * self.input_dim,
                self.hidden_dim,
                self.num_classes * self.hidden_dim,
                self.num_classes,
            ],
        };
        let mut start = 0;
        shapes
            .into_iter()
            .map(|len| {
                let r = start..start + len;
                start += len;
                r
            })
            .collect()
    }

    /// Uniform(-0.05, 0.05) initialization from a seeded stream.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = seed::rng(seed);
        (0..self.param_count())
            .map(|_| rng.random_range(-INIT_SCALE..INIT_SCALE))
            .collect()
    }
}

/// Row-major feature matrix plus one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    features: Vec<f64>,
    labels: Vec<usize>,
    input_dim: usize,
}

impl Batch {
    pub fn new(features: Vec<f64>, labels: Vec<usize>, input_dim: usize) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::invalid("input_dim must be >= 1"));
        }
        if labels.is_empty() {
            return Err(Error::EmptyBatch);
        }
        check_len(labels.len() * input_dim, features.len())?;
        Ok(Self {
            features,
            labels,
            input_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.input_dim..(i + 1) * self.input_dim]
    }

    fn rows(&self) -> impl Iterator<Item = (&[f64], usize)> {
        self.features
            .chunks_exact(self.input_dim)
            .zip(self.labels.iter().copied())
    }
}

fn check_inputs(params: &ParamVector, spec: &ModelSpec, batch: &Batch) -> Result<()> {
    spec.validate()?;
    check_len(spec.param_count(), params.len())?;
    check_len(spec.input_dim, batch.input_dim)?;
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if let Some(&bad) = batch.labels.iter().find(|&&l| l >= spec.num_classes) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {} classes",
            spec.num_classes
        )));
    }
    Ok(())
}

/// `out = W x + b` for a row-major `W[out.len() x x.len()]`.
fn affine(weights: &[f64], bias: &[f64], x: &[f64], out: &mut [f64]) {
    for (o, (row, b)) in out.iter_mut().zip(weights.chunks_exact(x.len()).zip(bias)) {
        *o = row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b;
    }
}

/// Replaces logits by softmax probabilities and returns `-ln p[label]`.
fn softmax_xent(logits: &mut [f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted_label = logits[label] - max;
    let mut sum = 0.0;
    for z in logits.iter_mut() {
        *z = (*z - max).exp();
        sum += *z;
    }
    let loss = sum.ln() - shifted_label;
    for z in logits.iter_mut() {
        *z /= sum;
    }
    loss
}

struct Forward {
    hidden_pre: Vec<f64>,
    hidden: Vec<f64>,
    probs: Vec<f64>,
}

impl Forward {
    fn new(spec: &ModelSpec) -> Self {
        Self {
            hidden_pre: vec![0.0; spec.hidden_dim],
            hidden: vec![0.0; spec.hidden_dim],
            probs: vec![0.0; spec.num_classes],
        }
    }

    /// Fills `probs` (and hidden activations for the MLP), returning the
    /// per-sample loss.
    fn run(&mut self, params: &[f64], spec: &ModelSpec, x: &[f64], label: usize) -> f64 {
        let layers = spec.layer_ranges();
        match spec.kind {
            ModelKind::LogisticRegression => {
                affine(
                    &params[layers[0].clone()],
                    &params[layers[1].clone()],
                    x,
                    &mut self.probs,
                );
            }
            ModelKind::Mlp1h => {
                affine(
                    &params[layers[0].clone()],
                    &params[layers[1].clone()],
                    x,
                    &mut self.hidden_pre,
                );
                for (h, &p) in self.hidden.iter_mut().zip(&self.hidden_pre) {
                    *h = p.max(0.0);
                }
                affine(
                    &params[layers[2].clone()],
                    &params[layers[3].clone()],
                    &self.hidden,
                    &mut self.probs,
                );
            }
        }
        softmax_xent(&mut self.probs, label)
    }
}

/// Mean cross-entropy over the batch.
pub fn forward_loss(params: &ParamVector, spec: &ModelSpec, batch: &Batch) -> Result<f64> {
    check_inputs(params, spec, batch)?;
    let mut fwd = Forward::new(spec);
    let total: f64 = batch.rows().map(|(x, y)| fwd.run(params, spec, x, y)).sum();
    Ok(total / batch.len() as f64)
}

/// Gradient of [`forward_loss`] with respect to every parameter.
pub fn gradient(params: &ParamVector, spec: &ModelSpec, batch: &Batch) -> Result<ParamVector> {
    check_inputs(params, spec, batch)?;
    let layers = spec.layer_ranges();
    let mut grad = vec![0.0; params.len()];
    let mut fwd = Forward::new(spec);
    let mut d_hidden = vec![0.0; spec.hidden_dim];

    for (x, y) in batch.rows() {
        fwd.run(params, spec, x, y);
        // dL/dz = softmax - onehot
        fwd.probs[y] -= 1.0;
        let dz = &fwd.probs;
        match spec.kind {
            ModelKind::LogisticRegression => {
                outer_acc(&mut grad[layers[0].clone()], dz, x);
                add_acc(&mut grad[layers[1].clone()], dz);
            }
            ModelKind::Mlp1h => {
                outer_acc(&mut grad[layers[2].clone()], dz, &fwd.hidden);
                add_acc(&mut grad[layers[3].clone()], dz);
                let w2 = &params[layers[2].clone()];
                for (j, dh) in d_hidden.iter_mut().enumerate() {
                    *dh = if fwd.hidden_pre[j] > 0.0 {
                        dz.iter()
                            .enumerate()
                            .map(|(c, d)| d * w2[c * spec.hidden_dim + j])
                            .sum()
                    } else {
                        0.0
                    };
                }
                outer_acc(&mut grad[layers[0].clone()], &d_hidden, x);
                add_acc(&mut grad[layers[1].clone()], &d_hidden);
            }
        }
    }

    let scale = 1.0 / batch.len() as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok(ParamVector(grad))
}

fn outer_acc(acc: &mut [f64], left: &[f64], right: &[f64]) {
    for (row, l) in acc.chunks_exact_mut(right.len()).zip(left) {
        for (a, r) in row.iter_mut().zip(right) {
            *a += l * r;
        }
    }
}

fn add_acc(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

/// `params - alpha * grad`, elementwise.
pub fn sgd_step(params: &ParamVector, grad: &ParamVector, alpha: f64) -> Result<ParamVector> {
    check_len(params.len(), grad.len())?;
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(Error::invalid(format!(
            "learning rate {alpha} must be finite and >= 0"
        )));
    }
    Ok(params
        .iter()
        .zip(grad.iter())
        .map(|(p, g)| p - alpha * g)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub alpha: f64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 32,
            alpha: 0.1,
        }
    }
}

/// Minibatch SGD over `indices` of `dataset`, reshuffled every epoch from a
/// stream seeded by `seed`.
pub fn local_train(
    params: &ParamVector,
    spec: &ModelSpec,
    dataset: &LabeledDataset,
    indices: &[usize],
    train: &TrainParams,
    seed: u64,
) -> Result<ParamVector> {
    if indices.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if train.epochs == 0 || train.batch_size == 0 {
        return Err(Error::invalid("epochs and batch_size must be >= 1"));
    }
    let mut rng = seed::rng(seed);
    let mut order = indices.to_vec();
    let mut current = params.clone();
    for _ in 0..train.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(train.batch_size) {
            let batch = dataset.batch(chunk)?;
            let grad = gradient(&current, spec, &batch)?;
            current = sgd_step(&current, &grad, train.alpha)?;
        }
    }
    Ok(current)
}

/// Argmax of the class scores, lowest index on ties.
pub fn predict(params: &ParamVector, spec: &ModelSpec, x: &[f64]) -> usize {
    let mut fwd = Forward::new(spec);
    fwd.run(params, spec, x, 0);
    argmax(&fwd.probs)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in v.iter().enumerate().skip(1) {
        if p > v[best] {
            best = i;
        }
    }
    best
}

/// Accuracy and mean loss on the whole dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

pub fn evaluate(
    params: &ParamVector,
    spec: &ModelSpec,
    dataset: &LabeledDataset,
) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let batch = dataset.as_batch()?;
    check_inputs(params, spec, &batch)?;
    let mut fwd = Forward::new(spec);
    let mut correct = 0usize;
    let mut total = 0.0;
    for (x, y) in batch.rows() {
        total += fwd.run(params, spec, x, y);
        if argmax(&fwd.probs) == y {
            correct += 1;
        }
    }
    let n = batch.len() as f64;
    Ok(Evaluation {
        accuracy: correct as f64 / n,
        loss: total / n,
    })
}
