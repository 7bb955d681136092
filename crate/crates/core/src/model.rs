//! Linear softmax intrusion classifier with plain and proximal local SGD.
//!
//! Parameters live in one flat buffer (row-major weights followed by
//! biases) so that aggregation code can treat every model as a vector.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::seeded;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("feature width mismatch: model expects {expected}, got {actual}")]
    WidthMismatch { expected: usize, actual: usize },
    #[error("parameter shape mismatch: {expected:?} vs {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite parameter produced during training")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Row-major real matrix of feature vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(ModelError::InvalidBatch(format!(
                "{} values cannot form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(ModelError::InvalidBatch(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }
}

/// Features plus integer class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledBatch {
    features: FeatureMatrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledBatch {
    pub fn new(features: FeatureMatrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(ModelError::InvalidBatch(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(ModelError::LabelOutOfRange { label, num_classes });
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    /// Builds a batch from a subset of rows of `self`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let cols = self.features.cols();
        let mut data = Vec::with_capacity(indices.len() * cols);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.features.row(i));
            labels.push(self.labels[i]);
        }
        Self {
            features: FeatureMatrix {
                rows: indices.len(),
                cols,
                data,
            },
            labels,
            num_classes: self.num_classes,
        }
    }

    /// Concatenates batches sharing the same width and class count.
    pub fn concat(parts: &[&LabeledBatch]) -> Result<Self> {
        let first = parts.first().ok_or(ModelError::EmptyBatch)?;
        let cols = first.num_features();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.num_features() != cols {
                return Err(ModelError::WidthMismatch {
                    expected: cols,
                    actual: p.num_features(),
                });
            }
            data.extend_from_slice(p.features.as_slice());
            labels.extend_from_slice(&p.labels);
        }
        Ok(Self {
            features: FeatureMatrix {
                rows: labels.len(),
                cols,
                data,
            },
            labels,
            num_classes: first.num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &FeatureMatrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Local training hyperparameters. Defaults follow the reference
/// training configuration (SGD, no momentum).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
    pub dropout_rate: f64,
    pub proximal_coeff: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            batch_size: 128,
            local_epochs: 20,
            dropout_rate: 0.1,
            proximal_coeff: 0.6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(ModelError::InvalidConfig(format!(
                "learning_rate must be a non-negative real, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(ModelError::InvalidConfig("batch_size must be positive".into()));
        }
        if self.local_epochs == 0 {
            return Err(ModelError::InvalidConfig("local_epochs must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ModelError::InvalidConfig(format!(
                "dropout_rate must lie in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        if !(self.proximal_coeff.is_finite() && self.proximal_coeff >= 0.0) {
            return Err(ModelError::InvalidConfig(format!(
                "proximal_coeff must be non-negative, got {}",
                self.proximal_coeff
            )));
        }
        Ok(())
    }
}

/// Parameters of the shared linear softmax classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    num_classes: usize,
    num_features: usize,
    /// `num_classes * num_features` row-major weights, then `num_classes` biases.
    values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(num_classes: usize, num_features: usize) -> Self {
        Self {
            num_classes,
            num_features,
            values: vec![0.0; num_classes * (num_features + 1)],
        }
    }

    pub fn from_parts(weights: Vec<Vec<f64>>, biases: Vec<f64>) -> Result<Self> {
        let num_classes = biases.len();
        let num_features = weights.first().map_or(0, Vec::len);
        if weights.len() != num_classes || weights.iter().any(|w| w.len() != num_features) {
            return Err(ModelError::ShapeMismatch {
                expected: (num_classes, num_features),
                actual: (weights.len(), num_features),
            });
        }
        let mut values: Vec<f64> = weights.into_iter().flatten().collect();
        values.extend(biases);
        Ok(Self {
            num_classes,
            num_features,
            values,
        })
    }

    pub fn from_flat(num_classes: usize, num_features: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != num_classes * (num_features + 1) {
            return Err(ModelError::InvalidBatch(format!(
                "{} values do not fit a {num_classes}x{num_features} model",
                values.len()
            )));
        }
        Ok(Self {
            num_classes,
            num_features,
            values,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.num_classes, self.num_features)
    }

    pub fn num_params(&self) -> usize {
        self.values.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn weight(&self, class: usize, feature: usize) -> f64 {
        self.values[class * self.num_features + feature]
    }

    pub fn bias(&self, class: usize) -> f64 {
        self.values[self.num_classes * self.num_features + class]
    }

    pub fn set_bias(&mut self, class: usize, value: f64) {
        let idx = self.num_classes * self.num_features + class;
        self.values[idx] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn same_shape(&self, other: &ModelParams) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(ModelError::ShapeMismatch {
                expected: self.shape(),
                actual: other.shape(),
            });
        }
        Ok(())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Euclidean distance between two same-shaped parameter vectors.
    pub fn distance(&self, other: &ModelParams) -> Result<f64> {
        self.same_shape(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            num_classes: self.num_classes,
            num_features: self.num_features,
            values: self.values.iter().map(|v| v * factor).collect(),
        }
    }

    fn check_width(&self, width: usize) -> Result<()> {
        if width != self.num_features {
            return Err(ModelError::WidthMismatch {
                expected: self.num_features,
                actual: width,
            });
        }
        Ok(())
    }

    fn logits_into(&self, x: &[f64], out: &mut [f64]) {
        let bias_off = self.num_classes * self.num_features;
        for (c, o) in out.iter_mut().enumerate() {
            let row = &self.values[c * self.num_features..(c + 1) * self.num_features];
            let dot: f64 = row.iter().zip(x).map(|(w, v)| w * v).sum();
            *o = dot + self.values[bias_off + c];
        }
    }

    /// Class probabilities for a single feature vector.
    pub fn predict_proba_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_width(x.len())?;
        let mut out = vec![0.0; self.num_classes];
        self.logits_into(x, &mut out);
        softmax_in_place(&mut out);
        Ok(out)
    }

    /// Class probabilities for each row of `features`.
    pub fn predict_proba(&self, features: &FeatureMatrix) -> Result<Vec<Vec<f64>>> {
        self.check_width(features.cols())?;
        Ok(features
            .iter_rows()
            .map(|x| {
                let mut out = vec![0.0; self.num_classes];
                self.logits_into(x, &mut out);
                softmax_in_place(&mut out);
                out
            })
            .collect())
    }

    /// Argmax class for each row.
    pub fn predict(&self, features: &FeatureMatrix) -> Result<Vec<usize>> {
        Ok(self.predict_proba(features)?.iter().map(|p| argmax(p)).collect())
    }

    fn check_batch(&self, batch: &LabeledBatch) -> Result<()> {
        if batch.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        self.check_width(batch.num_features())?;
        if let Some(&label) = batch.labels().iter().find(|&&l| l >= self.num_classes) {
            return Err(ModelError::LabelOutOfRange {
                label,
                num_classes: self.num_classes,
            });
        }
        Ok(())
    }

    /// Mean cross-entropy of the true labels.
    pub fn loss(&self, batch: &LabeledBatch) -> Result<f64> {
        self.check_batch(batch)?;
        let mut logits = vec![0.0; self.num_classes];
        let mut total = 0.0;
        for (x, &y) in batch.features().iter_rows().zip(batch.labels()) {
            self.logits_into(x, &mut logits);
            total += log_sum_exp(&logits) - logits[y];
        }
        Ok(total / batch.len() as f64)
    }

    /// Gradient of [`ModelParams::loss`] with respect to every parameter.
    pub fn gradient(&self, batch: &LabeledBatch) -> Result<ModelParams> {
        self.check_batch(batch)?;
        let mut grad = ModelParams::zeros(self.num_classes, self.num_features);
        let mut probs = vec![0.0; self.num_classes];
        for (x, &y) in batch.features().iter_rows().zip(batch.labels()) {
            self.accumulate_sample(x, y, &mut probs, &mut grad.values);
        }
        let inv = 1.0 / batch.len() as f64;
        grad.values.iter_mut().for_each(|g| *g *= inv);
        Ok(grad)
    }

    fn accumulate_sample(&self, x: &[f64], y: usize, probs: &mut [f64], grad: &mut [f64]) {
        self.logits_into(x, probs);
        softmax_in_place(probs);
        probs[y] -= 1.0;
        let bias_off = self.num_classes * self.num_features;
        for (c, &delta) in probs.iter().enumerate() {
            let row = &mut grad[c * self.num_features..(c + 1) * self.num_features];
            for (g, v) in row.iter_mut().zip(x) {
                *g += delta * v;
            }
            grad[bias_off + c] += delta;
        }
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln()
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// Mini-batch SGD on the mean cross-entropy of `data`.
///
/// Batch order is reshuffled every epoch from `seed`; the last partial
/// batch is kept. Inputs are dropped at `cfg.dropout_rate` with inverted
/// scaling during training only.
pub fn local_train(
    model: &ModelParams,
    data: &LabeledBatch,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ModelParams> {
    sgd(model, None, data, cfg, seed)
}

/// Like [`local_train`] but each step also descends
/// `(rho / 2) * ||w - anchor||^2` with `rho = cfg.proximal_coeff`.
///
/// The quadratic term is taken at the updated point,
/// `w' = (w - lr * g + lr * rho * anchor) / (1 + lr * rho)`, which agrees
/// with the explicit step to first order in `lr * rho` but stays stable
/// for any `rho` and pins the result to `anchor` as `rho` grows.
///
/// With `rho == 0` the result is bit-identical to [`local_train`].
pub fn prox_local_train(
    model: &ModelParams,
    anchor: &ModelParams,
    data: &LabeledBatch,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ModelParams> {
    model.same_shape(anchor)?;
    sgd(model, Some(anchor), data, cfg, seed)
}

fn sgd(
    model: &ModelParams,
    anchor: Option<&ModelParams>,
    data: &LabeledBatch,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<ModelParams> {
    cfg.validate()?;
    model.check_batch(data)?;
    let mut w = model.clone();
    if cfg.learning_rate == 0.0 {
        return Ok(w);
    }
    let anchor = anchor.filter(|_| cfg.proximal_coeff > 0.0);

    let mut rng = seeded(seed);
    let n = data.len();
    let width = data.num_features();
    let keep = 1.0 - cfg.dropout_rate;
    let scale = 1.0 / keep;
    let mut order: Vec<usize> = (0..n).collect();
    let mut grad = vec![0.0; w.num_params()];
    let mut probs = vec![0.0; w.num_classes];
    let mut dropped = vec![0.0; width];

    for _ in 0..cfg.local_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = 0.0);
            for &i in chunk {
                let x = data.features().row(i);
                let input: &[f64] = if cfg.dropout_rate > 0.0 {
                    for (d, &v) in dropped.iter_mut().zip(x) {
                        *d = if rng.random::<f64>() < keep { v * scale } else { 0.0 };
                    }
                    &dropped
                } else {
                    x
                };
                w.accumulate_sample(input, data.labels()[i], &mut probs, &mut grad);
            }
            let inv = 1.0 / chunk.len() as f64;
            match anchor {
                Some(a) => {
                    let lr_rho = cfg.learning_rate * cfg.proximal_coeff;
                    let shrink = 1.0 / (1.0 + lr_rho);
                    for ((wv, g), av) in w.values.iter_mut().zip(&grad).zip(&a.values) {
                        *wv = (*wv - cfg.learning_rate * g * inv + lr_rho * av) * shrink;
                    }
                }
                None => {
                    for (wv, g) in w.values.iter_mut().zip(&grad) {
                        *wv -= cfg.learning_rate * (g * inv);
                    }
                }
            }
        }
    }
    if !w.is_finite() {
        return Err(ModelError::NonFinite);
    }
    Ok(w)
}

/// Fraction of rows whose argmax prediction equals the label.
pub fn accuracy(model: &ModelParams, batch: &LabeledBatch) -> Result<f64> {
    model.check_batch(batch)?;
    let preds = model.predict(batch.features())?;
    let correct = preds
        .iter()
        .zip(batch.labels())
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / batch.len() as f64)
}
