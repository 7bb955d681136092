//! Adaptive conformal calibration of cluster models.
//!
//! Calibration never touches model weights. It only produces a threshold
//! on the nonconformity score `1 - p(y|x)`, and decisions are read off the
//! resulting prediction set.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::ClusterModel;
use crate::hardware::{NormProfile, ResourceWeights};
use crate::model::{FeatureMatrix, LabeledBatch, ModelError, ModelParams};

#[derive(Debug, Error, PartialEq)]
pub enum CalibrationError {
    #[error("calibration set is empty")]
    EmptyCalibration,
    #[error("score list is empty")]
    EmptyScores,
    #[error("class {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },
    #[error("confidence level must lie in (0, 1), got {0}")]
    InvalidConfidence(f64),
    #[error("invalid calibration config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, CalibrationError>;

pub const Q_MIN: f64 = 0.5;
pub const Q_MAX: f64 = 0.999;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub enabled: bool,
    pub initial_confidence: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Count empty prediction sets as attack when estimating FNR and FPR.
    pub suspicious_as_attack: bool,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            initial_confidence: 0.9,
            alpha: 0.5,
            beta: 0.2,
            gamma: 0.05,
            suspicious_as_attack: true,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        let q = self.initial_confidence;
        if !(q > 0.0 && q < 1.0) {
            return Err(CalibrationError::InvalidConfidence(q));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CalibrationError::InvalidConfig(format!(
                    "{name} must be non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationState {
    /// Ascending nonconformity scores of the latest calibration pass.
    pub scores: Vec<f64>,
    pub confidence: f64,
    pub threshold: f64,
    pub recent_fnr: f64,
    pub recent_fpr: f64,
    pub resource_index: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl CalibrationState {
    pub fn new(cfg: &CalibrationConfig) -> Self {
        Self {
            scores: Vec::new(),
            confidence: cfg.initial_confidence.clamp(Q_MIN, Q_MAX),
            threshold: 1.0,
            recent_fnr: 0.0,
            recent_fpr: 0.0,
            resource_index: 0.0,
            alpha: cfg.alpha,
            beta: cfg.beta,
            gamma: cfg.gamma,
        }
    }

    pub fn record_feedback(&mut self, fnr: f64, fpr: f64) {
        self.recent_fnr = fnr;
        self.recent_fpr = fpr;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibratedModel {
    pub params: ModelParams,
    pub threshold: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DecisionKind {
    SingleLabel(usize),
    ResolvedTie { class: usize, set_size: usize },
    Suspicious,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub kind: DecisionKind,
    pub prediction_set: Vec<usize>,
}

impl Decision {
    /// A plain argmax decision with no set semantics.
    pub fn label(class: usize) -> Self {
        Self {
            kind: DecisionKind::SingleLabel(class),
            prediction_set: vec![class],
        }
    }

    pub fn class(&self) -> Option<usize> {
        match self.kind {
            DecisionKind::SingleLabel(c) | DecisionKind::ResolvedTie { class: c, .. } => Some(c),
            DecisionKind::Suspicious => None,
        }
    }

    pub fn is_suspicious(&self) -> bool {
        self.kind == DecisionKind::Suspicious
    }
}

/// `r_k`: resource weights applied to the mean normalized profile.
pub fn resource_index(profiles: &[NormProfile], w: &ResourceWeights) -> f64 {
    if profiles.is_empty() {
        return 0.0;
    }
    let n = profiles.len() as f64;
    let mut mean = [0.0; 3];
    for p in profiles {
        for d in 0..3 {
            mean[d] += p[d] / n;
        }
    }
    w.dot(&mean).clamp(0.0, 1.0)
}

pub fn nonconformity_score(model: &ModelParams, x: &[f64], y: usize) -> Result<f64> {
    if y >= model.num_classes() {
        return Err(CalibrationError::ClassOutOfRange {
            class: y,
            num_classes: model.num_classes(),
        });
    }
    let p = model.predict_proba_one(x)?;
    Ok((1.0 - p[y]).clamp(0.0, 1.0))
}

pub fn build_score_set(model: &ModelParams, data: &LabeledBatch) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(CalibrationError::EmptyCalibration);
    }
    let probs = model.predict_proba(data.features())?;
    let mut scores = Vec::with_capacity(data.len());
    for (p, &y) in probs.iter().zip(data.labels()) {
        if y >= model.num_classes() {
            return Err(CalibrationError::ClassOutOfRange {
                class: y,
                num_classes: model.num_classes(),
            });
        }
        scores.push((1.0 - p[y]).clamp(0.0, 1.0));
    }
    scores.sort_by(f64::total_cmp);
    Ok(scores)
}

/// The `ceil(q n)`-th smallest score (1-indexed).
///
/// A 1e-9 slack is taken off `q n` before the ceiling so that products
/// like `0.9 * 10` land on 9 and not 10.
pub fn quantile(scores: &[f64], q: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(CalibrationError::EmptyScores);
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(CalibrationError::InvalidConfidence(q));
    }
    let n = scores.len();
    let rank = ((q * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    Ok(scores[rank - 1])
}

pub fn update_confidence(state: &CalibrationState) -> f64 {
    let q = state.confidence - state.alpha * state.recent_fnr
        + state.beta * state.recent_fpr
        + state.gamma * state.resource_index;
    q.clamp(Q_MIN, Q_MAX)
}

/// Prediction-set decision for already computed class probabilities.
pub fn decide(probs: &[f64], threshold: f64) -> Decision {
    let set: Vec<usize> = probs
        .iter()
        .enumerate()
        .filter(|(_, &p)| 1.0 - p <= threshold)
        .map(|(y, _)| y)
        .collect();
    let kind = match set.len() {
        0 => DecisionKind::Suspicious,
        1 => DecisionKind::SingleLabel(set[0]),
        size => {
            let mut best = set[0];
            for &y in &set[1..] {
                if probs[y] > probs[best] {
                    best = y;
                }
            }
            DecisionKind::ResolvedTie {
                class: best,
                set_size: size,
            }
        }
    };
    Decision {
        kind,
        prediction_set: set,
    }
}

pub fn predict_with_calibration(cal: &CalibratedModel, x: &[f64]) -> Result<Decision> {
    let probs = cal.params.predict_proba_one(x)?;
    Ok(decide(&probs, cal.threshold))
}

pub fn predict_batch_with_calibration(cal: &CalibratedModel, features: &FeatureMatrix) -> Result<Vec<Decision>> {
    Ok(cal
        .params
        .predict_proba(features)?
        .iter()
        .map(|p| decide(p, cal.threshold))
        .collect())
}

/// One calibration pass: rebuild the score set, move the confidence
/// level, and set the threshold to the new quantile.
pub fn calibrate(
    model: &ClusterModel,
    calibration_data: &LabeledBatch,
    state: &CalibrationState,
) -> Result<(CalibratedModel, CalibrationState)> {
    let scores = build_score_set(&model.params, calibration_data)?;
    let confidence = update_confidence(state);
    let threshold = quantile(&scores, confidence)?;
    let next = CalibrationState {
        scores,
        confidence,
        threshold,
        ..state.clone()
    };
    Ok((
        CalibratedModel {
            params: model.params.clone(),
            threshold,
            confidence,
        },
        next,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_class(bias0: f64) -> ModelParams {
        ModelParams::from_parts(vec![vec![0.0], vec![0.0]], vec![bias0, 0.0]).unwrap()
    }

    fn state(q: f64, fnr: f64, fpr: f64, r: f64) -> CalibrationState {
        CalibrationState {
            confidence: q,
            recent_fnr: fnr,
            recent_fpr: fpr,
            resource_index: r,
            ..CalibrationState::new(&CalibrationConfig::default())
        }
    }

    #[test]
    fn score_examples() {
        let confident = two_class(800.0);
        assert_eq!(nonconformity_score(&confident, &[0.3], 0).unwrap(), 0.0);
        // p(0) = 0.7 when bias0 = ln(7/3)
        let m = two_class((7.0f64 / 3.0).ln());
        assert!((nonconformity_score(&m, &[0.3], 0).unwrap() - 0.3).abs() < 1e-12);
        let uniform = ModelParams::zeros(4, 2);
        for y in 0..4 {
            assert!((nonconformity_score(&uniform, &[0.1, 0.9], y).unwrap() - 0.75).abs() < 1e-15);
        }
        assert_eq!(
            nonconformity_score(&uniform, &[0.1, 0.9], 4).unwrap_err(),
            CalibrationError::ClassOutOfRange { class: 4, num_classes: 4 }
        );
    }

    #[test]
    fn score_set_multiset_semantics() {
        let m = two_class(9f64.ln()); // p(0) = 0.9
        let one = LabeledBatch::new(FeatureMatrix::from_rows(&[vec![0.5]]).unwrap(), vec![0], 2).unwrap();
        let s = build_score_set(&m, &one).unwrap();
        assert_eq!(s.len(), 1);
        assert!((s[0] - 0.1).abs() < 1e-12);
        let dup = LabeledBatch::new(
            FeatureMatrix::from_rows(&[vec![0.5], vec![0.5], vec![0.1]]).unwrap(),
            vec![1, 1, 0],
            2,
        )
        .unwrap();
        let s = build_score_set(&m, &dup).unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s[1], s[2]);
        assert!(s.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn quantile_examples() {
        let s = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(quantile(&s, 0.5).unwrap(), 0.2);
        assert_eq!(quantile(&s, 0.999_999).unwrap(), 0.4);
        assert_eq!(quantile(&[0.42], 0.01).unwrap(), 0.42);
        assert_eq!(quantile(&[0.42], 0.99).unwrap(), 0.42);
        let ten: Vec<f64> = (1..=10).map(|i| i as f64).collect();
        assert_eq!(quantile(&ten, 0.9).unwrap(), 9.0);
        assert_eq!(quantile(&[], 0.5).unwrap_err(), CalibrationError::EmptyScores);
    }

    #[test]
    fn confidence_examples() {
        assert_eq!(update_confidence(&state(0.9, 0.0, 0.0, 0.0)), 0.9);
        assert!((update_confidence(&state(0.9, 0.02, 0.01, 0.5)) - 0.917).abs() < 1e-12);
        assert_eq!(update_confidence(&state(0.6, 1.0, 0.0, 0.0)), Q_MIN);
        assert_eq!(update_confidence(&state(0.99, 0.0, 1.0, 1.0)), Q_MAX);
    }

    #[test]
    fn decision_examples() {
        let probs = [0.8, 0.15, 0.05];
        assert_eq!(decide(&probs, 0.5).kind, DecisionKind::SingleLabel(0));
        let d = decide(&probs, 0.9);
        assert_eq!(d.kind, DecisionKind::ResolvedTie { class: 0, set_size: 2 });
        assert_eq!(d.prediction_set, vec![0, 1]);
        let d = decide(&[0.5, 0.5], 0.1);
        assert!(d.is_suspicious());
        assert!(d.prediction_set.is_empty());
        assert_eq!(d.class(), None);
    }

    #[test]
    fn calibrate_composes_quantile() {
        let cfg = CalibrationConfig::default();
        let m = ClusterModel {
            cluster_id: 0,
            params: ModelParams::from_parts(vec![vec![3.0], vec![-3.0]], vec![0.0, 0.0]).unwrap(),
            total_data: 10,
            mean_membership: 1.0,
        };
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64 / 9.0]).collect();
        let labels = vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1];
        let data = LabeledBatch::new(FeatureMatrix::from_rows(&rows).unwrap(), labels, 2).unwrap();
        let (cal, st) = calibrate(&m, &data, &CalibrationState::new(&cfg)).unwrap();
        let scores = build_score_set(&m.params, &data).unwrap();
        assert_eq!(st.scores, scores);
        assert_eq!(cal.threshold, scores[8]);
        assert_eq!(cal.confidence, 0.9);
        assert_eq!(cal.params, m.params);
    }

    #[test]
    fn confident_model_gets_zero_threshold() {
        let m = ClusterModel {
            cluster_id: 0,
            params: two_class(800.0),
            total_data: 3,
            mean_membership: 1.0,
        };
        let data = LabeledBatch::new(FeatureMatrix::from_rows(&[vec![0.1], vec![0.9]]).unwrap(), vec![0, 0], 2).unwrap();
        let (cal, _) = calibrate(&m, &data, &CalibrationState::new(&CalibrationConfig::default())).unwrap();
        assert_eq!(cal.threshold, 0.0);
        assert_eq!(predict_with_calibration(&cal, &[0.4]).unwrap().kind, DecisionKind::SingleLabel(0));
    }

    #[test]
    fn resource_index_of_archetype_mean() {
        let w = ResourceWeights::default();
        let r = resource_index(&[[0.0; 3], [1.0; 3]], &w);
        assert!((r - 0.5).abs() < 1e-15);
        assert_eq!(resource_index(&[], &w), 0.0);
    }
}
