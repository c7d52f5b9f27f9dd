//! Text-driven zero-shot predictions: a temperature-scaled softmax over
//! cosine similarities between features and class anchors.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::embedding::{AnchorSet, AssignmentMatrix, EmbeddingSet, LabelVector};
use crate::error::{Result, StataError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotConfig {
    /// Softmax temperature multiplying the cosine logits. The default is the
    /// usual CLIP logit scale; use 1.0 if the embeddings already carry it.
    pub tau: f64,
}

impl Default for ZeroShotConfig {
    fn default() -> Self {
        Self { tau: 100.0 }
    }
}

impl ZeroShotConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(StataError::config(format!("tau must be positive and finite, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Numerically stable in-place softmax over each row.
pub fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0;
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            sum += e;
            e
        });
        row /= sum;
    }
}

pub fn zero_shot_predict(
    features: &EmbeddingSet,
    anchors: &AnchorSet,
    cfg: &ZeroShotConfig,
) -> Result<AssignmentMatrix> {
    cfg.validate()?;
    anchors.check_features(features)?;
    let mut logits = crate::linalg::matmul(features.view(), anchors.view().t());
    logits *= cfg.tau;
    softmax_rows(&mut logits);
    Ok(AssignmentMatrix::from_array_unchecked(logits))
}

/// Fraction of rows whose argmax (lowest index on ties) equals the label.
pub fn zero_shot_accuracy(pred: &AssignmentMatrix, labels: &LabelVector) -> Result<f64> {
    if pred.n() != labels.len() {
        return Err(StataError::shape(format!("{} predictions for {} labels", pred.n(), labels.len())));
    }
    if pred.k() != labels.k() {
        return Err(StataError::shape(format!("predictions have K={}, labels K={}", pred.k(), labels.k())));
    }
    Ok(accuracy(&pred.argmax(), labels.as_slice()))
}

/// Plain hit rate of `predicted` against `truth`; 0 for empty input.
pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / truth.len() as f64
}
