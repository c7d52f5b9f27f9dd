use ndarray::{ArrayView2, Zip};
use serde::Serialize;

use crate::embedding::{AssignmentMatrix, EmbeddingSet};
use crate::error::{Result, StataError};
use crate::gmm::{kl_anchor_term, log_likelihoods, AnchorDistribution, GaussianBank};

use super::affinity::AffinityGraph;

/// The objective split into its four terms. `total()` is what the solver
/// minimizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObjectiveBreakdown {
    /// `−Σ_i z_iᵀ log p_i`.
    pub data_fit: f64,
    /// `−½ Σ_i Σ_{j∈N(i)} w_ij z_iᵀ z_j`.
    pub laplacian: f64,
    /// `Σ_i KL(z_i ‖ ŷ_i)`.
    pub text_kl: f64,
    /// `α Σ_k KL(N'_k ‖ N_k)`.
    pub anchor_kl: f64,
}

impl ObjectiveBreakdown {
    pub fn total(&self) -> f64 {
        self.data_fit + self.laplacian + self.text_kl + self.anchor_kl
    }
}

pub fn objective_value(
    z: &AssignmentMatrix,
    features: &EmbeddingSet,
    bank: &GaussianBank,
    anchor: &AnchorDistribution,
    yhat: &AssignmentMatrix,
    graph: &AffinityGraph,
    alpha: f64,
) -> Result<f64> {
    objective_breakdown(z, features, bank, anchor, yhat, graph, alpha).map(|b| b.total())
}

pub fn objective_breakdown(
    z: &AssignmentMatrix,
    features: &EmbeddingSet,
    bank: &GaussianBank,
    anchor: &AnchorDistribution,
    yhat: &AssignmentMatrix,
    graph: &AffinityGraph,
    alpha: f64,
) -> Result<ObjectiveBreakdown> {
    let loglik = log_likelihoods(features, bank)?;
    objective_from_loglik(z.view(), loglik.view(), bank, anchor, yhat.view(), graph, alpha)
}

pub(crate) fn objective_from_loglik(
    z: ArrayView2<'_, f64>,
    loglik: ArrayView2<'_, f64>,
    bank: &GaussianBank,
    anchor: &AnchorDistribution,
    yhat: ArrayView2<'_, f64>,
    graph: &AffinityGraph,
    alpha: f64,
) -> Result<ObjectiveBreakdown> {
    if z.dim() != loglik.dim() || z.dim() != yhat.dim() || graph.n() != z.nrows() {
        return Err(StataError::shape(format!(
            "objective: z {:?}, loglik {:?}, yhat {:?}, graph n={}",
            z.dim(),
            loglik.dim(),
            yhat.dim(),
            graph.n()
        )));
    }
    let mut data_fit = 0.0;
    Zip::from(&z).and(&loglik).for_each(|&zi, &l| data_fit -= zi * l);

    let mut laplacian = 0.0;
    for i in 0..z.nrows() {
        let zi = z.row(i);
        for (j, w) in graph.neighbors(i) {
            laplacian -= 0.5 * w * zi.dot(&z.row(j));
        }
    }

    let mut text_kl = 0.0;
    for (i, (zr, yr)) in z.rows().into_iter().zip(yhat.rows()).enumerate() {
        for (k, (&zv, &yv)) in zr.iter().zip(yr.iter()).enumerate() {
            if zv > 0.0 {
                if yv <= 0.0 {
                    return Err(StataError::InfiniteKl { row: i, class: k });
                }
                text_kl += zv * (zv / yv).ln();
            }
        }
    }

    let anchor_kl = if alpha == 0.0 { 0.0 } else { alpha * kl_anchor_term(bank, anchor)? };
    Ok(ObjectiveBreakdown { data_fit, laplacian, text_kl, anchor_kl })
}
