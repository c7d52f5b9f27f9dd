//! Batch transductive solver.
//!
//! Block-coordinate descent over the assignments `z` and the class
//! Gaussians. The z-block is a concave-convex step: the Laplacian term is
//! linearized at the previous iterate, which decouples the rows into
//!
//! ```text
//! z_i ∝ ŷ_i ⊙ exp(log p_i + Σ_j w_ij z_j)
//! ```
//!
//! All rows read the previous iterate (Jacobi order). The parameter block
//! is the closed-form anchored update from [`crate::gmm`].

mod affinity;
mod objective;

use ndarray::{Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::embedding::{AnchorSet, AssignmentMatrix, EmbeddingSet};
use crate::error::{Result, StataError};
use crate::gmm::{compute_beta, init_anchor, update_parameters, AnchorConfig, AnchorDistribution, GaussianBank, LikelihoodDesign};
use crate::zero_shot::{zero_shot_predict, ZeroShotConfig};

pub use affinity::{build_affinity, AffinityGraph, AffinityMode};
pub(crate) use affinity::effective_mode;
pub use objective::{objective_breakdown, objective_value, ObjectiveBreakdown};
pub(crate) use objective::objective_from_loglik;

/// Zero-shot probabilities are clamped to this inside the z-update only.
pub const YHAT_CLAMP: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub outer_iters: usize,
    pub inner_z_iters: usize,
    /// Stop once the L∞ change of z over an outer iteration drops below this.
    pub z_tolerance: f64,
    pub affinity: AffinityMode,
    pub anchor: AnchorConfig,
    pub tau: f64,
    /// Evaluate the objective after every block update. Costs one extra
    /// likelihood pass per point, and O(N²) with a full graph.
    pub record_trace: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            outer_iters: 10,
            inner_z_iters: 3,
            z_tolerance: 1e-4,
            affinity: AffinityMode::Knn(3),
            anchor: AnchorConfig::default(),
            tau: ZeroShotConfig::default().tau,
            record_trace: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outer_iters == 0 || self.inner_z_iters == 0 {
            return Err(StataError::config("outer and inner iteration counts must be at least 1"));
        }
        if !(self.z_tolerance >= 0.0) {
            return Err(StataError::config(format!("z tolerance must be >= 0, got {}", self.z_tolerance)));
        }
        self.zero_shot().validate()?;
        self.anchor.validate()
    }

    pub fn zero_shot(&self) -> ZeroShotConfig {
        ZeroShotConfig { tau: self.tau }
    }
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub z: AssignmentMatrix,
    pub bank: GaussianBank,
    pub anchor: AnchorDistribution,
    /// Objective after initialization and after every block update; empty
    /// unless tracing was requested.
    pub objective_trace: Vec<f64>,
    pub iterations_run: usize,
    pub converged: bool,
}

impl SolveResult {
    pub fn predictions(&self) -> Vec<usize> {
        self.z.argmax()
    }
}

/// `ln(max(ŷ, clamp)) + loglik`, the part of the z-update exponent that is
/// fixed while the Gaussians are.
pub(crate) fn sweep_base(log_yhat: ArrayView2<'_, f64>, loglik: &mut Array2<f64>) {
    Zip::from(loglik).and(&log_yhat).for_each(|b, &ly| *b += ly);
}

pub(crate) fn clamped_log(yhat: ArrayView2<'_, f64>) -> Array2<f64> {
    yhat.mapv(|y| y.max(YHAT_CLAMP).ln())
}

/// One Jacobi sweep: `next_i ∝ exp(base_i + Σ_j w_ij prev_j)`.
pub(crate) fn sweep_into(
    prev: ArrayView2<'_, f64>,
    base: ArrayView2<'_, f64>,
    graph: &AffinityGraph,
    next: &mut Array2<f64>,
) -> Result<()> {
    let k = prev.ncols();
    let prev = prev.as_standard_layout();
    let prev = prev.as_slice().expect("standard layout");
    let mut terms: Vec<(f64, &[f64])> = Vec::new();
    for (i, mut row) in next.axis_iter_mut(Axis(0)).enumerate() {
        let out = row.as_slice_mut().expect("standard layout");
        terms.clear();
        terms.extend(graph.neighbors(i).map(|(j, w)| (w, &prev[j * k..(j + 1) * k])));
        let max = crate::kernels::combine_rows(out, base.row(i).as_slice().expect("standard layout"), &terms);
        if !max.is_finite() {
            return Err(StataError::Numerical(format!("z-update exponent for sample {i} is {max}")));
        }
        crate::kernels::exp_normalize(out, max);
    }
    Ok(())
}

/// Applies the assignment update once, reading `z` as the previous iterate.
pub fn z_update_sweep(
    z: &AssignmentMatrix,
    yhat: &AssignmentMatrix,
    loglik: ArrayView2<'_, f64>,
    graph: &AffinityGraph,
) -> Result<AssignmentMatrix> {
    if z.view().dim() != yhat.view().dim() || z.view().dim() != loglik.dim() || graph.n() != z.n() {
        return Err(StataError::shape(format!(
            "z {:?}, yhat {:?}, loglik {:?}, graph n={}",
            z.view().dim(),
            yhat.view().dim(),
            loglik.dim(),
            graph.n()
        )));
    }
    let mut base = loglik.as_standard_layout().into_owned();
    sweep_base(clamped_log(yhat.view()).view(), &mut base);
    let mut next = Array2::zeros(base.dim());
    sweep_into(z.view(), base.view(), graph, &mut next)?;
    Ok(AssignmentMatrix::from_array_unchecked(next))
}

fn linf_change(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> f64 {
    let mut m = 0.0f64;
    Zip::from(&a).and(&b).for_each(|x, y| m = m.max((x - y).abs()));
    m
}

pub fn solve(features: &EmbeddingSet, anchors: &AnchorSet, cfg: &SolverConfig) -> Result<SolveResult> {
    cfg.validate()?;
    let yhat = zero_shot_predict(features, anchors, &cfg.zero_shot())?;
    solve_with_prior(features, anchors, &yhat, cfg)
}

/// Like [`solve`] with the zero-shot predictions supplied by the caller.
pub fn solve_with_prior(
    features: &EmbeddingSet,
    anchors: &AnchorSet,
    yhat: &AssignmentMatrix,
    cfg: &SolverConfig,
) -> Result<SolveResult> {
    cfg.validate()?;
    let anchor = init_anchor(features, anchors, yhat, &cfg.anchor)?;
    let graph = build_affinity(features, effective_mode(cfg.affinity, features.n()))?;
    let mut bank = GaussianBank::from_anchor(&anchor);
    let design = LikelihoodDesign::new(features.view());
    let log_yhat = clamped_log(yhat.view());
    let alpha = cfg.anchor.alpha;

    let mut z = yhat.view().to_owned();
    let mut scratch = Array2::zeros(z.dim());
    let mut start = Array2::zeros(z.dim());
    let mut base = Array2::zeros(z.dim());
    let mut trace = Vec::new();
    let mut iterations_run = 0;
    let mut converged = false;

    let record = |z: ArrayView2<'_, f64>, loglik: ArrayView2<'_, f64>, bank: &GaussianBank, trace: &mut Vec<f64>| {
        objective_from_loglik(z, loglik, bank, &anchor, yhat.view(), &graph, alpha).map(|o| trace.push(o.total()))
    };

    for _ in 0..cfg.outer_iters {
        design.log_likelihoods_into(&bank, &mut base);
        let loglik = cfg.record_trace.then(|| base.clone());
        if let Some(ll) = &loglik {
            if trace.is_empty() {
                record(z.view(), ll.view(), &bank, &mut trace)?;
            }
        }
        sweep_base(log_yhat.view(), &mut base);

        start.assign(&z);
        for _ in 0..cfg.inner_z_iters {
            sweep_into(z.view(), base.view(), &graph, &mut scratch)?;
            std::mem::swap(&mut z, &mut scratch);
            if let Some(ll) = &loglik {
                record(z.view(), ll.view(), &bank, &mut trace)?;
            }
        }

        let z_mat = AssignmentMatrix::from_array_unchecked(z);
        let beta = compute_beta(&z_mat, &cfg.anchor);
        update_parameters(features, &z_mat, &anchor, beta.view(), &mut bank)?;
        z = z_mat.into_inner();
        if cfg.record_trace {
            let ll = design.log_likelihoods(&bank);
            record(z.view(), ll.view(), &bank, &mut trace)?;
        }
        iterations_run += 1;

        if linf_change(start.view(), z.view()) < cfg.z_tolerance {
            converged = true;
            break;
        }
    }

    Ok(SolveResult {
        z: AssignmentMatrix::from_array_unchecked(z),
        bank,
        anchor,
        objective_trace: trace,
        iterations_run,
        converged,
    })
}
