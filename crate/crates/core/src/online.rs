//! Streaming adaptation.
//!
//! Each batch is solved against the current class Gaussians, its
//! predictions are emitted, and only then are its assignments folded into
//! running per-class statistics: weighted means `v`, weighted squared
//! deviations `T`, soft masses `Z` and hard counts `N`. The Gaussians are
//! re-derived from those accumulators with the same anchored blend as the
//! batch solver.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::embedding::{AnchorSet, AssignmentMatrix, EmbeddingSet};
use crate::error::{Result, StataError};
use crate::gmm::{
    beta_from_count, blend_covariance, blend_mean, hard_counts, init_anchor, weighted_sums, AnchorDistribution,
    BetaMode, GaussianBank, LikelihoodDesign, EMPTY_CLASS_MASS,
};
use crate::kernels::weighted_sq_dev;
use crate::solver::{build_affinity, clamped_log, effective_mode, sweep_base, sweep_into, SolverConfig};
use crate::zero_shot::zero_shot_predict;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    /// Sweep count, affinity, anchor strength, β mode and temperature.
    /// `outer_iters` and `z_tolerance` are ignored; see `batch_passes`.
    pub solver: SolverConfig,
    /// z-solve passes per batch. Passes after the first re-solve against
    /// parameters that provisionally include the batch itself.
    pub batch_passes: usize,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self { solver: SolverConfig::default(), batch_passes: 1 }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_passes == 0 {
            return Err(StataError::config("batch passes must be at least 1"));
        }
        self.solver.validate()
    }
}

/// Running per-class sufficient statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassAccumulator {
    /// Weighted means, K×d. Rows with zero mass are zero.
    pub v: Array2<f64>,
    /// Weighted mean squared deviations about the μ supplied at each fold, K×d.
    pub t: Array2<f64>,
    /// Soft masses `Z_k`.
    pub mass: Array1<f64>,
    /// Hard (argmax) counts `N_k`.
    pub count: Array1<f64>,
}

impl ClassAccumulator {
    pub fn new(k: usize, d: usize) -> Self {
        Self { v: Array2::zeros((k, d)), t: Array2::zeros((k, d)), mass: Array1::zeros(k), count: Array1::zeros(k) }
    }

    pub fn k(&self) -> usize {
        self.v.nrows()
    }

    pub fn d(&self) -> usize {
        self.v.ncols()
    }

    /// Folds the first-order statistics (`v`, `Z`, `N`) of one batch.
    pub fn fold_means(&mut self, features: ArrayView2<'_, f64>, z: ArrayView2<'_, f64>) -> Result<()> {
        self.check(features, z)?;
        let (mass, sums) = weighted_sums(features, z);
        for c in 0..self.k() {
            let total = self.mass[c] + mass[c];
            if total > EMPTY_CLASS_MASS {
                let old = self.mass[c];
                let mut row = self.v.row_mut(c);
                row.zip_mut_with(&sums.row(c), |v, &s| *v = (old * *v + s) / total);
            }
            self.mass[c] = total;
        }
        self.count += &hard_counts(z);
        Ok(())
    }

    /// Folds the second-order statistics of one batch about `mu`. Call after
    /// [`fold_means`](Self::fold_means) for the same batch: the masses it
    /// updated are the new denominators.
    pub fn fold_deviations(
        &mut self,
        features: ArrayView2<'_, f64>,
        z: ArrayView2<'_, f64>,
        mu: ArrayView2<'_, f64>,
    ) -> Result<()> {
        self.check(features, z)?;
        if mu.dim() != self.v.dim() {
            return Err(StataError::shape(format!("mu {:?} vs accumulator {:?}", mu.dim(), self.v.dim())));
        }
        let batch_mass = z.sum_axis(Axis(0));
        let dev = weighted_sq_dev(features, z, mu);
        for c in 0..self.k() {
            let total = self.mass[c];
            if total > EMPTY_CLASS_MASS {
                let old = total - batch_mass[c];
                let mut row = self.t.row_mut(c);
                row.zip_mut_with(&dev.row(c), |t, &s| *t = (old * *t + s) / total);
            }
        }
        Ok(())
    }

    /// Folds a whole batch with a fixed `mu` for the deviations.
    pub fn fold(&mut self, features: ArrayView2<'_, f64>, z: ArrayView2<'_, f64>, mu: ArrayView2<'_, f64>) -> Result<()> {
        self.fold_means(features, z)?;
        self.fold_deviations(features, z, mu)
    }

    fn check(&self, features: ArrayView2<'_, f64>, z: ArrayView2<'_, f64>) -> Result<()> {
        if features.ncols() != self.d() || z.ncols() != self.k() || z.nrows() != features.nrows() {
            return Err(StataError::shape(format!(
                "fold: features {:?}, z {:?}, accumulator {}x{}",
                features.dim(),
                z.dim(),
                self.k(),
                self.d()
            )));
        }
        Ok(())
    }

    /// Interpolation weights from the accumulated counts.
    pub fn beta(&self, mode: BetaMode, alpha: f64) -> Array1<f64> {
        let counts = match mode {
            BetaMode::Hard => &self.count,
            BetaMode::Soft => &self.mass,
        };
        counts.mapv(|c| beta_from_count(c, alpha))
    }
}

/// State carried between stream steps. The anchor is shared, not owned.
#[derive(Debug, Clone)]
pub struct StreamState {
    pub stats: ClassAccumulator,
    pub bank: GaussianBank,
    anchor: Arc<AnchorDistribution>,
    anchors: Arc<AnchorSet>,
    batches_seen: usize,
}

impl StreamState {
    pub fn anchor(&self) -> &AnchorDistribution {
        &self.anchor
    }

    pub fn anchors(&self) -> &AnchorSet {
        &self.anchors
    }

    pub fn batches_seen(&self) -> usize {
        self.batches_seen
    }

    /// Bytes held by the per-stream state (accumulators and Gaussians).
    pub fn footprint_bytes(&self) -> usize {
        let f = std::mem::size_of::<f64>();
        (self.stats.v.len() + self.stats.t.len() + self.bank.mu.len() + self.bank.sigma.len()) * f
            + (self.stats.mass.len() + self.stats.count.len()) * f
    }
}

/// Anchor covariance from the first batch; counters zeroed, Gaussians at
/// the anchor.
pub fn stream_init(anchors: &AnchorSet, first_batch: &EmbeddingSet, cfg: &StreamConfig) -> Result<StreamState> {
    cfg.validate()?;
    let yhat = zero_shot_predict(first_batch, anchors, &cfg.solver.zero_shot())?;
    let anchor = init_anchor(first_batch, anchors, &yhat, &cfg.solver.anchor)?;
    Ok(StreamState {
        stats: ClassAccumulator::new(anchors.k(), anchors.d()),
        bank: GaussianBank::from_anchor(&anchor),
        anchor: Arc::new(anchor),
        anchors: Arc::new(anchors.clone()),
        batches_seen: 0,
    })
}

/// Solves one batch against the current Gaussians, then folds it into the
/// state. Returns the batch's assignments as they were before the fold.
pub fn stream_step(state: &mut StreamState, batch: &EmbeddingSet, cfg: &StreamConfig) -> Result<AssignmentMatrix> {
    cfg.validate()?;
    state.anchors.check_features(batch)?;
    let scfg = &cfg.solver;
    let yhat = zero_shot_predict(batch, &state.anchors, &scfg.zero_shot())?;
    let graph = build_affinity(batch, effective_mode(scfg.affinity, batch.n()))?;
    let design = LikelihoodDesign::new(batch.view());
    let log_yhat = clamped_log(yhat.view());

    let mut z = Array2::zeros(yhat.view().dim());
    let mut scratch = Array2::zeros(z.dim());
    let mut provisional: Option<(ClassAccumulator, GaussianBank)> = None;
    for _ in 0..cfg.batch_passes {
        let bank = provisional.as_ref().map_or(&state.bank, |p| &p.1);
        let mut base = design.log_likelihoods(bank);
        sweep_base(log_yhat.view(), &mut base);
        // Every pass restarts from the zero-shot prior, as a fresh batch would.
        z.assign(&yhat.view());
        for _ in 0..scfg.inner_z_iters {
            sweep_into(z.view(), base.view(), &graph, &mut scratch)?;
            std::mem::swap(&mut z, &mut scratch);
        }
        let mut stats = state.stats.clone();
        let mut bank = state.bank.clone();
        fold_and_blend(&mut stats, &mut bank, &state.anchor, batch.view(), z.view(), cfg)?;
        provisional = Some((stats, bank));
    }
    let (stats, bank) = provisional.expect("at least one pass");
    state.stats = stats;
    state.bank = bank;
    state.batches_seen += 1;
    Ok(AssignmentMatrix::from_array_unchecked(z))
}

/// [`stream_step`] on rows `indices` of `pool`; an empty index list is a
/// no-op that returns an empty matrix.
pub fn stream_step_indices(
    state: &mut StreamState,
    pool: &EmbeddingSet,
    indices: &[usize],
    cfg: &StreamConfig,
) -> Result<AssignmentMatrix> {
    if indices.is_empty() {
        return Ok(AssignmentMatrix::empty(state.anchors.k()));
    }
    let batch = pool
        .select(indices)
        .ok_or_else(|| StataError::shape(format!("batch index out of range for a pool of {}", pool.n())))?;
    stream_step(state, &batch, cfg)
}

fn fold_and_blend(
    stats: &mut ClassAccumulator,
    bank: &mut GaussianBank,
    anchor: &AnchorDistribution,
    features: ArrayView2<'_, f64>,
    z: ArrayView2<'_, f64>,
    cfg: &StreamConfig,
) -> Result<()> {
    stats.fold_means(features, z)?;
    let acfg = &cfg.solver.anchor;
    let beta = stats.beta(acfg.beta_mode, acfg.alpha);
    for c in 0..stats.k() {
        let v = mean_or_anchor(stats, anchor, c);
        blend_mean(beta[c], v, anchor.mu_prime().row(c), bank.mu.row_mut(c));
    }
    stats.fold_deviations(features, z, bank.mu.view())?;
    for c in 0..stats.k() {
        let t = if stats.mass[c] > EMPTY_CLASS_MASS { stats.t.row(c) } else { anchor.sigma_prime() };
        blend_covariance(
            beta[c],
            t,
            anchor.mu_prime().row(c),
            anchor.sigma_prime(),
            bank.mu.row(c),
            anchor.variance_floor(),
            bank.sigma.row_mut(c),
        );
    }
    if bank.mu.iter().chain(bank.sigma.iter()).any(|v| !v.is_finite()) {
        return Err(StataError::Numerical("non-finite parameter after stream update".into()));
    }
    Ok(())
}

fn mean_or_anchor<'a>(stats: &'a ClassAccumulator, anchor: &'a AnchorDistribution, c: usize) -> ArrayView1<'a, f64> {
    if stats.mass[c] > EMPTY_CLASS_MASS {
        stats.v.row(c)
    } else {
        anchor.mu_prime().index_axis_move(Axis(0), c)
    }
}
