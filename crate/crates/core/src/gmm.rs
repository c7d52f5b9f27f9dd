//! Diagonal Gaussian class models and the statistical anchor that pulls
//! them toward the text embeddings.
//!
//! Each class k has a mean `mu[k]` and diagonal covariance `sigma[k]`. The
//! anchor is the fixed Gaussian `N(t_k, Σ')` with a covariance shared by
//! all classes. Parameter updates are convex combinations of the weighted
//! sample statistics and anchor-derived terms, weighted per class by β_k.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::embedding::{argmax_row, AnchorSet, AssignmentMatrix, EmbeddingSet};
use crate::error::{Result, StataError};
use crate::kernels::{weighted_sq_dev_with_sums, weighted_sum};

/// Lower bound applied to every covariance entry.
pub const DEFAULT_VARIANCE_FLOOR: f64 = 1e-12;

/// Class mass below this is treated as an empty class.
pub const EMPTY_CLASS_MASS: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BetaMode {
    /// Class cardinality from argmax counts.
    Hard,
    /// Class cardinality from summed soft assignments.
    Soft,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    pub alpha: f64,
    pub beta_mode: BetaMode,
    pub variance_floor: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self { alpha: 1.0, beta_mode: BetaMode::Hard, variance_floor: DEFAULT_VARIANCE_FLOOR }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(StataError::config(format!("alpha must be finite and >= 0, got {}", self.alpha)));
        }
        if !(self.variance_floor > 0.0 && self.variance_floor.is_finite()) {
            return Err(StataError::config(format!("variance floor must be positive, got {}", self.variance_floor)));
        }
        Ok(())
    }
}

/// Per-class means and diagonal covariances, both K×d.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBank {
    pub mu: Array2<f64>,
    pub sigma: Array2<f64>,
}

impl GaussianBank {
    /// Every class set to the anchor distribution.
    pub fn from_anchor(anchor: &AnchorDistribution) -> Self {
        let k = anchor.k();
        let sigma = anchor.sigma_prime.broadcast((k, anchor.d())).expect("length d").to_owned();
        Self { mu: anchor.mu_prime.clone(), sigma }
    }

    pub fn k(&self) -> usize {
        self.mu.nrows()
    }

    pub fn d(&self) -> usize {
        self.mu.ncols()
    }

    fn check(&self) -> Result<()> {
        if self.mu.dim() != self.sigma.dim() {
            return Err(StataError::shape(format!("mu {:?} vs sigma {:?}", self.mu.dim(), self.sigma.dim())));
        }
        if let Some(v) = self.sigma.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(StataError::Numerical(format!("covariance entry {v} is not positive and finite")));
        }
        Ok(())
    }
}

/// The fixed text-derived Gaussians `N(t_k, diag(Σ'))`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorDistribution {
    mu_prime: Array2<f64>,
    sigma_prime: Array1<f64>,
    variance_floor: f64,
}

impl AnchorDistribution {
    /// Builds an anchor from explicit parameters. `sigma_prime` is floored.
    pub fn new(mu_prime: Array2<f64>, sigma_prime: Array1<f64>, variance_floor: f64) -> Result<Self> {
        if sigma_prime.len() != mu_prime.ncols() {
            return Err(StataError::shape(format!(
                "sigma' has length {} but means have d={}",
                sigma_prime.len(),
                mu_prime.ncols()
            )));
        }
        if mu_prime.iter().chain(sigma_prime.iter()).any(|v| !v.is_finite()) {
            return Err(StataError::Numerical("non-finite anchor parameter".into()));
        }
        let sigma_prime = sigma_prime.mapv(|v| v.max(variance_floor));
        Ok(Self { mu_prime, sigma_prime, variance_floor })
    }

    pub fn mu_prime(&self) -> ArrayView2<'_, f64> {
        self.mu_prime.view()
    }

    pub fn sigma_prime(&self) -> ArrayView1<'_, f64> {
        self.sigma_prime.view()
    }

    pub fn variance_floor(&self) -> f64 {
        self.variance_floor
    }

    pub fn k(&self) -> usize {
        self.mu_prime.nrows()
    }

    pub fn d(&self) -> usize {
        self.mu_prime.ncols()
    }
}

/// Anchor means are the text embeddings; the shared covariance is the
/// zero-shot-weighted second moment of the features about them:
/// `Σ'_j = Σ_{i,k} ŷ_ik (f_ij − t_kj)² / Σ_{i,k} ŷ_ik`.
pub fn init_anchor(
    features: &EmbeddingSet,
    anchors: &AnchorSet,
    yhat: &AssignmentMatrix,
    cfg: &AnchorConfig,
) -> Result<AnchorDistribution> {
    cfg.validate()?;
    anchors.check_features(features)?;
    if yhat.n() != features.n() || yhat.k() != anchors.k() {
        return Err(StataError::shape(format!(
            "zero-shot matrix is {}x{}, expected {}x{}",
            yhat.n(),
            yhat.k(),
            features.n(),
            anchors.k()
        )));
    }
    let (mass, sums) = weighted_sums(features.view(), yhat.view());
    let dev = weighted_sq_dev_with_sums(features.view(), yhat.view(), anchors.view(), mass.view(), sums.view());
    let total = yhat.view().sum();
    let sigma_prime = dev.sum_axis(Axis(0)) / total;
    AnchorDistribution::new(anchors.view().to_owned(), sigma_prime, cfg.variance_floor)
}

/// Precomputed `[f², f]` rows so that all class log-likelihoods come out of
/// a single matrix product.
#[derive(Debug, Clone)]
pub struct LikelihoodDesign {
    design: Array2<f64>,
}

impl LikelihoodDesign {
    pub fn new(features: ArrayView2<'_, f64>) -> Self {
        let (n, d) = features.dim();
        let mut design = Array2::zeros((n, 2 * d));
        design.slice_mut(s![.., ..d]).assign(&features.mapv(|v| v * v));
        design.slice_mut(s![.., d..]).assign(&features);
        Self { design }
    }

    pub fn n(&self) -> usize {
        self.design.nrows()
    }

    /// `ll[i, k] = −½ Σ_j [ln σ_kj + (f_ij − μ_kj)² / σ_kj]`, without the
    /// `−(d/2) ln 2π` constant.
    pub fn log_likelihoods(&self, bank: &GaussianBank) -> Array2<f64> {
        let mut ll = Array2::zeros((self.design.nrows(), bank.k()));
        self.log_likelihoods_into(bank, &mut ll);
        ll
    }

    /// [`Self::log_likelihoods`] written into an existing N×K array.
    pub(crate) fn log_likelihoods_into(&self, bank: &GaussianBank, ll: &mut Array2<f64>) {
        let (k, d) = bank.mu.dim();
        debug_assert_eq!(self.design.ncols(), 2 * d);
        let mut weights = Array2::<f64>::zeros((k, 2 * d));
        let mut offset = Array1::<f64>::zeros(k);
        for c in 0..k {
            let (mut sq, mut lin) = weights.row_mut(c).split_at(Axis(0), d);
            let mut off = 0.0;
            for j in 0..d {
                let var = bank.sigma[[c, j]];
                let m = bank.mu[[c, j]];
                sq[j] = 1.0 / var;
                lin[j] = -2.0 * m / var;
                off += var.ln() + m * m / var;
            }
            offset[c] = off;
        }
        crate::linalg::matmul_into(self.design.view(), weights.t(), ll);
        Zip::from(ll.rows_mut()).for_each(|mut row| {
            Zip::from(&mut row).and(&offset).for_each(|v, &o| *v = -0.5 * (*v + o));
        });
    }
}

/// Direct evaluation of the class log-likelihoods (same convention as
/// [`LikelihoodDesign::log_likelihoods`]). O(N·K·d) without a matrix
/// product; the solver uses the design-matrix form instead.
pub fn log_likelihoods(features: &EmbeddingSet, bank: &GaussianBank) -> Result<Array2<f64>> {
    bank.check()?;
    if bank.d() != features.d() {
        return Err(StataError::shape(format!("bank d={} vs features d={}", bank.d(), features.d())));
    }
    let log_det: Array1<f64> = bank.sigma.map_axis(Axis(1), |s| s.iter().map(|v| v.ln()).sum());
    let mut ll = Array2::zeros((features.n(), bank.k()));
    for (f, mut out) in features.view().rows().into_iter().zip(ll.rows_mut()) {
        for (c, o) in out.iter_mut().enumerate() {
            let quad: f64 = f
                .iter()
                .zip(bank.mu.row(c))
                .zip(bank.sigma.row(c))
                .map(|((x, m), s)| (x - m) * (x - m) / s)
                .sum();
            *o = -0.5 * (log_det[c] + quad);
        }
    }
    Ok(ll)
}

/// `Σ_k KL(N'_k ‖ N_k)` for diagonal Gaussians.
pub fn kl_anchor_term(bank: &GaussianBank, anchor: &AnchorDistribution) -> Result<f64> {
    bank.check()?;
    if bank.mu.dim() != anchor.mu_prime.dim() {
        return Err(StataError::shape(format!("bank {:?} vs anchor {:?}", bank.mu.dim(), anchor.mu_prime.dim())));
    }
    let mut total = 0.0;
    for ((mu, sigma), mu_p) in bank.mu.rows().into_iter().zip(bank.sigma.rows()).zip(anchor.mu_prime.rows()) {
        let mut kl = 0.0;
        for j in 0..mu.len() {
            let diff = mu_p[j] - mu[j];
            // ratio − 1 − ln ratio ≥ 0, evaluated without cancelling logs.
            let ratio = anchor.sigma_prime[j] / sigma[j];
            kl += diff * diff / sigma[j] + (ratio - 1.0) - ratio.ln();
        }
        total += 0.5 * kl;
    }
    if !total.is_finite() {
        return Err(StataError::Numerical(format!("KL anchor term evaluated to {total}")));
    }
    Ok(total)
}

/// Per-class interpolation weights `β_k = c_k / (c_k + α)` where `c_k` is
/// the soft mass or the argmax count of class k. A class with `c_k = 0`
/// gets `β_k = 0` even when α = 0.
pub fn compute_beta(z: &AssignmentMatrix, cfg: &AnchorConfig) -> Array1<f64> {
    let counts = match cfg.beta_mode {
        BetaMode::Soft => z.view().sum_axis(Axis(0)),
        BetaMode::Hard => hard_counts(z.view()),
    };
    counts.mapv(|c| beta_from_count(c, cfg.alpha))
}

pub(crate) fn beta_from_count(count: f64, alpha: f64) -> f64 {
    if count > 0.0 {
        count / (count + alpha)
    } else {
        0.0
    }
}

pub(crate) fn hard_counts(z: ArrayView2<'_, f64>) -> Array1<f64> {
    let mut counts = Array1::zeros(z.ncols());
    for row in z.rows() {
        counts[argmax_row(row)] += 1.0;
    }
    counts
}

/// Weighted first-order statistics: per-class mass `Σ_i z_ik` and sums
/// `Σ_i z_ik f_i`.
pub(crate) fn weighted_sums(features: ArrayView2<'_, f64>, z: ArrayView2<'_, f64>) -> (Array1<f64>, Array2<f64>) {
    (z.sum_axis(Axis(0)), weighted_sum(features, z))
}

/// `μ = β v + (1−β) μ'`.
pub(crate) fn blend_mean(beta: f64, v: ArrayView1<'_, f64>, mu_prime: ArrayView1<'_, f64>, out: ArrayViewMut1<'_, f64>) {
    Zip::from(out).and(&v).and(&mu_prime).for_each(|m, &v, &mp| *m = beta * v + (1.0 - beta) * mp);
}

/// `Σ = β T + (1−β)(Σ' + (μ' − μ)²)`, floored.
pub(crate) fn blend_covariance(
    beta: f64,
    t: ArrayView1<'_, f64>,
    mu_prime: ArrayView1<'_, f64>,
    sigma_prime: ArrayView1<'_, f64>,
    mu: ArrayView1<'_, f64>,
    floor: f64,
    out: ArrayViewMut1<'_, f64>,
) {
    Zip::from(out).and(&t).and(&sigma_prime).and(&mu_prime).and(&mu).for_each(|s, &t, &sp, &mp, &m| {
        let gap = mp - m;
        *s = (beta * t + (1.0 - beta) * (sp + gap * gap)).max(floor);
    });
}

/// Closed-form regularized M-step. Writes the new parameters into `bank`
/// and returns it for chaining.
pub fn update_parameters<'a>(
    features: &EmbeddingSet,
    z: &AssignmentMatrix,
    anchor: &AnchorDistribution,
    beta: ArrayView1<'_, f64>,
    bank: &'a mut GaussianBank,
) -> Result<&'a mut GaussianBank> {
    let (n, d) = (features.n(), features.d());
    let k = anchor.k();
    if z.n() != n || z.k() != k || anchor.d() != d || beta.len() != k || bank.mu.dim() != (k, d) {
        return Err(StataError::shape(format!(
            "update: features {n}x{d}, z {}x{}, anchor {}x{}, beta {}, bank {:?}",
            z.n(),
            z.k(),
            anchor.k(),
            anchor.d(),
            beta.len(),
            bank.mu.dim()
        )));
    }
    if let Some(b) = beta.iter().find(|b| !(0.0..=1.0).contains(*b)) {
        return Err(StataError::config(format!("beta entry {b} outside [0, 1]")));
    }

    let (mass, sums) = weighted_sums(features.view(), z.view());
    // New means first; T needs them.
    let mut new_mu = Array2::zeros((k, d));
    for c in 0..k {
        let v = if mass[c] > EMPTY_CLASS_MASS {
            sums.row(c).mapv(|s| s / mass[c])
        } else {
            anchor.mu_prime.row(c).to_owned()
        };
        blend_mean(beta[c], v.view(), anchor.mu_prime.row(c), new_mu.row_mut(c));
    }
    let dev = weighted_sq_dev_with_sums(features.view(), z.view(), new_mu.view(), mass.view(), sums.view());
    for c in 0..k {
        let t = if mass[c] > EMPTY_CLASS_MASS { dev.row(c).mapv(|v| v / mass[c]) } else { anchor.sigma_prime.clone() };
        blend_covariance(
            beta[c],
            t.view(),
            anchor.mu_prime.row(c),
            anchor.sigma_prime.view(),
            new_mu.row(c),
            anchor.variance_floor,
            bank.sigma.row_mut(c),
        );
    }
    bank.mu = new_mu;
    if bank.mu.iter().chain(bank.sigma.iter()).any(|v| !v.is_finite()) {
        return Err(StataError::Numerical("non-finite parameter after update".into()));
    }
    Ok(bank)
}
