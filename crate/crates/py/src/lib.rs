//! Python bindings. Matrices cross the boundary as lists of rows.

use ndarray::{Array1, Array2};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use stata_core::bench::{generate_synthetic, SyntheticSpec, DEFAULT_COMMON_OFFSET};
use stata_core::embedding::{write_emb1_file, Emb1Payload};
use stata_core::gmm::{self, AnchorDistribution};
use stata_core::scenario::{self, BatchScenario, ScenarioName, StreamMode, StreamScenario};
use stata_core::{
    AffinityMode, AnchorConfig, AnchorSet, BetaMode, EmbeddingSet, GaussianBank, LabelVector, SolverConfig, StataError,
    StreamConfig, StreamState, ZeroShotConfig,
};

fn err(e: StataError) -> PyErr {
    match e {
        StataError::File { .. } | StataError::Io(_) => PyOSError::new_err(e.to_string()),
        StataError::Numerical(_) | StataError::InfiniteKl { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Array2::from_shape_vec((n, d), rows.concat()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn rows(a: &Array2<f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn features(rows: Vec<Vec<f64>>) -> PyResult<EmbeddingSet> {
    EmbeddingSet::new(matrix(rows)?).map_err(err)
}

fn anchors(rows: Vec<Vec<f64>>) -> PyResult<AnchorSet> {
    AnchorSet::new(matrix(rows)?).map_err(err)
}

fn beta_mode(name: &str) -> PyResult<BetaMode> {
    match name {
        "hard" => Ok(BetaMode::Hard),
        "soft" => Ok(BetaMode::Soft),
        _ => Err(PyValueError::new_err(format!("beta_mode must be \"hard\" or \"soft\", got {name:?}"))),
    }
}

#[allow(clippy::too_many_arguments)]
fn solver_config(
    alpha: f64,
    tau: f64,
    knn: Option<usize>,
    affinity: &str,
    outer_iters: usize,
    inner_iters: usize,
    z_tol: f64,
    beta: &str,
    record_trace: bool,
) -> PyResult<SolverConfig> {
    let affinity = match (affinity, knn) {
        ("knn", k) => AffinityMode::Knn(k.unwrap_or(3)),
        ("full", None) => AffinityMode::Full,
        ("full", Some(_)) => return Err(PyValueError::new_err("knn cannot be combined with full affinity")),
        (other, _) => return Err(PyValueError::new_err(format!("affinity must be \"knn\" or \"full\", got {other:?}"))),
    };
    let cfg = SolverConfig {
        outer_iters,
        inner_z_iters: inner_iters,
        z_tolerance: z_tol,
        affinity,
        anchor: AnchorConfig { alpha, beta_mode: beta_mode(beta)?, ..Default::default() },
        tau,
        record_trace,
    };
    cfg.validate().map_err(err)?;
    Ok(cfg)
}

/// Zero-shot class probabilities `softmax(τ f tᵀ)` of unit-normalized rows.
#[pyfunction]
#[pyo3(signature = (features, anchors, tau=100.0))]
fn zero_shot(py: Python<'_>, features: Vec<Vec<f64>>, anchors: Vec<Vec<f64>>, tau: f64) -> PyResult<Vec<Vec<f64>>> {
    let (f, t) = (self::features(features)?, self::anchors(anchors)?);
    let y = py.detach(|| stata_core::zero_shot_predict(&f, &t, &ZeroShotConfig { tau })).map_err(err)?;
    Ok(rows(&y.into_inner()))
}

/// Outcome of a batch solve.
#[pyclass(module = "stata", frozen, get_all)]
struct SolveResult {
    /// Soft assignments, one row per sample.
    z: Vec<Vec<f64>>,
    predictions: Vec<usize>,
    mu: Vec<Vec<f64>>,
    sigma: Vec<Vec<f64>>,
    objective_trace: Vec<f64>,
    iterations_run: usize,
    converged: bool,
}

#[pymethods]
impl SolveResult {
    fn __repr__(&self) -> String {
        format!(
            "SolveResult(n={}, iterations_run={}, converged={})",
            self.predictions.len(),
            self.iterations_run,
            self.converged
        )
    }
}

/// Transductive batch solve.
#[pyfunction]
#[pyo3(signature = (
    features, anchors, *, alpha=1.0, tau=100.0, knn=None, affinity="knn", outer_iters=10,
    inner_iters=3, z_tol=1e-4, beta_mode="hard", record_trace=false
))]
#[allow(clippy::too_many_arguments)]
fn solve(
    py: Python<'_>,
    features: Vec<Vec<f64>>,
    anchors: Vec<Vec<f64>>,
    alpha: f64,
    tau: f64,
    knn: Option<usize>,
    affinity: &str,
    outer_iters: usize,
    inner_iters: usize,
    z_tol: f64,
    beta_mode: &str,
    record_trace: bool,
) -> PyResult<SolveResult> {
    let cfg = solver_config(alpha, tau, knn, affinity, outer_iters, inner_iters, z_tol, beta_mode, record_trace)?;
    let (f, t) = (self::features(features)?, self::anchors(anchors)?);
    let r = py.detach(|| stata_core::solve(&f, &t, &cfg)).map_err(err)?;
    Ok(SolveResult {
        predictions: r.predictions(),
        z: rows(&r.z.into_inner()),
        mu: rows(&r.bank.mu),
        sigma: rows(&r.bank.sigma),
        objective_trace: r.objective_trace,
        iterations_run: r.iterations_run,
        converged: r.converged,
    })
}

/// Online adaptation over a sequence of batches.
#[pyclass(module = "stata")]
struct Stream {
    state: StreamState,
    cfg: StreamConfig,
}

#[pymethods]
impl Stream {
    /// The anchor covariance is estimated from `first_batch`; it is not
    /// folded into the statistics until passed to `step`.
    #[new]
    #[pyo3(signature = (
        anchors, first_batch, *, alpha=1.0, tau=100.0, knn=None, affinity="knn", inner_iters=3,
        beta_mode="hard", batch_passes=1
    ))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        anchors: Vec<Vec<f64>>,
        first_batch: Vec<Vec<f64>>,
        alpha: f64,
        tau: f64,
        knn: Option<usize>,
        affinity: &str,
        inner_iters: usize,
        beta_mode: &str,
        batch_passes: usize,
    ) -> PyResult<Self> {
        let solver = solver_config(alpha, tau, knn, affinity, 1, inner_iters, 0.0, beta_mode, false)?;
        let cfg = StreamConfig { solver, batch_passes };
        let state = stata_core::stream_init(&self::anchors(anchors)?, &features(first_batch)?, &cfg).map_err(err)?;
        Ok(Self { state, cfg })
    }

    /// Adapts to one batch and returns its soft assignments.
    fn step(&mut self, py: Python<'_>, batch: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let batch = features(batch)?;
        let (state, cfg) = (&mut self.state, &self.cfg);
        let z = py.detach(|| stata_core::stream_step(state, &batch, cfg)).map_err(err)?;
        Ok(rows(&z.into_inner()))
    }

    #[getter]
    fn batches_seen(&self) -> usize {
        self.state.batches_seen()
    }

    /// Bytes of per-stream state; constant in the number of samples seen.
    #[getter]
    fn footprint_bytes(&self) -> usize {
        self.state.footprint_bytes()
    }

    #[getter]
    fn mu(&self) -> Vec<Vec<f64>> {
        rows(&self.state.bank.mu)
    }

    #[getter]
    fn sigma(&self) -> Vec<Vec<f64>> {
        rows(&self.state.bank.sigma)
    }

    #[getter]
    fn soft_counts(&self) -> Vec<f64> {
        self.state.stats.mass.to_vec()
    }
}

/// `Σ_k KL(N(μ'_k, Σ') ‖ N(μ_k, Σ_k))` for diagonal Gaussians.
#[pyfunction]
fn kl_anchor_term(mu: Vec<Vec<f64>>, sigma: Vec<Vec<f64>>, mu_prime: Vec<Vec<f64>>, sigma_prime: Vec<f64>) -> PyResult<f64> {
    let bank = GaussianBank { mu: matrix(mu)?, sigma: matrix(sigma)? };
    let anchor = AnchorDistribution::new(matrix(mu_prime)?, Array1::from(sigma_prime), gmm::DEFAULT_VARIANCE_FLOOR).map_err(err)?;
    gmm::kl_anchor_term(&bank, &anchor).map_err(err)
}

/// Reads an EMB1 file as stored (rows are not normalized).
#[pyfunction]
fn load_emb1(path: &str) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(&stata_core::embedding::read_emb1_file(path).map_err(err)?.to_f64()))
}

#[pyfunction]
#[pyo3(signature = (path, data, dtype="f32"))]
fn save_emb1(path: &str, data: Vec<Vec<f64>>, dtype: &str) -> PyResult<()> {
    let m = matrix(data)?;
    let payload = match dtype {
        "f32" => Emb1Payload::F32(m.mapv(|v| v as f32)),
        "f64" => Emb1Payload::F64(m),
        _ => return Err(err(StataError::Dtype(dtype.to_owned()))),
    };
    write_emb1_file(path, &payload).map_err(err)
}

/// Index lists of seeded batch tasks.
#[pyfunction]
#[pyo3(signature = (labels, k, scenario="low", batch_size=64, n_tasks=1000, seed=0))]
fn batch_tasks(labels: Vec<usize>, k: usize, scenario: &str, batch_size: usize, n_tasks: usize, seed: u64) -> PyResult<Vec<Vec<usize>>> {
    let name = match scenario {
        "very-low" => ScenarioName::VeryLow,
        "low" => ScenarioName::Low,
        "medium" => ScenarioName::Medium,
        "high" => ScenarioName::High,
        "very-high" => ScenarioName::VeryHigh,
        "all" => ScenarioName::All,
        _ => return Err(PyValueError::new_err(format!("unknown batch scenario {scenario:?}"))),
    };
    let labels = LabelVector::new(labels, k).map_err(err)?;
    let tasks = scenario::generate_batch_tasks(&labels, &BatchScenario::new(name, batch_size, n_tasks, seed)).map_err(err)?;
    Ok(tasks.into_iter().map(|t| t.indices).collect())
}

/// Seeded stream tasks, each a list of batches of sample indices.
#[pyfunction]
#[pyo3(signature = (labels, k, mode="dirichlet", gamma=0.1, batch_size=64, n_tasks=1, seed=0))]
#[allow(clippy::too_many_arguments)]
fn stream_tasks(
    labels: Vec<usize>,
    k: usize,
    mode: &str,
    gamma: f64,
    batch_size: usize,
    n_tasks: usize,
    seed: u64,
) -> PyResult<Vec<Vec<Vec<usize>>>> {
    let mode = match mode {
        "dirichlet" => StreamMode::Dirichlet,
        "separate" => StreamMode::Separate,
        _ => return Err(PyValueError::new_err(format!("unknown stream mode {mode:?}"))),
    };
    let labels = LabelVector::new(labels, k).map_err(err)?;
    let sc = StreamScenario { gamma, batch_size, n_tasks, seed, mode };
    let tasks = scenario::generate_stream_tasks(&labels, &sc).map_err(err)?;
    Ok(tasks.iter().map(|t| t.batches().into_iter().map(<[usize]>::to_vec).collect()).collect())
}

/// `min(K, ⌊n / batch_size⌋)`.
#[pyfunction]
fn slot_count(k: usize, n: usize, batch_size: usize) -> usize {
    scenario::slot_count(k, n, batch_size)
}

/// Gaussian clusters with noisy anchors. Returns
/// `(features, anchors, labels, bayes_accuracy)`.
#[pyfunction]
#[pyo3(signature = (k=10, d=32, n_per_class=100, separation=6.0, anchor_noise=0.0, seed=0, common_offset=DEFAULT_COMMON_OFFSET))]
#[allow(clippy::type_complexity)]
fn synthetic(
    k: usize,
    d: usize,
    n_per_class: usize,
    separation: f64,
    anchor_noise: f64,
    seed: u64,
    common_offset: f64,
) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<usize>, f64)> {
    let spec = SyntheticSpec { anchor_noise, common_offset, ..SyntheticSpec::new(k, d, n_per_class, separation, seed) };
    let data = generate_synthetic(&spec).map_err(err)?;
    Ok((
        rows(&data.features.view().to_owned()),
        rows(&data.anchors.view().to_owned()),
        data.labels.as_slice().to_vec(),
        data.bayes_accuracy,
    ))
}

#[pymodule]
fn stata(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<SolveResult>()?;
    m.add_class::<Stream>()?;
    m.add_function(wrap_pyfunction!(zero_shot, m)?)?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(kl_anchor_term, m)?)?;
    m.add_function(wrap_pyfunction!(load_emb1, m)?)?;
    m.add_function(wrap_pyfunction!(save_emb1, m)?)?;
    m.add_function(wrap_pyfunction!(batch_tasks, m)?)?;
    m.add_function(wrap_pyfunction!(stream_tasks, m)?)?;
    m.add_function(wrap_pyfunction!(slot_count, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic, m)?)?;
    Ok(())
}
