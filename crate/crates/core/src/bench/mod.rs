//! End-to-end evaluation: runs generated tasks through the batch or stream
//! adapter and reports task-averaged accuracy against the zero-shot
//! baseline.

mod oracle;
mod synthetic;

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::embedding::{AnchorSet, EmbeddingSet, LabelVector};
use crate::error::{Result, StataError};
use crate::gmm::BetaMode;
use crate::online::{stream_init, stream_step, StreamConfig};
use crate::scenario::{generate_batch_tasks, generate_stream_tasks, BatchScenario, StreamScenario, Task};
use crate::solver::{solve_with_prior, SolverConfig};
use crate::zero_shot::{accuracy, zero_shot_predict};

pub use oracle::{mc_kl_oracle, McEstimate};
pub use synthetic::{bayes_classify, generate_synthetic, tune_anchor_noise, SyntheticData, SyntheticSpec, DEFAULT_COMMON_OFFSET};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub per_task_accuracy: Vec<f64>,
    pub mean_accuracy: f64,
    pub per_task_zero_shot_accuracy: Vec<f64>,
    pub zero_shot_mean_accuracy: f64,
    /// `mean_accuracy − zero_shot_mean_accuracy`.
    pub delta_vs_zeroshot: f64,
    pub wall_time_seconds: f64,
    pub config_snapshot: serde_json::Value,
}

impl RunReport {
    fn from_tasks(results: Vec<(f64, f64)>, wall: f64, config_snapshot: serde_json::Value) -> Self {
        let (acc, zs): (Vec<f64>, Vec<f64>) = results.into_iter().unzip();
        let mean_accuracy = mean(&acc);
        let zero_shot_mean_accuracy = mean(&zs);
        Self {
            per_task_accuracy: acc,
            mean_accuracy,
            per_task_zero_shot_accuracy: zs,
            zero_shot_mean_accuracy,
            delta_vs_zeroshot: delta(mean_accuracy, zero_shot_mean_accuracy),
            wall_time_seconds: wall,
            config_snapshot,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per task: `task,accuracy,zero_shot_accuracy`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,accuracy,zero_shot_accuracy\n");
        for (t, (a, z)) in self.per_task_accuracy.iter().zip(&self.per_task_zero_shot_accuracy).enumerate() {
            out.push_str(&format!("{t},{a},{z}\n"));
        }
        out
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|source| StataError::File { path: path.into(), source })
    }
}

pub fn delta(accuracy: f64, zero_shot: f64) -> f64 {
    accuracy - zero_shot
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Runs `f` over every task on up to `jobs` threads, keeping task order.
fn run_tasks<F>(tasks: &[Task], jobs: usize, f: F) -> Result<Vec<(f64, f64)>>
where
    F: Fn(&Task) -> Result<(f64, f64)> + Sync,
{
    let jobs = jobs.clamp(1, tasks.len().max(1));
    if jobs == 1 {
        return tasks.iter().map(&f).collect();
    }
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<(f64, f64)>>>> = Mutex::new((0..tasks.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..jobs {
            scope.spawn(|| loop {
                let t = next.fetch_add(1, Ordering::Relaxed);
                if t >= tasks.len() {
                    break;
                }
                let r = f(&tasks[t]);
                let failed = r.is_err();
                results.lock().expect("no panics while holding the lock")[t] = Some(r);
                if failed {
                    next.store(tasks.len(), Ordering::Relaxed);
                }
            });
        }
    });
    let mut out = Vec::with_capacity(tasks.len());
    for r in results.into_inner().expect("workers joined") {
        match r {
            Some(r) => out.push(r?),
            // Tasks are handed out in order, so every skipped task comes after
            // a failed one, whose error has already been returned.
            None => unreachable!("a task was skipped without a recorded failure"),
        }
    }
    Ok(out)
}

fn check_inputs(features: &EmbeddingSet, anchors: &AnchorSet, labels: &LabelVector, tasks: &[Task]) -> Result<()> {
    anchors.check_features(features)?;
    if labels.len() != features.n() || labels.k() != anchors.k() {
        return Err(StataError::shape(format!(
            "{} labels over {} classes for {} samples and {} anchors",
            labels.len(),
            labels.k(),
            features.n(),
            anchors.k()
        )));
    }
    tasks.iter().try_for_each(|t| t.check_bounds(features.n()))
}

/// Batch solve of one task; returns `(accuracy, zero-shot accuracy)`.
pub fn evaluate_batch_task(
    features: &EmbeddingSet,
    anchors: &AnchorSet,
    labels: &LabelVector,
    task: &Task,
    cfg: &SolverConfig,
) -> Result<(f64, f64)> {
    let subset = features.select(&task.indices).ok_or(StataError::EmptyScenario)?;
    let truth = labels.select(&task.indices);
    let yhat = zero_shot_predict(&subset, anchors, &cfg.zero_shot())?;
    let zs = accuracy(&yhat.argmax(), truth.as_slice());
    let result = solve_with_prior(&subset, anchors, &yhat, cfg)?;
    Ok((accuracy(&result.predictions(), truth.as_slice()), zs))
}

/// Streams one task batch by batch; every sample is scored by the
/// prediction emitted when its batch was processed.
pub fn evaluate_stream_task(
    features: &EmbeddingSet,
    anchors: &AnchorSet,
    labels: &LabelVector,
    task: &Task,
    cfg: &StreamConfig,
) -> Result<(f64, f64)> {
    let predictions = stream_predictions(features, anchors, task, cfg)?;
    let truth = labels.select(&task.indices);
    let all = features.select(&task.indices).ok_or(StataError::EmptyScenario)?;
    let zs = accuracy(&zero_shot_predict(&all, anchors, &cfg.solver.zero_shot())?.argmax(), truth.as_slice());
    Ok((accuracy(&predictions, truth.as_slice()), zs))
}

/// Per-sample predictions of a stream task, in task order.
pub fn stream_predictions(
    features: &EmbeddingSet,
    anchors: &AnchorSet,
    task: &Task,
    cfg: &StreamConfig,
) -> Result<Vec<usize>> {
    Ok(stream_assignments(features, anchors, task, cfg)?.into_iter().flat_map(|z| z.argmax()).collect())
}

/// Per-batch assignment matrices of a stream task.
pub fn stream_assignments(
    features: &EmbeddingSet,
    anchors: &AnchorSet,
    task: &Task,
    cfg: &StreamConfig,
) -> Result<Vec<crate::embedding::AssignmentMatrix>> {
    task.check_bounds(features.n())?;
    let batches: Vec<&[usize]> = task.batches().into_iter().filter(|b| !b.is_empty()).collect();
    let first = batches.first().ok_or(StataError::EmptyScenario)?;
    let first = features.select(first).ok_or(StataError::EmptyScenario)?;
    let mut state = stream_init(anchors, &first, cfg)?;
    let mut out = Vec::with_capacity(batches.len());
    for (b, idx) in batches.iter().enumerate() {
        // The first batch is already materialized.
        let z = if b == 0 {
            stream_step(&mut state, &first, cfg)?
        } else {
            stream_step(&mut state, &features.select(idx).ok_or(StataError::EmptyScenario)?, cfg)?
        };
        out.push(z);
    }
    Ok(out)
}

pub fn run_batch_benchmark(
    features: &EmbeddingSet,
    anchors: &AnchorSet,
    labels: &LabelVector,
    scenario: &BatchScenario,
    cfg: &SolverConfig,
    jobs: usize,
) -> Result<RunReport> {
    cfg.validate()?;
    let start = Instant::now();
    let tasks = generate_batch_tasks(labels, scenario)?;
    check_inputs(features, anchors, labels, &tasks)?;
    let results = run_tasks(&tasks, jobs, |t| evaluate_batch_task(features, anchors, labels, t, cfg))?;
    let snapshot = serde_json::json!({ "mode": "batch", "scenario": scenario, "solver": cfg });
    Ok(RunReport::from_tasks(results, start.elapsed().as_secs_f64(), snapshot))
}

pub fn run_stream_benchmark(
    features: &EmbeddingSet,
    anchors: &AnchorSet,
    labels: &LabelVector,
    scenario: &StreamScenario,
    cfg: &StreamConfig,
    jobs: usize,
) -> Result<RunReport> {
    cfg.validate()?;
    let start = Instant::now();
    let tasks = generate_stream_tasks(labels, scenario)?;
    check_inputs(features, anchors, labels, &tasks)?;
    let results = run_tasks(&tasks, jobs, |t| evaluate_stream_task(features, anchors, labels, t, cfg))?;
    let snapshot = serde_json::json!({ "mode": "stream", "scenario": scenario, "stream": cfg });
    Ok(RunReport::from_tasks(results, start.elapsed().as_secs_f64(), snapshot))
}

/// The same seeded batch tasks under hard and soft β.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BetaAblation {
    pub hard: RunReport,
    pub soft: RunReport,
}

pub fn run_beta_ablation(
    features: &EmbeddingSet,
    anchors: &AnchorSet,
    labels: &LabelVector,
    scenario: &BatchScenario,
    cfg: &SolverConfig,
    jobs: usize,
) -> Result<BetaAblation> {
    let with = |mode| {
        let mut c = *cfg;
        c.anchor.beta_mode = mode;
        run_batch_benchmark(features, anchors, labels, scenario, &c, jobs)
    };
    Ok(BetaAblation { hard: with(BetaMode::Hard)?, soft: with(BetaMode::Soft)? })
}
