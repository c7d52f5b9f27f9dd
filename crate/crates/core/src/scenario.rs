//! Evaluation task generators: batches with a bounded number of effective
//! classes, and class-correlated streams.
//!
//! Every task draws from its own generator, seeded from the scenario seed
//! and the task index, so tasks can be produced in any order or in
//! parallel and still come out identical.

use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::embedding::LabelVector;
use crate::error::{Result, StataError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ScenarioName {
    VeryLow,
    Low,
    Medium,
    High,
    VeryHigh,
    All,
}

impl ScenarioName {
    /// Nominal inclusive range of effective classes; `All` is `(K, K)`.
    pub fn keff_range(self, k: usize) -> (usize, usize) {
        match self {
            ScenarioName::VeryLow => (1, 4),
            ScenarioName::Low => (2, 10),
            ScenarioName::Medium => (5, 25),
            ScenarioName::High => (25, 50),
            ScenarioName::VeryHigh => (50, 100),
            ScenarioName::All => (k, k),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchScenario {
    pub name: ScenarioName,
    /// Overrides of the named range's bounds.
    pub keff_min: Option<usize>,
    pub keff_max: Option<usize>,
    pub batch_size: usize,
    pub n_tasks: usize,
    pub seed: u64,
}

impl BatchScenario {
    pub fn new(name: ScenarioName, batch_size: usize, n_tasks: usize, seed: u64) -> Self {
        Self { name, keff_min: None, keff_max: None, batch_size, n_tasks, seed }
    }

    /// Effective-class range for K classes. Bounds above K are clamped to K.
    pub fn keff_range(&self, k: usize) -> Result<(usize, usize)> {
        let (lo, hi) = self.name.keff_range(k);
        let lo = self.keff_min.unwrap_or(lo);
        let hi = self.keff_max.unwrap_or(hi);
        if lo == 0 || lo > hi {
            return Err(StataError::Scenario(format!("invalid effective-class range [{lo}, {hi}]")));
        }
        let hi = hi.min(k);
        Ok((lo.min(hi), hi))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum StreamMode {
    /// Classes spread over slots with Dirichlet proportions.
    Dirichlet,
    /// Classes one after another, in random order.
    Separate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamScenario {
    pub gamma: f64,
    pub batch_size: usize,
    pub n_tasks: usize,
    pub seed: u64,
    pub mode: StreamMode,
}

impl StreamScenario {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(StataError::Scenario("batch size must be at least 1".into()));
        }
        if self.mode == StreamMode::Dirichlet && !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(StataError::Scenario(format!("gamma must be positive and finite, got {}", self.gamma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScenarioSpec {
    Batch(BatchScenario),
    Stream(StreamScenario),
}

/// One sampled task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    /// Sample indices into the dataset, in processing order.
    pub indices: Vec<usize>,
    /// Start offset of every stream batch followed by `indices.len()`;
    /// empty for batch tasks.
    pub batch_boundaries: Vec<usize>,
    /// Sorted classes present among `indices`.
    pub effective_classes: Vec<usize>,
    pub scenario: ScenarioSpec,
    /// Seed of this task's own generator.
    pub seed: u64,
}

impl Task {
    /// Index ranges of the task's batches. A batch task is a single batch.
    pub fn batches(&self) -> Vec<&[usize]> {
        if self.batch_boundaries.is_empty() {
            return vec![&self.indices[..]];
        }
        self.batch_boundaries.windows(2).map(|w| &self.indices[w[0]..w[1]]).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()? + "\n").map_err(|source| StataError::File { path: path.into(), source })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| StataError::File { path: path.into(), source })?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Checks that every index addresses one of `n` samples.
    pub fn check_bounds(&self, n: usize) -> Result<()> {
        match self.indices.iter().find(|&&i| i >= n) {
            Some(i) => Err(StataError::Scenario(format!("task index {i} out of range for {n} samples"))),
            None => Ok(()),
        }
    }
}

/// Seed of task `t` under base seed `seed` (splitmix64 of the pair).
pub fn task_seed(seed: u64, t: usize) -> u64 {
    let mut x = seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

pub fn task_rng(seed: u64, t: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(task_seed(seed, t))
}

fn class_pools(labels: &LabelVector) -> Vec<Vec<usize>> {
    let mut pools = vec![Vec::new(); labels.k()];
    for (i, &y) in labels.as_slice().iter().enumerate() {
        pools[y].push(i);
    }
    pools
}

/// Draws one batch task: `K_eff` uniform on the scenario range, that many
/// distinct classes, one guaranteed sample per class, and the rest of the
/// batch uniformly without replacement from the chosen classes' samples.
/// If the chosen classes hold fewer samples than the batch size, the task is
/// all of them.
pub fn sample_batch_task<R: Rng + ?Sized>(labels: &LabelVector, scenario: &BatchScenario, rng: &mut R) -> Result<Task> {
    let pools = class_pools(labels);
    if let Some(c) = pools.iter().position(|p| p.is_empty()) {
        return Err(StataError::Scenario(format!("class {c} has no samples")));
    }
    let k = labels.k();
    let (lo, hi) = scenario.keff_range(k)?;
    let keff = rng.random_range(lo..=hi);
    if scenario.batch_size < keff {
        return Err(StataError::Scenario(format!(
            "batch size {} cannot hold {keff} effective classes",
            scenario.batch_size
        )));
    }
    let mut classes = index::sample(rng, k, keff).into_vec();
    classes.sort_unstable();

    let mut reserved = Vec::with_capacity(scenario.batch_size);
    let mut rest = Vec::new();
    for &c in &classes {
        let pool = &pools[c];
        let pick = rng.random_range(0..pool.len());
        reserved.push(pool[pick]);
        rest.extend(pool.iter().enumerate().filter(|&(p, _)| p != pick).map(|(_, &i)| i));
    }
    let fill = (scenario.batch_size - keff).min(rest.len());
    reserved.extend(index::sample(rng, rest.len(), fill).into_iter().map(|p| rest[p]));
    reserved.shuffle(rng);

    Ok(Task {
        indices: reserved,
        batch_boundaries: Vec::new(),
        effective_classes: classes,
        scenario: ScenarioSpec::Batch(*scenario),
        seed: 0,
    })
}

/// Number of Dirichlet slots for `n` samples: `min(K, ⌊n / batch_size⌋)`.
pub fn slot_count(k: usize, n: usize, batch_size: usize) -> usize {
    k.min(n / batch_size.max(1))
}

/// Proportions from `Dirichlet(γ·1_S)`, sampled in log space so that tiny γ
/// does not underflow every component to zero: for `G ~ Gamma(γ)`,
/// `ln G = ln X + ln(U)/γ` with `X ~ Gamma(1+γ)` and `U ~ Uniform(0, 1]`.
pub fn dirichlet<R: Rng + ?Sized>(gamma: f64, s: usize, rng: &mut R) -> Result<Vec<f64>> {
    let g = Gamma::new(1.0 + gamma, 1.0).map_err(|e| StataError::Scenario(format!("gamma {gamma}: {e}")))?;
    let logs: Vec<f64> = (0..s)
        .map(|_| {
            let x: f64 = g.sample(rng);
            let u: f64 = 1.0 - rng.random::<f64>();
            x.ln() + u.ln() / gamma
        })
        .collect();
    let max = logs.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let w: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / total).collect())
}

/// Distributes every class's samples over `s` slots with per-class
/// Dirichlet(γ) proportions: the shuffled class pool is cut at the rounded
/// cumulative proportions, then each slot is shuffled.
pub fn assign_slots<R: Rng + ?Sized>(labels: &LabelVector, gamma: f64, s: usize, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if s == 0 {
        return Err(StataError::Scenario("stream needs at least one slot".into()));
    }
    let mut slots = vec![Vec::new(); s];
    for mut pool in class_pools(labels) {
        if pool.is_empty() {
            continue;
        }
        let p = dirichlet(gamma, s, rng)?;
        pool.shuffle(rng);
        let n = pool.len() as f64;
        let mut start = 0;
        let mut acc = 0.0;
        for (slot, v) in slots.iter_mut().zip(&p) {
            acc += v;
            let end = ((acc * n).round() as usize).clamp(start, pool.len());
            slot.extend_from_slice(&pool[start..end]);
            start = end;
        }
        slots[s - 1].extend_from_slice(&pool[start..]);
    }
    for slot in &mut slots {
        slot.shuffle(rng);
    }
    Ok(slots)
}

/// Draws one stream task: a permutation of all samples, cut into batches
/// of `batch_size` with a shorter final batch if needed.
pub fn sample_stream_task<R: Rng + ?Sized>(labels: &LabelVector, scenario: &StreamScenario, rng: &mut R) -> Result<Task> {
    scenario.validate()?;
    let n = labels.len();
    if n / scenario.batch_size == 0 {
        return Err(StataError::Scenario(format!("{n} samples do not fill one batch of {}", scenario.batch_size)));
    }
    let order: Vec<usize> = match scenario.mode {
        StreamMode::Dirichlet => {
            let s = slot_count(labels.k(), n, scenario.batch_size);
            assign_slots(labels, scenario.gamma, s, rng)?.concat()
        }
        StreamMode::Separate => {
            let mut pools = class_pools(labels);
            pools.shuffle(rng);
            pools
                .into_iter()
                .flat_map(|mut p| {
                    p.shuffle(rng);
                    p
                })
                .collect()
        }
    };
    let mut batch_boundaries: Vec<usize> = (0..n).step_by(scenario.batch_size).collect();
    batch_boundaries.push(n);
    let mut effective_classes: Vec<usize> = labels.as_slice().to_vec();
    effective_classes.sort_unstable();
    effective_classes.dedup();
    Ok(Task {
        indices: order,
        batch_boundaries,
        effective_classes,
        scenario: ScenarioSpec::Stream(*scenario),
        seed: 0,
    })
}

/// All `n_tasks` batch tasks of a scenario.
pub fn generate_batch_tasks(labels: &LabelVector, scenario: &BatchScenario) -> Result<Vec<Task>> {
    if scenario.n_tasks == 0 {
        return Err(StataError::EmptyScenario);
    }
    (0..scenario.n_tasks)
        .map(|t| {
            let seed = task_seed(scenario.seed, t);
            let mut task = sample_batch_task(labels, scenario, &mut ChaCha8Rng::seed_from_u64(seed))?;
            task.seed = seed;
            Ok(task)
        })
        .collect()
}

/// All `n_tasks` stream tasks of a scenario.
pub fn generate_stream_tasks(labels: &LabelVector, scenario: &StreamScenario) -> Result<Vec<Task>> {
    if scenario.n_tasks == 0 {
        return Err(StataError::EmptyScenario);
    }
    (0..scenario.n_tasks)
        .map(|t| {
            let seed = task_seed(scenario.seed, t);
            let mut task = sample_stream_task(labels, scenario, &mut ChaCha8Rng::seed_from_u64(seed))?;
            task.seed = seed;
            Ok(task)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(k: usize, per: usize) -> LabelVector {
        LabelVector::new((0..k * per).map(|i| i % k).collect(), k).unwrap()
    }

    #[test]
    fn slot_formula() {
        assert_eq!(slot_count(10, 1000, 128), 7);
        assert_eq!(slot_count(3, 1000, 128), 3);
    }

    #[test]
    fn batch_task_keeps_every_chosen_class() {
        let y = labels(20, 10);
        let sc = BatchScenario::new(ScenarioName::VeryLow, 64, 50, 9);
        for task in generate_batch_tasks(&y, &sc).unwrap() {
            assert_eq!(task.indices.len(), 64.min(10 * task.effective_classes.len()));
            let mut present: Vec<usize> = task.indices.iter().map(|&i| y.as_slice()[i]).collect();
            present.sort_unstable();
            present.dedup();
            assert_eq!(present, task.effective_classes);
            let mut uniq = task.indices.clone();
            uniq.sort_unstable();
            uniq.dedup();
            assert_eq!(uniq.len(), task.indices.len());
        }
    }

    #[test]
    fn all_scenario_covering_batch_is_whole_dataset() {
        let y = labels(5, 4);
        let task = generate_batch_tasks(&y, &BatchScenario::new(ScenarioName::All, 100, 1, 0)).unwrap().remove(0);
        let mut idx = task.indices.clone();
        idx.sort_unstable();
        assert_eq!(idx, (0..20).collect::<Vec<_>>());
        assert_eq!(task.effective_classes, (0..5).collect::<Vec<_>>());
    }

    #[test]
    fn batch_errors() {
        let y = LabelVector::new(vec![0, 0, 2], 3).unwrap();
        let sc = BatchScenario::new(ScenarioName::Low, 8, 1, 0);
        assert!(matches!(generate_batch_tasks(&y, &sc), Err(StataError::Scenario(_))));
        let y = labels(20, 3);
        let sc = BatchScenario::new(ScenarioName::Medium, 4, 1, 0);
        assert!(matches!(generate_batch_tasks(&y, &sc), Err(StataError::Scenario(_))));
        let sc = BatchScenario::new(ScenarioName::Low, 64, 0, 0);
        assert!(matches!(generate_batch_tasks(&y, &sc), Err(StataError::EmptyScenario)));
    }

    #[test]
    fn separate_stream_is_contiguous_permutation() {
        let y = labels(6, 7);
        let sc = StreamScenario { gamma: 1.0, batch_size: 5, n_tasks: 1, seed: 3, mode: StreamMode::Separate };
        let task = generate_stream_tasks(&y, &sc).unwrap().remove(0);
        let seq: Vec<usize> = task.indices.iter().map(|&i| y.as_slice()[i]).collect();
        let mut runs = seq.clone();
        runs.dedup();
        assert_eq!(runs.len(), 6);
        assert_eq!(*task.batch_boundaries.last().unwrap(), 42);
        assert_eq!(task.batches().last().unwrap().len(), 2);
    }

    #[test]
    fn dirichlet_tiny_gamma_is_a_valid_simplex() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = dirichlet(1e-3, 7, &mut rng).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(p.iter().all(|v| v.is_finite() && *v >= 0.0));
    }

    #[test]
    fn tasks_are_reproducible() {
        let y = labels(10, 100);
        let sc = StreamScenario { gamma: 0.1, batch_size: 64, n_tasks: 3, seed: 11, mode: StreamMode::Dirichlet };
        assert_eq!(generate_stream_tasks(&y, &sc).unwrap(), generate_stream_tasks(&y, &sc).unwrap());
    }
}
