//! The `stata` command line.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on data or validation
//! errors. Diagnostics go to standard error; machine output goes to
//! `--output` or standard output.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::bench::{
    generate_synthetic, run_batch_benchmark, run_beta_ablation, run_stream_benchmark, stream_assignments,
    tune_anchor_noise, SyntheticSpec, DEFAULT_COMMON_OFFSET,
};
use crate::embedding::{load_anchors, load_embeddings, parse_labels, AssignmentMatrix, Dtype, LabelVector};
use crate::error::{Result, StataError};
use crate::gmm::{AnchorConfig, BetaMode, DEFAULT_VARIANCE_FLOOR};
use crate::online::StreamConfig;
use crate::scenario::{
    generate_batch_tasks, generate_stream_tasks, BatchScenario, ScenarioName, StreamMode, StreamScenario, Task,
};
use crate::solver::{solve, AffinityMode, SolverConfig};
use crate::zero_shot::accuracy;

#[derive(Debug, Parser)]
#[command(name = "stata", version, about = "Test-time adaptation of vision-language embeddings")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Batch solve over all samples of a feature file.
    Adapt(AdaptArgs),
    /// Online adaptation over a stream task's batches.
    Stream(StreamArgs),
    /// Generate batch or stream task files.
    GenTasks(GenTasksArgs),
    /// Generate a synthetic dataset with a known generative model.
    Synth(SynthArgs),
    /// Score a prediction file against labels.
    Eval(EvalArgs),
    /// Run a scenario end to end and emit a report.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AffinityKind {
    Full,
    Knn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScenarioArg {
    VeryLow,
    Low,
    Medium,
    High,
    VeryHigh,
    All,
    Dirichlet,
    Separate,
}

impl ScenarioArg {
    fn batch_name(self) -> Option<ScenarioName> {
        Some(match self {
            ScenarioArg::VeryLow => ScenarioName::VeryLow,
            ScenarioArg::Low => ScenarioName::Low,
            ScenarioArg::Medium => ScenarioName::Medium,
            ScenarioArg::High => ScenarioName::High,
            ScenarioArg::VeryHigh => ScenarioName::VeryHigh,
            ScenarioArg::All => ScenarioName::All,
            ScenarioArg::Dirichlet | ScenarioArg::Separate => return None,
        })
    }

    fn stream_mode(self) -> Option<StreamMode> {
        match self {
            ScenarioArg::Dirichlet => Some(StreamMode::Dirichlet),
            ScenarioArg::Separate => Some(StreamMode::Separate),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct SolverArgs {
    /// Anchor strength α.
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    /// Zero-shot softmax temperature τ.
    #[arg(long, default_value_t = 100.0)]
    pub tau: f64,
    /// Neighbors per sample in the kNN graph [default: 3]. Not allowed with `--affinity full`.
    #[arg(long)]
    pub knn: Option<usize>,
    #[arg(long, value_enum, default_value_t = AffinityKind::Knn)]
    pub affinity: AffinityKind,
    /// z-update sweeps per outer iteration.
    #[arg(long, default_value_t = 3)]
    pub inner_iters: usize,
    /// Stop when the L∞ change of z over an outer iteration falls below this.
    #[arg(long, default_value_t = 1e-4)]
    pub z_tol: f64,
    #[arg(long, value_enum, default_value_t = BetaModeArg::Hard)]
    pub beta_mode: BetaModeArg,
    /// Lower bound on every covariance entry.
    #[arg(long, default_value_t = DEFAULT_VARIANCE_FLOOR)]
    pub variance_floor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BetaModeArg {
    Hard,
    Soft,
}

impl SolverArgs {
    fn config(&self, outer_iters: usize, record_trace: bool) -> Result<SolverConfig> {
        let affinity = match (self.affinity, self.knn) {
            (AffinityKind::Full, Some(_)) => {
                return Err(StataError::config("--knn cannot be combined with --affinity full"));
            }
            (AffinityKind::Full, None) => AffinityMode::Full,
            (AffinityKind::Knn, k) => AffinityMode::Knn(k.unwrap_or(3)),
        };
        let cfg = SolverConfig {
            outer_iters,
            inner_z_iters: self.inner_iters,
            z_tolerance: self.z_tol,
            affinity,
            anchor: AnchorConfig {
                alpha: self.alpha,
                beta_mode: match self.beta_mode {
                    BetaModeArg::Hard => BetaMode::Hard,
                    BetaModeArg::Soft => BetaMode::Soft,
                },
                variance_floor: self.variance_floor,
            },
            tau: self.tau,
            record_trace,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct OutputArgs {
    /// Output path; standard output when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = OutputFormat::Csv)]
    pub format: OutputFormat,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub anchors: PathBuf,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Maximum outer iterations.
    #[arg(long, default_value_t = 10)]
    pub outer_iters: usize,
    /// Record the objective after every block update (JSON output only).
    #[arg(long)]
    pub trace_objective: bool,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Args)]
pub struct StreamArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub anchors: PathBuf,
    /// Stream task file (from `gen-tasks`).
    #[arg(long)]
    pub task: PathBuf,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// z-solve passes per batch.
    #[arg(long, default_value_t = 1)]
    pub outer_iters: usize,
    #[command(flatten)]
    pub out: OutputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ScenarioArgs {
    #[arg(long, value_enum, default_value_t = ScenarioArg::Low)]
    pub scenario: ScenarioArg,
    /// Override the lower bound of the scenario's effective-class range.
    #[arg(long)]
    pub keff_min: Option<usize>,
    /// Override the upper bound of the scenario's effective-class range.
    #[arg(long)]
    pub keff_max: Option<usize>,
    /// Dirichlet concentration (dirichlet scenario only).
    #[arg(long, default_value_t = 0.1)]
    pub gamma: f64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1000)]
    pub n_tasks: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

enum ScenarioChoice {
    Batch(BatchScenario),
    Stream(StreamScenario),
}

impl ScenarioArgs {
    fn resolve(&self) -> Result<ScenarioChoice> {
        if let Some(name) = self.scenario.batch_name() {
            return Ok(ScenarioChoice::Batch(BatchScenario {
                name,
                keff_min: self.keff_min,
                keff_max: self.keff_max,
                batch_size: self.batch_size,
                n_tasks: self.n_tasks,
                seed: self.seed,
            }));
        }
        if self.keff_min.is_some() || self.keff_max.is_some() {
            return Err(StataError::config("--keff-min/--keff-max apply to batch scenarios only"));
        }
        Ok(ScenarioChoice::Stream(StreamScenario {
            gamma: self.gamma,
            batch_size: self.batch_size,
            n_tasks: self.n_tasks,
            seed: self.seed,
            mode: self.scenario.stream_mode().expect("stream scenario"),
        }))
    }
}

#[derive(Debug, Args)]
pub struct GenTasksArgs {
    #[arg(long)]
    pub labels: PathBuf,
    /// Class count K; defaults to the largest label plus one.
    #[arg(long)]
    pub classes: Option<usize>,
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    /// Directory for `task_00000.json`, `task_00001.json`, ...
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 32)]
    pub d: usize,
    #[arg(long, default_value_t = 100)]
    pub n_per_class: usize,
    /// Minimum pairwise center distance in within-class standard deviations.
    #[arg(long, default_value_t = 6.0)]
    pub separation: f64,
    /// Anchor perturbation standard deviation. Ignored with --tune-zero-shot.
    #[arg(long, default_value_t = 0.0)]
    pub anchor_noise: f64,
    /// Tune the anchor noise so zero-shot accuracy lands in [LO, HI].
    #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
    pub tune_zero_shot: Option<Vec<f64>>,
    /// Shared component of all centers, in units of √d·σ.
    #[arg(long, default_value_t = DEFAULT_COMMON_OFFSET)]
    pub common_offset: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = DtypeArg::F32)]
    pub dtype: DtypeArg,
    /// Directory for features.emb, anchors.emb, labels.txt and meta.json.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DtypeArg {
    F32,
    F64,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Prediction file written by `adapt` or `stream` (CSV or JSON).
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    /// Output path; standard output when omitted.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub features: PathBuf,
    #[arg(long)]
    pub anchors: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[command(flatten)]
    pub scenario: ScenarioArgs,
    #[command(flatten)]
    pub solver: SolverArgs,
    /// Outer iterations (batch scenarios) or z-solve passes per batch (streams).
    #[arg(long)]
    pub outer_iters: Option<usize>,
    /// Run both β modes on the same tasks (batch scenarios only).
    #[arg(long)]
    pub beta_ablation: bool,
    /// Worker threads for task-level parallelism.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[command(flatten)]
    pub out: OutputArgs,
}

/// Parses `args` (including the program name), runs the command and
/// returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                1
            } else {
                2
            }
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Adapt(a) => adapt(a),
        Command::Stream(a) => stream(a),
        Command::GenTasks(a) => gen_tasks(a),
        Command::Synth(a) => synth(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench(a),
    }
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|source| StataError::File { path: p.into(), source }),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct PredictionRow<'a> {
    index: usize,
    predicted_class: usize,
    max_prob: f64,
    z: &'a [f64],
}

#[derive(Serialize)]
struct PredictionDoc<'a> {
    predictions: Vec<PredictionRow<'a>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    objective_trace: Option<&'a [f64]>,
    #[serde(skip_serializing_if = "Option::is_none")]
    iterations_run: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    converged: Option<bool>,
}

struct SolveInfo<'a> {
    trace: Option<&'a [f64]>,
    iterations_run: usize,
    converged: bool,
}

/// Renders predictions; `indices[i]` is the dataset index of row `i`.
fn render_predictions(
    z: &ndarray::Array2<f64>,
    indices: &[usize],
    format: OutputFormat,
    info: Option<SolveInfo<'_>>,
) -> Result<String> {
    let rows = z.rows().into_iter().zip(indices).map(|(row, &index)| {
        let predicted_class = crate::embedding::argmax_row(row);
        (index, predicted_class, row[predicted_class], row)
    });
    match format {
        OutputFormat::Csv => {
            let mut out = String::from("index,predicted_class,max_prob\n");
            for (index, class, p, _) in rows {
                out.push_str(&format!("{index},{class},{p}\n"));
            }
            Ok(out)
        }
        OutputFormat::Json => {
            let predictions = rows
                .map(|(index, predicted_class, max_prob, row)| PredictionRow {
                    index,
                    predicted_class,
                    max_prob,
                    z: row.to_slice().expect("standard layout"),
                })
                .collect();
            let doc = PredictionDoc {
                predictions,
                objective_trace: info.as_ref().and_then(|i| i.trace),
                iterations_run: info.as_ref().map(|i| i.iterations_run),
                converged: info.as_ref().map(|i| i.converged),
            };
            Ok(serde_json::to_string(&doc)? + "\n")
        }
    }
}

fn adapt(a: AdaptArgs) -> Result<()> {
    let cfg = a.solver.config(a.outer_iters, a.trace_objective)?;
    let features = load_embeddings(&a.features)?;
    let anchors = load_anchors(&a.anchors)?;
    let result = solve(&features, &anchors, &cfg)?;
    eprintln!("adapt: {} samples, {} iterations, converged: {}", features.n(), result.iterations_run, result.converged);
    let indices: Vec<usize> = (0..features.n()).collect();
    let info = SolveInfo {
        trace: a.trace_objective.then_some(&result.objective_trace[..]),
        iterations_run: result.iterations_run,
        converged: result.converged,
    };
    let z = result.z.view().to_owned();
    write_output(a.out.output.as_deref(), &render_predictions(&z, &indices, a.out.format, Some(info))?)
}

fn stream(a: StreamArgs) -> Result<()> {
    let solver = a.solver.config(1, false)?;
    let cfg = StreamConfig { solver, batch_passes: a.outer_iters };
    cfg.validate()?;
    let features = load_embeddings(&a.features)?;
    let anchors = load_anchors(&a.anchors)?;
    let task = Task::load(&a.task)?;
    let batches = stream_assignments(&features, &anchors, &task, &cfg)?;
    let rows: Vec<ndarray::ArrayView2<'_, f64>> = batches.iter().map(AssignmentMatrix::view).collect();
    let z = if rows.is_empty() {
        ndarray::Array2::zeros((0, anchors.k()))
    } else {
        ndarray::concatenate(ndarray::Axis(0), &rows).map_err(|e| StataError::shape(e.to_string()))?
    };
    let indices: Vec<usize> = task.batches().concat();
    eprintln!("stream: {} samples in {} batches", indices.len(), batches.len());
    write_output(a.out.output.as_deref(), &render_predictions(&z, &indices, a.out.format, None)?)
}

fn read_labels(path: &Path, classes: Option<usize>) -> Result<LabelVector> {
    let text = std::fs::read_to_string(path).map_err(|source| StataError::File { path: path.into(), source })?;
    match classes {
        Some(k) => parse_labels(&text, k),
        None => {
            let loose = parse_labels(&text, usize::MAX)?;
            let k = loose.as_slice().iter().max().map_or(1, |m| m + 1);
            LabelVector::new(loose.as_slice().to_vec(), k)
        }
    }
}

fn gen_tasks(a: GenTasksArgs) -> Result<()> {
    let choice = a.scenario.resolve()?;
    let labels = read_labels(&a.labels, a.classes)?;
    let tasks = match &choice {
        ScenarioChoice::Batch(s) => generate_batch_tasks(&labels, s)?,
        ScenarioChoice::Stream(s) => generate_stream_tasks(&labels, s)?,
    };
    std::fs::create_dir_all(&a.output).map_err(|source| StataError::File { path: a.output.clone(), source })?;
    for (t, task) in tasks.iter().enumerate() {
        task.save(a.output.join(format!("task_{t:05}.json")))?;
    }
    eprintln!("gen-tasks: wrote {} tasks to {}", tasks.len(), a.output.display());
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut spec = SyntheticSpec {
        k: a.k,
        d: a.d,
        n_per_class: a.n_per_class,
        center_separation: a.separation,
        anchor_noise: a.anchor_noise,
        seed: a.seed,
        common_offset: a.common_offset,
    };
    spec.validate()?;
    if let Some(range) = &a.tune_zero_shot {
        let (lo, hi) = (range[0], range[1]);
        if !(0.0..=1.0).contains(&lo) || !(lo..=1.0).contains(&hi) {
            return Err(StataError::config(format!("zero-shot target [{lo}, {hi}] is not a sub-range of [0, 1]")));
        }
        spec.anchor_noise = tune_anchor_noise(&spec, lo, hi)?.0;
    }
    let data = generate_synthetic(&spec)?;
    std::fs::create_dir_all(&a.output).map_err(|source| StataError::File { path: a.output.clone(), source })?;
    let dtype = match a.dtype {
        DtypeArg::F32 => Dtype::F32,
        DtypeArg::F64 => Dtype::F64,
    };
    data.features.save(a.output.join("features.emb"), dtype)?;
    data.anchors.save(a.output.join("anchors.emb"), dtype)?;
    data.labels.save(a.output.join("labels.txt"))?;
    let meta = serde_json::json!({ "spec": spec, "bayes_accuracy": data.bayes_accuracy });
    let meta_path = a.output.join("meta.json");
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n")
        .map_err(|source| StataError::File { path: meta_path, source })?;
    eprintln!("synth: {} samples, bayes accuracy {}", data.labels.len(), data.bayes_accuracy);
    Ok(())
}

/// `(index, predicted_class)` pairs from a CSV or JSON prediction file.
fn read_predictions(path: &Path) -> Result<Vec<(usize, usize)>> {
    let text = std::fs::read_to_string(path).map_err(|source| StataError::File { path: path.into(), source })?;
    let bad = |line: usize, msg: &str| StataError::Format(format!("{}:{line}: {msg}", path.display()));
    if text.trim_start().starts_with('{') {
        let doc: serde_json::Value = serde_json::from_str(&text)?;
        let rows = doc["predictions"].as_array().ok_or_else(|| bad(1, "missing \"predictions\" array"))?;
        return rows
            .iter()
            .enumerate()
            .map(|(r, row)| {
                let field = |name: &str| row[name].as_u64().map(|v| v as usize).ok_or_else(|| bad(r + 1, name));
                Ok((field("index")?, field("predicted_class")?))
            })
            .collect();
    }
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim().starts_with("index,predicted_class") => {}
        _ => return Err(bad(1, "expected header index,predicted_class,max_prob")),
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let mut cols = line.split(',');
            let mut next = |name: &str| {
                cols.next().and_then(|c| c.trim().parse::<usize>().ok()).ok_or_else(|| bad(n + 1, name))
            };
            Ok((next("index")?, next("predicted_class")?))
        })
        .collect()
}

fn eval(a: EvalArgs) -> Result<()> {
    let preds = read_predictions(&a.predictions)?;
    let labels = read_labels(&a.labels, None)?;
    if let Some(&(i, _)) = preds.iter().find(|(i, _)| *i >= labels.len()) {
        return Err(StataError::shape(format!("prediction index {i} but only {} labels", labels.len())));
    }
    let predicted: Vec<usize> = preds.iter().map(|p| p.1).collect();
    let truth: Vec<usize> = preds.iter().map(|p| labels.as_slice()[p.0]).collect();
    let doc = serde_json::json!({ "n": preds.len(), "accuracy": accuracy(&predicted, &truth) });
    write_output(a.output.as_deref(), &(serde_json::to_string_pretty(&doc)? + "\n"))
}

fn bench(a: BenchArgs) -> Result<()> {
    let choice = a.scenario.resolve()?;
    let features = load_embeddings(&a.features)?;
    let anchors = load_anchors(&a.anchors)?;
    let labels = read_labels(&a.labels, Some(anchors.k()))?;
    let text = match choice {
        ScenarioChoice::Batch(sc) => {
            let cfg = a.solver.config(a.outer_iters.unwrap_or(10), false)?;
            if a.beta_ablation {
                let ab = run_beta_ablation(&features, &anchors, &labels, &sc, &cfg, a.jobs)?;
                eprintln!(
                    "bench: hard β {:.4}, soft β {:.4}, zero-shot {:.4}",
                    ab.hard.mean_accuracy, ab.soft.mean_accuracy, ab.hard.zero_shot_mean_accuracy
                );
                match a.out.format {
                    OutputFormat::Json => serde_json::to_string_pretty(&ab)? + "\n",
                    OutputFormat::Csv => {
                        let mut out = String::from("task,hard_accuracy,soft_accuracy,zero_shot_accuracy\n");
                        for t in 0..ab.hard.per_task_accuracy.len() {
                            out.push_str(&format!(
                                "{t},{},{},{}\n",
                                ab.hard.per_task_accuracy[t],
                                ab.soft.per_task_accuracy[t],
                                ab.hard.per_task_zero_shot_accuracy[t]
                            ));
                        }
                        out
                    }
                }
            } else {
                let report = run_batch_benchmark(&features, &anchors, &labels, &sc, &cfg, a.jobs)?;
                render_report(&report, a.out.format)?
            }
        }
        ScenarioChoice::Stream(sc) => {
            if a.beta_ablation {
                return Err(StataError::config("--beta-ablation applies to batch scenarios only"));
            }
            let solver = a.solver.config(1, false)?;
            let cfg = StreamConfig { solver, batch_passes: a.outer_iters.unwrap_or(1) };
            let report = run_stream_benchmark(&features, &anchors, &labels, &sc, &cfg, a.jobs)?;
            render_report(&report, a.out.format)?
        }
    };
    write_output(a.out.output.as_deref(), &text)
}

fn render_report(report: &crate::bench::RunReport, format: OutputFormat) -> Result<String> {
    eprintln!(
        "bench: mean accuracy {:.4}, zero-shot {:.4}, delta {:+.4}, {:.2}s",
        report.mean_accuracy, report.zero_shot_mean_accuracy, report.delta_vs_zeroshot, report.wall_time_seconds
    );
    Ok(match format {
        OutputFormat::Json => report.to_json()? + "\n",
        OutputFormat::Csv => report.to_csv(),
    })
}
