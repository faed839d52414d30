//! Desk-scale benchmark: toy classifier zoos, fine-tuning comparisons and
//! weight-space baselines.

mod export;
mod mlp;
mod ops;
mod task;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{read_checkpoint_file, write_checkpoint_file, CheckpointError, Dtype, TensorMap};
use crate::generation::{generate, rank_candidates, Bandwidth, GenerateConfig, GenerationError, ProbeEvaluator};
use crate::model::AutoencoderWeights;
use crate::training::{derive_seed, TrainingError};

pub use export::{export_latents, LabeledEmbedding};
pub use mlp::{finetune, fit, FinetuneConfig, Metrics, Mlp, Trajectory};
pub use ops::{dare_merge, magnitude_prune};
pub use task::{default_tasks, Dataset, Split, SplitSizes, ToyTask};

pub const TASK_KEY: &str = "task";

#[derive(Debug, Error)]
pub enum ZooError {
    #[error("degenerate task {0}")]
    TaskDegenerate(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no input models")]
    EmptyInput,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("{0} has no usable task metadata")]
    MissingTask(String),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Generation(#[from] GenerationError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}: {1}")]
    Io(String, #[source] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZooSpec {
    pub count: usize,
    pub widths: Vec<usize>,
    /// Member `i` trains on `tasks[i % tasks.len()]`.
    pub tasks: Vec<ToyTask>,
    pub train: FinetuneConfig,
    pub seed: u64,
}

impl ZooSpec {
    /// `count` 8-16-4 perceptrons spread over `tasks` blob tasks.
    pub fn desk(count: usize, tasks: usize, seed: u64) -> Result<Self, ZooError> {
        Ok(Self {
            count,
            widths: vec![8, 16, 4],
            tasks: default_tasks(tasks, seed)?,
            train: FinetuneConfig { epochs: 30, ..FinetuneConfig::default() },
            seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZooMember {
    pub id: String,
    pub task_index: usize,
    pub weights: TensorMap,
    pub test: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Zoo {
    pub tasks: Vec<ToyTask>,
    pub members: Vec<ZooMember>,
}

impl Zoo {
    pub fn members_of(&self, task_index: usize) -> Vec<&ZooMember> {
        self.members.iter().filter(|m| m.task_index == task_index).collect()
    }

    /// Writes `{id}.safetensors` per member into `dir`.
    pub fn save(&self, dir: &Path) -> Result<Vec<PathBuf>, ZooError> {
        std::fs::create_dir_all(dir).map_err(|e| ZooError::Io(dir.display().to_string(), e))?;
        self.members
            .iter()
            .map(|m| {
                let path = dir.join(format!("{}.safetensors", m.id));
                write_checkpoint_file(&path, &m.weights)?;
                Ok(path)
            })
            .collect()
    }

    /// Rebuild a zoo from checkpoints carrying task metadata. Tasks are
    /// ordered by first appearance in sorted path order.
    pub fn load(paths: &[PathBuf]) -> Result<Self, ZooError> {
        if paths.is_empty() {
            return Err(ZooError::EmptyInput);
        }
        let mut paths = paths.to_vec();
        paths.sort();
        let mut tasks: Vec<ToyTask> = Vec::new();
        let mut members = Vec::new();
        for path in &paths {
            let weights = read_checkpoint_file(path)?;
            let task: ToyTask = weights
                .metadata()
                .get(TASK_KEY)
                .and_then(|t| serde_json::from_str(t).ok())
                .ok_or_else(|| ZooError::MissingTask(path.display().to_string()))?;
            task.validate()?;
            let task_index = match tasks.iter().position(|t| *t == task) {
                Some(i) => i,
                None => {
                    tasks.push(task);
                    tasks.len() - 1
                }
            };
            let test = Mlp::from_map(&weights, None)?.evaluate(&tasks[task_index].data(Split::Test));
            members.push(ZooMember { id: weights.source_id().to_string(), task_index, weights, test });
        }
        Ok(Self { tasks, members })
    }
}

/// Train every member from its own seeded init. Members are F32 checkpoints
/// tagged with their task.
pub fn build_zoo(spec: &ZooSpec) -> Result<Zoo, ZooError> {
    if spec.tasks.is_empty() || spec.count == 0 {
        return Err(ZooError::InvalidArgument("zoo needs at least one task and one member".into()));
    }
    for t in &spec.tasks {
        t.validate()?;
        if spec.widths.first() != Some(&t.input_dim) || spec.widths.last() != Some(&t.num_classes) {
            return Err(ZooError::ShapeMismatch(format!("widths {:?} do not fit task {}", spec.widths, t.name)));
        }
    }
    let members = (0..spec.count)
        .into_par_iter()
        .map(|i| {
            let task_index = i % spec.tasks.len();
            let task = &spec.tasks[task_index];
            let init = Mlp::init(&spec.widths, derive_seed(spec.seed, &[i as u64, 0]))?;
            let (_, best) = fit(init, task, &spec.train, derive_seed(spec.seed, &[i as u64, 1]))?;
            let id = format!("zoo{i:03}");
            let mut weights = best.to_map(id.clone(), Dtype::F32);
            weights.metadata_mut().insert(TASK_KEY.into(), serde_json::to_string(task)?);
            let test = Mlp::from_map(&weights, None)?.evaluate(&task.data(Split::Test));
            Ok(ZooMember { id, task_index, weights, test })
        })
        .collect::<Result<Vec<_>, ZooError>>()?;
    Ok(Zoo { tasks: spec.tasks.clone(), members })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ProbeCriterion {
    /// Zero-shot cross-entropy on the probe split.
    #[default]
    Loss,
    /// One minus zero-shot accuracy.
    Accuracy,
}

/// Zero-shot scoring of candidate classifiers on a task's probe split.
pub struct TaskProbe {
    data: Dataset,
    criterion: ProbeCriterion,
}

impl TaskProbe {
    pub fn new(task: &ToyTask, criterion: ProbeCriterion) -> Self {
        Self { data: task.data(Split::Probe), criterion }
    }
}

impl ProbeEvaluator for TaskProbe {
    fn probe_len(&self) -> usize {
        self.data.y.len()
    }

    fn score(&self, weights: &TensorMap) -> Result<f64, GenerationError> {
        let mlp = Mlp::from_map(weights, None).map_err(|e| GenerationError::Probe(e.to_string()))?;
        let m = mlp.evaluate(&self.data);
        Ok(match self.criterion {
            ProbeCriterion::Loss => m.loss,
            ProbeCriterion::Accuracy => 1.0 - m.accuracy,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Condition {
    #[serde(rename = "scratch")]
    Scratch,
    #[serde(rename = "prompt")]
    Prompt,
    #[serde(rename = "generated-top-m")]
    Generated,
    #[serde(rename = "dare")]
    Dare,
    #[serde(rename = "pruned")]
    Pruned,
}

impl Condition {
    pub const ALL: [Condition; 5] =
        [Condition::Scratch, Condition::Prompt, Condition::Generated, Condition::Dare, Condition::Pruned];

    pub fn label(self) -> &'static str {
        match self {
            Condition::Scratch => "scratch",
            Condition::Prompt => "prompt",
            Condition::Generated => "generated-top-m",
            Condition::Dare => "dare",
            Condition::Pruned => "pruned",
        }
    }
}

impl std::str::FromStr for Condition {
    type Err = ZooError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Condition::ALL
            .into_iter()
            .find(|c| c.label() == s || (s == "generated" && *c == Condition::Generated))
            .ok_or_else(|| ZooError::InvalidArgument(format!("unknown condition {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ComparisonConfig {
    pub conditions: Vec<Condition>,
    pub finetune: FinetuneConfig,
    pub seeds: Vec<u64>,
    pub candidates: usize,
    pub keep: usize,
    pub bandwidth: Bandwidth,
    pub probe: ProbeCriterion,
    pub drop_p: f64,
    pub sparsity: f64,
    /// Validation accuracy used for the epochs-to-threshold curves.
    pub threshold: f64,
}

impl Default for ComparisonConfig {
    fn default() -> Self {
        Self {
            conditions: Condition::ALL.to_vec(),
            finetune: FinetuneConfig::default(),
            seeds: vec![0, 1, 2],
            candidates: 10,
            keep: 3,
            bandwidth: Bandwidth::Scott,
            probe: ProbeCriterion::Loss,
            drop_p: 0.3,
            sparsity: 0.5,
            threshold: 0.7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    /// Test accuracy; the mean over kept candidates for generated models.
    pub accuracy: f64,
    pub loss: f64,
    /// One entry per fine-tuned model behind this seed's value.
    pub model_accuracies: Vec<f64>,
    /// Mean validation accuracy per epoch, epoch 0 first.
    pub val_curve: Vec<f64>,
    pub epochs_to_threshold: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub condition: Condition,
    pub per_seed: Vec<SeedOutcome>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: String,
    pub conditions: Vec<ConditionResult>,
}

impl TaskReport {
    pub fn condition(&self, c: Condition) -> Option<&ConditionResult> {
        self.conditions.iter().find(|r| r.condition == c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub seeds: Vec<u64>,
    pub finetune: FinetuneConfig,
    pub candidates: usize,
    pub keep: usize,
    pub threshold: f64,
    pub tasks: Vec<TaskReport>,
}

impl EvalReport {
    /// Number of tasks where `a`'s mean accuracy is at least `b`'s.
    pub fn wins(&self, a: Condition, b: Condition) -> usize {
        self.tasks
            .iter()
            .filter(|t| match (t.condition(a), t.condition(b)) {
                (Some(x), Some(y)) => x.mean_accuracy >= y.mean_accuracy,
                _ => false,
            })
            .count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Mean and std of test accuracy per task and condition.
    pub fn render_table(&self) -> String {
        let conditions: Vec<Condition> =
            self.tasks.first().map(|t| t.conditions.iter().map(|c| c.condition).collect()).unwrap_or_default();
        let mut out = format!("{:<12}", "task");
        for c in &conditions {
            let _ = write!(out, " {:>17}", c.label());
        }
        out.push('\n');
        for t in &self.tasks {
            let _ = write!(out, "{:<12}", t.task);
            for c in &conditions {
                match t.condition(*c) {
                    Some(r) => {
                        let _ = write!(out, " {:>17}", format!("{:.4} ± {:.4}", r.mean_accuracy, r.std_accuracy));
                    }
                    None => {
                        let _ = write!(out, " {:>17}", "-");
                    }
                }
            }
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "fine-tune budget: {} epochs; seeds {:?}; candidates {} keep {}",
            self.finetune.epochs, self.seeds, self.candidates, self.keep
        );
        out
    }

    pub fn write(&self, stem: &Path) -> Result<(), ZooError> {
        let json = stem.with_extension("json");
        std::fs::write(&json, self.to_json()).map_err(|e| ZooError::Io(json.display().to_string(), e))?;
        let txt = stem.with_extension("txt");
        std::fs::write(&txt, self.render_table()).map_err(|e| ZooError::Io(txt.display().to_string(), e))
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn outcome(seed: u64, runs: &[Trajectory], threshold: f64) -> SeedOutcome {
    let model_accuracies: Vec<f64> = runs.iter().map(|t| t.test.accuracy).collect();
    let n = runs.len() as f64;
    let epochs = runs[0].val.len();
    let val_curve: Vec<f64> = (0..epochs).map(|e| runs.iter().map(|t| t.val[e].accuracy).sum::<f64>() / n).collect();
    SeedOutcome {
        seed,
        accuracy: model_accuracies.iter().sum::<f64>() / n,
        loss: runs.iter().map(|t| t.test.loss).sum::<f64>() / n,
        epochs_to_threshold: val_curve.iter().position(|&a| a >= threshold),
        model_accuracies,
        val_curve,
    }
}

fn run_cell(
    zoo: &Zoo,
    ae: &AutoencoderWeights,
    cfg: &ComparisonConfig,
    task_index: usize,
    seed_index: usize,
) -> Result<Vec<(Condition, SeedOutcome)>, ZooError> {
    let task = &zoo.tasks[task_index];
    let seed = cfg.seeds[seed_index];
    let members = zoo.members_of(task_index);
    if members.is_empty() {
        return Err(ZooError::InvalidArgument(format!("task {} has no zoo members", task.name)));
    }
    let prompt_index = seed_index % members.len();
    let prompt = &members[prompt_index].weights;
    let widths = Mlp::from_map(prompt, None)?.widths().to_vec();
    let tune_seed = derive_seed(seed, &[task_index as u64, 0]);
    let tune = |init: &TensorMap| finetune(init, task, &cfg.finetune, tune_seed);

    cfg.conditions
        .iter()
        .map(|&c| {
            let runs = match c {
                Condition::Scratch => {
                    let init = Mlp::init(&widths, derive_seed(seed, &[task_index as u64, 1]))?;
                    vec![fit(init, task, &cfg.finetune, tune_seed)?.0]
                }
                Condition::Prompt => vec![tune(prompt)?],
                Condition::Generated => {
                    let gen = GenerateConfig {
                        count: cfg.candidates,
                        base_seed: derive_seed(seed, &[task_index as u64, 2]),
                        bandwidth: cfg.bandwidth,
                    };
                    let candidates = generate(prompt, ae, &gen)?;
                    let kept = rank_candidates(candidates, &TaskProbe::new(task, cfg.probe), cfg.keep)?;
                    kept.iter().map(|k| tune(&k.weights)).collect::<Result<Vec<_>, _>>()?
                }
                Condition::Dare => {
                    let donor = &members[(prompt_index + 1) % members.len()].weights;
                    let merged = dare_merge(prompt, std::slice::from_ref(donor), cfg.drop_p, derive_seed(seed, &[task_index as u64, 3]))?;
                    vec![tune(&merged)?]
                }
                Condition::Pruned => vec![tune(&magnitude_prune(prompt, cfg.sparsity)?)?],
            };
            Ok((c, outcome(seed, &runs, cfg.threshold)))
        })
        .collect()
}

/// Every condition on every (task, seed) cell under the same fine-tune
/// budget and shuffling seed. The prompt for seed `i` is the `i`-th zoo
/// member of the task (cyclically); DARE merges it with the next member.
pub fn run_comparison(zoo: &Zoo, ae: &AutoencoderWeights, cfg: &ComparisonConfig) -> Result<EvalReport, ZooError> {
    if cfg.seeds.is_empty() || cfg.conditions.is_empty() {
        return Err(ZooError::InvalidArgument("comparison needs seeds and conditions".into()));
    }
    let cells: Vec<(usize, usize)> =
        (0..zoo.tasks.len()).flat_map(|t| (0..cfg.seeds.len()).map(move |s| (t, s))).collect();
    let results =
        cells.par_iter().map(|&(t, s)| run_cell(zoo, ae, cfg, t, s)).collect::<Result<Vec<_>, ZooError>>()?;

    let mut tasks = Vec::new();
    for (t, task) in zoo.tasks.iter().enumerate() {
        let task_cells = &results[t * cfg.seeds.len()..(t + 1) * cfg.seeds.len()];
        let conditions = cfg
            .conditions
            .iter()
            .enumerate()
            .map(|(ci, &condition)| {
                let per_seed: Vec<SeedOutcome> = task_cells.iter().map(|cell| cell[ci].1.clone()).collect();
                let accs: Vec<f64> = per_seed.iter().map(|o| o.accuracy).collect();
                let (mean_accuracy, std_accuracy) = mean_std(&accs);
                ConditionResult { condition, per_seed, mean_accuracy, std_accuracy }
            })
            .collect();
        tasks.push(TaskReport { task: task.name.clone(), conditions });
    }
    Ok(EvalReport {
        seeds: cfg.seeds.clone(),
        finetune: cfg.finetune,
        candidates: cfg.candidates,
        keep: cfg.keep,
        threshold: cfg.threshold,
        tasks,
    })
}
