//! Batch front-end for the weight-space toolkit.
//!
//! Exit codes: 0 on success, 1 when a command fails on its inputs, 2 for
//! usage errors (bad flags, missing paths, malformed config).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use wf_core::checkpoint::{read_checkpoint_file, write_checkpoint_file, CollectionManifest};
use wf_core::generation::{generate, rank_candidates, save_candidate, Bandwidth, GenerateConfig};
use wf_core::model::{AutoencoderConfig, AutoencoderWeights};
use wf_core::pipeline::{collect_dir, read_token_files, write_token_files};
use wf_core::training::{train, TrainingConfig};
use wf_core::zoo_bench::{
    build_zoo, dare_merge, export_latents, magnitude_prune, run_comparison, ComparisonConfig, LabeledEmbedding,
    ProbeCriterion, TaskProbe, ToyTask, Zoo, ZooSpec, TASK_KEY,
};

pub const SEED_ENV: &str = "WF_SEED";

#[derive(Parser, Debug)]
#[command(name = "wf", version, about = "Weight-space learning toolkit")]
struct Cli {
    /// JSON run configuration; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every random stream (falls back to config, then WF_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Scan a directory of checkpoints into a manifest.
    Collect {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tokenize every manifest entry into token files.
    Tokenize {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "d-t")]
        d_t: Option<usize>,
    },
    /// Train the autoencoder on a directory of token files.
    Train(TrainArgs),
    /// Generate candidates from a prompt checkpoint and keep the best.
    Generate(GenerateArgs),
    /// Run the fine-tuning comparison over a toy zoo.
    Evaluate(EvaluateArgs),
    /// Write sampled token latents of every manifest entry as CSV.
    ExportLatents {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Drop-and-rescale merge: the first input is the base, the rest donors.
    Merge {
        #[arg(long = "in", num_args = 2.., required = true)]
        input: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "drop-p", default_value_t = 0.3)]
        drop_p: f64,
    },
    /// Global magnitude pruning.
    Prune {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        sparsity: f64,
    },
    /// Build a toy classifier zoo on Gaussian-blob tasks.
    Zoo {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        tasks: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Directory of token files.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to continue from.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long = "d-t")]
    d_t: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long = "sigma-aug")]
    sigma_aug: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long = "batch-size")]
    batch_size: Option<usize>,
    #[arg(long = "max-lr")]
    max_lr: Option<f64>,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    prompt: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    keep: Option<usize>,
    #[arg(long)]
    bandwidth: Option<String>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Zoo directory.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Report path stem; `.json` and `.txt` are written.
    #[arg(long)]
    out: PathBuf,
    /// Fine-tune budget in epochs.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    keep: Option<usize>,
    #[arg(long)]
    bandwidth: Option<String>,
    #[arg(long = "drop-p")]
    drop_p: Option<f64>,
    #[arg(long)]
    sparsity: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationSettings {
    pub count: usize,
    pub keep: usize,
    pub bandwidth: Bandwidth,
    pub probe: ProbeCriterion,
}

impl Default for GenerationSettings {
    fn default() -> Self {
        Self { count: 10, keep: 3, bandwidth: Bandwidth::Scott, probe: ProbeCriterion::Loss }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZooSettings {
    pub count: usize,
    pub tasks: usize,
    pub epochs: usize,
}

impl Default for ZooSettings {
    fn default() -> Self {
        Self { count: 50, tasks: 5, epochs: 30 }
    }
}

/// Contents of `--config`. Every section is optional.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub model: AutoencoderConfig,
    pub training: TrainingConfig,
    pub generation: GenerationSettings,
    /// When absent, comparison seeds are `seed, seed + 1, seed + 2`.
    pub comparison: Option<ComparisonConfig>,
    pub zoo: ZooSettings,
    pub latents_per_model: Option<usize>,
}

enum Failure {
    Usage(String),
    Domain(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Domain(e)
    }
}

type Outcome = Result<(), Failure>;

fn usage<T>(msg: impl Into<String>) -> Result<T, Failure> {
    Err(Failure::Usage(msg.into()))
}

fn require(path: &Path, what: &str) -> Outcome {
    if path.exists() {
        Ok(())
    } else {
        usage(format!("{what} {} does not exist", path.display()))
    }
}

fn parse_bandwidth(s: &str) -> Result<Bandwidth, Failure> {
    s.parse().map_err(|e: wf_core::generation::GenerationError| Failure::Usage(e.to_string()))
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    let Some(path) = path else { return Ok(RunConfig::default()) };
    require(path, "config")?;
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))
}

fn resolve_seed(flag: Option<u64>, config: Option<u64>) -> Result<u64, Failure> {
    if let Some(s) = flag.or(config) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| Failure::Usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

fn load_weights(path: &Path) -> anyhow::Result<AutoencoderWeights> {
    AutoencoderWeights::load(path).with_context(|| format!("loading autoencoder {}", path.display()))
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Parses `argv` (program name first) and runs one subcommand.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let level = cli.log_level.parse::<log::LevelFilter>().unwrap_or(log::LevelFilter::Warn);
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();

    match dispatch(cli) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            2
        }
        Err(Failure::Domain(e)) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

fn dispatch(cli: Cli) -> Outcome {
    let config = load_config(cli.config.as_deref())?;
    let seed = resolve_seed(cli.seed, config.seed)?;
    match cli.command {
        Command::Collect { input, out } => collect(&input, &out),
        Command::Tokenize { manifest, out, d_t } => tokenize(&manifest, &out, d_t.unwrap_or(config.model.d_t)),
        Command::Train(args) => run_train(args, &config, seed),
        Command::Generate(args) => run_generate(args, &config, seed),
        Command::Evaluate(args) => run_evaluate(args, &config, seed),
        Command::ExportLatents { manifest, model, out } => {
            run_export(&manifest, &model, &out, config.latents_per_model.unwrap_or(100), seed)
        }
        Command::Merge { input, out, drop_p } => run_merge(&input, &out, drop_p, seed),
        Command::Prune { input, out, sparsity } => run_prune(&input, &out, sparsity),
        Command::Zoo { out, count, tasks, epochs } => {
            let s = ZooSettings {
                count: count.unwrap_or(config.zoo.count),
                tasks: tasks.unwrap_or(config.zoo.tasks),
                epochs: epochs.unwrap_or(config.zoo.epochs),
            };
            run_zoo(&out, &s, seed)
        }
    }
}

fn collect(input: &Path, out: &Path) -> Outcome {
    require(input, "input directory")?;
    let manifest = collect_dir(input).context("collecting checkpoints")?;
    std::fs::write(out, manifest.to_json()).with_context(|| format!("writing {}", out.display()))?;
    println!("{} models collected, {} skipped -> {}", manifest.entries.len(), manifest.skipped.len(), out.display());
    Ok(())
}

fn read_manifest(path: &Path) -> Result<CollectionManifest, Failure> {
    require(path, "manifest")?;
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    CollectionManifest::from_json(&text).map_err(|e| Failure::Usage(format!("manifest {}: {e}", path.display())))
}

fn tokenize(manifest: &Path, out: &Path, d_t: usize) -> Outcome {
    let manifest = read_manifest(manifest)?;
    if d_t == 0 {
        return usage("--d-t must be positive");
    }
    let written = write_token_files(&manifest, d_t, out).context("tokenizing")?;
    println!("{} token files -> {}", written.len(), out.display());
    Ok(())
}

fn run_train(args: TrainArgs, config: &RunConfig, seed: u64) -> Outcome {
    require(&args.input, "token directory")?;
    let mut model = config.model;
    model.d_t = args.d_t.unwrap_or(model.d_t);
    model.window = args.window.unwrap_or(model.window);
    let mut tc = config.training;
    tc.seed = seed;
    tc.gamma = args.gamma.unwrap_or(tc.gamma);
    tc.sigma_aug = args.sigma_aug.unwrap_or(tc.sigma_aug);
    tc.temperature = args.temperature.unwrap_or(tc.temperature);
    tc.epochs = args.epochs.unwrap_or(tc.epochs);
    tc.batch_size = args.batch_size.unwrap_or(tc.batch_size);
    tc.max_lr = args.max_lr.unwrap_or(tc.max_lr);
    tc.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    model.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let init = match &args.init {
        Some(p) => {
            require(p, "init checkpoint")?;
            let w = load_weights(p)?;
            model = *w.config();
            Some(w)
        }
        None => None,
    };

    let data = read_token_files(&args.input).context("reading token files")?;
    create_dir(&args.out)?;
    let outcome = train(&data, &tc, &model, init, Some(&args.out)).context("training")?;
    outcome.final_weights.save(&args.out.join("final")).context("saving final weights")?;
    let h = &outcome.history;
    println!(
        "trained {} epochs on {} models ({} held out): loss {:.6} -> {:.6}, best epoch {}",
        h.len(),
        h.train_models.len(),
        h.val_models.len(),
        h.initial_train_loss,
        h.final_train_loss().unwrap_or(f64::NAN),
        h.best_epoch.unwrap_or(0)
    );
    Ok(())
}

fn run_generate(args: GenerateArgs, config: &RunConfig, seed: u64) -> Outcome {
    require(&args.prompt, "prompt")?;
    require(&args.model, "model")?;
    let g = &config.generation;
    let count = args.count.unwrap_or(g.count);
    let keep = args.keep.unwrap_or(g.keep);
    let bandwidth = match &args.bandwidth {
        Some(b) => parse_bandwidth(b)?,
        None => g.bandwidth,
    };
    if count == 0 || keep == 0 || keep > count {
        return usage(format!("need 1 <= keep ({keep}) <= count ({count})"));
    }
    let prompt = read_checkpoint_file(&args.prompt).context("reading prompt")?;
    let weights = load_weights(&args.model)?;
    let candidates = generate(&prompt, &weights, &GenerateConfig { count, base_seed: seed, bandwidth })
        .context("generating candidates")?;
    let task: Option<ToyTask> = prompt.metadata().get(TASK_KEY).and_then(|t| serde_json::from_str(t).ok());
    let kept = match task {
        Some(task) => rank_candidates(candidates, &TaskProbe::new(&task, g.probe), keep).context("ranking")?,
        None if keep == count => {
            log::warn!("prompt has no probe task; keeping all candidates unranked");
            candidates
        }
        None => {
            return Err(anyhow!("prompt {} has no probe task metadata to rank candidates", args.prompt.display()).into())
        }
    };
    create_dir(&args.out)?;
    for c in &kept {
        let path = save_candidate(&args.out, c).context("writing candidate")?;
        match (c.rank, c.probe_score) {
            (Some(r), Some(s)) => println!("#{r} seed {} probe {s:.6} -> {}", c.seed, path.display()),
            _ => println!("seed {} -> {}", c.seed, path.display()),
        }
    }
    Ok(())
}

fn zoo_paths(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    require(dir, "zoo directory")?;
    Ok(wf_core::pipeline::checkpoint_files(dir).context("listing zoo")?)
}

fn run_evaluate(args: EvaluateArgs, config: &RunConfig, seed: u64) -> Outcome {
    require(&args.model, "model")?;
    let paths = zoo_paths(&args.input)?;
    let mut cfg = config.comparison.clone().unwrap_or_else(|| ComparisonConfig {
        seeds: (0..3).map(|i| seed.wrapping_add(i)).collect(),
        candidates: config.generation.count,
        keep: config.generation.keep,
        bandwidth: config.generation.bandwidth,
        probe: config.generation.probe,
        ..ComparisonConfig::default()
    });
    cfg.finetune.epochs = args.epochs.unwrap_or(cfg.finetune.epochs);
    cfg.candidates = args.count.unwrap_or(cfg.candidates);
    cfg.keep = args.keep.unwrap_or(cfg.keep);
    cfg.drop_p = args.drop_p.unwrap_or(cfg.drop_p);
    cfg.sparsity = args.sparsity.unwrap_or(cfg.sparsity);
    if let Some(b) = &args.bandwidth {
        cfg.bandwidth = parse_bandwidth(b)?;
    }
    if cfg.keep == 0 || cfg.keep > cfg.candidates {
        return usage(format!("need 1 <= keep ({}) <= count ({})", cfg.keep, cfg.candidates));
    }
    let zoo = Zoo::load(&paths).context("loading zoo")?;
    let weights = load_weights(&args.model)?;
    let report = run_comparison(&zoo, &weights, &cfg).context("running comparison")?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    report.write(&args.out).context("writing report")?;
    print!("{}", report.render_table());
    Ok(())
}

fn run_export(manifest: &Path, model: &Path, out: &Path, per_model: usize, seed: u64) -> Outcome {
    let manifest = read_manifest(manifest)?;
    require(model, "model")?;
    let weights = load_weights(model)?;
    let models = manifest
        .entries
        .iter()
        .map(|e| {
            let mut map = read_checkpoint_file(&e.path)?;
            map.set_source_id(e.source_id.clone());
            Ok(LabeledEmbedding {
                embedding: wf_core::generation::embed_prompt(&map, &weights)?,
                family: e.arch.family.as_str().to_string(),
                modality: e.arch.modality_hint.as_str().to_string(),
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()
        .context("embedding models")?;
    let file = std::fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
    let rows = export_latents(&models, per_model, seed, std::io::BufWriter::new(file)).context("exporting")?;
    println!("{rows} latent rows -> {}", out.display());
    Ok(())
}

fn run_merge(inputs: &[PathBuf], out: &Path, drop_p: f64, seed: u64) -> Outcome {
    for p in inputs {
        require(p, "input")?;
    }
    if !(0.0..1.0).contains(&drop_p) {
        return usage(format!("--drop-p {drop_p} must lie in [0, 1)"));
    }
    let maps = inputs.iter().map(|p| read_checkpoint_file(p)).collect::<Result<Vec<_>, _>>().context("reading")?;
    let merged = dare_merge(&maps[0], &maps[1..], drop_p, seed).context("merging")?;
    write_checkpoint_file(out, &merged).with_context(|| format!("writing {}", out.display()))?;
    println!("merged {} donors -> {}", maps.len() - 1, out.display());
    Ok(())
}

fn run_prune(input: &Path, out: &Path, sparsity: f64) -> Outcome {
    require(input, "input")?;
    if !(0.0..1.0).contains(&sparsity) {
        return usage(format!("--sparsity {sparsity} must lie in [0, 1)"));
    }
    let map = read_checkpoint_file(input).context("reading")?;
    let pruned = magnitude_prune(&map, sparsity).context("pruning")?;
    write_checkpoint_file(out, &pruned).with_context(|| format!("writing {}", out.display()))?;
    let zeros = pruned.flat_values().iter().filter(|v| **v == 0.0).count();
    println!("{zeros} of {} entries zero -> {}", pruned.parameter_count(), out.display());
    Ok(())
}

fn run_zoo(out: &Path, s: &ZooSettings, seed: u64) -> Outcome {
    if s.count == 0 || s.tasks == 0 {
        return usage("--count and --tasks must be positive");
    }
    let mut spec = ZooSpec::desk(s.count, s.tasks, seed).context("building tasks")?;
    spec.train.epochs = s.epochs;
    let zoo = build_zoo(&spec).context("training zoo")?;
    let paths = zoo.save(out).context("saving zoo")?;
    let mean = zoo.members.iter().map(|m| m.test.accuracy).sum::<f64>() / zoo.members.len() as f64;
    println!("{} members on {} tasks, mean test accuracy {mean:.4} -> {}", paths.len(), zoo.tasks.len(), out.display());
    Ok(())
}
