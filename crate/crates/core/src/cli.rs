//! Experiment configuration and the subcommands of the `listnar` binary.
//!
//! A run is described by one TOML file with a few top-level keys and one
//! table per stage. Every key is optional; missing keys take the defaults
//! below and unknown keys are rejected. `--override section.key=value`
//! replaces a single value after the file is read, with `value` parsed as a
//! TOML value and falling back to a bare string.
//!
//! ```toml
//! seed = 42
//! run_dir = "runs/default"
//!
//! [synth]        # num_items, num_categories, num_lists, min_len, max_len, pattern_strength
//! [corpus]       # input, categories, min_freq, min_len, max_len, split
//! [categorizer]  # source ("cbow" | "file"), num_categories, dim, window, epochs,
//!                # learning_rate, negatives, max_iter
//! [model]        # dim, layers, heads, max_len, classifier ("vanilla" | "two_stage"),
//!                # epsilon, dropout
//! [masker]       # rho_r, beta_m, beta_r, beta_u
//! [scheduler]    # kind ("naive" | "stepwise"), steps
//! [trainer]      # lr, batch_size, max_epochs, patience, metric ("ndcg@10" | "hr@10" | "loss"),
//!                # clip_norm (0 disables)
//! [inference]    # k, mode ("nar" | "ar" | "recall")
//! [bench]        # runs, warmup, samples, sweep_items, ns
//! ```
//!
//! Every stage reads from and writes to `run_dir`, so `synth`, `preprocess`,
//! `categorize`, `train` and `eval` chain without further arguments. Stage
//! seeds are derived from the global seed by fixed offsets.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::bench::{self, LatencyReport, RequestTemplate, SweepConfig, TimingPlan};
use crate::categorizer::{self, CbowConfig};
use crate::corpus::{self, FilterParams, ListPair, SplitManifest, SynthConfig, Vocabulary};
use crate::inference::{evaluate_pairs, DecodeMode, Decoder, GenerationRequest, MetricReport};
use crate::masker::MaskPolicy;
use crate::model::{self, ClassifierMode, Model, ModelConfig};
use crate::scheduler::ScheduleKind;
use crate::trainer::{self, SelectionMetric, TrainConfig};
use crate::{Error, ItemId, Result};

const SYNTH_SEED: u64 = 0;
const SPLIT_SEED: u64 = 1;
const CBOW_SEED: u64 = 2;
const KMEANS_SEED: u64 = 3;
const INIT_SEED: u64 = 4;
const TRAIN_SEED: u64 = 5;
const BENCH_SEED: u64 = 6;

pub const RESOLVED_CONFIG: &str = "config.resolved.toml";
pub const RAW_LISTS: &str = "raw.tsv";
pub const PLANTED_CATEGORIES: &str = "planted_categories.tsv";
pub const ITEM_INDEX: &str = "items.tsv";
pub const SPLIT_FILES: [&str; 3] = ["train.tsv", "valid.tsv", "test.tsv"];
pub const SPLIT_MANIFEST: &str = "splits.json";
pub const EMBEDDINGS: &str = "embeddings.bin";
pub const CATEGORIES: &str = "categories.tsv";
pub const CHECKPOINT: &str = "model.ckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub run_dir: PathBuf,
    pub synth: SynthSection,
    pub corpus: CorpusSection,
    pub categorizer: CategorizerSection,
    pub model: ModelConfig,
    pub masker: MaskerSection,
    pub scheduler: SchedulerSection,
    pub trainer: TrainerSection,
    pub inference: InferenceSection,
    pub bench: BenchSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            run_dir: PathBuf::from("runs/default"),
            synth: SynthSection::default(),
            corpus: CorpusSection::default(),
            categorizer: CategorizerSection::default(),
            model: ModelConfig::default(),
            masker: MaskerSection::default(),
            scheduler: SchedulerSection::default(),
            trainer: TrainerSection::default(),
            inference: InferenceSection::default(),
            bench: BenchSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub num_items: usize,
    pub num_categories: usize,
    pub num_lists: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub pattern_strength: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let d = SynthConfig::default();
        SynthSection {
            num_items: d.num_items,
            num_categories: d.num_categories,
            num_lists: d.num_lists,
            min_len: d.min_len,
            max_len: d.max_len,
            pattern_strength: d.pattern_strength,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSection {
    /// Raw list file; `run_dir/raw.tsv` when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<PathBuf>,
    /// External `item<TAB>category` map used when `categorizer.source = "file"`;
    /// `run_dir/planted_categories.tsv` when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub categories: Option<PathBuf>,
    pub min_freq: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub split: [f64; 3],
}

impl Default for CorpusSection {
    fn default() -> Self {
        let f = FilterParams::default();
        CorpusSection {
            input: None,
            categories: None,
            min_freq: f.min_freq,
            min_len: f.min_len,
            max_len: f.max_len,
            split: [8.0, 1.0, 1.0],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CategorySource {
    Cbow,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CategorizerSection {
    pub source: CategorySource,
    pub num_categories: usize,
    pub dim: usize,
    pub window: usize,
    pub epochs: usize,
    pub learning_rate: f32,
    pub negatives: usize,
    pub max_iter: usize,
}

impl Default for CategorizerSection {
    fn default() -> Self {
        let c = CbowConfig::default();
        CategorizerSection {
            source: CategorySource::Cbow,
            num_categories: 10,
            dim: c.dim,
            window: c.window,
            epochs: c.epochs,
            learning_rate: c.learning_rate,
            negatives: c.negatives,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskerSection {
    pub rho_r: f64,
    pub beta_m: f64,
    pub beta_r: f64,
    pub beta_u: f64,
}

impl Default for MaskerSection {
    fn default() -> Self {
        let p = MaskPolicy::default();
        MaskerSection {
            rho_r: p.rho_r,
            beta_m: p.beta_m,
            beta_r: p.beta_r,
            beta_u: p.beta_u,
        }
    }
}

impl MaskerSection {
    pub fn policy(&self) -> MaskPolicy {
        MaskPolicy {
            rho_r: self.rho_r,
            beta_m: self.beta_m,
            beta_r: self.beta_r,
            beta_u: self.beta_u,
            ..MaskPolicy::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchedulerSection {
    pub kind: ScheduleKind,
    pub steps: usize,
}

impl Default for SchedulerSection {
    fn default() -> Self {
        SchedulerSection {
            kind: ScheduleKind::Stepwise,
            steps: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainerSection {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub metric: SelectionMetric,
    pub clip_norm: f64,
}

impl Default for TrainerSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainerSection {
            lr: t.learning_rate,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            metric: t.metric,
            clip_norm: t.clip_norm.unwrap_or(0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceSection {
    pub k: usize,
    pub mode: DecodeMode,
}

impl Default for InferenceSection {
    fn default() -> Self {
        InferenceSection {
            k: 10,
            mode: DecodeMode::Nar,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub runs: usize,
    pub warmup: usize,
    /// Test inputs timed per run.
    pub samples: usize,
    /// Vocabulary size for the random-weight category sweep.
    pub sweep_items: usize,
    pub ns: Vec<usize>,
}

impl Default for BenchSection {
    fn default() -> Self {
        BenchSection {
            runs: bench::DEFAULT_RUNS,
            warmup: bench::DEFAULT_WARMUP,
            samples: 100,
            sweep_items: 100_000,
            ns: vec![1, 10, 100, 1000],
        }
    }
}

fn config_error(field: &str, message: impl std::fmt::Display) -> Error {
    Error::Config {
        field: field.to_string(),
        message: message.to_string(),
    }
}

impl ExperimentConfig {
    pub fn synth_config(&self) -> SynthConfig {
        let s = &self.synth;
        SynthConfig {
            num_items: s.num_items,
            num_categories: s.num_categories,
            num_lists: s.num_lists,
            min_len: s.min_len,
            max_len: s.max_len,
            pattern_strength: s.pattern_strength,
            seed: self.seed.wrapping_add(SYNTH_SEED),
        }
    }

    pub fn filter_params(&self) -> FilterParams {
        FilterParams {
            min_freq: self.corpus.min_freq,
            min_len: self.corpus.min_len,
            max_len: self.corpus.max_len,
        }
    }

    pub fn cbow_config(&self) -> CbowConfig {
        let c = &self.categorizer;
        CbowConfig {
            dim: c.dim,
            window: c.window,
            epochs: c.epochs,
            learning_rate: c.learning_rate,
            negatives: c.negatives,
            seed: self.seed.wrapping_add(CBOW_SEED),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.trainer;
        TrainConfig {
            learning_rate: t.lr,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            schedule: self.scheduler.kind,
            steps: self.scheduler.steps,
            metric: t.metric,
            clip_norm: (t.clip_norm > 0.0).then_some(t.clip_norm),
            masking: self.masker.policy(),
            seed: self.seed.wrapping_add(TRAIN_SEED),
        }
    }

    /// Checks every section against the preconditions of the module it feeds.
    pub fn validate(&self) -> Result<()> {
        let s = &self.synth;
        if s.num_items == 0 || s.num_categories == 0 || s.num_categories > s.num_items {
            return Err(config_error("synth.num_categories", "need 1 <= num_categories <= num_items"));
        }
        if s.min_len < 2 || s.max_len < s.min_len {
            return Err(config_error("synth.min_len", "need 2 <= min_len <= max_len"));
        }
        if !(0.0..=1.0).contains(&s.pattern_strength) {
            return Err(config_error("synth.pattern_strength", "must lie in [0, 1]"));
        }
        self.filter_params()
            .validate()
            .map_err(|e| config_error("corpus", e))?;
        if self.corpus.split.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(config_error("corpus.split", "all three ratios must be positive"));
        }
        let c = &self.categorizer;
        if c.num_categories == 0 {
            return Err(config_error("categorizer.num_categories", "must be at least 1"));
        }
        if c.dim == 0 || c.window == 0 || c.epochs == 0 || c.negatives == 0 || c.max_iter == 0 {
            return Err(config_error("categorizer", "dim, window, epochs, negatives and max_iter must be >= 1"));
        }
        if !(c.learning_rate > 0.0) {
            return Err(config_error("categorizer.learning_rate", "must be positive"));
        }
        self.model.validate().map_err(|e| config_error("model", e))?;
        self.masker.policy().validate().map_err(|e| config_error("masker", e))?;
        if self.scheduler.steps == 0 {
            return Err(config_error("scheduler.steps", "must be at least 1"));
        }
        self.train_config().validate().map_err(|e| config_error("trainer", e))?;
        if self.inference.k == 0 {
            return Err(config_error("inference.k", "must be at least 1"));
        }
        if self.inference.k + 4 > self.model.max_len {
            return Err(config_error("inference.k", "K + 4 must fit in model.max_len"));
        }
        let b = &self.bench;
        if b.runs == 0 || b.samples == 0 {
            return Err(config_error("bench", "runs and samples must be >= 1"));
        }
        if b.ns.iter().any(|&n| n == 0 || n > b.sweep_items) {
            return Err(config_error("bench.ns", "every N must lie in 1..=sweep_items"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_error("<root>", e))
    }
}

/// Sets `path` (dotted) in `table` to `raw`, parsed as a TOML value when
/// possible and kept as a string otherwise.
fn apply_override(table: &mut toml::Table, path: &str, raw: &str) -> Result<()> {
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(config_error(path, "empty key in override path"));
    }
    let (last, parents) = keys.split_last().expect("split yields at least one key");
    let mut node = table;
    for key in parents {
        let entry = node
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| config_error(path, format!("`{key}` is not a table")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

/// Reads the config file (defaults when `path` is `None`), applies
/// `key=value` overrides and validates the result.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut table = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| config_error("--config", format!("{}: {e}", p.display())))?;
            toml::from_str::<toml::Table>(&text).map_err(|e| config_error("--config", e))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        let (key, value) = o
            .split_once('=')
            .ok_or_else(|| config_error("--override", format!("expected key=value, got `{o}`")))?;
        apply_override(&mut table, key.trim(), value.trim())?;
    }
    let config: ExperimentConfig = serde_path_to_error::deserialize(toml::Value::Table(table))
        .map_err(|e| config_error(&e.path().to_string(), e.inner()))?;
    config.validate()?;
    Ok(config)
}

const CONFIG_HELP: &str = "\
Config keys (TOML, every key optional, unknown keys rejected):
  seed, run_dir
  [synth]        num_items, num_categories, num_lists, min_len, max_len, pattern_strength
  [corpus]       input, categories, min_freq, min_len, max_len, split
  [categorizer]  source (cbow|file), num_categories, dim, window, epochs, learning_rate,
                 negatives, max_iter
  [model]        dim, layers, heads, max_len, classifier (vanilla|two_stage), epsilon, dropout
  [masker]       rho_r, beta_m, beta_r, beta_u
  [scheduler]    kind (naive|stepwise), steps
  [trainer]      lr, batch_size, max_epochs, patience, metric (ndcg@10|hr@10|loss),
                 clip_norm (0 disables)
  [inference]    k, mode (nar|ar|recall)
  [bench]        runs, warmup, samples, sweep_items, ns

Exit status: 0 on success, 2 for configuration errors, 1 for pipeline errors.";

#[derive(Debug, Parser)]
#[command(
    name = "listnar",
    version,
    about = "Non-autoregressive item-list continuation",
    after_long_help = CONFIG_HELP
)]
pub struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted-path override, e.g. `trainer.lr=0.01`. Repeatable.
    #[arg(long = "override", short = 'o', value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a planted-pattern corpus into the run directory.
    Synth,
    /// Filter, index and split the raw lists.
    Preprocess,
    /// Assign item categories (CBOW + K-means, or a category file).
    Categorize,
    /// Train a model on the splits and save the best checkpoint.
    Train {
        /// Write the first N training bundles of epoch 0 as JSON lines.
        #[arg(long, value_name = "N")]
        dump_bundles: Option<usize>,
    },
    /// Continue one input list and print the result as JSON.
    Infer {
        /// Whitespace-separated external item ids.
        #[arg(long)]
        input: String,
        /// Include the ranked candidates behind every position.
        #[arg(long)]
        topk: bool,
    },
    /// Score the checkpoint on the test split.
    Eval,
    /// Time decoding of test inputs with the trained checkpoint.
    Bench,
    /// Time a random-weight two-stage model over `bench.ns`.
    Sweep,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Preprocess => "preprocess",
            Command::Categorize => "categorize",
            Command::Train { .. } => "train",
            Command::Infer { .. } => "infer",
            Command::Eval => "eval",
            Command::Bench => "bench",
            Command::Sweep => "sweep",
        }
    }
}

/// Process exit status for an error: 2 for configuration, 1 otherwise.
pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Config { .. } => 2,
        _ => 1,
    }
}

/// Loads the config, records it in the run directory and runs one subcommand.
pub fn run(cli: &Cli) -> Result<()> {
    let config = load_config(cli.config.as_deref(), &cli.overrides)?;
    let dir = &config.run_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_text(&dir.join(RESOLVED_CONFIG), &config.to_toml()?)?;
    log::info!("{} in {}", cli.command.name(), dir.display());
    match &cli.command {
        Command::Synth => synth(&config),
        Command::Preprocess => preprocess(&config),
        Command::Categorize => categorize(&config),
        Command::Train { dump_bundles } => train(&config, *dump_bundles),
        Command::Infer { input, topk } => infer(&config, input, *topk),
        Command::Eval => eval(&config),
        Command::Bench => run_bench(&config),
        Command::Sweep => sweep(&config),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::invalid(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

fn create(path: &Path) -> Result<std::io::BufWriter<fs::File>> {
    fs::File::create(path)
        .map(std::io::BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn synth(config: &ExperimentConfig) -> Result<()> {
    let corpus = corpus::generate_synthetic(&config.synth_config())?;
    let dir = &config.run_dir;
    corpus::write_raw_lists(dir.join(RAW_LISTS), &corpus.raw_lists())?;
    corpus::write_category_map(dir.join(PLANTED_CATEGORIES), &corpus.category_entries())?;
    log::info!("wrote {} lists over {} items", corpus.lists.len(), corpus.categories.len());
    Ok(())
}

fn preprocess(config: &ExperimentConfig) -> Result<()> {
    let dir = &config.run_dir;
    let input = config.corpus.input.clone().unwrap_or_else(|| dir.join(RAW_LISTS));
    let raw = corpus::load_raw_lists(&input)?;
    let kept = corpus::filter_and_truncate(&raw, config.filter_params())?;
    if kept.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let (lists, index) = corpus::index_lists(&kept);
    let pairs = kept
        .iter()
        .zip(&lists)
        .map(|(r, l)| {
            let mut pair = corpus::split_list(l)?;
            pair.id = r.id.clone();
            Ok(pair)
        })
        .collect::<Result<Vec<_>>>()?;
    let seed = config.seed.wrapping_add(SPLIT_SEED);
    let splits = corpus::split_dataset(pairs, config.corpus.split, seed)?;
    corpus::write_item_index(dir.join(ITEM_INDEX), index.external_ids())?;
    for (name, part) in SPLIT_FILES.iter().zip([&splits.train, &splits.validation, &splits.test]) {
        corpus::write_split(dir.join(name), part)?;
    }
    let manifest = SplitManifest {
        seed,
        ratios: splits.ratios,
        counts: splits.counts(),
        files: SPLIT_FILES.map(PathBuf::from),
        num_items: index.len(),
    };
    write_json(&dir.join(SPLIT_MANIFEST), &manifest)?;
    log::info!(
        "kept {} of {} lists, {} items, splits {:?}",
        kept.len(),
        raw.len(),
        index.len(),
        splits.counts()
    );
    Ok(())
}

fn read_splits(dir: &Path) -> Result<[Vec<ListPair>; 3]> {
    Ok([
        corpus::read_split(dir.join(SPLIT_FILES[0]))?,
        corpus::read_split(dir.join(SPLIT_FILES[1]))?,
        corpus::read_split(dir.join(SPLIT_FILES[2]))?,
    ])
}

#[derive(Debug, Serialize)]
struct CategorizeSummary {
    source: CategorySource,
    num_items: usize,
    num_categories: usize,
    category_sizes: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    inertia: Option<f64>,
    /// Agreement with the planted categories, when a planted map exists.
    #[serde(skip_serializing_if = "Option::is_none")]
    ari_vs_planted: Option<f64>,
}

/// Category labels for the dense items from an external `item<TAB>category` map.
fn categories_from_file(path: &Path, index: &corpus::ItemIndex) -> Result<Vec<u64>> {
    let map: std::collections::HashMap<u64, u64> = corpus::read_category_map(path)?.into_iter().collect();
    index
        .external_ids()
        .iter()
        .map(|ext| {
            map.get(ext)
                .copied()
                .ok_or_else(|| Error::invalid(format!("item {ext} has no category in {}", path.display())))
        })
        .collect()
}

fn categorize(config: &ExperimentConfig) -> Result<()> {
    let dir = &config.run_dir;
    let index = corpus::ItemIndex::from_external(corpus::read_item_index(dir.join(ITEM_INDEX))?);
    let m = index.len();
    let planted_path = config
        .corpus
        .categories
        .clone()
        .unwrap_or_else(|| dir.join(PLANTED_CATEGORIES));

    let (vocab, inertia) = match config.categorizer.source {
        CategorySource::File => (Vocabulary::from_assignment(&categories_from_file(&planted_path, &index)?)?, None),
        CategorySource::Cbow => {
            let [train, _, _] = read_splits(dir)?;
            let lists: Vec<Vec<ItemId>> = train.iter().map(|p| [&p.input[..], &p.target[..]].concat()).collect();
            let table = categorizer::train_cbow(&lists, m, &config.cbow_config())?;
            categorizer::write_embeddings(dir.join(EMBEDDINGS), &table)?;
            let n = config.categorizer.num_categories.min(m);
            let clusters = categorizer::kmeans(
                &table,
                n,
                config.categorizer.max_iter,
                config.seed.wrapping_add(KMEANS_SEED),
            )?;
            (categorizer::assign_categories(m, &clusters)?, Some(clusters.inertia))
        }
    };
    vocab.check_partition()?;
    let sizes = vocab.category_sizes();
    if sizes.iter().sum::<usize>() != m {
        return Err(Error::invalid("category sizes do not cover the vocabulary"));
    }

    let ari_vs_planted = if planted_path.exists() {
        let planted = Vocabulary::from_assignment(&categories_from_file(&planted_path, &index)?)?;
        Some(categorizer::adjusted_rand_index(planted.item_to_category(), vocab.item_to_category()))
    } else {
        None
    };
    let entries: Vec<(u64, u64)> = vocab
        .item_to_category()
        .iter()
        .enumerate()
        .map(|(i, &c)| (i as u64, c as u64))
        .collect();
    corpus::write_category_map(dir.join(CATEGORIES), &entries)?;
    let summary = CategorizeSummary {
        source: config.categorizer.source,
        num_items: m,
        num_categories: vocab.num_categories(),
        category_sizes: sizes,
        inertia,
        ari_vs_planted,
    };
    write_json(&dir.join("categorize.json"), &summary)?;
    log::info!("{} categories over {m} items", summary.num_categories);
    Ok(())
}

fn load_vocabulary(dir: &Path) -> Result<Vocabulary> {
    let mut entries = corpus::read_category_map(dir.join(CATEGORIES))?;
    entries.sort_unstable();
    if entries.iter().enumerate().any(|(i, &(item, _))| item != i as u64) {
        return Err(Error::invalid(format!("{} must list every dense item once", CATEGORIES)));
    }
    Vocabulary::from_assignment(&entries.iter().map(|&(_, c)| c).collect::<Vec<_>>())
}

#[derive(Debug, Serialize)]
struct TrainSummary {
    best_epoch: usize,
    best_metric: f64,
    epochs_run: usize,
    metric: SelectionMetric,
}

fn train(config: &ExperimentConfig, dump_bundles: Option<usize>) -> Result<()> {
    let dir = &config.run_dir;
    let vocab = load_vocabulary(dir)?;
    let [train_pairs, valid_pairs, _] = read_splits(dir)?;
    let train_config = config.train_config();

    let schedule = train_config.schedule()?;
    let mut csv = create(&dir.join("schedule.csv"))?;
    schedule
        .write_csv(&mut csv)
        .map_err(|e| Error::io(dir.join("schedule.csv"), e))?;
    drop(csv);

    let model = Model::new(config.model, vocab, config.seed.wrapping_add(INIT_SEED))?;
    if let Some(n) = dump_bundles {
        let policy = train_config.masking.with_rho_t(schedule.at(0));
        let bundles = trainer::epoch_bundles(&train_pairs, &model, &policy, 0, train_config.seed)?;
        let path = dir.join("bundles.jsonl");
        let mut text = String::new();
        for b in bundles.iter().take(n) {
            text.push_str(&serde_json::to_string(b).map_err(|e| Error::invalid(e.to_string()))?);
            text.push('\n');
        }
        write_text(&path, &text)?;
    }

    let outcome = trainer::train(model, &train_pairs, &valid_pairs, &train_config)?;
    let log_path = dir.join("log.jsonl");
    trainer::write_log(&outcome.log, create(&log_path)?).map_err(|e| Error::io(&log_path, e))?;
    model::save_checkpoint(dir.join(CHECKPOINT), &outcome.model)?;
    write_json(
        &dir.join("train.json"),
        &TrainSummary {
            best_epoch: outcome.best_epoch,
            best_metric: outcome.best_metric,
            epochs_run: outcome.log.len(),
            metric: train_config.metric,
        },
    )?;
    log::info!("best {} = {:.4} at epoch {}", train_config.metric, outcome.best_metric, outcome.best_epoch);
    Ok(())
}

#[derive(Debug, Serialize)]
struct InferOutput {
    input: Vec<u64>,
    mode: DecodeMode,
    classifier: ClassifierMode,
    generated: Vec<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    per_position_topk: Option<Vec<Vec<(u64, f64)>>>,
}

fn infer(config: &ExperimentConfig, input: &str, topk: bool) -> Result<()> {
    let dir = &config.run_dir;
    let index = corpus::ItemIndex::from_external(corpus::read_item_index(dir.join(ITEM_INDEX))?);
    let external: Vec<u64> = input
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::invalid(format!("invalid item id `{t}`"))))
        .collect::<Result<_>>()?;
    let dense = external
        .iter()
        .map(|&e| index.dense(e).ok_or_else(|| Error::invalid(format!("unknown item {e}"))))
        .collect::<Result<Vec<_>>>()?;
    let model = model::load_checkpoint(dir.join(CHECKPOINT))?;
    let request = GenerationRequest {
        input: dense,
        k: config.inference.k,
        mode: config.inference.mode,
    };
    let generation = Decoder::new(&model).generate(&request)?;
    let out = InferOutput {
        input: external,
        mode: request.mode,
        classifier: model.config().classifier,
        generated: generation.items.iter().map(|&i| index.external(i)).collect(),
        per_position_topk: topk.then(|| {
            generation
                .candidates
                .positions
                .iter()
                .map(|p| p.iter().map(|&(i, s)| (index.external(i), s)).collect())
                .collect()
        }),
    };
    let text = serde_json::to_string(&out).map_err(|e| Error::invalid(e.to_string()))?;
    println!("{text}");
    write_text(&dir.join("infer.json"), &(text + "\n"))
}

/// Timing-free evaluation record; identical across reruns of one config.
#[derive(Debug, Serialize)]
struct EvalOutput {
    mode: DecodeMode,
    classifier: ClassifierMode,
    metrics: MetricReport,
    mac_count: u64,
    encoder_calls: u64,
}

fn eval(config: &ExperimentConfig) -> Result<()> {
    let dir = &config.run_dir;
    let [_, _, test] = read_splits(dir)?;
    let model = model::load_checkpoint(dir.join(CHECKPOINT))?;
    model.reset_counters();
    let metrics = evaluate_pairs(&model, &test, config.inference.mode)?;
    let out = EvalOutput {
        mode: config.inference.mode,
        classifier: model.config().classifier,
        metrics,
        mac_count: model.classifier_macs(),
        encoder_calls: model.encoder_calls(),
    };
    write_json(&dir.join("metrics.json"), &out)?;
    log::info!(
        "{} on {} test pairs: NDCG@10 {:.4}, HR@10 {:.4}",
        out.mode,
        metrics.count,
        metrics.ndcg_at_10,
        metrics.hr_at_10
    );
    Ok(())
}

fn timing_plan(config: &ExperimentConfig) -> TimingPlan {
    TimingPlan {
        runs: config.bench.runs,
        warmup: config.bench.warmup,
    }
}

fn write_reports(dir: &Path, stem: &str, reports: &[LatencyReport]) -> Result<()> {
    let csv_path = dir.join(format!("{stem}.csv"));
    bench::write_csv(reports, create(&csv_path)?).map_err(|e| Error::io(&csv_path, e))?;
    write_json(&dir.join(format!("{stem}.json")), &reports)
}

/// Times NAR and AR decoding of test inputs; speedups are relative to AR.
fn run_bench(config: &ExperimentConfig) -> Result<()> {
    let dir = &config.run_dir;
    let [_, _, test] = read_splits(dir)?;
    let model = model::load_checkpoint(dir.join(CHECKPOINT))?;
    let k = config.inference.k;
    let take = config.bench.samples.min(test.len());
    let inputs = bench::fit_inputs(&test[..take], k, model.config().max_len)?;
    let plan = timing_plan(config);
    let ar = bench::time_inference(&model, &inputs, RequestTemplate { mode: DecodeMode::Ar, k }, plan)?;
    let mut reports = Vec::new();
    for mode in [DecodeMode::Nar, DecodeMode::Recall] {
        let r = bench::time_inference(&model, &inputs, RequestTemplate { mode, k }, plan)?;
        reports.push(bench::with_speedup(r, &ar));
    }
    let ar = bench::with_speedup(ar.clone(), &ar);
    reports.insert(0, ar);
    for r in &reports {
        log::info!("{}: {:.3} ms/sample, speedup {:.2}", r.mode, r.per_sample_ms, r.speedup_vs_baseline.unwrap_or(1.0));
    }
    write_reports(dir, "bench", &reports)
}

fn sweep(config: &ExperimentConfig) -> Result<()> {
    let dir = &config.run_dir;
    let k = config.inference.k;
    let seed = config.seed.wrapping_add(BENCH_SEED);
    let len = (config.model.max_len - k - 3).min(config.corpus.max_len.div_ceil(2));
    let sweep_config = SweepConfig {
        model: config.model,
        num_items: config.bench.sweep_items,
        template: RequestTemplate {
            mode: config.inference.mode,
            k,
        },
        plan: timing_plan(config),
        seed,
    };
    let inputs = bench::random_inputs(config.bench.sweep_items, config.bench.samples, len, seed);
    let result = bench::sweep_categories(&sweep_config, &config.bench.ns, &inputs)?;
    let csv_path = dir.join("sweep.csv");
    bench::write_csv(&result.rows, create(&csv_path)?).map_err(|e| Error::io(&csv_path, e))?;
    write_json(&dir.join("sweep.json"), &result)
}
