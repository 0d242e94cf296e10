//! Experiment plumbing behind the `sdan` command line.
//!
//! A [`RunConfig`] names a task, a base [`TrainConfig`], a list of
//! strategies and a list of seeds. [`train_all`] runs every
//! (strategy, seed) pair in its own directory:
//!
//! ```text
//! <output>/<strategy>/seed-<n>/
//!     config.json     resolved task + training config for this run
//!     metrics.jsonl   one MetricsRecord per evaluation
//!     selected.model  entropy-selected networks
//!     final.model     networks after the last iteration
//!     state.bin       full training state (resumable)
//!     summary.json    RunSummary of the selected model
//! ```
//!
//! A run aborted by a numerical failure leaves `failure.txt` and
//! `failure-state.bin` (the state the failing iteration started from)
//! instead of the checkpoints and summary.
//!
//! Aggregate tables are recomputed from the `summary.json` files alone.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conditioning::{ConditioningKind, ConditioningStrategy};
use crate::data::{generate, load_csv, save_csv, Dataset, Domain, DomainShiftSpec};
use crate::error::{Error, Result};
use crate::losses::LambdaSchedule;
use crate::matrix::Matrix;
use crate::trainer::{evaluate, Evaluation, MetricsRecord, Model, TrainConfig, TrainState, Trainer};

/// Environment variable holding the default output root.
pub const OUTPUT_ROOT_ENV: &str = "SDAN_OUT";
pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

/// Where the two datasets come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    /// A named generator preset.
    Preset {
        name: String,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        label_noise: f64,
    },
    Spec { spec: DomainShiftSpec },
    Csv { source: PathBuf, target: PathBuf },
}

impl Default for Task {
    fn default() -> Self {
        Task::Preset {
            name: "swap3".into(),
            seed: 0,
            label_noise: 0.0,
        }
    }
}

pub fn preset(name: &str, seed: u64) -> Result<DomainShiftSpec> {
    match name {
        "swap3" => Ok(DomainShiftSpec::swap3(seed)),
        "swap3-identity" => {
            let mut spec = DomainShiftSpec::swap3(seed);
            spec.mode_swap = None;
            Ok(spec)
        }
        _ => Err(Error::Config(format!(
            "unknown preset {name:?} (known: swap3, swap3-identity)"
        ))),
    }
}

impl Task {
    /// The generator spec, if the task is synthetic.
    pub fn spec(&self) -> Result<Option<DomainShiftSpec>> {
        match self {
            Task::Preset {
                name,
                seed,
                label_noise,
            } => {
                let mut spec = preset(name, *seed)?;
                spec.label_noise = *label_noise;
                spec.validate()?;
                Ok(Some(spec))
            }
            Task::Spec { spec } => {
                spec.validate()?;
                Ok(Some(spec.clone()))
            }
            Task::Csv { .. } => Ok(None),
        }
    }

    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            Task::Csv { source, target } => Ok((
                load_csv(source, Domain::Source)?,
                load_csv(target, Domain::Target)?,
            )),
            _ => generate(&self.spec()?.expect("synthetic task")),
        }
    }
}

/// A strategy as named on the command line: `dann`, `concat_fp`,
/// `multilinear`, `sdan:<k>`, `ssdan:<k>`, `sdan+e:<k>`, `ssdan+e:<k>` or
/// `source_only` (marginal alignment with the adversarial weight held at 0).
#[derive(Clone, Debug, PartialEq)]
pub struct RunStrategy {
    pub strategy: ConditioningStrategy,
    pub source_only: bool,
}

impl RunStrategy {
    pub fn source_only() -> Self {
        RunStrategy {
            strategy: ConditioningStrategy::dann(),
            source_only: true,
        }
    }

    pub fn of(strategy: ConditioningStrategy) -> Self {
        RunStrategy {
            strategy,
            source_only: false,
        }
    }

    /// `base` with this strategy applied.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.strategy = self.strategy.clone();
        if self.source_only {
            cfg.lambda = LambdaSchedule::constant(0.0);
        }
        cfg
    }

    /// Directory-safe name.
    pub fn slug(&self) -> String {
        self.to_string().replace(':', "-k")
    }
}

impl fmt::Display for RunStrategy {
    fn fmt(&self, out: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.source_only {
            return out.write_str("source_only");
        }
        let s = &self.strategy;
        out.write_str(s.kind.name())?;
        if s.entropy_weighting {
            out.write_str("+e")?;
        }
        if matches!(s.kind, ConditioningKind::Sdan | ConditioningKind::Ssdan) {
            write!(out, ":{}", s.k)?;
        }
        Ok(())
    }
}

impl FromStr for RunStrategy {
    type Err = Error;

    fn from_str(text: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unrecognised strategy {text:?}"));
        let (head, k) = match text.split_once(':') {
            Some((h, k)) => (h, Some(k.parse::<f64>().map_err(|_| bad())?)),
            None => (text, None),
        };
        let (name, entropy) = match head.strip_suffix("+e") {
            Some(n) => (n, true),
            None => (head, false),
        };
        let mut strategy = match (name, k) {
            ("source_only", None) if !entropy => return Ok(RunStrategy::source_only()),
            ("dann", None) => ConditioningStrategy::dann(),
            ("concat_fp", None) => ConditioningStrategy::concat_fp(),
            ("multilinear", None) => ConditioningStrategy::multilinear(),
            ("sdan", k) => ConditioningStrategy::sdan(k.unwrap_or(1.0)),
            ("ssdan", k) => ConditioningStrategy::ssdan(k.unwrap_or(1.0)),
            _ => return Err(bad()),
        };
        strategy.entropy_weighting = entropy;
        strategy.validate()?;
        Ok(RunStrategy::of(strategy))
    }
}

impl Serialize for RunStrategy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RunStrategy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        text.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub task: Task,
    pub train: TrainConfig,
    /// Falls back to `$SDAN_OUT`, then `runs`.
    pub output_dir: Option<PathBuf>,
    pub strategies: Vec<RunStrategy>,
    pub seeds: Vec<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::default(),
            train: TrainConfig::default(),
            output_dir: None,
            strategies: vec![RunStrategy::of(ConditioningStrategy::sdan(1.0))],
            seeds: vec![0],
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.task.spec()?;
        if let Task::Csv { source, target } = &self.task {
            for p in [source, target] {
                if !p.exists() {
                    return Err(Error::Config(format!("{} does not exist", p.display())));
                }
            }
        }
        if self.strategies.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("need at least one strategy and one seed".into()));
        }
        Ok(())
    }

    pub fn output_root(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }
}

/// Resolved configuration stored next to each run's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub task: Task,
    pub strategy: RunStrategy,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    pub strategy: String,
    pub k: f64,
    pub lambda_ema: f64,
    pub seed: u64,
    pub iterations: usize,
    pub selected_iteration: usize,
    pub target_acc: f64,
    pub per_class_acc: f64,
    pub source_acc: f64,
    pub target_mean_entropy: f64,
}

/// Writes `source.csv`, `target.csv` and `spec.json` into `dir`.
pub fn gen_data(spec: &DomainShiftSpec, dir: &Path) -> Result<()> {
    let (source, target) = generate(spec)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_csv(&source, &dir.join("source.csv"))?;
    save_csv(&target, &dir.join("target.csv"))?;
    write_json(&dir.join("spec.json"), spec)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn run_dir(root: &Path, strategy: &RunStrategy, seed: u64) -> PathBuf {
    root.join(strategy.slug()).join(format!("seed-{seed}"))
}

/// One training run, written to `dir`.
pub fn train_one(
    task: &Task,
    strategy: &RunStrategy,
    base: &TrainConfig,
    seed: u64,
    data: &(Dataset, Dataset),
    dir: &Path,
) -> Result<RunSummary> {
    let mut cfg = strategy.apply(base);
    cfg.seed = seed;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(
        &dir.join("config.json"),
        &RunRecord {
            task: task.clone(),
            strategy: strategy.clone(),
            train: cfg.clone(),
        },
    )?;

    let (source, target) = data;
    let classes = class_count(task, source, target)?;
    let trainer = Trainer::new(&cfg, source, target)?;
    let metrics_path = dir.join("metrics.jsonl");
    let file = fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut sink = BufWriter::new(file);
    let mut write_err = None;
    let on_failure = |state: &TrainState, err: &Error| {
        let dump = dir.join("failure-state.bin");
        let note = dir.join("failure.txt");
        if fs::write(&dump, state.to_bytes()).is_err() || fs::write(&note, format!("{err}\n")).is_err() {
            log::error!("could not write failure snapshot to {}", dir.display());
        }
    };
    let out = trainer.run_observed(
        trainer.init_state(classes)?,
        |rec: &MetricsRecord| {
            if write_err.is_some() {
                return;
            }
            let line = serde_json::to_string(rec).expect("metrics serialize");
            if let Err(e) = writeln!(sink, "{line}") {
                write_err = Some(e);
            }
        },
        on_failure,
    )?;
    if let Some(e) = write_err {
        return Err(Error::io(&metrics_path, e));
    }
    sink.flush().map_err(|e| Error::io(&metrics_path, e))?;

    write_bytes(&dir.join("selected.model"), &out.selected.to_bytes())?;
    write_bytes(&dir.join("final.model"), &out.state.model().to_bytes())?;
    write_bytes(&dir.join("state.bin"), &out.state.to_bytes())?;

    let summary = RunSummary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        strategy: strategy.to_string(),
        k: cfg.strategy.effective_k(),
        lambda_ema: cfg.lambda_ema,
        seed,
        iterations: cfg.iterations,
        selected_iteration: out.selected.iteration,
        target_acc: out.target_eval.accuracy,
        per_class_acc: out.target_eval.per_class_accuracy,
        source_acc: out.source_eval.accuracy,
        target_mean_entropy: out.target_eval.mean_entropy,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    log::info!(
        "{} seed {seed}: target acc {:.4} (iteration {})",
        summary.strategy,
        summary.target_acc,
        summary.selected_iteration
    );
    Ok(summary)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn class_count(task: &Task, source: &Dataset, target: &Dataset) -> Result<usize> {
    if let Some(spec) = task.spec()? {
        return Ok(spec.classes);
    }
    let c = source.label_span().max(target.label_span());
    if c == 0 {
        return Err(Error::Data("no labels to infer the class count from".into()));
    }
    Ok(c)
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Every (strategy, seed) pair of `config`, at most `jobs` at a time.
/// Summaries come back in strategy-major, seed-minor order.
pub fn train_all(config: &RunConfig, jobs: usize) -> Result<Vec<RunSummary>> {
    config.validate()?;
    let data = config.task.load()?;
    let root = config.output_root();
    let pairs: Vec<(&RunStrategy, u64)> = config
        .strategies
        .iter()
        .flat_map(|s| config.seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let results: Vec<Result<RunSummary>> = pool(jobs)?.install(|| {
        pairs
            .par_iter()
            .map(|&(s, seed)| {
                train_one(&config.task, s, &config.train, seed, &data, &run_dir(&root, s, seed))
            })
            .collect()
    });
    let summaries = results.into_iter().collect::<Result<Vec<_>>>()?;
    write_aggregate(&root.join("aggregate.csv"), &aggregate(&summaries))?;
    Ok(summaries)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub strategy: String,
    pub runs: usize,
    pub target_acc: MeanStd,
    pub per_class_acc: MeanStd,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        MeanStd { mean, std }
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ± {:.2}", 100.0 * self.mean, 100.0 * self.std)
    }
}

/// Mean and standard deviation per strategy, in order of first appearance.
pub fn aggregate(summaries: &[RunSummary]) -> Vec<AggregateRow> {
    let mut order = Vec::new();
    let mut groups: BTreeMap<&str, Vec<&RunSummary>> = BTreeMap::new();
    for s in summaries {
        let entry = groups.entry(&s.strategy).or_default();
        if entry.is_empty() {
            order.push(s.strategy.as_str());
        }
        entry.push(s);
    }
    order
        .into_iter()
        .map(|name| {
            let runs = &groups[name];
            let acc: Vec<f64> = runs.iter().map(|r| r.target_acc).collect();
            let pc: Vec<f64> = runs.iter().map(|r| r.per_class_acc).collect();
            AggregateRow {
                strategy: name.to_string(),
                runs: runs.len(),
                target_acc: MeanStd::of(&acc),
                per_class_acc: MeanStd::of(&pc),
            }
        })
        .collect()
}

/// Reads every `summary.json` below `root`, sorted by path.
pub fn collect_summaries(root: &Path) -> Result<Vec<RunSummary>> {
    let mut paths = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().is_some_and(|n| n == "summary.json") {
                paths.push(path);
            }
        }
    }
    paths.sort();
    paths.iter().map(|p| read_json(p)).collect()
}

pub fn write_aggregate(path: &Path, rows: &[AggregateRow]) -> Result<()> {
    let mut out = String::from("strategy,runs,target_acc_mean,target_acc_std,per_class_acc_mean,per_class_acc_std\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.strategy, r.runs, r.target_acc.mean, r.target_acc.std, r.per_class_acc.mean, r.per_class_acc.std
        ));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn format_table(rows: &[AggregateRow]) -> String {
    let width = rows.iter().map(|r| r.strategy.len()).max().unwrap_or(8).max(8);
    let mut out = format!("{:width$}  runs  target acc (%)   per-class (%)\n", "strategy");
    for r in rows {
        out.push_str(&format!(
            "{:width$}  {:>4}  {:>14}  {:>14}\n",
            r.strategy, r.runs, r.target_acc, r.per_class_acc
        ));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub label: String,
    /// `None` for the reference rows.
    pub k: Option<f64>,
    pub acc: MeanStd,
    pub runs: usize,
}

/// Accuracy against the norm control factor for `base` (an `sdan` or
/// `ssdan` strategy), followed by `source_only` and `dann` reference rows.
pub fn sweep_k(
    config: &RunConfig,
    base: &RunStrategy,
    ks: &[f64],
    jobs: usize,
) -> Result<Vec<SweepRow>> {
    if !matches!(base.strategy.kind, ConditioningKind::Sdan | ConditioningKind::Ssdan)
        || base.source_only
    {
        return Err(Error::Config("sweep-k needs an sdan or ssdan strategy".into()));
    }
    if ks.is_empty() || ks.iter().any(|&k| !(k > 0.0 && k.is_finite())) {
        return Err(Error::Config("k values must be positive".into()));
    }
    let mut strategies: Vec<RunStrategy> = ks
        .iter()
        .map(|&k| {
            let mut s = base.clone();
            s.strategy.k = k;
            s
        })
        .collect();
    strategies.push(RunStrategy::source_only());
    strategies.push(RunStrategy::of(ConditioningStrategy::dann()));
    let mut cfg = config.clone();
    cfg.strategies = strategies.clone();
    let summaries = train_all(&cfg, jobs)?;
    let per = cfg.seeds.len();
    let rows: Vec<SweepRow> = strategies
        .iter()
        .zip(summaries.chunks(per))
        .enumerate()
        .map(|(i, (s, runs))| {
            let acc: Vec<f64> = runs.iter().map(|r| r.target_acc).collect();
            SweepRow {
                label: s.to_string(),
                k: (i < ks.len()).then(|| s.strategy.k),
                acc: MeanStd::of(&acc),
                runs: runs.len(),
            }
        })
        .collect();
    write_sweep(&cfg.output_root().join("sweep_k.csv"), &rows)?;
    Ok(rows)
}

pub fn write_sweep(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut out = String::from("label,k,mean_acc,std_acc,runs\n");
    for r in rows {
        let k = r.k.map(|k| k.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{k},{},{},{}\n", r.label, r.acc.mean, r.acc.std, r.runs));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// The `k` with the best mean accuracy among the sweep rows (first on ties).
pub fn best_k(rows: &[SweepRow]) -> Option<(f64, MeanStd)> {
    rows.iter()
        .filter_map(|r| r.k.map(|k| (k, r.acc)))
        .fold(None, |best: Option<(f64, MeanStd)>, (k, a)| match best {
            Some((_, b)) if b.mean >= a.mean => best,
            _ => Some((k, a)),
        })
}

pub fn read_metrics(run_dir: &Path) -> Result<Vec<MetricsRecord>> {
    let path = run_dir.join("metrics.jsonl");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// `iteration,feature_norm,branch_norm,ratio` rows from a run's metrics.
pub fn trace_norms(run_dir: &Path) -> Result<String> {
    let records = read_metrics(run_dir)?;
    if records.is_empty() {
        return Err(Error::Data(format!("{}: no metrics records", run_dir.display())));
    }
    let mut out = String::from("iteration,feature_norm,branch_norm,ratio\n");
    for r in &records {
        let (Some(b), Some(ratio)) = (r.branch_norm, r.norm_ratio) else {
            return Err(Error::Data(format!(
                "{}: iteration {} has no prediction-branch norm (strategy without one?)",
                run_dir.display(),
                r.iteration
            )));
        };
        out.push_str(&format!("{},{},{b},{ratio}\n", r.iteration, r.feature_norm));
    }
    Ok(out)
}

pub fn read_run_record(run_dir: &Path) -> Result<RunRecord> {
    read_json(&run_dir.join("config.json"))
}

/// Loads `selected`, `final` or an explicit checkpoint path for a run.
pub fn load_model(run_dir: &Path, checkpoint: &str) -> Result<Model> {
    let path = match checkpoint {
        "selected" | "final" => run_dir.join(format!("{checkpoint}.model")),
        other => PathBuf::from(other),
    };
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Model::from_bytes(&bytes)
}

fn check_model(model: &Model, record: &RunRecord, data: &(Dataset, Dataset)) -> Result<()> {
    let dim = data.0.input_dim();
    let classes = class_count(&record.task, &data.0, &data.1)?;
    let expected_d = record.train.network.feature_dim;
    if model.g.input_size() != dim || model.feature_dim() != expected_d || model.classes() != classes {
        return Err(Error::Config(format!(
            "checkpoint shape (in {}, d {}, c {}) does not match the run config (in {dim}, d {expected_d}, c {classes})",
            model.g.input_size(),
            model.feature_dim(),
            model.classes()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub iteration: usize,
    pub source: Evaluation,
    pub target: Evaluation,
}

pub fn eval_run(run_dir: &Path, checkpoint: &str) -> Result<EvalReport> {
    let record = read_run_record(run_dir)?;
    let model = load_model(run_dir, checkpoint)?;
    let data = record.task.load()?;
    check_model(&model, &record, &data)?;
    Ok(EvalReport {
        iteration: model.iteration,
        source: evaluate(&model, &data.0)?,
        target: evaluate(&model, &data.1)?,
    })
}

/// `f0..f{d-1},label,domain,pred` for every source then target sample.
/// Unknown labels are written as -1.
pub fn export_features(run_dir: &Path, checkpoint: &str) -> Result<String> {
    let record = read_run_record(run_dir)?;
    let model = load_model(run_dir, checkpoint)?;
    let data = record.task.load()?;
    check_model(&model, &record, &data)?;
    let d = model.feature_dim();
    let mut out: String = (0..d).map(|j| format!("f{j},")).collect();
    out.push_str("label,domain,pred\n");
    for (set, name) in [(&data.0, "source"), (&data.1, "target")] {
        let feats = model.features(set.features())?;
        let pred = model.f.predict(&feats)?.argmax_rows();
        write_feature_rows(&mut out, &feats, set.raw_labels(), name, &pred);
    }
    Ok(out)
}

fn write_feature_rows(out: &mut String, feats: &Matrix, labels: &[Option<usize>], domain: &str, pred: &[usize]) {
    for i in 0..feats.rows() {
        for v in feats.row(i) {
            out.push_str(&format!("{v},"));
        }
        let label = labels[i].map_or(-1, |l| l as i64);
        out.push_str(&format!("{label},{domain},{}\n", pred[i]));
    }
}

/// Continues a saved training state for a run directory up to
/// `iterations`, returning the final state.
pub fn resume(run_dir: &Path, iterations: usize) -> Result<TrainState> {
    let record = read_run_record(run_dir)?;
    let path = run_dir.join("state.bin");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let state = TrainState::from_bytes(&bytes)?;
    let mut cfg = record.train.clone();
    cfg.iterations = iterations;
    let data = record.task.load()?;
    let trainer = Trainer::new(&cfg, &data.0, &data.1)?;
    Ok(trainer.run_from(state, |_| {})?.state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strategy_names_round_trip() {
        for text in ["dann", "concat_fp", "multilinear", "sdan:3", "ssdan:0.5", "sdan+e:3", "source_only"] {
            let s: RunStrategy = text.parse().unwrap();
            assert_eq!(s.to_string(), text);
        }
        assert_eq!("sdan".parse::<RunStrategy>().unwrap().to_string(), "sdan:1");
        for bad in ["", "sdan:x", "dann:2", "sdan:-1", "magic", "source_only+e"] {
            assert!(bad.parse::<RunStrategy>().is_err(), "{bad}");
        }
        assert_eq!("sdan+e:3".parse::<RunStrategy>().unwrap().slug(), "sdan+e-k3");
    }

    #[test]
    fn source_only_zeroes_adversarial_weight() {
        let cfg = RunStrategy::source_only().apply(&TrainConfig::default());
        assert_eq!(cfg.lambda.at(1.0), 0.0);
        assert_eq!(cfg.strategy.kind, ConditioningKind::Dann);
    }

    #[test]
    fn mean_std_examples() {
        let m = MeanStd::of(&[0.5]);
        assert_eq!((m.mean, m.std), (0.5, 0.0));
        let m = MeanStd::of(&[1.0, 2.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert!((m.std - 1.0).abs() < 1e-15);
    }

    #[test]
    fn aggregate_groups_in_first_seen_order() {
        let mk = |strategy: &str, seed, acc| RunSummary {
            schema_version: SUMMARY_SCHEMA_VERSION,
            strategy: strategy.into(),
            k: 1.0,
            lambda_ema: 0.5,
            seed,
            iterations: 10,
            selected_iteration: 10,
            target_acc: acc,
            per_class_acc: acc,
            source_acc: 1.0,
            target_mean_entropy: 0.1,
        };
        let rows = aggregate(&[mk("sdan:1", 0, 0.6), mk("dann", 0, 0.4), mk("sdan:1", 1, 0.8)]);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].strategy, "sdan:1");
        assert_eq!(rows[0].runs, 2);
        assert!((rows[0].target_acc.mean - 0.7).abs() < 1e-15);
        assert_eq!(rows[1].target_acc.std, 0.0);
    }

    #[test]
    fn best_k_prefers_first_on_ties() {
        let row = |k: Option<f64>, mean| SweepRow {
            label: String::new(),
            k,
            acc: MeanStd { mean, std: 0.0 },
            runs: 1,
        };
        let rows = [row(Some(1.0), 0.5), row(Some(2.0), 0.7), row(Some(4.0), 0.7), row(None, 0.9)];
        assert_eq!(best_k(&rows).unwrap().0, 2.0);
    }

    #[test]
    fn task_json_forms() {
        let t: Task = serde_json::from_str(r#"{"kind":"preset","name":"swap3","seed":4}"#).unwrap();
        assert_eq!(t.spec().unwrap().unwrap(), DomainShiftSpec::swap3(4));
        let bad: Task = serde_json::from_str(r#"{"kind":"preset","name":"nope"}"#).unwrap();
        assert!(matches!(bad.spec(), Err(Error::Config(_))));
        let cfg: RunConfig = serde_json::from_str(r#"{"strategies":["dann","sdan:4"],"seeds":[1,2]}"#).unwrap();
        assert_eq!(cfg.strategies[1].strategy.k, 4.0);
        assert_eq!(cfg.train, TrainConfig::default());
    }
}
