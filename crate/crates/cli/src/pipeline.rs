//! The commands behind each subcommand and the on-disk layout they share.
//!
//! ```text
//! <out>/data/{manifest.json, train.jsonl, val.jsonl, test_<K>.jsonl}
//! <out>/kernel/{codebook.json, kernel.bin}
//! <out>/attention/attention.json
//! <out>/runs/<method>/seed<i>/{config.json, record.json, metrics.csv, regions.csv, checkpoint.bin, attention.json}
//! <out>/{results.json, regions.csv}
//! ```
//!
//! Every artifact records the experiment's config hash and the hashes of
//! the upstream artifacts it consumed; loading an artifact whose inputs
//! hash differs from the current config is an error.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use griddpp::artifact::{hash_bytes, hash_json, read_json, read_tensors, write_atomic, write_json, write_tensors};
use griddpp::dppa::{fit_attention, AttentionWeights, KernelMatrix};
use griddpp::gridcode::{build_codebook, GridCodebook};
use griddpp::nn::{AdamConfig, ParamSet};
use griddpp::rng::derive_seed;
use griddpp::tasks::{self, DatasetSplit, Problem, Regime, RejectionBudget};
use griddpp::trainer::{grid_kernel, Method, RunRecord, Session, Task, TestRegime, TrainConfig, TrainInputs};
use griddpp::{Error, Result};

use crate::config::{Condition, ExperimentConfig};
use crate::report::{aggregate, write_regions_csv, RunSummary};

const VERSION: &str = env!("CARGO_PKG_VERSION");

fn missing(path: &Path, hint: &str) -> Error {
    Error::Artifact(format!("missing prerequisite {} ({hint})", path.display()))
}

fn check_hash(what: &str, expected: &str, found: &str) -> Result<()> {
    if expected != found {
        return Err(Error::HashMismatch { what: what.into(), expected: expected.into(), found: found.into() });
    }
    Ok(())
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(hash_bytes(&fs::read(path).map_err(|e| Error::Artifact(format!("{}: {e}", path.display())))?))
}

/// File-system safe form of a method label.
pub fn slug(label: &str) -> String {
    label.chars().map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' }).collect()
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }
    pub fn data(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn manifest(&self) -> PathBuf {
        self.data().join("manifest.json")
    }
    pub fn codebook(&self) -> PathBuf {
        self.root.join("kernel").join("codebook.json")
    }
    pub fn kernel(&self) -> PathBuf {
        self.root.join("kernel").join("kernel.bin")
    }
    pub fn attention(&self) -> PathBuf {
        self.root.join("attention").join("attention.json")
    }
    pub fn run(&self, label: &str, seed_index: usize) -> PathBuf {
        self.root.join("runs").join(slug(label)).join(format!("seed{seed_index}"))
    }
    pub fn results(&self) -> PathBuf {
        self.root.join("results.json")
    }
    pub fn regions(&self) -> PathBuf {
        self.root.join("regions.csv")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataManifest {
    pub format: String,
    pub config_hash: String,
    pub data_hash: String,
    pub task: Task,
    pub m: i64,
    pub seed: u64,
    pub regime: TestRegime,
    pub regions: Vec<u32>,
    pub counts: BTreeMap<String, usize>,
    /// SHA-256 of every dataset file, by file name.
    pub files: BTreeMap<String, String>,
    pub acceptance_rates: Option<BTreeMap<String, f64>>,
}

fn test_file(k: u32) -> String {
    format!("test_{k}.jsonl")
}

/// Generates the datasets; identical configs yield identical files.
pub fn cmd_gen(cfg: &ExperimentConfig, layout: &Layout) -> Result<DataManifest> {
    let d = &cfg.data;
    let (m, regions) = (cfg.m(), d.regions.clone().expect("normalized"));
    let (n_train, n_val, n_test) = (d.n_train.unwrap(), d.n_val.unwrap(), d.n_per_region.unwrap());
    let seed = derive_seed(cfg.root_seed, "data");
    let coverage = cfg.grid.coverage_extent;
    let (split, rates) = match d.task {
        Task::Analogy => {
            let regime = match cfg.regime() {
                TestRegime::Translation => Regime::Translation,
                TestRegime::Scaling => Regime::Scaling,
                TestRegime::Regions => {
                    return Err(Error::InvalidConfig("analogies use the translation or scaling regime".into()))
                }
            };
            let mut split = tasks::gen_analogy_training(m, n_train, n_val, seed)?;
            split.tests = tasks::gen_analogy_tests(m, &regions, n_test, regime, coverage, seed)?;
            (split, None)
        }
        Task::Arithmetic => {
            let budget = RejectionBudget { max_draws: d.rejection_budget.unwrap() };
            let (split, rates) = tasks::gen_arithmetic(m, n_train, n_val, n_test, &regions, coverage, budget, seed)?;
            (split, Some(rates.per_split))
        }
    };
    let dir = layout.data();
    let mut files = BTreeMap::new();
    let mut counts = BTreeMap::new();
    let mut write = |name: String, problems: &[Problem]| -> Result<()> {
        let path = dir.join(&name);
        tasks::write_jsonl(&path, problems)?;
        files.insert(name.clone(), file_hash(&path)?);
        counts.insert(name, problems.len());
        Ok(())
    };
    write("train.jsonl".into(), &split.train)?;
    write("val.jsonl".into(), &split.validation)?;
    for (region, problems) in &split.tests {
        write(test_file(region.index().expect("test region")), problems)?;
    }
    let manifest = DataManifest {
        format: "griddpp.dataset".into(),
        config_hash: cfg.hash(),
        data_hash: cfg.data_hash(),
        task: d.task,
        m,
        seed,
        regime: cfg.regime(),
        regions,
        counts,
        files,
        acceptance_rates: rates,
    };
    write_json(&layout.manifest(), &manifest)?;
    Ok(manifest)
}

pub fn load_data(cfg: &ExperimentConfig, layout: &Layout) -> Result<(DatasetSplit, DataManifest)> {
    let path = layout.manifest();
    if !path.exists() {
        return Err(missing(&path, "run gen-tasks first"));
    }
    let manifest: DataManifest = read_json(&path)?;
    check_hash("dataset inputs", &cfg.data_hash(), &manifest.data_hash)?;
    let dir = layout.data();
    let read = |name: &str| -> Result<Vec<Problem>> {
        let p = dir.join(name);
        let expected =
            manifest.files.get(name).ok_or_else(|| Error::Artifact(format!("manifest does not list {name}")))?;
        check_hash(&format!("dataset file {name}"), expected, &file_hash(&p)?)?;
        tasks::read_jsonl(&p)
    };
    let train = read("train.jsonl")?;
    let validation = read("val.jsonl")?;
    let mut tests = Vec::new();
    for &k in &manifest.regions {
        let problems = read(&test_file(k))?;
        let region = problems.first().map(|p| p.region()).ok_or_else(|| Error::Empty(format!("test region {k}")))?;
        tests.push((region, problems));
    }
    Ok((DatasetSplit { train, validation, tests, seed: manifest.seed }, manifest))
}

/// Builds the codebook and the training-region kernel.
pub fn cmd_kernel(cfg: &ExperimentConfig, layout: &Layout) -> Result<KernelMatrix> {
    let codebook = build_codebook(&cfg.grid)?;
    let kernel = grid_kernel(&codebook, cfg.m(), &cfg.kernel)?;
    write_json(&layout.codebook(), &codebook.to_document())?;
    let header = json!({
        "format": "griddpp.kernel",
        "config_hash": cfg.hash(),
        "kernel_hash": cfg.kernel_hash(),
        "codebook_hash": codebook.content_hash(),
        "block_size": kernel.block_size(),
        "jitter": kernel.jitter(),
    });
    write_tensors(&layout.kernel(), header, &[("kernel", kernel.entries())])?;
    Ok(kernel)
}

pub fn load_codebook(cfg: &ExperimentConfig, layout: &Layout) -> Result<GridCodebook> {
    let path = layout.codebook();
    if !path.exists() {
        return Err(missing(&path, "run build-kernel first"));
    }
    let codebook = GridCodebook::from_document(&read_json(&path)?)?;
    let expected = build_codebook(&cfg.grid)?.content_hash();
    check_hash("codebook", &expected, &codebook.content_hash())?;
    Ok(codebook)
}

pub fn load_kernel(cfg: &ExperimentConfig, layout: &Layout) -> Result<KernelMatrix> {
    let path = layout.kernel();
    if !path.exists() {
        return Err(missing(&path, "run build-kernel first"));
    }
    let file = read_tensors(&path)?;
    let found = file.header["kernel_hash"].as_str().unwrap_or_default();
    check_hash("kernel inputs", &cfg.kernel_hash(), found)?;
    let entries =
        file.get("kernel").ok_or_else(|| Error::Artifact("kernel file lacks the kernel matrix".into()))?.clone();
    let block =
        file.header["block_size"].as_u64().ok_or_else(|| Error::Artifact("kernel header lacks block_size".into()))?;
    let jitter = file.header["jitter"].as_f64().ok_or_else(|| Error::Artifact("kernel header lacks jitter".into()))?;
    KernelMatrix::from_entries(entries, block as usize, jitter)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionFile {
    pub format: String,
    pub config_hash: String,
    pub attention_hash: String,
    pub kernel_file_hash: String,
    pub steps: usize,
    pub attention: AttentionWeights,
    /// `F̂` before the first update and after each one.
    pub trace: Vec<f64>,
}

/// Fits the frequency attention on the stored kernel.
pub fn cmd_fit_dpp(cfg: &ExperimentConfig, layout: &Layout) -> Result<AttentionFile> {
    let kernel = load_kernel(cfg, layout)?;
    let t = &cfg.train;
    let n_train = cfg.data.n_train.expect("normalized");
    let steps = t.dpp_epochs.unwrap() * n_train.div_ceil(t.batch_size.unwrap());
    let fit = fit_attention(&kernel, steps, &AdamConfig::new(t.dpp_learning_rate.unwrap()))?;
    let file = AttentionFile {
        format: "griddpp.attention".into(),
        config_hash: cfg.hash(),
        attention_hash: cfg.attention_hash(),
        kernel_file_hash: file_hash(&layout.kernel())?,
        steps,
        attention: fit.attention,
        trace: fit.trace,
    };
    write_json(&layout.attention(), &file)?;
    Ok(file)
}

pub fn load_attention(cfg: &ExperimentConfig, layout: &Layout) -> Result<AttentionFile> {
    let path = layout.attention();
    if !path.exists() {
        return Err(missing(&path, "run fit-dpp first"));
    }
    let file: AttentionFile = read_json(&path)?;
    check_hash("attention inputs", &cfg.attention_hash(), &file.attention_hash)?;
    check_hash("kernel file", &file.kernel_file_hash, &file_hash(&layout.kernel())?)?;
    Ok(file)
}

/// Which runs make up each condition's row in the results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub label: String,
    pub task: Task,
    pub regime: TestRegime,
    /// Run directories relative to the experiment root, one per seed.
    pub runs: Vec<String>,
    /// For sweeps: validation metric of each candidate weight on seed 0.
    pub sweep: Option<Vec<(f64, f64)>>,
    pub chosen_lambda: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Results {
    pub config_hash: String,
    pub conditions: Vec<ConditionResult>,
}

struct Shared<'a> {
    cfg: &'a ExperimentConfig,
    layout: &'a Layout,
    data: DatasetSplit,
    codebook: GridCodebook,
    kernel: Option<KernelMatrix>,
    attention: Option<AttentionFile>,
    data_files: BTreeMap<String, String>,
    verbose: bool,
}

/// Options shared by the commands that train or evaluate.
#[derive(Clone, Copy, Debug)]
pub struct RunOptions {
    pub jobs: usize,
    pub verbose: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { jobs: 1, verbose: false }
    }
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("cannot start {jobs} workers: {e}")))
}

impl Shared<'_> {
    /// Hashes of exactly the upstream artifacts `method` consumes.
    fn upstream(&self, method: &Method) -> serde_json::Value {
        json!({
            "data_files": self.data_files,
            "codebook_hash": self.codebook.content_hash(),
            "kernel_hash": uses_kernel(method).then(|| self.cfg.kernel_hash()),
            "attention_hash": method.needs_attention().then(|| self.attention.as_ref().map(|a| hash_json(&a.attention))),
        })
    }

    /// Trains one seed of one method, reusing a finished run with the same
    /// inputs. Returns the run directory relative to the experiment root.
    fn run(&self, method: Method, seed_index: usize) -> Result<(String, RunRecord)> {
        let seed = derive_seed(self.cfg.root_seed, &format!("run{seed_index}"));
        let tc = self.cfg.train_config(method, seed);
        let dir = self.layout.run(&method.label(), seed_index);
        let rel = dir.strip_prefix(&self.layout.root).expect("inside root").to_string_lossy().into_owned();
        let upstream = self.upstream(&method);
        let run_hash = hash_json(&(&tc, &upstream, VERSION));
        let record_path = dir.join("record.json");
        if record_path.exists() {
            let existing: serde_json::Value = read_json(&dir.join("config.json"))?;
            if existing["run_hash"] == run_hash.as_str() {
                return Ok((rel, read_json(&record_path)?));
            }
        }
        let inputs = TrainInputs {
            data: &self.data,
            codebook: &self.codebook,
            kernel_config: &self.cfg.kernel,
            kernel: self.kernel.as_ref(),
            attention: self.attention.as_ref().map(|a| &a.attention),
        };
        let session = Session::prepare(&tc, inputs)?;
        let label = method.label();
        let verbose = self.verbose;
        let trained = session.train_with(|rows| {
            if verbose {
                eprintln!(
                    "[{label} seed{seed_index}] epoch {}: train loss {:.4} metric {:.4} | val loss {:.4} metric {:.4}",
                    rows[0].epoch, rows[0].loss, rows[0].metric, rows[1].loss, rows[1].metric
                );
            }
        })?;
        let mut record = trained.record;
        record.checkpoint = Some("checkpoint.bin".into());
        let header = json!({
            "format": "griddpp.checkpoint",
            "config_hash": self.cfg.hash(),
            "run_hash": run_hash,
            "train_config": tc,
            "upstream": upstream,
        });
        trained.params.save(&dir.join("checkpoint.bin"), header)?;
        if let Some(a) = session.attention() {
            write_json(&dir.join("attention.json"), a)?;
        }
        write_metrics_csv(&dir.join("metrics.csv"), &record)?;
        let summary = RunSummary { label: label.clone(), task: tc.task, regime: tc.regime, record: record.clone() };
        write_regions_csv(&dir.join("regions.csv"), &aggregate(std::slice::from_ref(&summary)))?;
        write_json(&dir.join("record.json"), &record)?;
        // Written last: its run hash marks the run as complete.
        write_json(
            &dir.join("config.json"),
            &json!({
                "config_hash": self.cfg.hash(),
                "run_hash": run_hash,
                "experiment": self.cfg,
                "train_config": tc,
                "upstream": upstream,
            }),
        )?;
        Ok((rel, record))
    }
}

fn write_metrics_csv(path: &Path, record: &RunRecord) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let metric = match record.metric {
        griddpp::trainer::Metric::Accuracy => "accuracy",
        griddpp::trainer::Metric::Mse => "mse",
    };
    w.write_record(["epoch", "split", "loss", metric]).map_err(csv_err)?;
    for e in &record.epochs {
        w.write_record([e.epoch.to_string(), e.split.clone(), e.loss.to_string(), e.metric.to_string()])
            .map_err(csv_err)?;
    }
    write_atomic(path, &w.into_inner().map_err(|e| Error::Artifact(e.to_string()))?)
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Artifact(format!("csv: {e}"))
}

/// Methods whose penalty reads the stored grid-code kernel.
fn uses_kernel(method: &Method) -> bool {
    matches!(method, Method::OnestepWhole { .. } | Method::OnestepWithin { .. })
}

fn load_shared<'a>(cfg: &'a ExperimentConfig, layout: &'a Layout, verbose: bool) -> Result<Shared<'a>> {
    let (data, manifest) = load_data(cfg, layout)?;
    let codebook = load_codebook(cfg, layout)?;
    let needs_kernel = cfg.conditions.iter().any(|c| match c {
        Condition::Method(m) => uses_kernel(m),
        Condition::Sweep { family, .. } => uses_kernel(&family.method(0.0)),
    });
    let kernel = if needs_kernel { Some(load_kernel(cfg, layout)?) } else { None };
    let attention =
        if cfg.conditions.iter().any(Condition::needs_attention) { Some(load_attention(cfg, layout)?) } else { None };
    Ok(Shared { cfg, layout, data, codebook, kernel, attention, data_files: manifest.files, verbose })
}

struct SweepChoice {
    method: Method,
    lambda: f64,
    /// `(λ, seed-0 validation metric)` in sweep order.
    trials: Vec<(f64, f64)>,
}

/// Trains every condition over every seed and writes the results table.
pub fn cmd_train(cfg: &ExperimentConfig, layout: &Layout, opts: RunOptions) -> Result<Results> {
    let shared = load_shared(cfg, layout, opts.verbose)?;
    let pool = pool(opts.jobs)?;
    let seeds = cfg.seeds();

    // Sweeps are settled on seed 0 before the remaining seeds run.
    let sweep_units: Vec<(usize, f64)> = cfg
        .conditions
        .iter()
        .enumerate()
        .filter_map(|(i, c)| match c {
            Condition::Sweep { lambdas, .. } => Some(lambdas.iter().map(move |&l| (i, l))),
            _ => None,
        })
        .flatten()
        .collect();
    let sweep_runs: Vec<(String, RunRecord)> = pool.install(|| {
        sweep_units
            .par_iter()
            .map(|&(i, l)| match &cfg.conditions[i] {
                Condition::Sweep { family, .. } => shared.run(family.method(l), 0),
                _ => unreachable!("sweep units come from sweeps"),
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut chosen: BTreeMap<usize, SweepChoice> = BTreeMap::new();
    for (&(i, l), (_, rec)) in sweep_units.iter().zip(&sweep_runs) {
        let Condition::Sweep { family, .. } = &cfg.conditions[i] else { unreachable!() };
        let val = rec.region("val", "all").map_or(f64::NAN, |r| r.value);
        let entry = chosen.entry(i).or_insert(SweepChoice { method: family.method(l), lambda: l, trials: Vec::new() });
        // Strict improvement: ties keep the earlier weight.
        if !entry.trials.is_empty() && entry.trials.iter().all(|&(_, v)| rec.metric.improves(val, v)) {
            entry.method = family.method(l);
            entry.lambda = l;
        }
        entry.trials.push((l, val));
    }

    let units: Vec<(usize, Method, usize)> = cfg
        .conditions
        .iter()
        .enumerate()
        .flat_map(|(i, c)| {
            let method = match c {
                Condition::Method(m) => *m,
                Condition::Sweep { .. } => chosen[&i].method,
            };
            (0..seeds).map(move |s| (i, method, s))
        })
        .collect();
    let runs: Vec<(String, RunRecord)> =
        pool.install(|| units.par_iter().map(|&(_, method, s)| shared.run(method, s)).collect::<Result<Vec<_>>>())?;

    let mut conditions = Vec::new();
    let mut summaries = Vec::new();
    for (i, c) in cfg.conditions.iter().enumerate() {
        let label = c.label();
        let mine: Vec<&(String, RunRecord)> =
            units.iter().zip(&runs).filter(|(u, _)| u.0 == i).map(|(_, r)| r).collect();
        for (_, rec) in &mine {
            summaries.push(RunSummary {
                label: label.clone(),
                task: cfg.data.task,
                regime: cfg.regime(),
                record: rec.clone(),
            });
        }
        conditions.push(ConditionResult {
            label,
            task: cfg.data.task,
            regime: cfg.regime(),
            runs: mine.iter().map(|(d, _)| d.clone()).collect(),
            sweep: chosen.get(&i).map(|c| c.trials.clone()),
            chosen_lambda: chosen.get(&i).map(|c| c.lambda),
        });
    }
    let results = Results { config_hash: cfg.hash(), conditions };
    write_json(&layout.results(), &results)?;
    write_regions_csv(&layout.regions(), &aggregate(&summaries))?;
    Ok(results)
}

/// Evaluates a stored checkpoint against the current config and datasets,
/// writing `<out>/eval/regions.csv`.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    layout: &Layout,
    checkpoint: &Path,
) -> Result<Vec<griddpp::trainer::RegionMetric>> {
    let header = griddpp::artifact::read_tensors(checkpoint)?.header;
    let stored: TrainConfig = serde_json::from_value(header["train_config"].clone())
        .map_err(|e| Error::Artifact(format!("checkpoint header lacks a train config: {e}")))?;
    let (data, _) = load_data(cfg, layout)?;
    let codebook = load_codebook(cfg, layout)?;
    let attention = if stored.method.needs_attention() { Some(load_attention(cfg, layout)?) } else { None };
    let tc = cfg.train_config(stored.method, stored.seed);
    let inputs = TrainInputs {
        data: &data,
        codebook: &codebook,
        kernel_config: &cfg.kernel,
        kernel: None,
        attention: attention.as_ref().map(|a| &a.attention),
    };
    let session = Session::prepare(&tc, inputs)?;
    let mut params: ParamSet = session.initial_params().clone();
    params.restore(checkpoint)?;
    let regions = session.evaluate(&params)?;
    let record = RunRecord {
        config: tc.clone(),
        method: tc.method.label(),
        metric: session.metric(),
        epochs: Vec::new(),
        step_losses: Vec::new(),
        best_epoch: 0,
        regions: regions.clone(),
        attention: None,
        architecture_hash: params.architecture_hash(),
        checkpoint: Some(checkpoint.display().to_string()),
        wall_clock_secs: 0.0,
    };
    let summary = RunSummary { label: tc.method.label(), task: tc.task, regime: tc.regime, record };
    write_regions_csv(&layout.root.join("eval").join("regions.csv"), &aggregate(&[summary]))?;
    Ok(regions)
}

/// Runs generation, kernel building, attention fitting (when any
/// condition needs it) and training in sequence.
pub fn run_all(cfg: &ExperimentConfig, layout: &Layout, opts: RunOptions) -> Result<Results> {
    cmd_gen(cfg, layout)?;
    cmd_kernel(cfg, layout)?;
    if cfg.conditions.iter().any(Condition::needs_attention) {
        cmd_fit_dpp(cfg, layout)?;
    }
    cmd_train(cfg, layout, opts)
}

/// Like [`run_all`] but keeps datasets, kernel and attention whose recorded
/// inputs already match the config, so finished runs are reused too.
pub fn run_all_cached(cfg: &ExperimentConfig, layout: &Layout, opts: RunOptions) -> Result<Results> {
    if load_data(cfg, layout).is_err() {
        cmd_gen(cfg, layout)?;
    }
    if load_codebook(cfg, layout).is_err() || load_kernel(cfg, layout).is_err() {
        cmd_kernel(cfg, layout)?;
    }
    if cfg.conditions.iter().any(Condition::needs_attention) && load_attention(cfg, layout).is_err() {
        cmd_fit_dpp(cfg, layout)?;
    }
    cmd_train(cfg, layout, opts)
}
