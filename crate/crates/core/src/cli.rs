//! Command-line harness: experiment config, pipeline stages and the
//! hash-chained manifests that tie their artifacts together.
//!
//! Every stage reads and writes inside one output directory:
//!
//! | stage   | writes                                                        |
//! |---------|---------------------------------------------------------------|
//! | synth   | `corpus.txt`, `corpus.manifest.json`                          |
//! | prep    | `train.txt`, `valid.txt`, `test.txt`, `forget.tsv`, `prep.manifest.json` |
//! | train   | `rec.ckpt` (+ `.json` sidecar), `train_report.json`, `rec.manifest.json` |
//! | unlearn | `<mode>.ckpt` (+ sidecar), `alpha_<mode>.csv`, `difficulty_<mode>.csv`, `loss_<mode>.csv`, `<mode>.manifest.json` |
//! | eval    | `metrics_<stem>.csv`, `metrics_<stem>.json`, `metrics_<stem>.manifest.json` |
//! | ablate  | `ablation.csv`, `ablation.manifest.json`                      |
//!
//! Wall-clock timings go to `timings.json` so that manifests stay identical
//! across reruns.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{self, Corpus, DataError, InputFormat, UnlearnSample};
use crate::engine::{self, EngineError, Mode, UnlearnContext, UnlearnRunConfig};
use crate::eval::{self, MetricsReport, RankOptions};
use crate::model::{self, HyperParams, ModelError, Params};
use crate::synth::{self, SynthError, SynthSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DEPENDENCY: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

const CORPUS_FILE: &str = "corpus.txt";
const TRAIN_FILE: &str = "train.txt";
const VALID_FILE: &str = "valid.txt";
const TEST_FILE: &str = "test.txt";
const FORGET_FILE: &str = "forget.tsv";
const REC_CKPT: &str = "rec.ckpt";
const PREP_MANIFEST: &str = "prep.manifest.json";
const TIMINGS_FILE: &str = "timings.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("missing dependency: {0}")]
    Dependency(String),
    #[error("stale artifact: {0}")]
    Stale(String),
    #[error("{0}")]
    Divergence(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Engine(EngineError),
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Divergence { .. } => CliError::Divergence(e.to_string()),
            EngineError::Config(m) => CliError::Usage(m),
            other => CliError::Engine(other),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Dependency(_) | CliError::Stale(_) => EXIT_DEPENDENCY,
            CliError::Divergence(_) => EXIT_DIVERGENCE,
            CliError::Model(ModelError::Config(_)) => EXIT_USAGE,
            _ => EXIT_FAILURE,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Config

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileFormat {
    UserItemTime,
    SessionLines,
}

impl From<FileFormat> for InputFormat {
    fn from(f: FileFormat) -> Self {
        match f {
            FileFormat::UserItemTime => InputFormat::UserItemTime,
            FileFormat::SessionLines => InputFormat::SessionLines,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Synthetic(SynthSpec),
    File { path: PathBuf, format: FileFormat },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub beta: f64,
    /// Cut-offs for Recall@k and NDCG@k.
    pub ks: Vec<usize>,
    pub exclude_seen: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            beta: 3.0,
            ks: vec![10, 20],
            exclude_seen: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub modes: Vec<Mode>,
    /// Unlearn batch sizes to sweep; empty keeps the configured one.
    pub batch_sizes: Vec<usize>,
    /// Unlearn ratios to sweep; empty keeps the configured one.
    pub ratios: Vec<f64>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            modes: Mode::ALL.to_vec(),
            batch_sizes: Vec::new(),
            ratios: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    /// k-core threshold for items and sessions.
    pub min_count: usize,
    /// Share of eligible positions to forget; 0 gives an empty forget set.
    pub unlearn_ratio: f64,
    pub max_per_session: usize,
    /// When set, overrides every seed below.
    pub seed: Option<u64>,
    pub model: HyperParams,
    pub train_epochs: usize,
    pub unlearn: UnlearnRunConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSpec::Synthetic(SynthSpec::default()),
            min_count: 5,
            unlearn_ratio: 0.1,
            max_per_session: 1,
            seed: None,
            model: HyperParams::default(),
            train_epochs: 200,
            unlearn: UnlearnRunConfig::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Pushes a global seed into every component.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
        if let DatasetSpec::Synthetic(spec) = &mut self.dataset {
            spec.seed = seed;
        }
        self.model.seed = seed;
        self.unlearn.seed = seed;
        self.unlearn.curriculum.seed = seed;
    }

    /// Seed used for the split and the forget-set draw.
    pub fn data_seed(&self) -> u64 {
        self.seed.unwrap_or(self.model.seed)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if let DatasetSpec::Synthetic(spec) = &self.dataset {
            spec.validate()?;
        }
        if self.min_count == 0 {
            return Err(CliError::Usage("min_count must be >= 1".into()));
        }
        if !(0.0..=0.5).contains(&self.unlearn_ratio) {
            return Err(CliError::Usage(format!("unlearn_ratio must lie in [0, 0.5], got {}", self.unlearn_ratio)));
        }
        if self.max_per_session == 0 {
            return Err(CliError::Usage("max_per_session must be >= 1".into()));
        }
        self.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.unlearn.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if !(self.eval.beta.is_finite() && self.eval.beta > 0.0) {
            return Err(CliError::Usage("eval.beta must be > 0".into()));
        }
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(CliError::Usage("eval.ks must be a non-empty list of positive cut-offs".into()));
        }
        if self.ablate.modes.is_empty() {
            return Err(CliError::Usage("ablate.modes must not be empty".into()));
        }
        if self.ablate.batch_sizes.contains(&0) {
            return Err(CliError::Usage("ablate.batch_sizes must be positive".into()));
        }
        if self.ablate.ratios.iter().any(|r| !(*r > 0.0 && *r <= 0.5)) {
            return Err(CliError::Usage("ablate.ratios must lie in (0, 0.5]".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serialises").as_bytes())
    }
}

// ---------------------------------------------------------------------------
// Manifests

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::Dependency(format!("{} does not exist", path.display()))
        } else {
            io_err(path)(e)
        }
    })?;
    Ok(sha256_hex(&bytes))
}

/// Provenance record for one stage. `upstream` maps manifest file names to
/// their digests, forming the hash chain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub stage: String,
    pub config_digest: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub upstream: BTreeMap<String, String>,
}

impl Manifest {
    fn new(stage: &str, cfg: &ExperimentConfig) -> Self {
        Manifest {
            stage: stage.to_string(),
            config_digest: cfg.digest(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            upstream: BTreeMap::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                CliError::Dependency(format!("{} not found; run the upstream stage first", path.display()))
            } else {
                io_err(path)(e)
            }
        })?;
        serde_json::from_str(&text).map_err(|e| CliError::Stale(format!("{}: unreadable manifest ({e})", path.display())))
    }

    fn write(&self, path: &Path) -> Result<(), CliError> {
        let json = serde_json::to_string_pretty(self).expect("manifest serialises") + "\n";
        fs::write(path, json).map_err(io_err(path))
    }

    fn record_output(&mut self, dir: &Path, name: &str) -> Result<(), CliError> {
        self.outputs.insert(name.to_string(), file_digest(&dir.join(name))?);
        Ok(())
    }

    fn record_input(&mut self, dir: &Path, name: &str) -> Result<(), CliError> {
        self.inputs.insert(name.to_string(), file_digest(&dir.join(name))?);
        Ok(())
    }

    fn record_upstream(&mut self, dir: &Path, manifest: &str) -> Result<(), CliError> {
        self.upstream.insert(manifest.to_string(), file_digest(&dir.join(manifest))?);
        Ok(())
    }
}

/// Checks that every output recorded by `manifest` still matches the file on
/// disk and that every upstream manifest is unchanged, recursively.
pub fn verify_chain(dir: &Path, manifest: &str) -> Result<Manifest, CliError> {
    let m = Manifest::load(&dir.join(manifest))?;
    for (name, digest) in &m.outputs {
        let actual = file_digest(&dir.join(name))?;
        if &actual != digest {
            return Err(CliError::Stale(format!("{name} changed since {manifest} was written")));
        }
    }
    for (up, digest) in &m.upstream {
        let actual = file_digest(&dir.join(up))?;
        if &actual != digest {
            return Err(CliError::Stale(format!("{up} changed since {manifest} was written")));
        }
        verify_chain(dir, up)?;
    }
    Ok(m)
}

/// Verifies `manifest` and returns it if it lists `artifact` among its outputs.
fn require_artifact(dir: &Path, manifest: &str, artifact: &str) -> Result<Manifest, CliError> {
    if !dir.join(artifact).exists() {
        return Err(CliError::Dependency(format!(
            "{} not found; run the stage that writes it first",
            dir.join(artifact).display()
        )));
    }
    let m = verify_chain(dir, manifest)?;
    if !m.outputs.contains_key(artifact) {
        return Err(CliError::Stale(format!("{manifest} does not list {artifact}")));
    }
    Ok(m)
}

fn manifest_name(stem: &str) -> String {
    format!("{stem}.manifest.json")
}

fn record_timing(dir: &Path, key: &str, secs: f64) -> Result<(), CliError> {
    let path = dir.join(TIMINGS_FILE);
    let mut timings: BTreeMap<String, f64> = fs::read_to_string(&path)
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or_default();
    timings.insert(key.to_string(), secs);
    let json = serde_json::to_string_pretty(&timings).expect("timings serialise") + "\n";
    fs::write(&path, json).map_err(io_err(&path))
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<(), CliError> {
    let path = dir.join(name);
    fs::write(&path, text).map_err(io_err(&path))
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

// ---------------------------------------------------------------------------
// Stages

/// Samples the synthetic corpus.
pub fn cmd_synth(cfg: &ExperimentConfig, dir: &Path) -> Result<(), CliError> {
    let spec = match &cfg.dataset {
        DatasetSpec::Synthetic(spec) => spec,
        DatasetSpec::File { .. } => return Err(CliError::Usage("synth needs a synthetic dataset spec".into())),
    };
    ensure_dir(dir)?;
    let start = Instant::now();
    let (corpus, _) = synth::generate(spec)?;
    corpus.save(&dir.join(CORPUS_FILE))?;
    let mut m = Manifest::new("synth", cfg);
    m.record_output(dir, CORPUS_FILE)?;
    m.write(&dir.join(manifest_name("corpus")))?;
    record_timing(dir, "synth", start.elapsed().as_secs_f64())?;
    log::info!("synth: {} sessions over {} items", corpus.len(), corpus.item_count);
    Ok(())
}

/// Cleaning, split and forget-set selection.
pub fn cmd_prep(cfg: &ExperimentConfig, dir: &Path) -> Result<(), CliError> {
    ensure_dir(dir)?;
    let start = Instant::now();
    let mut m = Manifest::new("prep", cfg);
    let raw = match &cfg.dataset {
        DatasetSpec::Synthetic(_) => {
            let corpus_manifest = manifest_name("corpus");
            require_artifact(dir, &corpus_manifest, CORPUS_FILE)?;
            m.record_input(dir, CORPUS_FILE)?;
            m.record_upstream(dir, &corpus_manifest)?;
            Corpus::load(&dir.join(CORPUS_FILE))?
        }
        DatasetSpec::File { path, format } => {
            let digest = file_digest(path)?;
            m.inputs.insert(path.display().to_string(), digest);
            data::load_interactions(path, (*format).into())?
        }
    };
    let clean = data::preprocess(&raw, cfg.min_count)?;
    let split = data::split(&clean, cfg.data_seed())?;
    let forget = select_forget(&split.train, cfg.unlearn_ratio, cfg)?;
    split.train.save(&dir.join(TRAIN_FILE))?;
    split.valid.save(&dir.join(VALID_FILE))?;
    split.test.save(&dir.join(TEST_FILE))?;
    write_text(dir, FORGET_FILE, &data::unlearn_set_to_string(&forget))?;
    for name in [TRAIN_FILE, VALID_FILE, TEST_FILE, FORGET_FILE] {
        m.record_output(dir, name)?;
    }
    m.write(&dir.join(PREP_MANIFEST))?;
    record_timing(dir, "prep", start.elapsed().as_secs_f64())?;
    log::info!(
        "prep: {} items, train/valid/test = {}/{}/{}, forget {}",
        clean.item_count,
        split.train.len(),
        split.valid.len(),
        split.test.len(),
        forget.len()
    );
    Ok(())
}

fn select_forget(train: &Corpus, ratio: f64, cfg: &ExperimentConfig) -> Result<Vec<UnlearnSample>, CliError> {
    if ratio == 0.0 {
        return Ok(Vec::new());
    }
    Ok(data::select_unlearn(train, ratio, cfg.data_seed(), cfg.max_per_session)?)
}

/// Prepared data, loaded after verifying the prep manifest.
struct Prepared {
    train: Corpus,
    valid: Corpus,
    test: Corpus,
    forget: Vec<UnlearnSample>,
}

fn load_prepared(dir: &Path) -> Result<Prepared, CliError> {
    for name in [TRAIN_FILE, VALID_FILE, TEST_FILE, FORGET_FILE] {
        require_artifact(dir, PREP_MANIFEST, name)?;
    }
    let train = Corpus::load(&dir.join(TRAIN_FILE))?;
    let valid = Corpus::load(&dir.join(VALID_FILE))?;
    let test = Corpus::load(&dir.join(TEST_FILE))?;
    let path = dir.join(FORGET_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let forget = data::parse_unlearn_set(&text, &train)?;
    Ok(Prepared {
        train,
        valid,
        test,
        forget,
    })
}

fn record_prep_inputs(m: &mut Manifest, dir: &Path, names: &[&str]) -> Result<(), CliError> {
    for name in names {
        m.record_input(dir, name)?;
    }
    m.record_upstream(dir, PREP_MANIFEST)
}

/// Trains θ_rec on the training split.
pub fn cmd_train(cfg: &ExperimentConfig, dir: &Path) -> Result<(), CliError> {
    let prep = load_prepared(dir)?;
    let start = Instant::now();
    let init = model::init_params(&cfg.model, prep.train.item_count);
    let (params, report) = model::train(&init, &prep.train, &prep.valid, &cfg.model, cfg.train_epochs)?;
    model::save_checkpoint(&dir.join(REC_CKPT), &params, &cfg.model)?;
    let report_json = serde_json::json!({
        "epochs_run": report.epochs_run,
        "best_epoch": report.best_epoch,
        "best_valid_recall_10": report.best_valid_recall,
        "epoch_losses": report.epoch_losses,
    });
    write_text(dir, "train_report.json", &(serde_json::to_string_pretty(&report_json).expect("json") + "\n"))?;
    let mut m = Manifest::new("train", cfg);
    record_prep_inputs(&mut m, dir, &[TRAIN_FILE, VALID_FILE])?;
    for name in [REC_CKPT, "rec.ckpt.json", "train_report.json"] {
        m.record_output(dir, name)?;
    }
    m.write(&dir.join(manifest_name("rec")))?;
    record_timing(dir, "train", start.elapsed().as_secs_f64())?;
    log::info!("train: best epoch {} valid R@10 {:.4}", report.best_epoch, report.best_valid_recall);
    Ok(())
}

fn load_rec(dir: &Path) -> Result<(Params, HyperParams), CliError> {
    require_artifact(dir, &manifest_name("rec"), REC_CKPT)?;
    Ok(model::load_checkpoint(&dir.join(REC_CKPT))?)
}

/// Runs `cfg.unlearn.mode` from θ_rec and writes the result and its traces.
pub fn cmd_unlearn(cfg: &ExperimentConfig, dir: &Path) -> Result<(), CliError> {
    let prep = load_prepared(dir)?;
    let (rec, _) = load_rec(dir)?;
    let mode = cfg.unlearn.mode;
    let ctx = UnlearnContext {
        rec: &rec,
        forget: &prep.forget,
        train: &prep.train,
        valid: &prep.valid,
        hp: &cfg.model,
        train_epochs: cfg.train_epochs,
    };
    let start = Instant::now();
    let art = engine::run(ctx, &cfg.unlearn)?;
    let stem = mode.as_str();
    let ckpt = format!("{stem}.ckpt");
    model::save_checkpoint(&dir.join(&ckpt), &art.params, &cfg.model)?;
    let alpha = format!("alpha_{stem}.csv");
    let difficulty = format!("difficulty_{stem}.csv");
    let loss = format!("loss_{stem}.csv");
    write_text(dir, &alpha, &art.alpha_csv())?;
    write_text(dir, &difficulty, &art.difficulty_csv(&prep.forget))?;
    write_text(dir, &loss, &art.loss_csv())?;
    let mut m = Manifest::new("unlearn", cfg);
    record_prep_inputs(&mut m, dir, &[TRAIN_FILE, VALID_FILE, FORGET_FILE])?;
    m.record_input(dir, REC_CKPT)?;
    m.record_upstream(dir, &manifest_name("rec"))?;
    for name in [ckpt.clone(), format!("{ckpt}.json"), alpha, difficulty, loss] {
        m.record_output(dir, &name)?;
    }
    m.write(&dir.join(manifest_name(stem)))?;
    record_timing(dir, &format!("unlearn_{stem}"), start.elapsed().as_secs_f64())?;
    log::info!("unlearn: {stem} finished after {} steps", art.steps);
    Ok(())
}

/// Metrics with Recall/NDCG at every configured cut-off.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub checkpoint: String,
    pub report: MetricsReport,
    pub at_k: Vec<AtK>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtK {
    pub k: usize,
    pub recall: f64,
    pub ndcg: f64,
}

fn evaluate(params: &Params, hp: &HyperParams, prep: &Prepared, cfg: &ExperimentConfig, name: &str) -> EvalOutput {
    let opts = RankOptions {
        exclude_seen: cfg.eval.exclude_seen,
    };
    let report = eval::report(params, hp, &prep.test, &prep.forget, cfg.eval.beta, opts);
    let ranks = eval::test_ranks(params, &prep.test, hp, opts);
    let at_k = cfg
        .eval
        .ks
        .iter()
        .map(|&k| AtK {
            k,
            recall: eval::recall_from_ranks(&ranks, k),
            ndcg: eval::ndcg_from_ranks(&ranks, k),
        })
        .collect();
    EvalOutput {
        checkpoint: name.to_string(),
        report,
        at_k,
    }
}

fn metrics_csv(out: &EvalOutput) -> String {
    let mut csv = String::from("run_id,metric,k,value\n");
    let id = &out.checkpoint;
    for a in &out.at_k {
        csv.push_str(&format!("{id},recall,{},{}\n", a.k, a.recall));
        csv.push_str(&format!("{id},ndcg,{},{}\n", a.k, a.ndcg));
    }
    let r = &out.report;
    for (metric, k, v) in [("hit_u", Some(1), r.hit_u_1), ("hit_u", Some(5), r.hit_u_5), ("u_beta", None, r.u_beta)] {
        if let Some(v) = v {
            let k = k.map(|k: usize| k.to_string()).unwrap_or_default();
            csv.push_str(&format!("{id},{metric},{k},{v}\n"));
        }
    }
    csv
}

/// Evaluates a checkpoint in `dir` (default `rec.ckpt`) on the test split and
/// the forget set, refusing broken provenance chains.
pub fn cmd_eval(cfg: &ExperimentConfig, dir: &Path, checkpoint: Option<&str>) -> Result<EvalOutput, CliError> {
    let ckpt = checkpoint.unwrap_or(REC_CKPT);
    let stem = ckpt.strip_suffix(".ckpt").unwrap_or(ckpt);
    let ckpt_manifest = manifest_name(stem);
    require_artifact(dir, &ckpt_manifest, ckpt)?;
    let prep = load_prepared(dir)?;
    let start = Instant::now();
    let (params, hp) = model::load_checkpoint(&dir.join(ckpt))?;
    let out = evaluate(&params, &hp, &prep, cfg, stem);
    let csv_name = format!("metrics_{stem}.csv");
    let json_name = format!("metrics_{stem}.json");
    write_text(dir, &csv_name, &metrics_csv(&out))?;
    write_text(dir, &json_name, &(serde_json::to_string_pretty(&out).expect("metrics serialise") + "\n"))?;
    let mut m = Manifest::new("eval", cfg);
    record_prep_inputs(&mut m, dir, &[TEST_FILE, FORGET_FILE])?;
    m.record_input(dir, ckpt)?;
    m.record_upstream(dir, &ckpt_manifest)?;
    m.record_output(dir, &csv_name)?;
    m.record_output(dir, &json_name)?;
    m.write(&dir.join(manifest_name(&format!("metrics_{stem}"))))?;
    record_timing(dir, &format!("eval_{stem}"), start.elapsed().as_secs_f64())?;
    Ok(out)
}

/// One row of the ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub mode: Mode,
    pub batch: usize,
    pub ratio: f64,
    pub report: MetricsReport,
    pub seconds: f64,
}

pub const ABLATION_HEADER: &str =
    "mode,batch,ratio,recall_10,recall_20,ndcg_10,ndcg_20,hit_u_1,hit_u_5,u_beta,seconds";

impl AblationRow {
    pub fn csv_line(&self) -> String {
        let r = &self.report;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{:.3}\n",
            self.mode.as_str(),
            self.batch,
            self.ratio,
            r.recall_10,
            r.recall_20,
            r.ndcg_10,
            r.ndcg_20,
            opt(r.hit_u_1),
            opt(r.hit_u_5),
            opt(r.u_beta),
            self.seconds
        )
    }
}

/// Runs every configured mode over the batch-size × ratio grid from θ_rec
/// under shared seeds.
pub fn cmd_ablate(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<AblationRow>, CliError> {
    let prep = load_prepared(dir)?;
    let (rec, _) = load_rec(dir)?;
    let batches = if cfg.ablate.batch_sizes.is_empty() {
        vec![cfg.unlearn.curriculum.batch]
    } else {
        cfg.ablate.batch_sizes.clone()
    };
    let ratios = if cfg.ablate.ratios.is_empty() {
        vec![cfg.unlearn_ratio]
    } else {
        cfg.ablate.ratios.clone()
    };
    let opts = RankOptions {
        exclude_seen: cfg.eval.exclude_seen,
    };
    let mut rows = Vec::new();
    for &ratio in &ratios {
        let forget = if ratio == cfg.unlearn_ratio {
            prep.forget.clone()
        } else {
            select_forget(&prep.train, ratio, cfg)?
        };
        for &batch in &batches {
            for &mode in &cfg.ablate.modes {
                let mut run_cfg = cfg.unlearn.clone();
                run_cfg.mode = mode;
                run_cfg.curriculum.batch = batch;
                let ctx = UnlearnContext {
                    rec: &rec,
                    forget: &forget,
                    train: &prep.train,
                    valid: &prep.valid,
                    hp: &cfg.model,
                    train_epochs: cfg.train_epochs,
                };
                let start = Instant::now();
                let art = engine::run(ctx, &run_cfg)?;
                let seconds = start.elapsed().as_secs_f64();
                let report = eval::report(&art.params, &cfg.model, &prep.test, &forget, cfg.eval.beta, opts);
                log::info!("ablate: {} batch {batch} ratio {ratio}: {:.1}s", mode.as_str(), seconds);
                rows.push(AblationRow {
                    mode,
                    batch,
                    ratio,
                    report,
                    seconds,
                });
            }
        }
    }
    let mut csv = String::from(ABLATION_HEADER);
    csv.push('\n');
    rows.iter().for_each(|r| csv.push_str(&r.csv_line()));
    write_text(dir, "ablation.csv", &csv)?;
    let mut m = Manifest::new("ablate", cfg);
    record_prep_inputs(&mut m, dir, &[TRAIN_FILE, VALID_FILE, TEST_FILE, FORGET_FILE])?;
    m.record_input(dir, REC_CKPT)?;
    m.record_upstream(dir, &manifest_name("rec"))?;
    m.write(&dir.join(manifest_name("ablation")))?;
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Argument parsing

#[derive(Debug, Parser)]
#[command(name = "cau", version, about = "Curriculum approximate unlearning for session recommenders")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed; overrides every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads. Affects wall-clock only.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory; overrides `output_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a synthetic Markov corpus.
    Synth,
    /// Clean, split and select the forget set.
    Prep,
    /// Train the recommender.
    Train,
    /// Unlearn the forget set with the configured mode.
    Unlearn,
    /// Compute metrics for a checkpoint.
    Eval {
        /// Checkpoint file name inside the output directory.
        #[arg(long)]
        checkpoint: Option<String>,
    },
    /// Compare all modes over the configured sweep.
    Ablate,
}

/// Resolves the effective config from the global flags.
pub fn resolve_config(global: &GlobalArgs) -> Result<(ExperimentConfig, PathBuf), CliError> {
    let mut cfg = match &global.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = global.seed.or(cfg.seed) {
        cfg.apply_seed(seed);
    }
    cfg.validate()?;
    let dir = global.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    Ok((cfg, dir))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be >= 1".into()));
        }
        // A pool may already exist when called twice in one process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let (cfg, dir) = resolve_config(&cli.global)?;
    match cli.command {
        Command::Synth => cmd_synth(&cfg, &dir),
        Command::Prep => cmd_prep(&cfg, &dir),
        Command::Train => cmd_train(&cfg, &dir),
        Command::Unlearn => cmd_unlearn(&cfg, &dir),
        Command::Eval { checkpoint } => {
            let out = cmd_eval(&cfg, &dir, checkpoint.as_deref())?;
            print!("{}", metrics_csv(&out));
            Ok(())
        }
        Command::Ablate => {
            let rows = cmd_ablate(&cfg, &dir)?;
            println!("{ABLATION_HEADER}");
            rows.iter().for_each(|r| print!("{}", r.csv_line()));
            Ok(())
        }
    }
}

/// Parses `args`, runs, and maps the outcome to an exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
