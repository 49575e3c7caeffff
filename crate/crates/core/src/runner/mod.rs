//! Experiment configuration, output layout and the glue between corpus,
//! gateway, baselines and metrics.
//!
//! A configuration file is TOML:
//!
//! ```toml
//! [experiment]
//! name = "demo"
//! output_dir = "out"
//!
//! [gateway]
//! backend = "mock"            # or "http"
//! mock_script = "script.json"
//! max_parallel = 4
//! timeout_secs = 300
//! [gateway.retry]
//! max_attempts = 6
//!
//! [metrics]
//! alpha = 0.05
//!
//! [datasets.movies]
//! path = "movies.jsonl"
//! domain = "movies"
//!
//! [models.llama]
//! model_name = "meta-llama/Llama-3.1-8B-Instruct"
//! endpoint_url = "http://localhost:8000/v1"
//!
//! [arms.rs2rs]
//! dataset = "movies"
//! profile = "RS"
//! output = "RS"
//! strategy = "plain"
//! model = "llama"
//! runs = 6
//! ```
//!
//! Each arm writes to `<output_dir>/<experiment>/<arm>/`: `records.jsonl`,
//! `raw.jsonl`, `arm.json`, `metrics.csv`, `metrics.txt` and `report.md`.

pub mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

pub use report::{arm_markdown, emit_report, render_report, ReportLayout};

use crate::baselines::{predict_mf, train_mf, triples_from_contexts, user_average, BaselineError, MfHyper};
use crate::corpus::{open_instances, save_instances, CorpusError, EvalInstance, RatingScale};
use crate::fingerprint::digest_json;
use crate::gateway::http::HttpBackend;
use crate::gateway::mock::{MockBackend, MockScript};
use crate::gateway::{
    run_experiment, ArmSpec, ExperimentError, ExperimentOutcome, Gateway, GatewayError, ModelConfig,
    Pipeline, RetryPolicy, RunPlan, DEFAULT_EMBED_BATCH,
};
use crate::metrics::{
    aggregate, parsed_in_every_run, per_run_values, welch_t_test, ArmLabels, Metric, MetricsError,
    MetricsReport, PredictionRecord, WelchResult, ALPHA,
};
use crate::profile::{DescriptionCache, ProfileError, ProfileFormat, ProfileKind};
use crate::promptgen::{DomainVocabulary, OutputFormat, PromptError, Renderer, Strategy, TemplateSet};
use crate::similarity::{
    assign_subsets, instance_similarity, texts_to_embed, write_split_csv, Pooling, SimilarityError, Subset,
    DEFAULT_EMBEDDING_MODEL,
};
use crate::store::{latest_by_key, RecordStore, StoreError};

pub const ARM_META_FILE: &str = "arm.json";
pub const DESCRIPTIONS_FILE: &str = "descriptions.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum RunnerError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Similarity(#[from] SimilarityError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

impl RunnerError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.display().to_string(), source }
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub gateway: GatewaySection,
    #[serde(default)]
    pub metrics: MetricsSection,
    #[serde(default)]
    pub datasets: BTreeMap<String, DatasetConfig>,
    #[serde(default)]
    pub models: BTreeMap<String, ModelConfig>,
    #[serde(default)]
    pub arms: BTreeMap<String, ArmConfig>,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Http,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewaySection {
    pub backend: BackendKind,
    pub mock_script: Option<PathBuf>,
    pub retry: RetryPolicy,
    pub max_parallel: usize,
    pub timeout_secs: u64,
    pub embed_batch: usize,
}

impl Default for GatewaySection {
    fn default() -> Self {
        Self {
            backend: BackendKind::Http,
            mock_script: None,
            retry: RetryPolicy::default(),
            max_parallel: 4,
            timeout_secs: 300,
            embed_batch: DEFAULT_EMBED_BATCH,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub alpha: f64,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self { alpha: ALPHA }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: PathBuf,
    /// Vocabulary: movies, recipes or books.
    pub domain: String,
    #[serde(default = "default_y_min")]
    pub y_min: i64,
    #[serde(default = "default_y_max")]
    pub y_max: i64,
}

fn default_y_min() -> i64 {
    1
}

fn default_y_max() -> i64 {
    10
}

impl DatasetConfig {
    pub fn scale(&self) -> Result<RatingScale, RunnerError> {
        Ok(RatingScale::new(self.y_min, self.y_max)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArmConfig {
    pub dataset: String,
    /// `S`, `RS`, `D`, `S+D` or `RS+D`.
    pub profile: String,
    /// `S` or `RS`.
    pub output: String,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    pub model: String,
    #[serde(default)]
    pub runs: Option<u32>,
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    #[serde(default)]
    pub description_model: Option<String>,
    /// Directory overriding the built-in templates.
    #[serde(default)]
    pub templates: Option<PathBuf>,
}

fn default_strategy() -> Strategy {
    Strategy::Plain
}

pub fn parse_profile_label(label: &str) -> Result<ProfileFormat, RunnerError> {
    let (kind, with_description) = match label {
        "S" => (ProfileKind::ScoreOnly, false),
        "RS" => (ProfileKind::ReviewScore, false),
        "S+D" => (ProfileKind::ScoreOnly, true),
        "RS+D" => (ProfileKind::ReviewScore, true),
        "D" => (ProfileKind::DescriptionOnly, true),
        other => return Err(RunnerError::Config(format!("unknown profile `{other}` (S, RS, D, S+D, RS+D)"))),
    };
    Ok(ProfileFormat::new(kind, with_description)?)
}

pub fn parse_output_label(label: &str) -> Result<OutputFormat, RunnerError> {
    match label {
        "S" => Ok(OutputFormat::ScoreOnly),
        "RS" => Ok(OutputFormat::ReviewAndScore),
        other => Err(RunnerError::Config(format!("unknown output `{other}` (S or RS)"))),
    }
}

impl ArmConfig {
    pub fn pipeline(&self) -> Result<Pipeline, RunnerError> {
        let pipeline = Pipeline {
            profile: parse_profile_label(&self.profile)?,
            output: parse_output_label(&self.output)?,
            strategy: self.strategy,
        };
        if pipeline.output.expects_review() && pipeline.profile.kind != ProfileKind::ReviewScore {
            return Err(RunnerError::Config(format!(
                "output RS needs in-context reviews, but profile is {}",
                self.profile
            )));
        }
        Ok(pipeline)
    }

    pub fn plan(&self, max_parallel: usize) -> Result<RunPlan, RunnerError> {
        let runs = self.runs.unwrap_or_else(|| self.seeds.as_ref().map_or(6, |s| s.len() as u32));
        let seeds = self.seeds.clone().unwrap_or_else(|| (0..runs as u64).collect());
        Ok(RunPlan::new(runs, seeds, max_parallel)?)
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, base_dir: &Path) -> Result<Self, RunnerError> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| RunnerError::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, RunnerError> {
        let text = std::fs::read_to_string(path).map_err(|e| RunnerError::io(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml_str(&text, &base)
    }

    pub fn validate(&self) -> Result<(), RunnerError> {
        let bad = |m: String| Err(RunnerError::Config(m));
        if self.experiment.name.is_empty() {
            return bad("experiment.name is empty".into());
        }
        if !(self.metrics.alpha > 0.0 && self.metrics.alpha < 1.0) {
            return bad(format!("metrics.alpha must lie in (0, 1), got {}", self.metrics.alpha));
        }
        if self.gateway.backend == BackendKind::Mock && self.gateway.mock_script.is_none() {
            return bad("the mock backend needs gateway.mock_script".into());
        }
        if self.gateway.max_parallel == 0 {
            return bad("gateway.max_parallel must be at least 1".into());
        }
        for (name, d) in &self.datasets {
            d.scale()?;
            if DomainVocabulary::for_label(&d.domain).is_none() {
                return bad(format!("dataset {name}: unknown domain `{}`", d.domain));
            }
        }
        for (name, m) in &self.models {
            m.validate().map_err(|e| RunnerError::Config(format!("model {name}: {e}")))?;
        }
        for (id, arm) in &self.arms {
            if !self.datasets.contains_key(&arm.dataset) {
                return bad(format!("arm {id}: unknown dataset `{}`", arm.dataset));
            }
            for m in std::iter::once(&arm.model).chain(arm.description_model.as_ref()) {
                if !self.models.contains_key(m) {
                    return bad(format!("arm {id}: unknown model `{m}`"));
                }
            }
            arm.pipeline().map_err(|e| RunnerError::Config(format!("arm {id}: {e}")))?;
            arm.plan(self.gateway.max_parallel).map_err(|e| RunnerError::Config(format!("arm {id}: {e}")))?;
        }
        Ok(())
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.base_dir.join(path)
        }
    }

    pub fn experiment_dir(&self) -> PathBuf {
        self.resolve(&self.experiment.output_dir).join(&self.experiment.name)
    }

    pub fn arm_dir(&self, arm_id: &str) -> PathBuf {
        self.experiment_dir().join(arm_id)
    }

    pub fn arm(&self, arm_id: &str) -> Result<&ArmConfig, RunnerError> {
        self.arms.get(arm_id).ok_or_else(|| {
            let known: Vec<&str> = self.arms.keys().map(String::as_str).collect();
            RunnerError::Usage(format!("unknown arm `{arm_id}` (known: {})", known.join(", ")))
        })
    }

    pub fn dataset(&self, name: &str) -> Result<&DatasetConfig, RunnerError> {
        self.datasets.get(name).ok_or_else(|| RunnerError::Usage(format!("unknown dataset `{name}`")))
    }

    pub fn load_dataset(&self, name: &str) -> Result<Vec<EvalInstance>, RunnerError> {
        let d = self.dataset(name)?;
        Ok(open_instances(&self.resolve(&d.path), d.scale()?, Some(name))?)
    }

    pub fn build_gateway(&self) -> Result<Gateway, RunnerError> {
        let g = &self.gateway;
        let backend: Arc<dyn crate::gateway::ChatBackend> = match g.backend {
            BackendKind::Mock => {
                let path = self.resolve(g.mock_script.as_deref().expect("validated"));
                let script = MockScript::load(&path).map_err(|e| RunnerError::io(&path, e))?;
                Arc::new(MockBackend::new(script))
            }
            BackendKind::Http => Arc::new(
                HttpBackend::new(Duration::from_secs(g.timeout_secs))
                    .map_err(|e| RunnerError::Config(format!("http client: {e}")))?,
            ),
        };
        Ok(Gateway::new(backend).with_retry(g.retry).with_embed_batch(g.embed_batch))
    }

    pub fn renderer(&self, arm: &ArmConfig) -> Result<Renderer, RunnerError> {
        let d = self.dataset(&arm.dataset)?;
        let vocab = DomainVocabulary::for_label(&d.domain)
            .ok_or_else(|| RunnerError::Config(format!("unknown domain `{}`", d.domain)))?;
        let templates = match &arm.templates {
            Some(dir) => TemplateSet::from_dir(&self.resolve(dir))?,
            None => TemplateSet::builtin(),
        };
        Ok(Renderer::new(templates, vocab))
    }
}

// ---------------------------------------------------------------------------
// Arms
// ---------------------------------------------------------------------------

/// Sidecar stored next to an arm's records so evaluation needs no config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmMeta {
    pub labels: ArmLabels,
    pub config_fingerprint: String,
    #[serde(default)]
    pub notes: Vec<String>,
}

impl ArmMeta {
    pub fn load(dir: &Path) -> Result<Option<Self>, RunnerError> {
        let path = dir.join(ARM_META_FILE);
        match std::fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)
                .map(Some)
                .map_err(|e| RunnerError::io(&path, std::io::Error::other(e))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(RunnerError::io(&path, e)),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<(), RunnerError> {
        let path = dir.join(ARM_META_FILE);
        let mut text = serde_json::to_string_pretty(self).expect("meta serializes");
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| RunnerError::io(&path, e))
    }
}

#[derive(Debug, Clone)]
pub struct ArmRun {
    pub outcome: ExperimentOutcome,
    pub report: MetricsReport,
}

/// Runs (or resumes) one configured arm through `gateway`, then evaluates it.
pub fn run_arm(cfg: &ExperimentConfig, arm_id: &str, gateway: &Gateway) -> Result<ArmRun, RunnerError> {
    let arm = cfg.arm(arm_id)?;
    let dataset = cfg.load_dataset(&arm.dataset)?;
    let renderer = cfg.renderer(arm)?;
    let plan = arm.plan(cfg.gateway.max_parallel)?;
    let pipeline = arm.pipeline()?;
    let model = &cfg.models[&arm.model];
    let description_model = arm.description_model.as_ref().map(|m| &cfg.models[m]);
    let spec = ArmSpec { arm_id, pipeline, model, description_model, plan: &plan };

    let dir = cfg.arm_dir(arm_id);
    let store = RecordStore::open(&dir)?;
    let meta = ArmMeta {
        labels: ArmLabels {
            arm: arm_id.to_string(),
            dataset: arm.dataset.clone(),
            format: pipeline.format_label(),
            strategy: pipeline.strategy.label().to_string(),
        },
        config_fingerprint: spec.config_fingerprint(&renderer),
        notes: Vec::new(),
    };
    meta.save(&dir)?;

    let mut cache = if pipeline.profile.with_description {
        Some(DescriptionCache::open(&cfg.experiment_dir().join(DESCRIPTIONS_FILE))?)
    } else {
        None
    };
    let outcome = run_experiment(&dataset, &spec, gateway, &renderer, &store, cache.as_mut())?;
    let report = evaluate_dir(&dir)?;
    Ok(ArmRun { outcome, report })
}

/// The records an evaluation uses: the latest record per key carrying the
/// arm's config fingerprint (or, without a sidecar, the fingerprint of the
/// last record written).
pub fn load_arm_records(dir: &Path) -> Result<(ArmMeta, Vec<PredictionRecord>), RunnerError> {
    let store = RecordStore::open(dir)?;
    let all = store.load_all()?;
    let meta = match ArmMeta::load(dir)? {
        Some(m) => m,
        None => {
            let last = all
                .last()
                .ok_or_else(|| RunnerError::Usage(format!("{}: no records", store.records_path().display())))?;
            let name = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            ArmMeta {
                labels: ArmLabels { arm: name, ..ArmLabels::default() },
                config_fingerprint: last.config_fingerprint.clone(),
                notes: Vec::new(),
            }
        }
    };
    let records: Vec<PredictionRecord> = latest_by_key(all)
        .into_iter()
        .filter(|r| r.config_fingerprint == meta.config_fingerprint)
        .collect();
    if records.is_empty() {
        return Err(RunnerError::Usage(format!("{}: no records for the arm's configuration", dir.display())));
    }
    Ok((meta, records))
}

/// Aggregates an arm directory and writes `metrics.csv`, `metrics.txt` and
/// `report.md`. Never modifies the records.
pub fn evaluate_dir(dir: &Path) -> Result<MetricsReport, RunnerError> {
    let (meta, records) = load_arm_records(dir)?;
    let report = aggregate(&records, meta.labels.clone())?;
    let write = |name: &str, text: String| {
        let path = dir.join(name);
        std::fs::write(&path, text).map_err(|e| RunnerError::io(&path, e))
    };
    write("metrics.csv", render_report(std::slice::from_ref(&report), ReportLayout::Csv))?;
    write("metrics.txt", report.to_key_values())?;
    write("report.md", arm_markdown(&report, &meta.notes))?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Baselines
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaselineMethod {
    UserAverage,
    Mf(MfHyper),
}

impl BaselineMethod {
    pub fn label(&self) -> &'static str {
        match self {
            Self::UserAverage => "user_average",
            Self::Mf(_) => "mf",
        }
    }

    fn notes(&self) -> Vec<String> {
        match self {
            Self::UserAverage => Vec::new(),
            Self::Mf(h) => vec![format!(
                "matrix factorisation trained by ALS on every context rating of the dataset (targets \
                 excluded); ratings mean-centred, no bias terms, predictions clamped to the scale, \
                 global mean for unseen users or items; d={}, lambda={}, iterations={}, seed={}.",
                h.d, h.lambda, h.iterations, h.seed
            )],
        }
    }
}

/// One deterministic prediction record per instance (run 0).
pub fn baseline_records(
    dataset: &[EvalInstance],
    method: BaselineMethod,
    arm_id: &str,
) -> Result<(String, Vec<PredictionRecord>), RunnerError> {
    if dataset.is_empty() {
        return Err(RunnerError::Usage("dataset is empty".into()));
    }
    let hyper = match method {
        BaselineMethod::Mf(h) => Some(h),
        BaselineMethod::UserAverage => None,
    };
    let fingerprint = digest_json(&json!({
        "baseline": method.label(),
        "hyper": hyper,
        "dataset": digest_json(&serde_json::Value::String(
            String::from_utf8_lossy(&crate::corpus::instances_to_bytes(dataset)).into_owned()
        )),
    }));
    let model = match method {
        BaselineMethod::Mf(h) => Some(train_mf(&triples_from_contexts(dataset), &h)?),
        BaselineMethod::UserAverage => None,
    };
    let records = dataset
        .iter()
        .map(|inst| {
            let prediction = match &model {
                Some(m) => predict_mf(m, &inst.target.user_id, &inst.target.item_id, inst.scale),
                None => user_average(inst)?,
            };
            Ok(PredictionRecord {
                instance_id: inst.instance_id.clone(),
                run_index: 0,
                arm_id: arm_id.to_string(),
                config_fingerprint: fingerprint.clone(),
                parse: None,
                prediction: Some(prediction),
                ground_truth: inst.target.rating,
                context_scores: inst.context_ratings(),
                raw_ref: None,
                infra_error: None,
                seed: None,
            })
        })
        .collect::<Result<Vec<_>, RunnerError>>()?;
    Ok((fingerprint, records))
}

/// Writes a baseline arm into `dir` and evaluates it.
pub fn run_baseline(
    dataset: &[EvalInstance],
    dataset_label: &str,
    method: BaselineMethod,
    dir: &Path,
) -> Result<MetricsReport, RunnerError> {
    let arm_id = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let (fingerprint, records) = baseline_records(dataset, method, &arm_id)?;
    let store = RecordStore::open(dir)?;
    let existing: BTreeSet<_> = store
        .latest()?
        .into_iter()
        .filter(|r| r.config_fingerprint == fingerprint)
        .map(|r| r.instance_id)
        .collect();
    for r in records.iter().filter(|r| !existing.contains(&r.instance_id)) {
        store.append_record(r)?;
    }
    ArmMeta {
        labels: ArmLabels {
            arm: arm_id,
            dataset: dataset_label.to_string(),
            format: "baseline".into(),
            strategy: method.label().into(),
        },
        config_fingerprint: fingerprint,
        notes: method.notes(),
    }
    .save(dir)?;
    evaluate_dir(dir)
}

// ---------------------------------------------------------------------------
// Comparison
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub metric: Metric,
    pub paired: bool,
    pub n_instances_a: usize,
    pub n_instances_b: usize,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub welch: WelchResult,
}

/// Copies a single-run record set onto every run index in `runs`, so a
/// deterministic baseline can be compared run-for-run.
fn broadcast(records: Vec<PredictionRecord>, runs: &BTreeSet<u32>) -> Vec<PredictionRecord> {
    let own: BTreeSet<u32> = records.iter().map(|r| r.run_index).collect();
    if own.len() != 1 || runs.len() <= 1 {
        return records;
    }
    runs.iter()
        .flat_map(|&run| records.iter().map(move |r| PredictionRecord { run_index: run, ..r.clone() }))
        .collect()
}

/// Welch's test over per-run values of `metric` for two arm directories.
///
/// With `paired`, both arms are restricted to instances that parsed in every
/// run of both arms. A single-run arm compared with a multi-run arm is
/// repeated once per run of the other.
pub fn compare_dirs(a: &Path, b: &Path, metric: Metric, paired: bool) -> Result<Comparison, RunnerError> {
    let (meta_a, mut ra) = load_arm_records(a)?;
    let (meta_b, mut rb) = load_arm_records(b)?;
    if paired {
        let common: BTreeSet<String> =
            parsed_in_every_run(&ra).intersection(&parsed_in_every_run(&rb)).cloned().collect();
        ra.retain(|r| common.contains(&r.instance_id));
        rb.retain(|r| common.contains(&r.instance_id));
    }
    let runs = |v: &[PredictionRecord]| v.iter().map(|r| r.run_index).collect::<BTreeSet<u32>>();
    let (runs_a, runs_b) = (runs(&ra), runs(&rb));
    let ra = broadcast(ra, &runs_b);
    let rb = broadcast(rb, &runs_a);
    let count = |v: &[PredictionRecord]| v.iter().map(|r| r.instance_id.as_str()).collect::<BTreeSet<_>>().len();
    let (n_instances_a, n_instances_b) = (count(&ra), count(&rb));
    let va = per_run_values(&aggregate(&ra, meta_a.labels)?, metric);
    let vb = per_run_values(&aggregate(&rb, meta_b.labels)?, metric);
    let welch = welch_t_test(&va, &vb)?;
    Ok(Comparison { metric, paired, n_instances_a, n_instances_b, a: va, b: vb, welch })
}

// ---------------------------------------------------------------------------
// Descriptions and similarity
// ---------------------------------------------------------------------------

/// Generates and caches a self-description for every instance. Returns the
/// number of instances that still have none.
pub fn synthesize_all_descriptions(
    dataset: &[EvalInstance],
    generator: &ModelConfig,
    max_parallel: usize,
    gateway: &Gateway,
    renderer: &Renderer,
    cache: &mut DescriptionCache,
) -> Result<usize, RunnerError> {
    let indices: Vec<usize> = (0..dataset.len()).collect();
    let out = crate::gateway::synthesize_descriptions(
        dataset,
        &indices,
        generator,
        max_parallel,
        gateway,
        renderer,
        Some(cache),
    )?;
    let mut failed = 0;
    for (id, r) in out {
        if let Err(e) = r {
            log::warn!("{id}: {e}");
            failed += 1;
        }
    }
    Ok(failed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitSummary {
    pub similar: usize,
    pub dissimilar: usize,
}

/// Embeds every item description, scores each instance and writes
/// `similarity.csv`, `similar.jsonl` and `dissimilar.jsonl` into `out_dir`.
pub fn split_similarity(
    dataset: &[EvalInstance],
    gateway: &Gateway,
    embed_model: &ModelConfig,
    pooling: Pooling,
    out_dir: &Path,
) -> Result<SplitSummary, RunnerError> {
    let texts = texts_to_embed(dataset);
    let vectors = gateway.embed(&texts, embed_model)?;
    let embeddings = texts.into_iter().zip(vectors).collect();
    let scores = dataset
        .iter()
        .map(|inst| instance_similarity(inst, &embeddings, pooling))
        .collect::<Result<Vec<_>, _>>()?;
    let rows = assign_subsets(dataset, &scores)?;

    std::fs::create_dir_all(out_dir).map_err(|e| RunnerError::io(out_dir, e))?;
    let csv_path = out_dir.join("similarity.csv");
    let mut buf = Vec::new();
    write_split_csv(&mut buf, &rows).map_err(|e| RunnerError::io(&csv_path, e))?;
    std::fs::write(&csv_path, buf).map_err(|e| RunnerError::io(&csv_path, e))?;

    let pick = |subset: Subset| -> Vec<EvalInstance> {
        dataset.iter().zip(&rows).filter(|(_, r)| r.1 == subset).map(|(i, _)| i.clone()).collect()
    };
    let similar = pick(Subset::Similar);
    let dissimilar = pick(Subset::Dissimilar);
    save_instances(&out_dir.join("similar.jsonl"), &similar)?;
    save_instances(&out_dir.join("dissimilar.jsonl"), &dissimilar)?;
    Ok(SplitSummary { similar: similar.len(), dissimilar: dissimilar.len() })
}

/// Default embedding model configuration for similarity splits.
pub fn default_embedding_model(endpoint_url: &str) -> ModelConfig {
    ModelConfig {
        model_name: DEFAULT_EMBEDDING_MODEL.into(),
        endpoint_url: endpoint_url.into(),
        ..ModelConfig::default()
    }
}
