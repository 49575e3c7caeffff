//! Multi-run, resumable experiment execution for one arm.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{Gateway, GatewayError, ModelConfig, RequestTag, RunPlan};
use crate::corpus::EvalInstance;
use crate::extract::extract_score;
use crate::fingerprint::digest_json;
use crate::metrics::PredictionRecord;
use crate::profile::{
    assemble_profile, synthesize_self_description, DescriptionCache, ProfileError, ProfileFormat,
    SelfDescription,
};
use crate::promptgen::{
    Intermediates, OutputFormat, PromptError, RenderedPrompt, Renderer, Strategy, TEMPLATE_VERSION,
};
use crate::store::{record_key, RawEntry, RecordStore, StoreError};

/// Prompting pipeline of an arm: profile format, output format, strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pipeline {
    pub profile: ProfileFormat,
    pub output: OutputFormat,
    pub strategy: Strategy,
}

impl Pipeline {
    /// Format label such as `RS→RS` or `D→S`.
    pub fn format_label(&self) -> String {
        format!("{}→{}", self.profile.label(), self.output.label())
    }
}

/// Everything `run_experiment` needs to know about one arm.
#[derive(Debug, Clone, Copy)]
pub struct ArmSpec<'a> {
    pub arm_id: &'a str,
    pub pipeline: Pipeline,
    pub model: &'a ModelConfig,
    /// Generator for self-descriptions; defaults to `model`.
    pub description_model: Option<&'a ModelConfig>,
    pub plan: &'a RunPlan,
}

impl ArmSpec<'_> {
    fn description_model(&self) -> &ModelConfig {
        self.description_model.unwrap_or(self.model)
    }

    /// Hash of every setting that influences generated records. Endpoint
    /// URLs and credentials are excluded.
    pub fn config_fingerprint(&self, renderer: &Renderer) -> String {
        let model_part = |m: &ModelConfig| {
            json!({
                "model": m.model_name,
                "temperature": m.temperature,
                "max_tokens": m.max_tokens,
                "send_seed": m.send_seed,
                "extra": m.extra_params,
            })
        };
        digest_json(&json!({
            "templates": TEMPLATE_VERSION,
            "vocabulary": renderer.vocabulary(),
            "pipeline": self.pipeline,
            "model": model_part(self.model),
            "description_model": self.pipeline.profile.with_description.then(|| model_part(self.description_model())),
        }))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("worker thread panicked")]
    WorkerPanic,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub config_fingerprint: String,
    /// Current record for every (instance, run), ordered by run then dataset
    /// order.
    pub records: Vec<PredictionRecord>,
    pub issued_jobs: usize,
    pub skipped_jobs: usize,
    pub infra_failures: usize,
}

struct JobResult {
    record: PredictionRecord,
    raws: Vec<RawEntry>,
}

/// Runs every (run, instance) pair of the plan that has no successful record
/// in `store` yet.
///
/// Each job renders and completes any intermediate prompts, then the final
/// prompt, parses the output and appends a record. Transport failures become
/// records flagged with `infra_error`, retried on the next invocation; a
/// rejected request or a prompt error aborts the experiment. At most
/// `plan.max_parallel` jobs run concurrently. Records are written in job
/// order so repeated runs produce identical files.
pub fn run_experiment(
    dataset: &[EvalInstance],
    arm: &ArmSpec<'_>,
    gateway: &Gateway,
    renderer: &Renderer,
    store: &RecordStore,
    descriptions: Option<&mut DescriptionCache>,
) -> Result<ExperimentOutcome, ExperimentError> {
    if dataset.is_empty() {
        return Err(ExperimentError::EmptyDataset);
    }
    arm.plan.validate()?;
    arm.model.validate()?;
    let fingerprint = arm.config_fingerprint(renderer);

    let done: HashSet<_> = store
        .latest()?
        .into_iter()
        .filter(|r| r.infra_error.is_none())
        .map(|r| record_key(&r))
        .collect();
    let mut jobs: Vec<(u32, usize)> = Vec::new();
    let mut skipped = 0;
    for run in 0..arm.plan.n_runs {
        for (i, inst) in dataset.iter().enumerate() {
            if done.contains(&(inst.instance_id.clone(), run, fingerprint.clone())) {
                skipped += 1;
            } else {
                jobs.push((run, i));
            }
        }
    }

    let mut description_text: HashMap<&str, Result<String, String>> = HashMap::new();
    if arm.pipeline.profile.with_description && !jobs.is_empty() {
        let needed: Vec<usize> = {
            let mut seen = HashSet::new();
            jobs.iter().map(|j| j.1).filter(|i| seen.insert(*i)).collect()
        };
        description_text = synthesize_descriptions(
            dataset,
            &needed,
            arm.description_model(),
            arm.plan.max_parallel,
            gateway,
            renderer,
            descriptions,
        )?;
    }

    let infra = AtomicUsize::new(0);
    if !jobs.is_empty() {
        let abort = AtomicBool::new(false);
        let next = AtomicUsize::new(0);
        let workers = arm.plan.max_parallel.min(jobs.len());
        let mut fatal: Option<ExperimentError> = None;
        std::thread::scope(|scope| -> Result<(), ExperimentError> {
            let (tx, rx) = mpsc::channel::<(usize, Result<JobResult, ExperimentError>)>();
            for _ in 0..workers {
                let tx = tx.clone();
                let (jobs, next, abort, description_text, fingerprint) =
                    (&jobs, &next, &abort, &description_text, &fingerprint);
                scope.spawn(move || loop {
                    if abort.load(Ordering::SeqCst) {
                        break;
                    }
                    let idx = next.fetch_add(1, Ordering::SeqCst);
                    let Some(&(run, inst_idx)) = jobs.get(idx) else { break };
                    let inst = &dataset[inst_idx];
                    let description = description_text.get(inst.instance_id.as_str());
                    let result = run_job(inst, run, arm, gateway, renderer, description, fingerprint);
                    if tx.send((idx, result)).is_err() {
                        break;
                    }
                });
            }
            drop(tx);

            let mut pending: BTreeMap<usize, JobResult> = BTreeMap::new();
            let mut next_write = 0;
            for (idx, result) in rx {
                match result {
                    Ok(r) => {
                        pending.insert(idx, r);
                    }
                    Err(e) => {
                        abort.store(true, Ordering::SeqCst);
                        fatal.get_or_insert(e);
                    }
                }
                while let Some(r) = pending.remove(&next_write) {
                    if fatal.is_none() {
                        persist(store, &r, &infra)?;
                    }
                    next_write += 1;
                }
            }
            // Jobs after a gap (left by an aborted job) are still persisted.
            for r in pending.into_values() {
                persist(store, &r, &infra)?;
            }
            Ok(())
        })?;
        if let Some(e) = fatal {
            return Err(e);
        }
    }

    let order: HashMap<&str, usize> =
        dataset.iter().enumerate().map(|(i, d)| (d.instance_id.as_str(), i)).collect();
    let mut records: Vec<PredictionRecord> = store
        .latest()?
        .into_iter()
        .filter(|r| r.config_fingerprint == fingerprint && r.run_index < arm.plan.n_runs)
        .filter(|r| order.contains_key(r.instance_id.as_str()))
        .collect();
    records.sort_by_key(|r| (r.run_index, order[r.instance_id.as_str()]));

    Ok(ExperimentOutcome {
        config_fingerprint: fingerprint,
        records,
        issued_jobs: jobs.len(),
        skipped_jobs: skipped,
        infra_failures: infra.load(Ordering::SeqCst),
    })
}

fn persist(store: &RecordStore, r: &JobResult, infra: &AtomicUsize) -> Result<(), StoreError> {
    for raw in &r.raws {
        store.append_raw(raw)?;
    }
    if r.record.infra_error.is_some() {
        infra.fetch_add(1, Ordering::SeqCst);
    }
    store.append_record(&r.record)
}

/// Looks up or generates a self-description for each listed instance index,
/// storing new ones in `cache`. Transport failures and empty generations are
/// returned per instance as `Err(message)`; other errors abort.
pub fn synthesize_descriptions<'d>(
    dataset: &'d [EvalInstance],
    indices: &[usize],
    generator: &ModelConfig,
    max_parallel: usize,
    gateway: &Gateway,
    renderer: &Renderer,
    mut cache: Option<&mut DescriptionCache>,
) -> Result<HashMap<&'d str, Result<String, String>>, ExperimentError> {
    let mut out = HashMap::new();
    let mut missing = Vec::new();
    for &i in indices {
        let id = dataset[i].instance_id.as_str();
        match cache.as_deref().and_then(|c| c.get(id, &generator.model_name)) {
            Some(d) => {
                out.insert(id, Ok(d.text.clone()));
            }
            None => missing.push(i),
        }
    }

    let next = AtomicUsize::new(0);
    let results: Vec<(usize, Result<SelfDescription, ProfileError>)> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..max_parallel.max(1).min(missing.len()))
            .map(|_| {
                let (missing, next) = (&missing, &next);
                scope.spawn(move || {
                    let mut local = Vec::new();
                    while let Some(&i) = missing.get(next.fetch_add(1, Ordering::SeqCst)) {
                        local.push((i, synthesize_self_description(&dataset[i], gateway, generator, renderer)));
                    }
                    local
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().unwrap_or_default()).collect()
    });

    let mut results = results;
    results.sort_by_key(|r| r.0);
    for (i, result) in results {
        let id = dataset[i].instance_id.as_str();
        match result {
            Ok(d) => {
                out.insert(id, Ok(d.text.clone()));
                if let Some(c) = cache.as_deref_mut() {
                    c.insert(d)?;
                }
            }
            Err(ProfileError::Gateway(e)) if e.is_transport() => {
                out.insert(id, Err(format!("self-description: {e}")));
            }
            Err(ProfileError::EmptyGeneration(id_)) => {
                out.insert(id, Err(format!("self-description for {id_} was empty")));
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(out)
}

fn run_job(
    inst: &EvalInstance,
    run: u32,
    arm: &ArmSpec<'_>,
    gateway: &Gateway,
    renderer: &Renderer,
    description: Option<&Result<String, String>>,
    fingerprint: &str,
) -> Result<JobResult, ExperimentError> {
    let seed = arm.plan.seeds[run as usize];
    let key = format!("{}#{}#{}", inst.instance_id, run, &fingerprint[..12]);
    let mut record = PredictionRecord {
        instance_id: inst.instance_id.clone(),
        run_index: run,
        arm_id: arm.arm_id.to_string(),
        config_fingerprint: fingerprint.to_string(),
        parse: None,
        prediction: None,
        ground_truth: inst.target.rating,
        context_scores: inst.context_ratings(),
        raw_ref: None,
        infra_error: None,
        seed: Some(seed),
    };
    let mut raws = Vec::new();

    let description = match description {
        Some(Ok(text)) => Some(text.as_str()),
        Some(Err(message)) => {
            record.infra_error = Some(message.clone());
            return Ok(JobResult { record, raws });
        }
        None => None,
    };
    let profile = assemble_profile(inst, arm.pipeline.profile, description)?;

    let mut model = arm.model.clone();
    if model.send_seed {
        model.extra_params.insert("seed".into(), json!(seed));
    }

    let mut call = |prompt: &RenderedPrompt, stage: &str| -> Result<Option<String>, ExperimentError> {
        let tag = RequestTag { instance_id: inst.instance_id.clone(), run_index: Some(run), stage: stage.into() };
        match gateway.complete(prompt, &model, Some(&tag)) {
            Ok(out) => {
                raws.push(RawEntry {
                    key: key.clone(),
                    instance_id: inst.instance_id.clone(),
                    run_index: run,
                    stage: stage.into(),
                    text: out.text.clone(),
                    request_fingerprint: out.request_fingerprint,
                    attempt_count: out.attempt_count,
                    latency_ms: out.latency_ms,
                });
                Ok(Some(out.text))
            }
            Err(e) if e.is_transport() => {
                record.infra_error = Some(format!("{stage}: {e}"));
                Ok(None)
            }
            Err(e) => Err(e.into()),
        }
    };

    let mut intermediates = Intermediates::new();
    let required = arm.pipeline.strategy.required_intermediates();
    if !required.is_empty() {
        let review_profile = assemble_profile(inst, ProfileFormat::review_score(), None)?;
        for &kind in required {
            let prompt = renderer.render_intermediate(kind, inst, &review_profile)?;
            match call(&prompt, kind.stage())? {
                Some(text) => {
                    intermediates.insert(kind, text);
                }
                None => return Ok(JobResult { record, raws }),
            }
        }
    }

    let prompt = renderer.render(
        inst,
        &profile,
        arm.pipeline.output,
        arm.pipeline.strategy,
        &intermediates,
        inst.scale,
    )?;
    let text = call(&prompt, "final")?;
    if let Some(text) = text {
        let parse = extract_score(&text, inst.scale, arm.pipeline.output.expects_review());
        record.prediction = parse.score().map(|s| s as f64);
        record.parse = Some(parse);
        record.raw_ref = Some(key);
    }
    Ok(JobResult { record, raws })
}
