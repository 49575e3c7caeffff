//! Review corpora: ingestion, item descriptions, evaluation-instance
//! construction, dataset variants and dataset statistics.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::metrics;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid rating scale [{y_min}, {y_max}]: y_min must be below y_max")]
    InvalidScale { y_min: i64, y_max: i64 },
    #[error("item has none of the description fields {0:?}")]
    UnusableItem(Vec<String>),
    #[error("invalid construction parameters: {0}")]
    InvalidParams(String),
    #[error("no candidate users: {0}")]
    NoCandidates(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("instances have differing context sizes ({0} and {1})")]
    MixedContextSize(usize, usize),
    #[error("cannot reduce context to k = {requested}: instance {instance_id} has k = {available}")]
    ReduceTooLarge {
        instance_id: String,
        requested: usize,
        available: usize,
    },
    #[error("malformed dataset line {line}: {reason}")]
    MalformedDataset { line: usize, reason: String },
}

/// Inclusive integer rating range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RatingScale {
    pub y_min: i64,
    pub y_max: i64,
}

impl RatingScale {
    pub fn new(y_min: i64, y_max: i64) -> Result<Self, CorpusError> {
        if y_min >= y_max {
            return Err(CorpusError::InvalidScale { y_min, y_max });
        }
        Ok(Self { y_min, y_max })
    }

    pub fn contains(&self, rating: i64) -> bool {
        (self.y_min..=self.y_max).contains(&rating)
    }

    pub fn clamp(&self, value: f64) -> f64 {
        value.clamp(self.y_min as f64, self.y_max as f64)
    }
}

impl Default for RatingScale {
    fn default() -> Self {
        Self { y_min: 1, y_max: 10 }
    }
}

/// One user-item interaction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewRecord {
    pub user_id: String,
    pub item_id: String,
    pub item_description: String,
    pub review_text: String,
    pub rating: i64,
    pub timestamp: Option<i64>,
}

/// k in-context records and one target record for a single user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub instance_id: String,
    pub context: Vec<ReviewRecord>,
    pub target: ReviewRecord,
    pub scale: RatingScale,
    pub source_dataset: String,
}

impl EvalInstance {
    pub fn k(&self) -> usize {
        self.context.len()
    }

    pub fn context_ratings(&self) -> Vec<i64> {
        self.context.iter().map(|r| r.rating).collect()
    }

    fn all_records(&self) -> impl Iterator<Item = &ReviewRecord> {
        self.context.iter().chain(std::iter::once(&self.target))
    }
}

// ---------------------------------------------------------------------------
// Ingestion
// ---------------------------------------------------------------------------

/// Maps source fields of a line-delimited corpus onto [`ReviewRecord`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IngestSchema {
    pub user_field: String,
    pub item_id_field: String,
    pub item_field: String,
    pub review_field: String,
    pub rating_field: String,
    pub timestamp_field: String,
    /// Ordered list of item fields concatenated into the description.
    pub recipe: Vec<String>,
    pub scale: RatingScale,
    /// Score-only corpora may carry empty review texts.
    pub allow_empty_review: bool,
}

impl Default for IngestSchema {
    fn default() -> Self {
        Self {
            user_field: "user_id".into(),
            item_id_field: "item_id".into(),
            item_field: "item".into(),
            review_field: "review".into(),
            rating_field: "rating".into(),
            timestamp_field: "timestamp".into(),
            recipe: vec!["description".into()],
            scale: RatingScale::default(),
            allow_empty_review: false,
        }
    }
}

impl IngestSchema {
    /// Recipe corpus: name, description and steps.
    pub fn recipe_corpus(scale: RatingScale) -> Self {
        Self {
            recipe: vec!["name".into(), "description".into(), "steps".into()],
            scale,
            ..Self::default()
        }
    }

    /// Book reviews: title, subtitle and features.
    pub fn books_corpus(scale: RatingScale) -> Self {
        Self {
            recipe: vec!["title".into(), "subtitle".into(), "features".into()],
            scale,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SkippedLine {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct LoadSummary {
    pub records: Vec<ReviewRecord>,
    pub skipped: Vec<SkippedLine>,
}

/// Loads every parseable record from a line-delimited JSON corpus.
///
/// Lines that fail validation are skipped and reported in the summary; only
/// an unreadable file is fatal.
pub fn load_records(path: &Path, schema: &IngestSchema) -> Result<LoadSummary, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_records(BufReader::new(file), schema).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn parse_records<R: BufRead>(
    reader: R,
    schema: &IngestSchema,
) -> std::io::Result<LoadSummary> {
    let mut summary = LoadSummary::default();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_record_line(&line, schema) {
            Ok(record) => summary.records.push(record),
            Err(reason) => summary.skipped.push(SkippedLine {
                line: idx + 1,
                reason,
            }),
        }
    }
    if !summary.skipped.is_empty() {
        log::warn!("skipped {} malformed corpus lines", summary.skipped.len());
    }
    Ok(summary)
}

fn parse_record_line(line: &str, schema: &IngestSchema) -> Result<ReviewRecord, String> {
    let value: Value = serde_json::from_str(line).map_err(|e| format!("invalid json: {e}"))?;
    let obj = value.as_object().ok_or("line is not an object")?;

    let user_id = id_field(obj, &schema.user_field)?;
    let item_id = id_field(obj, &schema.item_id_field)?;
    let item = obj
        .get(&schema.item_field)
        .and_then(Value::as_object)
        .ok_or_else(|| format!("missing object field `{}`", schema.item_field))?;
    let item_description =
        build_item_description(item, &schema.recipe).map_err(|e| e.to_string())?;
    let review_text = match obj.get(&schema.review_field) {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Null) | None if schema.allow_empty_review => String::new(),
        _ => return Err(format!("missing string field `{}`", schema.review_field)),
    };
    if review_text.is_empty() && !schema.allow_empty_review {
        return Err("empty review text".into());
    }
    let rating = obj
        .get(&schema.rating_field)
        .ok_or_else(|| format!("missing field `{}`", schema.rating_field))
        .and_then(|v| integral(v).ok_or_else(|| format!("non-integer rating {v}")))?;
    if !schema.scale.contains(rating) {
        return Err(format!(
            "rating {rating} outside [{}, {}]",
            schema.scale.y_min, schema.scale.y_max
        ));
    }
    let timestamp = match obj.get(&schema.timestamp_field) {
        None | Some(Value::Null) => None,
        Some(v) => Some(integral(v).ok_or_else(|| format!("non-integer timestamp {v}"))?),
    };

    Ok(ReviewRecord {
        user_id,
        item_id,
        item_description,
        review_text,
        rating,
        timestamp,
    })
}

fn id_field(obj: &Map<String, Value>, name: &str) -> Result<String, String> {
    match obj.get(name) {
        Some(Value::String(s)) if !s.is_empty() => Ok(s.clone()),
        Some(Value::Number(n)) => Ok(n.to_string()),
        _ => Err(format!("missing id field `{name}`")),
    }
}

/// Integer value of a JSON number; floats are accepted only when integral.
fn integral(value: &Value) -> Option<i64> {
    let n = value.as_number()?;
    if let Some(i) = n.as_i64() {
        return Some(i);
    }
    let f = n.as_f64()?;
    (f.fract() == 0.0 && f.abs() < 9.0e15).then_some(f as i64)
}

/// Concatenates the recipe fields present in `raw_item`, in recipe order,
/// separated by one blank line.
///
/// Strings are used as-is, arrays of scalars are joined line by line, other
/// scalars are stringified. Null and empty values count as absent.
pub fn build_item_description(
    raw_item: &Map<String, Value>,
    recipe: &[String],
) -> Result<String, CorpusError> {
    let parts: Vec<String> = recipe
        .iter()
        .filter_map(|field| raw_item.get(field).and_then(field_text))
        .collect();
    if parts.is_empty() {
        return Err(CorpusError::UnusableItem(recipe.to_vec()));
    }
    Ok(parts.join("\n\n"))
}

fn field_text(value: &Value) -> Option<String> {
    let text = match value {
        Value::Null => return None,
        Value::String(s) => s.clone(),
        Value::Array(items) => items
            .iter()
            .filter_map(field_text)
            .collect::<Vec<_>>()
            .join("\n"),
        Value::Bool(_) | Value::Number(_) => value.to_string(),
        Value::Object(_) => value.to_string(),
    };
    (!text.trim().is_empty()).then_some(text)
}

// ---------------------------------------------------------------------------
// Instance construction
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstructParams {
    /// Minimum review length in characters (inclusive).
    pub min_len: usize,
    /// Maximum review length in characters (exclusive).
    pub max_len: Option<usize>,
    pub k: usize,
    pub n: usize,
    pub seed: u64,
    pub scale: RatingScale,
    /// Label stored as `source_dataset` on every instance.
    pub label: String,
}

impl ConstructParams {
    fn validate(&self) -> Result<(), CorpusError> {
        if self.k == 0 {
            return Err(CorpusError::InvalidParams("k must be at least 1".into()));
        }
        if self.n == 0 {
            return Err(CorpusError::InvalidParams("n must be at least 1".into()));
        }
        if let Some(max) = self.max_len {
            if max <= self.min_len {
                return Err(CorpusError::InvalidParams(format!(
                    "max_len {max} must exceed min_len {}",
                    self.min_len
                )));
            }
        }
        Ok(())
    }

    fn admits(&self, text: &str) -> bool {
        let len = text.chars().count();
        len >= self.min_len && self.max_len.is_none_or(|max| len < max)
    }

    fn describe_filter(&self) -> String {
        match self.max_len {
            Some(max) => format!("{} <= review length < {max}", self.min_len),
            None => format!("review length >= {}", self.min_len),
        }
    }
}

/// Samples at most `n` users with `k + 1` eligible reviews each and emits one
/// instance per user.
///
/// Users with fully timestamped reviews contribute their `k + 1` most recent
/// eligible reviews in chronological order, the latest being the target.
/// Otherwise `k + 1` reviews are sampled under the seed and the last sampled
/// one becomes the target.
pub fn construct_instances(
    records: &[ReviewRecord],
    params: &ConstructParams,
) -> Result<Vec<EvalInstance>, CorpusError> {
    params.validate()?;
    if records.is_empty() {
        return Err(CorpusError::NoCandidates("the corpus has no records".into()));
    }

    let mut by_user: BTreeMap<&str, Vec<&ReviewRecord>> = BTreeMap::new();
    let mut eligible_total = 0usize;
    for record in records.iter().filter(|r| params.admits(&r.review_text)) {
        eligible_total += 1;
        by_user.entry(record.user_id.as_str()).or_default().push(record);
    }
    if eligible_total == 0 {
        return Err(CorpusError::NoCandidates(format!(
            "no review satisfies {}",
            params.describe_filter()
        )));
    }

    let needed = params.k + 1;
    let mut candidates: Vec<&str> = by_user
        .iter()
        .filter(|(_, reviews)| reviews.len() >= needed)
        .map(|(user, _)| *user)
        .collect();
    if candidates.is_empty() {
        return Err(CorpusError::NoCandidates(format!(
            "no user has at least k + 1 = {needed} reviews satisfying {}",
            params.describe_filter()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    candidates.shuffle(&mut rng);
    candidates.truncate(params.n);

    let mut instances = Vec::with_capacity(candidates.len());
    for user in candidates {
        let reviews = &by_user[user];
        let mut chosen: Vec<ReviewRecord> = if reviews.iter().all(|r| r.timestamp.is_some()) {
            let mut ordered = reviews.clone();
            // Stable sort keeps file order among equal timestamps.
            ordered.sort_by_key(|r| r.timestamp);
            ordered[ordered.len() - needed..]
                .iter()
                .map(|r| (*r).clone())
                .collect()
        } else {
            rand::seq::index::sample(&mut rng, reviews.len(), needed)
                .into_iter()
                .map(|i| reviews[i].clone())
                .collect()
        };
        let target = chosen.pop().expect("needed >= 2");
        instances.push(EvalInstance {
            instance_id: format!("{}:{}", params.label, user),
            context: chosen,
            target,
            scale: params.scale,
            source_dataset: params.label.clone(),
        });
    }
    Ok(instances)
}

/// Reassigns in-context review texts by a random cyclic permutation across
/// the whole dataset. Ratings, items and targets stay in place.
pub fn make_shuffle_variant(
    dataset: &[EvalInstance],
    seed: u64,
) -> Result<Vec<EvalInstance>, CorpusError> {
    let k = uniform_k(dataset)?;
    let slots = dataset.len() * k;
    let mut out = dataset.to_vec();
    if slots < 2 {
        log::warn!("shuffle variant of a single in-context slot is the identity");
        return Ok(out);
    }

    // Sattolo's algorithm: a uniformly random single cycle, so no slot keeps
    // its own text.
    let mut source: Vec<usize> = (0..slots).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..slots).rev() {
        let j = rng.random_range(0..i);
        source.swap(i, j);
    }

    for (slot, &from) in source.iter().enumerate() {
        let text = dataset[from / k].context[from % k].review_text.clone();
        out[slot / k].context[slot % k].review_text = text;
    }
    Ok(out)
}

fn uniform_k(dataset: &[EvalInstance]) -> Result<usize, CorpusError> {
    let first = dataset.first().ok_or(CorpusError::EmptyDataset)?.k();
    for instance in dataset {
        if instance.k() != first {
            return Err(CorpusError::MixedContextSize(first, instance.k()));
        }
    }
    Ok(first)
}

/// Keeps the first `k_new` context records of every instance.
pub fn reduce_context(
    dataset: &[EvalInstance],
    k_new: usize,
) -> Result<Vec<EvalInstance>, CorpusError> {
    if k_new == 0 {
        return Err(CorpusError::InvalidParams("k_new must be at least 1".into()));
    }
    dataset
        .iter()
        .map(|instance| {
            if k_new > instance.k() {
                return Err(CorpusError::ReduceTooLarge {
                    instance_id: instance.instance_id.clone(),
                    requested: k_new,
                    available: instance.k(),
                });
            }
            let mut reduced = instance.clone();
            reduced.context.truncate(k_new);
            Ok(reduced)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Statistics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub n_instances: usize,
    pub avg_item_description_len: f64,
    pub avg_review_len: f64,
    pub avg_per_user_score_stddev: f64,
    pub label_histogram: BTreeMap<i64, usize>,
    pub representativeness_rho: Option<f64>,
}

/// Averages over every review in the dataset, context and target alike.
///
/// `user_means` holds each user's mean rating over the full source corpus;
/// when given, the Spearman correlation between it and the mean of the
/// in-context ratings is reported as `representativeness_rho`.
pub fn dataset_stats(
    dataset: &[EvalInstance],
    user_means: Option<&HashMap<String, f64>>,
) -> Result<DatasetStats, CorpusError> {
    if dataset.is_empty() {
        return Err(CorpusError::EmptyDataset);
    }
    let mut n_reviews = 0usize;
    let mut desc_chars = 0usize;
    let mut review_chars = 0usize;
    let mut histogram = BTreeMap::new();
    let mut stddev_sum = 0.0;

    for instance in dataset {
        let ratings: Vec<f64> = instance.all_records().map(|r| r.rating as f64).collect();
        stddev_sum += population_stddev(&ratings);
        for record in instance.all_records() {
            n_reviews += 1;
            desc_chars += record.item_description.chars().count();
            review_chars += record.review_text.chars().count();
            *histogram.entry(record.rating).or_insert(0) += 1;
        }
    }

    let representativeness_rho = user_means.and_then(|means| {
        let (overall, sampled): (Vec<f64>, Vec<f64>) = dataset
            .iter()
            .filter_map(|instance| {
                let mean = *means.get(&instance.target.user_id)?;
                let ctx = instance.context_ratings();
                let ctx_mean = ctx.iter().sum::<i64>() as f64 / ctx.len() as f64;
                Some((mean, ctx_mean))
            })
            .unzip();
        metrics::spearman(&overall, &sampled).ok().flatten()
    });

    Ok(DatasetStats {
        n_instances: dataset.len(),
        avg_item_description_len: desc_chars as f64 / n_reviews as f64,
        avg_review_len: review_chars as f64 / n_reviews as f64,
        avg_per_user_score_stddev: stddev_sum / dataset.len() as f64,
        label_histogram: histogram,
        representativeness_rho,
    })
}

pub(crate) fn population_stddev(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Mean rating per user over a whole corpus.
pub fn user_mean_ratings(records: &[ReviewRecord]) -> HashMap<String, f64> {
    let mut acc: HashMap<&str, (i64, usize)> = HashMap::new();
    for r in records {
        let e = acc.entry(&r.user_id).or_insert((0, 0));
        e.0 += r.rating;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(u, (sum, n))| (u.to_string(), sum as f64 / n as f64))
        .collect()
}

// ---------------------------------------------------------------------------
// Dataset files
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct DatasetLine {
    instance_id: String,
    role: String,
    user_id: String,
    item_id: String,
    item: BTreeMap<String, String>,
    review: String,
    rating: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    timestamp: Option<i64>,
}

const DESCRIPTION_KEY: &str = "description";

/// Writes instances one record per line, tagged with `instance_id` and
/// `role` (`context:<index>` or `target`).
pub fn write_instances<W: Write>(mut out: W, dataset: &[EvalInstance]) -> std::io::Result<()> {
    for instance in dataset {
        let roles = (0..instance.k())
            .map(|i| format!("context:{i}"))
            .chain(std::iter::once("target".to_string()));
        for (record, role) in instance.all_records().zip(roles) {
            let line = DatasetLine {
                instance_id: instance.instance_id.clone(),
                role,
                user_id: record.user_id.clone(),
                item_id: record.item_id.clone(),
                item: BTreeMap::from([(
                    DESCRIPTION_KEY.to_string(),
                    record.item_description.clone(),
                )]),
                review: record.review_text.clone(),
                rating: record.rating,
                timestamp: record.timestamp,
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()
}

pub fn save_instances(path: &Path, dataset: &[EvalInstance]) -> Result<(), CorpusError> {
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err)?;
    }
    let file = File::create(path).map_err(io_err)?;
    write_instances(std::io::BufWriter::new(file), dataset).map_err(io_err)
}

/// Reads a constructed dataset. Instances keep first-appearance order and
/// context records are ordered by their role index.
pub fn read_instances<R: BufRead>(
    reader: R,
    scale: RatingScale,
    label: &str,
) -> Result<Vec<EvalInstance>, CorpusError> {
    struct Partial {
        context: BTreeMap<usize, ReviewRecord>,
        target: Option<ReviewRecord>,
    }
    let mut order: Vec<String> = Vec::new();
    let mut partial: HashMap<String, Partial> = HashMap::new();

    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let malformed = |reason: String| CorpusError::MalformedDataset {
            line: lineno,
            reason,
        };
        let line = line.map_err(|e| malformed(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: DatasetLine =
            serde_json::from_str(&line).map_err(|e| malformed(e.to_string()))?;
        if !scale.contains(parsed.rating) {
            return Err(malformed(format!("rating {} outside scale", parsed.rating)));
        }
        let item_description = parsed
            .item
            .get(DESCRIPTION_KEY)
            .cloned()
            .filter(|d| !d.is_empty())
            .ok_or_else(|| malformed("missing item description".into()))?;
        let record = ReviewRecord {
            user_id: parsed.user_id,
            item_id: parsed.item_id,
            item_description,
            review_text: parsed.review,
            rating: parsed.rating,
            timestamp: parsed.timestamp,
        };
        let entry = partial.entry(parsed.instance_id.clone()).or_insert_with(|| {
            order.push(parsed.instance_id.clone());
            Partial {
                context: BTreeMap::new(),
                target: None,
            }
        });
        if parsed.role == "target" {
            if entry.target.replace(record).is_some() {
                return Err(malformed(format!("duplicate target for {}", parsed.instance_id)));
            }
        } else if let Some(index) = parsed.role.strip_prefix("context:") {
            let index: usize = index
                .parse()
                .map_err(|_| malformed(format!("bad role `{}`", parsed.role)))?;
            if entry.context.insert(index, record).is_some() {
                return Err(malformed(format!("duplicate role `{}`", parsed.role)));
            }
        } else {
            return Err(malformed(format!("bad role `{}`", parsed.role)));
        }
    }

    order
        .into_iter()
        .map(|id| {
            let p = partial.remove(&id).expect("registered on first sight");
            let malformed = |reason: String| CorpusError::MalformedDataset { line: 0, reason };
            let target = p
                .target
                .ok_or_else(|| malformed(format!("instance {id} has no target")))?;
            if p.context.is_empty() || p.context.keys().copied().ne(0..p.context.len()) {
                return Err(malformed(format!(
                    "instance {id} context indices are not 0..k"
                )));
            }
            Ok(EvalInstance {
                instance_id: id,
                context: p.context.into_values().collect(),
                target,
                scale,
                source_dataset: label.to_string(),
            })
        })
        .collect()
}

pub fn open_instances(
    path: &Path,
    scale: RatingScale,
    label: Option<&str>,
) -> Result<Vec<EvalInstance>, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_instances(BufReader::new(file), scale, label.unwrap_or(&stem))
}

/// Canonical byte form of a dataset, used for determinism checks.
pub fn instances_to_bytes(dataset: &[EvalInstance]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_instances(&mut buf, dataset).expect("writing to a Vec cannot fail");
    buf
}

/// Distinct users in a dataset.
pub fn user_ids(dataset: &[EvalInstance]) -> HashSet<&str> {
    dataset.iter().map(|i| i.target.user_id.as_str()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    fn rec(user: &str, item: &str, text: &str, rating: i64, ts: Option<i64>) -> ReviewRecord {
        ReviewRecord {
            user_id: user.into(),
            item_id: item.into(),
            item_description: format!("desc of {item}"),
            review_text: text.into(),
            rating,
            timestamp: ts,
        }
    }

    fn params(min_len: usize, max_len: Option<usize>, k: usize, n: usize) -> ConstructParams {
        ConstructParams {
            min_len,
            max_len,
            k,
            n,
            seed: 7,
            scale: RatingScale::default(),
            label: "toy".into(),
        }
    }

    fn toy_instance(id: &str, ratings: &[i64], texts: &[&str]) -> EvalInstance {
        let mut records: Vec<ReviewRecord> = ratings
            .iter()
            .zip(texts)
            .enumerate()
            .map(|(i, (r, t))| rec(id, &format!("{id}-i{i}"), t, *r, None))
            .collect();
        let target = records.pop().unwrap();
        EvalInstance {
            instance_id: id.into(),
            context: records,
            target,
            scale: RatingScale::default(),
            source_dataset: "toy".into(),
        }
    }

    #[test]
    fn scale_rejects_inverted_bounds() {
        assert!(RatingScale::new(5, 5).is_err());
        assert!(RatingScale::new(1, 5).is_ok());
    }

    #[test]
    fn load_three_valid_lines() {
        let data = r#"{"user_id":"u1","item_id":"i1","item":{"description":"d"},"review":"nice","rating":7}
{"user_id":"u1","item_id":"i2","item":{"description":"d"},"review":"meh","rating":4,"timestamp":12}
{"user_id":"u2","item_id":"i1","item":{"description":"d"},"review":"great","rating":10}
"#;
        let s = parse_records(data.as_bytes(), &IngestSchema::default()).unwrap();
        assert_eq!(s.records.len(), 3);
        assert!(s.skipped.is_empty());
        assert_eq!(s.records[1].timestamp, Some(12));
    }

    #[test]
    fn load_skips_missing_rating() {
        let data = r#"{"user_id":"u1","item_id":"i1","item":{"description":"d"},"review":"nice","rating":7}
{"user_id":"u1","item_id":"i2","item":{"description":"d"},"review":"meh"}
"#;
        let s = parse_records(data.as_bytes(), &IngestSchema::default()).unwrap();
        assert_eq!(s.records.len(), 1);
        assert_eq!(s.skipped.len(), 1);
        assert_eq!(s.skipped[0].line, 2);
    }

    #[test]
    fn load_skips_out_of_scale_and_garbage() {
        let data = r#"{"user_id":"u1","item_id":"i1","item":{"description":"d"},"review":"x","rating":11}
not json
{"user_id":"u1","item_id":"i1","item":{"description":"d"},"review":"x","rating":5.0}
"#;
        let s = parse_records(data.as_bytes(), &IngestSchema::default()).unwrap();
        assert_eq!(s.records.len(), 1);
        assert_eq!(s.records[0].rating, 5);
        assert_eq!(s.skipped.len(), 2);
    }

    #[test]
    fn load_missing_file_is_fatal() {
        let err = load_records(Path::new("/nonexistent/corpus.jsonl"), &IngestSchema::default());
        assert!(matches!(err, Err(CorpusError::Io { .. })));
    }

    #[test]
    fn description_concatenates_in_recipe_order() {
        let item = json!({"features": "C", "title": "A", "subtitle": "B"});
        let recipe: Vec<String> = ["title", "subtitle", "features"].map(String::from).to_vec();
        assert_eq!(
            build_item_description(item.as_object().unwrap(), &recipe).unwrap(),
            "A\n\nB\n\nC"
        );
    }

    #[test]
    fn description_omits_absent_fields() {
        let item = json!({"name": "Soup"});
        let recipe: Vec<String> = ["name", "description", "steps"].map(String::from).to_vec();
        assert_eq!(build_item_description(item.as_object().unwrap(), &recipe).unwrap(), "Soup");
    }

    #[test]
    fn description_joins_list_fields() {
        let item = json!({"title": "T", "features": ["a", "b"], "subtitle": null});
        let recipe: Vec<String> = ["title", "subtitle", "features"].map(String::from).to_vec();
        assert_eq!(
            build_item_description(item.as_object().unwrap(), &recipe).unwrap(),
            "T\n\na\nb"
        );
    }

    #[test]
    fn description_of_empty_item_fails() {
        let item = Map::new();
        assert!(matches!(
            build_item_description(&item, &["name".to_string()]),
            Err(CorpusError::UnusableItem(_))
        ));
    }

    #[test]
    fn construct_requires_k_plus_one() {
        let records: Vec<_> = (0..3)
            .flat_map(|u| (0..5).map(move |i| rec(&format!("u{u}"), &format!("i{i}"), "text", 5, None)))
            .collect();
        let err = construct_instances(&records, &params(0, None, 5, 10)).unwrap_err();
        assert!(err.to_string().contains("k + 1 = 6"), "{err}");
    }

    #[test]
    fn construct_reports_length_filter() {
        let records = vec![rec("u", "i", "short", 5, None)];
        let err = construct_instances(&records, &params(200, None, 1, 1)).unwrap_err();
        assert!(err.to_string().contains("review length >= 200"), "{err}");
    }

    #[test]
    fn construct_uses_chronology_when_timestamped() {
        let records: Vec<_> = [5, 1, 4, 2, 3]
            .iter()
            .map(|&t| rec("u", &format!("i{t}"), "text", t, Some(t * 100)))
            .collect();
        let out = construct_instances(&records, &params(0, None, 2, 1)).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].context_ratings(), vec![3, 4]);
        assert_eq!(out[0].target.rating, 5);
        assert_eq!(out[0].instance_id, "toy:u");
    }

    #[test]
    fn construct_random_fallback_is_deterministic() {
        let records: Vec<_> = (0..8)
            .flat_map(|u| (0..9).map(move |i| rec(&format!("u{u}"), &format!("i{i}"), "some text", 1 + i, None)))
            .collect();
        let a = construct_instances(&records, &params(0, None, 3, 5)).unwrap();
        let b = construct_instances(&records, &params(0, None, 3, 5)).unwrap();
        assert_eq!(instances_to_bytes(&a), instances_to_bytes(&b));
        assert_eq!(a.len(), 5);
        assert_eq!(user_ids(&a).len(), 5);
    }

    #[test]
    fn shuffle_two_instances_swaps_texts() {
        let d = vec![
            toy_instance("a", &[3, 4], &["T1", "ta"]),
            toy_instance("b", &[8, 9], &["T2", "tb"]),
        ];
        let s = make_shuffle_variant(&d, 1).unwrap();
        assert_eq!(s[0].context[0].review_text, "T2");
        assert_eq!(s[1].context[0].review_text, "T1");
        assert_eq!(s[0].context_ratings(), vec![3]);
        assert_eq!(s[0].target, d[0].target);
    }

    #[test]
    fn shuffle_single_slot_is_identity() {
        let d = vec![toy_instance("a", &[3, 4], &["T1", "ta"])];
        assert_eq!(make_shuffle_variant(&d, 3).unwrap(), d);
    }

    #[test]
    fn shuffle_rejects_mixed_k() {
        let d = vec![
            toy_instance("a", &[3, 4], &["x", "y"]),
            toy_instance("b", &[3, 4, 5], &["x", "y", "z"]),
        ];
        assert!(matches!(
            make_shuffle_variant(&d, 0),
            Err(CorpusError::MixedContextSize(1, 2))
        ));
        assert!(matches!(make_shuffle_variant(&[], 0), Err(CorpusError::EmptyDataset)));
    }

    #[test]
    fn reduce_context_keeps_prefix() {
        let d = vec![toy_instance("a", &[1, 2, 3, 4, 5, 6], &["a", "b", "c", "d", "e", "f"])];
        assert_eq!(reduce_context(&d, 5).unwrap(), d);
        assert_eq!(reduce_context(&d, 1).unwrap()[0].context_ratings(), vec![1]);
        assert_eq!(reduce_context(&d, 3).unwrap()[0].context_ratings(), vec![1, 2, 3]);
        assert!(reduce_context(&d, 6).is_err());
        assert!(reduce_context(&d, 0).is_err());
    }

    #[test]
    fn stats_constant_ratings_have_zero_spread() {
        let d = vec![toy_instance("a", &[8; 6], &["x"; 6])];
        let s = dataset_stats(&d, None).unwrap();
        assert_eq!(s.avg_per_user_score_stddev, 0.0);
        assert_eq!(s.label_histogram, BTreeMap::from([(8, 6)]));
    }

    #[test]
    fn stats_hand_computed_fixture() {
        // Instance a: ratings [2, 4] (pop. sd 1), review lengths 3 and 5,
        // descriptions "desc of a-i0"/"desc of a-i1" (12 chars each).
        // Instance b: ratings [6, 6, 9] (pop. sd sqrt(2)), review lengths 1, 2, 0,
        // descriptions 12 chars each.
        let d = vec![
            toy_instance("a", &[2, 4], &["abc", "abcde"]),
            toy_instance("b", &[6, 6, 9], &["a", "ab", ""]),
        ];
        let s = dataset_stats(&d, None).unwrap();
        assert_eq!(s.n_instances, 2);
        assert!((s.avg_review_len - 11.0 / 5.0).abs() < 1e-12);
        assert!((s.avg_item_description_len - 12.0).abs() < 1e-12);
        assert!((s.avg_per_user_score_stddev - (1.0 + 2f64.sqrt()) / 2.0).abs() < 1e-12);
        assert_eq!(s.label_histogram.values().sum::<usize>(), 5);
        assert_eq!(s.representativeness_rho, None);
    }

    #[test]
    fn stats_representativeness_uses_context_means() {
        let d = vec![
            toy_instance("a", &[2, 4, 1], &["x"; 3]),
            toy_instance("b", &[6, 6, 1], &["x"; 3]),
            toy_instance("c", &[9, 9, 1], &["x"; 3]),
        ];
        let means = HashMap::from([
            ("a".to_string(), 3.5),
            ("b".to_string(), 5.0),
            ("c".to_string(), 9.9),
        ]);
        let s = dataset_stats(&d, Some(&means)).unwrap();
        assert_eq!(s.representativeness_rho, Some(1.0));
    }

    #[test]
    fn dataset_file_roundtrip() {
        let d = vec![
            toy_instance("a", &[2, 4, 1], &["x", "y", "z"]),
            toy_instance("b", &[6, 6], &["p \"q\"", "r\nnewline"]),
        ];
        let bytes = instances_to_bytes(&d);
        let back = read_instances(bytes.as_slice(), RatingScale::default(), "toy").unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn dataset_file_rejects_gaps() {
        let line = |role: &str| {
            format!(
                r#"{{"instance_id":"x","role":"{role}","user_id":"u","item_id":"i","item":{{"description":"d"}},"review":"r","rating":3}}"#
            )
        };
        let data = format!("{}\n{}\n", line("context:1"), line("target"));
        assert!(read_instances(data.as_bytes(), RatingScale::default(), "t").is_err());
    }

    fn arb_dataset() -> impl Strategy<Value = Vec<EvalInstance>> {
        (1usize..6, 1usize..8).prop_flat_map(|(k, n)| {
            proptest::collection::vec(
                proptest::collection::vec((1i64..=10, "[a-z]{0,6}"), k + 1),
                n,
            )
            .prop_map(|rows| {
                rows.into_iter()
                    .enumerate()
                    .map(|(i, cells)| {
                        let ratings: Vec<i64> = cells.iter().map(|c| c.0).collect();
                        let texts: Vec<String> =
                            cells.iter().enumerate().map(|(j, c)| format!("{i}/{j}/{}", c.1)).collect();
                        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
                        toy_instance(&format!("inst{i}"), &ratings, &refs)
                    })
                    .collect()
            })
        })
    }

    proptest! {
        #[test]
        fn shuffle_preserves_labels_and_text_multiset(d in arb_dataset(), seed in any::<u64>()) {
            let s = make_shuffle_variant(&d, seed).unwrap();
            prop_assert_eq!(s.len(), d.len());
            let before = dataset_stats(&d, None).unwrap();
            let after = dataset_stats(&s, None).unwrap();
            prop_assert_eq!(before.label_histogram, after.label_histogram);
            let texts = |d: &[EvalInstance]| {
                let mut t: Vec<String> = d.iter().flat_map(|i| i.context.iter().map(|r| r.review_text.clone())).collect();
                t.sort();
                t
            };
            prop_assert_eq!(texts(&d), texts(&s));
            let slots = d.len() * d[0].k();
            for (orig, shuf) in d.iter().zip(&s) {
                prop_assert_eq!(&orig.target, &shuf.target);
                for (a, b) in orig.context.iter().zip(&shuf.context) {
                    prop_assert_eq!(&a.item_description, &b.item_description);
                    prop_assert_eq!(a.rating, b.rating);
                    // texts are unique per slot, so equality means the slot kept its own text
                    if slots > 1 {
                        prop_assert_ne!(&a.review_text, &b.review_text);
                    }
                }
            }
        }

        #[test]
        fn reduce_context_composes(d in arb_dataset(), a in 1usize..6, b in 1usize..6) {
            let k = d[0].k();
            let (hi, lo) = (a.max(b).min(k), a.min(b).min(k));
            let twice = reduce_context(&reduce_context(&d, hi).unwrap(), lo).unwrap();
            prop_assert_eq!(twice, reduce_context(&d, lo).unwrap());
        }

        #[test]
        fn histogram_counts_every_review(d in arb_dataset()) {
            let s = dataset_stats(&d, None).unwrap();
            let total: usize = s.label_histogram.values().sum();
            prop_assert_eq!(total, (d[0].k() + 1) * d.len());
        }
    }
}
