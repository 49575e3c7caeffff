//! Evaluation statistics: rank correlations, RMSE, Welch's t-test,
//! extrapolation precision/recall and per-arm aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::population_stddev;
use crate::extract::ParseResult;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} values, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("non-finite input value")]
    NonFinite,
    #[error("no records to aggregate")]
    NoRecords,
}

/// One prediction (or baseline estimate) for one instance in one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub instance_id: String,
    pub run_index: u32,
    pub arm_id: String,
    /// Fingerprint of the arm configuration that produced the record.
    pub config_fingerprint: String,
    /// Parse outcome for LLM arms; absent for baselines and infrastructure
    /// failures.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse: Option<ParseResult>,
    pub prediction: Option<f64>,
    pub ground_truth: i64,
    pub context_scores: Vec<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_ref: Option<String>,
    /// Transport-level failure; such records are retried on resume and never
    /// evaluated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub infra_error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl PredictionRecord {
    pub fn is_infra_failure(&self) -> bool {
        self.infra_error.is_some()
    }

    pub fn is_parse_failure(&self) -> bool {
        self.infra_error.is_none() && self.parse.as_ref().is_some_and(ParseResult::is_failure)
    }
}

// ---------------------------------------------------------------------------
// Correlations and errors
// ---------------------------------------------------------------------------

fn check_pair(xs: &[f64], ys: &[f64], min: usize) -> Result<(), MetricsError> {
    if xs.len() != ys.len() {
        return Err(MetricsError::LengthMismatch(xs.len(), ys.len()));
    }
    if xs.len() < min {
        return Err(MetricsError::TooFew { needed: min, got: xs.len() });
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    Ok(())
}

/// 1-based ranks with ties given their mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mean_rank;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman's rho. `Ok(None)` when either side has no rank variance.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<Option<f64>, MetricsError> {
    check_pair(xs, ys, 2)?;
    Ok(pearson(&average_ranks(xs), &average_ranks(ys)))
}

/// Kendall's tau-b in O(n log n) (Knight's algorithm). `Ok(None)` when
/// either side is entirely tied.
pub fn kendall_tau(xs: &[f64], ys: &[f64]) -> Result<Option<f64>, MetricsError> {
    check_pair(xs, ys, 2)?;
    let n = xs.len();
    let mut pairs: Vec<(f64, f64)> = xs.iter().copied().zip(ys.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));

    let n0 = (n * (n - 1) / 2) as u64;
    let tied_x = tied_pairs(pairs.iter().map(|p| p.0));
    let tied_xy = tied_pairs_by(&pairs, |a, b| a == b);

    let mut ys_sorted: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let swaps = merge_sort_count(&mut ys_sorted);
    let tied_y = tied_pairs(ys_sorted.iter().copied());

    let denom = ((n0 - tied_x) as f64) * ((n0 - tied_y) as f64);
    if denom == 0.0 {
        return Ok(None);
    }
    // concordant - discordant = n0 - tx - ty + txy - 2 * swaps
    let numer = n0 as f64 - tied_x as f64 - tied_y as f64 + tied_xy as f64 - 2.0 * swaps as f64;
    Ok(Some((numer / denom.sqrt()).clamp(-1.0, 1.0)))
}

/// Pairs tied within runs of equal consecutive values of a sorted sequence.
fn tied_pairs(sorted: impl Iterator<Item = f64>) -> u64 {
    let mut total = 0u64;
    let mut run = 0u64;
    let mut prev: Option<f64> = None;
    for v in sorted {
        if prev == Some(v) {
            run += 1;
        } else {
            total += run * (run + 1) / 2;
            run = 0;
        }
        prev = Some(v);
    }
    total + run * (run + 1) / 2
}

fn tied_pairs_by<T>(sorted: &[T], eq: impl Fn(&T, &T) -> bool) -> u64 {
    let mut total = 0u64;
    let mut run = 0u64;
    for w in sorted.windows(2) {
        if eq(&w[0], &w[1]) {
            run += 1;
        } else {
            total += run * (run + 1) / 2;
            run = 0;
        }
    }
    total + run * (run + 1) / 2
}

/// Stable merge sort returning the number of strict inversions.
fn merge_sort_count(values: &mut [f64]) -> u64 {
    let n = values.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut swaps = merge_sort_count(&mut values[..mid]) + merge_sort_count(&mut values[mid..]);
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if values[j] < values[i] {
            swaps += (mid - i) as u64;
            merged.push(values[j]);
            j += 1;
        } else {
            merged.push(values[i]);
            i += 1;
        }
    }
    merged.extend_from_slice(&values[i..mid]);
    merged.extend_from_slice(&values[j..n]);
    values.copy_from_slice(&merged);
    swaps
}

pub fn rmse(preds: &[f64], truths: &[f64]) -> Result<f64, MetricsError> {
    check_pair(preds, truths, 1)?;
    let sse: f64 = preds.iter().zip(truths).map(|(p, t)| (p - t).powi(2)).sum();
    Ok((sse / preds.len() as f64).sqrt())
}

// ---------------------------------------------------------------------------
// Welch's t-test
// ---------------------------------------------------------------------------

/// Two-sided significance level used throughout reports.
pub const ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    pub p: f64,
    /// Both samples have zero variance; `df` falls back to `n_a + n_b - 2`.
    pub degenerate: bool,
}

impl WelchResult {
    pub fn significant(&self, alpha: f64) -> bool {
        self.p < alpha
    }
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Welch's unequal-variance t-test with Welch–Satterthwaite degrees of
/// freedom and a two-sided p-value.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchResult, MetricsError> {
    for s in [a, b] {
        if s.len() < 2 {
            return Err(MetricsError::TooFew { needed: 2, got: s.len() });
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(MetricsError::NonFinite);
        }
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;

    if se2 == 0.0 {
        let equal = ma == mb;
        return Ok(WelchResult {
            t: if equal { 0.0 } else { (ma - mb).signum() * f64::INFINITY },
            df: na + nb - 2.0,
            p: if equal { 1.0 } else { 0.0 },
            degenerate: true,
        });
    }

    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let p = if t == 0.0 {
        1.0
    } else {
        let dist = StudentsT::new(0.0, 1.0, df).expect("df is positive and finite");
        (2.0 * dist.cdf(-t.abs())).min(1.0)
    };
    Ok(WelchResult { t, df, p, degenerate: false })
}

// ---------------------------------------------------------------------------
// Extrapolation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtrapolationLabel {
    Low,
    In,
    High,
}

impl ExtrapolationLabel {
    pub fn is_extrapolation(self) -> bool {
        self != Self::In
    }
}

/// Position of `v` relative to the inclusive range of the context scores.
///
/// # Panics
/// If `context_scores` is empty.
pub fn classify_extrapolation(context_scores: &[i64], v: f64) -> ExtrapolationLabel {
    let min = *context_scores.iter().min().expect("non-empty context") as f64;
    let max = *context_scores.iter().max().expect("non-empty context") as f64;
    if v < min {
        ExtrapolationLabel::Low
    } else if v > max {
        ExtrapolationLabel::High
    } else {
        ExtrapolationLabel::In
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ExtrapolationStats {
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub n_pred_extrapolated: usize,
    pub n_truth_extrapolated: usize,
    pub true_positives: usize,
}

/// Micro-averaged precision and recall over the two extrapolation classes.
/// Records without a prediction are ignored.
pub fn extrapolation_pr(records: &[PredictionRecord]) -> ExtrapolationStats {
    let mut stats = ExtrapolationStats::default();
    for r in records {
        let Some(pred) = r.prediction else { continue };
        if r.context_scores.is_empty() {
            continue;
        }
        let truth_label = classify_extrapolation(&r.context_scores, r.ground_truth as f64);
        let pred_label = classify_extrapolation(&r.context_scores, pred);
        if pred_label.is_extrapolation() {
            stats.n_pred_extrapolated += 1;
        }
        if truth_label.is_extrapolation() {
            stats.n_truth_extrapolated += 1;
        }
        if pred_label.is_extrapolation() && pred_label == truth_label {
            stats.true_positives += 1;
        }
    }
    let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    stats.precision = ratio(stats.true_positives, stats.n_pred_extrapolated);
    stats.recall = ratio(stats.true_positives, stats.n_truth_extrapolated);
    stats
}

// ---------------------------------------------------------------------------
// Aggregation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub run_index: u32,
    pub rho: Option<f64>,
    pub tau: Option<f64>,
    pub rmse: Option<f64>,
    pub n_evaluated: usize,
    pub n_failures: usize,
}

/// Mean and population standard deviation over the runs where a metric is
/// defined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    pub n_runs: usize,
}

impl MeanSd {
    fn over(values: impl Iterator<Item = Option<f64>>) -> Option<Self> {
        let defined: Vec<f64> = values.flatten().collect();
        if defined.is_empty() {
            return None;
        }
        Some(Self {
            mean: defined.iter().sum::<f64>() / defined.len() as f64,
            sd: population_stddev(&defined),
            n_runs: defined.len(),
        })
    }
}

/// Descriptive labels attached to a report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ArmLabels {
    pub arm: String,
    pub dataset: String,
    pub format: String,
    pub strategy: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub labels: ArmLabels,
    pub rho: Option<MeanSd>,
    pub tau: Option<MeanSd>,
    pub rmse: Option<MeanSd>,
    pub failure_rate: f64,
    pub n_evaluated: usize,
    pub n_failures: usize,
    pub n_infra_failures: usize,
    pub per_run: Vec<RunMetrics>,
    pub undefined_runs: Vec<u32>,
    pub extrapolation: ExtrapolationStats,
    pub avg_prediction_stddev: Option<f64>,
    /// Rounded prediction value → count, pooled over runs.
    pub prediction_histogram: BTreeMap<i64, usize>,
}

/// Aggregates one arm's records. Parse failures are excluded from the
/// metrics and counted in `failure_rate`; infrastructure failures are
/// counted separately and excluded from both.
pub fn aggregate(records: &[PredictionRecord], labels: ArmLabels) -> Result<MetricsReport, MetricsError> {
    let evaluable: Vec<&PredictionRecord> =
        records.iter().filter(|r| !r.is_infra_failure()).collect();
    let n_infra_failures = records.len() - evaluable.len();
    if evaluable.is_empty() {
        return Err(MetricsError::NoRecords);
    }

    let mut by_run: BTreeMap<u32, Vec<&PredictionRecord>> = BTreeMap::new();
    for r in &evaluable {
        by_run.entry(r.run_index).or_default().push(r);
    }

    let mut per_run = Vec::with_capacity(by_run.len());
    let mut undefined_runs = Vec::new();
    let mut n_evaluated = 0;
    let mut n_failures = 0;
    for (&run_index, run) in &by_run {
        let mut ordered = run.clone();
        ordered.sort_by(|a, b| a.instance_id.cmp(&b.instance_id));
        let (preds, truths): (Vec<f64>, Vec<f64>) = ordered
            .iter()
            .filter_map(|r| r.prediction.map(|p| (p, r.ground_truth as f64)))
            .unzip();
        let failures = ordered.len() - preds.len();
        n_evaluated += preds.len();
        n_failures += failures;

        let (rho, tau) = if preds.len() >= 2 {
            (
                spearman(&preds, &truths).ok().flatten(),
                kendall_tau(&preds, &truths).ok().flatten(),
            )
        } else {
            (None, None)
        };
        if rho.is_none() || tau.is_none() {
            undefined_runs.push(run_index);
        }
        per_run.push(RunMetrics {
            run_index,
            rho,
            tau,
            rmse: rmse(&preds, &truths).ok(),
            n_evaluated: preds.len(),
            n_failures: failures,
        });
    }

    let mut per_instance: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut histogram = BTreeMap::new();
    for r in &evaluable {
        if let Some(p) = r.prediction {
            per_instance.entry(r.instance_id.as_str()).or_default().push(p);
            *histogram.entry(p.round() as i64).or_insert(0) += 1;
        }
    }
    let spreads: Vec<f64> = per_instance
        .values()
        .filter(|v| v.len() >= 2)
        .map(|v| population_stddev(v))
        .collect();
    let avg_prediction_stddev =
        (!spreads.is_empty()).then(|| spreads.iter().sum::<f64>() / spreads.len() as f64);

    let owned: Vec<PredictionRecord> = evaluable.iter().map(|r| (*r).clone()).collect();
    Ok(MetricsReport {
        labels,
        rho: MeanSd::over(per_run.iter().map(|r| r.rho)),
        tau: MeanSd::over(per_run.iter().map(|r| r.tau)),
        rmse: MeanSd::over(per_run.iter().map(|r| r.rmse)),
        failure_rate: n_failures as f64 / evaluable.len() as f64,
        n_evaluated,
        n_failures,
        n_infra_failures,
        per_run,
        undefined_runs,
        extrapolation: extrapolation_pr(&owned),
        avg_prediction_stddev,
        prediction_histogram: histogram,
    })
}

/// Per-run values of one metric, skipping runs where it is undefined.
pub fn per_run_values(report: &MetricsReport, metric: Metric) -> Vec<f64> {
    report
        .per_run
        .iter()
        .filter_map(|r| match metric {
            Metric::Rho => r.rho,
            Metric::Tau => r.tau,
            Metric::Rmse => r.rmse,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Rho,
    Tau,
    Rmse,
}

impl std::str::FromStr for Metric {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rho" => Ok(Self::Rho),
            "tau" => Ok(Self::Tau),
            "rmse" => Ok(Self::Rmse),
            other => Err(format!("unknown metric `{other}` (expected rho, tau or rmse)")),
        }
    }
}

/// Instance ids that parsed successfully in every run of the given records.
pub fn parsed_in_every_run(records: &[PredictionRecord]) -> BTreeSet<String> {
    let runs: BTreeSet<u32> = records.iter().map(|r| r.run_index).collect();
    let mut ok: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records.iter().filter(|r| r.prediction.is_some() && !r.is_infra_failure()) {
        *ok.entry(r.instance_id.as_str()).or_insert(0) += 1;
    }
    ok.into_iter()
        .filter(|(_, n)| *n == runs.len())
        .map(|(id, _)| id.to_string())
        .collect()
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

pub const CSV_HEADER: &str = "arm,dataset,format,strategy,rho_mean,rho_sd,tau_mean,tau_sd,rmse_mean,rmse_sd,failure_rate,extrap_precision,extrap_recall,avg_pred_sd,n";

pub(crate) fn fmt_num(v: Option<f64>) -> String {
    match v {
        Some(x) if x.is_finite() => format!("{x:.6}"),
        _ => "NA".to_string(),
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        let l = &self.labels;
        [
            csv_field(&l.arm),
            csv_field(&l.dataset),
            csv_field(&l.format),
            csv_field(&l.strategy),
            fmt_num(self.rho.map(|m| m.mean)),
            fmt_num(self.rho.map(|m| m.sd)),
            fmt_num(self.tau.map(|m| m.mean)),
            fmt_num(self.tau.map(|m| m.sd)),
            fmt_num(self.rmse.map(|m| m.mean)),
            fmt_num(self.rmse.map(|m| m.sd)),
            fmt_num(Some(self.failure_rate)),
            fmt_num(self.extrapolation.precision),
            fmt_num(self.extrapolation.recall),
            fmt_num(self.avg_prediction_stddev),
            self.n_evaluated.to_string(),
        ]
        .join(",")
    }

    /// Flat `key = value` rendering, one metric per line.
    pub fn to_key_values(&self) -> String {
        let mut out = String::new();
        let l = &self.labels;
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("arm", l.arm.clone());
        kv("dataset", l.dataset.clone());
        kv("format", l.format.clone());
        kv("strategy", l.strategy.clone());
        for (name, m) in [("rho", self.rho), ("tau", self.tau), ("rmse", self.rmse)] {
            kv(&format!("{name}_mean"), fmt_num(m.map(|m| m.mean)));
            kv(&format!("{name}_sd"), fmt_num(m.map(|m| m.sd)));
            kv(&format!("{name}_runs"), m.map_or(0, |m| m.n_runs).to_string());
        }
        kv("failure_rate", fmt_num(Some(self.failure_rate)));
        kv("n_evaluated", self.n_evaluated.to_string());
        kv("n_failures", self.n_failures.to_string());
        kv("n_infra_failures", self.n_infra_failures.to_string());
        kv("extrap_precision", fmt_num(self.extrapolation.precision));
        kv("extrap_recall", fmt_num(self.extrapolation.recall));
        kv("extrap_n_pred", self.extrapolation.n_pred_extrapolated.to_string());
        kv("extrap_n_truth", self.extrapolation.n_truth_extrapolated.to_string());
        kv("avg_pred_sd", fmt_num(self.avg_prediction_stddev));
        let undefined: Vec<String> = self.undefined_runs.iter().map(u32::to_string).collect();
        kv("undefined_runs", undefined.join(" "));
        for r in &self.per_run {
            kv(
                &format!("run.{}", r.run_index),
                format!(
                    "rho={} tau={} rmse={} n={} failures={}",
                    fmt_num(r.rho),
                    fmt_num(r.tau),
                    fmt_num(r.rmse),
                    r.n_evaluated,
                    r.n_failures
                ),
            );
        }
        out
    }
}
