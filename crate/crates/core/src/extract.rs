//! Score extraction from raw model generations.
//!
//! The parser looks for the last well-formed JSON object carrying a `"Score"`
//! key, tolerating code fences and free-form reasoning around it. If no such
//! object parses, a lenient `"Score": <value>` scan is tried before the
//! output is classified as a failure.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::corpus::RatingScale;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    NoStructuredBlock,
    MissingScoreKey,
    NonIntegerScore,
    OutOfScale,
    GenerationLoop,
}

impl FailureReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::NoStructuredBlock => "no_structured_block",
            Self::MissingScoreKey => "missing_score_key",
            Self::NonIntegerScore => "non_integer_score",
            Self::OutOfScale => "out_of_scale",
            Self::GenerationLoop => "generation_loop",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum ParseResult {
    Score {
        score: i64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        review: Option<String>,
    },
    Failure {
        reason: FailureReason,
    },
}

impl ParseResult {
    pub fn score(&self) -> Option<i64> {
        match self {
            Self::Score { score, .. } => Some(*score),
            Self::Failure { .. } => None,
        }
    }

    pub fn is_failure(&self) -> bool {
        matches!(self, Self::Failure { .. })
    }

    fn failure(reason: FailureReason) -> Self {
        Self::Failure { reason }
    }
}

/// Minimum length, in characters, of a periodic tail counted as a loop.
pub const LOOP_MIN_SPAN: usize = 120;
/// Longest period considered by loop detection.
pub const LOOP_MAX_PERIOD: usize = 200;
/// Minimum number of full repetitions of the period.
pub const LOOP_MIN_REPEATS: usize = 3;

static LENIENT_SCORE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r#""Score"\s*:\s*("(?:[^"\\]|\\.)*"|-?\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)"#)
        .expect("valid regex")
});
static LENIENT_REVIEW: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r#""Review"\s*:\s*("(?:[^"\\]|\\.)*")"#).expect("valid regex")
});

/// Parses `raw` into a score within `scale`, or a classified failure.
///
/// `expects_review` controls whether a `"Review"` string found next to the
/// score is returned.
pub fn extract_score(raw: &str, scale: RatingScale, expects_review: bool) -> ParseResult {
    let objects = json_objects(raw);
    if let Some(obj) = objects.iter().rev().find(|o| o.contains_key("Score")) {
        let review = expects_review
            .then(|| obj.get("Review").and_then(Value::as_str).map(str::to_string))
            .flatten();
        return judge(&obj["Score"], scale, review);
    }

    if let Some(found) = LENIENT_SCORE.captures_iter(raw).last() {
        let m = found.get(1).expect("group 1 always participates");
        if let Ok(value) = serde_json::from_str::<Value>(m.as_str()) {
            let review = expects_review
                .then(|| {
                    LENIENT_REVIEW
                        .captures_iter(&raw[..m.start()])
                        .last()
                        .and_then(|c| serde_json::from_str::<String>(&c[1]).ok())
                })
                .flatten();
            return judge(&value, scale, review);
        }
    }

    if has_loop_tail(raw) {
        ParseResult::failure(FailureReason::GenerationLoop)
    } else if objects.is_empty() {
        ParseResult::failure(FailureReason::NoStructuredBlock)
    } else {
        ParseResult::failure(FailureReason::MissingScoreKey)
    }
}

fn judge(value: &Value, scale: RatingScale, review: Option<String>) -> ParseResult {
    let Some(score) = integer_value(value) else {
        return ParseResult::failure(FailureReason::NonIntegerScore);
    };
    if !scale.contains(score) {
        return ParseResult::failure(FailureReason::OutOfScale);
    }
    ParseResult::Score { score, review }
}

/// Integers, and floats with no fractional part, are accepted.
fn integer_value(value: &Value) -> Option<i64> {
    let n = value.as_number()?;
    if let Some(i) = n.as_i64() {
        return Some(i);
    }
    let f = n.as_f64()?;
    (f.is_finite() && f.fract() == 0.0 && f.abs() < 9.0e15).then_some(f as i64)
}

/// Every JSON object that parses starting at some `{` in the text, in order
/// of their opening brace. Nested objects are reported too.
fn json_objects(raw: &str) -> Vec<serde_json::Map<String, Value>> {
    raw.match_indices('{')
        .filter_map(|(start, _)| {
            let mut stream =
                serde_json::Deserializer::from_str(&raw[start..]).into_iter::<Value>();
            match stream.next() {
                Some(Ok(Value::Object(map))) => Some(map),
                _ => None,
            }
        })
        .collect()
}

/// True when the text ends in a periodic run at least [`LOOP_MIN_SPAN`]
/// characters long containing [`LOOP_MIN_REPEATS`] copies of its period.
pub fn has_loop_tail(raw: &str) -> bool {
    let chars: Vec<char> = raw.trim_end().chars().collect();
    let n = chars.len();
    for period in 1..=LOOP_MAX_PERIOD.min(n / LOOP_MIN_REPEATS) {
        // Length of the suffix in which chars[i] == chars[i - period].
        let mut run = 0;
        while run + period < n && chars[n - 1 - run] == chars[n - 1 - run - period] {
            run += 1;
        }
        let span = run + period;
        if span >= LOOP_MIN_SPAN && span >= LOOP_MIN_REPEATS * period {
            return true;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ten() -> RatingScale {
        RatingScale::new(1, 10).unwrap()
    }

    #[test]
    fn fenced_review_and_score() {
        let raw = "```json\n{\"Review\": \"Great.\", \"Score\": 7}\n```";
        assert_eq!(
            extract_score(raw, ten(), true),
            ParseResult::Score {
                score: 7,
                review: Some("Great.".into())
            }
        );
    }

    #[test]
    fn review_dropped_when_not_expected() {
        let raw = "{\"Review\": \"Great.\", \"Score\": 7}";
        assert_eq!(extract_score(raw, ten(), false), ParseResult::Score { score: 7, review: None });
    }

    #[test]
    fn string_score_is_non_integer() {
        assert_eq!(
            extract_score("{\"Score\": \"seven\"}", ten(), false),
            ParseResult::Failure { reason: FailureReason::NonIntegerScore }
        );
    }

    #[test]
    fn out_of_scale_is_not_clamped() {
        assert_eq!(
            extract_score("{\"Score\": 12}", ten(), false),
            ParseResult::Failure { reason: FailureReason::OutOfScale }
        );
    }

    #[test]
    fn prose_before_object_ignored() {
        assert_eq!(
            extract_score("I think step by step… {\"Score\": 8}", ten(), false),
            ParseResult::Score { score: 8, review: None }
        );
    }

    #[test]
    fn integral_float_accepted_fraction_rejected() {
        assert_eq!(extract_score("{\"Score\": 7.0}", ten(), false).score(), Some(7));
        assert_eq!(
            extract_score("{\"Score\": 7.5}", ten(), false),
            ParseResult::Failure { reason: FailureReason::NonIntegerScore }
        );
    }

    #[test]
    fn last_object_wins() {
        let raw = "Draft: {\"Score\": 3}\nFinal answer: {\"Score\": 9}";
        assert_eq!(extract_score(raw, ten(), false).score(), Some(9));
    }

    #[test]
    fn object_without_score_key() {
        assert_eq!(
            extract_score("{\"Review\": \"fine\"}", ten(), true),
            ParseResult::Failure { reason: FailureReason::MissingScoreKey }
        );
    }

    #[test]
    fn empty_and_plain_text() {
        for raw in ["", "I would rate it highly."] {
            assert_eq!(
                extract_score(raw, ten(), false),
                ParseResult::Failure { reason: FailureReason::NoStructuredBlock }
            );
        }
    }

    #[test]
    fn lenient_scan_handles_trailing_comma() {
        let raw = "{\n  \"Review\": \"Solid \\\"noir\\\".\",\n  \"Score\": 6,\n}";
        assert_eq!(
            extract_score(raw, ten(), true),
            ParseResult::Score { score: 6, review: Some("Solid \"noir\".".into()) }
        );
    }

    #[test]
    fn loop_tail_detected() {
        let raw = format!("{{\"Review\": \"The film {}", "is good and ".repeat(30));
        assert!(has_loop_tail(&raw));
        assert_eq!(
            extract_score(&raw, ten(), true),
            ParseResult::Failure { reason: FailureReason::GenerationLoop }
        );
    }

    #[test]
    fn short_repetition_is_not_a_loop() {
        assert!(!has_loop_tail("ha ha ha ha"));
        assert!(!has_loop_tail("An ordinary sentence without any repetition at the end."));
    }

    #[test]
    fn parse_result_serialization_shape() {
        let ok = serde_json::to_string(&ParseResult::Score { score: 4, review: None }).unwrap();
        assert_eq!(ok, r#"{"outcome":"score","score":4}"#);
        let bad = serde_json::to_string(&ParseResult::Failure {
            reason: FailureReason::OutOfScale,
        })
        .unwrap();
        assert_eq!(bad, r#"{"outcome":"failure","reason":"out_of_scale"}"#);
    }

    proptest::proptest! {
        #[test]
        fn total_and_scale_bounded(raw in "\\PC{0,300}") {
            let scale = ten();
            if let ParseResult::Score { score, .. } = extract_score(&raw, scale, true) {
                proptest::prop_assert!(scale.contains(score));
            }
        }

        #[test]
        fn embedded_scores_roundtrip(prefix in "[a-zA-Z .,]{0,80}", score in 1i64..=10) {
            let raw = format!("{prefix}\n```json\n{{\"Score\": {score}}}\n```");
            proptest::prop_assert_eq!(extract_score(&raw, ten(), false).score(), Some(score));
        }
    }
}
