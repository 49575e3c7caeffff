//! Prompt rendering for every profile format, output format and prompting
//! strategy.
//!
//! Templates are plain text files with `{name}` placeholders (`{{`/`}}`
//! escape literal braces). The built-in set lives in `templates/v1/`; a
//! directory with the same file names can be loaded to override it. Domain
//! words (`{item}`, `{Item}`, `{critic}`, `{domain}`, `{item_phrase}`) are
//! filled from a [`DomainVocabulary`]; user content is never rewritten.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{EvalInstance, RatingScale};
use crate::fingerprint::digest_chunks;
use crate::profile::UserProfile;

pub const TEMPLATE_VERSION: &str = "v1";

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("strategy {strategy:?} requires the {missing:?} intermediate text")]
    MissingIntermediate { strategy: Strategy, missing: IntermediateKind },
    #[error("strategy {0:?} takes no {1:?} intermediate text")]
    UnexpectedIntermediate(Strategy, IntermediateKind),
    #[error("profile has neither in-context entries nor a self-description")]
    EmptyProfile,
    #[error("a review-writing output needs in-context reviews in the profile")]
    ReviewsRequired,
    #[error("the {0:?} prompt needs profile entries with review texts")]
    IntermediateNeedsReviews(IntermediateKind),
    #[error("template {template}: {reason}")]
    Template { template: String, reason: String },
    #[error("cannot read template {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    ScoreOnly,
    ReviewAndScore,
}

impl OutputFormat {
    pub fn expects_review(self) -> bool {
        self == Self::ReviewAndScore
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::ScoreOnly => "S",
            Self::ReviewAndScore => "RS",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Plain,
    ZeroShotCot,
    ScoreRangeSummary,
    PreferenceSummary,
    PreferenceSummaryPlusItemRec,
}

impl Strategy {
    /// Intermediate generations this strategy embeds, in call order.
    pub fn required_intermediates(self) -> &'static [IntermediateKind] {
        match self {
            Self::Plain | Self::ZeroShotCot => &[],
            Self::ScoreRangeSummary => &[IntermediateKind::ScoreRange],
            Self::PreferenceSummary => &[IntermediateKind::PreferenceSummary],
            Self::PreferenceSummaryPlusItemRec => {
                &[IntermediateKind::PreferenceSummary, IntermediateKind::ItemRecommendation]
            }
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Plain => "plain",
            Self::ZeroShotCot => "zero_shot_cot",
            Self::ScoreRangeSummary => "score_range_summary",
            Self::PreferenceSummary => "preference_summary",
            Self::PreferenceSummaryPlusItemRec => "preference_summary_plus_item_rec",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntermediateKind {
    ScoreRange,
    PreferenceSummary,
    ItemRecommendation,
}

impl IntermediateKind {
    pub fn stage(self) -> &'static str {
        match self {
            Self::ScoreRange => "score_range",
            Self::PreferenceSummary => "preference_summary",
            Self::ItemRecommendation => "item_recommendation",
        }
    }
}

pub type Intermediates = BTreeMap<IntermediateKind, String>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    /// Beginning of the assistant turn that the model continues.
    AssistantPrefix,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::System => "system",
            Self::User => "user",
            Self::AssistantPrefix => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub messages: Vec<Message>,
    pub domain_label: String,
    pub config_fingerprint: String,
}

impl RenderedPrompt {
    fn new(messages: Vec<Message>, domain_label: &str) -> Self {
        let mut chunks: Vec<&[u8]> = vec![TEMPLATE_VERSION.as_bytes(), domain_label.as_bytes()];
        for m in &messages {
            chunks.push(m.role.as_str().as_bytes());
            chunks.push(m.text.as_bytes());
        }
        let config_fingerprint = digest_chunks(chunks);
        Self { messages, domain_label: domain_label.to_string(), config_fingerprint }
    }

    pub fn text_of(&self, role: Role) -> Option<&str> {
        self.messages.iter().find(|m| m.role == role).map(|m| m.text.as_str())
    }

    /// Llama-3 style transcript, matching how the prompts are usually shown
    /// with explicit header tokens.
    pub fn transcript(&self) -> String {
        let mut out = String::new();
        for (i, m) in self.messages.iter().enumerate() {
            if i > 0 {
                out.push_str("\n\n");
            }
            out.push_str("<|start_header_id|>");
            out.push_str(m.role.as_str());
            out.push_str("<|end_header_id|>\n");
            out.push_str(&m.text);
            if m.role != Role::AssistantPrefix {
                out.push_str("\n<|eot_id|>");
            }
        }
        out
    }
}

/// Words substituted into templates for a target domain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainVocabulary {
    /// Domain label carried on rendered prompts.
    pub label: String,
    /// Item noun, e.g. "plot".
    pub item: String,
    /// Capitalized item noun used in section tags, e.g. "Plot".
    pub item_title: String,
    /// Reviewer noun, e.g. "critic".
    pub critic: String,
    /// Domain noun, e.g. "movie".
    pub domain: String,
    /// Item noun phrase for the recommendation prompt, e.g. "movie plot".
    pub item_phrase: String,
}

impl DomainVocabulary {
    pub fn movies() -> Self {
        Self {
            label: "movie".into(),
            item: "plot".into(),
            item_title: "Plot".into(),
            critic: "critic".into(),
            domain: "movie".into(),
            item_phrase: "movie plot".into(),
        }
    }

    pub fn recipes() -> Self {
        Self {
            label: "recipe".into(),
            item: "recipe description".into(),
            item_title: "Recipe Description".into(),
            critic: "reviewer".into(),
            domain: "recipe".into(),
            item_phrase: "recipe".into(),
        }
    }

    pub fn books() -> Self {
        Self {
            label: "book".into(),
            item: "book description".into(),
            item_title: "Book Description".into(),
            critic: "reviewer".into(),
            domain: "book".into(),
            item_phrase: "book".into(),
        }
    }

    pub fn for_label(label: &str) -> Option<Self> {
        match label {
            "movie" | "movies" => Some(Self::movies()),
            "recipe" | "recipes" => Some(Self::recipes()),
            "book" | "books" => Some(Self::books()),
            _ => None,
        }
    }

    fn fill<'a>(&'a self, vars: &mut HashMap<&'static str, &'a str>) {
        vars.insert("item", &self.item);
        vars.insert("Item", &self.item_title);
        vars.insert("critic", &self.critic);
        vars.insert("domain", &self.domain);
        vars.insert("item_phrase", &self.item_phrase);
    }
}

pub const SELF_DESCRIPTION_PREFIX: &str = "His / her self-description of the preference is as follows:";
pub const SCORE_RANGE_PREFIX: &str = "The trend of review scores given by this user is analyzed as follows:";
pub const PREFERENCE_SUMMARY_PREFIX: &str = "The preference of him/her is analyzed as follows:";
pub const RECOMMENDATION_START: &str = "[The Start of Recommendation Text]";
pub const RECOMMENDATION_END: &str = "[The End of Recommendation Text]";
pub const PLAIN_ASSISTANT_PREFIX: &str = "[Review] Here is the Json format of the review:";
pub const COT_ASSISTANT_PREFIX: &str = "Let's think step by step.";
const REVIEW_OUTPUT_FIELD: &str =
    "  \"Review\": \"<proposed review conforms to style demonstrated in the previous reviews>\",";

/// The full set of prompt templates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    pub system: String,
    pub query: String,
    pub icl_review_score: String,
    pub icl_score_only: String,
    pub score_range: String,
    pub preference_summary: String,
    pub item_recommendation: String,
    pub self_description: String,
}

macro_rules! builtin_template {
    ($name:literal) => {
        include_str!(concat!("../templates/v1/", $name, ".txt"))
    };
}

impl TemplateSet {
    pub fn builtin() -> Self {
        Self {
            system: builtin_template!("system").into(),
            query: builtin_template!("query").into(),
            icl_review_score: builtin_template!("icl_review_score").into(),
            icl_score_only: builtin_template!("icl_score_only").into(),
            score_range: builtin_template!("score_range").into(),
            preference_summary: builtin_template!("preference_summary").into(),
            item_recommendation: builtin_template!("item_recommendation").into(),
            self_description: builtin_template!("self_description").into(),
        }
    }

    /// Loads `<name>.txt` files from `dir`; missing files fall back to the
    /// built-in template.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        let mut set = Self::builtin();
        let slots: [(&str, &mut String); 8] = [
            ("system", &mut set.system),
            ("query", &mut set.query),
            ("icl_review_score", &mut set.icl_review_score),
            ("icl_score_only", &mut set.icl_score_only),
            ("score_range", &mut set.score_range),
            ("preference_summary", &mut set.preference_summary),
            ("item_recommendation", &mut set.item_recommendation),
            ("self_description", &mut set.self_description),
        ];
        for (name, slot) in slots {
            let path = dir.join(format!("{name}.txt"));
            match std::fs::read_to_string(&path) {
                Ok(text) => *slot = text.strip_suffix('\n').unwrap_or(&text).to_string(),
                Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
                Err(source) => {
                    return Err(PromptError::Io { path: path.display().to_string(), source })
                }
            }
        }
        Ok(set)
    }
}

/// Single-pass `{name}` substitution; substituted values are not rescanned.
fn fill_template(
    name: &str,
    template: &str,
    vars: &HashMap<&'static str, &str>,
) -> Result<String, PromptError> {
    let err = |reason: String| PromptError::Template { template: name.to_string(), reason };
    let mut out = String::with_capacity(template.len() * 2);
    let mut rest = template;
    while let Some(pos) = rest.find(['{', '}']) {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if let Some(after) = tail.strip_prefix("{{") {
            out.push('{');
            rest = after;
        } else if let Some(after) = tail.strip_prefix("}}") {
            out.push('}');
            rest = after;
        } else if tail.starts_with('}') {
            return Err(err("unbalanced `}`".into()));
        } else {
            let end = tail.find('}').ok_or_else(|| err("unterminated placeholder".into()))?;
            let key = &tail[1..end];
            let value = vars.get(key).ok_or_else(|| err(format!("unknown placeholder `{key}`")))?;
            out.push_str(value);
            rest = &tail[end + 1..];
        }
    }
    out.push_str(rest);
    Ok(out)
}

/// Renders prompts from a template set for one domain.
#[derive(Debug, Clone)]
pub struct Renderer {
    templates: TemplateSet,
    vocab: DomainVocabulary,
}

impl Renderer {
    pub fn new(templates: TemplateSet, vocab: DomainVocabulary) -> Self {
        Self { templates, vocab }
    }

    pub fn builtin(vocab: DomainVocabulary) -> Self {
        Self::new(TemplateSet::builtin(), vocab)
    }

    pub fn vocabulary(&self) -> &DomainVocabulary {
        &self.vocab
    }

    fn vars(&self) -> HashMap<&'static str, &str> {
        let mut vars = HashMap::new();
        self.vocab.fill(&mut vars);
        vars
    }

    fn icl_units(&self, profile: &UserProfile, with_reviews: bool) -> Result<String, PromptError> {
        let mut units = Vec::with_capacity(profile.entries.len());
        for (i, entry) in profile.entries.iter().enumerate() {
            let n = (i + 1).to_string();
            let score = entry.rating.to_string();
            let mut vars = self.vars();
            vars.insert("n", &n);
            vars.insert("plot", &entry.item_description);
            vars.insert("score", &score);
            let unit = match (with_reviews, entry.review_text.as_deref()) {
                (true, Some(review)) => {
                    vars.insert("review", review);
                    fill_template("icl_review_score", &self.templates.icl_review_score, &vars)?
                }
                (true, None) => return Err(PromptError::ReviewsRequired),
                (false, _) => fill_template("icl_score_only", &self.templates.icl_score_only, &vars)?,
            };
            units.push(unit);
        }
        Ok(units.join("\n\n"))
    }

    fn messages(&self, user: String, assistant_prefix: Option<&str>) -> RenderedPrompt {
        let mut messages = vec![
            Message { role: Role::System, text: self.templates.system.clone() },
            Message { role: Role::User, text: user },
        ];
        if let Some(prefix) = assistant_prefix {
            messages.push(Message { role: Role::AssistantPrefix, text: prefix.to_string() });
        }
        RenderedPrompt::new(messages, &self.vocab.label)
    }

    /// Renders the rating-prediction prompt.
    ///
    /// In-context units carry reviews when the profile has them; the output
    /// block asks for a review only for [`OutputFormat::ReviewAndScore`].
    /// Self-description, score-range and preference-summary texts follow the
    /// in-context block under their fixed prefixes; the item recommendation
    /// is appended after the target item.
    pub fn render(
        &self,
        instance: &EvalInstance,
        profile: &UserProfile,
        output: OutputFormat,
        strategy: Strategy,
        intermediates: &Intermediates,
        scale: RatingScale,
    ) -> Result<RenderedPrompt, PromptError> {
        let required = strategy.required_intermediates();
        for kind in required {
            if !intermediates.contains_key(kind) {
                return Err(PromptError::MissingIntermediate { strategy, missing: *kind });
            }
        }
        if let Some(extra) = intermediates.keys().find(|k| !required.contains(k)) {
            return Err(PromptError::UnexpectedIntermediate(strategy, *extra));
        }
        if profile.entries.is_empty() && profile.description.is_none() {
            return Err(PromptError::EmptyProfile);
        }
        let with_reviews = profile.entries.iter().any(|e| e.review_text.is_some());
        if output.expects_review() && !profile.entries.is_empty() && !profile.has_reviews() {
            return Err(PromptError::ReviewsRequired);
        }

        let mut sections = Vec::new();
        if !profile.entries.is_empty() {
            sections.push(self.icl_units(profile, with_reviews)?);
        }
        if let Some(d) = &profile.description {
            sections.push(format!("{SELF_DESCRIPTION_PREFIX}\n{d}"));
        }
        if let Some(t) = intermediates.get(&IntermediateKind::ScoreRange) {
            sections.push(format!("{SCORE_RANGE_PREFIX}\n{t}"));
        }
        if let Some(t) = intermediates.get(&IntermediateKind::PreferenceSummary) {
            sections.push(format!("{PREFERENCE_SUMMARY_PREFIX}\n{t}"));
        }
        let icl_example = sections.join("\n\n");

        let recommendation = intermediates
            .get(&IntermediateKind::ItemRecommendation)
            .map(|t| format!("\n\n{RECOMMENDATION_START}\n{t}\n{RECOMMENDATION_END}"))
            .unwrap_or_default();

        let score_line = format!(
            "  \"Score\": <{lo}-{hi}, {lo} is the lowest and {hi} is the highest>",
            lo = scale.y_min,
            hi = scale.y_max
        );
        let output_fields = match output {
            OutputFormat::ReviewAndScore => format!("{REVIEW_OUTPUT_FIELD}\n{score_line}"),
            OutputFormat::ScoreOnly => score_line,
        };

        let mut vars = self.vars();
        vars.insert("icl_example", &icl_example);
        vars.insert("output_fields", &output_fields);
        vars.insert("plot", &instance.target.item_description);
        vars.insert("recommendation", &recommendation);
        let user = fill_template("query", &self.templates.query, &vars)?;

        let prefix = match strategy {
            Strategy::ZeroShotCot => COT_ASSISTANT_PREFIX,
            _ => PLAIN_ASSISTANT_PREFIX,
        };
        Ok(self.messages(user, Some(prefix)))
    }

    /// Renders the single-turn prompt producing an intermediate text.
    pub fn render_intermediate(
        &self,
        kind: IntermediateKind,
        instance: &EvalInstance,
        profile: &UserProfile,
    ) -> Result<RenderedPrompt, PromptError> {
        let (name, template) = match kind {
            IntermediateKind::ScoreRange => ("score_range", &self.templates.score_range),
            IntermediateKind::PreferenceSummary => {
                ("preference_summary", &self.templates.preference_summary)
            }
            IntermediateKind::ItemRecommendation => {
                let mut vars = self.vars();
                vars.insert("plot", &instance.target.item_description);
                let user =
                    fill_template("item_recommendation", &self.templates.item_recommendation, &vars)?;
                return Ok(self.messages(user, None));
            }
        };
        if !profile.has_reviews() {
            return Err(PromptError::IntermediateNeedsReviews(kind));
        }
        let icl_example = self.icl_units(profile, true)?;
        let mut vars = self.vars();
        vars.insert("icl_example", &icl_example);
        Ok(self.messages(fill_template(name, template, &vars)?, None))
    }

    /// Renders the prompt turning per-item reviews into an "I like …"
    /// self-description.
    pub fn render_self_description(&self, profile: &UserProfile) -> Result<RenderedPrompt, PromptError> {
        if !profile.has_reviews() {
            return Err(PromptError::ReviewsRequired);
        }
        let icl_example = self.icl_units(profile, true)?;
        let mut vars = self.vars();
        vars.insert("icl_example", &icl_example);
        let user = fill_template("self_description", &self.templates.self_description, &vars)?;
        Ok(self.messages(user, None))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ReviewRecord;
    use crate::profile::{assemble_profile, ProfileFormat};

    fn instance(k: usize) -> EvalInstance {
        let rec = |i: usize| ReviewRecord {
            user_id: "u".into(),
            item_id: format!("i{i}"),
            item_description: format!("Plot number {i}."),
            review_text: format!("Review number {i}."),
            rating: 1 + i as i64,
            timestamp: None,
        };
        EvalInstance {
            instance_id: "movies:u".into(),
            context: (0..k).map(rec).collect(),
            target: rec(k),
            scale: RatingScale::default(),
            source_dataset: "movies".into(),
        }
    }

    fn movies() -> Renderer {
        Renderer::builtin(DomainVocabulary::movies())
    }

    #[test]
    fn fill_template_escapes_and_errors() {
        let vars = HashMap::from([("a", "x{b}")]);
        assert_eq!(fill_template("t", "{{{a}}}", &vars).unwrap(), "{x{b}}");
        assert!(fill_template("t", "{missing}", &vars).is_err());
        assert!(fill_template("t", "oops}", &vars).is_err());
        assert!(fill_template("t", "{a", &vars).is_err());
    }

    #[test]
    fn cot_changes_only_the_assistant_prefix() {
        let inst = instance(5);
        let p = assemble_profile(&inst, ProfileFormat::review_score(), None).unwrap();
        let r = movies();
        let none = Intermediates::new();
        let plain = r.render(&inst, &p, OutputFormat::ReviewAndScore, Strategy::Plain, &none, inst.scale).unwrap();
        let cot = r.render(&inst, &p, OutputFormat::ReviewAndScore, Strategy::ZeroShotCot, &none, inst.scale).unwrap();
        assert_eq!(cot.text_of(Role::AssistantPrefix), Some("Let's think step by step."));
        assert_eq!(plain.text_of(Role::User), cot.text_of(Role::User));
        assert_ne!(plain.config_fingerprint, cot.config_fingerprint);
    }

    #[test]
    fn score_only_single_unit() {
        let inst = instance(1);
        let p = assemble_profile(&inst, ProfileFormat::score_only(), None).unwrap();
        let out = movies()
            .render(&inst, &p, OutputFormat::ScoreOnly, Strategy::Plain, &Intermediates::new(), inst.scale)
            .unwrap();
        let user = out.text_of(Role::User).unwrap();
        assert!(user.contains("[The Start of Plot 1]\nPlot number 0.\n[The End of Plot 1]\n[Review]\n```json\n{\n  \"Score\": 1\n}\n```"));
        assert!(!user.contains("\"Review\""));
        assert!(!user.contains("[The Start of Plot 2]"));
    }

    #[test]
    fn every_description_appears_once() {
        let inst = instance(5);
        let r = movies();
        let mut inter = Intermediates::new();
        inter.insert(IntermediateKind::PreferenceSummary, "Likes thrillers.".into());
        inter.insert(IntermediateKind::ItemRecommendation, "Say it is tense.".into());
        for (fmt, out) in [
            (ProfileFormat::score_only(), OutputFormat::ScoreOnly),
            (ProfileFormat::review_score(), OutputFormat::ScoreOnly),
            (ProfileFormat::review_score(), OutputFormat::ReviewAndScore),
        ] {
            let p = assemble_profile(&inst, fmt, None).unwrap();
            for (strategy, inter) in [
                (Strategy::Plain, Intermediates::new()),
                (Strategy::ZeroShotCot, Intermediates::new()),
                (Strategy::PreferenceSummaryPlusItemRec, inter.clone()),
            ] {
                let user = r.render(&inst, &p, out, strategy, &inter, inst.scale).unwrap();
                let user = user.text_of(Role::User).unwrap();
                for rec in inst.context.iter().chain([&inst.target]) {
                    assert_eq!(user.matches(&rec.item_description).count(), 1, "{strategy:?}");
                }
            }
        }
    }

    #[test]
    fn intermediates_are_placed_with_prefixes() {
        let inst = instance(2);
        let p = assemble_profile(&inst, ProfileFormat::review_score(), Some("I like noir.")).unwrap();
        let mut inter = Intermediates::new();
        inter.insert(IntermediateKind::PreferenceSummary, "PS".into());
        inter.insert(IntermediateKind::ItemRecommendation, "REC".into());
        let out = movies()
            .render(&inst, &p, OutputFormat::ScoreOnly, Strategy::PreferenceSummaryPlusItemRec, &inter, inst.scale)
            .unwrap();
        let user = out.text_of(Role::User).unwrap();
        let ps = user.find("The preference of him/her is analyzed as follows:\nPS").unwrap();
        let instr = user.find("Please follow the above critic").unwrap();
        assert!(ps < instr);
        assert!(user.ends_with("[The End of Plot]\n\n[The Start of Recommendation Text]\nREC\n[The End of Recommendation Text]"));
    }

    #[test]
    fn description_only_prompt() {
        let inst = instance(5);
        let p = assemble_profile(&inst, ProfileFormat::description_only(), Some("I like noir.")).unwrap();
        let out = movies()
            .render(&inst, &p, OutputFormat::ScoreOnly, Strategy::Plain, &Intermediates::new(), inst.scale)
            .unwrap();
        let user = out.text_of(Role::User).unwrap();
        assert!(user.contains("His / her self-description of the preference is as follows:\nI like noir."));
        assert!(!user.contains("[The Start of Plot 1]"));
    }

    #[test]
    fn render_rejects_bad_inputs() {
        let inst = instance(3);
        let r = movies();
        let p = assemble_profile(&inst, ProfileFormat::review_score(), None).unwrap();
        let err = r.render(&inst, &p, OutputFormat::ScoreOnly, Strategy::ScoreRangeSummary, &Intermediates::new(), inst.scale);
        assert!(matches!(err, Err(PromptError::MissingIntermediate { .. })));
        let mut extra = Intermediates::new();
        extra.insert(IntermediateKind::ScoreRange, "x".into());
        assert!(matches!(
            r.render(&inst, &p, OutputFormat::ScoreOnly, Strategy::Plain, &extra, inst.scale),
            Err(PromptError::UnexpectedIntermediate(..))
        ));
        let empty = UserProfile { entries: vec![], description: None };
        assert!(matches!(
            r.render(&inst, &empty, OutputFormat::ScoreOnly, Strategy::Plain, &Intermediates::new(), inst.scale),
            Err(PromptError::EmptyProfile)
        ));
        let scores = assemble_profile(&inst, ProfileFormat::score_only(), None).unwrap();
        assert!(matches!(
            r.render(&inst, &scores, OutputFormat::ReviewAndScore, Strategy::Plain, &Intermediates::new(), inst.scale),
            Err(PromptError::ReviewsRequired)
        ));
    }

    #[test]
    fn scale_sentence_interpolates_bounds() {
        let mut inst = instance(2);
        inst.scale = RatingScale::new(1, 5).unwrap();
        let p = assemble_profile(&inst, ProfileFormat::review_score(), None).unwrap();
        let out = movies()
            .render(&inst, &p, OutputFormat::ScoreOnly, Strategy::Plain, &Intermediates::new(), inst.scale)
            .unwrap();
        assert!(out.text_of(Role::User).unwrap().contains("\"Score\": <1-5, 1 is the lowest and 5 is the highest>"));
    }

    #[test]
    fn score_range_prompt_ending() {
        let inst = instance(5);
        let p = assemble_profile(&inst, ProfileFormat::review_score(), None).unwrap();
        let out = movies().render_intermediate(IntermediateKind::ScoreRange, &inst, &p).unwrap();
        let user = out.text_of(Role::User).unwrap();
        assert!(user.starts_with("A critic's past movie reviews are listed below:\n\n[The Start of Plot 1]"));
        assert!(user.ends_with("most common negative score: <most common negative score>"));
        assert!(out.text_of(Role::AssistantPrefix).is_none());
    }

    #[test]
    fn item_recommendation_contains_target_verbatim() {
        let inst = instance(2);
        let empty = UserProfile { entries: vec![], description: None };
        let out = movies().render_intermediate(IntermediateKind::ItemRecommendation, &inst, &empty).unwrap();
        assert_eq!(
            out.text_of(Role::User).unwrap(),
            "The description of a movie plot is as follows:\n\nPlot number 2.\n\nwhat else should I say if I want to recommend it to others?"
        );
    }

    #[test]
    fn preference_summary_needs_reviews() {
        let inst = instance(2);
        let empty = UserProfile { entries: vec![], description: None };
        assert!(matches!(
            movies().render_intermediate(IntermediateKind::PreferenceSummary, &inst, &empty),
            Err(PromptError::IntermediateNeedsReviews(_))
        ));
    }

    #[test]
    fn domain_words_are_substituted() {
        let inst = instance(1);
        let p = assemble_profile(&inst, ProfileFormat::review_score(), None).unwrap();
        let out = Renderer::builtin(DomainVocabulary::books())
            .render(&inst, &p, OutputFormat::ScoreOnly, Strategy::Plain, &Intermediates::new(), inst.scale)
            .unwrap();
        let user = out.text_of(Role::User).unwrap();
        assert!(user.contains("[The Start of Book Description 1]"));
        assert!(user.contains("Please follow the above reviewer and give a review for the given book description."));
        assert!(!user.contains("critic"));
        assert_eq!(out.domain_label, "book");
    }

    #[test]
    fn template_dir_overrides_single_file() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("system.txt"), "Be brief.\n").unwrap();
        let set = TemplateSet::from_dir(dir.path()).unwrap();
        assert_eq!(set.system, "Be brief.");
        assert_eq!(set.query, TemplateSet::builtin().query);
    }
}
