//! User profiles for each prompting format, and synthesized self-described
//! preferences.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::EvalInstance;
use crate::gateway::{Gateway, GatewayError, ModelConfig, RequestTag};
use crate::promptgen::{PromptError, Renderer};

#[derive(Debug, thiserror::Error)]
pub enum ProfileError {
    #[error("a description-only profile requires a self-description")]
    MissingDescription,
    #[error("the profile format requests a description but none was supplied")]
    DescriptionNotSupplied,
    #[error("description-only profiles always carry a description")]
    InvalidFormat,
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("self-description generation for {0} returned empty text")]
    EmptyGeneration(String),
    #[error("description cache {path}: {source}")]
    Cache {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    /// Past ratings only (S→S).
    ScoreOnly,
    /// Past reviews with ratings (RS→S, RS→RS).
    ReviewScore,
    /// Self-described preference alone (∅→S).
    DescriptionOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProfileFormat {
    pub kind: ProfileKind,
    pub with_description: bool,
}

impl ProfileFormat {
    pub fn new(kind: ProfileKind, with_description: bool) -> Result<Self, ProfileError> {
        if kind == ProfileKind::DescriptionOnly && !with_description {
            return Err(ProfileError::InvalidFormat);
        }
        Ok(Self { kind, with_description })
    }

    pub const fn score_only() -> Self {
        Self { kind: ProfileKind::ScoreOnly, with_description: false }
    }

    pub const fn review_score() -> Self {
        Self { kind: ProfileKind::ReviewScore, with_description: false }
    }

    pub const fn description_only() -> Self {
        Self { kind: ProfileKind::DescriptionOnly, with_description: true }
    }

    /// Short label used in reports, e.g. `RS` or `RS+D`.
    pub fn label(&self) -> &'static str {
        match (self.kind, self.with_description) {
            (ProfileKind::ScoreOnly, false) => "S",
            (ProfileKind::ScoreOnly, true) => "S+D",
            (ProfileKind::ReviewScore, false) => "RS",
            (ProfileKind::ReviewScore, true) => "RS+D",
            (ProfileKind::DescriptionOnly, _) => "D",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileEntry {
    pub item_description: String,
    pub review_text: Option<String>,
    pub rating: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserProfile {
    pub entries: Vec<ProfileEntry>,
    pub description: Option<String>,
}

impl UserProfile {
    pub fn has_reviews(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| e.review_text.is_some())
    }
}

/// Projects an instance's context onto the fields the format exposes.
pub fn assemble_profile(
    instance: &EvalInstance,
    format: ProfileFormat,
    description: Option<&str>,
) -> Result<UserProfile, ProfileError> {
    let description = match (format.with_description, description) {
        (true, Some(d)) => Some(d.to_string()),
        (true, None) if format.kind == ProfileKind::DescriptionOnly => {
            return Err(ProfileError::MissingDescription)
        }
        (true, None) => return Err(ProfileError::DescriptionNotSupplied),
        (false, _) => None,
    };
    let entries = match format.kind {
        ProfileKind::DescriptionOnly => Vec::new(),
        kind => instance
            .context
            .iter()
            .map(|r| ProfileEntry {
                item_description: r.item_description.clone(),
                review_text: (kind == ProfileKind::ReviewScore).then(|| r.review_text.clone()),
                rating: r.rating,
            })
            .collect(),
    };
    Ok(UserProfile { entries, description })
}

/// Instructed upper bound on self-description length, in characters.
pub const SELF_DESCRIPTION_LIMIT: usize = 300;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelfDescription {
    pub instance_id: String,
    pub generator_model: String,
    pub text: String,
    pub length: usize,
    pub over_limit: bool,
}

/// Generates an "I like …" preference passage from the instance's reviews.
/// The text is returned verbatim; over-long passages are only flagged.
pub fn synthesize_self_description(
    instance: &EvalInstance,
    gateway: &Gateway,
    config: &ModelConfig,
    renderer: &Renderer,
) -> Result<SelfDescription, ProfileError> {
    let profile = assemble_profile(instance, ProfileFormat::review_score(), None)?;
    let prompt = renderer.render_self_description(&profile)?;
    let tag = RequestTag {
        instance_id: instance.instance_id.clone(),
        run_index: None,
        stage: "self_description".into(),
    };
    let raw = gateway.complete(&prompt, config, Some(&tag))?;
    if raw.text.trim().is_empty() {
        return Err(ProfileError::EmptyGeneration(instance.instance_id.clone()));
    }
    let length = raw.text.chars().count();
    let over_limit = length > SELF_DESCRIPTION_LIMIT;
    if over_limit {
        log::warn!(
            "self-description for {} is {length} chars (limit {SELF_DESCRIPTION_LIMIT})",
            instance.instance_id
        );
    }
    Ok(SelfDescription {
        instance_id: instance.instance_id.clone(),
        generator_model: config.model_name.clone(),
        text: raw.text,
        length,
        over_limit,
    })
}

/// Append-only sidecar of generated descriptions keyed by
/// `(instance_id, generator model)`.
#[derive(Debug)]
pub struct DescriptionCache {
    path: PathBuf,
    entries: HashMap<(String, String), SelfDescription>,
}

impl DescriptionCache {
    pub fn open(path: &Path) -> Result<Self, ProfileError> {
        let err = |source| ProfileError::Cache { path: path.display().to_string(), source };
        let mut entries = HashMap::new();
        match File::open(path) {
            Ok(file) => {
                for line in BufReader::new(file).lines() {
                    let line = line.map_err(err)?;
                    match serde_json::from_str::<SelfDescription>(&line) {
                        Ok(d) => {
                            entries.insert((d.instance_id.clone(), d.generator_model.clone()), d);
                        }
                        Err(e) => log::warn!("ignoring bad description cache line: {e}"),
                    }
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {}
            Err(e) => return Err(err(e)),
        }
        Ok(Self { path: path.to_path_buf(), entries })
    }

    pub fn get(&self, instance_id: &str, model: &str) -> Option<&SelfDescription> {
        self.entries.get(&(instance_id.to_string(), model.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, description: SelfDescription) -> Result<(), ProfileError> {
        let err = |source| ProfileError::Cache { path: self.path.display().to_string(), source };
        if let Some(parent) = self.path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(err)?;
        }
        let mut line = serde_json::to_vec(&description).expect("serializable");
        line.push(b'\n');
        let mut file = OpenOptions::new().create(true).append(true).open(&self.path).map_err(err)?;
        file.write_all(&line).map_err(err)?;
        self.entries.insert(
            (description.instance_id.clone(), description.generator_model.clone()),
            description,
        );
        Ok(())
    }
}
