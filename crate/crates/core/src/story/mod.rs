//! Story distillation: scenes, characters and layered prompts from plain text.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{AgentRole, AskError, BackendError, InstructionSet, SchemaError};

mod extract;
mod feedback;
mod pipeline;
mod prompts;
mod reflect;

pub use extract::{extract_characters, extract_scenes, link_characters, regenerate_character, regenerate_scene};
pub use feedback::{apply_feedback, AutoApprove, FeedbackChannel, FeedbackOutcome, ScriptedFeedback};
pub use pipeline::{run_story_module, StoryBackends};
pub use prompts::{appearance_clause, compose_global_prompt, generate_layered_prompts};
pub use reflect::reflect;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StoryError {
    #[error("story text is empty")]
    EmptyStory,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("no instruction registered for `{0}`")]
    MissingInstruction(AgentRole),
    #[error("scene {scene_index} references unregistered character `{character}`")]
    MissingCharacter { scene_index: usize, character: String },
    #[error("unknown feedback target `{0}`")]
    UnknownTarget(String),
    #[error("invariant violated: {0}")]
    InvariantViolation(String),
    #[error("feedback gate timed out")]
    FeedbackTimeout,
    #[error("prompts and scenes are not index-aligned")]
    Misaligned,
}

impl From<AskError> for StoryError {
    fn from(e: AskError) -> Self {
        match e {
            AskError::Backend(b) => StoryError::Backend(b),
            AskError::Schema(s) => StoryError::Schema(s),
            AskError::MissingInstruction(r) => StoryError::MissingInstruction(r),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Story {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    pub text: String,
}

impl Story {
    pub fn new(text: impl Into<String>) -> Result<Self, StoryError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(StoryError::EmptyStory);
        }
        Ok(Self { title: None, text })
    }

    pub fn titled(mut self, title: impl Into<String>) -> Self {
        self.title = Some(title.into());
        self
    }

    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }

    /// Text covered by a character-offset span.
    pub fn segment(&self, span: SourceSpan) -> String {
        self.text.chars().skip(span.start).take(span.end.saturating_sub(span.start)).collect()
    }
}

/// Ordered character attribute keys. `attire` and `gender` are always present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct CharacterCategorySchema(Vec<String>);

impl CharacterCategorySchema {
    pub const ATTIRE: &'static str = "attire";
    pub const GENDER: &'static str = "gender";
    pub const APPEARANCE: &'static str = "appearance";

    pub fn new<I, S>(keys: I) -> Result<Self, StoryError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let keys: Vec<String> = keys.into_iter().map(Into::into).collect();
        for (i, k) in keys.iter().enumerate() {
            if k.trim().is_empty() {
                return Err(StoryError::Config("empty attribute key".into()));
            }
            if keys[..i].contains(k) {
                return Err(StoryError::Config(format!("duplicate attribute key `{k}`")));
            }
        }
        for required in [Self::ATTIRE, Self::GENDER] {
            if !keys.iter().any(|k| k == required) {
                return Err(StoryError::Config(format!("schema lacks `{required}`")));
            }
        }
        Ok(Self(keys))
    }

    pub fn keys(&self) -> &[String] {
        &self.0
    }
}

impl Default for CharacterCategorySchema {
    fn default() -> Self {
        Self(["attire", "gender", "age", "appearance"].iter().map(|s| s.to_string()).collect())
    }
}

impl TryFrom<Vec<String>> for CharacterCategorySchema {
    type Error = StoryError;
    fn try_from(v: Vec<String>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<CharacterCategorySchema> for Vec<String> {
    fn from(s: CharacterCategorySchema) -> Self {
        s.0
    }
}

fn default_separator() -> String {
    ", ".into()
}

fn default_threshold() -> f64 {
    0.6
}

fn default_retries() -> u32 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillationConfig {
    pub num_scenes: usize,
    #[serde(default = "InstructionSet::defaults")]
    pub instructions: InstructionSet,
    #[serde(default)]
    pub schema: CharacterCategorySchema,
    #[serde(default = "default_separator")]
    pub separator: String,
    #[serde(default = "default_threshold")]
    pub reflection_threshold: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
}

impl DistillationConfig {
    pub fn new(num_scenes: usize) -> Self {
        Self {
            num_scenes,
            instructions: InstructionSet::defaults(),
            schema: CharacterCategorySchema::default(),
            separator: default_separator(),
            reflection_threshold: default_threshold(),
            max_retries: default_retries(),
        }
    }

    pub fn validate(&self) -> Result<(), StoryError> {
        if self.num_scenes == 0 {
            return Err(StoryError::Config("num_scenes must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.reflection_threshold) {
            return Err(StoryError::Config("reflection_threshold must lie in [0, 1]".into()));
        }
        if let Some(role) = self.instructions.missing(&AgentRole::STORY).first() {
            return Err(StoryError::MissingInstruction(*role));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Act {
    Setup,
    Conflict,
    Resolution,
}

impl Act {
    pub const ALL: [Act; 3] = [Act::Setup, Act::Conflict, Act::Resolution];
}

/// Act for every scene position: scenes are shared as evenly as possible
/// between the three acts, earlier acts taking the remainder. N = 5 gives
/// (setup, setup, conflict, conflict, resolution).
pub fn act_plan(num_scenes: usize) -> Vec<Act> {
    let mut plan = Vec::with_capacity(num_scenes);
    for (k, act) in Act::ALL.iter().enumerate() {
        let count = num_scenes / 3 + usize::from(k < num_scenes % 3);
        plan.extend(core::iter::repeat(*act).take(count));
    }
    plan
}

/// Half-open character-offset range into the story text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceSpan {
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneDescription {
    pub scene_index: usize,
    pub act: Act,
    pub summary: String,
    pub source_span: SourceSpan,
    pub character_refs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharacterDescription {
    pub character_id: String,
    pub name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub aliases: Vec<String>,
    pub attributes: BTreeMap<String, String>,
    pub attire_inferred: bool,
}

impl CharacterDescription {
    pub fn attribute(&self, key: &str) -> Option<&str> {
        self.attributes.get(key).map(String::as_str).filter(|v| !v.trim().is_empty())
    }

    /// True if `name` (a display name, alias or id) refers to this character.
    pub fn answers_to(&self, name: &str) -> bool {
        let s = slugify(name);
        s == self.character_id || s == slugify(&self.name) || self.aliases.iter().any(|a| slugify(a) == s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FgPrompt {
    pub character_id: String,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayeredPrompts {
    pub scene_index: usize,
    pub bg_prompt: String,
    pub fg_prompts: Vec<FgPrompt>,
    pub global_prompt: String,
}

impl LayeredPrompts {
    /// Builds the triple and derives the global prompt.
    pub fn new(scene_index: usize, bg_prompt: impl Into<String>, fg_prompts: Vec<FgPrompt>, separator: &str) -> Self {
        let mut lp = Self { scene_index, bg_prompt: bg_prompt.into(), fg_prompts, global_prompt: String::new() };
        lp.global_prompt = compose_global_prompt(&lp, separator);
        lp
    }

    pub fn fg(&self, character_id: &str) -> Option<&str> {
        self.fg_prompts.iter().find(|f| f.character_id == character_id).map(|f| f.prompt.as_str())
    }

    pub fn character_ids(&self) -> impl Iterator<Item = &str> {
        self.fg_prompts.iter().map(|f| f.character_id.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    Scene,
    Character,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Approve,
    Modify,
    Regenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEdit {
    pub target: TargetKind,
    /// Scene index (decimal) or character id.
    pub target_id: String,
    #[serde(default)]
    pub patched_fields: BTreeMap<String, serde_json::Value>,
    pub verdict: Verdict,
}

impl FeedbackEdit {
    pub fn approve(target: TargetKind, target_id: impl Into<String>) -> Self {
        Self { target, target_id: target_id.into(), patched_fields: BTreeMap::new(), verdict: Verdict::Approve }
    }

    pub fn modify(target: TargetKind, target_id: impl Into<String>, field: &str, value: serde_json::Value) -> Self {
        let mut patched_fields = BTreeMap::new();
        patched_fields.insert(field.to_string(), value);
        Self { target, target_id: target_id.into(), patched_fields, verdict: Verdict::Modify }
    }

    pub fn regenerate(target: TargetKind, target_id: impl Into<String>) -> Self {
        Self { target, target_id: target_id.into(), patched_fields: BTreeMap::new(), verdict: Verdict::Regenerate }
    }

    /// Display key such as `scene:2` or `character:jack`.
    pub fn key(&self) -> String {
        target_key(self.target, &self.target_id)
    }
}

pub fn target_key(kind: TargetKind, id: &str) -> String {
    match kind {
        TargetKind::Scene => format!("scene:{id}"),
        TargetKind::Character => format!("character:{id}"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionEntry {
    pub scene_index: usize,
    pub similarity_score: f64,
    /// Blocking deviations. Empty whenever the entry passed.
    pub deviation_notes: Vec<String>,
    /// Non-blocking observations from the reviewer.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub remarks: Vec<String>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionReport {
    pub threshold: f64,
    pub entries: Vec<ReflectionEntry>,
}

impl ReflectionReport {
    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }
}

/// The story module's complete output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoryDistillation {
    pub story: Story,
    pub scenes: Vec<SceneDescription>,
    pub characters: Vec<CharacterDescription>,
    pub prompts: Vec<LayeredPrompts>,
    pub report: ReflectionReport,
}

impl StoryDistillation {
    /// Checks scene-index completeness, character closure and global-prompt
    /// recomputability.
    pub fn validate(&self, separator: &str) -> Result<(), StoryError> {
        validate_scenes(&self.scenes, &self.characters)?;
        if self.prompts.len() != self.scenes.len() {
            return Err(StoryError::Misaligned);
        }
        for (p, s) in self.prompts.iter().zip(&self.scenes) {
            if p.scene_index != s.scene_index {
                return Err(StoryError::Misaligned);
            }
            let ids: Vec<&str> = p.character_ids().collect();
            let refs: Vec<&str> = s.character_refs.iter().map(String::as_str).collect();
            if ids != refs {
                return Err(StoryError::InvariantViolation(format!(
                    "scene {} fg prompts {:?} do not match character refs {:?}",
                    s.scene_index, ids, refs
                )));
            }
            if p.bg_prompt.trim().is_empty() || p.fg_prompts.iter().any(|f| f.prompt.trim().is_empty()) {
                return Err(StoryError::InvariantViolation(format!("scene {} has an empty prompt", s.scene_index)));
            }
            if compose_global_prompt(p, separator) != p.global_prompt {
                return Err(StoryError::InvariantViolation(format!(
                    "scene {} global prompt is not the composition of its layers",
                    s.scene_index
                )));
            }
        }
        Ok(())
    }
}

/// Scene invariants: indices are exactly 0..N in order, acts never go
/// backwards, every character ref resolves.
pub fn validate_scenes(scenes: &[SceneDescription], characters: &[CharacterDescription]) -> Result<(), StoryError> {
    for (i, s) in scenes.iter().enumerate() {
        if s.scene_index != i {
            return Err(StoryError::InvariantViolation(format!("scene at position {i} has index {}", s.scene_index)));
        }
        if s.summary.trim().is_empty() {
            return Err(StoryError::InvariantViolation(format!("scene {i} has an empty summary")));
        }
        if s.source_span.start > s.source_span.end {
            return Err(StoryError::InvariantViolation(format!("scene {i} has an inverted source span")));
        }
        if i > 0 && scenes[i - 1].act > s.act {
            return Err(StoryError::InvariantViolation(format!("scene {i} act goes backwards")));
        }
        for r in &s.character_refs {
            if !characters.iter().any(|c| &c.character_id == r) {
                return Err(StoryError::MissingCharacter { scene_index: i, character: r.clone() });
            }
        }
    }
    Ok(())
}

/// Character invariants: ids unique and every schema attribute present.
pub fn validate_characters(characters: &[CharacterDescription], schema: &CharacterCategorySchema) -> Result<(), StoryError> {
    for (i, c) in characters.iter().enumerate() {
        if characters[..i].iter().any(|o| o.character_id == c.character_id) {
            return Err(StoryError::InvariantViolation(format!("duplicate character id `{}`", c.character_id)));
        }
        if c.name.trim().is_empty() {
            return Err(StoryError::InvariantViolation(format!("character `{}` has no name", c.character_id)));
        }
        for key in schema.keys() {
            if c.attribute(key).is_none() {
                return Err(StoryError::InvariantViolation(format!(
                    "character `{}` lacks attribute `{key}`",
                    c.character_id
                )));
            }
        }
    }
    Ok(())
}

/// Lowercase ASCII-alphanumeric slug with `-` separators.
pub fn slugify(name: &str) -> String {
    let mut out = String::new();
    let mut dash = false;
    for ch in name.chars() {
        if ch.is_alphanumeric() {
            if dash && !out.is_empty() {
                out.push('-');
            }
            dash = false;
            out.extend(ch.to_lowercase());
        } else {
            dash = true;
        }
    }
    // Leading articles carry no identity.
    for article in ["the-", "a-", "an-"] {
        if let Some(rest) = out.strip_prefix(article) {
            if !rest.is_empty() {
                out = rest.to_string();
            }
            break;
        }
    }
    if out.is_empty() {
        out.push_str("character");
    }
    out
}

/// Assigns a slug id not already in `taken`, suffixing `-2`, `-3`, ... on collision.
pub fn unique_slug(name: &str, taken: &[String]) -> String {
    let base = slugify(name);
    if !taken.contains(&base) {
        return base;
    }
    (2..).map(|n| format!("{base}-{n}")).find(|c| !taken.contains(c)).expect("unbounded suffixes")
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn act_plan_splits() {
        use Act::*;
        assert_eq!(act_plan(5), vec![Setup, Setup, Conflict, Conflict, Resolution]);
        assert_eq!(act_plan(1), vec![Setup]);
        assert_eq!(act_plan(2), vec![Setup, Conflict]);
        assert_eq!(act_plan(3), vec![Setup, Conflict, Resolution]);
        assert_eq!(act_plan(4), vec![Setup, Setup, Conflict, Resolution]);
        for n in 3..40 {
            let p = act_plan(n);
            assert_eq!(p.len(), n);
            assert!(p.windows(2).all(|w| w[0] <= w[1]));
            for a in Act::ALL {
                assert!(p.contains(&a), "n={n} lacks {a:?}");
            }
        }
    }

    #[test]
    fn slugs() {
        assert_eq!(slugify("Jack"), "jack");
        assert_eq!(slugify("The Old Merchant"), "old-merchant");
        assert_eq!(slugify("  Mrs. O'Brien "), "mrs-o-brien");
        assert_eq!(slugify("!!"), "character");
        let taken = vec!["jack".to_string(), "jack-2".to_string()];
        assert_eq!(unique_slug("Jack", &taken), "jack-3");
        assert_eq!(unique_slug("Giant", &taken), "giant");
    }

    #[test]
    fn schema_requires_attire_and_gender() {
        assert!(CharacterCategorySchema::new(["attire"]).is_err());
        assert!(CharacterCategorySchema::new(["attire", "gender", "attire"]).is_err());
        let s = CharacterCategorySchema::new(["gender", "attire", "hair"]).unwrap();
        assert_eq!(s.keys().len(), 3);
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, r#"["gender","attire","hair"]"#);
        assert!(serde_json::from_str::<CharacterCategorySchema>(r#"["hair"]"#).is_err());
    }

    #[test]
    fn story_rejects_blank_text() {
        assert_eq!(Story::new("  \n\t"), Err(StoryError::EmptyStory));
        let s = Story::new("héllo world").unwrap();
        assert_eq!(s.segment(SourceSpan { start: 1, end: 5 }), "éllo");
    }

    #[test]
    fn config_validation() {
        assert!(DistillationConfig::new(0).validate().is_err());
        assert!(DistillationConfig::new(5).validate().is_ok());
        let mut c = DistillationConfig::new(5);
        c.instructions = InstructionSet::default();
        assert_eq!(c.validate(), Err(StoryError::MissingInstruction(AgentRole::SceneExtraction)));
    }
}
