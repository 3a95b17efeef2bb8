//! Interfaces for every external model the pipeline talks to.
//!
//! Nothing outside this module performs model IO: story and image agents only
//! see these traits. Deterministic mock implementations live in the
//! submodules so the whole pipeline runs without network or weights.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::digest::json_digest;
use crate::events::Event;
use crate::image::raster::{Mask, PixelRect, Raster};
use crate::image::{ElementImage, ElementKind, ReferenceRecord};
use crate::story::LayeredPrompts;
use crate::tensor::Matrix;

pub mod encoder;
pub mod mock_embed;
pub mod mock_image;
pub mod mock_layout;
pub mod mock_segment;
pub mod mock_text;
pub mod transcript;

pub use encoder::{HashTokenEncoder, TokenEncoder};
pub use mock_embed::{HashEmbedder, ScriptedEmbedder};
pub use mock_image::ProceduralImageGenerator;
pub use mock_layout::MockLayoutBackend;
pub use mock_segment::BoxSegmenter;
pub use mock_text::{FailingTextBackend, GenerativeTextBackend, ScriptedTextBackend};
pub use transcript::{RecordingTextBackend, Transcript, TranscriptBackend, TranscriptEntry, TranscriptMode};

/// Agent roles that consume an instruction from an [`InstructionSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentRole {
    SceneExtraction,
    CharacterExtraction,
    PromptGeneration,
    Reflection,
    SceneLocator,
}

impl AgentRole {
    pub const STORY: [AgentRole; 4] = [
        AgentRole::SceneExtraction,
        AgentRole::CharacterExtraction,
        AgentRole::PromptGeneration,
        AgentRole::Reflection,
    ];
    pub const IMAGE: [AgentRole; 1] = [AgentRole::SceneLocator];

    pub fn as_str(self) -> &'static str {
        match self {
            AgentRole::SceneExtraction => "scene_extraction",
            AgentRole::CharacterExtraction => "character_extraction",
            AgentRole::PromptGeneration => "prompt_generation",
            AgentRole::Reflection => "reflection",
            AgentRole::SceneLocator => "scene_locator",
        }
    }
}

impl fmt::Display for AgentRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Instruction text per agent role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct InstructionSet(pub BTreeMap<AgentRole, String>);

impl InstructionSet {
    pub fn get(&self, role: AgentRole) -> Option<&str> {
        self.0.get(&role).map(String::as_str)
    }

    pub fn with(mut self, role: AgentRole, text: impl Into<String>) -> Self {
        self.0.insert(role, text.into());
        self
    }

    /// Roles from `required` that have no instruction.
    pub fn missing(&self, required: &[AgentRole]) -> Vec<AgentRole> {
        required.iter().copied().filter(|r| !self.0.contains_key(r)).collect()
    }

    /// Shipped default instructions. The wording is original to this project.
    pub fn defaults() -> Self {
        InstructionSet::default()
            .with(
                AgentRole::SceneExtraction,
                "Read the story and pick the key scenes following a three-act structure \
                 (setup, conflict, resolution). Return exactly `num_scenes` scenes in narrative \
                 order using the act for each position given in `acts`. For every scene give a \
                 one-sentence visual summary, the names of the characters that appear, and the \
                 passage it comes from as verbatim `start_quote` / `end_quote` excerpts.",
            )
            .with(
                AgentRole::CharacterExtraction,
                "List every character that appears in the story. For each one fill every \
                 attribute listed in `schema`. When the story never states what a character \
                 wears, infer plausible attire from the setting and set `attire_stated` to false. \
                 Give an `appearance` phrase usable verbatim in an image prompt.",
            )
            .with(
                AgentRole::PromptGeneration,
                "Write a background prompt describing only the setting of the scene (no \
                 characters) and, for each listed character, a short pose/action phrase. Do not \
                 restate appearance; it is prepended for you. Use comma-separated clauses suited \
                 to a diffusion model.",
            )
            .with(
                AgentRole::Reflection,
                "Compare the prompt with the story passage and scene summary. Report any content \
                 in the prompt that is missing from or contradicts the story. Mark a note as \
                 blocking only when it would mislead a reader about the plot.",
            )
            .with(
                AgentRole::SceneLocator,
                "Given the background image, the character images and the scene prompts, propose \
                 a bounding box (x_min, y_min, x_max, y_max) in normalized canvas coordinates for \
                 every character so the composition matches the scene. Optionally give a z_order.",
            )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Capability {
    Text,
    MultimodalLayout,
    ImageGeneration,
    Embedding,
    Segmentation,
    Rendering,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub name: String,
    pub capability: Capability,
    pub deterministic: bool,
    pub concurrency_safe: bool,
}

impl BackendDescriptor {
    pub fn new(name: impl Into<String>, capability: Capability, deterministic: bool, concurrency_safe: bool) -> Self {
        Self { name: name.into(), capability, deterministic, concurrency_safe }
    }

    pub fn mock(name: impl Into<String>, capability: Capability) -> Self {
        Self::new(name, capability, true, true)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("backend `{backend}` failed: {message}")]
pub struct BackendError {
    pub backend: String,
    pub message: String,
}

impl BackendError {
    pub fn new(backend: impl Into<String>, message: impl Into<String>) -> Self {
        Self { backend: backend.into(), message: message.into() }
    }
}

/// A backend reply that could not be parsed into the role's declared shape.
#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[error("reply for `{role}` violates its schema after {attempts} attempt(s): {violation}")]
pub struct SchemaError {
    pub role: String,
    pub violation: String,
    pub attempts: u32,
}

/// One backend invocation. Appended once per call and never mutated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CallRecord {
    pub backend: String,
    pub role: String,
    pub input_digest: String,
    pub output_digest: String,
    pub wall_time_us: u64,
    pub retry: u32,
}

fn zero_clock() -> u64 {
    0
}

/// Append-only call records and pipeline events for one run.
///
/// The clock returns microseconds; the default clock always returns zero so
/// journals from two identical runs compare equal.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Journal {
    pub calls: Vec<CallRecord>,
    pub events: Vec<Event>,
    #[serde(skip, default = "default_clock")]
    clock: fn() -> u64,
}

fn default_clock() -> fn() -> u64 {
    zero_clock
}

impl Default for Journal {
    fn default() -> Self {
        Self::new()
    }
}

impl PartialEq for Journal {
    fn eq(&self, other: &Self) -> bool {
        self.calls == other.calls && self.events == other.events
    }
}

impl Journal {
    pub fn new() -> Self {
        Self { calls: Vec::new(), events: Vec::new(), clock: zero_clock }
    }

    pub fn with_clock(clock: fn() -> u64) -> Self {
        Self { calls: Vec::new(), events: Vec::new(), clock }
    }

    pub fn set_clock(&mut self, clock: fn() -> u64) {
        self.clock = clock;
    }

    pub fn now(&self) -> u64 {
        (self.clock)()
    }

    pub fn push(&mut self, event: Event) {
        self.events.push(event);
    }

    pub fn record(&mut self, backend: &str, role: &str, input_digest: String, output_digest: String, started: u64, retry: u32) {
        let end = self.now();
        self.calls.push(CallRecord {
            backend: backend.to_string(),
            role: role.to_string(),
            input_digest,
            output_digest,
            wall_time_us: end.saturating_sub(started),
            retry,
        });
    }

    /// Number of calls made under `role`.
    pub fn calls_for(&self, role: &str) -> usize {
        self.calls.iter().filter(|c| c.role == role).count()
    }
}

pub trait TextModelBackend {
    fn descriptor(&self) -> BackendDescriptor;
    fn complete(&mut self, role: AgentRole, instruction: &str, payload: &Value) -> Result<Value, BackendError>;
}

/// Everything the scene locator sees when proposing placements.
pub struct LayoutRequest<'a> {
    pub instruction: &'a str,
    pub prompts: &'a LayeredPrompts,
    pub background: &'a ElementImage,
    pub foregrounds: &'a [ElementImage],
    /// Violation messages from a rejected previous proposal, if any.
    pub feedback: &'a [String],
}

/// A raw, unvalidated placement proposal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayoutProposal {
    pub character_id: String,
    pub bbox: [f64; 4],
    #[serde(default)]
    pub z_order: Option<i32>,
}

pub trait MultimodalBackend {
    fn descriptor(&self) -> BackendDescriptor;
    fn propose_layout(&mut self, request: &LayoutRequest<'_>) -> Result<Vec<LayoutProposal>, BackendError>;
}

pub struct GenerationRequest<'a> {
    pub prompt: &'a str,
    pub kind: ElementKind,
    pub width: u32,
    pub height: u32,
    pub reference: Option<&'a ReferenceRecord>,
    pub seed: u64,
}

pub trait ImageGeneratorBackend {
    fn descriptor(&self) -> BackendDescriptor;
    fn generate(&mut self, request: &GenerationRequest<'_>) -> Result<Raster, BackendError>;
    /// Image-prompt token block stored alongside a reference image.
    fn encode_reference(&mut self, image: &Raster) -> Result<Matrix, BackendError>;
}

#[derive(Debug, Clone, Copy)]
pub enum EmbedInput<'a> {
    Text(&'a str),
    Image(&'a Raster),
}

impl EmbedInput<'_> {
    pub fn digest(&self) -> String {
        match self {
            EmbedInput::Text(t) => crate::digest::sha256_hex(t.as_bytes()),
            EmbedInput::Image(r) => r.digest_hex(),
        }
    }
}

pub trait EmbeddingBackend {
    fn descriptor(&self) -> BackendDescriptor;
    /// Unit-norm embedding.
    fn embed(&mut self, input: EmbedInput<'_>) -> Result<Vec<f64>, BackendError>;
}

pub trait SegmentationBackend {
    fn descriptor(&self) -> BackendDescriptor;
    /// Soft mask over `image` with values in [0, 1], zero outside `bbox`.
    fn subject_mask(&mut self, image: &Raster, label: &str, bbox: PixelRect) -> Result<Mask, BackendError>;
}

/// Journaled embedding call.
pub fn embed_logged(
    backend: &mut dyn EmbeddingBackend,
    journal: &mut Journal,
    role: &str,
    input: EmbedInput<'_>,
) -> Result<Vec<f64>, BackendError> {
    let name = backend.descriptor().name;
    let started = journal.now();
    let res = backend.embed(input);
    let out = match &res {
        Ok(v) => json_digest(v),
        Err(e) => json_digest(&e.message),
    };
    journal.record(&name, role, input.digest(), out, started, 0);
    res
}

/// Failure of a structured text request.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AskError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("no instruction registered for `{0}`")]
    MissingInstruction(AgentRole),
}

/// Sends a structured request and parses the reply into `T`.
///
/// A reply that fails to deserialize or fails `check` is re-asked up to
/// `max_retries` times with the violation appended to the instruction. Every
/// attempt is journaled with its retry index.
pub fn ask<T, F>(
    backend: &mut dyn TextModelBackend,
    journal: &mut Journal,
    instructions: &InstructionSet,
    role: AgentRole,
    payload: &Value,
    max_retries: u32,
    mut check: F,
) -> Result<T, AskError>
where
    T: DeserializeOwned,
    F: FnMut(&T) -> Result<(), String>,
{
    let base = instructions.get(role).ok_or(AskError::MissingInstruction(role))?;
    let name = backend.descriptor().name;
    let input_digest = json_digest(payload);
    let mut instruction = String::from(base);
    let mut last_violation = String::new();
    for attempt in 0..=max_retries {
        let started = journal.now();
        let reply = backend.complete(role, &instruction, payload);
        let reply = match reply {
            Ok(v) => v,
            Err(e) => {
                journal.record(&name, role.as_str(), input_digest.clone(), json_digest(&e.message), started, attempt);
                return Err(e.into());
            }
        };
        journal.record(&name, role.as_str(), input_digest.clone(), json_digest(&reply), started, attempt);
        let parsed = serde_json::from_value::<T>(reply).map_err(|e| e.to_string());
        let violation = match parsed {
            Ok(v) => match check(&v) {
                Ok(()) => return Ok(v),
                Err(msg) => msg,
            },
            Err(msg) => msg,
        };
        instruction = format!("{base}\n\nYour previous reply was rejected: {violation}. Reply again with a corrected document.");
        last_violation = violation;
    }
    Err(SchemaError { role: role.as_str().to_string(), violation: last_violation, attempts: max_retries + 1 }.into())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use serde_json::json;

    #[derive(Debug, Deserialize)]
    struct Reply {
        n: u32,
    }

    #[test]
    fn ask_reasks_then_succeeds() {
        let mut backend = ScriptedTextBackend::new("scripted");
        backend.push(AgentRole::Reflection, json!({"wrong": 1}));
        backend.push(AgentRole::Reflection, json!({"n": 3}));
        let mut journal = Journal::new();
        let set = InstructionSet::defaults();
        let r: Reply = ask(&mut backend, &mut journal, &set, AgentRole::Reflection, &json!({}), 2, |_| Ok(())).unwrap();
        assert_eq!(r.n, 3);
        assert_eq!(journal.calls.len(), 2);
        assert_eq!(journal.calls[1].retry, 1);
        assert!(backend.instructions_seen()[1].contains("rejected"));
    }

    #[test]
    fn ask_surfaces_schema_error_after_bound() {
        let mut backend = ScriptedTextBackend::new("scripted");
        for _ in 0..3 {
            backend.push(AgentRole::Reflection, json!({"n": 0}));
        }
        let mut journal = Journal::new();
        let set = InstructionSet::defaults();
        let err = ask::<Reply, _>(&mut backend, &mut journal, &set, AgentRole::Reflection, &json!({}), 2, |r| {
            if r.n == 0 { Err("n must be positive".into()) } else { Ok(()) }
        })
        .unwrap_err();
        match err {
            AskError::Schema(e) => {
                assert_eq!(e.attempts, 3);
                assert!(e.violation.contains("positive"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(journal.calls.len(), 3);
    }

    #[test]
    fn missing_instruction_is_reported() {
        let mut backend = ScriptedTextBackend::new("scripted");
        let mut journal = Journal::new();
        let set = InstructionSet::default();
        let err = ask::<Reply, _>(&mut backend, &mut journal, &set, AgentRole::Reflection, &json!({}), 0, |_| Ok(()));
        assert_eq!(err.unwrap_err(), AskError::MissingInstruction(AgentRole::Reflection));
        assert!(journal.calls.is_empty());
    }

    #[test]
    fn defaults_cover_every_role() {
        let set = InstructionSet::defaults();
        assert!(set.missing(&AgentRole::STORY).is_empty());
        assert!(set.missing(&AgentRole::IMAGE).is_empty());
        assert_eq!(InstructionSet::default().missing(&[AgentRole::Reflection]), vec![AgentRole::Reflection]);
    }
}
