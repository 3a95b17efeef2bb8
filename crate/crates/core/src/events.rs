//! Pipeline events. Every intermediate result of a run appends one.

use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

/// Human approval gates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gate {
    Descriptions,
    Element,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    ScenesExtracted { count: usize, digest: String },
    CharactersExtracted { count: usize, digest: String },
    GateOpened { gate: Gate, scene_index: Option<usize> },
    GateClosed { gate: Gate, scene_index: Option<usize> },
    FeedbackApplied { approved: usize, modified: usize, regenerate: usize },
    /// A fresh backend call replaced one target, e.g. `scene:2`,
    /// `character:jack` or `element:0:fg_jack`.
    Regenerated { target: String },
    PromptsGenerated { count: usize, digest: String },
    Reflected { passed: usize, failed: usize },
    /// One element image. `reference_scene` names the scene whose stored
    /// subject image conditioned the generation.
    ElementGenerated { scene_index: usize, element: String, seed: u64, reference_scene: Option<usize>, digest: String },
    ElementsGenerated { scene_index: usize, count: usize, digest: String },
    SubjectsLocated { scene_index: usize, count: usize, digest: String },
    Stitched { scene_index: usize, fallback_masks: Vec<String>, digest: String },
    Rendered { scene_index: usize, config_digest: String, digest: String },
    PhaseChanged { from: String, to: String },
    Approval { gate: Gate, actor: String, verdicts: usize },
    Evaluated { digest: String },
    Failed { phase: String, error: String },
}

impl Event {
    pub fn is_regeneration(&self) -> bool {
        matches!(self, Event::Regenerated { .. })
    }
}
