use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use visagent_core::digest::json_digest;
use visagent_core::eval::MetricReport;
use visagent_core::events::Gate;
use visagent_core::image::{ElementDecision, ElementKey, ElementKind, Layout};
use visagent_core::story::{
    CharacterDescription, FeedbackEdit, LayeredPrompts, ReflectionReport, SceneDescription, Story, StoryDistillation,
};
use visagent_core::tensor::Matrix;
use visagent_core::Journal;

use super::phase::Phase;
use crate::artifacts::ImageRef;
use crate::config::RunConfig;

/// Story module output as it fills in.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DistillationState {
    pub scenes: Vec<SceneDescription>,
    pub characters: Vec<CharacterDescription>,
    pub prompts: Vec<LayeredPrompts>,
    pub report: Option<ReflectionReport>,
}

impl DistillationState {
    pub fn complete(&self, story: &Story) -> Option<StoryDistillation> {
        Some(StoryDistillation {
            story: story.clone(),
            scenes: self.scenes.clone(),
            characters: self.characters.clone(),
            prompts: self.prompts.clone(),
            report: self.report.clone()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementRecord {
    pub element: ElementKey,
    pub kind: ElementKind,
    pub character_id: Option<String>,
    pub prompt: String,
    pub image: ImageRef,
    pub generation_seed: u64,
    pub reference_scene: Option<usize>,
    /// Regenerations so far.
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StitchedRecord {
    pub image: ImageRef,
    pub layers: Vec<String>,
    pub fallback_masks: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedRecord {
    pub image: ImageRef,
    pub config_digest: String,
    pub lambda_trace: Vec<f64>,
}

/// Persisted scene assembly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub scene_index: usize,
    pub elements: Vec<ElementRecord>,
    pub layouts: Vec<Layout>,
    pub stitched: Option<StitchedRecord>,
    pub rendered: Option<RenderedRecord>,
}

/// One subject-storage entry, with its image on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRef {
    pub character_id: String,
    pub scene_index: usize,
    pub image: ImageRef,
    pub tokens: Matrix,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpenGate {
    pub gate: Gate,
    pub scene_index: Option<usize>,
    /// Review rounds completed at this gate.
    pub round: u32,
    pub opened_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunError {
    pub phase: Phase,
    pub message: String,
}

/// Persisted orchestration state of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineRun {
    pub run_id: String,
    pub phase: Phase,
    pub story: Story,
    pub config: RunConfig,
    pub distillation: DistillationState,
    pub scenes: Vec<SceneRecord>,
    pub subjects: Vec<SubjectRef>,
    /// Scene the image module is working on.
    pub current_scene: usize,
    pub open_gate: Option<OpenGate>,
    pub journal: Journal,
    pub error: Option<RunError>,
    pub metrics: Option<MetricReport>,
    pub created_at: u64,
    pub updated_at: u64,
}

impl PipelineRun {
    pub fn digest(&self) -> String {
        json_digest(self)
    }

    /// Events with their sequence numbers, starting at 1.
    pub fn events_after(&self, after: u64) -> Vec<SequencedEvent> {
        self.journal
            .events
            .iter()
            .enumerate()
            .skip(after as usize)
            .map(|(i, e)| SequencedEvent { seq: i as u64 + 1, event: e.clone() })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequencedEvent {
    pub seq: u64,
    #[serde(flatten)]
    pub event: visagent_core::Event,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementVerdict {
    pub element: ElementKey,
    pub decision: ElementDecision,
}

/// A reviewer's answer to an open gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApprovalEvent {
    pub run_id: String,
    pub gate: Gate,
    #[serde(default)]
    pub scene_index: Option<usize>,
    /// Description gate payload.
    #[serde(default)]
    pub edits: Vec<FeedbackEdit>,
    /// Element gate payload.
    #[serde(default)]
    pub verdicts: Vec<ElementVerdict>,
    pub actor: String,
    #[serde(default)]
    pub timestamp: Option<u64>,
}

impl ApprovalEvent {
    pub fn approve_all(run_id: impl Into<String>, gate: Gate, actor: impl Into<String>) -> Self {
        Self {
            run_id: run_id.into(),
            gate,
            scene_index: None,
            edits: Vec::new(),
            verdicts: Vec::new(),
            actor: actor.into(),
            timestamp: None,
        }
    }
}

// ---- UI view ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementView {
    pub element: String,
    pub kind: ElementKind,
    pub character_id: Option<String>,
    pub prompt: String,
    pub image: String,
    pub seed: u64,
    pub reference_scene: Option<usize>,
    pub attempts: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneView {
    pub scene_index: usize,
    pub act: String,
    pub summary: String,
    pub character_refs: Vec<String>,
    pub bg_prompt: Option<String>,
    pub fg_prompts: BTreeMap<String, String>,
    pub global_prompt: Option<String>,
    pub reflection: Option<visagent_core::story::ReflectionEntry>,
    pub elements: Vec<ElementView>,
    pub layouts: Vec<Layout>,
    pub stitched_image: Option<String>,
    pub final_image: Option<String>,
}

/// Serialized run state for the console. Field names are a stable contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunView {
    pub run_id: String,
    pub title: Option<String>,
    pub phase: Phase,
    pub open_gate: Option<OpenGate>,
    pub current_scene: usize,
    pub num_scenes: usize,
    pub scenes: Vec<SceneView>,
    pub characters: Vec<CharacterDescription>,
    pub error: Option<RunError>,
    pub metrics: Option<MetricReport>,
    pub event_count: u64,
    pub state_digest: String,
    pub created_at: u64,
    pub updated_at: u64,
}

impl RunView {
    pub fn of(run: &PipelineRun) -> Self {
        let d = &run.distillation;
        let scenes = d
            .scenes
            .iter()
            .map(|s| {
                let p = d.prompts.iter().find(|p| p.scene_index == s.scene_index);
                let rec = run.scenes.iter().find(|r| r.scene_index == s.scene_index);
                SceneView {
                    scene_index: s.scene_index,
                    act: serde_json::to_value(s.act).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
                    summary: s.summary.clone(),
                    character_refs: s.character_refs.clone(),
                    bg_prompt: p.map(|p| p.bg_prompt.clone()),
                    fg_prompts: p
                        .map(|p| p.fg_prompts.iter().map(|f| (f.character_id.clone(), f.prompt.clone())).collect())
                        .unwrap_or_default(),
                    global_prompt: p.map(|p| p.global_prompt.clone()),
                    reflection: d
                        .report
                        .as_ref()
                        .and_then(|r| r.entries.iter().find(|e| e.scene_index == s.scene_index).cloned()),
                    elements: rec
                        .map(|r| {
                            r.elements
                                .iter()
                                .map(|e| ElementView {
                                    element: e.element.to_string(),
                                    kind: e.kind,
                                    character_id: e.character_id.clone(),
                                    prompt: e.prompt.clone(),
                                    image: e.image.path.clone(),
                                    seed: e.generation_seed,
                                    reference_scene: e.reference_scene,
                                    attempts: e.attempts,
                                })
                                .collect()
                        })
                        .unwrap_or_default(),
                    layouts: rec.map(|r| r.layouts.clone()).unwrap_or_default(),
                    stitched_image: rec.and_then(|r| r.stitched.as_ref().map(|s| s.image.path.clone())),
                    final_image: rec.and_then(|r| r.rendered.as_ref().map(|s| s.image.path.clone())),
                }
            })
            .collect();
        RunView {
            run_id: run.run_id.clone(),
            title: run.story.title.clone(),
            phase: run.phase,
            open_gate: run.open_gate.clone(),
            current_scene: run.current_scene,
            num_scenes: run.config.distillation.num_scenes,
            scenes,
            characters: d.characters.clone(),
            error: run.error.clone(),
            metrics: run.metrics.clone(),
            event_count: run.journal.events.len() as u64,
            state_digest: run.digest(),
            created_at: run.created_at,
            updated_at: run.updated_at,
        }
    }
}

/// Short listing entry for `GET /runs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub title: Option<String>,
    pub phase: Phase,
    pub open_gate: Option<OpenGate>,
    pub updated_at: u64,
}

impl RunSummary {
    pub fn of(run: &PipelineRun) -> Self {
        Self {
            run_id: run.run_id.clone(),
            title: run.story.title.clone(),
            phase: run.phase,
            open_gate: run.open_gate.clone(),
            updated_at: run.updated_at,
        }
    }
}
