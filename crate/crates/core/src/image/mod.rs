//! Image module: turns layered prompts into rendered scene images.
//!
//! Per scene the module generates a background and one foreground image per
//! character, asks the scene locator for placements, stitches the layers into
//! a guidance image and renders the final scene with region-aware attention.
//! Foreground images are kept in a [`SubjectStorage`] and passed as references
//! when the same character appears again.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{AgentRole, BackendError, InstructionSet};
use crate::saca::SacaError;
use crate::tensor::Matrix;

pub mod codec;
pub mod elements;
pub mod layout;
pub mod locate;
pub mod pipeline;
pub mod raster;
pub mod render;
pub mod stitch;

pub use elements::{generate_scene_elements, regenerate_element};
pub use layout::{validate_layout, BBox, Layout, LayoutViolation};
pub use locate::locate_subjects;
pub use pipeline::{
    apply_element_verdicts, run_image_module, run_image_scene, ElementApproval, ElementDecision, ImageBackends, SceneAssembly,
    ScriptedApproval,
};
pub use raster::{Mask, PixelRect, Raster};
pub use render::{render_scene, RenderInputs, RenderOutput, RenderedScene, RendererConfig, SceneRenderer, ToyRenderer};
pub use stitch::{stitch, Provenance, StitchedImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementKind {
    Background,
    Foreground,
}

/// Identifies one element of a scene: `bg` or `fg_<character_id>`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ElementKey {
    Background,
    Foreground(String),
}

impl ElementKey {
    pub fn parse(s: &str) -> Option<Self> {
        if s == "bg" {
            Some(ElementKey::Background)
        } else {
            s.strip_prefix("fg_").filter(|id| !id.is_empty()).map(|id| ElementKey::Foreground(id.to_string()))
        }
    }

    pub fn kind(&self) -> ElementKind {
        match self {
            ElementKey::Background => ElementKind::Background,
            ElementKey::Foreground(_) => ElementKind::Foreground,
        }
    }
}

impl fmt::Display for ElementKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ElementKey::Background => f.write_str("bg"),
            ElementKey::Foreground(id) => write!(f, "fg_{id}"),
        }
    }
}

impl TryFrom<String> for ElementKey {
    type Error = String;
    fn try_from(s: String) -> Result<Self, String> {
        ElementKey::parse(&s).ok_or_else(|| format!("`{s}` is not an element key"))
    }
}

impl From<ElementKey> for String {
    fn from(k: ElementKey) -> String {
        k.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementImage {
    pub scene_index: usize,
    pub kind: ElementKind,
    pub character_id: Option<String>,
    pub prompt: String,
    pub pixels: Raster,
    pub generation_seed: u64,
    /// Scene whose stored subject image conditioned this element.
    pub reference_scene: Option<usize>,
}

impl ElementImage {
    pub fn key(&self) -> ElementKey {
        match &self.character_id {
            Some(id) => ElementKey::Foreground(id.clone()),
            None => ElementKey::Background,
        }
    }
}

/// A stored foreground image used to keep a character consistent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRecord {
    pub character_id: String,
    pub scene_index: usize,
    pub image: Raster,
    pub digest: String,
    /// Image-prompt tokens produced by the generator's reference encoder.
    pub tokens: Matrix,
}

/// Per-character history of foreground images, in insertion order.
///
/// Every foreground generation appends. Consumers read the newest record from
/// a scene strictly before the current one, so a scene never conditions on
/// itself.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubjectStorage {
    records: BTreeMap<String, Vec<ReferenceRecord>>,
}

impl SubjectStorage {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, record: ReferenceRecord) {
        self.records.entry(record.character_id.clone()).or_default().push(record);
    }

    pub fn reference_for(&self, character_id: &str, scene_index: usize) -> Option<&ReferenceRecord> {
        self.records.get(character_id)?.iter().rev().find(|r| r.scene_index < scene_index)
    }

    pub fn records(&self, character_id: &str) -> &[ReferenceRecord] {
        self.records.get(character_id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn characters(&self) -> impl Iterator<Item = &str> {
        self.records.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.records.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElementFailure {
    pub element: String,
    pub error: BackendError,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ImageError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("scene {scene_index}: {} element(s) failed to generate", failures.len())]
    Generation { scene_index: usize, failures: Vec<ElementFailure>, partial: Vec<ElementImage> },
    #[error("scene {scene_index}: layout still invalid after {attempts} attempt(s): {}", violations.join("; "))]
    LayoutInvalid { scene_index: usize, attempts: u32, violations: Vec<String> },
    #[error("scene {scene_index}: missing element `{element}`")]
    MissingElement { scene_index: usize, element: String },
    #[error("unknown element `{0}`")]
    UnknownElement(String),
    #[error("inconsistent inputs: {0}")]
    Mismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("no instruction registered for `{0}`")]
    MissingInstruction(AgentRole),
    #[error(transparent)]
    Saca(#[from] SacaError),
    #[error("no element approval arrived in time")]
    FeedbackTimeout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ImageModuleConfig {
    pub canvas_width: u32,
    pub canvas_height: u32,
    pub fg_width: u32,
    pub fg_height: u32,
    pub base_seed: u64,
    /// Minimum normalized bbox area accepted from the scene locator.
    pub min_layout_area: f64,
    pub max_retries: u32,
    pub instructions: InstructionSet,
    pub renderer: RendererConfig,
}

impl Default for ImageModuleConfig {
    fn default() -> Self {
        Self {
            canvas_width: 64,
            canvas_height: 64,
            fg_width: 32,
            fg_height: 48,
            base_seed: 0,
            min_layout_area: 0.01,
            max_retries: 2,
            instructions: InstructionSet::defaults(),
            renderer: RendererConfig::default(),
        }
    }
}

impl ImageModuleConfig {
    pub fn validate(&self) -> Result<(), ImageError> {
        if self.canvas_width == 0 || self.canvas_height == 0 || self.fg_width == 0 || self.fg_height == 0 {
            return Err(ImageError::Config("image sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.min_layout_area) {
            return Err(ImageError::Config("min_layout_area must lie in [0, 1)".into()));
        }
        if let Some(role) = self.instructions.missing(&AgentRole::IMAGE).first() {
            return Err(ImageError::MissingInstruction(*role));
        }
        self.renderer.validate(self.canvas_width, self.canvas_height)
    }
}
