//! Semantic-aware cross-attention (SA-CA).
//!
//! Each character region of the latent attends only to that character's text
//! and image-prompt tokens, the background region to the background tokens,
//! and a global pass over the whole latent attends to the global prompt. The
//! regional and global outputs are blended with a step-dependent weight λ.
//!
//! Image-prompt keys and values are mean-aligned to their text counterparts
//! (first-moment AdaIN) before the image branch is added, so the two sources
//! live on the same scale.

use alloc::string::String;
use core::fmt;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Matrix;

pub mod attention;
pub mod denoiser;
pub mod mask;
pub mod schedule;

pub use attention::{adain_mean_align, CrossAttentionWeights, SacaLayer};
pub use denoiser::{DdimSchedule, DenoiseOutput, DenoiserConfig, DenoiserWeights, Level, ToyDenoiser};
pub use mask::{rasterize_masks, CharacterMask, RegionMaskSet};
pub use schedule::{BlendRange, GlobalBlendSchedule};

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
pub enum SacaError {
    #[error("region `{0}` covers no latent cell")]
    DegenerateRegion(String),
    #[error("{0} token block is empty")]
    EmptyTokens(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("step {step} is outside 1..={total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error("invalid blend schedule: {0}")]
    InvalidSchedule(String),
    #[error("no token bundle for region `{0}`")]
    MissingBundle(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

/// Which part of the canvas a token bundle conditions.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionId {
    Character(String),
    Background,
    Global,
}

impl fmt::Display for RegionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RegionId::Character(id) => write!(f, "character:{id}"),
            RegionId::Background => f.write_str("background"),
            RegionId::Global => f.write_str("global"),
        }
    }
}

/// Text tokens and image-prompt tokens for one region, both `n x d_model`.
/// The global region normally carries no image tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionTokenBundle {
    pub region: RegionId,
    pub text_tokens: Matrix,
    pub image_tokens: Option<Matrix>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub heads: usize,
    /// Weight of the image-prompt branch.
    pub image_weight: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self { d_model: 16, heads: 2, image_weight: 1.0 }
    }
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<(), SacaError> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(SacaError::Config(alloc::format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if !self.image_weight.is_finite() || self.image_weight < 0.0 {
            return Err(SacaError::Config("image_weight must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}
