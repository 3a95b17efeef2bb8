//! Run configuration documents (TOML or JSON).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use visagent_core::backend::TranscriptMode;
use visagent_core::image::ImageModuleConfig;
use visagent_core::story::DistillationConfig;

use crate::registry;

/// Environment variable overriding [`BackendSelection::text`].
pub const TEXT_BACKEND_ENV: &str = "VISAGENT_TEXT_BACKEND";
/// Environment variable overriding [`BackendSelection::image`].
pub const IMAGE_BACKEND_ENV: &str = "VISAGENT_IMAGE_BACKEND";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid configuration: {0}")]
pub struct ConfigError(pub String);

impl ConfigError {
    pub fn new(msg: impl Into<String>) -> Self {
        Self(msg.into())
    }
}

/// Which backend serves each capability, by registry name.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSelection {
    pub text: String,
    /// Transcript file for the `transcript` text backend.
    pub transcript: Option<PathBuf>,
    pub transcript_mode: TranscriptMode,
    pub image: String,
    pub layout: String,
    pub segmenter: String,
    pub embedder: String,
    /// Feature extractor used for FID.
    pub features: String,
    pub renderer: String,
}

impl Default for BackendSelection {
    fn default() -> Self {
        Self {
            text: "generative".into(),
            transcript: None,
            transcript_mode: TranscriptMode::Strict,
            image: "procedural".into(),
            layout: "procedural".into(),
            segmenter: "box".into(),
            embedder: "hash".into(),
            features: "hash".into(),
            renderer: "toy".into(),
        }
    }
}

fn default_distillation() -> DistillationConfig {
    DistillationConfig::new(5)
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub backends: BackendSelection,
    #[serde(default = "default_distillation")]
    pub distillation: DistillationConfig,
    #[serde(default)]
    pub image: ImageModuleConfig,
    /// Closes every approval gate as soon as it opens.
    #[serde(default)]
    pub auto_approve: bool,
    /// Fails the run when a reflection entry does not pass.
    #[serde(default)]
    pub block_on_reflection: bool,
    /// Computes metrics once every scene is rendered.
    #[serde(default = "yes")]
    pub evaluate: bool,
    /// Fails a run whose open gate gets no approval within this many seconds.
    #[serde(default)]
    pub gate_timeout_secs: Option<u64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            backends: BackendSelection::default(),
            distillation: default_distillation(),
            image: ImageModuleConfig::default(),
            auto_approve: false,
            block_on_reflection: false,
            evaluate: true,
            gate_timeout_secs: None,
        }
    }
}

impl RunConfig {
    /// Parses TOML, or JSON when `path` ends in `.json`. A relative
    /// transcript path is resolved against the config file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::new(format!("{}: {e}", path.display())))?;
        let mut cfg = if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text)?
        } else {
            Self::from_toml(&text)?
        };
        if let (Some(t), Some(dir)) = (&cfg.backends.transcript, path.parent()) {
            if t.is_relative() {
                cfg.backends.transcript = Some(dir.join(t));
            }
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::new(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        serde_json::from_str(text).map_err(|e| ConfigError::new(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Applies `VISAGENT_TEXT_BACKEND` and `VISAGENT_IMAGE_BACKEND` as read by `get`.
    pub fn with_env_overrides(mut self, get: impl Fn(&str) -> Option<String>) -> Self {
        if let Some(v) = get(TEXT_BACKEND_ENV).filter(|v| !v.is_empty()) {
            self.backends.text = v;
        }
        if let Some(v) = get(IMAGE_BACKEND_ENV).filter(|v| !v.is_empty()) {
            self.backends.image = v;
        }
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.distillation.validate().map_err(|e| ConfigError::new(e.to_string()))?;
        self.image.validate().map_err(|e| ConfigError::new(e.to_string()))?;
        registry::check_selection(&self.backends)
    }
}
