//! Story-to-scene-images pipeline with persistence, an HTTP API and a CLI.
//!
//! The pure pipeline lives in [`visagent_core`]. This crate adds what needs
//! the standard library:
//!
//! - [`config`]: run configuration files.
//! - [`registry`]: backend names to backend instances.
//! - [`hosted`]: adapters for hosted chat and image models.
//! - [`artifacts`]: PNG artifacts and atomic writes.
//! - [`orchestrator`]: the run state machine and its store.
//! - [`api`]: the HTTP API for the review console.

#![forbid(unsafe_code)]

pub mod api;
pub mod artifacts;
pub mod bench;
pub mod config;
pub mod hosted;
pub mod orchestrator;
pub mod registry;

pub use config::{BackendSelection, ConfigError, RunConfig};
pub use orchestrator::{ApprovalEvent, Orchestrator, OrchestratorError, Phase, PipelineRun, RunStore, RunView};
