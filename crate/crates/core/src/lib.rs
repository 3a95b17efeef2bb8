//! Core of the visagent story-visualization pipeline.
//!
//! The crate is `no_std` (with `alloc`) and holds everything that is pure
//! computation over in-memory values:
//!
//! - [`story`]: story distillation into scenes, characters and layered prompts.
//! - [`image`]: scene element generation, subject placement, layer stitching
//!   and scene rendering.
//! - [`saca`]: the semantic-aware cross-attention layer and the toy denoiser
//!   hosting it.
//! - [`backend`]: interfaces for every external model plus deterministic mocks.
//! - [`eval`]: TIS / FID / CCS metrics and the benchmark document format.
//!
//! File IO, persistence, the HTTP API and the CLI live in the `visagent` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod backend;
pub mod digest;
pub mod eval;
pub mod events;
pub mod image;
pub mod saca;
pub mod story;
pub mod tensor;

pub use backend::{AgentRole, BackendDescriptor, BackendError, Capability, InstructionSet, Journal};
pub use events::Event;
