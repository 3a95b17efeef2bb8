//! Recorded text-model exchanges, replayed by request digest.
//!
//! File format:
//!
//! ```json
//! {"version": 1, "entries": [{"role": "scene_extraction", "digest": "<sha256>", "response": {...}}]}
//! ```
//!
//! `digest` is the SHA-256 of the canonical JSON request payload. The
//! instruction text is not part of the key, so a re-ask (same payload,
//! amended instruction) consumes the next entry recorded under the same key.

use alloc::collections::{BTreeMap, VecDeque};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::mock_text::GenerativeTextBackend;
use super::{AgentRole, BackendDescriptor, BackendError, Capability, TextModelBackend};
use crate::digest::json_digest;

pub const TRANSCRIPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub role: AgentRole,
    pub digest: String,
    pub response: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transcript {
    pub version: u32,
    pub entries: Vec<TranscriptEntry>,
}

impl Default for Transcript {
    fn default() -> Self {
        Self { version: TRANSCRIPT_VERSION, entries: Vec::new() }
    }
}

impl Transcript {
    pub fn from_json(s: &str) -> Result<Self, String> {
        let t: Transcript = serde_json::from_str(s).map_err(|e| format!("{e}"))?;
        if t.version != TRANSCRIPT_VERSION {
            return Err(format!("unsupported transcript version {}", t.version));
        }
        Ok(t)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("transcript serializes")
    }

    pub fn push(&mut self, role: AgentRole, payload: &Value, response: Value) {
        self.entries.push(TranscriptEntry { role, digest: json_digest(payload), response });
    }

    pub fn extend(&mut self, other: Transcript) {
        self.entries.extend(other.entries);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranscriptMode {
    /// A request without a recorded reply fails.
    Strict,
    /// A request without a recorded reply falls back to the heuristic backend.
    Generative,
}

#[derive(Debug, Clone)]
pub struct TranscriptBackend {
    name: String,
    mode: TranscriptMode,
    replies: BTreeMap<(AgentRole, String), VecDeque<Value>>,
    fallback: GenerativeTextBackend,
    misses: Vec<(AgentRole, String)>,
}

impl TranscriptBackend {
    pub fn new(transcript: Transcript, mode: TranscriptMode) -> Self {
        let mut replies: BTreeMap<(AgentRole, String), VecDeque<Value>> = BTreeMap::new();
        for e in transcript.entries {
            replies.entry((e.role, e.digest)).or_default().push_back(e.response);
        }
        Self { name: "transcript".into(), mode, replies, fallback: GenerativeTextBackend, misses: Vec::new() }
    }

    /// Requests that had no recorded reply.
    pub fn misses(&self) -> &[(AgentRole, String)] {
        &self.misses
    }

    pub fn unused(&self) -> usize {
        self.replies.values().map(VecDeque::len).sum()
    }
}

impl TextModelBackend for TranscriptBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor::mock(self.name.clone(), Capability::Text)
    }

    fn complete(&mut self, role: AgentRole, instruction: &str, payload: &Value) -> Result<Value, BackendError> {
        let digest = json_digest(payload);
        if let Some(v) = self.replies.get_mut(&(role, digest.clone())).and_then(VecDeque::pop_front) {
            return Ok(v);
        }
        self.misses.push((role, digest.clone()));
        match self.mode {
            TranscriptMode::Strict => Err(BackendError::new(
                self.name.clone(),
                format!("no recorded reply for `{role}` request {digest}"),
            )),
            TranscriptMode::Generative => self.fallback.complete(role, instruction, payload),
        }
    }
}

/// Wraps a backend and records every successful exchange.
pub struct RecordingTextBackend<B> {
    pub inner: B,
    transcript: Transcript,
}

impl<B: TextModelBackend> RecordingTextBackend<B> {
    pub fn new(inner: B) -> Self {
        Self { inner, transcript: Transcript::default() }
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn into_transcript(self) -> Transcript {
        self.transcript
    }
}

impl<B: TextModelBackend> TextModelBackend for RecordingTextBackend<B> {
    fn descriptor(&self) -> BackendDescriptor {
        self.inner.descriptor()
    }

    fn complete(&mut self, role: AgentRole, instruction: &str, payload: &Value) -> Result<Value, BackendError> {
        let v = self.inner.complete(role, instruction, payload)?;
        self.transcript.push(role, payload, v.clone());
        Ok(v)
    }
}
