//! Deterministic text backends.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde_json::{json, Value};

use super::{AgentRole, BackendDescriptor, BackendError, Capability, TextModelBackend};

/// Replays queued replies per role, in order.
#[derive(Debug, Clone, Default)]
pub struct ScriptedTextBackend {
    name: String,
    queues: BTreeMap<AgentRole, VecDeque<Value>>,
    instructions: Vec<String>,
    payloads: Vec<(AgentRole, Value)>,
}

impl ScriptedTextBackend {
    pub fn new(name: impl Into<String>) -> Self {
        Self { name: name.into(), ..Self::default() }
    }

    pub fn push(&mut self, role: AgentRole, reply: Value) -> &mut Self {
        self.queues.entry(role).or_default().push_back(reply);
        self
    }

    /// Instructions received, in call order.
    pub fn instructions_seen(&self) -> &[String] {
        &self.instructions
    }

    pub fn payloads_seen(&self) -> &[(AgentRole, Value)] {
        &self.payloads
    }

    pub fn remaining(&self, role: AgentRole) -> usize {
        self.queues.get(&role).map_or(0, VecDeque::len)
    }
}

impl TextModelBackend for ScriptedTextBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor::mock(self.name.clone(), Capability::Text)
    }

    fn complete(&mut self, role: AgentRole, instruction: &str, payload: &Value) -> Result<Value, BackendError> {
        self.instructions.push(instruction.to_string());
        self.payloads.push((role, payload.clone()));
        self.queues
            .get_mut(&role)
            .and_then(VecDeque::pop_front)
            .ok_or_else(|| BackendError::new(self.name.clone(), format!("no scripted reply left for `{role}`")))
    }
}

/// Fails every request with the same message.
#[derive(Debug, Clone)]
pub struct FailingTextBackend {
    pub name: String,
    pub message: String,
}

impl FailingTextBackend {
    pub fn new(name: impl Into<String>, message: impl Into<String>) -> Self {
        Self { name: name.into(), message: message.into() }
    }
}

impl TextModelBackend for FailingTextBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor::mock(self.name.clone(), Capability::Text)
    }

    fn complete(&mut self, _: AgentRole, _: &str, _: &Value) -> Result<Value, BackendError> {
        Err(BackendError::new(self.name.clone(), self.message.clone()))
    }
}

/// Answers every role from simple text heuristics over the payload.
///
/// Sentences are split on `.`, `!` and `?`; characters are capitalized words
/// used at least twice that are not common sentence openers. Replies are a
/// pure function of the payload, so runs are reproducible, but the quality is
/// only good enough to drive the pipeline end to end.
#[derive(Debug, Clone, Default)]
pub struct GenerativeTextBackend;

const OPENERS: [&str; 40] = [
    "The", "A", "An", "He", "She", "It", "They", "We", "I", "You", "His", "Her", "Their", "Its", "One", "When", "Then",
    "But", "And", "So", "As", "At", "In", "On", "Once", "There", "This", "That", "With", "After", "Before", "Soon",
    "Finally", "Now", "From", "Every", "What", "Who", "If", "Upon",
];

fn sentences(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, c) in text.char_indices() {
        if matches!(c, '.' | '!' | '?') {
            let s = text[start..i + c.len_utf8()].trim();
            if s.chars().any(char::is_alphanumeric) {
                out.push(s);
            }
            start = i + c.len_utf8();
        }
    }
    let tail = text[start..].trim();
    if tail.chars().any(char::is_alphanumeric) {
        out.push(tail);
    }
    out
}

fn words(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\'')).filter(|w| !w.is_empty())
}

fn is_capitalized(w: &str) -> bool {
    w.chars().next().is_some_and(char::is_uppercase) && w.chars().all(|c| c.is_alphabetic() || c == '\'')
}

/// Character names in order of first appearance.
fn character_names(text: &str) -> Vec<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut order: Vec<&str> = Vec::new();
    for w in words(text).filter(|w| is_capitalized(w) && !OPENERS.contains(w)) {
        let n = counts.entry(w).or_insert(0);
        if *n == 0 {
            order.push(w);
        }
        *n += 1;
    }
    order.into_iter().filter(|w| counts[w] >= 2).map(String::from).collect()
}

fn mentions(text: &str, name: &str) -> bool {
    words(text).any(|w| w == name)
}

fn after_marker<'a>(sentence: &'a str, markers: &[&str]) -> Option<String> {
    let lower = sentence.to_lowercase();
    for m in markers {
        if let Some(i) = lower.find(m) {
            let rest = &sentence[i + m.len()..];
            let phrase: Vec<&str> = rest
                .split(|c: char| matches!(c, ',' | '.' | ';' | '!' | '?'))
                .next()
                .unwrap_or("")
                .split_whitespace()
                .take(5)
                .collect();
            if !phrase.is_empty() {
                return Some(phrase.join(" "));
            }
        }
    }
    None
}

fn describe(story: &str, name: &str, schema: &[String]) -> Value {
    let about: Vec<&str> = sentences(story).into_iter().filter(|s| mentions(s, name)).collect();
    let joined = about.join(" ").to_lowercase();
    let count = |ws: &[&str]| words(&joined).filter(|w| ws.contains(w)).count();
    let gender = match (count(&["he", "him", "his", "boy", "man", "king"]), count(&["she", "her", "girl", "woman", "queen"])) {
        (m, f) if m > f => "male",
        (m, f) if f > m => "female",
        _ => "unspecified",
    };
    let age = if count(&["boy", "girl", "young", "child", "little"]) > 0 {
        "young"
    } else if count(&["old", "elderly", "aged"]) > 0 {
        "old"
    } else {
        "adult"
    };
    let stated = about.iter().find_map(|s| after_marker(s, &["wearing ", "wore ", "dressed in "]));
    let attire_stated = stated.is_some();
    let attire = stated.unwrap_or_else(|| "plain period clothing".into());
    let person = match gender {
        "male" => "man",
        "female" => "woman",
        _ => "person",
    };
    let mut attributes = BTreeMap::new();
    for key in schema {
        let v = match key.as_str() {
            "attire" => attire.clone(),
            "gender" => gender.to_string(),
            "age" => age.to_string(),
            "appearance" => format!("{name}, a {age} {person} wearing {attire}"),
            _ => "unspecified".to_string(),
        };
        attributes.insert(key.clone(), v);
    }
    json!({ "name": name, "aliases": [], "attributes": attributes, "attire_stated": attire_stated })
}

fn scene_for(story: &str, sents: &[&str], names: &[String], index: usize, count: usize, act: &Value, alt: bool) -> Value {
    let n = sents.len().max(1);
    // Contiguous chunks; when there are fewer sentences than scenes, reuse.
    let (lo, hi) = if n >= count {
        (index * n / count, ((index + 1) * n / count).max(index * n / count + 1))
    } else {
        let i = index.min(n - 1);
        (i, i + 1)
    };
    let chunk = &sents[lo..hi.min(sents.len())];
    let first = chunk.first().copied().unwrap_or(story);
    let last = chunk.last().copied().unwrap_or(story);
    let summary = if alt { last } else { first };
    let text = chunk.join(" ");
    let cast: Vec<&String> = names.iter().filter(|c| mentions(&text, c)).collect();
    json!({
        "act": act,
        "summary": summary,
        "characters": cast,
        "start_quote": first,
        "end_quote": last,
    })
}

fn strip_names(text: &str, names: &[&str]) -> String {
    let kept: Vec<&str> = text.split_whitespace().filter(|w| !names.iter().any(|n| words(w).any(|x| x == *n))).collect();
    kept.join(" ").trim_end_matches(['.', '!', '?']).to_lowercase()
}

impl GenerativeTextBackend {
    fn reply(&self, role: AgentRole, payload: &Value) -> Result<Value, String> {
        let s = |k: &str| payload.get(k).and_then(Value::as_str).unwrap_or("");
        match role {
            AgentRole::SceneExtraction => {
                let story = s("story");
                let sents = sentences(story);
                let names = character_names(story);
                let acts = payload.get("acts").and_then(Value::as_array).ok_or("payload lacks `acts`")?;
                if let Some(r) = payload.get("regenerate") {
                    let i = r.get("scene_index").and_then(Value::as_u64).ok_or("bad regenerate block")? as usize;
                    let act = r.get("act").cloned().unwrap_or(Value::Null);
                    let scene = scene_for(story, &sents, &names, i, acts.len(), &act, true);
                    return Ok(json!({ "scenes": [scene] }));
                }
                let scenes: Vec<Value> =
                    acts.iter().enumerate().map(|(i, a)| scene_for(story, &sents, &names, i, acts.len(), a, false)).collect();
                Ok(json!({ "scenes": scenes }))
            }
            AgentRole::CharacterExtraction => {
                let story = s("story");
                let schema: Vec<String> = payload
                    .get("schema")
                    .and_then(Value::as_array)
                    .map(|a| a.iter().filter_map(Value::as_str).map(String::from).collect())
                    .unwrap_or_default();
                if let Some(r) = payload.get("regenerate") {
                    let name = r.get("name").and_then(Value::as_str).ok_or("bad regenerate block")?;
                    return Ok(json!({ "characters": [describe(story, name, &schema)] }));
                }
                let chars: Vec<Value> = character_names(story).iter().map(|n| describe(story, n, &schema)).collect();
                Ok(json!({ "characters": chars }))
            }
            AgentRole::PromptGeneration => {
                let summary = s("summary");
                let cast = payload.get("characters").and_then(Value::as_array).cloned().unwrap_or_default();
                let names: Vec<&str> = cast.iter().filter_map(|c| c.get("name").and_then(Value::as_str)).collect();
                let setting = strip_names(summary, &names);
                let bg = if setting.is_empty() { "an empty landscape".to_string() } else { format!("the setting of: {setting}, no people") };
                let fg: Vec<Value> = cast
                    .iter()
                    .map(|c| {
                        let name = c.get("name").and_then(Value::as_str).unwrap_or("");
                        json!({ "character": c.get("id").cloned().unwrap_or(Value::Null), "action": format!("full body, {}", strip_names(summary, &[name])) })
                    })
                    .collect();
                Ok(json!({ "bg_prompt": bg, "fg": fg }))
            }
            AgentRole::Reflection => {
                let source: BTreeSet<String> =
                    words(&format!("{} {}", s("segment"), s("summary"))).map(|w| w.to_lowercase()).collect();
                let novel: BTreeSet<String> = words(s("prompt"))
                    .map(|w| w.to_lowercase())
                    .filter(|w| w.chars().count() >= 5 && !source.contains(w))
                    .collect();
                let notes: Vec<Value> = novel
                    .iter()
                    .map(|w| json!({ "text": format!("`{w}` does not occur in the passage"), "blocking": false }))
                    .collect();
                Ok(json!({ "notes": notes }))
            }
            AgentRole::SceneLocator => Err("scene locator requests go to a multimodal backend".into()),
        }
    }
}

impl TextModelBackend for GenerativeTextBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor::mock("heuristic-text", Capability::Text)
    }

    fn complete(&mut self, role: AgentRole, _: &str, payload: &Value) -> Result<Value, BackendError> {
        self.reply(role, payload).map_err(|m| BackendError::new("heuristic-text", m))
    }
}
