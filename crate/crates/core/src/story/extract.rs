use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    act_plan, target_key, unique_slug, Act, CharacterDescription, CharacterCategorySchema, DistillationConfig,
    SceneDescription, SourceSpan, Story, StoryError, TargetKind,
};
use crate::backend::{ask, AgentRole, Journal, TextModelBackend};
use crate::digest::json_digest;
use crate::events::Event;

/// One scene as returned by the scene extraction agent.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct SceneReply {
    pub act: Act,
    pub summary: String,
    #[serde(default)]
    pub characters: Vec<String>,
    pub start_quote: String,
    pub end_quote: String,
}

#[derive(Debug, Deserialize)]
struct ScenesReply {
    scenes: Vec<SceneReply>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct CharacterReply {
    pub name: String,
    #[serde(default)]
    pub aliases: Vec<String>,
    pub attributes: BTreeMap<String, String>,
    #[serde(default = "yes")]
    pub attire_stated: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Deserialize)]
struct CharactersReply {
    characters: Vec<CharacterReply>,
}

/// Character-offset span of the passage from `start_quote` through `end_quote`.
pub(crate) fn locate_span(text: &str, start_quote: &str, end_quote: &str) -> Option<SourceSpan> {
    if start_quote.is_empty() || end_quote.is_empty() {
        return None;
    }
    let start = text.find(start_quote)?;
    let end = start + text[start..].find(end_quote)? + end_quote.len();
    let start_c = text[..start].chars().count();
    let end_c = start_c + text[start..end].chars().count();
    Some(SourceSpan { start: start_c, end: end_c })
}

fn check_scene(text: &str, s: &SceneReply, expected: Act, pos: usize) -> Result<(), String> {
    if s.act != expected {
        return Err(format!("scene {pos} must be in act {expected:?}, got {:?}", s.act));
    }
    if s.summary.trim().is_empty() {
        return Err(format!("scene {pos} has an empty summary"));
    }
    if locate_span(text, &s.start_quote, &s.end_quote).is_none() {
        return Err(format!("scene {pos} quotes are not verbatim excerpts of the story"));
    }
    Ok(())
}

fn scene_from_reply(text: &str, index: usize, r: &SceneReply) -> SceneDescription {
    let span = locate_span(text, &r.start_quote, &r.end_quote).expect("checked");
    let mut refs: Vec<String> = Vec::new();
    for c in &r.characters {
        let c = c.trim();
        if !c.is_empty() && !refs.iter().any(|x| x == c) {
            refs.push(c.to_string());
        }
    }
    SceneDescription { scene_index: index, act: r.act, summary: r.summary.trim().to_string(), source_span: span, character_refs: refs }
}

/// Asks the scene extraction agent for `config.num_scenes` scenes laid out
/// over the three acts.
///
/// `character_refs` of the returned scenes hold the names the agent used;
/// [`link_characters`] maps them onto registered ids.
pub fn extract_scenes(
    story: &Story,
    config: &DistillationConfig,
    backend: &mut dyn TextModelBackend,
    journal: &mut Journal,
) -> Result<Vec<SceneDescription>, StoryError> {
    config.validate()?;
    let plan = act_plan(config.num_scenes);
    let payload = json!({
        "story": story.text,
        "num_scenes": config.num_scenes,
        "acts": plan,
    });
    let text = story.text.as_str();
    let reply: ScenesReply = ask(
        backend,
        journal,
        &config.instructions,
        AgentRole::SceneExtraction,
        &payload,
        config.max_retries,
        |r: &ScenesReply| {
            if r.scenes.len() != plan.len() {
                return Err(format!("expected {} scenes, got {}", plan.len(), r.scenes.len()));
            }
            r.scenes.iter().zip(&plan).enumerate().try_for_each(|(i, (s, a))| check_scene(text, s, *a, i))
        },
    )?;
    let scenes: Vec<SceneDescription> =
        reply.scenes.iter().enumerate().map(|(i, r)| scene_from_reply(text, i, r)).collect();
    journal.push(Event::ScenesExtracted { count: scenes.len(), digest: json_digest(&scenes) });
    Ok(scenes)
}

fn attire_words(attire: &str) -> impl Iterator<Item = String> + '_ {
    const GENERIC: [&str; 6] = ["clothing", "clothes", "wearing", "with", "outfit", "dressed"];
    attire
        .split(|c: char| !c.is_alphabetic())
        .filter(|w| w.chars().count() >= 4)
        .map(|w| w.to_lowercase())
        .filter(|w| !GENERIC.contains(&w.as_str()))
}

/// True if some distinctive word of `attire` appears as a word of `text`.
pub(crate) fn attire_mentioned(text: &str, attire: &str) -> bool {
    let lower = text.to_lowercase();
    let words: Vec<&str> = lower.split(|c: char| !c.is_alphabetic()).filter(|w| !w.is_empty()).collect();
    attire_words(attire).any(|a| words.contains(&a.as_str()))
}

fn check_character(schema: &CharacterCategorySchema, c: &CharacterReply) -> Result<(), String> {
    if c.name.trim().is_empty() {
        return Err("character with empty name".into());
    }
    for key in schema.keys() {
        if c.attributes.get(key).map_or(true, |v| v.trim().is_empty()) {
            return Err(format!("character `{}` lacks attribute `{key}`", c.name));
        }
    }
    Ok(())
}

fn character_from_reply(text: &str, id: String, r: &CharacterReply) -> CharacterDescription {
    let attire = r.attributes.get(CharacterCategorySchema::ATTIRE).map(String::as_str).unwrap_or("");
    let attire_inferred = !r.attire_stated || !attire_mentioned(text, attire);
    CharacterDescription {
        character_id: id,
        name: r.name.trim().to_string(),
        aliases: r.aliases.clone(),
        attributes: r.attributes.iter().map(|(k, v)| (k.clone(), v.trim().to_string())).collect(),
        attire_inferred,
    }
}

/// Asks the character extraction agent for every character with all schema
/// attributes filled.
///
/// Ids are slugs of the first-mention name, numerically suffixed on
/// collision. `attire_inferred` is set when the agent says the attire was
/// inferred or when no distinctive attire word occurs in the story.
pub fn extract_characters(
    story: &Story,
    config: &DistillationConfig,
    backend: &mut dyn TextModelBackend,
    journal: &mut Journal,
) -> Result<Vec<CharacterDescription>, StoryError> {
    let schema = &config.schema;
    let payload = json!({ "story": story.text, "schema": schema.keys() });
    let reply: CharactersReply = ask(
        backend,
        journal,
        &config.instructions,
        AgentRole::CharacterExtraction,
        &payload,
        config.max_retries,
        |r: &CharactersReply| r.characters.iter().try_for_each(|c| check_character(schema, c)),
    )?;
    let mut ids: Vec<String> = Vec::new();
    let mut out = Vec::with_capacity(reply.characters.len());
    for c in &reply.characters {
        let id = unique_slug(&c.name, &ids);
        ids.push(id.clone());
        out.push(character_from_reply(&story.text, id, c));
    }
    journal.push(Event::CharactersExtracted { count: out.len(), digest: json_digest(&out) });
    Ok(out)
}

/// Resolves the names in each scene's `character_refs` to character ids.
pub fn link_characters(
    scenes: &[SceneDescription],
    characters: &[CharacterDescription],
) -> Result<Vec<SceneDescription>, StoryError> {
    scenes
        .iter()
        .map(|s| {
            let mut refs: Vec<String> = Vec::new();
            for name in &s.character_refs {
                let c = characters.iter().find(|c| c.answers_to(name)).ok_or_else(|| StoryError::MissingCharacter {
                    scene_index: s.scene_index,
                    character: name.clone(),
                })?;
                if !refs.contains(&c.character_id) {
                    refs.push(c.character_id.clone());
                }
            }
            Ok(SceneDescription { character_refs: refs, ..s.clone() })
        })
        .collect()
}

/// Fresh backend call for one scene, keeping its index and act.
pub fn regenerate_scene(
    story: &Story,
    config: &DistillationConfig,
    scenes: &[SceneDescription],
    characters: &[CharacterDescription],
    scene_index: usize,
    backend: &mut dyn TextModelBackend,
    journal: &mut Journal,
) -> Result<SceneDescription, StoryError> {
    let previous =
        scenes.get(scene_index).ok_or_else(|| StoryError::UnknownTarget(target_key(TargetKind::Scene, &scene_index.to_string())))?;
    let plan = act_plan(config.num_scenes);
    let act = previous.act;
    let payload = json!({
        "story": story.text,
        "num_scenes": config.num_scenes,
        "acts": plan,
        "regenerate": { "scene_index": scene_index, "act": act, "previous": previous.summary },
    });
    let text = story.text.as_str();
    let reply: ScenesReply = ask(
        backend,
        journal,
        &config.instructions,
        AgentRole::SceneExtraction,
        &payload,
        config.max_retries,
        |r: &ScenesReply| match r.scenes.as_slice() {
            [s] => check_scene(text, s, act, scene_index),
            _ => Err(format!("expected exactly one scene, got {}", r.scenes.len())),
        },
    )?;
    let scene = scene_from_reply(text, scene_index, &reply.scenes[0]);
    let linked = link_characters(core::slice::from_ref(&scene), characters)?.remove(0);
    journal.push(Event::Regenerated { target: target_key(TargetKind::Scene, &scene_index.to_string()) });
    Ok(linked)
}

/// Fresh backend call for one character, keeping its id.
pub fn regenerate_character(
    story: &Story,
    config: &DistillationConfig,
    characters: &[CharacterDescription],
    character_id: &str,
    backend: &mut dyn TextModelBackend,
    journal: &mut Journal,
) -> Result<CharacterDescription, StoryError> {
    let previous = characters
        .iter()
        .find(|c| c.character_id == character_id)
        .ok_or_else(|| StoryError::UnknownTarget(target_key(TargetKind::Character, character_id)))?;
    let schema = &config.schema;
    let payload = json!({
        "story": story.text,
        "schema": schema.keys(),
        "regenerate": { "character_id": character_id, "name": previous.name, "previous": previous.attributes },
    });
    let reply: CharactersReply = ask(
        backend,
        journal,
        &config.instructions,
        AgentRole::CharacterExtraction,
        &payload,
        config.max_retries,
        |r: &CharactersReply| match r.characters.as_slice() {
            [c] => check_character(schema, c),
            _ => Err(format!("expected exactly one character, got {}", r.characters.len())),
        },
    )?;
    let c = character_from_reply(&story.text, character_id.to_string(), &reply.characters[0]);
    journal.push(Event::Regenerated { target: target_key(TargetKind::Character, character_id) });
    Ok(c)
}
