use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::Deserialize;
use serde_json::json;

use super::{CharacterCategorySchema, CharacterDescription, DistillationConfig, FgPrompt, LayeredPrompts, SceneDescription, StoryError};
use crate::backend::{ask, AgentRole, Journal, TextModelBackend};
use crate::digest::json_digest;
use crate::events::Event;

/// Joins the background prompt and the foreground prompts (in character
/// order) with `separator`.
pub fn compose_global_prompt(layered: &LayeredPrompts, separator: &str) -> String {
    let mut out = layered.bg_prompt.clone();
    for fg in &layered.fg_prompts {
        out.push_str(separator);
        out.push_str(&fg.prompt);
    }
    out
}

/// The appearance clause every foreground prompt of `character` starts with.
///
/// Uses the `appearance` attribute when present, otherwise a phrase built
/// from name, gender and attire. It depends only on the character record, so
/// it is identical in every scene of a run.
pub fn appearance_clause(character: &CharacterDescription) -> String {
    if let Some(a) = character.attribute(CharacterCategorySchema::APPEARANCE) {
        return a.to_string();
    }
    let gender = character.attribute(CharacterCategorySchema::GENDER).unwrap_or("person");
    let attire = character.attribute(CharacterCategorySchema::ATTIRE).unwrap_or("simple clothing");
    format!("{}, {gender}, wearing {attire}", character.name)
}

#[derive(Debug, Deserialize)]
struct FgReply {
    character: String,
    action: String,
}

#[derive(Debug, Deserialize)]
struct PromptReply {
    bg_prompt: String,
    #[serde(default)]
    fg: Vec<FgReply>,
}

fn resolve<'a>(scene: &SceneDescription, chars: &'a [&'a CharacterDescription], name: &str) -> Option<&'a CharacterDescription> {
    chars.iter().copied().find(|c| c.answers_to(name) && scene.character_refs.contains(&c.character_id))
}

/// One [`LayeredPrompts`] per scene from the prompt generation agent.
///
/// The agent writes the background prompt and a pose/action phrase per
/// character; each foreground prompt is the character's appearance clause
/// followed by that phrase.
pub fn generate_layered_prompts(
    scenes: &[SceneDescription],
    characters: &[CharacterDescription],
    config: &DistillationConfig,
    backend: &mut dyn TextModelBackend,
    journal: &mut Journal,
) -> Result<Vec<LayeredPrompts>, StoryError> {
    for s in scenes {
        for r in &s.character_refs {
            if !characters.iter().any(|c| &c.character_id == r) {
                return Err(StoryError::MissingCharacter { scene_index: s.scene_index, character: r.clone() });
            }
        }
    }
    let mut out = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let cast: Vec<&CharacterDescription> = scene
            .character_refs
            .iter()
            .map(|r| characters.iter().find(|c| &c.character_id == r).expect("checked above"))
            .collect();
        let payload = json!({
            "scene_index": scene.scene_index,
            "act": scene.act,
            "summary": scene.summary,
            "characters": cast.iter().map(|c| json!({
                "id": c.character_id,
                "name": c.name,
                "appearance": appearance_clause(c),
            })).collect::<Vec<_>>(),
        });
        let reply: PromptReply = ask(
            backend,
            journal,
            &config.instructions,
            AgentRole::PromptGeneration,
            &payload,
            config.max_retries,
            |r: &PromptReply| {
                if r.bg_prompt.trim().is_empty() {
                    return Err("bg_prompt is empty".into());
                }
                let mut seen: Vec<&str> = Vec::new();
                for fg in &r.fg {
                    let c = resolve(scene, &cast, &fg.character)
                        .ok_or_else(|| format!("`{}` is not a character of this scene", fg.character))?;
                    if seen.contains(&c.character_id.as_str()) {
                        return Err(format!("`{}` appears twice", fg.character));
                    }
                    if fg.action.trim().is_empty() {
                        return Err(format!("action for `{}` is empty", fg.character));
                    }
                    seen.push(&c.character_id);
                }
                if seen.len() != cast.len() {
                    return Err(format!("expected foreground entries for {} character(s), got {}", cast.len(), seen.len()));
                }
                Ok(())
            },
        )?;
        let fg_prompts = cast
            .iter()
            .map(|c| {
                let action = reply
                    .fg
                    .iter()
                    .find(|f| resolve(scene, &cast, &f.character).map(|x| x.character_id == c.character_id) == Some(true))
                    .map(|f| f.action.trim())
                    .expect("checked");
                FgPrompt { character_id: c.character_id.clone(), prompt: format!("{}, {action}", appearance_clause(c)) }
            })
            .collect();
        out.push(LayeredPrompts::new(scene.scene_index, reply.bg_prompt.trim(), fg_prompts, &config.separator));
    }
    journal.push(Event::PromptsGenerated { count: out.len(), digest: json_digest(&out) });
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ScriptedTextBackend;
    use crate::story::{Act, SourceSpan};
    use alloc::collections::BTreeMap;
    use alloc::vec;

    #[test]
    fn two_part_concatenation() {
        let lp = LayeredPrompts::new(0, "b", vec![FgPrompt { character_id: "c1".into(), prompt: "f".into() }], ", ");
        assert_eq!(lp.global_prompt, "b, f");
        assert_eq!(compose_global_prompt(&lp, ", "), compose_global_prompt(&lp, ", "));
    }

    #[test]
    fn empty_foreground_is_identity() {
        let lp = LayeredPrompts::new(0, "a quiet meadow", vec![], ", ");
        assert_eq!(lp.global_prompt, "a quiet meadow");
    }

    #[test]
    fn character_order_is_preserved() {
        // Scene #4 of the beanstalk example: BG, FG-C1, FG-C3.
        let lp = LayeredPrompts::new(
            3,
            "An antique interior of mysterious medieval cottage",
            vec![
                FgPrompt { character_id: "jack".into(), prompt: "A small boy, standing".into() },
                FgPrompt { character_id: "giant".into(), prompt: "A giant, sitting".into() },
            ],
            ", ",
        );
        assert_eq!(
            lp.global_prompt,
            "An antique interior of mysterious medieval cottage, A small boy, standing, A giant, sitting"
        );
        let jack = lp.global_prompt.find("A small boy").unwrap();
        let giant = lp.global_prompt.find("A giant").unwrap();
        assert!(jack < giant);
    }

    fn boy() -> CharacterDescription {
        let mut attributes = BTreeMap::new();
        attributes.insert("attire".into(), "worn-out blue medieval clothing".into());
        attributes.insert("gender".into(), "male".into());
        attributes.insert("age".into(), "child".into());
        attributes.insert("appearance".into(), "A small boy with worn-out blue medieval clothing".into());
        CharacterDescription { character_id: "jack".into(), name: "Jack".into(), aliases: vec![], attributes, attire_inferred: false }
    }

    fn scene(refs: Vec<String>) -> SceneDescription {
        SceneDescription {
            scene_index: 0,
            act: Act::Setup,
            summary: "s".into(),
            source_span: SourceSpan { start: 0, end: 1 },
            character_refs: refs,
        }
    }

    #[test]
    fn clause_falls_back_to_attributes() {
        let mut c = boy();
        c.attributes.remove("appearance");
        assert_eq!(appearance_clause(&c), "Jack, male, wearing worn-out blue medieval clothing");
    }

    #[test]
    fn bg_only_scene() {
        let mut b = ScriptedTextBackend::new("s");
        b.push(AgentRole::PromptGeneration, json!({"bg_prompt": "a foggy harbor, highres", "fg": []}));
        let mut j = Journal::new();
        let out = generate_layered_prompts(&[scene(vec![])], &[], &DistillationConfig::new(1), &mut b, &mut j).unwrap();
        assert!(out[0].fg_prompts.is_empty());
        assert_eq!(out[0].bg_prompt, "a foggy harbor, highres");
    }

    #[test]
    fn fg_prompt_embeds_appearance() {
        let mut b = ScriptedTextBackend::new("s");
        b.push(
            AgentRole::PromptGeneration,
            json!({"bg_prompt": "A towering beanstalk", "fg": [{"character": "Jack", "action": "climbing, holding onto the gigantic beanstalk"}]}),
        );
        let mut j = Journal::new();
        let out = generate_layered_prompts(&[scene(vec!["jack".into()])], &[boy()], &DistillationConfig::new(1), &mut b, &mut j)
            .unwrap();
        assert_eq!(
            out[0].fg("jack").unwrap(),
            "A small boy with worn-out blue medieval clothing, climbing, holding onto the gigantic beanstalk"
        );
    }

    #[test]
    fn unregistered_reference_fails_before_any_call() {
        let mut b = ScriptedTextBackend::new("s");
        let mut j = Journal::new();
        let err = generate_layered_prompts(&[scene(vec!["ghost".into()])], &[boy()], &DistillationConfig::new(1), &mut b, &mut j)
            .unwrap_err();
        assert!(matches!(err, StoryError::MissingCharacter { .. }));
        assert!(j.calls.is_empty());
    }

    #[test]
    fn missing_foreground_entry_is_reasked() {
        let mut b = ScriptedTextBackend::new("s");
        b.push(AgentRole::PromptGeneration, json!({"bg_prompt": "x", "fg": []}));
        b.push(AgentRole::PromptGeneration, json!({"bg_prompt": "x", "fg": [{"character": "jack", "action": "waving"}]}));
        let mut j = Journal::new();
        let out = generate_layered_prompts(&[scene(vec!["jack".into()])], &[boy()], &DistillationConfig::new(1), &mut b, &mut j)
            .unwrap();
        assert_eq!(out[0].fg_prompts.len(), 1);
        assert_eq!(j.calls.len(), 2);
    }
}
