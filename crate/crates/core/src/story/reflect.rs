use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use serde::Deserialize;
use serde_json::json;

use super::{DistillationConfig, LayeredPrompts, ReflectionEntry, ReflectionReport, SceneDescription, Story, StoryError};
use crate::backend::{ask, embed_logged, AgentRole, EmbedInput, EmbeddingBackend, Journal, TextModelBackend};
use crate::eval::cosine;
use crate::events::Event;

#[derive(Debug, Deserialize)]
struct Note {
    text: String,
    #[serde(default)]
    blocking: bool,
}

#[derive(Debug, Deserialize)]
struct ReflectionReply {
    #[serde(default)]
    notes: Vec<Note>,
}

/// Reviews each scene's prompts against its summary and story passage.
///
/// The score is the larger cosine similarity between the global prompt and
/// either the scene summary or the source passage, clamped to [0, 1]. The
/// reviewer agent's blocking notes become deviation notes. An entry passes
/// when the score reaches the threshold and nothing blocks. Prompts are never
/// modified.
pub fn reflect(
    prompts: &[LayeredPrompts],
    scenes: &[SceneDescription],
    story: &Story,
    config: &DistillationConfig,
    text: &mut dyn TextModelBackend,
    embedder: &mut dyn EmbeddingBackend,
    journal: &mut Journal,
) -> Result<ReflectionReport, StoryError> {
    if prompts.len() != scenes.len() || prompts.iter().zip(scenes).any(|(p, s)| p.scene_index != s.scene_index) {
        return Err(StoryError::Misaligned);
    }
    let threshold = config.reflection_threshold;
    let mut entries = Vec::with_capacity(scenes.len());
    for (p, s) in prompts.iter().zip(scenes) {
        let segment = story.segment(s.source_span);
        let role = AgentRole::Reflection.as_str();
        let pv = embed_logged(embedder, journal, role, EmbedInput::Text(&p.global_prompt))?;
        let sv = embed_logged(embedder, journal, role, EmbedInput::Text(&s.summary))?;
        let gv = embed_logged(embedder, journal, role, EmbedInput::Text(&segment))?;
        let score = cosine(&pv, &sv).max(cosine(&pv, &gv)).clamp(0.0, 1.0);

        let payload = json!({
            "scene_index": s.scene_index,
            "summary": s.summary,
            "segment": segment,
            "prompt": p.global_prompt,
        });
        let reply: ReflectionReply =
            ask(text, journal, &config.instructions, AgentRole::Reflection, &payload, config.max_retries, |_| Ok(()))?;
        let (blocking, remarks): (Vec<Note>, Vec<Note>) = reply.notes.into_iter().partition(|n| n.blocking);
        let mut deviation_notes: Vec<String> = blocking.into_iter().map(|n| n.text).collect();
        let passed = score >= threshold && deviation_notes.is_empty();
        if !passed && deviation_notes.is_empty() {
            deviation_notes.push(format!("similarity {score:.3} is below the threshold {threshold:.3}"));
        }
        entries.push(ReflectionEntry {
            scene_index: s.scene_index,
            similarity_score: score,
            deviation_notes,
            remarks: remarks.into_iter().map(|n| n.text).collect(),
            passed,
        });
    }
    let passed = entries.iter().filter(|e| e.passed).count();
    journal.push(Event::Reflected { passed, failed: entries.len() - passed });
    Ok(ReflectionReport { threshold, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{HashEmbedder, ScriptedTextBackend};
    use crate::story::{Act, SourceSpan};
    use alloc::string::ToString;
    use alloc::vec;

    fn setup(summary: &str, prompt: &str) -> (Story, SceneDescription, LayeredPrompts) {
        let story = Story::new("The miller's daughter spun straw into gold all night long.").unwrap();
        let scene = SceneDescription {
            scene_index: 0,
            act: Act::Setup,
            summary: summary.into(),
            source_span: SourceSpan { start: 0, end: story.char_len() },
            character_refs: vec![],
        };
        (story, scene, LayeredPrompts::new(0, prompt, vec![], ", "))
    }

    #[test]
    fn verbatim_copy_scores_one_and_passes() {
        let (story, scene, lp) = setup("a girl spins straw into gold", "a girl spins straw into gold");
        let mut text = ScriptedTextBackend::new("s");
        text.push(AgentRole::Reflection, json!({"notes": []}));
        let mut j = Journal::new();
        let r = reflect(&[lp.clone()], &[scene], &story, &DistillationConfig::new(1), &mut text, &mut HashEmbedder::default(), &mut j)
            .unwrap();
        assert!((r.entries[0].similarity_score - 1.0).abs() < 1e-12);
        assert!(r.entries[0].passed);
        assert!(r.entries[0].deviation_notes.is_empty());
        assert_eq!(lp.global_prompt, "a girl spins straw into gold");
    }

    #[test]
    fn unmatched_content_is_flagged() {
        let (story, scene, lp) = setup("a girl spins straw into gold", "a dragon attacks a space station");
        let mut text = ScriptedTextBackend::new("s");
        text.push(AgentRole::Reflection, json!({"notes": [{"text": "the story has no dragon", "blocking": true}]}));
        let mut j = Journal::new();
        let r = reflect(&[lp], &[scene], &story, &DistillationConfig::new(1), &mut text, &mut HashEmbedder::default(), &mut j)
            .unwrap();
        assert!(!r.entries[0].passed);
        assert_eq!(r.entries[0].deviation_notes, vec!["the story has no dragon".to_string()]);
    }

    #[test]
    fn low_score_without_notes_gets_a_note() {
        let (story, scene, lp) = setup("a girl spins straw into gold", "volcano eruption at dusk");
        let mut text = ScriptedTextBackend::new("s");
        text.push(AgentRole::Reflection, json!({"notes": [{"text": "style differs", "blocking": false}]}));
        let mut j = Journal::new();
        let r = reflect(&[lp], &[scene], &story, &DistillationConfig::new(1), &mut text, &mut HashEmbedder::default(), &mut j)
            .unwrap();
        assert!(!r.entries[0].passed);
        assert_eq!(r.entries[0].deviation_notes.len(), 1);
        assert_eq!(r.entries[0].remarks, vec!["style differs".to_string()]);
    }

    #[test]
    fn misaligned_inputs() {
        let (story, scene, _) = setup("x", "x");
        let mut text = ScriptedTextBackend::new("s");
        let mut j = Journal::new();
        let r = reflect(&[], &[scene], &story, &DistillationConfig::new(1), &mut text, &mut HashEmbedder::default(), &mut j);
        assert_eq!(r.unwrap_err(), StoryError::Misaligned);
    }
}
