use super::{
    apply_feedback, extract_characters, extract_scenes, generate_layered_prompts, link_characters, reflect,
    regenerate_character, regenerate_scene, validate_characters, DistillationConfig, FeedbackChannel, Story,
    StoryDistillation, StoryError, TargetKind,
};
use crate::backend::{EmbeddingBackend, Journal, TextModelBackend};
use crate::events::{Event, Gate};

pub struct StoryBackends<'a> {
    pub text: &'a mut dyn TextModelBackend,
    pub embedder: &'a mut dyn EmbeddingBackend,
}

/// Runs the whole story module: scene and character extraction, the
/// description feedback gate, prompt generation and reflection.
///
/// The gate loops until a review round asks for no regeneration; each
/// regenerated target costs exactly one fresh backend request.
pub fn run_story_module(
    story: &Story,
    config: &DistillationConfig,
    backends: StoryBackends<'_>,
    feedback: &mut dyn FeedbackChannel,
    journal: &mut Journal,
) -> Result<StoryDistillation, StoryError> {
    config.validate()?;
    let StoryBackends { text, embedder } = backends;

    let raw_scenes = extract_scenes(story, config, text, journal)?;
    let mut characters = extract_characters(story, config, text, journal)?;
    validate_characters(&characters, &config.schema)?;
    let mut scenes = link_characters(&raw_scenes, &characters)?;

    loop {
        journal.push(Event::GateOpened { gate: Gate::Descriptions, scene_index: None });
        let edits = feedback.review(&scenes, &characters)?;
        let outcome = apply_feedback(&scenes, &characters, &config.schema, &edits)?;
        journal.push(Event::FeedbackApplied {
            approved: outcome.approved,
            modified: outcome.modified,
            regenerate: outcome.regenerate.len(),
        });
        let done = outcome.regenerate.is_empty();
        scenes = outcome.scenes;
        characters = outcome.characters;
        // Characters first so regenerated scenes link against fresh records.
        for (_, id) in outcome.regenerate.iter().filter(|(k, _)| *k == TargetKind::Character) {
            let c = regenerate_character(story, config, &characters, id, text, journal)?;
            let slot = characters.iter_mut().find(|x| &x.character_id == id).expect("resolved by feedback");
            *slot = c;
        }
        for (_, id) in outcome.regenerate.iter().filter(|(k, _)| *k == TargetKind::Scene) {
            let index: usize = id.parse().expect("resolved by feedback");
            let s = regenerate_scene(story, config, &scenes, &characters, index, text, journal)?;
            scenes[index] = s;
        }
        if done {
            journal.push(Event::GateClosed { gate: Gate::Descriptions, scene_index: None });
            break;
        }
    }

    let prompts = generate_layered_prompts(&scenes, &characters, config, text, journal)?;
    let report = reflect(&prompts, &scenes, story, config, text, embedder, journal)?;
    let distillation = StoryDistillation { story: story.clone(), scenes, characters, prompts, report };
    distillation.validate(&config.separator)?;
    Ok(distillation)
}
