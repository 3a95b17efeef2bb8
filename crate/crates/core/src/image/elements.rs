use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;
use serde_json::json;

use super::{ElementFailure, ElementImage, ElementKey, ImageError, ImageModuleConfig, ReferenceRecord, SubjectStorage};
use crate::backend::{BackendError, GenerationRequest, ImageGeneratorBackend, Journal};
use crate::digest::{derive_seed, json_digest};
use crate::events::Event;
use crate::story::LayeredPrompts;

pub const GENERATION_ROLE: &str = "element_generation";
pub const REFERENCE_ROLE: &str = "reference_encoding";

/// Seed for one element generation attempt.
pub fn element_seed(base: u64, scene_index: usize, key: &ElementKey, attempt: u32) -> u64 {
    let scene = (scene_index as u64).to_le_bytes();
    let key = key.to_string();
    derive_seed(base, &[b"element", &scene, key.as_bytes(), &attempt.to_le_bytes()])
}

fn generate_one(
    prompts: &LayeredPrompts,
    key: &ElementKey,
    attempt: u32,
    storage: &mut SubjectStorage,
    generator: &mut dyn ImageGeneratorBackend,
    config: &ImageModuleConfig,
    journal: &mut Journal,
) -> Result<ElementImage, BackendError> {
    let scene_index = prompts.scene_index;
    let (prompt, character_id, width, height) = match key {
        ElementKey::Background => (prompts.bg_prompt.as_str(), None, config.canvas_width, config.canvas_height),
        ElementKey::Foreground(id) => {
            let fg = prompts.fg(id).expect("caller checked the key");
            (fg, Some(id.clone()), config.fg_width, config.fg_height)
        }
    };
    let reference = character_id.as_deref().and_then(|id| storage.reference_for(id, scene_index));
    let seed = element_seed(config.base_seed, scene_index, key, attempt);
    let request = GenerationRequest { prompt, kind: key.kind(), width, height, reference, seed };
    let input_digest = json_digest(&json!({
        "scene_index": scene_index,
        "element": key.to_string(),
        "prompt": prompt,
        "seed": seed,
        "width": width,
        "height": height,
        "reference": reference.map(|r| r.digest.clone()),
    }));
    let reference_scene = reference.map(|r| r.scene_index);
    let name = generator.descriptor().name;
    let started = journal.now();
    let result = generator.generate(&request);
    let output_digest = match &result {
        Ok(r) => r.digest_hex(),
        Err(e) => json_digest(&e.message),
    };
    journal.record(&name, GENERATION_ROLE, input_digest, output_digest.clone(), started, attempt);
    let pixels = result?;
    if pixels.width != width || pixels.height != height {
        return Err(BackendError::new(
            name,
            format!("returned {}x{} for a {width}x{height} request", pixels.width, pixels.height),
        ));
    }
    journal.push(Event::ElementGenerated {
        scene_index,
        element: key.to_string(),
        seed,
        reference_scene,
        digest: output_digest.clone(),
    });

    if let Some(id) = &character_id {
        let started = journal.now();
        let tokens = generator.encode_reference(&pixels);
        let out = match &tokens {
            Ok(t) => json_digest(t),
            Err(e) => json_digest(&e.message),
        };
        journal.record(&name, REFERENCE_ROLE, output_digest.clone(), out, started, 0);
        storage.push(ReferenceRecord {
            character_id: id.clone(),
            scene_index,
            image: pixels.clone(),
            digest: output_digest,
            tokens: tokens?,
        });
    }

    Ok(ElementImage {
        scene_index,
        kind: key.kind(),
        character_id,
        prompt: prompt.to_string(),
        pixels,
        generation_seed: seed,
        reference_scene,
    })
}

/// Keys for every element of a scene: background first, then characters in
/// prompt order.
pub fn scene_keys(prompts: &LayeredPrompts) -> Vec<ElementKey> {
    core::iter::once(ElementKey::Background)
        .chain(prompts.fg_prompts.iter().map(|f| ElementKey::Foreground(f.character_id.clone())))
        .collect()
}

/// Generates the background and every foreground image of one scene.
///
/// Foreground requests carry the character's most recent image from an
/// earlier scene, if any. Each foreground image is appended to `storage`.
/// Failed elements are reported together and successful ones are kept in
/// [`ImageError::Generation`].
pub fn generate_scene_elements(
    prompts: &LayeredPrompts,
    storage: &mut SubjectStorage,
    generator: &mut dyn ImageGeneratorBackend,
    config: &ImageModuleConfig,
    journal: &mut Journal,
) -> Result<Vec<ElementImage>, ImageError> {
    let mut partial = Vec::new();
    let mut failures = Vec::new();
    for key in scene_keys(prompts) {
        match generate_one(prompts, &key, 0, storage, generator, config, journal) {
            Ok(e) => partial.push(e),
            Err(error) => failures.push(ElementFailure { element: key.to_string(), error }),
        }
    }
    if !failures.is_empty() {
        return Err(ImageError::Generation { scene_index: prompts.scene_index, failures, partial });
    }
    let digests: Vec<_> = partial.iter().map(|e| e.pixels.digest_hex()).collect();
    journal.push(Event::ElementsGenerated {
        scene_index: prompts.scene_index,
        count: partial.len(),
        digest: json_digest(&digests),
    });
    Ok(partial)
}

/// Replaces one element with a fresh generation under a new seed.
pub fn regenerate_element(
    prompts: &LayeredPrompts,
    key: &ElementKey,
    attempt: u32,
    storage: &mut SubjectStorage,
    generator: &mut dyn ImageGeneratorBackend,
    config: &ImageModuleConfig,
    journal: &mut Journal,
) -> Result<ElementImage, ImageError> {
    if let ElementKey::Foreground(id) = key {
        if prompts.fg(id).is_none() {
            return Err(ImageError::UnknownElement(key.to_string()));
        }
    }
    let e = generate_one(prompts, key, attempt, storage, generator, config, journal)?;
    journal.push(Event::Regenerated { target: format!("element:{}:{key}", prompts.scene_index) });
    Ok(e)
}
