use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::layout::{validate_bbox, BBox, Layout};
use super::{ElementImage, ElementKind, ImageError, ImageModuleConfig};
use crate::backend::{AgentRole, Journal, LayoutProposal, LayoutRequest, MultimodalBackend};
use crate::digest::json_digest;
use crate::events::Event;
use crate::story::LayeredPrompts;

/// Checks one proposal set against the scene's characters. Returns layouts in
/// prompt order, or every violation found.
fn check_proposals(
    prompts: &LayeredPrompts,
    proposals: &[LayoutProposal],
    min_area: f64,
) -> Result<Vec<Layout>, Vec<String>> {
    let mut problems = Vec::new();
    let ids: Vec<&str> = prompts.character_ids().collect();
    for p in proposals {
        if !ids.contains(&p.character_id.as_str()) {
            problems.push(format!("`{}` is not a character of this scene", p.character_id));
        }
    }
    let mut chosen = Vec::with_capacity(ids.len());
    for id in &ids {
        let mine: Vec<_> = proposals.iter().filter(|p| p.character_id == *id).collect();
        match mine.as_slice() {
            [] => problems.push(format!("no box for `{id}`")),
            [p] => {
                if let Err(v) = validate_bbox(&BBox::from_array(p.bbox), min_area) {
                    problems.extend(v.iter().map(|x| format!("`{id}`: {x}")));
                }
                chosen.push(*p);
            }
            _ => problems.push(format!("{} boxes for `{id}`", mine.len())),
        }
    }
    let explicit: Vec<i32> = chosen.iter().filter_map(|p| p.z_order).collect();
    if !explicit.is_empty() {
        if explicit.len() != chosen.len() {
            problems.push("z_order must be given for every character or for none".into());
        } else if explicit.iter().collect::<BTreeSet<_>>().len() != explicit.len() {
            problems.push("z_order values must be unique".into());
        }
    }
    if !problems.is_empty() {
        return Err(problems);
    }
    Ok(chosen
        .iter()
        .enumerate()
        .map(|(i, p)| Layout {
            scene_index: prompts.scene_index,
            character_id: p.character_id.clone(),
            bbox: BBox::from_array(p.bbox),
            // Without explicit ordering later characters are drawn on top.
            z_order: p.z_order.unwrap_or(i as i32),
        })
        .collect())
}

/// Asks the scene locator for one box per character.
///
/// Invalid proposals are re-asked up to `max_retries` times with the
/// violations attached; after that the scene fails with
/// [`ImageError::LayoutInvalid`].
pub fn locate_subjects(
    prompts: &LayeredPrompts,
    elements: &[ElementImage],
    backend: &mut dyn MultimodalBackend,
    config: &ImageModuleConfig,
    journal: &mut Journal,
) -> Result<Vec<Layout>, ImageError> {
    let scene_index = prompts.scene_index;
    let instruction =
        config.instructions.get(AgentRole::SceneLocator).ok_or(ImageError::MissingInstruction(AgentRole::SceneLocator))?;
    let background = elements
        .iter()
        .find(|e| e.kind == ElementKind::Background)
        .ok_or_else(|| ImageError::MissingElement { scene_index, element: "bg".into() })?;
    let mut foregrounds = Vec::new();
    for id in prompts.character_ids() {
        let e = elements
            .iter()
            .find(|e| e.character_id.as_deref() == Some(id))
            .ok_or_else(|| ImageError::MissingElement { scene_index, element: format!("fg_{id}") })?;
        foregrounds.push(e.clone());
    }
    let input_digest = json_digest(&(
        &prompts.global_prompt,
        background.pixels.digest_hex(),
        foregrounds.iter().map(|f| f.pixels.digest_hex()).collect::<Vec<_>>(),
    ));
    let name = backend.descriptor().name;
    let mut feedback: Vec<String> = Vec::new();
    for attempt in 0..=config.max_retries {
        let request = LayoutRequest { instruction, prompts, background, foregrounds: &foregrounds, feedback: &feedback };
        let started = journal.now();
        let result = backend.propose_layout(&request);
        let out = match &result {
            Ok(p) => json_digest(p),
            Err(e) => json_digest(&e.message),
        };
        journal.record(&name, AgentRole::SceneLocator.as_str(), input_digest.clone(), out, started, attempt);
        let proposals = result?;
        match check_proposals(prompts, &proposals, config.min_layout_area) {
            Ok(layouts) => {
                journal.push(Event::SubjectsLocated { scene_index, count: layouts.len(), digest: json_digest(&layouts) });
                return Ok(layouts);
            }
            Err(v) => feedback = v,
        }
    }
    Err(ImageError::LayoutInvalid { scene_index, attempts: config.max_retries + 1, violations: feedback })
}

/// Layouts sorted bottom to top.
pub fn by_z_order(layouts: &[Layout]) -> Vec<&Layout> {
    let mut v: Vec<&Layout> = layouts.iter().collect();
    v.sort_by_key(|l| l.z_order);
    v
}

pub(crate) fn character_set(layouts: &[Layout]) -> BTreeSet<String> {
    layouts.iter().map(|l| l.character_id.to_string()).collect()
}
