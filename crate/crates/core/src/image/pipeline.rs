use alloc::collections::{BTreeMap, VecDeque};
use alloc::string::ToString;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::elements::{generate_scene_elements, regenerate_element};
use super::layout::Layout;
use super::locate::locate_subjects;
use super::render::{render_scene, RenderInputs, RenderedScene, SceneRenderer};
use super::stitch::{stitch, StitchedImage};
use super::{ElementImage, ElementKey, ElementKind, ImageError, ImageModuleConfig, SubjectStorage};
use crate::backend::{ImageGeneratorBackend, Journal, MultimodalBackend, SegmentationBackend};
use crate::events::{Event, Gate};
use crate::story::{AutoApprove, LayeredPrompts};

pub struct ImageBackends<'a> {
    pub generator: &'a mut dyn ImageGeneratorBackend,
    pub locator: &'a mut dyn MultimodalBackend,
    pub segmenter: &'a mut dyn SegmentationBackend,
    pub renderer: &'a mut dyn SceneRenderer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementDecision {
    Approve,
    Regenerate,
}

/// Human review of a scene's generated elements. An empty reply approves
/// everything.
pub trait ElementApproval {
    fn review(&mut self, scene_index: usize, elements: &[ElementImage]) -> Result<Vec<(ElementKey, ElementDecision)>, ImageError>;
}

impl ElementApproval for AutoApprove {
    fn review(&mut self, _: usize, _: &[ElementImage]) -> Result<Vec<(ElementKey, ElementDecision)>, ImageError> {
        Ok(Vec::new())
    }
}

/// Replays queued review rounds, then approves (or times out).
#[derive(Debug, Clone, Default)]
pub struct ScriptedApproval {
    rounds: VecDeque<Vec<(ElementKey, ElementDecision)>>,
    pub timeout_when_empty: bool,
    pub reviews: usize,
}

impl ScriptedApproval {
    pub fn new(rounds: Vec<Vec<(ElementKey, ElementDecision)>>) -> Self {
        Self { rounds: rounds.into(), timeout_when_empty: false, reviews: 0 }
    }
}

impl ElementApproval for ScriptedApproval {
    fn review(&mut self, _: usize, _: &[ElementImage]) -> Result<Vec<(ElementKey, ElementDecision)>, ImageError> {
        self.reviews += 1;
        match self.rounds.pop_front() {
            Some(r) => Ok(r),
            None if self.timeout_when_empty => Err(ImageError::FeedbackTimeout),
            None => Ok(Vec::new()),
        }
    }
}

/// All intermediate results of one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneAssembly {
    pub scene_index: usize,
    pub elements: Vec<ElementImage>,
    pub layouts: Vec<Layout>,
    pub stitched: StitchedImage,
    pub rendered: RenderedScene,
}

/// Applies one review round. Returns true when something was regenerated.
pub fn apply_element_verdicts(
    prompts: &LayeredPrompts,
    elements: &mut [ElementImage],
    verdicts: &[(ElementKey, ElementDecision)],
    attempts: &mut BTreeMap<ElementKey, u32>,
    storage: &mut SubjectStorage,
    generator: &mut dyn ImageGeneratorBackend,
    config: &ImageModuleConfig,
    journal: &mut Journal,
) -> Result<bool, ImageError> {
    for (key, _) in verdicts {
        if !elements.iter().any(|e| &e.key() == key) {
            return Err(ImageError::UnknownElement(key.to_string()));
        }
    }
    let mut any = false;
    for (key, decision) in verdicts {
        if *decision != ElementDecision::Regenerate {
            continue;
        }
        let attempt = attempts.entry(key.clone()).or_insert(0);
        *attempt += 1;
        let fresh = regenerate_element(prompts, key, *attempt, storage, generator, config, journal)?;
        let slot = elements.iter_mut().find(|e| &e.key() == key).expect("checked above");
        *slot = fresh;
        any = true;
    }
    Ok(any)
}

/// Generates, reviews, places, stitches and renders one scene.
pub fn run_image_scene(
    prompts: &LayeredPrompts,
    storage: &mut SubjectStorage,
    backends: &mut ImageBackends<'_>,
    approval: &mut dyn ElementApproval,
    config: &ImageModuleConfig,
    journal: &mut Journal,
) -> Result<SceneAssembly, ImageError> {
    let scene_index = prompts.scene_index;
    let mut elements = generate_scene_elements(prompts, storage, backends.generator, config, journal)?;
    let mut attempts = BTreeMap::new();
    loop {
        journal.push(Event::GateOpened { gate: Gate::Element, scene_index: Some(scene_index) });
        let verdicts = approval.review(scene_index, &elements)?;
        let regenerated = apply_element_verdicts(
            prompts,
            &mut elements,
            &verdicts,
            &mut attempts,
            storage,
            backends.generator,
            config,
            journal,
        )?;
        if !regenerated {
            journal.push(Event::GateClosed { gate: Gate::Element, scene_index: Some(scene_index) });
            break;
        }
    }
    let layouts = locate_subjects(prompts, &elements, backends.locator, config, journal)?;
    let (bg, fgs): (Vec<_>, Vec<_>) = elements.iter().cloned().partition(|e| e.kind == ElementKind::Background);
    let stitched = stitch(&bg[0], &fgs, &layouts, backends.segmenter, journal)?;
    let inputs = RenderInputs { stitched: &stitched, prompts, elements: &elements, layouts: &layouts };
    let rendered = render_scene(&inputs, backends.renderer, &config.renderer, journal)?;
    Ok(SceneAssembly { scene_index, elements, layouts, stitched, rendered })
}

/// Runs every scene in order, sharing one subject storage.
pub fn run_image_module(
    prompts: &[LayeredPrompts],
    storage: &mut SubjectStorage,
    mut backends: ImageBackends<'_>,
    approval: &mut dyn ElementApproval,
    config: &ImageModuleConfig,
    journal: &mut Journal,
) -> Result<Vec<SceneAssembly>, ImageError> {
    config.validate()?;
    prompts.iter().map(|p| run_image_scene(p, storage, &mut backends, approval, config, journal)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{BoxSegmenter, MockLayoutBackend, ProceduralImageGenerator};
    use crate::image::ToyRenderer;
    use crate::story::FgPrompt;
    use alloc::vec;

    fn prompts() -> Vec<LayeredPrompts> {
        let fg = |id: &str| FgPrompt { character_id: id.into(), prompt: alloc::format!("{id} in a red hat") };
        vec![
            LayeredPrompts::new(0, "a market", vec![fg("jack"), fg("cow")], ", "),
            LayeredPrompts::new(1, "a cottage", vec![fg("jack")], ", "),
        ]
    }

    fn run(approval: &mut dyn ElementApproval) -> (Result<Vec<SceneAssembly>, ImageError>, Journal, SubjectStorage) {
        let mut gen = ProceduralImageGenerator::default();
        let mut loc = MockLayoutBackend::default();
        let mut seg = BoxSegmenter::default();
        let mut ren = ToyRenderer::default();
        let backends = ImageBackends { generator: &mut gen, locator: &mut loc, segmenter: &mut seg, renderer: &mut ren };
        let mut j = Journal::new();
        let mut storage = SubjectStorage::new();
        let config = ImageModuleConfig { renderer: crate::image::RendererConfig::default().with_steps(6).unwrap(), ..Default::default() };
        let r = run_image_module(&prompts(), &mut storage, backends, approval, &config, &mut j);
        (r, j, storage)
    }

    #[test]
    fn two_scenes_end_to_end() {
        let (r, j, storage) = run(&mut AutoApprove);
        let scenes = r.unwrap();
        assert_eq!(scenes.len(), 2);
        assert_eq!(scenes[1].elements[1].reference_scene, Some(0));
        assert_eq!(storage.records("jack").len(), 2);
        assert_eq!(scenes[0].rendered.lambda_trace.len(), 6);
        assert_eq!(j.events.iter().filter(|e| matches!(e, Event::GateClosed { .. })).count(), 2);
    }

    #[test]
    fn regenerate_verdict_replaces_only_that_element() {
        let (base, ..) = run(&mut AutoApprove);
        let base = base.unwrap();
        let key = ElementKey::Foreground("cow".into());
        let mut approval = ScriptedApproval::new(vec![vec![(key.clone(), ElementDecision::Regenerate)]]);
        let (r, j, _) = run(&mut approval);
        let scenes = r.unwrap();
        assert_ne!(scenes[0].elements[2].pixels, base[0].elements[2].pixels);
        assert_eq!(scenes[0].elements[1].pixels, base[0].elements[1].pixels);
        assert_eq!(j.events.iter().filter(|e| e.is_regeneration()).count(), 1);
        assert_eq!(approval.reviews, 3);
    }

    #[test]
    fn unknown_element_and_timeout() {
        let mut a = ScriptedApproval::new(vec![vec![(ElementKey::Foreground("ghost".into()), ElementDecision::Approve)]]);
        assert!(matches!(run(&mut a).0, Err(ImageError::UnknownElement(_))));
        let mut a = ScriptedApproval { timeout_when_empty: true, ..Default::default() };
        assert_eq!(run(&mut a).0.unwrap_err(), ImageError::FeedbackTimeout);
    }
}
