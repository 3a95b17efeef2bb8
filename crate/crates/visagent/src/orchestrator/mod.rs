//! Run lifecycle: the state machine joining the story and image modules.
//!
//! A run advances one phase per [`Orchestrator::advance`] call and is saved
//! after every step, so a restarted process resumes from the last completed
//! phase. The two approval gates hold a run until [`Orchestrator::submit_approval`]
//! answers them, or immediately when the run is configured to auto-approve.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use thiserror::Error;
use visagent_core::digest::json_digest;
use visagent_core::eval::{evaluate_scenes, EvalScene, MetricReport};
use visagent_core::events::{Event, Gate};
use visagent_core::image::{
    apply_element_verdicts, generate_scene_elements, locate_subjects, render_scene, stitch, ElementImage, ElementKey,
    ElementKind, ImageError, Raster, ReferenceRecord, RenderInputs, StitchedImage, SubjectStorage,
};
use visagent_core::story::{
    apply_feedback, extract_characters, extract_scenes, generate_layered_prompts, link_characters, reflect,
    regenerate_character, regenerate_scene, validate_characters, Story, TargetKind,
};
use visagent_core::Journal;

use crate::artifacts::{self, write_atomic, ArtifactError};
use crate::config::{ConfigError, RunConfig};
use crate::registry::{self, RunBackends};

mod phase;
mod run;
mod store;

pub use phase::Phase;
pub use run::{
    ApprovalEvent, DistillationState, ElementRecord, ElementVerdict, ElementView, OpenGate, PipelineRun, RenderedRecord,
    RunError, RunSummary, RunView, SceneRecord, SceneView, SequencedEvent, StitchedRecord, SubjectRef,
};
pub use store::{valid_id, RunStore, STATE_FILE};

pub const DISTILLATION_FILE: &str = "distillation.json";
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("unknown run `{0}`")]
    UnknownRun(String),
    #[error("run `{run_id}` has no open `{gate}` gate")]
    GateClosed { run_id: String, gate: String },
    #[error("approval rejected: {0}")]
    Rejected(String),
    #[error("run `{0}` is not ready: {1}")]
    NotReady(String, String),
    #[error("run store is corrupt: {0}")]
    StoreCorrupt(String),
    #[error("storage failure: {0}")]
    Io(String),
}

impl From<ArtifactError> for OrchestratorError {
    fn from(e: ArtifactError) -> Self {
        match e {
            ArtifactError::Io { .. } => OrchestratorError::Io(e.to_string()),
            _ => OrchestratorError::StoreCorrupt(e.to_string()),
        }
    }
}

/// Why a step stopped.
enum StepError {
    /// A module or backend failed: the run moves to `failed`.
    Module(String),
    /// The request itself is invalid: the run is left untouched.
    Reject(String),
    Fatal(OrchestratorError),
}

impl From<OrchestratorError> for StepError {
    fn from(e: OrchestratorError) -> Self {
        StepError::Fatal(e)
    }
}

impl From<ArtifactError> for StepError {
    fn from(e: ArtifactError) -> Self {
        StepError::Fatal(e.into())
    }
}

fn module<E: std::fmt::Display>(e: E) -> StepError {
    StepError::Module(e.to_string())
}

pub type Clock = fn() -> u64;
pub type BackendFactory = Arc<dyn Fn(&RunConfig) -> Result<RunBackends, ConfigError> + Send + Sync>;
type IdSource = Box<dyn FnMut() -> String + Send>;

/// Microseconds since the Unix epoch.
pub fn system_clock() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_micros() as u64).unwrap_or(0)
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

type Slot = Arc<Mutex<Option<RunBackends>>>;

/// Drives runs stored in a [`RunStore`].
///
/// Each run has its own lock, so a run has one writer at a time while
/// different runs advance concurrently. Reads go straight to the store.
/// Backends are built on first use per run and rebuilt after a restart.
pub struct Orchestrator {
    store: RunStore,
    factory: BackendFactory,
    slots: Mutex<HashMap<String, Slot>>,
    clock: Clock,
    ids: Mutex<IdSource>,
}

impl Orchestrator {
    pub fn new(store: RunStore) -> Self {
        Self {
            store,
            factory: Arc::new(|c: &RunConfig| registry::build(&c.backends)),
            slots: Mutex::new(HashMap::new()),
            clock: system_clock,
            ids: Mutex::new(Box::new(|| uuid::Uuid::new_v4().to_string())),
        }
    }

    pub fn with_clock(mut self, clock: Clock) -> Self {
        self.clock = clock;
        self
    }

    pub fn with_ids(mut self, ids: impl FnMut() -> String + Send + 'static) -> Self {
        self.ids = Mutex::new(Box::new(ids));
        self
    }

    pub fn with_factory(mut self, factory: BackendFactory) -> Self {
        self.factory = factory;
        self
    }

    pub fn store(&self) -> &RunStore {
        &self.store
    }

    fn slot(&self, run_id: &str) -> Slot {
        lock(&self.slots).entry(run_id.to_string()).or_default().clone()
    }

    /// Validates the configuration, builds the backends and stores a new run
    /// in `distilling`. Nothing runs until the run is advanced.
    pub fn create_run(&self, story: Story, config: RunConfig) -> Result<PipelineRun, OrchestratorError> {
        if story.text.trim().is_empty() {
            return Err(ConfigError::new("story text is empty").into());
        }
        config.validate()?;
        let backends = (self.factory)(&config)?;
        let run_id = (lock(&self.ids))();
        if !valid_id(&run_id) || self.store.exists(&run_id) {
            return Err(OrchestratorError::Io(format!("id source produced unusable run id `{run_id}`")));
        }
        let now = (self.clock)();
        let run = PipelineRun {
            run_id: run_id.clone(),
            phase: Phase::Distilling,
            story,
            config,
            distillation: DistillationState::default(),
            scenes: Vec::new(),
            subjects: Vec::new(),
            current_scene: 0,
            open_gate: None,
            journal: Journal::with_clock(self.clock),
            error: None,
            metrics: None,
            created_at: now,
            updated_at: now,
        };
        self.store.save(&run)?;
        *lock(&self.slot(&run_id)) = Some(backends);
        Ok(run)
    }

    pub fn load(&self, run_id: &str) -> Result<PipelineRun, OrchestratorError> {
        let mut run = self.store.load(run_id)?;
        run.journal.set_clock(self.clock);
        Ok(run)
    }

    pub fn get_state(&self, run_id: &str) -> Result<RunView, OrchestratorError> {
        Ok(RunView::of(&self.load(run_id)?))
    }

    pub fn list(&self) -> Result<Vec<RunSummary>, OrchestratorError> {
        self.store.list()?.iter().map(|id| Ok(RunSummary::of(&self.load(id)?))).collect()
    }

    pub fn events(&self, run_id: &str, after: u64) -> Result<Vec<SequencedEvent>, OrchestratorError> {
        Ok(self.load(run_id)?.events_after(after))
    }

    fn backends<'a>(&self, slot: &'a mut Option<RunBackends>, config: &RunConfig) -> Result<&'a mut RunBackends, OrchestratorError> {
        if slot.is_none() {
            *slot = Some((self.factory)(config)?);
        }
        Ok(slot.as_mut().expect("filled above"))
    }

    fn gate_expired(&self, run: &PipelineRun) -> bool {
        match (&run.open_gate, run.config.gate_timeout_secs) {
            (Some(g), Some(secs)) => (self.clock)().saturating_sub(g.opened_at) > secs.saturating_mul(1_000_000),
            _ => false,
        }
    }

    /// Moves a run to `failed`, recording the error.
    fn fail(&self, run: &mut PipelineRun, message: String) {
        let phase = run.phase;
        run.journal.push(Event::Failed { phase: phase.to_string(), error: message.clone() });
        run.error = Some(RunError { phase, message });
        run.open_gate = None;
        enter(run, Phase::Failed);
    }

    fn commit(&self, mut run: PipelineRun) -> Result<PipelineRun, OrchestratorError> {
        run.updated_at = (self.clock)();
        self.store.save(&run)?;
        Ok(run)
    }

    fn fail_expired(&self, mut run: PipelineRun) -> Result<PipelineRun, OrchestratorError> {
        let gate = run.open_gate.as_ref().map(|g| g.gate);
        self.fail(&mut run, format!("no approval arrived for the {gate:?} gate in time"));
        self.commit(run)
    }

    /// Executes the next phase of a run and saves the result.
    ///
    /// A finished run is returned unchanged. A run waiting at a gate is
    /// returned unchanged unless it auto-approves, in which case the gate is
    /// answered with an empty approval from actor `auto`.
    pub fn advance(&self, run_id: &str) -> Result<PipelineRun, OrchestratorError> {
        let slot = self.slot(run_id);
        let mut guard = lock(&slot);
        let run = self.load(run_id)?;
        if run.phase.is_terminal() {
            return Ok(run);
        }
        if let Some(g) = &run.open_gate {
            if self.gate_expired(&run) {
                return self.fail_expired(run);
            }
            if !run.config.auto_approve {
                return Ok(run);
            }
            let mut event = ApprovalEvent::approve_all(run_id, g.gate, "auto");
            event.scene_index = g.scene_index;
            return self.approve_locked(&mut guard, run, event);
        }
        let mut next = run.clone();
        let backends = self.backends(&mut guard, &run.config)?;
        let dir = self.store.run_dir(run_id);
        match step(&mut next, backends, &dir) {
            Ok(()) => {}
            Err(StepError::Module(m)) => self.fail(&mut next, m),
            Err(StepError::Reject(m)) => return Err(OrchestratorError::Rejected(m)),
            Err(StepError::Fatal(e)) => return Err(e),
        }
        self.commit(next)
    }

    /// Advances until the run finishes or waits at a gate nobody answers
    /// automatically.
    pub fn run_to_rest(&self, run_id: &str) -> Result<PipelineRun, OrchestratorError> {
        loop {
            let run = self.advance(run_id)?;
            if run.phase.is_terminal() || (run.open_gate.is_some() && !run.config.auto_approve) {
                return Ok(run);
            }
        }
    }

    /// Answers the open gate of a run.
    ///
    /// An invalid payload is rejected without touching the run. Backend
    /// failures during regeneration move the run to `failed`.
    pub fn submit_approval(&self, event: ApprovalEvent) -> Result<PipelineRun, OrchestratorError> {
        let slot = self.slot(&event.run_id);
        let mut guard = lock(&slot);
        let run = self.load(&event.run_id)?;
        self.approve_locked(&mut guard, run, event)
    }

    fn approve_locked(
        &self,
        slot: &mut Option<RunBackends>,
        run: PipelineRun,
        event: ApprovalEvent,
    ) -> Result<PipelineRun, OrchestratorError> {
        let closed = || OrchestratorError::GateClosed {
            run_id: run.run_id.clone(),
            gate: serde_json::to_value(event.gate).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default(),
        };
        let Some(open) = run.open_gate.clone() else { return Err(closed()) };
        if open.gate != event.gate || event.scene_index.is_some_and(|i| Some(i) != open.scene_index) {
            return Err(closed());
        }
        if self.gate_expired(&run) {
            self.fail_expired(run.clone())?;
            return Err(closed());
        }
        let mut next = run.clone();
        let backends = self.backends(slot, &run.config)?;
        let dir = self.store.run_dir(&run.run_id);
        let verdict_count = event.edits.len() + event.verdicts.len();
        next.journal.push(Event::Approval { gate: event.gate, actor: event.actor.clone(), verdicts: verdict_count });
        let result = match event.gate {
            Gate::Descriptions => answer_descriptions(&mut next, backends, &event),
            Gate::Element => answer_elements(&mut next, backends, &dir, &open, &event),
        };
        match result {
            Ok(()) => {}
            Err(StepError::Module(m)) => self.fail(&mut next, m),
            Err(StepError::Reject(m)) => return Err(OrchestratorError::Rejected(m)),
            Err(StepError::Fatal(e)) => return Err(e),
        }
        self.commit(next)
    }

    /// Scores the rendered scenes of a run and writes `report.json`.
    ///
    /// `prompts` replaces the global prompts used for TIS, one per rendered
    /// scene (benchmark prompts, for example).
    pub fn evaluate(&self, run_id: &str, prompts: Option<Vec<String>>) -> Result<MetricReport, OrchestratorError> {
        let slot = self.slot(run_id);
        let mut guard = lock(&slot);
        let mut run = self.load(run_id)?;
        let backends = self.backends(&mut guard, &run.config)?;
        let dir = self.store.run_dir(run_id);
        let report = match score(&mut run, backends, &dir, prompts.as_deref()) {
            Ok(r) => r,
            Err(StepError::Reject(m)) => return Err(OrchestratorError::NotReady(run_id.to_string(), m)),
            Err(StepError::Module(m)) => return Err(OrchestratorError::NotReady(run_id.to_string(), m)),
            Err(StepError::Fatal(e)) => return Err(e),
        };
        self.commit(run)?;
        Ok(report)
    }

    /// Runs that can make progress without a reviewer, e.g. after a restart.
    pub fn resumable(&self) -> Result<Vec<String>, OrchestratorError> {
        let mut out = Vec::new();
        for id in self.store.list()? {
            let run = self.load(&id)?;
            if !run.phase.is_terminal() && (run.open_gate.is_none() || run.config.auto_approve) {
                out.push(id);
            }
        }
        Ok(out)
    }
}

/// Records a phase change. Every transition must be declared.
fn enter(run: &mut PipelineRun, to: Phase) {
    let from = run.phase;
    assert!(from.can_transition(to), "undeclared transition {from} -> {to}");
    run.journal.push(Event::PhaseChanged { from: from.to_string(), to: to.to_string() });
    run.phase = to;
}

fn open_gate(run: &mut PipelineRun, gate: Gate, scene_index: Option<usize>, round: u32) {
    run.journal.push(Event::GateOpened { gate, scene_index });
    run.open_gate = Some(OpenGate { gate, scene_index, round, opened_at: run.journal.now() });
}

fn close_gate(run: &mut PipelineRun) {
    if let Some(g) = run.open_gate.take() {
        run.journal.push(Event::GateClosed { gate: g.gate, scene_index: g.scene_index });
    }
}

fn step(run: &mut PipelineRun, b: &mut RunBackends, dir: &Path) -> Result<(), StepError> {
    match run.phase {
        Phase::Distilling => distill(run, b),
        Phase::Prompting => {
            let d = &run.distillation;
            let prompts = generate_layered_prompts(
                &d.scenes,
                &d.characters,
                &run.config.distillation,
                b.text.as_mut(),
                &mut run.journal,
            )
            .map_err(module)?;
            run.distillation.prompts = prompts;
            enter(run, Phase::Reflecting);
            Ok(())
        }
        Phase::Reflecting => reflect_step(run, b, dir),
        Phase::ElementGeneration => generate_elements(run, b, dir),
        Phase::Locating => {
            let i = run.current_scene;
            let elements = load_elements(run, dir, i)?;
            let layouts = locate_subjects(
                &run.distillation.prompts[i],
                &elements,
                b.layout.as_mut(),
                &run.config.image,
                &mut run.journal,
            )
            .map_err(module)?;
            scene_mut(run, i)?.layouts = layouts;
            enter(run, Phase::Stitching);
            Ok(())
        }
        Phase::Stitching => {
            let i = run.current_scene;
            let elements = load_elements(run, dir, i)?;
            let (bg, fgs): (Vec<_>, Vec<_>) = elements.into_iter().partition(|e| e.kind == ElementKind::Background);
            let bg = bg.into_iter().next().ok_or_else(|| module(format!("scene {i} has no background element")))?;
            let layouts = scene_mut(run, i)?.layouts.clone();
            let st = stitch(&bg, &fgs, &layouts, b.segmenter.as_mut(), &mut run.journal).map_err(module)?;
            let image = artifacts::save_image(dir, &format!("scene_{i}/stitched.png"), &st.pixels)?;
            scene_mut(run, i)?.stitched =
                Some(StitchedRecord { image, layers: st.layers, fallback_masks: st.fallback_masks });
            enter(run, Phase::Rendering);
            Ok(())
        }
        Phase::Rendering => render_step(run, b, dir),
        Phase::Evaluating => {
            score(run, b, dir, None)?;
            enter(run, Phase::Done);
            Ok(())
        }
        Phase::AwaitingDescriptionFeedback | Phase::AwaitingElementApproval | Phase::Done | Phase::Failed => {
            Ok(())
        }
    }
}

fn distill(run: &mut PipelineRun, b: &mut RunBackends) -> Result<(), StepError> {
    let cfg = &run.config.distillation;
    let raw = extract_scenes(&run.story, cfg, b.text.as_mut(), &mut run.journal).map_err(module)?;
    let characters = extract_characters(&run.story, cfg, b.text.as_mut(), &mut run.journal).map_err(module)?;
    validate_characters(&characters, &cfg.schema).map_err(module)?;
    let scenes = link_characters(&raw, &characters).map_err(module)?;
    run.distillation.scenes = scenes;
    run.distillation.characters = characters;
    open_gate(run, Gate::Descriptions, None, 0);
    enter(run, Phase::AwaitingDescriptionFeedback);
    Ok(())
}

fn reflect_step(run: &mut PipelineRun, b: &mut RunBackends, dir: &Path) -> Result<(), StepError> {
    let d = &run.distillation;
    let report = reflect(
        &d.prompts,
        &d.scenes,
        &run.story,
        &run.config.distillation,
        b.text.as_mut(),
        b.embedder.as_mut(),
        &mut run.journal,
    )
    .map_err(module)?;
    let flagged: Vec<usize> = report.entries.iter().filter(|e| !e.passed).map(|e| e.scene_index).collect();
    run.distillation.report = Some(report);
    if run.config.block_on_reflection && !flagged.is_empty() {
        return Err(StepError::Module(format!("reflection flagged scene(s) {flagged:?}")));
    }
    let full = run.distillation.complete(&run.story).expect("report set above");
    full.validate(&run.config.distillation.separator).map_err(module)?;
    let bytes = serde_json::to_vec_pretty(&full).expect("distillation serializes");
    write_atomic(&dir.join(DISTILLATION_FILE), &bytes)?;
    run.current_scene = 0;
    enter(run, Phase::ElementGeneration);
    Ok(())
}

fn element_path(scene_index: usize, key: &ElementKey, attempt: u32) -> String {
    match attempt {
        0 => format!("scene_{scene_index}/{key}.png"),
        n => format!("scene_{scene_index}/{key}.r{n}.png"),
    }
}

fn scene_mut(run: &mut PipelineRun, i: usize) -> Result<&mut SceneRecord, StepError> {
    run.scenes
        .iter_mut()
        .find(|s| s.scene_index == i)
        .ok_or_else(|| StepError::Fatal(OrchestratorError::StoreCorrupt(format!("scene {i} has no record"))))
}

fn load_elements(run: &PipelineRun, dir: &Path, i: usize) -> Result<Vec<ElementImage>, StepError> {
    let rec = run
        .scenes
        .iter()
        .find(|s| s.scene_index == i)
        .ok_or_else(|| StepError::Fatal(OrchestratorError::StoreCorrupt(format!("scene {i} has no record"))))?;
    rec.elements
        .iter()
        .map(|e| {
            Ok(ElementImage {
                scene_index: i,
                kind: e.kind,
                character_id: e.character_id.clone(),
                prompt: e.prompt.clone(),
                pixels: artifacts::load_image(dir, &e.image)?,
                generation_seed: e.generation_seed,
                reference_scene: e.reference_scene,
            })
        })
        .collect()
}

fn load_storage(run: &PipelineRun, dir: &Path) -> Result<SubjectStorage, StepError> {
    let mut storage = SubjectStorage::new();
    for s in &run.subjects {
        storage.push(ReferenceRecord {
            character_id: s.character_id.clone(),
            scene_index: s.scene_index,
            image: artifacts::load_image(dir, &s.image)?,
            digest: s.image.digest.clone(),
            tokens: s.tokens.clone(),
        });
    }
    Ok(storage)
}

/// Saves the storage records added since the run's last save.
fn persist_new_subjects(run: &mut PipelineRun, storage: &SubjectStorage, dir: &Path) -> Result<(), StepError> {
    let mut known: BTreeMap<String, usize> = BTreeMap::new();
    for s in &run.subjects {
        *known.entry(s.character_id.clone()).or_default() += 1;
    }
    let ids: Vec<String> = storage.characters().map(String::from).collect();
    for id in ids {
        let records = storage.records(&id);
        let have = known.get(&id).copied().unwrap_or(0);
        for (n, r) in records.iter().enumerate().skip(have) {
            let image = artifacts::save_image(dir, &format!("subjects/{id}_{n}.png"), &r.image)?;
            run.subjects.push(SubjectRef {
                character_id: id.clone(),
                scene_index: r.scene_index,
                image,
                tokens: r.tokens.clone(),
            });
        }
    }
    Ok(())
}

fn element_record(e: &ElementImage, dir: &Path, attempt: u32) -> Result<ElementRecord, StepError> {
    let key = e.key();
    let image = artifacts::save_image(dir, &element_path(e.scene_index, &key, attempt), &e.pixels)?;
    Ok(ElementRecord {
        element: key,
        kind: e.kind,
        character_id: e.character_id.clone(),
        prompt: e.prompt.clone(),
        image,
        generation_seed: e.generation_seed,
        reference_scene: e.reference_scene,
        attempts: attempt,
    })
}

fn generate_elements(run: &mut PipelineRun, b: &mut RunBackends, dir: &Path) -> Result<(), StepError> {
    let i = run.current_scene;
    let prompts = run
        .distillation
        .prompts
        .get(i)
        .cloned()
        .ok_or_else(|| module(format!("no prompts for scene {i}")))?;
    let mut storage = load_storage(run, dir)?;
    let elements = generate_scene_elements(&prompts, &mut storage, b.generator.as_mut(), &run.config.image, &mut run.journal)
        .map_err(module)?;
    let records = elements.iter().map(|e| element_record(e, dir, 0)).collect::<Result<Vec<_>, _>>()?;
    persist_new_subjects(run, &storage, dir)?;
    run.scenes.retain(|s| s.scene_index != i);
    run.scenes.push(SceneRecord { scene_index: i, elements: records, layouts: Vec::new(), stitched: None, rendered: None });
    open_gate(run, Gate::Element, Some(i), 0);
    enter(run, Phase::AwaitingElementApproval);
    Ok(())
}

fn render_step(run: &mut PipelineRun, b: &mut RunBackends, dir: &Path) -> Result<(), StepError> {
    let i = run.current_scene;
    let elements = load_elements(run, dir, i)?;
    let rec = scene_mut(run, i)?.clone();
    let st_rec = rec.stitched.as_ref().ok_or_else(|| module(format!("scene {i} was not stitched")))?;
    // Rendering only reads the composite pixels and the layer order.
    let stitched = StitchedImage {
        scene_index: i,
        pixels: artifacts::load_image(dir, &st_rec.image)?,
        layers: st_rec.layers.clone(),
        alphas: Vec::new(),
        provenance: Vec::new(),
        fallback_masks: st_rec.fallback_masks.clone(),
    };
    let prompts = run.distillation.prompts[i].clone();
    let inputs = RenderInputs { stitched: &stitched, prompts: &prompts, elements: &elements, layouts: &rec.layouts };
    let out = render_scene(&inputs, b.renderer.as_mut(), &run.config.image.renderer, &mut run.journal).map_err(module)?;
    let image = artifacts::save_image(dir, &format!("scene_{i}/final.png"), &out.pixels)?;
    scene_mut(run, i)?.rendered =
        Some(RenderedRecord { image, config_digest: out.config_digest, lambda_trace: out.lambda_trace });
    if i + 1 < run.distillation.prompts.len() {
        run.current_scene = i + 1;
        enter(run, Phase::ElementGeneration);
    } else if run.config.evaluate {
        enter(run, Phase::Evaluating);
    } else {
        enter(run, Phase::Done);
    }
    Ok(())
}

fn answer_descriptions(run: &mut PipelineRun, b: &mut RunBackends, event: &ApprovalEvent) -> Result<(), StepError> {
    let cfg = run.config.distillation.clone();
    let d = &run.distillation;
    let outcome =
        apply_feedback(&d.scenes, &d.characters, &cfg.schema, &event.edits).map_err(|e| StepError::Reject(e.to_string()))?;
    run.journal.push(Event::FeedbackApplied {
        approved: outcome.approved,
        modified: outcome.modified,
        regenerate: outcome.regenerate.len(),
    });
    let mut scenes = outcome.scenes;
    let mut characters = outcome.characters;
    // Characters first so regenerated scenes link against fresh records.
    for (_, id) in outcome.regenerate.iter().filter(|(k, _)| *k == TargetKind::Character) {
        let c = regenerate_character(&run.story, &cfg, &characters, id, b.text.as_mut(), &mut run.journal).map_err(module)?;
        if let Some(slot) = characters.iter_mut().find(|x| &x.character_id == id) {
            *slot = c;
        }
    }
    for (_, id) in outcome.regenerate.iter().filter(|(k, _)| *k == TargetKind::Scene) {
        let index: usize = id.parse().map_err(|_| StepError::Reject(format!("bad scene id `{id}`")))?;
        let s = regenerate_scene(&run.story, &cfg, &scenes, &characters, index, b.text.as_mut(), &mut run.journal)
            .map_err(module)?;
        scenes[index] = s;
    }
    run.distillation.scenes = scenes;
    run.distillation.characters = characters;
    let round = run.open_gate.as_ref().map_or(0, |g| g.round) + 1;
    close_gate(run);
    if outcome.regenerate.is_empty() {
        enter(run, Phase::Prompting);
    } else {
        open_gate(run, Gate::Descriptions, None, round);
        enter(run, Phase::AwaitingDescriptionFeedback);
    }
    Ok(())
}

fn answer_elements(
    run: &mut PipelineRun,
    b: &mut RunBackends,
    dir: &Path,
    open: &OpenGate,
    event: &ApprovalEvent,
) -> Result<(), StepError> {
    let i = open.scene_index.ok_or_else(|| module("element gate without a scene"))?;
    let prompts = run.distillation.prompts[i].clone();
    let mut elements = load_elements(run, dir, i)?;
    let mut storage = load_storage(run, dir)?;
    let rec = scene_mut(run, i)?;
    let mut attempts: BTreeMap<ElementKey, u32> =
        rec.elements.iter().filter(|e| e.attempts > 0).map(|e| (e.element.clone(), e.attempts)).collect();
    let before = attempts.clone();
    let verdicts: Vec<_> = event.verdicts.iter().map(|v| (v.element.clone(), v.decision)).collect();
    let regenerated = apply_element_verdicts(
        &prompts,
        &mut elements,
        &verdicts,
        &mut attempts,
        &mut storage,
        b.generator.as_mut(),
        &run.config.image,
        &mut run.journal,
    )
    .map_err(|e| match e {
        ImageError::UnknownElement(_) => StepError::Reject(e.to_string()),
        other => module(other),
    })?;
    let mut records = Vec::with_capacity(elements.len());
    for e in &elements {
        let key = e.key();
        let n = attempts.get(&key).copied().unwrap_or(0);
        let old = scene_mut(run, i)?.elements.iter().find(|r| r.element == key).cloned();
        match old {
            Some(r) if before.get(&key).copied().unwrap_or(0) == n => records.push(r),
            _ => records.push(element_record(e, dir, n)?),
        }
    }
    scene_mut(run, i)?.elements = records;
    persist_new_subjects(run, &storage, dir)?;
    close_gate(run);
    if regenerated {
        open_gate(run, Gate::Element, Some(i), open.round + 1);
        enter(run, Phase::AwaitingElementApproval);
    } else {
        enter(run, Phase::Locating);
    }
    Ok(())
}

fn score(
    run: &mut PipelineRun,
    b: &mut RunBackends,
    dir: &Path,
    prompts: Option<&[String]>,
) -> Result<MetricReport, StepError> {
    let mut rendered: Vec<(usize, Raster, Raster, Vec<visagent_core::image::Layout>)> = Vec::new();
    for s in &run.scenes {
        if let (Some(r), Some(st)) = (&s.rendered, &s.stitched) {
            let fin = artifacts::load_image(dir, &r.image)?;
            let sti = artifacts::load_image(dir, &st.image)?;
            rendered.push((s.scene_index, fin, sti, s.layouts.clone()));
        }
    }
    rendered.sort_by_key(|r| r.0);
    if rendered.is_empty() {
        return Err(StepError::Reject("no rendered scenes".into()));
    }
    let global: Vec<String> = rendered
        .iter()
        .map(|(i, ..)| run.distillation.prompts.get(*i).map(|p| p.global_prompt.clone()).unwrap_or_default())
        .collect();
    let texts = match prompts {
        Some(p) if p.len() != rendered.len() => {
            return Err(StepError::Reject(format!("{} prompt(s) for {} rendered scene(s)", p.len(), rendered.len())))
        }
        Some(p) => p.to_vec(),
        None => global,
    };
    let scenes: Vec<EvalScene<'_>> = rendered
        .iter()
        .zip(&texts)
        .map(|((i, fin, sti, layouts), prompt)| EvalScene {
            scene_index: *i,
            prompt,
            rendered: fin,
            stitched: sti,
            layouts,
        })
        .collect();
    let report = evaluate_scenes(&scenes, b.embedder.as_mut(), b.features.as_mut()).map_err(module)?;
    let bytes = serde_json::to_vec_pretty(&report).expect("report serializes");
    write_atomic(&dir.join(REPORT_FILE), &bytes)?;
    run.journal.push(Event::Evaluated { digest: json_digest(&report) });
    run.metrics = Some(report.clone());
    Ok(report)
}
