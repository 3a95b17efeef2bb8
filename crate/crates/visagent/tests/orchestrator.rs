mod common;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use common::*;
use serde_json::{json, Value};
use visagent::orchestrator::{ElementVerdict, Phase};
use visagent::registry::{self, RunBackends};
use visagent::{ApprovalEvent, ConfigError, Orchestrator, OrchestratorError, RunConfig};
use visagent_core::backend::{BackendDescriptor, TextModelBackend};
use visagent_core::events::Gate;
use visagent_core::image::elements::GENERATION_ROLE;
use visagent_core::image::{ElementDecision, ElementKey};
use visagent_core::story::{FeedbackEdit, TargetKind};
use visagent_core::{AgentRole, BackendError, Event};

#[test]
fn auto_approve_runs_to_done() {
    let (_d, store) = temp_store();
    let orch = deterministic(store.clone());
    let run = orch.create_run(jack_story(), jack_config()).unwrap();
    assert_eq!(run.phase, Phase::Distilling);
    let run = drive(&orch, &run.run_id);
    assert_eq!(run.phase, Phase::Done, "error: {:?}", run.error);
    assert_eq!(run.scenes.len(), 5);
    assert!(run.scenes.iter().all(|s| s.rendered.is_some() && s.stitched.is_some()));
    assert!(run.metrics.as_ref().is_some_and(|m| m.is_well_formed()));
    store.verify_artifacts(&run).unwrap();
    assert!(store.run_dir(&run.run_id).join("report.json").is_file());
    assert!(store.run_dir(&run.run_id).join("distillation.json").is_file());
    for (from, to) in transitions(&run) {
        assert!(from.can_transition(to), "{from} -> {to}");
    }
}

#[test]
fn evaluation_can_be_switched_off() {
    let (_d, store) = temp_store();
    let orch = deterministic(store);
    let cfg = RunConfig { evaluate: false, ..jack_config() };
    let run = orch.create_run(jack_story(), cfg).unwrap();
    let run = drive(&orch, &run.run_id);
    assert_eq!(run.phase, Phase::Done);
    assert!(run.metrics.is_none());
    assert!(!transitions(&run).contains(&(Phase::Rendering, Phase::Evaluating)));
}

/// Delegates to the registry backend but fails prompt generation.
struct BrokenPrompts(Box<dyn TextModelBackend + Send>);

impl TextModelBackend for BrokenPrompts {
    fn descriptor(&self) -> BackendDescriptor {
        self.0.descriptor()
    }

    fn complete(&mut self, role: AgentRole, instruction: &str, payload: &Value) -> Result<Value, BackendError> {
        if role == AgentRole::PromptGeneration {
            return Err(BackendError::new("broken", "service unavailable"));
        }
        self.0.complete(role, instruction, payload)
    }
}

#[test]
fn backend_failure_fails_the_run_in_its_phase() {
    let (_d, store) = temp_store();
    let factory = Arc::new(|c: &RunConfig| -> Result<RunBackends, ConfigError> {
        let mut b = registry::build(&c.backends)?;
        b.text = Box::new(BrokenPrompts(b.text));
        Ok(b)
    });
    let orch = deterministic(store).with_factory(factory);
    let run = orch.create_run(jack_story(), jack_config()).unwrap();
    let run = drive(&orch, &run.run_id);
    assert_eq!(run.phase, Phase::Failed);
    let err = run.error.as_ref().unwrap();
    assert_eq!(err.phase, Phase::Prompting);
    assert!(err.message.contains("service unavailable"), "{}", err.message);
    assert!(matches!(run.journal.events.last(), Some(Event::PhaseChanged { to, .. }) if to == "failed"));
    assert!(run.open_gate.is_none());
}

#[test]
fn advancing_a_finished_run_changes_nothing() {
    let (_d, store) = temp_store();
    let orch = deterministic(store);
    let run = orch.create_run(jack_story(), jack_config()).unwrap();
    let done = drive(&orch, &run.run_id);
    let again = orch.advance(&run.run_id).unwrap();
    assert_eq!(done.digest(), again.digest());
    assert_eq!(orch.load(&run.run_id).unwrap().digest(), done.digest());
}

#[test]
fn approving_descriptions_moves_to_prompting() {
    let (_d, store) = temp_store();
    let orch = deterministic(store);
    let run = orch.create_run(jack_story(), manual_config()).unwrap();
    let waiting = drive(&orch, &run.run_id);
    assert_eq!(waiting.phase, Phase::AwaitingDescriptionFeedback);
    let gate = waiting.open_gate.clone().unwrap();
    assert_eq!((gate.gate, gate.scene_index, gate.round), (Gate::Descriptions, None, 0));
    assert_eq!(waiting.distillation.scenes.len(), 5);
    assert_eq!(waiting.distillation.characters.len(), 3);

    // Waiting runs do not move on their own.
    assert_eq!(orch.advance(&run.run_id).unwrap().digest(), waiting.digest());

    let after = orch.submit_approval(ApprovalEvent::approve_all(&run.run_id, Gate::Descriptions, "ana")).unwrap();
    assert_eq!(after.phase, Phase::Prompting);
    assert!(after.open_gate.is_none());
    assert!(after.journal.events.iter().any(|e| matches!(e, Event::Approval { actor, .. } if actor == "ana")));
    assert!(matches!(
        after.journal.events.iter().rev().find(|e| matches!(e, Event::GateClosed { .. })),
        Some(Event::GateClosed { gate: Gate::Descriptions, scene_index: None })
    ));
}

#[test]
fn edited_summary_survives_into_the_run() {
    let (_d, store) = temp_store();
    let orch = deterministic(store);
    let run = orch.create_run(jack_story(), review_config()).unwrap();
    drive(&orch, &run.run_id);
    let mut event = ApprovalEvent::approve_all(&run.run_id, Gate::Descriptions, "ana");
    event.edits = vec![FeedbackEdit::modify(TargetKind::Scene, "2", "summary", json!("Jack reaches the castle."))];
    let after = orch.submit_approval(event).unwrap();
    assert_eq!(after.phase, Phase::Prompting);
    assert_eq!(after.distillation.scenes[2].summary, "Jack reaches the castle.");
    let resumed = drive(&orch, &run.run_id);
    assert_eq!(resumed.phase, Phase::AwaitingElementApproval, "{:?}", resumed.error);
    assert_eq!(resumed.distillation.scenes[2].summary, "Jack reaches the castle.");
}

#[test]
fn invalid_edit_is_rejected_without_state_change() {
    let (_d, store) = temp_store();
    let orch = deterministic(store);
    let run = orch.create_run(jack_story(), manual_config()).unwrap();
    let before = drive(&orch, &run.run_id);
    let mut event = ApprovalEvent::approve_all(&run.run_id, Gate::Descriptions, "ana");
    event.edits = vec![FeedbackEdit::approve(TargetKind::Character, "nobody")];
    let err = orch.submit_approval(event).unwrap_err();
    assert!(matches!(err, OrchestratorError::Rejected(_)), "{err:?}");
    assert_eq!(orch.load(&run.run_id).unwrap().digest(), before.digest());
}

#[test]
fn character_regeneration_reopens_the_gate() {
    let (_d, store) = temp_store();
    let orch = deterministic(store);
    let cfg = RunConfig { auto_approve: false, ..RunConfig::default() };
    let run = orch.create_run(jack_story(), cfg).unwrap();
    let waiting = drive(&orch, &run.run_id);
    assert_eq!(waiting.phase, Phase::AwaitingDescriptionFeedback);
    let id = waiting.distillation.characters[0].character_id.clone();
    let mut event = ApprovalEvent::approve_all(&run.run_id, Gate::Descriptions, "ana");
    event.edits = vec![FeedbackEdit::regenerate(TargetKind::Character, id.clone())];
    let after = orch.submit_approval(event).unwrap();
    assert_eq!(after.phase, Phase::AwaitingDescriptionFeedback);
    assert_eq!(after.open_gate.as_ref().unwrap().round, 1);
    let target = format!("character:{id}");
    assert_eq!(count_events(&after, |e| matches!(e, Event::Regenerated { target: t } if *t == target)), 1);
    assert!(transitions(&after)
        .contains(&(Phase::AwaitingDescriptionFeedback, Phase::AwaitingDescriptionFeedback)));
}

/// Answers the description gate and advances to the first element gate.
fn at_element_gate(orch: &Orchestrator, id: &str) -> visagent::PipelineRun {
    drive(orch, id);
    orch.submit_approval(ApprovalEvent::approve_all(id, Gate::Descriptions, "ana")).unwrap();
    let run = drive(orch, id);
    assert_eq!(run.phase, Phase::AwaitingElementApproval);
    run
}

fn generated(run: &visagent::PipelineRun, scene: usize, element: &str) -> usize {
    count_events(run, |e| {
        matches!(e, Event::ElementGenerated { scene_index, element: el, .. } if *scene_index == scene && el == element)
    })
}

#[test]
fn rejecting_one_element_regenerates_exactly_it() {
    let (_d, store) = temp_store();
    let orch = deterministic(store.clone());
    let run = orch.create_run(jack_story(), manual_config()).unwrap();
    let waiting = at_element_gate(&orch, &run.run_id);
    let gate = waiting.open_gate.clone().unwrap();
    assert_eq!((gate.gate, gate.scene_index), (Gate::Element, Some(0)));
    let bg_before = generated(&waiting, 0, "bg");
    let fg_before = generated(&waiting, 0, "fg_jack");
    let calls_before = waiting.journal.calls.len();

    let mut event = ApprovalEvent::approve_all(&run.run_id, Gate::Element, "ana");
    event.scene_index = Some(0);
    event.verdicts = vec![
        ElementVerdict { element: ElementKey::Background, decision: ElementDecision::Approve },
        ElementVerdict { element: ElementKey::Foreground("jack".into()), decision: ElementDecision::Regenerate },
    ];
    let after = orch.submit_approval(event).unwrap();
    assert_eq!(after.phase, Phase::AwaitingElementApproval);
    assert_eq!(after.open_gate.as_ref().unwrap().round, 1);
    assert_eq!(generated(&after, 0, "fg_jack"), fg_before + 1);
    assert_eq!(generated(&after, 0, "bg"), bg_before);
    assert_eq!(count_events(&after, |e| matches!(e, Event::Regenerated { target } if target == "element:0:fg_jack")), 1);
    let gen_calls = after.journal.calls[calls_before..].iter().filter(|c| c.role == GENERATION_ROLE).count();
    assert_eq!(gen_calls, 1);

    let rec = after.scenes[0].elements.iter().find(|e| e.element == ElementKey::Foreground("jack".into())).unwrap();
    assert_eq!(rec.attempts, 1);
    assert!(rec.image.path.ends_with(".r1.png"), "{}", rec.image.path);
    store.verify_artifacts(&after).unwrap();

    let mut ok = ApprovalEvent::approve_all(&run.run_id, Gate::Element, "ana");
    ok.scene_index = Some(0);
    let next = orch.submit_approval(ok).unwrap();
    assert_eq!(next.phase, Phase::Locating);
}

#[test]
fn unknown_element_is_rejected() {
    let (_d, store) = temp_store();
    let orch = deterministic(store);
    let run = orch.create_run(jack_story(), manual_config()).unwrap();
    let before = at_element_gate(&orch, &run.run_id);
    let mut event = ApprovalEvent::approve_all(&run.run_id, Gate::Element, "ana");
    event.verdicts =
        vec![ElementVerdict { element: ElementKey::Foreground("giant".into()), decision: ElementDecision::Regenerate }];
    assert!(matches!(orch.submit_approval(event), Err(OrchestratorError::Rejected(_))));
    assert_eq!(orch.load(&run.run_id).unwrap().digest(), before.digest());
}

#[test]
fn answers_to_closed_gates_are_refused() {
    let (_d, store) = temp_store();
    let orch = deterministic(store);
    let run = orch.create_run(jack_story(), manual_config()).unwrap();
    // Nothing is open before the first advance.
    let err = orch.submit_approval(ApprovalEvent::approve_all(&run.run_id, Gate::Descriptions, "ana")).unwrap_err();
    assert!(matches!(err, OrchestratorError::GateClosed { .. }), "{err:?}");

    drive(&orch, &run.run_id);
    let err = orch.submit_approval(ApprovalEvent::approve_all(&run.run_id, Gate::Element, "ana")).unwrap_err();
    assert!(matches!(err, OrchestratorError::GateClosed { ref gate, .. } if gate == "element"), "{err:?}");

    orch.submit_approval(ApprovalEvent::approve_all(&run.run_id, Gate::Descriptions, "ana")).unwrap();
    let waiting = drive(&orch, &run.run_id);
    let mut wrong_scene = ApprovalEvent::approve_all(&run.run_id, Gate::Element, "ana");
    wrong_scene.scene_index = Some(3);
    assert!(matches!(orch.submit_approval(wrong_scene), Err(OrchestratorError::GateClosed { .. })));
    assert_eq!(orch.load(&run.run_id).unwrap().digest(), waiting.digest());
}

#[test]
fn unknown_runs_are_reported() {
    let (_d, store) = temp_store();
    let orch = deterministic(store);
    assert!(matches!(orch.advance("missing"), Err(OrchestratorError::UnknownRun(_))));
    assert!(matches!(orch.get_state("missing"), Err(OrchestratorError::UnknownRun(_))));
}

#[test]
fn every_run_gets_a_fresh_id() {
    let (_d, store) = temp_store();
    let orch = Orchestrator::new(store);
    let a = orch.create_run(jack_story(), manual_config()).unwrap();
    let b = orch.create_run(jack_story(), manual_config()).unwrap();
    assert_ne!(a.run_id, b.run_id);
    assert_eq!(orch.list().unwrap().len(), 2);
}

#[test]
fn unknown_backend_names_are_config_errors() {
    let (_d, store) = temp_store();
    let orch = deterministic(store.clone());
    let mut cfg = jack_config();
    cfg.backends.image = "dall-e".into();
    let err = orch.create_run(jack_story(), cfg).unwrap_err();
    assert!(matches!(err, OrchestratorError::Config(_)), "{err:?}");
    assert!(store.list().unwrap().is_empty());

    let mut cfg = jack_config();
    cfg.backends.transcript = Some(fixtures().join("transcripts/none.json"));
    assert!(matches!(orch.create_run(jack_story(), cfg), Err(OrchestratorError::Config(_))));
}

static NOW: AtomicU64 = AtomicU64::new(0);

fn test_clock() -> u64 {
    NOW.load(Ordering::SeqCst)
}

#[test]
fn unanswered_gate_times_out() {
    let (_d, store) = temp_store();
    let orch = Orchestrator::new(store).with_clock(test_clock).with_ids(counter_ids("t"));
    let cfg = RunConfig { gate_timeout_secs: Some(10), ..manual_config() };
    let run = orch.create_run(jack_story(), cfg).unwrap();
    let waiting = drive(&orch, &run.run_id);
    assert!(waiting.open_gate.is_some());

    NOW.fetch_add(9_000_000, Ordering::SeqCst);
    assert_eq!(orch.advance(&run.run_id).unwrap().phase, Phase::AwaitingDescriptionFeedback);

    NOW.fetch_add(2_000_000, Ordering::SeqCst);
    let failed = orch.advance(&run.run_id).unwrap();
    assert_eq!(failed.phase, Phase::Failed);
    assert_eq!(failed.error.as_ref().unwrap().phase, Phase::AwaitingDescriptionFeedback);
    let err = orch.submit_approval(ApprovalEvent::approve_all(&run.run_id, Gate::Descriptions, "late")).unwrap_err();
    assert!(matches!(err, OrchestratorError::GateClosed { .. }));
}

#[test]
fn reflection_can_block_the_run() {
    let (_d, store) = temp_store();
    let orch = deterministic(store);
    let mut cfg = jack_config();
    cfg.block_on_reflection = true;
    cfg.distillation.reflection_threshold = 0.999;
    let run = orch.create_run(jack_story(), cfg).unwrap();
    let run = drive(&orch, &run.run_id);
    assert_eq!(run.phase, Phase::Failed);
    assert_eq!(run.error.as_ref().unwrap().phase, Phase::Reflecting);
}

#[test]
fn evaluation_accepts_replacement_prompts() {
    let (_d, store) = temp_store();
    let orch = deterministic(store);
    let run = orch.create_run(jack_story(), RunConfig { evaluate: false, ..jack_config() }).unwrap();
    drive(&orch, &run.run_id);
    let own = orch.evaluate(&run.run_id, None).unwrap();
    let other = orch.evaluate(&run.run_id, Some(vec!["a red kite".into(); 5])).unwrap();
    assert_ne!(own.tis, other.tis);
    assert_eq!(own.fid, other.fid);
    let err = orch.evaluate(&run.run_id, Some(vec!["too few".into()])).unwrap_err();
    assert!(matches!(err, OrchestratorError::NotReady(..)), "{err:?}");
    let stored = orch.load(&run.run_id).unwrap();
    assert!(count_events(&stored, |e| matches!(e, Event::Evaluated { .. })) >= 2);
}

#[test]
fn evaluation_needs_rendered_scenes() {
    let (_d, store) = temp_store();
    let orch = deterministic(store);
    let run = orch.create_run(jack_story(), manual_config()).unwrap();
    drive(&orch, &run.run_id);
    assert!(matches!(orch.evaluate(&run.run_id, None), Err(OrchestratorError::NotReady(..))));
}
