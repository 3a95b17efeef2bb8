mod common;

use common::*;
use visagent::orchestrator::{Phase, STATE_FILE};
use visagent::{ApprovalEvent, OrchestratorError, RunStore};
use visagent_core::events::Gate;

#[test]
fn finished_run_round_trips_with_its_digest() {
    let (_d, store) = temp_store();
    let orch = deterministic(store.clone());
    let run = orch.create_run(jack_story(), jack_config()).unwrap();
    let done = drive(&orch, &run.run_id);
    let loaded = store.load(&run.run_id).unwrap();
    assert_eq!(loaded, done);
    assert_eq!(loaded.digest(), done.digest());
    assert_eq!(store.list().unwrap(), vec![run.run_id.clone()]);
}

#[test]
fn damaged_state_is_reported_as_corrupt() {
    let (_d, store) = temp_store();
    let orch = deterministic(store.clone());
    let run = orch.create_run(jack_story(), manual_config()).unwrap();
    drive(&orch, &run.run_id);
    let path = store.state_path(&run.run_id);
    let good = std::fs::read_to_string(&path).unwrap();

    // A field edited behind the store's back no longer matches the digest.
    let edited = good.replacen("\"current_scene\": 0", "\"current_scene\": 3", 1);
    assert_ne!(edited, good);
    std::fs::write(&path, edited).unwrap();
    assert!(matches!(store.load(&run.run_id), Err(OrchestratorError::StoreCorrupt(_))));

    std::fs::write(&path, &good[..good.len() / 2]).unwrap();
    assert!(matches!(store.load(&run.run_id), Err(OrchestratorError::StoreCorrupt(_))));

    std::fs::write(&path, good.replacen("visagent-run", "other-format", 1)).unwrap();
    assert!(matches!(store.load(&run.run_id), Err(OrchestratorError::StoreCorrupt(_))));

    std::fs::write(&path, &good).unwrap();
    store.load(&run.run_id).unwrap();
}

#[test]
fn state_copied_under_another_id_is_refused() {
    let (_d, store) = temp_store();
    let orch = deterministic(store.clone());
    let run = orch.create_run(jack_story(), manual_config()).unwrap();
    let other = store.run_dir("copy");
    std::fs::create_dir_all(&other).unwrap();
    std::fs::copy(store.state_path(&run.run_id), other.join(STATE_FILE)).unwrap();
    assert!(matches!(store.load("copy"), Err(OrchestratorError::StoreCorrupt(_))));
}

#[test]
fn tampered_artifact_fails_verification() {
    let (_d, store) = temp_store();
    let orch = deterministic(store.clone());
    let run = orch.create_run(jack_story(), jack_config()).unwrap();
    let done = drive(&orch, &run.run_id);
    let final0 = &done.scenes[0].rendered.as_ref().unwrap().image;
    let first1 = &done.scenes[1].rendered.as_ref().unwrap().image;
    let dir = store.run_dir(&run.run_id);
    std::fs::copy(dir.join(&first1.path), dir.join(&final0.path)).unwrap();
    assert!(matches!(store.verify_artifacts(&done), Err(OrchestratorError::StoreCorrupt(_))));
}

#[test]
fn restart_keeps_the_open_gate() {
    let (dir, store) = temp_store();
    let id = {
        let orch = deterministic(store);
        let run = orch.create_run(jack_story(), manual_config()).unwrap();
        let waiting = drive(&orch, &run.run_id);
        assert_eq!(waiting.phase, Phase::AwaitingDescriptionFeedback);
        run.run_id
    };

    // A fresh process: new store handle, new orchestrator, no cached backends.
    let orch = deterministic(RunStore::open(dir.path()).unwrap());
    let restored = orch.load(&id).unwrap();
    assert_eq!(restored.phase, Phase::AwaitingDescriptionFeedback);
    assert_eq!(restored.open_gate.as_ref().map(|g| g.gate), Some(Gate::Descriptions));
    assert!(orch.resumable().unwrap().is_empty());
    let view = orch.get_state(&id).unwrap();
    assert_eq!(view.open_gate.as_ref().map(|g| g.gate), Some(Gate::Descriptions));

    orch.submit_approval(ApprovalEvent::approve_all(&id, Gate::Descriptions, "ana")).unwrap();
    let next = drive(&orch, &id);
    assert_eq!(next.phase, Phase::AwaitingElementApproval);
    assert_eq!(next.open_gate.as_ref().and_then(|g| g.scene_index), Some(0));
}

#[test]
fn unusable_ids_are_unknown() {
    let (_d, store) = temp_store();
    for id in ["", "..", "../etc", "a/b"] {
        assert!(matches!(store.load(id), Err(OrchestratorError::UnknownRun(_))), "{id}");
    }
}
