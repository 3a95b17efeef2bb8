#![allow(dead_code)]

use std::path::PathBuf;

use visagent::orchestrator::{Phase, PipelineRun};
use visagent::{Orchestrator, RunConfig, RunStore};
use visagent_core::backend::TranscriptMode;
use visagent_core::story::Story;
use visagent_core::Event;

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn jack_text() -> String {
    std::fs::read_to_string(fixtures().join("stories/jack.txt")).expect("fixture story")
}

pub fn jack_story() -> Story {
    let mut s = Story::new(jack_text()).unwrap();
    s.title = Some("jack".into());
    s
}

/// Recorded text replies, procedural images, auto-approve.
pub fn jack_config() -> RunConfig {
    RunConfig::load(&fixtures().join("configs/jack.toml")).expect("fixture config")
}

/// The fixture config with every gate left to a reviewer.
pub fn manual_config() -> RunConfig {
    RunConfig { auto_approve: false, ..jack_config() }
}

/// Manual gates, and requests changed by review edits fall back to the
/// heuristic text backend instead of failing.
pub fn review_config() -> RunConfig {
    let mut c = manual_config();
    c.backends.transcript_mode = TranscriptMode::Generative;
    c
}

pub fn zero_clock() -> u64 {
    0
}

pub fn counter_ids(prefix: &'static str) -> impl FnMut() -> String + Send + 'static {
    let mut n = 0u32;
    move || {
        n += 1;
        format!("{prefix}-{n:04}")
    }
}

/// Zero clock and counter ids, so two stores hold identical runs.
pub fn deterministic(store: RunStore) -> Orchestrator {
    Orchestrator::new(store).with_clock(zero_clock).with_ids(counter_ids("run"))
}

pub fn temp_store() -> (tempfile::TempDir, RunStore) {
    let dir = tempfile::tempdir().unwrap();
    let store = RunStore::open(dir.path()).unwrap();
    (dir, store)
}

/// `(from, to)` of every phase change in the journal.
pub fn transitions(run: &PipelineRun) -> Vec<(Phase, Phase)> {
    run.journal
        .events
        .iter()
        .filter_map(|e| match e {
            Event::PhaseChanged { from, to } => Some((Phase::parse(from).unwrap(), Phase::parse(to).unwrap())),
            _ => None,
        })
        .collect()
}

pub fn count_events(run: &PipelineRun, pred: impl Fn(&Event) -> bool) -> usize {
    run.journal.events.iter().filter(|e| pred(e)).count()
}

/// Advances until the run rests at a gate or finishes.
pub fn drive(orch: &Orchestrator, id: &str) -> PipelineRun {
    orch.run_to_rest(id).unwrap()
}
