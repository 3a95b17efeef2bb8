mod common;

use std::path::Path;
use std::process::{Command, Output};

use common::*;

fn visagent(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_visagent")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Run id printed on the first line: `run <id> in <dir>`.
fn run_id(o: &Output) -> String {
    stdout(o).lines().next().and_then(|l| l.split_whitespace().nth(1)).unwrap().to_string()
}

#[test]
fn run_eval_and_render_from_the_command_line() {
    let tmp = tempfile::tempdir().unwrap();
    let story = fixtures().join("stories/jack.txt");
    let config = fixtures().join("configs/jack.toml");
    let store = tmp.path().join("runs");
    let o = visagent(&["run", "--story", path(&story), "--config", path(&config), "--out", path(&store)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("phase: done"), "{}", stdout(&o));
    let id = run_id(&o);
    let run_dir = store.join(&id);
    assert!(run_dir.join("scene_4/final.png").is_file());

    let report = tmp.path().join("report.json");
    let bench = fixtures().join("benchmark/mini.json");
    let o = visagent(&["eval", "--run", path(&run_dir), "--benchmark", path(&bench), "--report", path(&report)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("benchmark case: jack"));
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(metrics["tis"].is_number() && metrics["fid"].is_number() && metrics["ccs"].is_number());

    // The foreign-shape fixture holds no case for this story.
    let foreign = fixtures().join("benchmark/mini_foreign.json");
    let mapping = fixtures().join("benchmark/mini_foreign_mapping.json");
    let o = visagent(&["eval", "--run", path(&run_dir), "--benchmark", path(&foreign), "--mapping", path(&mapping)]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("no benchmark case matches"));

    let out = tmp.path().join("render");
    let distillation = run_dir.join("distillation.json");
    let o = visagent(&["render", "--distillation", path(&distillation), "--out", path(&out), "--steps", "9", "--seed", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for i in 0..5 {
        assert!(out.join(format!("scene_{i}/final.png")).is_file());
        assert!(out.join(format!("scene_{i}/stitched.png")).is_file());
    }
    assert!(out.join("journal.json").is_file());
}

#[test]
fn approve_resumes_a_waiting_run() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("manual.toml");
    std::fs::write(&config, manual_config().to_toml()).unwrap();
    let story = fixtures().join("stories/jack.txt");
    let store = tmp.path().join("runs");
    let o = visagent(&["run", "--story", path(&story), "--config", path(&config), "--out", path(&store)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("awaiting_description_feedback"));
    let id = run_id(&o);

    let event = tmp.path().join("event.json");
    std::fs::write(&event, r#"{"gate": "descriptions", "actor": "cli"}"#).unwrap();
    let o = visagent(&["approve", "--out", path(&store), "--run", &id, "--event", path(&event)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("awaiting_element_approval"), "{}", stdout(&o));

    // The same answer again targets a gate that is no longer open.
    let o = visagent(&["approve", "--out", path(&store), "--run", &id, "--event", path(&event)]);
    assert!(!o.status.success());
}

#[test]
fn recording_reproduces_the_fixture_transcript() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("jack.json");
    let o = visagent(&[
        "record-transcripts",
        "--story",
        path(&fixtures().join("stories/jack.txt")),
        "--replies",
        path(&fixtures().join("replies/jack.json")),
        "--out",
        path(&out),
        "--title",
        "jack",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("5 scenes, 3 characters"));
    let recorded = std::fs::read_to_string(&out).unwrap();
    let fixture = std::fs::read_to_string(fixtures().join("transcripts/jack.json")).unwrap();
    assert_eq!(recorded, fixture);
}

#[test]
fn bad_input_exits_non_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("bad.toml");
    std::fs::write(&config, "[backends]\nimage = \"nope\"\n").unwrap();
    let story = fixtures().join("stories/jack.txt");
    let o = visagent(&["run", "--story", path(&story), "--config", path(&config), "--out", path(tmp.path())]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown image backend"));

    let o = visagent(&["run", "--story", "/no/such/story.txt", "--out", path(tmp.path())]);
    assert!(!o.status.success());
}
