use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::Value;
use visagent_core::backend::{AgentRole, HashEmbedder, RecordingTextBackend, ScriptedTextBackend};
use visagent_core::eval::FieldMapping;
use visagent_core::image::{run_image_module, ImageBackends, RendererConfig};
use visagent_core::story::{run_story_module, AutoApprove, Story, StoryBackends, StoryDistillation};
use visagent_core::Journal;

use visagent::artifacts::{save_image, write_atomic};
use visagent::bench;
use visagent::orchestrator::{ApprovalEvent, Orchestrator, PipelineRun, RunStore};
use visagent::registry;
use visagent::RunConfig;

#[derive(Parser)]
#[command(name = "visagent", version, about = "Turn a plain-text story into rendered scene images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a run and drive it until it finishes or waits for review.
    Run {
        #[arg(long)]
        story: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        auto_approve: bool,
        /// Run store directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        title: Option<String>,
    },
    /// Answer the open gate of a stored run, then keep driving it.
    Approve {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        run: String,
        /// JSON approval event; `run_id` may be omitted.
        #[arg(long)]
        event: PathBuf,
    },
    /// Render every scene of a distillation document with auto-approval.
    Render {
        #[arg(long)]
        distillation: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Image backend name, overriding the config.
        #[arg(long)]
        backend: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Denoising steps; the default λ values are spread over three equal blocks.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Score a stored run and write a metric report.
    Eval {
        /// Run directory inside a store.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        benchmark: Option<PathBuf>,
        /// JSON field mapping for non-native benchmark documents.
        #[arg(long)]
        mapping: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Serve the HTTP API (and optionally the console bundle).
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        ui: Option<PathBuf>,
    },
    /// Record a text-backend transcript from hand-written replies.
    RecordTranscripts {
        #[arg(long)]
        story: PathBuf,
        /// JSON object mapping each role to its replies, in call order.
        #[arg(long)]
        replies: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        title: Option<String>,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(cfg.with_env_overrides(|k| std::env::var(k).ok()))
}

fn read_story(path: &Path, title: Option<String>) -> Result<Story> {
    let text = std::fs::read_to_string(path).with_context(|| path.display().to_string())?;
    let mut story = Story::new(text)?;
    story.title = title.or_else(|| path.file_stem().map(|s| s.to_string_lossy().into_owned()));
    Ok(story)
}

fn report(run: &PipelineRun, store: &RunStore) -> ExitCode {
    println!("run {} in {}", run.run_id, store.run_dir(&run.run_id).display());
    println!("phase: {}", run.phase);
    if let Some(g) = &run.open_gate {
        let scene = g.scene_index.map(|i| format!(" (scene {i})")).unwrap_or_default();
        println!("waiting at the {:?} gate{scene}; answer with `visagent approve`", g.gate);
    }
    if let Some(m) = &run.metrics {
        println!("metrics: {}", serde_json::to_string(m).unwrap_or_default());
    }
    match &run.error {
        Some(e) => {
            eprintln!("failed in {}: {}", e.phase, e.message);
            ExitCode::FAILURE
        }
        None => ExitCode::SUCCESS,
    }
}

fn run_dir_parts(dir: &Path) -> Result<(RunStore, String)> {
    let dir = dir.canonicalize().with_context(|| dir.display().to_string())?;
    let id = dir.file_name().and_then(|n| n.to_str()).context("run directory has no name")?.to_string();
    let root = dir.parent().context("run directory has no parent")?;
    Ok((RunStore::open(root)?, id))
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run { story, config, auto_approve, out, title } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.auto_approve |= auto_approve;
            let story = read_story(&story, title)?;
            let store = RunStore::open(&out)?;
            let orch = Orchestrator::new(store.clone());
            let run = orch.create_run(story, cfg)?;
            let run = orch.run_to_rest(&run.run_id)?;
            Ok(report(&run, &store))
        }
        Command::Approve { out, run, event } => {
            let text = std::fs::read_to_string(&event).with_context(|| event.display().to_string())?;
            let mut value: Value = serde_json::from_str(&text)?;
            if let Some(obj) = value.as_object_mut() {
                obj.entry("run_id").or_insert_with(|| Value::String(run.clone()));
            }
            let event: ApprovalEvent = serde_json::from_value(value)?;
            if event.run_id != run {
                bail!("event names run `{}`, not `{run}`", event.run_id);
            }
            let store = RunStore::open(&out)?;
            let orch = Orchestrator::new(store.clone());
            orch.submit_approval(event)?;
            let run = orch.run_to_rest(&run)?;
            Ok(report(&run, &store))
        }
        Command::Render { distillation, out, config, backend, seed, steps } => {
            let text = std::fs::read_to_string(&distillation).with_context(|| distillation.display().to_string())?;
            let d: StoryDistillation = serde_json::from_str(&text)?;
            let mut cfg = load_config(config.as_deref())?;
            if let Some(b) = backend {
                cfg.backends.image = b;
            }
            if let Some(s) = seed {
                cfg.image.base_seed = s;
                cfg.image.renderer.seed = s;
            }
            if let Some(n) = steps {
                cfg.image.renderer = RendererConfig { ..cfg.image.renderer }.with_steps(n)?;
            }
            cfg.validate()?;
            let mut b = registry::build(&cfg.backends)?;
            let mut storage = visagent_core::image::SubjectStorage::new();
            let mut journal = Journal::new();
            let scenes = run_image_module(
                &d.prompts,
                &mut storage,
                ImageBackends {
                    generator: b.generator.as_mut(),
                    locator: b.layout.as_mut(),
                    segmenter: b.segmenter.as_mut(),
                    renderer: b.renderer.as_mut(),
                },
                &mut AutoApprove,
                &cfg.image,
                &mut journal,
            )?;
            for s in &scenes {
                let i = s.scene_index;
                for e in &s.elements {
                    save_image(&out, &format!("scene_{i}/{}.png", e.key()), &e.pixels)?;
                }
                save_image(&out, &format!("scene_{i}/stitched.png"), &s.stitched.pixels)?;
                let r = save_image(&out, &format!("scene_{i}/final.png"), &s.rendered.pixels)?;
                println!("scene {i}: {} ({})", r.path, r.digest);
            }
            write_atomic(&out.join("journal.json"), &serde_json::to_vec_pretty(&journal)?)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval { run, benchmark, mapping, report: report_path } => {
            let (store, id) = run_dir_parts(&run)?;
            let orch = Orchestrator::new(store);
            let state = orch.load(&id)?;
            let prompts = match benchmark {
                Some(path) => {
                    let mapping = match mapping {
                        Some(m) => serde_json::from_str(&std::fs::read_to_string(&m)?)?,
                        None => FieldMapping::default(),
                    };
                    let cases = bench::load_cases(&path, &mapping)?;
                    let case = bench::find_case(&cases, &state)
                        .with_context(|| format!("no benchmark case matches run `{id}`"))?;
                    println!("benchmark case: {}", case.story_id);
                    Some(bench::case_prompts(case, &state.config.distillation.separator))
                }
                None => None,
            };
            let metrics = orch.evaluate(&id, prompts)?;
            let json = serde_json::to_string_pretty(&metrics)?;
            if let Some(p) = report_path {
                write_atomic(&p, json.as_bytes())?;
            }
            println!("{json}");
            Ok(ExitCode::SUCCESS)
        }
        Command::Serve { port, store, ui } => {
            let orch = Arc::new(Orchestrator::new(RunStore::open(&store)?));
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(visagent::api::serve(orch, port, ui))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::RecordTranscripts { story, replies, out, config, title } => {
            let cfg = load_config(config.as_deref())?;
            let story = read_story(&story, title)?;
            let text = std::fs::read_to_string(&replies).with_context(|| replies.display().to_string())?;
            let by_role: BTreeMap<AgentRole, Vec<Value>> = serde_json::from_str(&text)?;
            let mut scripted = ScriptedTextBackend::new("scripted");
            for (role, list) in by_role {
                for reply in list {
                    scripted.push(role, reply);
                }
            }
            let mut recorder = RecordingTextBackend::new(scripted);
            let mut embedder = HashEmbedder::default();
            let mut journal = Journal::new();
            let d = run_story_module(
                &story,
                &cfg.distillation,
                StoryBackends { text: &mut recorder, embedder: &mut embedder },
                &mut AutoApprove,
                &mut journal,
            )?;
            let transcript = recorder.into_transcript();
            write_atomic(&out, transcript.to_json_pretty().as_bytes())?;
            println!(
                "recorded {} replies: {} scenes, {} characters",
                transcript.entries.len(),
                d.scenes.len(),
                d.characters.len()
            );
            Ok(ExitCode::SUCCESS)
        }
    }
}
