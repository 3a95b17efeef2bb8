use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::run::PipelineRun;
use super::OrchestratorError;
use crate::artifacts::{self, write_atomic};

pub const STATE_FILE: &str = "state.json";
pub const STATE_FORMAT: &str = "visagent-run";
pub const STATE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope {
    format: String,
    version: u32,
    digest: String,
    run: Value,
}

/// One directory per run holding `state.json` and its PNG artifacts.
///
/// Every save replaces `state.json` atomically, so a reader sees either the
/// previous or the new state. The envelope carries the digest of the run so
/// a damaged file is detected on load.
#[derive(Debug, Clone)]
pub struct RunStore {
    root: PathBuf,
}

impl RunStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, OrchestratorError> {
        let root = root.into();
        std::fs::create_dir_all(&root).map_err(|e| OrchestratorError::Io(format!("{}: {e}", root.display())))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join(run_id)
    }

    pub fn state_path(&self, run_id: &str) -> PathBuf {
        self.run_dir(run_id).join(STATE_FILE)
    }

    pub fn exists(&self, run_id: &str) -> bool {
        valid_id(run_id) && self.state_path(run_id).is_file()
    }

    pub fn save(&self, run: &PipelineRun) -> Result<(), OrchestratorError> {
        let env = Envelope {
            format: STATE_FORMAT.into(),
            version: STATE_VERSION,
            digest: run.digest(),
            run: serde_json::to_value(run).expect("run state serializes"),
        };
        let bytes = serde_json::to_vec_pretty(&env).expect("envelope serializes");
        write_atomic(&self.state_path(&run.run_id), &bytes).map_err(|e| OrchestratorError::Io(e.to_string()))
    }

    pub fn load(&self, run_id: &str) -> Result<PipelineRun, OrchestratorError> {
        if !self.exists(run_id) {
            return Err(OrchestratorError::UnknownRun(run_id.to_string()));
        }
        let path = self.state_path(run_id);
        let corrupt = |m: String| OrchestratorError::StoreCorrupt(format!("{}: {m}", path.display()));
        let bytes = std::fs::read(&path).map_err(|e| OrchestratorError::Io(format!("{}: {e}", path.display())))?;
        let env: Envelope = serde_json::from_slice(&bytes).map_err(|e| corrupt(e.to_string()))?;
        if env.format != STATE_FORMAT || env.version != STATE_VERSION {
            return Err(corrupt(format!("unsupported state document {} v{}", env.format, env.version)));
        }
        let run: PipelineRun = serde_json::from_value(env.run).map_err(|e| corrupt(e.to_string()))?;
        let found = run.digest();
        if found != env.digest {
            return Err(corrupt(format!("state digest {found} differs from recorded {}", env.digest)));
        }
        if run.run_id != run_id {
            return Err(corrupt(format!("state belongs to run `{}`", run.run_id)));
        }
        Ok(run)
    }

    /// Ids of every stored run, sorted.
    pub fn list(&self) -> Result<Vec<String>, OrchestratorError> {
        let mut ids = Vec::new();
        let entries =
            std::fs::read_dir(&self.root).map_err(|e| OrchestratorError::Io(format!("{}: {e}", self.root.display())))?;
        for entry in entries.flatten() {
            if let Some(id) = entry.file_name().to_str() {
                if self.exists(id) {
                    ids.push(id.to_string());
                }
            }
        }
        ids.sort();
        Ok(ids)
    }

    /// Checks every image the state refers to against its recorded digest.
    pub fn verify_artifacts(&self, run: &PipelineRun) -> Result<(), OrchestratorError> {
        let dir = self.run_dir(&run.run_id);
        let refs = run
            .scenes
            .iter()
            .flat_map(|s| {
                s.elements
                    .iter()
                    .map(|e| &e.image)
                    .chain(s.stitched.as_ref().map(|x| &x.image))
                    .chain(s.rendered.as_ref().map(|x| &x.image))
            })
            .chain(run.subjects.iter().map(|s| &s.image));
        for r in refs {
            artifacts::load_image(&dir, r).map_err(|e| OrchestratorError::StoreCorrupt(e.to_string()))?;
        }
        Ok(())
    }
}

/// Run ids double as directory names.
pub fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id.len() <= 128
        && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_cannot_escape_the_store() {
        assert!(valid_id("4f1c-aa_2"));
        for bad in ["", "..", "a/b", "a b", "x.json"] {
            assert!(!valid_id(bad), "{bad}");
        }
    }

    #[test]
    fn missing_run_is_unknown() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::open(dir.path()).unwrap();
        assert!(matches!(store.load("nope"), Err(OrchestratorError::UnknownRun(_))));
        assert!(matches!(store.load("../etc"), Err(OrchestratorError::UnknownRun(_))));
        assert!(store.list().unwrap().is_empty());
    }
}
