//! Backend registry: maps configured names onto backend instances.

use visagent_core::backend::{
    BoxSegmenter, EmbeddingBackend, GenerativeTextBackend, HashEmbedder, ImageGeneratorBackend, MockLayoutBackend,
    MultimodalBackend, ProceduralImageGenerator, SegmentationBackend, TextModelBackend, Transcript, TranscriptBackend,
};
use visagent_core::image::{SceneRenderer, ToyRenderer};

use crate::config::{BackendSelection, ConfigError};
use crate::hosted::{HostedChatBackend, HostedImageBackend};

pub const TEXT_BACKENDS: &[&str] = &["generative", "transcript", "hosted-chat"];
pub const IMAGE_BACKENDS: &[&str] = &["procedural", "hosted-image"];
pub const LAYOUT_BACKENDS: &[&str] = &["procedural"];
pub const SEGMENTER_BACKENDS: &[&str] = &["box"];
pub const EMBEDDER_BACKENDS: &[&str] = &["hash"];
pub const RENDERER_BACKENDS: &[&str] = &["toy"];

/// Every backend one run talks to.
pub struct RunBackends {
    pub text: Box<dyn TextModelBackend + Send>,
    pub layout: Box<dyn MultimodalBackend + Send>,
    pub generator: Box<dyn ImageGeneratorBackend + Send>,
    pub segmenter: Box<dyn SegmentationBackend + Send>,
    pub embedder: Box<dyn EmbeddingBackend + Send>,
    /// Feature extractor for FID.
    pub features: Box<dyn EmbeddingBackend + Send>,
    pub renderer: Box<dyn SceneRenderer + Send>,
}

fn check(capability: &str, name: &str, known: &[&str]) -> Result<(), ConfigError> {
    if known.contains(&name) {
        Ok(())
    } else {
        Err(ConfigError::new(format!("unknown {capability} backend `{name}` (known: {})", known.join(", "))))
    }
}

/// Checks names only. Credentials and files are checked by [`build`].
pub fn check_selection(sel: &BackendSelection) -> Result<(), ConfigError> {
    check("text", &sel.text, TEXT_BACKENDS)?;
    check("image", &sel.image, IMAGE_BACKENDS)?;
    check("layout", &sel.layout, LAYOUT_BACKENDS)?;
    check("segmenter", &sel.segmenter, SEGMENTER_BACKENDS)?;
    check("embedder", &sel.embedder, EMBEDDER_BACKENDS)?;
    check("features", &sel.features, EMBEDDER_BACKENDS)?;
    check("renderer", &sel.renderer, RENDERER_BACKENDS)?;
    if sel.text == "transcript" && sel.transcript.is_none() {
        return Err(ConfigError::new("text backend `transcript` needs `backends.transcript`"));
    }
    Ok(())
}

pub fn load_transcript(path: &std::path::Path) -> Result<Transcript, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::new(format!("{}: {e}", path.display())))?;
    Transcript::from_json(&text).map_err(|e| ConfigError::new(format!("{}: {e}", path.display())))
}

pub fn build_text(sel: &BackendSelection) -> Result<Box<dyn TextModelBackend + Send>, ConfigError> {
    Ok(match sel.text.as_str() {
        "generative" => Box::new(GenerativeTextBackend),
        "transcript" => {
            let path = sel.transcript.as_deref().ok_or_else(|| ConfigError::new("no transcript path"))?;
            Box::new(TranscriptBackend::new(load_transcript(path)?, sel.transcript_mode))
        }
        "hosted-chat" => Box::new(HostedChatBackend::from_env()?),
        other => return Err(ConfigError::new(format!("unknown text backend `{other}`"))),
    })
}

pub fn build_image(name: &str) -> Result<Box<dyn ImageGeneratorBackend + Send>, ConfigError> {
    Ok(match name {
        "procedural" => Box::new(ProceduralImageGenerator::default()),
        "hosted-image" => Box::new(HostedImageBackend::from_env()?),
        other => return Err(ConfigError::new(format!("unknown image backend `{other}`"))),
    })
}

pub fn build(sel: &BackendSelection) -> Result<RunBackends, ConfigError> {
    check_selection(sel)?;
    Ok(RunBackends {
        text: build_text(sel)?,
        layout: Box::new(MockLayoutBackend::default()),
        generator: build_image(&sel.image)?,
        segmenter: Box::new(BoxSegmenter::default()),
        embedder: Box::new(HashEmbedder::default()),
        features: Box::new(HashEmbedder::default()),
        renderer: Box::new(ToyRenderer::default()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_selection_builds() {
        let b = build(&BackendSelection::default()).unwrap();
        assert_eq!(b.renderer.descriptor().name, "toy-saca-renderer");
        assert!(b.text.descriptor().deterministic);
    }

    #[test]
    fn transcript_needs_a_readable_file() {
        let mut sel = BackendSelection { text: "transcript".into(), ..Default::default() };
        assert!(check_selection(&sel).is_err());
        sel.transcript = Some("/nonexistent/t.json".into());
        check_selection(&sel).unwrap();
        assert!(build(&sel).is_err());
    }

    #[test]
    fn unknown_names_list_alternatives() {
        let sel = BackendSelection { renderer: "sd15".into(), ..Default::default() };
        let e = check_selection(&sel).unwrap_err();
        assert!(e.0.contains("sd15") && e.0.contains("toy"));
    }
}
