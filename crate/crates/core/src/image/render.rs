use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::codec;
use super::layout::Layout;
use super::locate::character_set;
use super::raster::Raster;
use super::stitch::StitchedImage;
use super::{ElementImage, ElementKind, ImageError};
use crate::backend::{BackendDescriptor, Capability, HashTokenEncoder, Journal, TokenEncoder};
use crate::digest::{derive_seed, json_digest};
use crate::events::Event;
use crate::saca::{
    rasterize_masks, AttentionConfig, DenoiserConfig, DenoiserWeights, GlobalBlendSchedule, RegionId, RegionTokenBundle,
    ToyDenoiser,
};
use crate::story::LayeredPrompts;
use crate::tensor::Matrix;

pub const RENDER_ROLE: &str = "scene_rendering";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RendererConfig {
    pub steps: usize,
    /// Denoising starts `guidance_start` steps before the end: the stitched
    /// image is noised to strength `guidance_start / steps`. Zero keeps the
    /// stitched latent unchanged at the start.
    pub guidance_start: usize,
    pub schedule: GlobalBlendSchedule,
    pub seed: u64,
    pub image_weight: f64,
    pub d_model: usize,
    pub heads: usize,
    pub latent_downscale: u32,
    /// Seed for the toy denoiser's random weights.
    pub weights_seed: u64,
}

impl Default for RendererConfig {
    fn default() -> Self {
        Self {
            steps: 30,
            guidance_start: 15,
            schedule: GlobalBlendSchedule::default_30(),
            seed: 0,
            image_weight: 1.0,
            d_model: 16,
            heads: 2,
            latent_downscale: 4,
            weights_seed: 0,
        }
    }
}

impl RendererConfig {
    /// Same settings with `steps` steps and the default λ values spread over
    /// three equal blocks.
    pub fn with_steps(mut self, steps: usize) -> Result<Self, ImageError> {
        self.schedule = GlobalBlendSchedule::thirds(steps, [0.1, 0.3, 0.5])?;
        self.guidance_start = self.guidance_start.min(steps);
        self.steps = steps;
        Ok(self)
    }

    pub fn validate(&self, canvas_width: u32, canvas_height: u32) -> Result<(), ImageError> {
        let bad = |m: String| Err(ImageError::Config(m));
        if self.steps == 0 {
            return bad("steps must be positive".into());
        }
        if self.schedule.total_steps() != self.steps {
            return bad(format!("schedule covers {} steps, renderer runs {}", self.schedule.total_steps(), self.steps));
        }
        if self.guidance_start > self.steps {
            return bad(format!("guidance_start {} exceeds steps {}", self.guidance_start, self.steps));
        }
        let f = self.latent_downscale;
        if f == 0 || canvas_width % (2 * f) != 0 || canvas_height % (2 * f) != 0 {
            return bad(format!("canvas {canvas_width}x{canvas_height} must be divisible by {}", 2 * f));
        }
        self.attention().validate()?;
        Ok(())
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig { d_model: self.d_model, heads: self.heads, image_weight: self.image_weight }
    }

    pub fn strength(&self) -> f64 {
        self.guidance_start as f64 / self.steps as f64
    }

    pub fn digest(&self) -> String {
        json_digest(self)
    }
}

/// Everything a renderer needs for one scene.
pub struct RenderInputs<'a> {
    pub stitched: &'a StitchedImage,
    pub prompts: &'a LayeredPrompts,
    pub elements: &'a [ElementImage],
    pub layouts: &'a [Layout],
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub pixels: Raster,
    pub lambda_trace: Vec<f64>,
}

pub trait SceneRenderer {
    fn descriptor(&self) -> BackendDescriptor;
    fn render(&mut self, inputs: &RenderInputs<'_>, config: &RendererConfig) -> Result<RenderOutput, ImageError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedScene {
    pub scene_index: usize,
    pub pixels: Raster,
    pub config_digest: String,
    pub lambda_trace: Vec<f64>,
}

/// Renderer built on [`ToyDenoiser`] and a hashing token encoder.
pub struct ToyRenderer {
    encoder: HashTokenEncoder,
    weights: Option<DenoiserWeights>,
    cached: Option<(AttentionConfig, u64, ToyDenoiser)>,
}

impl Default for ToyRenderer {
    fn default() -> Self {
        Self { encoder: HashTokenEncoder, weights: None, cached: None }
    }
}

impl ToyRenderer {
    /// Uses fixed denoiser weights instead of seeded random ones.
    pub fn with_weights(weights: DenoiserWeights) -> Self {
        Self { weights: Some(weights), ..Self::default() }
    }

    fn denoiser(&mut self, config: &RendererConfig) -> Result<&ToyDenoiser, ImageError> {
        let attention = config.attention();
        let fresh = !matches!(&self.cached, Some((a, s, _)) if *a == attention && *s == config.weights_seed);
        if fresh {
            let dc = DenoiserConfig { attention, latent_channels: codec::LATENT_CHANNELS, ..Default::default() };
            let den = match &self.weights {
                Some(w) => ToyDenoiser::from_weights(dc, w.clone())?,
                None => ToyDenoiser::new(dc, config.weights_seed)?,
            };
            self.cached = Some((attention, config.weights_seed, den));
        }
        Ok(&self.cached.as_ref().expect("just filled").2)
    }

    /// Token bundles for every region of the scene.
    pub fn bundles(&self, inputs: &RenderInputs<'_>, d: usize) -> Result<Vec<RegionTokenBundle>, ImageError> {
        let scene_index = inputs.prompts.scene_index;
        let bg = inputs
            .elements
            .iter()
            .find(|e| e.kind == ElementKind::Background)
            .ok_or_else(|| ImageError::MissingElement { scene_index, element: "bg".into() })?;
        let mut out = Vec::new();
        for fg in &inputs.prompts.fg_prompts {
            let el = inputs
                .elements
                .iter()
                .find(|e| e.character_id.as_deref() == Some(fg.character_id.as_str()))
                .ok_or_else(|| ImageError::MissingElement { scene_index, element: format!("fg_{}", fg.character_id) })?;
            out.push(RegionTokenBundle {
                region: RegionId::Character(fg.character_id.clone()),
                text_tokens: self.encoder.encode_text(&fg.prompt, d),
                image_tokens: Some(self.encoder.encode_image(&el.pixels, d)),
            });
        }
        out.push(RegionTokenBundle {
            region: RegionId::Background,
            text_tokens: self.encoder.encode_text(&inputs.prompts.bg_prompt, d),
            image_tokens: Some(self.encoder.encode_image(&bg.pixels, d)),
        });
        out.push(RegionTokenBundle {
            region: RegionId::Global,
            text_tokens: self.encoder.encode_text(&inputs.prompts.global_prompt, d),
            image_tokens: None,
        });
        Ok(out)
    }
}

impl SceneRenderer for ToyRenderer {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor::mock("toy-saca-renderer", Capability::Rendering)
    }

    fn render(&mut self, inputs: &RenderInputs<'_>, config: &RendererConfig) -> Result<RenderOutput, ImageError> {
        let f = config.latent_downscale;
        let z0 = codec::encode(&inputs.stitched.pixels, f);
        let masks = rasterize_masks(inputs.layouts, z0.height, z0.width)?;
        let bundles = self.bundles(inputs, config.d_model)?;
        let scene = (inputs.prompts.scene_index as u64).to_le_bytes();
        let seed = derive_seed(config.seed, &[b"render", &scene]);
        let den = self.denoiser(config)?;
        let t_start = den.schedule().start_timestep(config.strength());
        let initial = if config.guidance_start == 0 {
            z0
        } else {
            let noise = Matrix::randn(z0.cells(), z0.channels(), 1.0, seed);
            den.schedule().add_noise(&z0, t_start, &noise)
        };
        let out = den.denoise(&initial, &bundles, &masks, &config.schedule, config.steps, t_start, seed)?;
        Ok(RenderOutput { pixels: codec::decode(&out.latent, f), lambda_trace: out.lambda_trace })
    }
}

/// Renders one scene from its stitched guidance image.
pub fn render_scene(
    inputs: &RenderInputs<'_>,
    renderer: &mut dyn SceneRenderer,
    config: &RendererConfig,
    journal: &mut Journal,
) -> Result<RenderedScene, ImageError> {
    let scene_index = inputs.prompts.scene_index;
    if inputs.stitched.scene_index != scene_index || inputs.layouts.iter().any(|l| l.scene_index != scene_index) {
        return Err(ImageError::Mismatch("render inputs belong to different scenes".into()));
    }
    let wanted: alloc::collections::BTreeSet<String> =
        inputs.prompts.fg_prompts.iter().map(|f| f.character_id.clone()).collect();
    if character_set(inputs.layouts) != wanted || inputs.layouts.len() != wanted.len() {
        return Err(ImageError::Mismatch("layouts do not match the scene's characters".into()));
    }
    let (w, h) = (inputs.stitched.pixels.width, inputs.stitched.pixels.height);
    config.validate(w, h)?;
    let config_digest = config.digest();
    let name = renderer.descriptor().name;
    let input_digest = json_digest(&json!({
        "stitched": inputs.stitched.pixels.digest_hex(),
        "prompt": inputs.prompts.global_prompt,
        "layouts": inputs.layouts,
        "config": config_digest,
    }));
    let started = journal.now();
    let result = renderer.render(inputs, config);
    let out = match &result {
        Ok(o) => o.pixels.digest_hex(),
        Err(e) => json_digest(&alloc::string::ToString::to_string(e)),
    };
    journal.record(&name, RENDER_ROLE, input_digest, out.clone(), started, 0);
    let output = result?;
    if output.pixels.width != w || output.pixels.height != h {
        return Err(ImageError::Mismatch(format!(
            "renderer returned {}x{} for a {w}x{h} canvas",
            output.pixels.width, output.pixels.height
        )));
    }
    journal.push(Event::Rendered { scene_index, config_digest: config_digest.clone(), digest: out });
    Ok(RenderedScene { scene_index, pixels: output.pixels, config_digest, lambda_trace: output.lambda_trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{BoxSegmenter, ProceduralImageGenerator};
    use crate::image::layout::BBox;
    use crate::image::{generate_scene_elements, stitch, ImageModuleConfig, SubjectStorage};
    use crate::story::FgPrompt;
    use alloc::vec;

    fn scene() -> (LayeredPrompts, Vec<ElementImage>, Vec<Layout>, StitchedImage) {
        let fg = vec![FgPrompt { character_id: "jack".into(), prompt: "a boy in a blue coat, waving".into() }];
        let p = LayeredPrompts::new(0, "a farmhouse at dawn", fg, ", ");
        let mut j = Journal::new();
        let els = generate_scene_elements(
            &p,
            &mut SubjectStorage::new(),
            &mut ProceduralImageGenerator::default(),
            &ImageModuleConfig::default(),
            &mut j,
        )
        .unwrap();
        let layouts =
            vec![Layout { scene_index: 0, character_id: "jack".into(), bbox: BBox::new(0.3, 0.3, 0.7, 1.0), z_order: 0 }];
        let s = stitch(&els[0], &els[1..], &layouts, &mut BoxSegmenter::default(), &mut j).unwrap();
        (p, els, layouts, s)
    }

    #[test]
    fn renders_with_full_trace() {
        let (p, els, layouts, s) = scene();
        let inputs = RenderInputs { stitched: &s, prompts: &p, elements: &els, layouts: &layouts };
        let mut j = Journal::new();
        let mut r = ToyRenderer::default();
        let out = render_scene(&inputs, &mut r, &RendererConfig::default(), &mut j).unwrap();
        assert_eq!((out.pixels.width, out.pixels.height), (64, 64));
        assert_eq!(out.lambda_trace.len(), 30);
        assert_eq!(out.config_digest, RendererConfig::default().digest());
        let again = render_scene(&inputs, &mut ToyRenderer::default(), &RendererConfig::default(), &mut j).unwrap();
        assert_eq!(again, out);
        assert_eq!(j.calls_for(RENDER_ROLE), 2);
    }

    #[test]
    fn zero_guidance_start_keeps_trace_length() {
        let (p, els, layouts, s) = scene();
        let inputs = RenderInputs { stitched: &s, prompts: &p, elements: &els, layouts: &layouts };
        let c = RendererConfig { guidance_start: 0, ..Default::default() };
        let out = render_scene(&inputs, &mut ToyRenderer::default(), &c, &mut Journal::new()).unwrap();
        assert_eq!(out.lambda_trace.len(), 30);
    }

    #[test]
    fn config_validation() {
        let c = RendererConfig { guidance_start: 31, ..Default::default() };
        assert!(c.validate(64, 64).is_err());
        assert!(RendererConfig::default().validate(60, 64).is_err());
        let c = RendererConfig::default().with_steps(20).unwrap();
        assert!(c.validate(64, 64).is_ok());
        assert_eq!(c.schedule.total_steps(), 20);
        let c = RendererConfig { steps: 20, ..Default::default() };
        assert!(c.validate(64, 64).is_err());
    }

    #[test]
    fn mismatched_layouts_are_rejected() {
        let (p, els, _, s) = scene();
        let inputs = RenderInputs { stitched: &s, prompts: &p, elements: &els, layouts: &[] };
        let r = render_scene(&inputs, &mut ToyRenderer::default(), &RendererConfig::default(), &mut Journal::new());
        assert!(matches!(r, Err(ImageError::Mismatch(_))));
    }
}
