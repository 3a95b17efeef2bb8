//! TIS, FID and CCS metrics, plus the benchmark document format.
//!
//! Metrics only ever see embeddings or features. Pixels reach them through an
//! [`EmbeddingBackend`], which is the single bridge between images and numbers.
//!
//! Conventions used by [`evaluate_scenes`]:
//!
//! - TIS pairs each rendered scene with its global prompt.
//! - CCS crops every character from the rendered scene using its layout box.
//!   Characters seen in fewer than two scenes are left out. With no character
//!   left, CCS is absent from the report.
//! - FID compares rendered scenes against the stitched images they were
//!   rendered from. Each image contributes its four quadrant tiles as samples.

pub mod benchmark;
mod metrics;

pub use benchmark::{
    parse_benchmark, BenchmarkCase, BenchmarkError, BenchmarkFg, BenchmarkScene, FieldMapping, BENCHMARK_FORMAT,
    BENCHMARK_VERSION,
};
pub use metrics::{
    ccs, ccs_from_embeddings, cosine, fid, fid_images, moments, quadrant_tiles, sqrtm_psd, tis, tis_from_embeddings,
};

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendDescriptor, BackendError, EmbeddingBackend};
use crate::image::raster::Raster;
use crate::image::Layout;

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MetricError {
    #[error("no samples to score")]
    EmptyInput,
    #[error("{images} image(s) but {prompts} prompt(s)")]
    LengthMismatch { images: usize, prompts: usize },
    #[error("character `{character_id}` has {count} crop(s), at least 2 are needed")]
    InsufficientCrops { character_id: String, count: usize },
    #[error("feature sets need at least 2 samples, got {count}")]
    TooFewSamples { count: usize },
    #[error("feature width {found} differs from {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("covariance has eigenvalue {eigenvalue} below tolerance")]
    DegenerateCovariance { eigenvalue: f64 },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleCounts {
    pub tis_pairs: usize,
    pub fid_samples_rendered: usize,
    pub fid_samples_reference: usize,
    pub ccs_characters: usize,
    pub ccs_crops: usize,
}

/// Scores of one run. A metric that could not be computed is `None` and its
/// reason is listed in `absent`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub tis: Option<f64>,
    pub fid: Option<f64>,
    pub ccs: Option<f64>,
    pub samples: SampleCounts,
    pub backends: Vec<BackendDescriptor>,
    #[serde(default)]
    pub absent: BTreeMap<String, String>,
}

impl MetricReport {
    /// Checks the range of every present score.
    pub fn is_well_formed(&self) -> bool {
        let pct = |v: Option<f64>| v.map_or(true, |v| (0.0..=100.0).contains(&v));
        pct(self.tis) && pct(self.ccs) && self.fid.map_or(true, |v| v >= 0.0 && v.is_finite())
    }
}

/// What the metrics need from one scene.
#[derive(Debug, Clone, Copy)]
pub struct EvalScene<'a> {
    pub scene_index: usize,
    pub prompt: &'a str,
    pub rendered: &'a Raster,
    pub stitched: &'a Raster,
    pub layouts: &'a [Layout],
}

/// Crops of each character, in scene order, cut by layout box.
pub fn character_crops(scenes: &[EvalScene<'_>]) -> BTreeMap<String, Vec<Raster>> {
    let mut out: BTreeMap<String, Vec<Raster>> = BTreeMap::new();
    for s in scenes {
        for l in s.layouts {
            let rect = l.bbox.cells(s.rendered.width, s.rendered.height);
            let crop = s.rendered.crop(rect);
            if crop.width > 0 && crop.height > 0 {
                out.entry(l.character_id.clone()).or_default().push(crop);
            }
        }
    }
    out
}

/// Computes every metric that the scenes allow.
///
/// Errors other than too few samples are propagated.
pub fn evaluate_scenes(
    scenes: &[EvalScene<'_>],
    embedder: &mut dyn EmbeddingBackend,
    extractor: &mut dyn EmbeddingBackend,
) -> Result<MetricReport, MetricError> {
    let mut report = MetricReport {
        tis: None,
        fid: None,
        ccs: None,
        samples: SampleCounts::default(),
        backends: alloc::vec![embedder.descriptor(), extractor.descriptor()],
        absent: BTreeMap::new(),
    };
    if scenes.is_empty() {
        return Err(MetricError::EmptyInput);
    }

    let images: Vec<&Raster> = scenes.iter().map(|s| s.rendered).collect();
    let prompts: Vec<&str> = scenes.iter().map(|s| s.prompt).collect();
    report.tis = Some(tis(&images, &prompts, embedder)?);
    report.samples.tis_pairs = scenes.len();

    let stitched: Vec<&Raster> = scenes.iter().map(|s| s.stitched).collect();
    report.fid = Some(fid_images(&images, &stitched, extractor)?);
    report.samples.fid_samples_rendered = images.len() * 4;
    report.samples.fid_samples_reference = stitched.len() * 4;

    let mut crops = character_crops(scenes);
    let single: Vec<String> = crops.iter().filter(|(_, v)| v.len() < 2).map(|(k, _)| k.clone()).collect();
    for id in &single {
        crops.remove(id);
    }
    if crops.is_empty() {
        report
            .absent
            .insert("ccs".into(), format!("no character appears in two or more scenes ({} scene(s))", scenes.len()));
    } else {
        report.samples.ccs_characters = crops.len();
        report.samples.ccs_crops = crops.values().map(Vec::len).sum();
        report.ccs = Some(ccs(&crops, embedder)?);
    }
    Ok(report)
}
