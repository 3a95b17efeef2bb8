use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::{BackendDescriptor, BackendError, Capability, EmbedInput, EmbeddingBackend};
use crate::digest::{fnv1a, mix64};
use crate::image::raster::Raster;
use crate::tensor::Matrix;

fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    } else if let Some(first) = v.first_mut() {
        *first = 1.0;
    }
    v
}

/// Signed feature hashing for text, coarse colour layout for images.
///
/// Text: every lower-cased word adds ±1 to four hashed coordinates.
/// Images: mean colour of each cell of a 4x4 grid, centred on mid-grey,
/// padded with zeros to `dim`. Both are L2-normalized.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self { dim: 64 }
    }
}

impl HashEmbedder {
    pub fn text(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for w in text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            let h = fnv1a(w.to_lowercase().as_bytes());
            for k in 0..4u64 {
                let x = mix64(h ^ k.wrapping_mul(0x9e37_79b9));
                let sign = if x >> 63 == 0 { 1.0 } else { -1.0 };
                v[(x % self.dim as u64) as usize] += sign;
            }
        }
        normalize(v)
    }

    pub fn image(&self, image: &Raster) -> Vec<f64> {
        let mut v = vec![0.0; self.dim.max(48)];
        let (w, h) = (image.width.max(1), image.height.max(1));
        let mut counts = [0u32; 16];
        for y in 0..image.height {
            for x in 0..image.width {
                let cell = ((y * 4 / h) * 4 + x * 4 / w) as usize;
                counts[cell] += 1;
                let p = image.get(x, y);
                for c in 0..3 {
                    v[cell * 3 + c] += p[c] as f64 / 255.0 - 0.5;
                }
            }
        }
        for (cell, n) in counts.iter().enumerate() {
            if *n > 0 {
                for c in 0..3 {
                    v[cell * 3 + c] /= *n as f64;
                }
            }
        }
        v.truncate(self.dim);
        normalize(v)
    }
}

impl EmbeddingBackend for HashEmbedder {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor::mock("hash-embedder", Capability::Embedding)
    }

    fn embed(&mut self, input: EmbedInput<'_>) -> Result<Vec<f64>, BackendError> {
        Ok(match input {
            EmbedInput::Text(t) => self.text(t),
            EmbedInput::Image(r) => self.image(r),
        })
    }
}

/// Two unit vectors in `dim` dimensions whose cosine is exactly `cosine`
/// (up to rounding), built by Gram-Schmidt from seeded Gaussian draws.
pub fn unit_pair(cosine: f64, dim: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    assert!(dim >= 2, "need two dimensions");
    let u = normalize(Matrix::randn(1, dim, 1.0, seed).data);
    let r = Matrix::randn(1, dim, 1.0, mix64(seed)).data;
    let dot: f64 = r.iter().zip(&u).map(|(a, b)| a * b).sum();
    let w = normalize(r.iter().zip(&u).map(|(a, b)| a - dot * b).collect());
    let s = libm::sqrt((1.0 - cosine * cosine).max(0.0));
    let v = u.iter().zip(&w).map(|(a, b)| cosine * a + s * b).collect();
    (u, v)
}

/// Returns preset vectors keyed by input digest.
#[derive(Debug, Clone, Default)]
pub struct ScriptedEmbedder {
    vectors: BTreeMap<String, Vec<f64>>,
}

impl ScriptedEmbedder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, input: EmbedInput<'_>, vector: Vec<f64>) -> &mut Self {
        self.vectors.insert(input.digest(), vector);
        self
    }
}

impl EmbeddingBackend for ScriptedEmbedder {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor::mock("scripted-embedder", Capability::Embedding)
    }

    fn embed(&mut self, input: EmbedInput<'_>) -> Result<Vec<f64>, BackendError> {
        self.vectors
            .get(&input.digest())
            .cloned()
            .ok_or_else(|| BackendError::new("scripted-embedder", format!("no vector for input {}", input.digest())))
    }
}
