use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::{BackendDescriptor, BackendError, Capability, GenerationRequest, HashTokenEncoder, ImageGeneratorBackend, TokenEncoder};
use crate::digest::sha256;
use crate::image::raster::Raster;
use crate::image::ElementKind;
use crate::tensor::Matrix;

/// Width of the reference tokens returned by `encode_reference`.
pub const REFERENCE_TOKEN_DIM: usize = 16;

/// Draws images from a hash of (prompt, seed, kind).
///
/// Backgrounds are a vertical two-colour gradient with a faint checker.
/// Foregrounds are a two-tone figure (head and body ellipses) on white.
/// When a reference image is given, the figure reuses the colours sampled
/// from the reference, so a character keeps its look across scenes.
#[derive(Debug, Clone, Default)]
pub struct ProceduralImageGenerator {
    fail_on: Vec<String>,
    /// Prompt, seed and reference digest of each request, in call order.
    pub log: Vec<(String, u64, Option<String>)>,
}

fn toned(c: [u8; 3]) -> [u8; 3] {
    // Keep figure colours clearly away from the white canvas.
    c.map(|v| 20 + (v as u16 * 180 / 255) as u8)
}

pub(crate) fn figure_geometry(w: u32, h: u32) -> (f64, f64, f64, f64, f64) {
    let cx = w as f64 / 2.0;
    let head_r = (w.min(h) as f64 * 0.2).max(1.0);
    let head_cy = head_r + 1.0;
    let body_top = head_cy + head_r * 0.8;
    let body_cy = (body_top + h as f64 - 1.0) / 2.0;
    (cx, head_cy, head_r, body_cy, (h as f64 - 1.0 - body_top) / 2.0)
}

impl ProceduralImageGenerator {
    /// Fails every request whose prompt contains `needle`.
    pub fn failing_on(mut self, needle: impl Into<String>) -> Self {
        self.fail_on.push(needle.into());
        self
    }

    fn background(h: &[u8; 32], width: u32, height: u32) -> Raster {
        let top = [h[0], h[1], h[2]];
        let bottom = [h[3], h[4], h[5]];
        let cell = 4 + (h[6] % 5) as u32;
        let mut r = Raster::new(width, height);
        for y in 0..height {
            let t = if height > 1 { y as f64 / (height - 1) as f64 } else { 0.0 };
            for x in 0..width {
                let mut px = [0u8; 3];
                for c in 0..3 {
                    let v = top[c] as f64 * (1.0 - t) + bottom[c] as f64 * t;
                    let shade = if ((x / cell) + (y / cell)) % 2 == 0 { 0.0 } else { -12.0 };
                    px[c] = libm::round(v + shade).clamp(0.0, 255.0) as u8;
                }
                r.set(x, y, px);
            }
        }
        r
    }

    fn figure(head: [u8; 3], body: [u8; 3], width: u32, height: u32) -> Raster {
        let mut r = Raster::filled(width, height, [255, 255, 255]);
        let (cx, head_cy, head_r, body_cy, body_ry) = figure_geometry(width, height);
        let body_rx = width as f64 * 0.42;
        for y in 0..height {
            for x in 0..width {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let sq = |v: f64| v * v;
                let dh = sq((px - cx) / head_r) + sq((py - head_cy) / head_r);
                let db = sq((px - cx) / body_rx) + sq((py - body_cy) / body_ry.max(1.0));
                if dh <= 1.0 {
                    r.set(x, y, head);
                } else if db <= 1.0 {
                    r.set(x, y, body);
                }
            }
        }
        r
    }
}

impl ImageGeneratorBackend for ProceduralImageGenerator {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor::mock("procedural-image", Capability::ImageGeneration)
    }

    fn generate(&mut self, req: &GenerationRequest<'_>) -> Result<Raster, BackendError> {
        self.log.push((req.prompt.into(), req.seed, req.reference.map(|r| r.digest.clone())));
        if let Some(n) = self.fail_on.iter().find(|n| req.prompt.contains(n.as_str())) {
            return Err(BackendError::new("procedural-image", format!("refused prompt containing `{n}`")));
        }
        if req.width == 0 || req.height == 0 {
            return Err(BackendError::new("procedural-image", "empty canvas requested"));
        }
        let mut key = Vec::with_capacity(req.prompt.len() + 10);
        key.extend_from_slice(req.prompt.as_bytes());
        key.push(0);
        key.extend_from_slice(&req.seed.to_le_bytes());
        key.push(match req.kind {
            ElementKind::Background => 0,
            ElementKind::Foreground => 1,
        });
        let h = sha256(&key);
        Ok(match req.kind {
            ElementKind::Background => Self::background(&h, req.width, req.height),
            ElementKind::Foreground => {
                let (head, body) = match req.reference {
                    Some(r) => {
                        let img = &r.image;
                        let (cx, head_cy, _, body_cy, _) = figure_geometry(img.width, img.height);
                        (img.get(cx as u32, head_cy as u32), img.get(cx as u32, body_cy as u32))
                    }
                    None => (toned([h[0], h[1], h[2]]), toned([h[3], h[4], h[5]])),
                };
                Self::figure(head, body, req.width, req.height)
            }
        })
    }

    fn encode_reference(&mut self, image: &Raster) -> Result<Matrix, BackendError> {
        Ok(HashTokenEncoder.encode_image(image, REFERENCE_TOKEN_DIM))
    }
}
