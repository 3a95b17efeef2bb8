use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::layout::Layout;
use super::locate::by_z_order;
use super::raster::{Mask, PixelRect, Raster};
use super::{ElementImage, ElementKind, ImageError};
use crate::backend::{Journal, SegmentationBackend};
use crate::digest::json_digest;
use crate::events::Event;

pub const SEGMENTATION_ROLE: &str = "segmentation";

/// Composite guidance image plus per-pixel provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StitchedImage {
    pub scene_index: usize,
    pub pixels: Raster,
    /// Character ids bottom to top.
    pub layers: Vec<String>,
    /// Canvas-sized alpha of each layer, aligned with `layers`.
    pub alphas: Vec<Mask>,
    /// Per pixel: 0 for background, `k` for `layers[k - 1]`.
    pub provenance: Vec<u16>,
    /// Characters whose segmentation came back empty and were pasted as
    /// full rectangles.
    pub fallback_masks: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance<'a> {
    Background,
    Character(&'a str),
}

impl StitchedImage {
    pub fn provenance_at(&self, x: u32, y: u32) -> Provenance<'_> {
        match self.provenance[(y * self.pixels.width + x) as usize] {
            0 => Provenance::Background,
            k => Provenance::Character(&self.layers[k as usize - 1]),
        }
    }
}

/// Largest `w x h` with the source aspect ratio that fits in the box, never
/// smaller than one pixel.
pub fn fit_size(src_w: u32, src_h: u32, box_w: u32, box_h: u32) -> (u32, u32) {
    let scale = (box_w as f64 / src_w as f64).min(box_h as f64 / src_h as f64);
    let w = libm::round(src_w as f64 * scale).clamp(1.0, box_w as f64) as u32;
    let h = libm::round(src_h as f64 * scale).clamp(1.0, box_h as f64) as u32;
    (w, h)
}

/// Pastes every foreground onto the background in ascending z-order.
///
/// Each subject is scaled to fit its box (aspect kept, anchored bottom
/// centre) and blended through its segmentation mask; an empty mask falls back
/// to the whole pasted rectangle. Pixels outside every pasted region keep the
/// background value.
pub fn stitch(
    background: &ElementImage,
    foregrounds: &[ElementImage],
    layouts: &[Layout],
    masker: &mut dyn SegmentationBackend,
    journal: &mut Journal,
) -> Result<StitchedImage, ImageError> {
    let scene_index = background.scene_index;
    if background.kind != ElementKind::Background {
        return Err(ImageError::Mismatch("first element must be the background".into()));
    }
    if layouts.len() != foregrounds.len() {
        return Err(ImageError::Mismatch("one layout per foreground element is required".into()));
    }
    let (w, h) = (background.pixels.width, background.pixels.height);
    let mut canvas = background.pixels.clone();
    let mut layers = Vec::new();
    let mut alphas = Vec::new();
    let mut fallback_masks = Vec::new();
    let name = masker.descriptor().name;

    for layout in by_z_order(layouts) {
        let fg = foregrounds
            .iter()
            .find(|f| f.character_id.as_deref() == Some(layout.character_id.as_str()))
            .ok_or_else(|| ImageError::MissingElement { scene_index, element: alloc::format!("fg_{}", layout.character_id) })?;
        let rect = layout.bbox.cells(w, h);
        let mut alpha = Mask::zeros(w, h);
        if !rect.is_empty() {
            let started = journal.now();
            let mask = masker.subject_mask(&fg.pixels, &layout.character_id, fg.pixels.full_rect());
            let out = match &mask {
                Ok(m) => json_digest(&m.data),
                Err(e) => json_digest(&e.message),
            };
            journal.record(&name, SEGMENTATION_ROLE, fg.pixels.digest_hex(), out, started, 0);
            let mut mask = mask?;
            if mask.width != fg.pixels.width || mask.height != fg.pixels.height {
                return Err(ImageError::Mismatch("segmentation mask size differs from its image".into()));
            }
            if mask.is_empty() {
                fallback_masks.push(layout.character_id.clone());
                mask = Mask::rect(mask.width, mask.height, fg.pixels.full_rect());
            }
            let (tw, th) = fit_size(fg.pixels.width, fg.pixels.height, rect.width(), rect.height());
            let ox = rect.x0 + (rect.width() - tw) / 2;
            let oy = rect.y1 - th;
            let img = fg.pixels.resize_nearest(tw, th);
            let m = mask.resize_nearest(tw, th);
            let placed = PixelRect { x0: ox, y0: oy, x1: ox + tw, y1: oy + th };
            for y in placed.y0..placed.y1 {
                for x in placed.x0..placed.x1 {
                    let a = m.get(x - ox, y - oy).clamp(0.0, 1.0);
                    if a <= 0.0 {
                        continue;
                    }
                    alpha.set(x, y, a);
                    let src = img.get(x - ox, y - oy);
                    let dst = canvas.get(x, y);
                    let mix = |s: u8, d: u8| {
                        if a >= 1.0 {
                            s
                        } else {
                            libm::roundf(a * s as f32 + (1.0 - a) * d as f32).clamp(0.0, 255.0) as u8
                        }
                    };
                    canvas.set(x, y, [mix(src[0], dst[0]), mix(src[1], dst[1]), mix(src[2], dst[2])]);
                }
            }
        }
        layers.push(layout.character_id.clone());
        alphas.push(alpha);
    }

    // Provenance: the layer with the largest composite weight, ties to the
    // layer on top.
    let mut provenance = vec![0u16; (w * h) as usize];
    for (i, p) in provenance.iter_mut().enumerate() {
        let mut remaining = 1.0f32;
        let mut best = (0.0f32, 0u16);
        for k in (0..alphas.len()).rev() {
            let a = alphas[k].data[i];
            let weight = a * remaining;
            if weight > best.0 {
                best = (weight, k as u16 + 1);
            }
            remaining *= 1.0 - a;
        }
        *p = if remaining > best.0 { 0 } else { best.1 };
    }

    let stitched = StitchedImage { scene_index, pixels: canvas, layers, alphas, provenance, fallback_masks };
    journal.push(Event::Stitched {
        scene_index,
        fallback_masks: stitched.fallback_masks.clone(),
        digest: stitched.pixels.digest_hex(),
    });
    Ok(stitched)
}
