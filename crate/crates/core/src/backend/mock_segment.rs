use alloc::string::String;
use alloc::vec::Vec;

use super::{BackendDescriptor, BackendError, Capability, SegmentationBackend};
use crate::image::raster::{Mask, PixelRect, Raster};

/// Marks every pixel inside the box that is not near-white. Foreground
/// images from the procedural generator sit on a white canvas, so this
/// recovers the subject exactly.
#[derive(Debug, Clone)]
pub struct BoxSegmenter {
    /// Channel value at or above which all three channels count as white.
    pub white_level: u8,
    empty_labels: Vec<String>,
}

impl Default for BoxSegmenter {
    fn default() -> Self {
        Self { white_level: 245, empty_labels: Vec::new() }
    }
}

impl BoxSegmenter {
    /// Returns an all-zero mask for `label`, as a segmenter that finds nothing.
    pub fn empty_for(mut self, label: impl Into<String>) -> Self {
        self.empty_labels.push(label.into());
        self
    }
}

impl SegmentationBackend for BoxSegmenter {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor::mock("box-segmenter", Capability::Segmentation)
    }

    fn subject_mask(&mut self, image: &Raster, label: &str, bbox: PixelRect) -> Result<Mask, BackendError> {
        let mut m = Mask::zeros(image.width, image.height);
        if label.trim().is_empty() || self.empty_labels.iter().any(|l| l == label) {
            return Ok(m);
        }
        let r = bbox.clamp_to(image.width, image.height);
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                if image.get(x, y).iter().any(|c| *c < self.white_level) {
                    m.set(x, y, 1.0);
                }
            }
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn masks_non_white_inside_box() {
        let mut img = Raster::filled(4, 4, [255, 255, 255]);
        img.set(1, 1, [0, 0, 0]);
        img.set(3, 3, [0, 0, 0]);
        let mut s = BoxSegmenter::default();
        let m = s.subject_mask(&img, "jack", PixelRect { x0: 0, y0: 0, x1: 3, y1: 3 }).unwrap();
        assert_eq!(m.get(1, 1), 1.0);
        assert_eq!(m.get(3, 3), 0.0);
        assert_eq!(m.data.iter().sum::<f32>(), 1.0);
        assert!(s.subject_mask(&img, "", img.full_rect()).unwrap().is_empty());
        let mut s = BoxSegmenter::default().empty_for("jack");
        assert!(s.subject_mask(&img, "jack", img.full_rect()).unwrap().is_empty());
    }
}
