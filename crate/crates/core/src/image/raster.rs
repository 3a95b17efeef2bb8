//! RGB rasters and soft masks.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::digest::sha256;

/// 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Raster {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn new(width: u32, height: u32) -> Self {
        Self::filled(width, height, [0, 0, 0])
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let n = width as usize * height as usize;
        let mut data = Vec::with_capacity(n * 3);
        for _ in 0..n {
            data.extend_from_slice(&rgb);
        }
        Self { width, height, data }
    }

    pub fn from_raw(width: u32, height: u32, data: Vec<u8>) -> Option<Self> {
        (data.len() == width as usize * height as usize * 3).then_some(Self { width, height, data })
    }

    #[inline]
    fn idx(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * 3
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = self.idx(x, y);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = self.idx(x, y);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn full_rect(&self) -> PixelRect {
        PixelRect { x0: 0, y0: 0, x1: self.width, y1: self.height }
    }

    /// Digest over dimensions and pixel bytes.
    pub fn digest(&self) -> [u8; 32] {
        let mut buf = Vec::with_capacity(8 + self.data.len());
        buf.extend_from_slice(&self.width.to_le_bytes());
        buf.extend_from_slice(&self.height.to_le_bytes());
        buf.extend_from_slice(&self.data);
        sha256(&buf)
    }

    pub fn digest_hex(&self) -> String {
        hex::encode(self.digest())
    }

    pub fn crop(&self, rect: PixelRect) -> Raster {
        let rect = rect.clamp_to(self.width, self.height);
        let mut out = Raster::new(rect.width(), rect.height());
        for y in rect.y0..rect.y1 {
            for x in rect.x0..rect.x1 {
                out.set(x - rect.x0, y - rect.y0, self.get(x, y));
            }
        }
        out
    }

    /// Nearest-neighbour resize (pixel-centre sampling).
    pub fn resize_nearest(&self, width: u32, height: u32) -> Raster {
        let mut out = Raster::new(width, height);
        for y in 0..height {
            let sy = nearest(y, height, self.height);
            for x in 0..width {
                let sx = nearest(x, width, self.width);
                out.set(x, y, self.get(sx, sy));
            }
        }
        out
    }
}

#[inline]
fn nearest(dst: u32, dst_len: u32, src_len: u32) -> u32 {
    let s = ((2 * dst as u64 + 1) * src_len as u64) / (2 * dst_len as u64);
    (s as u32).min(src_len.saturating_sub(1))
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PixelRect {
    pub fn width(&self) -> u32 {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> u32 {
        self.y1.saturating_sub(self.y0)
    }

    pub fn is_empty(&self) -> bool {
        self.width() == 0 || self.height() == 0
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn clamp_to(&self, width: u32, height: u32) -> PixelRect {
        PixelRect { x0: self.x0.min(width), y0: self.y0.min(height), x1: self.x1.min(width), y1: self.y1.min(height) }
    }
}

/// Soft mask with values in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mask {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl Mask {
    pub fn zeros(width: u32, height: u32) -> Self {
        Self { width, height, data: vec![0.0; width as usize * height as usize] }
    }

    /// Ones inside `rect`, zeros elsewhere.
    pub fn rect(width: u32, height: u32, rect: PixelRect) -> Self {
        let mut m = Self::zeros(width, height);
        let r = rect.clamp_to(width, height);
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                m.set(x, y, 1.0);
            }
        }
        m
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, v: f32) {
        let w = self.width as usize;
        self.data[y as usize * w + x as usize] = v;
    }

    pub fn is_empty(&self) -> bool {
        self.data.iter().all(|v| *v <= 0.0)
    }

    pub fn resize_nearest(&self, width: u32, height: u32) -> Mask {
        let mut out = Mask::zeros(width, height);
        for y in 0..height {
            let sy = nearest(y, height, self.height);
            for x in 0..width {
                out.set(x, y, self.get(nearest(x, width, self.width), sy));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_identity_and_upscale() {
        let mut r = Raster::new(2, 2);
        r.set(1, 0, [9, 9, 9]);
        assert_eq!(r.resize_nearest(2, 2), r);
        let up = r.resize_nearest(4, 4);
        assert_eq!(up.get(2, 0), [9, 9, 9]);
        assert_eq!(up.get(3, 1), [9, 9, 9]);
        assert_eq!(up.get(1, 1), [0, 0, 0]);
    }

    #[test]
    fn crop_and_digest() {
        let mut r = Raster::filled(4, 3, [1, 2, 3]);
        r.set(3, 2, [7, 7, 7]);
        let c = r.crop(PixelRect { x0: 2, y0: 1, x1: 4, y1: 3 });
        assert_eq!((c.width, c.height), (2, 2));
        assert_eq!(c.get(1, 1), [7, 7, 7]);
        assert_ne!(r.digest(), Raster::filled(4, 3, [1, 2, 3]).digest());
        assert_eq!(hex::encode(r.digest()), r.digest_hex());
    }

    #[test]
    fn rect_mask() {
        let m = Mask::rect(4, 4, PixelRect { x0: 1, y0: 1, x1: 3, y1: 9 });
        assert_eq!(m.data.iter().filter(|v| **v == 1.0).count(), 6);
        assert!(Mask::zeros(3, 3).is_empty());
    }
}
