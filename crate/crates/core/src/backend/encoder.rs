//! Deterministic token encoders for the toy renderer.

use alloc::vec::Vec;

use crate::digest::{fnv1a, mix64, unit_from_hash};
use crate::image::raster::Raster;
use crate::tensor::Matrix;

/// Turns prompts and images into `n x d` token blocks.
pub trait TokenEncoder {
    fn encode_text(&self, text: &str, d: usize) -> Matrix;
    fn encode_image(&self, image: &Raster, d: usize) -> Matrix;
}

pub const MAX_TEXT_TOKENS: usize = 32;

/// Text tokens are hashed word vectors; image tokens are fixed random
/// projections of the mean colour of each quadrant and of the whole image.
#[derive(Debug, Clone, Copy, Default)]
pub struct HashTokenEncoder;

fn word_token(word: &str, d: usize) -> Vec<f64> {
    let h = fnv1a(word.as_bytes());
    let s = 1.0 / libm::sqrt(d as f64);
    (0..d).map(|c| unit_from_hash(mix64(h ^ (c as u64 + 1))) * 2.0 * s).collect()
}

fn mean_colour(image: &Raster, x0: u32, y0: u32, x1: u32, y1: u32) -> [f64; 3] {
    let mut acc = [0.0; 3];
    let mut n = 0.0;
    for y in y0..y1 {
        for x in x0..x1 {
            let p = image.get(x, y);
            for c in 0..3 {
                acc[c] += p[c] as f64;
            }
            n += 1.0;
        }
    }
    if n == 0.0 {
        return [0.0; 3];
    }
    acc.map(|v| v / n / 255.0 - 0.5)
}

impl TokenEncoder for HashTokenEncoder {
    fn encode_text(&self, text: &str, d: usize) -> Matrix {
        let words: Vec<_> = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .take(MAX_TEXT_TOKENS)
            .map(|w| w.to_lowercase())
            .collect();
        let mut data = Vec::new();
        if words.is_empty() {
            data.extend(word_token("", d));
        }
        for w in &words {
            data.extend(word_token(w, d));
        }
        Matrix::from_vec(data.len() / d, d, data)
    }

    fn encode_image(&self, image: &Raster, d: usize) -> Matrix {
        let (w, h) = (image.width, image.height);
        let (mx, my) = (w / 2, h / 2);
        let regions = [(0, 0, mx, my), (mx, 0, w, my), (0, my, mx, h), (mx, my, w, h), (0, 0, w, h)];
        let mut data = Vec::with_capacity(regions.len() * d);
        for (i, (x0, y0, x1, y1)) in regions.into_iter().enumerate() {
            let rgb = mean_colour(image, x0, y0, x1, y1);
            let feat = [rgb[0], rgb[1], rgb[2], if i == 4 { 1.0 } else { 0.5 }];
            for c in 0..d {
                let v: f64 = feat
                    .iter()
                    .enumerate()
                    .map(|(k, f)| f * unit_from_hash(mix64(0x1ace_u64 ^ ((c * 4 + k) as u64))) * 2.0)
                    .sum();
                data.push(v);
            }
        }
        Matrix::from_vec(regions.len(), d, data)
    }
}
