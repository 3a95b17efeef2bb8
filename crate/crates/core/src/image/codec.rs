//! Fixed pixel/latent codec for the toy renderer: average pooling down,
//! nearest upsampling back.

use super::raster::Raster;
use crate::tensor::{Latent, Matrix};

pub const LATENT_CHANNELS: usize = 4;

/// Each `factor x factor` block becomes one cell holding the block's RGB
/// means mapped to [-1, 1] plus their average as a fourth channel.
pub fn encode(image: &Raster, factor: u32) -> Latent {
    let (h, w) = ((image.height / factor) as usize, (image.width / factor) as usize);
    let mut m = Matrix::zeros(h * w, LATENT_CHANNELS);
    let n = (factor * factor) as f64;
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f64; 3];
            for dy in 0..factor {
                for dx in 0..factor {
                    let p = image.get(x as u32 * factor + dx, y as u32 * factor + dy);
                    for c in 0..3 {
                        acc[c] += p[c] as f64;
                    }
                }
            }
            let row = m.row_mut(y * w + x);
            for c in 0..3 {
                row[c] = acc[c] / n / 255.0 * 2.0 - 1.0;
            }
            row[3] = (row[0] + row[1] + row[2]) / 3.0;
        }
    }
    Latent::from_matrix(h, w, m)
}

pub fn decode(latent: &Latent, factor: u32) -> Raster {
    let (w, h) = (latent.width as u32 * factor, latent.height as u32 * factor);
    let mut out = Raster::new(w, h);
    let to_u8 = |v: f64| libm::round((v.clamp(-1.0, 1.0) + 1.0) / 2.0 * 255.0) as u8;
    for y in 0..h {
        for x in 0..w {
            let c = latent.cell((y / factor) as usize, (x / factor) as usize);
            out.set(x, y, [to_u8(c[0]), to_u8(c[1]), to_u8(c[2])]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_blocks_round_trip() {
        let mut r = Raster::filled(8, 8, [255, 0, 128]);
        for y in 0..4 {
            for x in 0..4 {
                r.set(x, y, [0, 255, 0]);
            }
        }
        let l = encode(&r, 4);
        assert_eq!((l.height, l.width, l.channels()), (2, 2, 4));
        assert_eq!(l.cell(0, 0)[1], 1.0);
        assert_eq!(decode(&l, 4), r);
    }
}
