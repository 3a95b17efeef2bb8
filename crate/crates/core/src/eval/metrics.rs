use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::MetricError;
use crate::backend::{EmbedInput, EmbeddingBackend};
use crate::image::raster::Raster;

/// Cosine similarity of two vectors. Zero when either has zero norm.
///
/// # Panics
/// When the lengths differ.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "cosine of vectors with different widths");
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum::<f64>());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum::<f64>());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn percent(c: f64) -> f64 {
    c.clamp(0.0, 1.0) * 100.0
}

fn check_width(a: &[f64], b: &[f64]) -> Result<(), MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::DimensionMismatch { expected: a.len(), found: b.len() });
    }
    Ok(())
}

/// TIS over already-embedded (image, prompt) pairs, as a percentage.
///
/// Negative cosines count as 0 so the result stays in [0, 100].
pub fn tis_from_embeddings(pairs: &[(Vec<f64>, Vec<f64>)]) -> Result<f64, MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let mut sum = 0.0;
    for (img, txt) in pairs {
        check_width(img, txt)?;
        sum += percent(cosine(img, txt));
    }
    Ok(sum / pairs.len() as f64)
}

/// Text-image similarity between paired images and prompts.
pub fn tis(images: &[&Raster], prompts: &[&str], embedder: &mut dyn EmbeddingBackend) -> Result<f64, MetricError> {
    if images.len() != prompts.len() {
        return Err(MetricError::LengthMismatch { images: images.len(), prompts: prompts.len() });
    }
    let mut pairs = Vec::with_capacity(images.len());
    for (img, p) in images.iter().zip(prompts) {
        pairs.push((embedder.embed(EmbedInput::Image(img))?, embedder.embed(EmbedInput::Text(p))?));
    }
    tis_from_embeddings(&pairs)
}

/// CCS over already-embedded crops, as a percentage.
///
/// Per character: mean cosine over all unordered crop pairs. The result is
/// the uniform mean over characters.
pub fn ccs_from_embeddings(crops: &BTreeMap<String, Vec<Vec<f64>>>) -> Result<f64, MetricError> {
    if crops.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let mut total = 0.0;
    for (id, vs) in crops {
        if vs.len() < 2 {
            return Err(MetricError::InsufficientCrops { character_id: id.clone(), count: vs.len() });
        }
        let mut sum = 0.0;
        let mut n = 0usize;
        for i in 0..vs.len() {
            for j in i + 1..vs.len() {
                check_width(&vs[i], &vs[j])?;
                sum += percent(cosine(&vs[i], &vs[j]));
                n += 1;
            }
        }
        total += sum / n as f64;
    }
    Ok(total / crops.len() as f64)
}

/// Character-character similarity over per-scene crops of each character.
pub fn ccs(crops: &BTreeMap<String, Vec<Raster>>, embedder: &mut dyn EmbeddingBackend) -> Result<f64, MetricError> {
    let mut embedded = BTreeMap::new();
    for (id, rs) in crops {
        let mut vs = Vec::with_capacity(rs.len());
        for r in rs {
            vs.push(embedder.embed(EmbedInput::Image(r))?);
        }
        embedded.insert(id.clone(), vs);
    }
    ccs_from_embeddings(&embedded)
}

/// Sample mean and unbiased covariance of a feature set.
pub fn moments(features: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>), MetricError> {
    let n = features.len();
    if n < 2 {
        return Err(MetricError::TooFewSamples { count: n });
    }
    let d = features[0].len();
    if d == 0 {
        return Err(MetricError::EmptyInput);
    }
    let mut mean = DVector::zeros(d);
    for f in features {
        check_width(&features[0], f)?;
        mean += DVector::from_column_slice(f);
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    for f in features {
        let c = DVector::from_column_slice(f) - &mean;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    Ok((mean, cov))
}

/// Eigenvalues of a symmetric PSD matrix with round-off negatives set to 0.
///
/// A negative eigenvalue below `-1e-8 * max(1, |largest|)` is reported.
fn clamped_eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>, MetricError> {
    let sym = (&m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    for v in eig.eigenvalues.iter_mut() {
        if *v < 0.0 {
            if *v < -1e-8 * scale {
                return Err(MetricError::DegenerateCovariance { eigenvalue: *v });
            }
            *v = 0.0;
        }
    }
    Ok(eig)
}

/// Symmetric square root of a PSD matrix.
pub fn sqrtm_psd(m: &DMatrix<f64>) -> Result<DMatrix<f64>, MetricError> {
    let eig = clamped_eigen(m.clone())?;
    let roots = eig.eigenvalues.map(libm::sqrt);
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// Fréchet distance between Gaussians fitted to two feature sets.
///
/// `|mu_a - mu_b|^2 + Tr(S_a) + Tr(S_b) - 2 Tr((S_a S_b)^(1/2))`, where the
/// cross term is computed as `Tr((sqrt(S_a) S_b sqrt(S_a))^(1/2))` so that
/// only symmetric matrices are decomposed.
pub fn fid(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64, MetricError> {
    let (mu_a, s_a) = moments(a)?;
    let (mu_b, s_b) = moments(b)?;
    if mu_a.len() != mu_b.len() {
        return Err(MetricError::DimensionMismatch { expected: mu_a.len(), found: mu_b.len() });
    }
    let root_a = sqrtm_psd(&s_a)?;
    let inner = &root_a * &s_b * &root_a;
    let cross: f64 = clamped_eigen(inner)?.eigenvalues.iter().map(|v| libm::sqrt(*v)).sum();
    let d = (&mu_a - &mu_b).norm_squared() + s_a.trace() + s_b.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// The four quadrant tiles of an image, row-major.
///
/// FID needs at least two samples per set; tiling turns every rendered
/// scene into four feature samples.
pub fn quadrant_tiles(image: &Raster) -> [Raster; 4] {
    use crate::image::raster::PixelRect;
    let (w, h) = (image.width, image.height);
    let (mx, my) = (w / 2, h / 2);
    [
        image.crop(PixelRect { x0: 0, y0: 0, x1: mx, y1: my }),
        image.crop(PixelRect { x0: mx, y0: 0, x1: w, y1: my }),
        image.crop(PixelRect { x0: 0, y0: my, x1: mx, y1: h }),
        image.crop(PixelRect { x0: mx, y0: my, x1: w, y1: h }),
    ]
}

/// FID between two image sets, features taken per quadrant tile.
pub fn fid_images(a: &[&Raster], b: &[&Raster], extractor: &mut dyn EmbeddingBackend) -> Result<f64, MetricError> {
    let mut features = |set: &[&Raster]| -> Result<Vec<Vec<f64>>, MetricError> {
        let mut out = Vec::with_capacity(set.len() * 4);
        for img in set {
            for t in quadrant_tiles(img) {
                out.push(extractor.embed(EmbedInput::Image(&t))?);
            }
        }
        Ok(out)
    };
    let fa = features(a)?;
    let fb = features(b)?;
    fid(&fa, &fb)
}
