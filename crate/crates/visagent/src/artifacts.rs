//! PNG artifacts and atomic file writes.

use std::io::{Cursor, Write};
use std::path::{Component, Path, PathBuf};

use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use visagent_core::image::Raster;

#[derive(Debug, Error)]
pub enum ArtifactError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}: not a decodable PNG: {message}")]
    Decode { path: String, message: String },
    #[error("{path}: content digest {found} differs from recorded {expected}")]
    DigestMismatch { path: String, expected: String, found: String },
    #[error("artifact path `{0}` escapes the run directory")]
    BadPath(String),
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> ArtifactError {
    ArtifactError::Io { path: path.display().to_string(), message: e.to_string() }
}

/// Writes `bytes` to `path` through a sibling temp file and a rename, so
/// readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ArtifactError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_err(dir, e))?;
    tmp.write_all(bytes).map_err(|e| io_err(path, e))?;
    tmp.as_file().sync_all().map_err(|e| io_err(path, e))?;
    tmp.persist(path).map_err(|e| io_err(path, e.error))?;
    Ok(())
}

pub fn encode_png(raster: &Raster) -> Vec<u8> {
    let img = RgbImage::from_raw(raster.width, raster.height, raster.data.clone()).expect("raster buffer matches size");
    let mut out = Cursor::new(Vec::new());
    img.write_to(&mut out, ImageFormat::Png).expect("in-memory PNG encoding");
    out.into_inner()
}

pub fn decode_png(bytes: &[u8]) -> Result<Raster, image::ImageError> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Raster::from_raw(w, h, img.into_raw()).expect("decoded buffer matches size"))
}

/// Checks that `rel` is a plain relative path inside a run directory.
pub fn safe_relative(rel: &str) -> Result<PathBuf, ArtifactError> {
    let p = Path::new(rel);
    if rel.is_empty() || p.components().any(|c| !matches!(c, Component::Normal(_))) {
        return Err(ArtifactError::BadPath(rel.to_string()));
    }
    Ok(p.to_path_buf())
}

/// An image stored as a PNG file under a run directory.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    /// Relative to the run directory, `/`-separated.
    pub path: String,
    /// SHA-256 of the decoded raster (see [`Raster::digest_hex`]).
    pub digest: String,
    pub width: u32,
    pub height: u32,
}

pub fn save_image(run_dir: &Path, rel: &str, raster: &Raster) -> Result<ImageRef, ArtifactError> {
    let path = run_dir.join(safe_relative(rel)?);
    write_atomic(&path, &encode_png(raster))?;
    Ok(ImageRef { path: rel.to_string(), digest: raster.digest_hex(), width: raster.width, height: raster.height })
}

pub fn load_image(run_dir: &Path, r: &ImageRef) -> Result<Raster, ArtifactError> {
    let path = run_dir.join(safe_relative(&r.path)?);
    let bytes = std::fs::read(&path).map_err(|e| io_err(&path, e))?;
    let raster =
        decode_png(&bytes).map_err(|e| ArtifactError::Decode { path: r.path.clone(), message: e.to_string() })?;
    let found = raster.digest_hex();
    if found != r.digest {
        return Err(ArtifactError::DigestMismatch { path: r.path.clone(), expected: r.digest.clone(), found });
    }
    Ok(raster)
}
