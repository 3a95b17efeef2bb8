use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::mask::RegionMaskSet;
use super::schedule::GlobalBlendSchedule;
use super::{AttentionConfig, RegionId, RegionTokenBundle, SacaError};
use crate::tensor::{Latent, Matrix};

/// Shifts `tokens` so its per-dimension mean over the token axis equals that
/// of `target`: `tokens - mean(tokens) + mean(target)`.
pub fn adain_mean_align(tokens: &Matrix, target: &Matrix) -> Result<Matrix, SacaError> {
    if tokens.rows == 0 {
        return Err(SacaError::EmptyTokens("image".into()));
    }
    if target.rows == 0 {
        return Err(SacaError::EmptyTokens("text".into()));
    }
    if tokens.cols != target.cols {
        return Err(SacaError::DimensionMismatch(format!("{} vs {} columns", tokens.cols, target.cols)));
    }
    let shift: Vec<f64> = target.column_means().iter().zip(tokens.column_means()).map(|(t, s)| t - s).collect();
    let mut out = tokens.clone();
    for r in 0..out.rows {
        for (v, s) in out.row_mut(r).iter_mut().zip(&shift) {
            *v += s;
        }
    }
    Ok(out)
}

/// Projection matrices of one cross-attention layer, all `d_model x d_model`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossAttentionWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wk_img: Matrix,
    pub wv_img: Matrix,
    pub wo: Matrix,
}

impl CrossAttentionWeights {
    pub fn random(d: usize, seed: u64) -> Self {
        let s = 1.0 / libm::sqrt(d as f64);
        let m = |k: u64| Matrix::randn(d, d, s, crate::digest::mix64(seed ^ k));
        Self { wq: m(1), wk: m(2), wv: m(3), wk_img: m(4), wv_img: m(5), wo: m(6) }
    }

    fn check(&self, d: usize) -> Result<(), SacaError> {
        for (name, m) in [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wk_img", &self.wk_img),
            ("wv_img", &self.wv_img),
            ("wo", &self.wo),
        ] {
            if m.rows != d || m.cols != d {
                return Err(SacaError::DimensionMismatch(format!("{name} is {}x{}, expected {d}x{d}", m.rows, m.cols)));
            }
        }
        Ok(())
    }
}

/// Keys and values of one region, image branch already mean-aligned.
struct Projected {
    k: Matrix,
    v: Matrix,
    img: Option<(Matrix, Matrix)>,
}

/// Per-head softmax weights for one query, kept for the backward pass.
struct HeadProbs(Vec<Vec<f64>>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SacaLayer {
    pub config: AttentionConfig,
    pub weights: CrossAttentionWeights,
}

impl SacaLayer {
    pub fn new(config: AttentionConfig, weights: CrossAttentionWeights) -> Result<Self, SacaError> {
        config.validate()?;
        weights.check(config.d_model)?;
        Ok(Self { config, weights })
    }

    pub fn random(config: AttentionConfig, seed: u64) -> Result<Self, SacaError> {
        Self::new(config, CrossAttentionWeights::random(config.d_model, seed))
    }

    fn check_query(&self, query: &Latent) -> Result<(), SacaError> {
        if query.channels() != self.config.d_model {
            return Err(SacaError::DimensionMismatch(format!(
                "query has {} channels, layer expects {}",
                query.channels(),
                self.config.d_model
            )));
        }
        Ok(())
    }

    fn project(&self, bundle: &RegionTokenBundle) -> Result<Projected, SacaError> {
        let d = self.config.d_model;
        let t = &bundle.text_tokens;
        if t.rows == 0 {
            return Err(SacaError::EmptyTokens(format!("text tokens of {}", bundle.region)));
        }
        if t.cols != d {
            return Err(SacaError::DimensionMismatch(format!("text tokens of {} have width {}", bundle.region, t.cols)));
        }
        let k = t.matmul(&self.weights.wk);
        let v = t.matmul(&self.weights.wv);
        let img = match &bundle.image_tokens {
            Some(i) if self.config.image_weight > 0.0 => {
                if i.rows == 0 {
                    return Err(SacaError::EmptyTokens(format!("image tokens of {}", bundle.region)));
                }
                if i.cols != d {
                    return Err(SacaError::DimensionMismatch(format!(
                        "image tokens of {} have width {}",
                        bundle.region, i.cols
                    )));
                }
                let ki = adain_mean_align(&i.matmul(&self.weights.wk_img), &k)?;
                let vi = adain_mean_align(&i.matmul(&self.weights.wv_img), &v)?;
                Some((ki, vi))
            }
            _ => None,
        };
        Ok(Projected { k, v, img })
    }

    /// Multi-head attention of one query row; adds `weight * result` to `out`.
    fn attend(&self, q: &[f64], k: &Matrix, v: &Matrix, weight: f64, out: &mut [f64]) -> HeadProbs {
        let dh = self.config.head_dim();
        let inv = 1.0 / libm::sqrt(dh as f64);
        let mut probs = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let cols = h * dh..(h + 1) * dh;
            let mut p: Vec<f64> = (0..k.rows)
                .map(|j| q[cols.clone()].iter().zip(&k.row(j)[cols.clone()]).map(|(a, b)| a * b).sum::<f64>() * inv)
                .collect();
            let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for s in p.iter_mut() {
                *s = libm::exp(*s - max);
                z += *s;
            }
            for s in p.iter_mut() {
                *s /= z;
            }
            for (j, pj) in p.iter().enumerate() {
                for (o, vv) in out[cols.clone()].iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *o += weight * pj * vv;
                }
            }
            probs.push(p);
        }
        HeadProbs(probs)
    }

    /// Adds to `dq` the gradient through one attention branch given the
    /// gradient `g` of its (weighted) output.
    fn attend_backward(&self, probs: &HeadProbs, k: &Matrix, v: &Matrix, g: &[f64], dq: &mut [f64]) {
        let dh = self.config.head_dim();
        let inv = 1.0 / libm::sqrt(dh as f64);
        for (h, p) in probs.0.iter().enumerate() {
            let cols = h * dh..(h + 1) * dh;
            let dp: Vec<f64> = (0..v.rows)
                .map(|j| g[cols.clone()].iter().zip(&v.row(j)[cols.clone()]).map(|(a, b)| a * b).sum())
                .collect();
            let s: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
            for j in 0..k.rows {
                let ds = p[j] * (dp[j] - s) * inv;
                for (d, kk) in dq[cols.clone()].iter_mut().zip(&k.row(j)[cols.clone()]) {
                    *d += ds * kk;
                }
            }
        }
    }

    fn row_times(x: &[f64], m: &Matrix) -> Vec<f64> {
        let mut out = vec![0.0; m.cols];
        for (i, xi) in x.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(m.row(i)) {
                *o += xi * w;
            }
        }
        out
    }

    fn times_transpose(g: &[f64], m: &Matrix) -> Vec<f64> {
        (0..m.rows).map(|i| m.row(i).iter().zip(g).map(|(a, b)| a * b).sum()).collect()
    }

    /// Cross-attention of the masked cells of `query` to one region's tokens.
    /// Unmasked cells are zero in the result.
    pub fn region_cross_attention(
        &self,
        query: &Latent,
        bundle: &RegionTokenBundle,
        mask: &[u8],
    ) -> Result<Latent, SacaError> {
        self.check_query(query)?;
        if mask.len() != query.cells() {
            return Err(SacaError::DimensionMismatch(format!("mask has {} cells, query {}", mask.len(), query.cells())));
        }
        let proj = self.project(bundle)?;
        let d = self.config.d_model;
        let mut out = Latent::zeros(query.height, query.width, d);
        for cell in (0..query.cells()).filter(|&i| mask[i] != 0) {
            let q = Self::row_times(query.features.row(cell), &self.weights.wq);
            let mut o = vec![0.0; d];
            self.attend(&q, &proj.k, &proj.v, 1.0, &mut o);
            if let Some((ki, vi)) = &proj.img {
                self.attend(&q, ki, vi, self.config.image_weight, &mut o);
            }
            out.features.row_mut(cell).copy_from_slice(&Self::row_times(&o, &self.weights.wo));
        }
        Ok(out)
    }

    fn bundle<'b>(bundles: &'b [RegionTokenBundle], region: &RegionId) -> Result<&'b RegionTokenBundle, SacaError> {
        bundles.iter().find(|b| &b.region == region).ok_or_else(|| SacaError::MissingBundle(region.to_string()))
    }

    /// (bundle, mask) pairs of the regional pass: characters then background.
    fn regions<'b>(
        bundles: &'b [RegionTokenBundle],
        masks: &'b RegionMaskSet,
    ) -> Result<Vec<(&'b RegionTokenBundle, &'b [u8])>, SacaError> {
        let mut v = Vec::with_capacity(masks.characters.len() + 1);
        for c in &masks.characters {
            v.push((Self::bundle(bundles, &RegionId::Character(c.character_id.clone()))?, c.cells.as_slice()));
        }
        v.push((Self::bundle(bundles, &RegionId::Background)?, masks.background.as_slice()));
        Ok(v)
    }

    fn check_masks(query: &Latent, masks: &RegionMaskSet) -> Result<(), SacaError> {
        if masks.height != query.height || masks.width != query.width {
            return Err(SacaError::DimensionMismatch(format!(
                "masks are {}x{}, query {}x{}",
                masks.height, masks.width, query.height, query.width
            )));
        }
        Ok(())
    }

    /// Sum of every region's masked attention. Regions partition the grid, so
    /// each cell carries exactly its own region's output.
    pub fn regional(&self, query: &Latent, bundles: &[RegionTokenBundle], masks: &RegionMaskSet) -> Result<Latent, SacaError> {
        Self::check_masks(query, masks)?;
        let mut acc = Latent::zeros(query.height, query.width, self.config.d_model);
        for (b, m) in Self::regions(bundles, masks)? {
            if m.iter().any(|v| *v != 0) {
                acc.features.add_assign(&self.region_cross_attention(query, b, m)?.features);
            } else {
                // Still validate the bundle so malformed tokens never pass silently.
                self.project(b)?;
            }
        }
        Ok(acc)
    }

    /// Attention of every cell to the global prompt tokens.
    pub fn global(&self, query: &Latent, bundles: &[RegionTokenBundle]) -> Result<Latent, SacaError> {
        let b = Self::bundle(bundles, &RegionId::Global)?;
        self.region_cross_attention(query, b, &vec![1u8; query.cells()])
    }

    /// `(1 - λ) · regional + λ · global`.
    pub fn forward(
        &self,
        query: &Latent,
        bundles: &[RegionTokenBundle],
        masks: &RegionMaskSet,
        lambda: f64,
    ) -> Result<Latent, SacaError> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(SacaError::Config(format!("lambda {lambda} is outside [0, 1]")));
        }
        let r = self.regional(query, bundles, masks)?;
        let g = self.global(query, bundles)?;
        let mut out = r;
        for (o, gv) in out.features.data.iter_mut().zip(&g.features.data) {
            *o = (1.0 - lambda) * *o + lambda * gv;
        }
        Ok(out)
    }

    /// [`forward`](Self::forward) with λ taken from `schedule` at 1-indexed `step`.
    pub fn forward_step(
        &self,
        query: &Latent,
        bundles: &[RegionTokenBundle],
        masks: &RegionMaskSet,
        schedule: &GlobalBlendSchedule,
        step: usize,
    ) -> Result<Latent, SacaError> {
        self.forward(query, bundles, masks, schedule.lambda_at(step)?)
    }

    fn cell_backward(&self, x: &[f64], proj: &Projected, upstream: &[f64], scale: f64, dx: &mut [f64]) {
        let d = self.config.d_model;
        let q = Self::row_times(x, &self.weights.wq);
        let mut scratch = vec![0.0; d];
        let g = Self::times_transpose(upstream, &self.weights.wo);
        let g: Vec<f64> = g.iter().map(|v| v * scale).collect();
        let mut dq = vec![0.0; d];
        let pt = self.attend(&q, &proj.k, &proj.v, 1.0, &mut scratch);
        self.attend_backward(&pt, &proj.k, &proj.v, &g, &mut dq);
        if let Some((ki, vi)) = &proj.img {
            let pi = self.attend(&q, ki, vi, 1.0, &mut scratch);
            let gi: Vec<f64> = g.iter().map(|v| v * self.config.image_weight).collect();
            self.attend_backward(&pi, ki, vi, &gi, &mut dq);
        }
        for (a, b) in dx.iter_mut().zip(Self::times_transpose(&dq, &self.weights.wq)) {
            *a += b;
        }
    }

    /// Vector-Jacobian product of [`forward`](Self::forward) with respect to
    /// the query: returns `∂⟨upstream, forward(query)⟩ / ∂query`.
    pub fn query_vjp(
        &self,
        query: &Latent,
        bundles: &[RegionTokenBundle],
        masks: &RegionMaskSet,
        lambda: f64,
        upstream: &Latent,
    ) -> Result<Latent, SacaError> {
        self.check_query(query)?;
        Self::check_masks(query, masks)?;
        if upstream.height != query.height || upstream.width != query.width || upstream.channels() != self.config.d_model {
            return Err(SacaError::DimensionMismatch("upstream gradient shape differs from the output".into()));
        }
        let d = self.config.d_model;
        let mut grad = Latent::zeros(query.height, query.width, d);
        for (b, m) in Self::regions(bundles, masks)? {
            let proj = self.project(b)?;
            for cell in (0..query.cells()).filter(|&i| m[i] != 0) {
                self.cell_backward(query.features.row(cell), &proj, upstream.features.row(cell), 1.0 - lambda, grad.features.row_mut(cell));
            }
        }
        let proj = self.project(Self::bundle(bundles, &RegionId::Global)?)?;
        for cell in 0..query.cells() {
            self.cell_backward(query.features.row(cell), &proj, upstream.features.row(cell), lambda, grad.features.row_mut(cell));
        }
        Ok(grad)
    }
}
