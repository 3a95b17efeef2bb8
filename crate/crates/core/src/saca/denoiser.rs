//! Small UNet-shaped noise predictor with DDIM sampling.
//!
//! One down level and one up level with a skip connection; a SA-CA layer
//! sits at each level, which is enough to exercise region masks at two
//! resolutions. Weights are random by default and can be replaced by a
//! checkpoint through [`ToyDenoiser::from_weights`].

use alloc::format;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use super::attention::{CrossAttentionWeights, SacaLayer};
use super::mask::RegionMaskSet;
use super::schedule::GlobalBlendSchedule;
use super::{AttentionConfig, RegionTokenBundle, SacaError};
use crate::digest::mix64;
use crate::tensor::{Latent, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    /// Half resolution.
    Inner,
    /// Full latent resolution.
    Outer,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub attention: AttentionConfig,
    pub train_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// DDIM stochasticity; 0 gives deterministic sampling.
    pub eta: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            attention: AttentionConfig::default(),
            train_timesteps: 1000,
            beta_start: 0.00085,
            beta_end: 0.012,
            eta: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserWeights {
    /// `latent_channels x d_model`
    pub conv_in: Matrix,
    /// `d_model x d_model`
    pub time_proj: Matrix,
    pub down: Matrix,
    pub up: Matrix,
    /// `d_model x latent_channels`
    pub conv_out: Matrix,
    pub inner: CrossAttentionWeights,
    pub outer: CrossAttentionWeights,
}

impl DenoiserWeights {
    pub fn random(config: &DenoiserConfig, seed: u64) -> Self {
        let (c, d) = (config.latent_channels, config.attention.d_model);
        let s = |n: usize| 1.0 / libm::sqrt(n as f64);
        let k = |i: u64| mix64(seed ^ (i << 32));
        Self {
            conv_in: Matrix::randn(c, d, s(c), k(1)),
            time_proj: Matrix::randn(d, d, s(d), k(2)),
            down: Matrix::randn(d, d, s(d), k(3)),
            up: Matrix::randn(d, d, s(d), k(4)),
            conv_out: Matrix::randn(d, c, 0.5 * s(d), k(5)),
            inner: CrossAttentionWeights::random(d, k(6)),
            outer: CrossAttentionWeights::random(d, k(7)),
        }
    }
}

/// Scaled-linear β schedule and its cumulative ᾱ.
#[derive(Debug, Clone, PartialEq)]
pub struct DdimSchedule {
    pub alphas_cumprod: Vec<f64>,
}

impl DdimSchedule {
    pub fn scaled_linear(steps: usize, beta_start: f64, beta_end: f64) -> Self {
        let (a, b) = (libm::sqrt(beta_start), libm::sqrt(beta_end));
        let mut acc = 1.0;
        let alphas_cumprod = (0..steps)
            .map(|i| {
                let t = if steps > 1 { i as f64 / (steps - 1) as f64 } else { 0.0 };
                let beta = (a + (b - a) * t) * (a + (b - a) * t);
                acc *= 1.0 - beta;
                acc
            })
            .collect();
        Self { alphas_cumprod }
    }

    pub fn train_steps(&self) -> usize {
        self.alphas_cumprod.len()
    }

    /// Noise level where sampling starts for a guidance strength in [0, 1].
    pub fn start_timestep(&self, strength: f64) -> usize {
        libm::round(strength.clamp(0.0, 1.0) * (self.train_steps() - 1) as f64) as usize
    }

    /// `steps` timesteps evenly spaced from `t_start` down towards zero.
    pub fn timesteps(t_start: usize, steps: usize) -> Vec<usize> {
        (0..steps).map(|k| libm::round(t_start as f64 * (steps - k) as f64 / steps as f64) as usize).collect()
    }

    /// `sqrt(ᾱ_t)·x0 + sqrt(1-ᾱ_t)·noise`.
    pub fn add_noise(&self, x0: &Latent, t: usize, noise: &Matrix) -> Latent {
        let a = self.alphas_cumprod[t];
        let (sa, sn) = (libm::sqrt(a), libm::sqrt(1.0 - a));
        let mut out = x0.clone();
        for (o, n) in out.features.data.iter_mut().zip(&noise.data) {
            *o = sa * *o + sn * n;
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiseOutput {
    pub latent: Latent,
    /// λ used at each step, in step order.
    pub lambda_trace: Vec<f64>,
    pub timesteps: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct ToyDenoiser {
    config: DenoiserConfig,
    weights: DenoiserWeights,
    inner: SacaLayer,
    outer: SacaLayer,
    schedule: DdimSchedule,
}

fn silu(x: f64) -> f64 {
    x / (1.0 + libm::exp(-x))
}

impl ToyDenoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self, SacaError> {
        let w = DenoiserWeights::random(&config, seed);
        Self::from_weights(config, w)
    }

    /// Builds the denoiser from explicit (for example checkpoint) weights.
    pub fn from_weights(config: DenoiserConfig, weights: DenoiserWeights) -> Result<Self, SacaError> {
        config.attention.validate()?;
        if config.latent_channels == 0 || config.train_timesteps < 2 {
            return Err(SacaError::Config("latent_channels and train_timesteps must be positive".into()));
        }
        let (c, d) = (config.latent_channels, config.attention.d_model);
        for (name, m, r, k) in [
            ("conv_in", &weights.conv_in, c, d),
            ("time_proj", &weights.time_proj, d, d),
            ("down", &weights.down, d, d),
            ("up", &weights.up, d, d),
            ("conv_out", &weights.conv_out, d, c),
        ] {
            if m.rows != r || m.cols != k {
                return Err(SacaError::DimensionMismatch(format!("{name} is {}x{}, expected {r}x{k}", m.rows, m.cols)));
            }
        }
        let inner = SacaLayer::new(config.attention, weights.inner.clone())?;
        let outer = SacaLayer::new(config.attention, weights.outer.clone())?;
        let schedule = DdimSchedule::scaled_linear(config.train_timesteps, config.beta_start, config.beta_end);
        Ok(Self { config, weights, inner, outer, schedule })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn weights(&self) -> &DenoiserWeights {
        &self.weights
    }

    pub fn schedule(&self) -> &DdimSchedule {
        &self.schedule
    }

    pub fn layer(&self, level: Level) -> &SacaLayer {
        match level {
            Level::Inner => &self.inner,
            Level::Outer => &self.outer,
        }
    }

    fn time_embedding(&self, t: usize) -> Vec<f64> {
        let d = self.config.attention.d_model;
        let half = (d / 2).max(1);
        let mut e = Vec::with_capacity(d);
        for i in 0..d {
            let f = libm::exp(-libm::log(10_000.0) * (i % half) as f64 / half as f64);
            e.push(if i < half { libm::sin(t as f64 * f) } else { libm::cos(t as f64 * f) });
        }
        Matrix::from_vec(1, d, e).matmul(&self.weights.time_proj).data
    }

    /// Predicts the noise in `x` at timestep `t`. `attend` supplies the
    /// attention output for each level.
    pub fn predict_noise_with<F>(&self, x: &Latent, t: usize, mut attend: F) -> Result<Latent, SacaError>
    where
        F: FnMut(Level, &Latent) -> Result<Latent, SacaError>,
    {
        let (c, d) = (self.config.latent_channels, self.config.attention.d_model);
        if x.channels() != c {
            return Err(SacaError::DimensionMismatch(format!("latent has {} channels, expected {c}", x.channels())));
        }
        if x.height % 2 != 0 || x.width % 2 != 0 {
            return Err(SacaError::DimensionMismatch("latent sides must be even".into()));
        }
        let temb = self.time_embedding(t);
        let mut h = x.features.matmul(&self.weights.conv_in);
        for r in 0..h.rows {
            for (v, e) in h.row_mut(r).iter_mut().zip(&temb) {
                *v = silu(*v + e);
            }
        }
        let (hh, hw) = (x.height / 2, x.width / 2);
        let mut pooled = Matrix::zeros(hh * hw, d);
        for y in 0..x.height {
            for xx in 0..x.width {
                let dst = (y / 2) * hw + xx / 2;
                let src = y * x.width + xx;
                for ch in 0..d {
                    let v = pooled.get(dst, ch) + 0.25 * h.get(src, ch);
                    pooled.set(dst, ch, v);
                }
            }
        }
        let mut inner = Latent::from_matrix(hh, hw, pooled.matmul(&self.weights.down));
        let a = attend(Level::Inner, &inner)?;
        inner.features.add_assign(&a.features);
        let up = inner.features.matmul(&self.weights.up);
        let mut outer = Latent::from_matrix(x.height, x.width, h);
        for y in 0..x.height {
            for xx in 0..x.width {
                let src = (y / 2) * hw + xx / 2;
                for (v, u) in outer.cell_mut(y, xx).iter_mut().zip(up.row(src)) {
                    *v += u;
                }
            }
        }
        let a = attend(Level::Outer, &outer)?;
        outer.features.add_assign(&a.features);
        for v in outer.features.data.iter_mut() {
            *v = silu(*v);
        }
        Ok(Latent::from_matrix(x.height, x.width, outer.features.matmul(&self.weights.conv_out)))
    }

    /// Noise prediction with SA-CA at both levels.
    pub fn predict_noise(
        &self,
        x: &Latent,
        t: usize,
        bundles: &[RegionTokenBundle],
        masks: &RegionMaskSet,
        inner_masks: &RegionMaskSet,
        lambda: f64,
    ) -> Result<Latent, SacaError> {
        self.predict_noise_with(x, t, |level, q| match level {
            Level::Inner => self.inner.forward(q, bundles, inner_masks, lambda),
            Level::Outer => self.outer.forward(q, bundles, masks, lambda),
        })
    }

    /// Runs `steps` DDIM steps from `initial` at noise level `t_start`.
    /// `masks` must match the latent grid. λ at step `k` (1-indexed) comes
    /// from `schedule`, which must cover exactly `steps` steps.
    pub fn denoise(
        &self,
        initial: &Latent,
        bundles: &[RegionTokenBundle],
        masks: &RegionMaskSet,
        schedule: &GlobalBlendSchedule,
        steps: usize,
        t_start: usize,
        seed: u64,
    ) -> Result<DenoiseOutput, SacaError> {
        if steps == 0 || schedule.total_steps() != steps {
            return Err(SacaError::Config(format!(
                "schedule covers {} steps but {steps} were requested",
                schedule.total_steps()
            )));
        }
        if t_start >= self.schedule.train_steps() {
            return Err(SacaError::Config(format!("start timestep {t_start} is out of range")));
        }
        if masks.height != initial.height || masks.width != initial.width {
            return Err(SacaError::DimensionMismatch("masks do not match the latent grid".into()));
        }
        let inner_masks = masks.downsample(2)?;
        let timesteps = DdimSchedule::timesteps(t_start, steps);
        let ac = &self.schedule.alphas_cumprod;
        let mut x = initial.clone();
        let mut lambda_trace = Vec::with_capacity(steps);
        for (k, &t) in timesteps.iter().enumerate() {
            let lambda = schedule.lambda_at(k + 1)?;
            lambda_trace.push(lambda);
            let eps = self.predict_noise(&x, t, bundles, masks, &inner_masks, lambda)?;
            let at = ac[t];
            let ap = timesteps.get(k + 1).map_or(1.0, |&p| ac[p]);
            let sigma = self.config.eta * libm::sqrt(((1.0 - ap) / (1.0 - at)).max(0.0) * (1.0 - at / ap).max(0.0));
            let dir = libm::sqrt((1.0 - ap - sigma * sigma).max(0.0));
            let noise = (sigma > 0.0).then(|| Matrix::randn(x.cells(), x.channels(), 1.0, mix64(seed ^ k as u64)));
            for (i, v) in x.features.data.iter_mut().enumerate() {
                let e = eps.features.data[i];
                // Clipping x0 keeps the toy latent inside the codec's range.
                let x0 = ((*v - libm::sqrt(1.0 - at) * e) / libm::sqrt(at)).clamp(-1.0, 1.0);
                *v = libm::sqrt(ap) * x0 + dir * e + noise.as_ref().map_or(0.0, |n| sigma * n.data[i]);
            }
        }
        Ok(DenoiseOutput { latent: x, lambda_trace, timesteps })
    }
}
