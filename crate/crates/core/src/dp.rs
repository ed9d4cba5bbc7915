//! Per-sample clipping and the noisy mini-batch mean.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, ensure_dim, Error, Result};
use crate::param::ParamVector;
use crate::rng::{Purpose, StreamKey, StreamRng};

/// Slack allowed when checking that inputs to the noisy mean are clipped.
pub const CLIP_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DPConfig {
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    pub sample_rate: f64,
    pub dataset_size: usize,
}

impl DPConfig {
    pub fn new(clip_norm: f64, noise_multiplier: f64, sample_rate: f64, dataset_size: usize) -> Result<Self> {
        let cfg = Self {
            clip_norm,
            noise_multiplier,
            sample_rate,
            dataset_size,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0 && self.clip_norm.is_finite()) {
            return config_err(format!("clip norm must be positive and finite, got {}", self.clip_norm));
        }
        if !(self.noise_multiplier >= 0.0 && self.noise_multiplier.is_finite()) {
            return config_err(format!(
                "noise multiplier must be finite and >= 0, got {}",
                self.noise_multiplier
            ));
        }
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return config_err(format!("sample rate must be in (0, 1], got {}", self.sample_rate));
        }
        if self.batch_size() == 0 {
            return config_err(format!(
                "floor(s*R) = floor({} * {}) is zero",
                self.sample_rate, self.dataset_size
            ));
        }
        Ok(())
    }

    /// `⌊sR⌋`.
    pub fn batch_size(&self) -> usize {
        (self.sample_rate * self.dataset_size as f64).floor() as usize
    }

    /// `sR`, the divisor of the noisy mean.
    pub fn effective_batch(&self) -> f64 {
        self.sample_rate * self.dataset_size as f64
    }

    /// Per-coordinate noise standard deviation `σC/(sR)`.
    pub fn noise_std(&self) -> f64 {
        self.noise_multiplier * self.clip_norm / self.effective_batch()
    }

    /// `(σC/(sR))²`, the additive shift DP noise puts on E[g̃⊙g̃].
    pub fn noise_variance(&self) -> f64 {
        let s = self.noise_std();
        s * s
    }
}

/// Gaussian noise source keyed by `(run seed, round, client, local step)`.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    key: StreamKey,
    rng: StreamRng,
}

impl NoiseStream {
    pub fn new(seed: u64, round: u32, client: u32, step: u64) -> Self {
        let key = StreamKey::new(seed, Purpose::DpNoise)
            .round(round)
            .client(client)
            .step(step);
        Self::from_key(key)
    }

    pub fn from_key(key: StreamKey) -> Self {
        Self { rng: key.rng(), key }
    }

    pub fn key(&self) -> StreamKey {
        self.key
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }
}

/// `g / max(1, ‖g‖/C)`.
pub fn clip(g: &ParamVector, clip_norm: f64) -> Result<ParamVector> {
    if !(clip_norm > 0.0) {
        return config_err(format!("clip norm must be positive, got {clip_norm}"));
    }
    g.ensure_finite("clip")?;
    let norm = g.l2_norm();
    if norm <= clip_norm {
        return Ok(g.clone());
    }
    let mut out = g.scaled(clip_norm / norm);
    // Round-off can leave the rescaled norm a few ulps above C.
    while out.l2_norm() > clip_norm {
        out.scale_in_place(1.0 - f64::EPSILON);
    }
    Ok(out)
}

/// `(1/(sR)) Σ_j clipped_j + z`, `z ~ N(0, (σC/(sR))² I)`.
///
/// The batch is summed in the order given; noise is drawn one coordinate at a
/// time from `noise`.
pub fn noisy_batch_mean(clipped: &[ParamVector], cfg: &DPConfig, noise: &mut NoiseStream) -> Result<ParamVector> {
    let first = clipped
        .first()
        .ok_or_else(|| Error::Contract("noisy mean of an empty batch".into()))?;
    if clipped.len() != cfg.batch_size() {
        return Err(Error::Contract(format!(
            "batch has {} gradients, expected floor(sR) = {}",
            clipped.len(),
            cfg.batch_size()
        )));
    }
    let d = first.dim();
    let mut sum = ParamVector::zeros(d);
    for g in clipped {
        ensure_dim(d, g.dim())?;
        let n = g.l2_norm();
        if n > cfg.clip_norm + CLIP_SLACK {
            return Err(Error::Contract(format!(
                "gradient norm {n} exceeds clip norm {}",
                cfg.clip_norm
            )));
        }
        sum.axpy(1.0, g);
    }
    let inv = 1.0 / cfg.effective_batch();
    let std = cfg.noise_std();
    let out: Vec<f64> = sum
        .iter()
        .map(|s| {
            let mean = s * inv;
            if std > 0.0 {
                mean + std * noise.standard_normal()
            } else {
                mean
            }
        })
        .collect();
    let out = ParamVector::from_vec_unchecked(out);
    out.ensure_finite("noisy_batch_mean")?;
    Ok(out)
}
