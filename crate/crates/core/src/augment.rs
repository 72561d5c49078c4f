//! Virtual phase pairs: convex interpolation between the two phases with a
//! Beta(α, α) coefficient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};

use crate::dataio::Volume;
use crate::error::{Error, Result};

pub const DEFAULT_ALPHA: f64 = 0.4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixupConfig {
    pub alpha: f64,
    pub enabled: bool,
}

impl Default for MixupConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            enabled: true,
        }
    }
}

impl MixupConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::config(format!("mixup alpha must be > 0, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Augmentation stream for one training worker.
pub fn mixup_rng(seed: u64, worker: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ worker);
    rng.set_stream(1);
    rng
}

/// Draws λ_mix ~ Beta(α, α).
pub fn sample_mixup_coeff<R: Rng + ?Sized>(cfg: &MixupConfig, rng: &mut R) -> Result<f64> {
    cfg.validate()?;
    let beta = Beta::new(cfg.alpha, cfg.alpha).map_err(|e| Error::config(format!("beta: {e}")))?;
    Ok(beta.sample(rng).clamp(0.0, 1.0))
}

/// `(λ·a + (1−λ)·b, λ·b + (1−λ)·a)` elementwise, computed in f64.
pub fn mix_slices(a: &[f32], b: &[f32], lambda: f64) -> Result<(Vec<f32>, Vec<f32>)> {
    if a.len() != b.len() {
        return Err(Error::dim(format!("phase lengths differ: {} vs {}", a.len(), b.len())));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::contract(format!("mixup coefficient {lambda} outside [0, 1]")));
    }
    let mu = 1.0 - lambda;
    let mut xa = Vec::with_capacity(a.len());
    let mut xb = Vec::with_capacity(a.len());
    for (&p, &q) in a.iter().zip(b) {
        let (p, q) = (p as f64, q as f64);
        xa.push((lambda * p + mu * q) as f32);
        xb.push((lambda * q + mu * p) as f32);
    }
    Ok((xa, xb))
}

/// Virtual pair from two aligned phases. Headers are kept as they are.
pub fn virtual_pair(xa: &Volume, xb: &Volume, lambda: f64) -> Result<(Volume, Volume)> {
    if xa.dims() != xb.dims() {
        return Err(Error::dim(format!(
            "phase dims differ: {:?} vs {:?}",
            xa.dims(),
            xb.dims()
        )));
    }
    let (va, vb) = mix_slices(&xa.voxels, &xb.voxels, lambda)?;
    Ok((
        Volume::new(xa.header.clone(), va)?,
        Volume::new(xb.header.clone(), vb)?,
    ))
}
