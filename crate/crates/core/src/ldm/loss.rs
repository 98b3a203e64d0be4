use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::Latent;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub weight_base: f64,
    pub weight_scale: f64,
    pub cond_dropout_p: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            weight_base: 10.0,
            weight_scale: 200.0,
            cond_dropout_p: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(0.0..1.0).contains(&self.cond_dropout_p) {
            return Err(Error::InvalidArgument(format!(
                "cond_dropout_p must lie in [0, 1), got {}",
                self.cond_dropout_p
            )));
        }
        if !(self.weight_base > 1.0 && self.weight_scale > 0.0) {
            return Err(Error::InvalidArgument(
                "step weight needs base > 1 and scale > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Mean squared error between injected and predicted noise.
pub fn ddpm_loss(eps: &Latent, eps_hat: &Latent) -> Result<f64> {
    eps_hat.check_shape(eps.shape())?;
    Ok(eps
        .values()
        .iter()
        .zip(eps_hat.values())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / eps.len() as f64)
}

/// `base^(−n/scale)`, i.e. `10^(−n/200)` by default.
pub fn step_weight(n: i64, cfg: &LossConfig) -> Result<f64> {
    if n < 0 {
        return Err(Error::InvalidArgument(format!(
            "negative diffusion step {n}"
        )));
    }
    Ok(cfg.weight_base.powf(-(n as f64) / cfg.weight_scale))
}

pub fn total_loss(ddpm: f64, lclap: f64, cfg: &LossConfig) -> f64 {
    ddpm + cfg.lambda * lclap
}

/// Classifier-free guidance: `uncond + g·(cond − uncond)`.
pub fn cfg_combine(eps_cond: &Latent, eps_uncond: &Latent, g: f64) -> Result<Latent> {
    eps_uncond.check_shape(eps_cond.shape())?;
    let v = combine_slices(eps_cond.values(), eps_uncond.values(), g);
    Latent::new(v, eps_cond.shape())
}

pub(crate) fn combine_slices(cond: &[f32], uncond: &[f32], g: f64) -> Vec<f32> {
    if g == 1.0 {
        return cond.to_vec();
    }
    if g == 0.0 {
        return uncond.to_vec();
    }
    cond.iter()
        .zip(uncond)
        .map(|(&c, &u)| (u as f64 + g * (c as f64 - u as f64)) as f32)
        .collect()
}
