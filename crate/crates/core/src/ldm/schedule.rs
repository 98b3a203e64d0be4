use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::Latent;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

/// Linear variance schedule with cumulative products; index 0 is the clean signal.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
}

pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument(
            "schedule needs at least one step".into(),
        ));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "invalid beta range [{beta_start}, {beta_end}]"
        )));
    }
    let mut beta = vec![0.0];
    let mut alpha_bar = vec![1.0];
    for i in 0..steps {
        let b = if steps == 1 {
            beta_start
        } else {
            beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
        };
        beta.push(b);
        alpha_bar.push(alpha_bar[i] * (1.0 - b));
    }
    Ok(NoiseSchedule { beta, alpha_bar })
}

impl NoiseSchedule {
    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        make_schedule(cfg.steps, cfg.beta_start, cfg.beta_end)
    }

    pub fn steps(&self) -> usize {
        self.beta.len() - 1
    }

    /// β_n for `1 ≤ n ≤ N`.
    pub fn beta(&self, n: usize) -> f64 {
        self.beta[n]
    }

    /// ᾱ_n for `0 ≤ n ≤ N`.
    pub fn alpha_bar(&self, n: usize) -> f64 {
        self.alpha_bar[n]
    }

    pub fn check_step(&self, n: usize) -> Result<()> {
        if n == 0 || n > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "diffusion step {n} outside [1, {}]",
                self.steps()
            )));
        }
        Ok(())
    }

    /// `(√ᾱ_n, √(1−ᾱ_n))`.
    pub fn coefficients(&self, n: usize) -> (f64, f64) {
        let a = self.alpha_bar[n];
        (a.sqrt(), (1.0 - a).sqrt())
    }
}

fn same_shape(a: &Latent, b: &Latent) -> Result<()> {
    b.check_shape(a.shape())
}

pub fn q_sample(s0: &Latent, n: usize, eps: &Latent, sched: &NoiseSchedule) -> Result<Latent> {
    sched.check_step(n)?;
    same_shape(s0, eps)?;
    let (a, s) = sched.coefficients(n);
    let v = s0
        .values()
        .iter()
        .zip(eps.values())
        .map(|(&x, &e)| (a * x as f64 + s * e as f64) as f32)
        .collect();
    Ok(Latent::new(v, s0.shape())?.with_step(n))
}

pub fn predict_s0(
    s_n: &Latent,
    n: usize,
    eps_hat: &Latent,
    sched: &NoiseSchedule,
) -> Result<Latent> {
    sched.check_step(n)?;
    same_shape(s_n, eps_hat)?;
    let (a, s) = sched.coefficients(n);
    let v = s_n
        .values()
        .iter()
        .zip(eps_hat.values())
        .map(|(&x, &e)| ((x as f64 - s * e as f64) / a) as f32)
        .collect();
    Latent::new(v, s_n.shape())
}
