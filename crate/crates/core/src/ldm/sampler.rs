use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::loss::combine_slices;
use super::net::LdmModel;
use super::schedule::NoiseSchedule;
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::latent::{unbatch_latents, Latent};
use crate::nn::{normal, Tensor};

/// Anything that predicts noise for a batch of latents at a shared step.
pub trait EpsPredictor {
    fn latent_shape(&self) -> [usize; 3];
    fn schedule(&self) -> &NoiseSchedule;
    /// `cond = None` selects the unconditional branch.
    fn predict(&self, x: &Tensor<f32>, n: usize, cond: Option<&Embedding>) -> Result<Tensor<f32>>;
}

impl EpsPredictor for LdmModel<f32> {
    fn latent_shape(&self) -> [usize; 3] {
        self.config.latent_shape
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn predict(&self, x: &Tensor<f32>, n: usize, cond: Option<&Embedding>) -> Result<Tensor<f32>> {
        self.predict_tensor(x, n, cond)
    }
}

/// Evenly strided schedule indices `τ_1 < … < τ_S = N`.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::InvalidArgument(format!(
            "inference steps must lie in [1, {total}], got {steps}"
        )));
    }
    Ok((1..=steps).map(|i| i * total / steps).collect())
}

/// Deterministic DDIM (η = 0) from seeded Gaussian noise; one latent per seed.
pub fn sample_batch<P: EpsPredictor + ?Sized>(
    model: &P,
    cond: &Embedding,
    steps: usize,
    guidance: f64,
    seeds: &[u64],
) -> Result<Vec<Latent>> {
    if !(guidance >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "guidance weight must be >= 0, got {guidance}"
        )));
    }
    let sched = model.schedule();
    let taus = ddim_timesteps(sched.steps(), steps)?;
    if seeds.is_empty() {
        return Ok(Vec::new());
    }
    let shape = model.latent_shape();
    let per: usize = shape.iter().product();
    let mut x = Vec::with_capacity(seeds.len() * per);
    for &s in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        x.extend(normal::<f32>(&mut rng, &shape, 1.0).into_data());
    }
    let bshape = vec![seeds.len(), shape[0], shape[1], shape[2]];
    let mut x = Tensor::new(bshape.clone(), x);
    let mut s0 = x.clone();
    for i in (0..taus.len()).rev() {
        let n = taus[i];
        let c = model.predict(&x, n, Some(cond))?;
        let eps = if guidance == 1.0 {
            c.into_data()
        } else {
            let u = model.predict(&x, n, None)?;
            combine_slices(c.data(), u.data(), guidance)
        };
        let (a, s) = sched.coefficients(n);
        let prev = if i == 0 {
            1.0
        } else {
            sched.alpha_bar(taus[i - 1])
        };
        let (pa, ps) = (prev.sqrt(), (1.0 - prev).sqrt());
        let mut next = Vec::with_capacity(eps.len());
        let mut clean = Vec::with_capacity(eps.len());
        for (&xv, &e) in x.data().iter().zip(&eps) {
            let z0 = (xv as f64 - s * e as f64) / a;
            clean.push(z0 as f32);
            next.push((pa * z0 + ps * e as f64) as f32);
        }
        s0 = Tensor::new(bshape.clone(), clean);
        x = Tensor::new(bshape.clone(), next);
    }
    unbatch_latents(&s0)
}

pub fn sample<P: EpsPredictor + ?Sized>(
    model: &P,
    cond: &Embedding,
    steps: usize,
    guidance: f64,
    seed: u64,
) -> Result<Latent> {
    sample_batch(model, cond, steps, guidance, &[seed]).map(|mut v| v.pop().unwrap())
}
