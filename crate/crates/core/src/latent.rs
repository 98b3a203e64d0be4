use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};

/// `C × (F/r) × (T/r)` array in the diffusion latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct Latent {
    values: Vec<f32>,
    shape: [usize; 3],
    /// Diffusion step when the latent is a noised sample.
    pub step: Option<usize>,
}

impl Latent {
    pub fn new(values: Vec<f32>, shape: [usize; 3]) -> Result<Self> {
        if values.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!(
                "latent data {} does not fit {:?}",
                values.len(),
                shape
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "latent values must be finite".into(),
            ));
        }
        Ok(Self {
            values,
            shape,
            step: None,
        })
    }

    pub fn zeros(shape: [usize; 3]) -> Self {
        Self {
            values: vec![0.0; shape.iter().product()],
            shape,
            step: None,
        }
    }

    pub fn with_step(mut self, step: usize) -> Self {
        self.step = Some(step);
        self
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check_shape(&self, expected: [usize; 3]) -> Result<()> {
        if self.shape != expected {
            return Err(Error::Shape(format!(
                "latent {:?}, expected {:?}",
                self.shape, expected
            )));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Latent) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((*a as f64 - *b as f64).abs()))
    }
}

/// Stacks latents into `[B,C,H,W]`.
pub fn latent_batch<T: Real>(zs: &[&Latent]) -> Result<Tensor<T>> {
    let first = zs
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty latent batch".into()))?;
    let shape = first.shape();
    let mut data = Vec::with_capacity(zs.len() * first.len());
    for z in zs {
        z.check_shape(shape)?;
        data.extend(z.values().iter().map(|&v| T::from_f64c(v as f64)));
    }
    Ok(Tensor::new(
        vec![zs.len(), shape[0], shape[1], shape[2]],
        data,
    ))
}

/// Splits a `[B,C,H,W]` tensor into latents.
pub fn unbatch_latents<T: Real>(t: &Tensor<T>) -> Result<Vec<Latent>> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("expected [B,C,H,W], got {s:?}")));
    }
    let per = s[1] * s[2] * s[3];
    t.data()
        .chunks(per)
        .map(|c| {
            Latent::new(
                c.iter().map(|v| v.as_f64() as f32).collect(),
                [s[1], s[2], s[3]],
            )
        })
        .collect()
}
