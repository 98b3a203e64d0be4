use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::schedule::{NoiseSchedule, ScheduleConfig};
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::latent::{latent_batch, unbatch_latents, Latent};
use crate::nn::{init_conv, init_linear, normal, Bound, Graph, Params, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LdmConfig {
    pub latent_shape: [usize; 3],
    /// Width at latent resolution; the inner level uses twice this.
    pub channels: usize,
    pub cond_dim: usize,
    pub time_dim: usize,
    pub schedule: ScheduleConfig,
}

impl LdmConfig {
    pub fn desk() -> Self {
        Self {
            latent_shape: [4, 8, 64],
            channels: 24,
            cond_dim: 64,
            time_dim: 64,
            schedule: ScheduleConfig::default(),
        }
    }

    pub fn paper() -> Self {
        Self {
            latent_shape: [8, 16, 256],
            channels: 64,
            cond_dim: 512,
            time_dim: 128,
            schedule: ScheduleConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.latent_shape;
        if c == 0 || h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "latent shape {:?} needs C >= 1 and even spatial dims",
                self.latent_shape
            )));
        }
        if self.channels == 0
            || self.cond_dim == 0
            || self.time_dim < 2
            || !self.time_dim.is_multiple_of(2)
        {
            return Err(Error::InvalidArgument(
                "ldm widths must be positive (time_dim even)".into(),
            ));
        }
        Ok(())
    }
}

/// Conditional noise predictor over latents with FiLM conditioning on time
/// and a text embedding. A learned null embedding stands in for "no condition".
#[derive(Clone, Debug, PartialEq)]
pub struct LdmModel<T: Real = f32> {
    pub config: LdmConfig,
    pub params: Params<T>,
    pub schedule: NoiseSchedule,
}

const RES_BLOCKS: [(&str, usize); 3] = [("res0", 1), ("res1", 2), ("res2", 1)];

impl<T: Real> LdmModel<T> {
    pub fn new(config: LdmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let schedule = NoiseSchedule::from_config(&config.schedule)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        let (c, ch, td, d) = (
            config.latent_shape[0],
            config.channels,
            config.time_dim,
            config.cond_dim,
        );
        init_linear(&mut p, &mut rng, "time.l1", td, td);
        init_linear(&mut p, &mut rng, "time.l2", td, td);
        init_linear(&mut p, &mut rng, "cond.proj", d, td);
        p.insert(
            "null_cond",
            normal::<f32>(&mut rng, &[d], 1.0 / (d as f64).sqrt()).cast(),
        );
        init_conv(&mut p, &mut rng, "in", c, ch, 3);
        for (name, mult) in RES_BLOCKS {
            let w = ch * mult;
            init_conv(&mut p, &mut rng, &format!("{name}.conv1"), w, w, 3);
            init_linear(&mut p, &mut rng, &format!("{name}.film"), td, 2 * w);
            init_conv(&mut p, &mut rng, &format!("{name}.conv2"), w, w, 3);
        }
        init_conv(&mut p, &mut rng, "down", ch, 2 * ch, 3);
        init_conv(&mut p, &mut rng, "up", 2 * ch, ch, 3);
        init_conv(&mut p, &mut rng, "merge", 2 * ch, ch, 3);
        init_conv(&mut p, &mut rng, "out", ch, c, 3);
        Ok(Self {
            config,
            params: p,
            schedule,
        })
    }

    pub fn cast<U: Real>(&self) -> LdmModel<U> {
        LdmModel {
            config: self.config.clone(),
            params: self.params.cast(),
            schedule: self.schedule.clone(),
        }
    }

    /// Parameters owned by the noise predictor (excludes any tuning layer).
    pub fn is_net_param(name: &str) -> bool {
        !name.starts_with("tuning.")
    }

    pub fn null_embedding(&self) -> Result<Embedding> {
        let t = self.params.get("null_cond").expect("null_cond");
        Embedding::new(t.data().iter().map(|v| v.as_f64() as f32).collect())
    }

    /// Sinusoidal features of the step index, `[B, time_dim]`.
    pub fn time_features(&self, steps: &[usize]) -> Tensor<T> {
        let td = self.config.time_dim;
        let half = td / 2;
        let mut data = Vec::with_capacity(steps.len() * td);
        for &n in steps {
            for k in 0..half {
                let f = (-(10000f64.ln()) * k as f64 / half as f64).exp();
                data.push(T::from_f64c((n as f64 * f).sin()));
            }
            for k in 0..half {
                let f = (-(10000f64.ln()) * k as f64 / half as f64).exp();
                data.push(T::from_f64c((n as f64 * f).cos()));
            }
        }
        Tensor::new(vec![steps.len(), td], data)
    }

    /// Condition rows: `table` is `[K, D]`; index `K` selects the null embedding.
    pub fn condition_rows<'g>(
        &self,
        b: &Bound<'g, T>,
        table: Var<'g, T>,
        idx: &[usize],
    ) -> Var<'g, T> {
        let d = self.config.cond_dim;
        table
            .concat(b.get("null_cond").reshape(&[1, d]), 0)
            .gather_rows(idx)
    }

    fn res_block<'g>(
        &self,
        b: &Bound<'g, T>,
        name: &str,
        x: Var<'g, T>,
        emb: Var<'g, T>,
    ) -> Var<'g, T> {
        let w = x.shape()[1];
        let h = b.conv(&format!("{name}.conv1"), x.silu(), 1, 1);
        let film = b.linear(&format!("{name}.film"), emb);
        let h = h.film(film.narrow(1, 0, w), film.narrow(1, w, w));
        let h = b.conv(&format!("{name}.conv2"), h.silu(), 1, 1);
        x.add(h)
    }

    /// Predicted noise for `[B,C,H,W]` inputs at per-sample steps with `[B,D]` conditions.
    pub fn forward<'g>(
        &self,
        b: &Bound<'g, T>,
        x: Var<'g, T>,
        steps: &[usize],
        cond: Var<'g, T>,
    ) -> Var<'g, T> {
        let g = x.graph();
        let t = g.constant(self.time_features(steps));
        let temb = b.linear("time.l2", b.linear("time.l1", t).silu());
        let emb = temb.add(b.linear("cond.proj", cond)).silu();
        let h0 = b.conv("in", x, 1, 1);
        let h1 = self.res_block(b, "res0", h0, emb);
        let h2 = b.conv("down", h1, 2, 1);
        let h3 = self.res_block(b, "res1", h2, emb);
        let h4 = b.conv("up", h3.upsample2(), 1, 1);
        let h5 = b.conv("merge", h4.concat(h1, 1), 1, 1);
        let h6 = self.res_block(b, "res2", h5, emb);
        b.conv("out", h6.silu(), 1, 1)
    }

    fn cond_tensor(&self, cond: Option<&Embedding>, batch: usize) -> Result<Tensor<T>> {
        let d = self.config.cond_dim;
        let row: Vec<T> = match cond {
            Some(e) => {
                if e.dim() != d {
                    return Err(Error::Shape(format!(
                        "condition dim {} vs model {d}",
                        e.dim()
                    )));
                }
                e.values().iter().map(|&v| T::from_f64c(v as f64)).collect()
            }
            None => self
                .params
                .get("null_cond")
                .expect("null_cond")
                .data()
                .to_vec(),
        };
        let mut data = Vec::with_capacity(batch * d);
        for _ in 0..batch {
            data.extend_from_slice(&row);
        }
        Ok(Tensor::new(vec![batch, d], data))
    }

    /// Noise prediction on a batch sharing one step and condition.
    pub fn predict_tensor(
        &self,
        x: &Tensor<T>,
        n: usize,
        cond: Option<&Embedding>,
    ) -> Result<Tensor<T>> {
        self.schedule.check_step(n)?;
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.config.latent_shape[..] {
            return Err(Error::Shape(format!(
                "ldm input {:?}, expected [B, {:?}]",
                s, self.config.latent_shape
            )));
        }
        let g = Graph::new();
        let b = self.params.bind(&g, false);
        let c = g.constant(self.cond_tensor(cond, s[0])?);
        let out = self.forward(&b, g.constant(x.clone()), &vec![n; s[0]], c);
        Ok((*out.value()).clone())
    }

    pub fn predict_eps(&self, s_n: &Latent, n: usize, cond: Option<&Embedding>) -> Result<Latent> {
        s_n.check_shape(self.config.latent_shape)?;
        let out = self.predict_tensor(&latent_batch(&[s_n])?, n, cond)?;
        Ok(unbatch_latents(&out)?.pop().unwrap())
    }
}
