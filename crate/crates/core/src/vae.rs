//! Convolutional VAE bridging log-Mel grids and the diffusion latent space.
//!
//! The encoder downsamples by `ratio` (a power of two) with strided convs and
//! emits a mean and log-variance per latent element. Latents handed to the
//! rest of the system are divided by `latent_std`, estimated on the training
//! corpus after fitting, and multiplied back before decoding.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{MelConfig, MelSpec};
use crate::error::{Error, Result};
use crate::features::{mel_batch, shuffled_batches, LabeledMel, MelNorm};
use crate::latent::{latent_batch, unbatch_latents, Latent};
use crate::mini_clap::TrainReport;
use crate::nn::{init_conv, normal, Adam, AdamConfig, Bound, Graph, Params, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeConfig {
    pub mel_bins: usize,
    pub latent_channels: usize,
    pub ratio: usize,
    /// Channels at full resolution; deeper levels use `2×hidden`.
    pub hidden: usize,
    pub kl_weight: f64,
    pub norm: MelNorm,
}

impl VaeConfig {
    pub fn desk() -> Self {
        Self {
            mel_bins: 32,
            latent_channels: 4,
            ratio: 4,
            hidden: 16,
            kl_weight: 1e-4,
            norm: MelNorm::default(),
        }
    }

    pub fn paper() -> Self {
        Self {
            mel_bins: 64,
            latent_channels: 8,
            hidden: 32,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.ratio.is_power_of_two() || self.ratio < 2 {
            return Err(Error::InvalidArgument(
                "vae ratio must be a power of two >= 2".into(),
            ));
        }
        if self.latent_channels == 0 {
            return Err(Error::InvalidArgument(
                "vae needs at least one latent channel".into(),
            ));
        }
        if self.kl_weight < 0.0 {
            return Err(Error::InvalidArgument(
                "kl_weight must be non-negative".into(),
            ));
        }
        if !self.mel_bins.is_multiple_of(self.ratio) {
            return Err(Error::Shape(format!(
                "mel bins {} not divisible by r={}",
                self.mel_bins, self.ratio
            )));
        }
        Ok(())
    }

    fn levels(&self) -> usize {
        self.ratio.trailing_zeros() as usize
    }

    fn width(&self, level: usize) -> usize {
        if level == 0 {
            self.hidden
        } else {
            2 * self.hidden
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Random time crops of this many frames (0 trains on full grids).
    pub crop_frames: usize,
    pub seed: u64,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            lr: 2e-3,
            batch_size: 16,
            crop_frames: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncodeMode {
    Mean,
    Sample,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VaeModel<T: Real = f32> {
    pub config: VaeConfig,
    pub mel: MelConfig,
    pub params: Params<T>,
    pub latent_std: f64,
}

impl<T: Real> VaeModel<T> {
    pub fn new(config: VaeConfig, mel: MelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        if mel.mel_bins != config.mel_bins {
            return Err(Error::Shape(
                "vae mel_bins must match the mel config".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        let c = config.latent_channels;
        let levels = config.levels();
        init_conv(&mut p, &mut rng, "enc.in", 1, config.width(0), 3);
        for l in 0..levels {
            init_conv(
                &mut p,
                &mut rng,
                &format!("enc.down{l}"),
                config.width(l),
                config.width(l + 1),
                3,
            );
        }
        let deep = config.width(levels);
        init_conv(&mut p, &mut rng, "enc.mid", deep, deep, 3);
        init_conv(&mut p, &mut rng, "enc.out", deep, 2 * c, 3);
        init_conv(&mut p, &mut rng, "dec.in", c, deep, 3);
        init_conv(&mut p, &mut rng, "dec.mid", deep, deep, 3);
        for l in (0..levels).rev() {
            init_conv(
                &mut p,
                &mut rng,
                &format!("dec.up{l}"),
                config.width(l + 1),
                config.width(l),
                3,
            );
        }
        init_conv(&mut p, &mut rng, "dec.out", config.width(0), 1, 3);
        Ok(Self {
            config,
            mel,
            params: p,
            latent_std: 1.0,
        })
    }

    pub fn cast<U: Real>(&self) -> VaeModel<U> {
        VaeModel {
            config: self.config.clone(),
            mel: self.mel.clone(),
            params: self.params.cast(),
            latent_std: self.latent_std,
        }
    }

    /// Latent shape for a grid of `frames` frames.
    pub fn latent_shape(&self, frames: usize) -> Result<[usize; 3]> {
        let r = self.config.ratio;
        if !frames.is_multiple_of(r) || !self.config.mel_bins.is_multiple_of(r) {
            return Err(Error::Shape(format!(
                "mel {}x{} not divisible by r={r}",
                self.config.mel_bins, frames
            )));
        }
        Ok([
            self.config.latent_channels,
            self.config.mel_bins / r,
            frames / r,
        ])
    }

    /// Returns `(mean, log_variance)` in the unscaled latent space.
    pub fn encoder_forward<'g>(&self, b: &Bound<'g, T>, x: Var<'g, T>) -> (Var<'g, T>, Var<'g, T>) {
        let mut h = b.conv("enc.in", x, 1, 1).silu();
        for l in 0..self.config.levels() {
            h = b.conv(&format!("enc.down{l}"), h, 2, 1).silu();
        }
        h = h.add(b.conv("enc.mid", h, 1, 1).silu());
        let out = b.conv("enc.out", h, 1, 1);
        let c = self.config.latent_channels;
        (out.narrow(1, 0, c), out.narrow(1, c, c))
    }

    /// Normalised Mel prediction from an unscaled latent.
    pub fn decoder_forward<'g>(&self, b: &Bound<'g, T>, z: Var<'g, T>) -> Var<'g, T> {
        let mut h = b.conv("dec.in", z, 1, 1).silu();
        h = h.add(b.conv("dec.mid", h, 1, 1).silu());
        for l in (0..self.config.levels()).rev() {
            h = b.conv(&format!("dec.up{l}"), h.upsample2(), 1, 1).silu();
        }
        b.conv("dec.out", h, 1, 1)
    }

    fn check_mel(&self, m: &MelSpec) -> Result<()> {
        if m.n_mels() != self.config.mel_bins {
            return Err(Error::Shape(format!(
                "vae expects {} mel bins, got {}",
                self.config.mel_bins,
                m.n_mels()
            )));
        }
        self.latent_shape(m.frames()).map(|_| ())
    }

    pub fn encode(&self, m: &MelSpec, mode: EncodeMode, seed: u64) -> Result<Latent> {
        self.encode_batch(&[m], mode, seed)
            .map(|mut v| v.pop().unwrap())
    }

    /// Scaled latents for a batch of equally sized grids.
    pub fn encode_batch(
        &self,
        mels: &[&MelSpec],
        mode: EncodeMode,
        seed: u64,
    ) -> Result<Vec<Latent>> {
        if mels.is_empty() {
            return Ok(Vec::new());
        }
        for m in mels {
            self.check_mel(m)?;
        }
        let g = Graph::new();
        let b = self.params.bind(&g, false);
        let x = g.constant(mel_batch(mels, self.config.norm)?);
        let (mu, logvar) = self.encoder_forward(&b, x);
        let mu = mu.value();
        let mut z: Tensor<T> = (*mu).clone();
        if mode == EncodeMode::Sample {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let lv = logvar.value();
            let eta = normal::<T>(&mut rng, mu.shape(), 1.0);
            let half = T::from_f64c(0.5);
            for ((zv, &l), &e) in z.data_mut().iter_mut().zip(lv.data()).zip(eta.data()) {
                *zv = *zv + (l * half).exp() * e;
            }
        }
        let inv = T::from_f64c(1.0 / self.latent_std);
        unbatch_latents(&z.map(|v| v * inv))
    }

    pub fn decode(&self, z: &Latent) -> Result<MelSpec> {
        self.decode_batch(&[z]).map(|mut v| v.pop().unwrap())
    }

    pub fn decode_batch(&self, zs: &[&Latent]) -> Result<Vec<MelSpec>> {
        if zs.is_empty() {
            return Ok(Vec::new());
        }
        let [c, h, w] = zs[0].shape();
        let r = self.config.ratio;
        if c != self.config.latent_channels || h * r != self.config.mel_bins {
            return Err(Error::Shape(format!(
                "latent {:?} incompatible with vae (C={}, F={}, r={r})",
                zs[0].shape(),
                self.config.latent_channels,
                self.config.mel_bins
            )));
        }
        let g = Graph::new();
        let b = self.params.bind(&g, false);
        let s = T::from_f64c(self.latent_std);
        let z = g.constant(latent_batch::<T>(zs)?.map(|v| v * s));
        let out = self.decoder_forward(&b, z).value();
        let frames = w * r;
        let per = self.config.mel_bins * frames;
        let lo = self.mel.log_min();
        out.data()
            .chunks(per)
            .map(|ch| {
                let vals = ch
                    .iter()
                    .map(|v| self.config.norm.invert(v.as_f64() as f32).max(lo))
                    .collect();
                MelSpec::new(vals, frames, self.mel.clone())
            })
            .collect()
    }

    /// Reconstruction MSE + kl_weight·KL on a normalised `[B,1,F,T]` batch,
    /// with reparameterisation noise `eta`. Returns `(total, recon, kl)`.
    pub fn elbo_graph<'g>(
        &self,
        b: &Bound<'g, T>,
        x: Var<'g, T>,
        eta: Var<'g, T>,
    ) -> (Var<'g, T>, Var<'g, T>, Var<'g, T>) {
        let (mu, logvar) = self.encoder_forward(b, x);
        let half = T::from_f64c(0.5);
        let z = mu.add(logvar.scale(half).exp().mul(eta));
        let recon = self.decoder_forward(b, z).sub(x).square().mean();
        let kl = kl_graph(mu, logvar);
        let total = recon.add(kl.scale(T::from_f64c(self.config.kl_weight)));
        (total, recon, kl)
    }
}

/// Mean over elements of `½(μ² + σ² − 1 − log σ²)`.
pub fn kl_graph<'g, T: Real>(mu: Var<'g, T>, logvar: Var<'g, T>) -> Var<'g, T> {
    let half = T::from_f64c(0.5);
    mu.square()
        .add(logvar.exp())
        .sub(logvar)
        .add_const(-T::one())
        .mean()
        .scale(half)
}

/// Scalar KL of a diagonal Gaussian against N(0, I), averaged per element.
pub fn kl_divergence(mu: &[f64], logvar: &[f64]) -> f64 {
    let n = mu.len().max(1) as f64;
    mu.iter()
        .zip(logvar)
        .map(|(m, l)| 0.5 * (m * m + l.exp() - 1.0 - l))
        .sum::<f64>()
        / n
}

fn crop(m: &MelSpec, start: usize, len: usize) -> Result<MelSpec> {
    let f = m.n_mels();
    let mut v = Vec::with_capacity(f * len);
    for bin in 0..f {
        v.extend_from_slice(&m.values()[bin * m.frames() + start..bin * m.frames() + start + len]);
    }
    MelSpec::new(v, len, m.config().clone())
}

pub fn train_vae(
    data: &[LabeledMel],
    mel: &MelConfig,
    model_cfg: VaeConfig,
    cfg: &VaeTrainConfig,
) -> Result<(VaeModel, TrainReport)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument(
            "vae training corpus is empty".into(),
        ));
    }
    let mut model = VaeModel::<f32>::new(model_cfg, mel.clone(), cfg.seed)?;
    let frames = data[0].mel.frames();
    model.latent_shape(frames)?;
    let r = model.config.ratio;
    let crop_len = if cfg.crop_frames == 0 || cfg.crop_frames >= frames {
        frames
    } else {
        (cfg.crop_frames / r).max(1) * r
    };
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5AE);
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        let batches = shuffled_batches(data.len(), cfg.batch_size, &mut rng);
        let mut total = 0.0;
        for idx in &batches {
            let crops = idx
                .iter()
                .map(|&i| {
                    let start = if crop_len < frames {
                        rng.random_range(0..=(frames - crop_len) / r) * r
                    } else {
                        0
                    };
                    crop(&data[i].mel, start, crop_len)
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&MelSpec> = crops.iter().collect();
            let g = Graph::new();
            let b = model.params.bind(&g, true);
            let x = g.constant(mel_batch(&refs, model.config.norm)?);
            let lshape = [
                idx.len(),
                model.config.latent_channels,
                model.config.mel_bins / r,
                crop_len / r,
            ];
            let eta = g.constant(normal(&mut rng, &lshape, 1.0));
            let (loss, _, _) = model.elbo_graph(&b, x, eta);
            total += loss.value().data()[0] as f64;
            let mut grads = g.backward(loss);
            opt.step(&mut model.params, &b.grads(&mut grads));
        }
        let mean = total / batches.len() as f64;
        log::info!("vae epoch {epoch}: loss {mean:.5}");
        report.epoch_losses.push(mean);
    }
    model.latent_std = estimate_latent_std(&model, data)?;
    Ok((model, report))
}

/// Root-mean-square of posterior means over a corpus (spread about zero, so
/// per-channel offsets count towards the scale).
pub fn estimate_latent_std(model: &VaeModel, data: &[LabeledMel]) -> Result<f64> {
    let mut unscaled = model.clone();
    unscaled.latent_std = 1.0;
    let (mut sq, mut n) = (0.0, 0usize);
    for chunk in data.chunks(16) {
        let mels: Vec<&MelSpec> = chunk.iter().map(|d| &d.mel).collect();
        for z in unscaled.encode_batch(&mels, EncodeMode::Mean, 0)? {
            sq += z.values().iter().map(|&v| (v as f64).powi(2)).sum::<f64>();
            n += z.len();
        }
    }
    Ok((sq / n as f64).sqrt().max(1e-6) as f32 as f64)
}
