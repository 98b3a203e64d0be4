//! Encoder from VAE latents straight into the contrastive embedding space,
//! distilled from a frozen audio branch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::MelSpec;
use crate::embedding::{cosine_similarity, Embedding};
use crate::error::{Error, Result};
use crate::features::{shuffled_batches, LabeledMel};
use crate::latent::{latent_batch, Latent};
use crate::mini_clap::{to_embeddings, ClapModel, TrainReport};
use crate::nn::{
    init_conv, init_linear, Adam, AdamConfig, Bound, Graph, Params, Real, Tensor, Var,
};
use crate::vae::{EncodeMode, VaeModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentClapConfig {
    pub latent_shape: [usize; 3],
    pub embed_dim: usize,
    pub channels: Vec<usize>,
}

impl LatentClapConfig {
    pub fn desk() -> Self {
        Self {
            latent_shape: [4, 8, 64],
            embed_dim: 64,
            channels: vec![32, 64, 128],
        }
    }

    pub fn paper() -> Self {
        Self {
            latent_shape: [8, 16, 256],
            embed_dim: 512,
            channels: vec![64, 128, 256],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentClapTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for LatentClapTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            batch_size: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentClapModel<T: Real = f32> {
    pub config: LatentClapConfig,
    pub params: Params<T>,
}

impl<T: Real> LatentClapModel<T> {
    pub fn new(config: LatentClapConfig, seed: u64) -> Result<Self> {
        if config.channels.is_empty() || config.embed_dim == 0 {
            return Err(Error::InvalidArgument(
                "latent clap needs conv blocks and a positive output dim".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        let mut cin = config.latent_shape[0];
        for (i, &c) in config.channels.iter().enumerate() {
            init_conv(&mut p, &mut rng, &format!("block{i}.a"), cin, c, 3);
            init_conv(&mut p, &mut rng, &format!("block{i}.b"), c, c, 3);
            cin = c;
        }
        init_linear(&mut p, &mut rng, "head", 2 * cin, config.embed_dim);
        Ok(Self { config, params: p })
    }

    pub fn cast<U: Real>(&self) -> LatentClapModel<U> {
        LatentClapModel {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// `[B,C,H,W]` latents to `[B,D]` unit-norm embeddings.
    pub fn forward<'g>(&self, b: &Bound<'g, T>, z: Var<'g, T>) -> Var<'g, T> {
        let mut h = z;
        for i in 0..self.config.channels.len() {
            h = b.conv(&format!("block{i}.a"), h, 1, 1).silu();
            h = b.conv(&format!("block{i}.b"), h, 2, 1).silu();
        }
        let pooled = h.spatial_mean().concat(h.spatial_max(), 1);
        b.linear("head", pooled).l2_normalize()
    }

    pub fn encode(&self, z: &Latent) -> Result<Embedding> {
        self.encode_batch(&[z]).map(|mut v| v.pop().unwrap())
    }

    pub fn encode_batch(&self, zs: &[&Latent]) -> Result<Vec<Embedding>> {
        if zs.is_empty() {
            return Ok(Vec::new());
        }
        for z in zs {
            z.check_shape(self.config.latent_shape)?;
        }
        let g = Graph::new();
        let b = self.params.bind(&g, false);
        let x = g.constant(latent_batch(zs)?);
        to_embeddings(&self.forward(&b, x).value())
            .into_iter()
            .collect()
    }
}

/// Mean squared error over embedding components.
pub fn distill_loss(a: &Embedding, b: &Embedding) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "embedding dims {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(a.values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.dim() as f64)
}

/// Row-wise MSE averaged over the batch, i.e. the mean over all elements.
pub fn distill_loss_graph<'g, T: Real>(target: Var<'g, T>, pred: Var<'g, T>) -> Var<'g, T> {
    pred.sub(target).square().mean()
}

/// Posterior-mean latents and frozen audio embeddings for a corpus.
pub fn distillation_pairs(
    data: &[LabeledMel],
    clap: &ClapModel,
    vae: &VaeModel,
) -> Result<(Vec<Latent>, Vec<Embedding>)> {
    let mut latents = Vec::with_capacity(data.len());
    let mut targets = Vec::with_capacity(data.len());
    for chunk in data.chunks(16) {
        let mels: Vec<&MelSpec> = chunk.iter().map(|d| &d.mel).collect();
        latents.extend(vae.encode_batch(&mels, EncodeMode::Mean, 0)?);
        targets.extend(clap.encode_audio_batch(&mels)?);
    }
    Ok((latents, targets))
}

fn embedding_tensor<T: Real>(es: &[&Embedding]) -> Tensor<T> {
    let d = es[0].dim();
    let data = es
        .iter()
        .flat_map(|e| e.values().iter().map(|&v| T::from_f64c(v as f64)))
        .collect();
    Tensor::new(vec![es.len(), d], data)
}

pub fn train_latent_clap(
    data: &[LabeledMel],
    clap: &ClapModel,
    vae: &VaeModel,
    model_cfg: LatentClapConfig,
    cfg: &LatentClapTrainConfig,
) -> Result<(LatentClapModel, TrainReport)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument(
            "latent clap training corpus is empty".into(),
        ));
    }
    let frames = data[0].mel.frames();
    let shape = vae.latent_shape(frames)?;
    if shape != model_cfg.latent_shape {
        return Err(Error::Shape(format!(
            "vae latents {:?} do not match latent clap input {:?}",
            shape, model_cfg.latent_shape
        )));
    }
    if clap.config.embed_dim != model_cfg.embed_dim {
        return Err(Error::Shape(format!(
            "clap dim {} vs latent clap dim {}",
            clap.config.embed_dim, model_cfg.embed_dim
        )));
    }
    let (latents, targets) = distillation_pairs(data, clap, vae)?;
    let mut model = LatentClapModel::<f32>::new(model_cfg, cfg.seed)?;
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1A7);
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        let batches = shuffled_batches(latents.len(), cfg.batch_size, &mut rng);
        let mut total = 0.0;
        for idx in &batches {
            let zs: Vec<&Latent> = idx.iter().map(|&i| &latents[i]).collect();
            let es: Vec<&Embedding> = idx.iter().map(|&i| &targets[i]).collect();
            let g = Graph::new();
            let b = model.params.bind(&g, true);
            let x = g.constant(latent_batch(&zs)?);
            let t = g.constant(embedding_tensor(&es));
            let loss = distill_loss_graph(t, model.forward(&b, x));
            total += loss.value().data()[0] as f64;
            let mut grads = g.backward(loss);
            opt.step(&mut model.params, &b.grads(&mut grads));
        }
        let mean = total / batches.len() as f64;
        log::info!("latent clap epoch {epoch}: distill loss {mean:.6}");
        report.epoch_losses.push(mean);
    }
    Ok((model, report))
}

/// Mean cosine between latent-branch and audio-branch embeddings.
pub fn agreement(
    model: &LatentClapModel,
    latents: &[Latent],
    targets: &[Embedding],
) -> Result<f64> {
    if latents.is_empty() || latents.len() != targets.len() {
        return Err(Error::InvalidArgument(
            "agreement needs matching non-empty sets".into(),
        ));
    }
    let refs: Vec<&Latent> = latents.iter().collect();
    let mut sum = 0.0;
    for (chunk, tchunk) in refs.chunks(32).zip(targets.chunks(32)) {
        for (e, t) in model.encode_batch(chunk)?.iter().zip(tchunk) {
            sum += cosine_similarity(e, t)?;
        }
    }
    Ok(sum / latents.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn emb(v: &[f32]) -> Embedding {
        Embedding::new(v.to_vec()).unwrap()
    }

    #[test]
    fn distill_reference_values() {
        let v = emb(&[0.3, -0.4, 0.5]);
        assert_eq!(distill_loss(&v, &v).unwrap(), 0.0);
        assert_eq!(
            distill_loss(&emb(&[1.0, 0.0]), &emb(&[0.0, 1.0])).unwrap(),
            1.0
        );
        assert!(distill_loss(&emb(&[1.0]), &emb(&[1.0, 0.0])).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f32> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut oracle = 0.0f64;
        for i in 0..16 {
            let d = a[i] as f64 - b[i] as f64;
            oracle += d * d;
        }
        oracle /= 16.0;
        assert!((distill_loss(&emb(&a), &emb(&b)).unwrap() - oracle).abs() < 1e-12);
        let g = Graph::<f64>::new();
        let ta = g.constant(Tensor::new(
            vec![1, 16],
            a.iter().map(|&x| x as f64).collect(),
        ));
        let tb = g.constant(Tensor::new(
            vec![1, 16],
            b.iter().map(|&x| x as f64).collect(),
        ));
        assert!((distill_loss_graph(ta, tb).value().data()[0] - oracle).abs() < 1e-12);
    }

    #[test]
    fn desk_encoder_contract() {
        let m = LatentClapModel::<f32>::new(LatentClapConfig::desk(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Latent::new(
            (0..4 * 8 * 64)
                .map(|_| rng.random_range(-2.0..2.0))
                .collect(),
            [4, 8, 64],
        )
        .unwrap();
        let e = m.encode(&z).unwrap();
        assert_eq!(e.dim(), 64);
        assert!((e.norm() - 1.0).abs() < 1e-6);
        assert_eq!(e, m.encode(&z).unwrap());
        assert_eq!(e, m.encode(&z.clone().with_step(500)).unwrap());
        assert!(m.encode(&Latent::zeros([4, 8, 32])).is_err());
    }

    proptest::proptest! {
        #[test]
        fn distill_symmetric_nonnegative(a in proptest::collection::vec(-1f32..1.0, 8), b in proptest::collection::vec(-1f32..1.0, 8)) {
            let (a, b) = (emb(&a), emb(&b));
            let ab = distill_loss(&a, &b).unwrap();
            proptest::prop_assert!(ab >= 0.0);
            proptest::prop_assert_eq!(ab, distill_loss(&b, &a).unwrap());
            if a != b { proptest::prop_assert!(ab > 0.0); }
        }
    }
}
