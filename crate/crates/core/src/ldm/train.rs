use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{step_weight, LossConfig};
use super::net::LdmModel;
use super::schedule::{predict_s0, NoiseSchedule};
use crate::dataset::ClassLabel;
use crate::dsp::MelSpec;
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::features::{shuffled_batches, LabeledMel};
use crate::latent::{latent_batch, Latent};
use crate::latent_clap::{distill_loss, LatentClapModel};
use crate::mini_clap::{to_embeddings, ClapModel};
use crate::nn::{normal, Adam, AdamConfig, Bound, Graph, Params, Real, Tensor, Var};
use crate::vae::{EncodeMode, VaeModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Train an affine layer after the text branch together with the predictor.
    pub tuning: bool,
    pub loss: LossConfig,
}

impl FinetuneConfig {
    pub fn desk() -> Self {
        Self {
            epochs: 50,
            lr: 1e-3,
            batch_size: 16,
            seed: 0,
            tuning: false,
            loss: LossConfig::default(),
        }
    }

    pub fn paper() -> Self {
        Self {
            epochs: 500,
            lr: 3e-6,
            ..Self::desk()
        }
    }
}

/// Clean latents, class rows and frozen audio embeddings for every clip.
#[derive(Clone, Debug)]
pub struct FinetuneData {
    pub latents: Vec<Latent>,
    pub rows: Vec<usize>,
    pub audio: Vec<Embedding>,
}

impl FinetuneData {
    pub fn prepare(data: &[LabeledMel], clap: &ClapModel, vae: &VaeModel) -> Result<Self> {
        let mut out = Self {
            latents: Vec::with_capacity(data.len()),
            rows: Vec::with_capacity(data.len()),
            audio: Vec::with_capacity(data.len()),
        };
        for chunk in data.chunks(16) {
            let mels: Vec<&MelSpec> = chunk.iter().map(|d| &d.mel).collect();
            out.latents
                .extend(vae.encode_batch(&mels, EncodeMode::Mean, 0)?);
            out.audio.extend(clap.encode_audio_batch(&mels)?);
            for d in chunk {
                out.rows.push(clap.label_index(d.label)?);
            }
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.latents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.latents.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub epoch: usize,
    pub ddpm_loss: f64,
    /// Absent when the auxiliary term is switched off.
    pub lclap_loss: Option<f64>,
    pub total: f64,
}

/// Text embeddings of all CLAP classes as seen by the predictor, `[K, D]`.
fn text_table<'g, T: Real>(
    clap_b: &Bound<'g, T>,
    clap: &ClapModel<T>,
    ldm_b: &Bound<'g, T>,
    tuning: bool,
) -> Var<'g, T> {
    let rows: Vec<usize> = (0..clap.classes.len()).collect();
    let mut h = clap.text_hidden(clap_b, &rows);
    if tuning {
        h = ldm_b.linear("tuning", h);
    }
    h.l2_normalize()
}

/// Condition embedding for a class, applying the tuning layer stored in the
/// predictor's checkpoint when present.
pub fn text_condition(clap: &ClapModel, ldm: &LdmModel, label: ClassLabel) -> Result<Embedding> {
    let row = clap.label_index(label)?;
    let g = Graph::new();
    let cb = clap.params.bind(&g, false);
    let lb = ldm.params.bind(&g, false);
    let table = text_table(&cb, clap, &lb, ldm.params.contains("tuning.w"));
    to_embeddings(&table.value()).swap_remove(row)
}

/// `Σ_i w(n_i)·MSE(e_audio_i, φ(ŝ0_i)) / B` on a batch, with ŝ0 rebuilt from the
/// predicted noise so gradients reach the predictor.
#[allow(clippy::too_many_arguments)]
pub fn lclap_term_graph<'g, T: Real>(
    sched: &NoiseSchedule,
    lclap: &LatentClapModel<T>,
    lclap_b: &Bound<'g, T>,
    s_n: Var<'g, T>,
    eps_hat: Var<'g, T>,
    steps: &[usize],
    e_audio: Var<'g, T>,
    cfg: &LossConfig,
) -> Result<Var<'g, T>> {
    let bsz = steps.len();
    let mut inv_a = Vec::with_capacity(bsz);
    let mut ratio = Vec::with_capacity(bsz);
    let mut w = Vec::with_capacity(bsz);
    let d = e_audio.shape()[1];
    for &n in steps {
        sched.check_step(n)?;
        let (a, s) = sched.coefficients(n);
        inv_a.push(T::from_f64c(1.0 / a));
        ratio.push(T::from_f64c(s / a));
        w.push(T::from_f64c(step_weight(n as i64, cfg)? / (bsz * d) as f64));
    }
    let s0_hat = s_n.scale_batch(&inv_a).sub(eps_hat.scale_batch(&ratio));
    let e = lclap.forward(lclap_b, s0_hat);
    Ok(e.sub(e_audio).square().scale_batch(&w).sum())
}

/// Scalar auxiliary loss for one noised latent under a given condition.
pub fn latent_clap_loss_term(
    e_audio: &Embedding,
    model: &LdmModel,
    lclap: &LatentClapModel,
    s_n: &Latent,
    n: usize,
    cond: &Embedding,
    cfg: &LossConfig,
) -> Result<f64> {
    let eps_hat = model.predict_eps(s_n, n, Some(cond))?;
    let s0 = predict_s0(s_n, n, &eps_hat, &model.schedule)?;
    let e = lclap.encode(&s0)?;
    Ok(step_weight(n as i64, cfg)? * distill_loss(e_audio, &e)?)
}

fn embedding_rows<T: Real>(es: &[&Embedding]) -> Tensor<T> {
    let d = es[0].dim();
    Tensor::new(
        vec![es.len(), d],
        es.iter()
            .flat_map(|e| e.values().iter().map(|&v| T::from_f64c(v as f64)))
            .collect(),
    )
}

/// Trains the predictor on `total = ddpm + λ·lclap`. The CLAP, VAE and
/// latent CLAP are read-only; only predictor weights (plus the tuning layer
/// when enabled) are updated. Passing `lclap = None` trains on the DDPM term
/// alone and consumes randomness identically to `λ = 0`.
pub fn finetune_ldm(
    init: &LdmModel,
    data: &FinetuneData,
    clap: &ClapModel,
    lclap: Option<&LatentClapModel>,
    cfg: &FinetuneConfig,
) -> Result<(LdmModel, Vec<TrainingRecord>)> {
    cfg.loss.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("fine-tuning corpus is empty".into()));
    }
    let shape = init.config.latent_shape;
    data.latents[0].check_shape(shape)?;
    if clap.config.embed_dim != init.config.cond_dim {
        return Err(Error::Shape(format!(
            "clap dim {} vs predictor condition dim {}",
            clap.config.embed_dim, init.config.cond_dim
        )));
    }
    if let Some(lc) = lclap {
        if lc.config.latent_shape != shape || lc.config.embed_dim != clap.config.embed_dim {
            return Err(Error::Shape(
                "latent clap is incompatible with the predictor".into(),
            ));
        }
    }
    let use_aux = lclap.is_some() && cfg.loss.lambda > 0.0;
    let mut model = init.clone();
    if cfg.tuning && !model.params.contains("tuning.w") {
        for name in ["tuning.w", "tuning.b"] {
            model.params.insert(
                name,
                clap.params.get(name).expect("clap tuning layer").clone(),
            );
        }
    }
    let tuning = model.params.contains("tuning.w");
    let null_row = clap.classes.len();
    let steps_total = model.schedule.steps();
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1D);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let batches = shuffled_batches(data.len(), cfg.batch_size, &mut rng);
        let (mut sd, mut sl, mut st) = (0.0, 0.0, 0.0);
        for idx in &batches {
            let bsz = idx.len();
            let steps: Vec<usize> = idx
                .iter()
                .map(|_| rng.random_range(1..=steps_total))
                .collect();
            let cond_idx: Vec<usize> = idx
                .iter()
                .map(|&i| {
                    if rng.random::<f64>() < cfg.loss.cond_dropout_p {
                        null_row
                    } else {
                        data.rows[i]
                    }
                })
                .collect();
            let eps: Tensor<f32> = normal(&mut rng, &[bsz, shape[0], shape[1], shape[2]], 1.0);
            let zs: Vec<&Latent> = idx.iter().map(|&i| &data.latents[i]).collect();
            let s0 = latent_batch::<f32>(&zs)?;
            let per = s0.len() / bsz;
            let mut noised = Vec::with_capacity(s0.len());
            for (k, &n) in steps.iter().enumerate() {
                let (a, s) = model.schedule.coefficients(n);
                let range = k * per..(k + 1) * per;
                for (&x, &e) in s0.data()[range.clone()].iter().zip(&eps.data()[range]) {
                    noised.push((a * x as f64 + s * e as f64) as f32);
                }
            }
            let g = Graph::new();
            let b = model.params.bind(&g, true);
            let cb = clap.params.bind(&g, false);
            let table = text_table(&cb, clap, &b, tuning);
            let cond = model.condition_rows(&b, table, &cond_idx);
            let s_n = g.constant(Tensor::new(eps.shape().to_vec(), noised));
            let eps_hat = model.forward(&b, s_n, &steps, cond);
            let ddpm = eps_hat.sub(g.constant(eps)).square().mean();
            let mut total = ddpm;
            let mut aux = None;
            if use_aux {
                let lc = lclap.unwrap();
                let lb = lc.params.bind(&g, false);
                let es: Vec<&Embedding> = idx.iter().map(|&i| &data.audio[i]).collect();
                let target = g.constant(embedding_rows(&es));
                let term = lclap_term_graph(
                    &model.schedule,
                    lc,
                    &lb,
                    s_n,
                    eps_hat,
                    &steps,
                    target,
                    &cfg.loss,
                )?;
                aux = Some(term.value().data()[0] as f64);
                total = ddpm.add(term.scale(cfg.loss.lambda as f32));
            }
            sd += ddpm.value().data()[0] as f64;
            sl += aux.unwrap_or(0.0);
            st += total.value().data()[0] as f64;
            let mut grads = g.backward(total);
            let grads = b.grads(&mut grads);
            opt.step(&mut model.params, &grads);
        }
        let nb = batches.len() as f64;
        let rec = TrainingRecord {
            epoch,
            ddpm_loss: sd / nb,
            lclap_loss: use_aux.then_some(sl / nb),
            total: st / nb,
        };
        log::info!(
            "ldm epoch {epoch}: ddpm {:.5} lclap {:?} total {:.5}",
            rec.ddpm_loss,
            rec.lclap_loss,
            rec.total
        );
        log.push(rec);
    }
    Ok((model, log))
}

/// Parameter digest restricted to predictor weights.
pub fn predictor_digest<T: Real>(params: &Params<T>) -> String {
    let mut p = params.clone();
    for n in ["tuning.w", "tuning.b"] {
        p.remove(n);
    }
    p.digest()
}
