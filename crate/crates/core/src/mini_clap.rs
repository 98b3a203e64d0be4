//! Desk-scale contrastive text–audio model.
//!
//! The text branch is an embedding table over the closed label set followed by
//! a projection; the audio branch is a stack of strided convolutions with
//! mean+max global pooling and a projection. Both emit unit-norm vectors in the
//! same `embed_dim` space. An optional affine tuning layer sits after the text
//! branch and starts as the identity.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{label_of_prompt, ClassLabel};
use crate::dsp::MelSpec;
use crate::embedding::Embedding;
use crate::error::{Error, Result};
use crate::features::{class_balanced_batches, mel_batch, LabeledMel, MelNorm};
use crate::nn::{
    init_conv, init_linear, Adam, AdamConfig, Bound, Graph, Params, Real, Tensor, Var,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClapConfig {
    pub embed_dim: usize,
    pub text_dim: usize,
    pub mel_bins: usize,
    /// Output channels of the strided conv blocks.
    pub channels: Vec<usize>,
    pub temperature: f64,
    pub norm: MelNorm,
}

impl ClapConfig {
    pub fn desk() -> Self {
        Self {
            embed_dim: 64,
            text_dim: 32,
            mel_bins: 32,
            channels: vec![16, 32, 32, 64],
            temperature: 0.07,
            norm: MelNorm::default(),
        }
    }

    pub fn paper() -> Self {
        Self {
            embed_dim: 512,
            text_dim: 128,
            mel_bins: 64,
            channels: vec![32, 64, 128, 256],
            ..Self::desk()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClapTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClapTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-3,
            seed: 0,
        }
    }
}

const MAX_LOGIT_SCALE: f64 = 4.605_170_185_988_091; // ln 100

#[derive(Clone, Debug, PartialEq)]
pub struct ClapModel<T: Real = f32> {
    pub config: ClapConfig,
    pub classes: Vec<ClassLabel>,
    pub params: Params<T>,
    /// Whether the tuning layer is applied when callers ask for it.
    pub tuning_enabled: bool,
}

impl<T: Real> ClapModel<T> {
    pub fn new(config: ClapConfig, classes: Vec<ClassLabel>, seed: u64) -> Result<Self> {
        crate::dataset::validate_classes(&classes)?;
        if config.channels.is_empty() {
            return Err(Error::InvalidArgument(
                "clap audio encoder needs at least one block".into(),
            ));
        }
        if !(config.temperature > 0.0) {
            return Err(Error::InvalidArgument(
                "temperature must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::new();
        let d = config.embed_dim;
        p.insert(
            "text.table",
            crate::nn::normal::<f32>(&mut rng, &[classes.len(), config.text_dim], 1.0).cast(),
        );
        init_linear(&mut p, &mut rng, "text.proj", config.text_dim, d);
        let mut cin = 1;
        for (i, &c) in config.channels.iter().enumerate() {
            init_conv(&mut p, &mut rng, &format!("audio.conv{i}"), cin, c, 3);
            cin = c;
        }
        init_linear(&mut p, &mut rng, "audio.proj", 2 * cin, d);
        let mut eye = Tensor::zeros(&[d, d]);
        for i in 0..d {
            eye.data_mut()[i * d + i] = T::one();
        }
        p.insert("tuning.w", eye);
        p.insert("tuning.b", Tensor::zeros(&[d]));
        p.insert(
            "logit_scale",
            Tensor::scalar(T::from_f64c((1.0 / config.temperature).ln())),
        );
        Ok(Self {
            config,
            classes,
            params: p,
            tuning_enabled: false,
        })
    }

    pub fn cast<U: Real>(&self) -> ClapModel<U> {
        ClapModel {
            config: self.config.clone(),
            classes: self.classes.clone(),
            params: self.params.cast(),
            tuning_enabled: self.tuning_enabled,
        }
    }

    pub fn temperature(&self) -> f64 {
        (-self.params.get("logit_scale").unwrap().data()[0].as_f64()).exp()
    }

    pub fn label_index(&self, label: ClassLabel) -> Result<usize> {
        self.classes
            .iter()
            .position(|&l| l == label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    /// Text branch on label rows; `[B, D]`, unit norm.
    pub fn text_forward<'g>(
        &self,
        b: &Bound<'g, T>,
        rows: &[usize],
        use_tuning: bool,
    ) -> Var<'g, T> {
        let mut h = self.text_hidden(b, rows);
        if use_tuning && self.tuning_enabled {
            h = b.linear("tuning", h);
        }
        h.l2_normalize()
    }

    /// Text projection before the tuning layer and normalisation; `[B, D]`.
    pub fn text_hidden<'g>(&self, b: &Bound<'g, T>, rows: &[usize]) -> Var<'g, T> {
        b.linear("text.proj", b.get("text.table").gather_rows(rows))
    }

    /// Audio branch on a `[B,1,F,T]` tensor; `[B, D]`, unit norm.
    pub fn audio_forward<'g>(&self, b: &Bound<'g, T>, x: Var<'g, T>) -> Var<'g, T> {
        let mut h = x;
        for i in 0..self.config.channels.len() {
            h = b.conv(&format!("audio.conv{i}"), h, 2, 1).silu();
        }
        let pooled = h.spatial_mean().concat(h.spatial_max(), 1);
        b.linear("audio.proj", pooled).l2_normalize()
    }

    fn check_mel(&self, m: &MelSpec) -> Result<()> {
        if m.n_mels() != self.config.mel_bins {
            return Err(Error::Shape(format!(
                "clap expects {} mel bins, got {}",
                self.config.mel_bins,
                m.n_mels()
            )));
        }
        Ok(())
    }

    pub fn mel_input(&self, mels: &[&MelSpec]) -> Result<Tensor<T>> {
        for m in mels {
            self.check_mel(m)?;
        }
        mel_batch(mels, self.config.norm)
    }

    pub fn encode_text(&self, prompt: &str, use_tuning: bool) -> Result<Embedding> {
        let label = label_of_prompt(prompt, &self.classes)?;
        self.encode_label(label, use_tuning)
    }

    pub fn encode_label(&self, label: ClassLabel, use_tuning: bool) -> Result<Embedding> {
        let row = self.label_index(label)?;
        let g = Graph::new();
        let b = self.params.bind(&g, false);
        to_embeddings(&self.text_forward(&b, &[row], use_tuning).value())
            .pop()
            .unwrap()
    }

    pub fn encode_audio(&self, m: &MelSpec) -> Result<Embedding> {
        self.encode_audio_batch(&[m]).map(|mut v| v.pop().unwrap())
    }

    pub fn encode_audio_batch(&self, mels: &[&MelSpec]) -> Result<Vec<Embedding>> {
        if mels.is_empty() {
            return Ok(Vec::new());
        }
        let g = Graph::new();
        let b = self.params.bind(&g, false);
        let x = g.constant(self.mel_input(mels)?);
        to_embeddings(&self.audio_forward(&b, x).value())
            .into_iter()
            .collect()
    }

    /// Symmetric InfoNCE over the `B×B` similarity matrix of a batch.
    pub fn contrastive_loss_graph<'g>(
        &self,
        b: &Bound<'g, T>,
        x: Var<'g, T>,
        rows: &[usize],
    ) -> Var<'g, T> {
        let a = self.audio_forward(b, x);
        let t = self.text_forward(b, rows, false);
        let logits = a
            .matmul(t.transpose())
            .mul_scalar(b.get("logit_scale").exp());
        info_nce_graph(logits)
    }

    pub fn contrastive_loss(&self, batch: &[(&MelSpec, &str)]) -> Result<f64> {
        if batch.len() < 2 {
            return Err(Error::InvalidArgument(
                "contrastive batch needs at least two pairs".into(),
            ));
        }
        let rows = batch
            .iter()
            .map(|(_, p)| label_of_prompt(p, &self.classes).and_then(|l| self.label_index(l)))
            .collect::<Result<Vec<_>>>()?;
        let mels: Vec<&MelSpec> = batch.iter().map(|(m, _)| *m).collect();
        let g = Graph::new();
        let b = self.params.bind(&g, false);
        let x = g.constant(self.mel_input(&mels)?);
        Ok(self.contrastive_loss_graph(&b, x, &rows).value().data()[0].as_f64())
    }
}

/// `½(CE(L, diag) + CE(Lᵀ, diag))` on a square logit matrix.
pub fn info_nce_graph<T: Real>(logits: Var<'_, T>) -> Var<'_, T> {
    let n = logits.shape()[0];
    let diag: Vec<usize> = (0..n).collect();
    let half = T::from_f64c(0.5);
    logits
        .cross_entropy(&diag)
        .add(logits.transpose().cross_entropy(&diag))
        .scale(half)
}

/// InfoNCE evaluated directly on a logit matrix.
pub fn info_nce(logits: &[f64], n: usize) -> Result<f64> {
    if n < 2 || logits.len() != n * n {
        return Err(Error::InvalidArgument(
            "info_nce needs a square matrix with n >= 2".into(),
        ));
    }
    let g = Graph::<f64>::new();
    let l = g.constant(Tensor::new(vec![n, n], logits.to_vec()));
    Ok(info_nce_graph(l).value().data()[0])
}

pub(crate) fn to_embeddings<T: Real>(t: &Tensor<T>) -> Vec<Result<Embedding>> {
    let d = t.dim(1);
    t.data()
        .chunks(d)
        .map(|r| Embedding::new(r.iter().map(|v| v.as_f64() as f32).collect()))
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
}

/// Trains the contrastive model on labelled Mel grids with class-balanced batches.
pub fn train_clap(
    data: &[LabeledMel],
    classes: &[ClassLabel],
    model_cfg: ClapConfig,
    cfg: &ClapTrainConfig,
) -> Result<(ClapModel, TrainReport)> {
    let distinct: std::collections::HashSet<_> = data.iter().map(|d| d.label).collect();
    if distinct.len() < 2 {
        return Err(Error::InvalidArgument(
            "clap training needs at least two classes in the corpus".into(),
        ));
    }
    let mut model = ClapModel::<f32>::new(model_cfg, classes.to_vec(), cfg.seed)?;
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let labels: Vec<ClassLabel> = data.iter().map(|d| d.label).collect();
    let present: Vec<ClassLabel> = classes
        .iter()
        .copied()
        .filter(|c| distinct.contains(c))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xC1A9);
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        let batches = class_balanced_batches(&labels, &present, &mut rng);
        let mut total = 0.0;
        for idx in &batches {
            let mels: Vec<&MelSpec> = idx.iter().map(|&i| &data[i].mel).collect();
            let rows = idx
                .iter()
                .map(|&i| model.label_index(data[i].label))
                .collect::<Result<Vec<_>>>()?;
            let g = Graph::new();
            let b = model.params.bind_where(&g, |n| !n.starts_with("tuning."));
            let x = g.constant(model.mel_input(&mels)?);
            let loss = model.contrastive_loss_graph(&b, x, &rows);
            total += loss.value().data()[0] as f64;
            let mut grads = g.backward(loss);
            let grads = b.grads(&mut grads);
            opt.step(&mut model.params, &grads);
            let ls = model.params.get_mut("logit_scale").unwrap();
            ls.data_mut()[0] = ls.data()[0].min(MAX_LOGIT_SCALE as f32);
        }
        let mean = total / batches.len().max(1) as f64;
        log::info!("clap epoch {epoch}: contrastive loss {mean:.4}");
        report.epoch_losses.push(mean);
    }
    Ok((model, report))
}
