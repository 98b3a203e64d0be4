//! Batch generation through sampler → VAE decoder → Griffin–Lim, with optional
//! CLAP-similarity post-filtering and per-class accounting.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{prompt_of, ClassLabel};
use crate::dsp::{griffin_lim, mel_spectrogram, save_wav, MelConfig, MelSpec, Waveform};
use crate::embedding::cosine_similarity;
use crate::error::{Error, IoContext, Result};
use crate::latent::Latent;
use crate::ldm::{sample_batch, text_condition, LdmModel};
use crate::mini_clap::ClapModel;
use crate::vae::VaeModel;

pub const REPORT_FILE: &str = "report.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub guidance_weight: f64,
    pub inference_steps: usize,
    pub thresholds: BTreeMap<ClassLabel, f64>,
    pub max_attempt_factor: usize,
    pub griffin_lim_iterations: usize,
    /// Clips sampled together per sampler call.
    pub batch_size: usize,
    pub seed: u64,
}

impl GenerationConfig {
    pub fn paper() -> Self {
        let thresholds = ClassLabel::ALL
            .iter()
            .map(|&l| {
                let t = match l {
                    ClassLabel::Keyboard => 0.15,
                    ClassLabel::MotorVehicle => 0.75,
                    _ => 0.2,
                };
                (l, t)
            })
            .collect();
        Self {
            guidance_weight: 2.0,
            inference_steps: 200,
            thresholds,
            max_attempt_factor: 10,
            griffin_lim_iterations: 32,
            batch_size: 16,
            seed: 0,
        }
    }

    pub fn desk() -> Self {
        Self {
            inference_steps: 50,
            griffin_lim_iterations: 16,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_attempt_factor < 1 {
            return Err(Error::InvalidArgument(
                "max_attempt_factor must be >= 1".into(),
            ));
        }
        if let Some((l, t)) = self
            .thresholds
            .iter()
            .find(|(_, t)| !(-1.0..=1.0).contains(*t))
        {
            return Err(Error::InvalidArgument(format!(
                "threshold {t} for {l} outside [-1, 1]"
            )));
        }
        if !(self.guidance_weight >= 0.0) {
            return Err(Error::InvalidArgument(
                "guidance weight must be >= 0".into(),
            ));
        }
        if self.batch_size == 0 || self.griffin_lim_iterations == 0 {
            return Err(Error::InvalidArgument(
                "batch size and Griffin-Lim iterations must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn threshold(&self, label: ClassLabel) -> Result<f64> {
        self.thresholds
            .get(&label)
            .copied()
            .ok_or_else(|| Error::Config(format!("no post-filter threshold for {label}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedClip {
    pub seed: u64,
    pub latent: Latent,
    pub waveform: Waveform,
}

/// Produces candidate clips for a class from explicit seeds.
pub trait ClipSource {
    fn generate(&self, label: ClassLabel, seeds: &[u64]) -> Result<Vec<GeneratedClip>>;
}

/// Scores candidates against a class; higher is better, in `[-1, 1]`.
pub trait ClipScorer {
    fn score(&self, label: ClassLabel, clips: &[GeneratedClip]) -> Result<Vec<f64>>;
}

/// Frozen checkpoints needed to turn a prompt into audio.
pub struct Pipeline<'a> {
    pub clap: &'a ClapModel,
    pub vae: &'a VaeModel,
    pub ldm: &'a LdmModel,
    pub config: &'a GenerationConfig,
}

impl Pipeline<'_> {
    pub fn check_compatible(&self) -> Result<()> {
        let r = self.vae.config.ratio;
        let [c, h, _] = self.ldm.config.latent_shape;
        if c != self.vae.config.latent_channels || h * r != self.vae.config.mel_bins {
            return Err(Error::Shape(format!(
                "predictor latent {:?} does not match the VAE",
                self.ldm.config.latent_shape
            )));
        }
        if self.clap.config.embed_dim != self.ldm.config.cond_dim {
            return Err(Error::Shape(
                "clap dimension does not match predictor conditioning".into(),
            ));
        }
        Ok(())
    }

    pub fn decode_latents(&self, zs: &[&Latent]) -> Result<Vec<MelSpec>> {
        self.vae.decode_batch(zs)
    }
}

impl ClipSource for Pipeline<'_> {
    fn generate(&self, label: ClassLabel, seeds: &[u64]) -> Result<Vec<GeneratedClip>> {
        self.check_compatible()?;
        let cond = text_condition(self.clap, self.ldm, label)?;
        let mut out = Vec::with_capacity(seeds.len());
        for chunk in seeds.chunks(self.config.batch_size) {
            let zs = sample_batch(
                self.ldm,
                &cond,
                self.config.inference_steps,
                self.config.guidance_weight,
                chunk,
            )?;
            let refs: Vec<&Latent> = zs.iter().collect();
            let mels = self.decode_latents(&refs)?;
            for ((z, m), &s) in zs.into_iter().zip(&mels).zip(chunk) {
                let waveform = griffin_lim(m, self.config.griffin_lim_iterations, s)?;
                out.push(GeneratedClip {
                    seed: s,
                    latent: z,
                    waveform,
                });
            }
        }
        Ok(out)
    }
}

/// Audio–text cosine under a contrastive model.
pub struct ClapScorer<'a> {
    pub clap: &'a ClapModel,
    pub mel: &'a MelConfig,
}

impl ClapScorer<'_> {
    pub fn similarities(&self, label: ClassLabel, waves: &[&Waveform]) -> Result<Vec<f64>> {
        let text = self.clap.encode_text(&prompt_of(label), false)?;
        let mels = waves
            .iter()
            .map(|w| mel_spectrogram(w, self.mel))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&MelSpec> = mels.iter().collect();
        self.clap
            .encode_audio_batch(&refs)?
            .iter()
            .map(|e| cosine_similarity(e, &text))
            .collect()
    }
}

impl ClipScorer for ClapScorer<'_> {
    fn score(&self, label: ClassLabel, clips: &[GeneratedClip]) -> Result<Vec<f64>> {
        let waves: Vec<&Waveform> = clips.iter().map(|c| &c.waveform).collect();
        self.similarities(label, &waves)
    }
}

/// Seeds for the `i`-th clip of a run.
pub fn clip_seeds(base: u64, start: usize, count: usize) -> Vec<u64> {
    (start..start + count)
        .map(|i| base.wrapping_add(i as u64))
        .collect()
}

/// `count` clips with seeds `seed, seed+1, …`.
pub fn generate_audio<S: ClipSource + ?Sized>(
    source: &S,
    label: ClassLabel,
    count: usize,
    cfg: &GenerationConfig,
) -> Result<Vec<GeneratedClip>> {
    if count == 0 {
        return Ok(Vec::new());
    }
    source.generate(label, &clip_seeds(cfg.seed, 0, count))
}

/// Indices of candidates whose similarity reaches `threshold`, plus all similarities.
pub fn post_filter(similarities: &[f64], threshold: f64) -> Vec<usize> {
    similarities
        .iter()
        .enumerate()
        .filter(|(_, &s)| s >= threshold)
        .map(|(i, _)| i)
        .collect()
}

/// Filters waveforms by audio–text cosine under `clap`.
pub fn post_filter_waveforms(
    candidates: &[Waveform],
    label: ClassLabel,
    clap: &ClapModel,
    mel: &MelConfig,
    threshold: f64,
) -> Result<(Vec<usize>, Vec<f64>)> {
    if candidates.is_empty() {
        return Ok((Vec::new(), Vec::new()));
    }
    let refs: Vec<&Waveform> = candidates.iter().collect();
    let sims = ClapScorer { clap, mel }.similarities(label, &refs)?;
    Ok((post_filter(&sims, threshold), sims))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub label: ClassLabel,
    pub requested: usize,
    pub generated_total: usize,
    pub accepted: usize,
    pub acceptance_rate: f64,
    pub wall_time_s: f64,
    pub per_clip_similarity: Vec<f64>,
    /// False when the attempt cap was hit before `requested` clips passed.
    pub quota_met: bool,
    pub filtered: bool,
}

impl GenerationReport {
    pub fn seconds_per_clip(&self) -> Option<f64> {
        (self.requested > 0).then(|| self.wall_time_s / self.requested as f64)
    }
}

/// Generates in rounds of `count` until `count` candidates pass the class
/// threshold or `count·max_attempt_factor` have been drawn. Under quota, the
/// best-scoring candidates fill the set. Returned clips keep generation order.
pub fn generate_filtered<S: ClipSource + ?Sized, F: ClipScorer + ?Sized>(
    source: &S,
    scorer: &F,
    label: ClassLabel,
    count: usize,
    threshold: f64,
    cfg: &GenerationConfig,
) -> Result<(Vec<GeneratedClip>, GenerationReport)> {
    cfg.validate()?;
    let start = Instant::now();
    let cap = count * cfg.max_attempt_factor;
    let mut pool: Vec<(GeneratedClip, f64)> = Vec::new();
    let mut accepted: Vec<usize> = Vec::new();
    while accepted.len() < count && pool.len() < cap {
        let n = count.min(cap - pool.len());
        let clips = source.generate(label, &clip_seeds(cfg.seed, pool.len(), n))?;
        let sims = scorer.score(label, &clips)?;
        let offset = pool.len();
        for i in post_filter(&sims, threshold) {
            if accepted.len() < count {
                accepted.push(offset + i);
            }
        }
        pool.extend(clips.into_iter().zip(sims));
    }
    let quota_met = accepted.len() == count;
    if !quota_met {
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.sort_by(|&a, &b| pool[b].1.total_cmp(&pool[a].1).then(a.cmp(&b)));
        for i in order {
            if accepted.len() == count {
                break;
            }
            if !accepted.contains(&i) {
                accepted.push(i);
            }
        }
        accepted.sort_unstable();
    }
    let n_pass = pool.iter().filter(|(_, s)| *s >= threshold).count();
    let report = GenerationReport {
        label,
        requested: count,
        generated_total: pool.len(),
        accepted: n_pass.min(count),
        acceptance_rate: if pool.is_empty() {
            0.0
        } else {
            n_pass as f64 / pool.len() as f64
        },
        wall_time_s: start.elapsed().as_secs_f64(),
        per_clip_similarity: pool.iter().map(|(_, s)| *s).collect(),
        quota_met,
        filtered: true,
    };
    let mut keep = vec![false; pool.len()];
    for &i in &accepted {
        keep[i] = true;
    }
    let clips = pool
        .into_iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|((c, _), _)| c)
        .collect();
    Ok((clips, report))
}

/// Generation without any scoring, reported in the same shape.
pub fn generate_unfiltered<S: ClipSource + ?Sized>(
    source: &S,
    label: ClassLabel,
    count: usize,
    cfg: &GenerationConfig,
) -> Result<(Vec<GeneratedClip>, GenerationReport)> {
    let start = Instant::now();
    let clips = generate_audio(source, label, count, cfg)?;
    let report = GenerationReport {
        label,
        requested: count,
        generated_total: clips.len(),
        accepted: clips.len(),
        acceptance_rate: if clips.is_empty() { 0.0 } else { 1.0 },
        wall_time_s: start.elapsed().as_secs_f64(),
        per_clip_similarity: Vec::new(),
        quota_met: true,
        filtered: false,
    };
    Ok((clips, report))
}

/// Writes `<out>/<label>/<index>.wav` and `<out>/<label>/report.json`.
pub fn write_class_output(
    out: &Path,
    clips: &[GeneratedClip],
    report: &GenerationReport,
) -> Result<PathBuf> {
    let dir = out.join(report.label.as_str());
    std::fs::create_dir_all(&dir).at(&dir)?;
    for (i, c) in clips.iter().enumerate() {
        save_wav(dir.join(format!("{i:04}.wav")), &c.waveform)?;
    }
    let path = dir.join(REPORT_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(report)?).at(&path)?;
    Ok(dir)
}
