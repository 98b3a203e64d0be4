//! Fréchet distance between Gaussian fits of embedding sets, stats
//! persistence, and the per-class evaluation report.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dataset::{prompt_of, ClassLabel};
use crate::dsp::{extend_clip, load_wav, mel_spectrogram, MelConfig, MelSpec, Waveform};
use crate::embedding::{cosine_similarity, Embedding};
use crate::error::{Error, IoContext, Result};
use crate::mini_clap::ClapModel;

pub const DEFAULT_SHRINKAGE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStats {
    pub mean: Vec<f64>,
    /// Row-major `D×D`.
    pub cov: Vec<f64>,
    pub count: usize,
    pub shrinkage: f64,
}

impl EmbeddingStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.cov.len() != d * d || d == 0 {
            return Err(Error::Shape(format!(
                "stats mean {d} vs covariance {}",
                self.cov.len()
            )));
        }
        if self.mean.iter().chain(&self.cov).any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "non-finite embedding statistics".into(),
            ));
        }
        Ok(())
    }

    fn matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        let m = DMatrix::from_row_slice(d, d, &self.cov);
        (&m + m.transpose()) * 0.5
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::with_capacity(24 + 8 * (self.mean.len() + self.cov.len()));
        buf.extend((self.dim() as u64).to_le_bytes());
        buf.extend((self.count as u64).to_le_bytes());
        buf.extend(self.shrinkage.to_le_bytes());
        for v in self.mean.iter().chain(&self.cov) {
            buf.extend(v.to_le_bytes());
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).at(dir)?;
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&buf))
            .at(path)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .at(path)?;
        let bad = |reason: String| Error::Stats {
            path: path.to_path_buf(),
            reason,
        };
        if buf.len() < 24 {
            return Err(bad(format!(
                "header needs 24 bytes, file has {}",
                buf.len()
            )));
        }
        let word = |i: usize| <[u8; 8]>::try_from(&buf[8 * i..8 * i + 8]).unwrap();
        let d = u64::from_le_bytes(word(0)) as usize;
        let count = u64::from_le_bytes(word(1)) as usize;
        let shrinkage = f64::from_le_bytes(word(2));
        let expected = 24 + 8 * (d + d * d);
        if buf.len() != expected {
            return Err(bad(format!(
                "dim {d} needs {expected} bytes, file has {}",
                buf.len()
            )));
        }
        let vals: Vec<f64> = (3..expected / 8)
            .map(|i| f64::from_le_bytes(word(i)))
            .collect();
        let stats = Self {
            mean: vals[..d].to_vec(),
            cov: vals[d..].to_vec(),
            count,
            shrinkage,
        };
        stats.validate().map_err(|e| bad(e.to_string()))?;
        Ok(stats)
    }
}

/// Sample mean and unbiased covariance plus `shrinkage·I`.
pub fn fit_stats(embeddings: &[Embedding], shrinkage: f64) -> Result<EmbeddingStats> {
    if embeddings.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "stats need at least 2 embeddings, got {}",
            embeddings.len()
        )));
    }
    let d = embeddings[0].dim();
    if embeddings.iter().any(|e| e.dim() != d) {
        return Err(Error::Shape("embeddings of mixed dimension".into()));
    }
    let n = embeddings.len();
    let x = DMatrix::from_fn(n, d, |i, j| embeddings[i].values()[j] as f64);
    let mean: Vec<f64> = (0..d).map(|j| x.column(j).sum() / n as f64).collect();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let mut cov = centered.transpose() * &centered / (n - 1) as f64;
    for i in 0..d {
        cov[(i, i)] += shrinkage;
    }
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(EmbeddingStats {
        mean,
        cov: cov.transpose().as_slice().to_vec(),
        count: n,
        shrinkage,
    })
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let s = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose()
}

/// `‖μa−μb‖² + Tr(Σa + Σb − 2(Σa Σb)^{1/2})`, with the trace of the cross
/// term taken from the eigenvalues of `Σa^{1/2} Σb Σa^{1/2}`.
pub fn frechet_distance(a: &EmbeddingStats, b: &EmbeddingStats) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!(
            "stats dims {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y).powi(2))
        .sum();
    let (sa, sb) = (a.matrix(), b.matrix());
    let ra = sqrt_psd(&sa);
    let inner = &ra * &sb * &ra;
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let d = mean_term + sa.trace() + sb.trace() - 2.0 * cross;
    if !d.is_finite() {
        return Err(Error::InvalidArgument(
            "Frechet distance is not finite".into(),
        ));
    }
    Ok(d.max(0.0))
}

/// Frozen audio branch used as the evaluation feature extractor.
pub struct Embedder<'a> {
    pub clap: &'a ClapModel,
    pub mel: &'a MelConfig,
    /// Clips are tiled or truncated to this many frames before analysis.
    pub frames: usize,
}

impl Embedder<'_> {
    pub fn mel_of(&self, w: &Waveform) -> Result<MelSpec> {
        let w = extend_clip(w, self.mel.samples_for_frames(self.frames))?;
        mel_spectrogram(&w, self.mel)
    }

    pub fn embed_set(&self, waveforms: &[Waveform]) -> Result<Vec<Embedding>> {
        if waveforms.is_empty() {
            return Err(Error::InvalidArgument("cannot embed an empty set".into()));
        }
        let mut out = Vec::with_capacity(waveforms.len());
        for chunk in waveforms.chunks(32) {
            let mels = chunk
                .iter()
                .map(|w| self.mel_of(w))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&MelSpec> = mels.iter().collect();
            out.extend(self.clap.encode_audio_batch(&refs)?);
        }
        Ok(out)
    }
}

/// All `.wav` files directly inside `dir`, sorted by name.
pub fn load_wav_dir(dir: &Path, sample_rate: u32) -> Result<Vec<Waveform>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .at(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "wav"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| load_wav(p, Some(sample_rate)))
        .collect()
}

pub fn stats_path(dir: &Path, label: ClassLabel) -> PathBuf {
    dir.join(format!("{}.bin", label.as_str()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub label: String,
    pub fad: f64,
    pub clap_similarity: f64,
    pub clips: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<ClassScore>,
    pub average: f64,
    pub std: f64,
    pub mean_similarity: f64,
}

impl EvalReport {
    pub fn from_scores(classes: Vec<ClassScore>) -> Self {
        let n = classes.len().max(1) as f64;
        let average = classes.iter().map(|c| c.fad).sum::<f64>() / n;
        let var = classes
            .iter()
            .map(|c| (c.fad - average).powi(2))
            .sum::<f64>()
            / n;
        let mean_similarity = classes.iter().map(|c| c.clap_similarity).sum::<f64>() / n;
        Self {
            classes,
            average,
            std: var.sqrt(),
            mean_similarity,
        }
    }

    /// One column per class plus Average and Std.
    pub fn table(&self) -> String {
        let mut head = format!("{:<10}", "");
        let mut fad = format!("{:<10}", "FAD");
        let mut sim = format!("{:<10}", "CLAP sim");
        for c in &self.classes {
            let w = c.label.len().max(8) + 2;
            let _ = write!(head, "{:>w$}", c.label);
            let _ = write!(fad, "{:>w$.3}", c.fad);
            let _ = write!(sim, "{:>w$.3}", c.clap_similarity);
        }
        let _ = write!(head, "{:>10}{:>10}", "Average", "Std");
        let _ = write!(fad, "{:>10.3}{:>10.3}", self.average, self.std);
        let _ = write!(sim, "{:>10.3}{:>10}", self.mean_similarity, "");
        format!("{head}\n{fad}\n{sim}\n")
    }

    /// One JSON object per class, then one for Average and one for Std.
    pub fn jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for c in &self.classes {
            out.push_str(&serde_json::to_string(c)?);
            out.push('\n');
        }
        out.push_str(&serde_json::to_string(&serde_json::json!({"label": "Average", "fad": self.average, "clap_similarity": self.mean_similarity}))?);
        out.push('\n');
        out.push_str(&serde_json::to_string(
            &serde_json::json!({"label": "Std", "fad": self.std}),
        )?);
        out.push('\n');
        Ok(out)
    }
}

/// Scores one class's generated clips against stored reference stats.
pub fn score_class(
    embedder: &Embedder,
    label: ClassLabel,
    clips: &[Waveform],
    reference: &EmbeddingStats,
) -> Result<ClassScore> {
    let embs = embedder.embed_set(clips)?;
    let stats = fit_stats(&embs, reference.shrinkage)?;
    let text = embedder.clap.encode_text(&prompt_of(label), false)?;
    let sim = embs
        .iter()
        .map(|e| cosine_similarity(e, &text))
        .sum::<Result<f64>>()?
        / embs.len() as f64;
    Ok(ClassScore {
        label: label.as_str().to_string(),
        fad: frechet_distance(&stats, reference)?,
        clap_similarity: sim,
        clips: clips.len(),
    })
}

/// Evaluates `<gen_dir>/<label>/*.wav` against `<ref_dir>/<label>.bin` for each class.
pub fn evaluate(
    gen_dir: &Path,
    ref_dir: &Path,
    embedder: &Embedder,
    classes: &[ClassLabel],
) -> Result<EvalReport> {
    let mut scores = Vec::with_capacity(classes.len());
    for &label in classes {
        let dir = gen_dir.join(label.as_str());
        if !dir.is_dir() {
            return Err(Error::InvalidArgument(format!(
                "missing generated class directory {}",
                dir.display()
            )));
        }
        let clips = load_wav_dir(&dir, embedder.mel.sample_rate)?;
        let reference = EmbeddingStats::read(stats_path(ref_dir, label))?;
        scores.push(score_class(embedder, label, &clips, &reference)?);
    }
    Ok(EvalReport::from_scores(scores))
}
