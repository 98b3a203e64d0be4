//! Corpus loading into fixed-size log-Mel grids and batching helpers.

use serde::{Deserialize, Serialize};

use crate::dataset::{ClassLabel, Manifest};
use crate::dsp::{extend_clip, load_wav, mel_spectrogram, MelConfig, MelSpec};
use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};

/// Fixed affine map from log-Mel values to network inputs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelNorm {
    pub mean: f32,
    pub std: f32,
}

impl Default for MelNorm {
    fn default() -> Self {
        Self {
            mean: -7.0,
            std: 3.0,
        }
    }
}

impl MelNorm {
    pub fn apply(&self, v: f32) -> f32 {
        (v - self.mean) / self.std
    }

    pub fn invert(&self, v: f32) -> f32 {
        v * self.std + self.mean
    }
}

#[derive(Clone, Debug)]
pub struct LabeledMel {
    pub mel: MelSpec,
    pub label: ClassLabel,
}

/// Loads every manifest entry, tiles/truncates to `frames·hop` samples and analyses it.
pub fn load_corpus_mels(
    manifest: &Manifest,
    mel: &MelConfig,
    frames: usize,
) -> Result<Vec<LabeledMel>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let w = load_wav(manifest.path_of(e), Some(mel.sample_rate))?;
            let w = extend_clip(&w, mel.samples_for_frames(frames))?;
            Ok(LabeledMel {
                mel: mel_spectrogram(&w, mel)?,
                label: e.label,
            })
        })
        .collect()
}

/// Stacks Mel grids into a normalised `[B,1,F,T]` tensor.
pub fn mel_batch<T: Real>(mels: &[&MelSpec], norm: MelNorm) -> Result<Tensor<T>> {
    let first = mels
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty mel batch".into()))?;
    let (f, t) = (first.n_mels(), first.frames());
    let mut data = Vec::with_capacity(mels.len() * f * t);
    for m in mels {
        if m.n_mels() != f || m.frames() != t {
            return Err(Error::Shape(format!(
                "mel batch mixes {}x{} with {}x{}",
                f,
                t,
                m.n_mels(),
                m.frames()
            )));
        }
        data.extend(
            m.values()
                .iter()
                .map(|&v| T::from_f64c(norm.apply(v) as f64)),
        );
    }
    Ok(Tensor::new(vec![mels.len(), 1, f, t], data))
}

/// Per-class round-robin batches with one clip of every class per batch.
/// Classes are visited in the order given; clips are shuffled per epoch.
pub fn class_balanced_batches(
    labels: &[ClassLabel],
    classes: &[ClassLabel],
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut per: Vec<Vec<usize>> = classes
        .iter()
        .map(|c| (0..labels.len()).filter(|&i| labels[i] == *c).collect())
        .collect();
    for p in per.iter_mut() {
        p.shuffle(rng);
    }
    let n = per.iter().map(Vec::len).min().unwrap_or(0);
    (0..n).map(|j| per.iter().map(|p| p[j]).collect()).collect()
}

/// Shuffled contiguous batches of at most `size`.
pub fn shuffled_batches(
    n: usize,
    size: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(size.max(1)).map(<[usize]>::to_vec).collect()
}
