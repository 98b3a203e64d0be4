//! Audio I/O, clip-length normalisation, log-Mel analysis and Griffin–Lim synthesis.

mod griffin_lim;
mod mel;
mod wav;

pub use griffin_lim::{griffin_lim, griffin_lim_traced, GriffinLimTrace};
pub use mel::{hz_to_mel, mel_filterbank, mel_spectrogram, mel_to_hz, MelConfig, MelSpec, Stft};
pub use wav::{load_wav, resample_linear, save_wav};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidArgument(
                "sample rate must be positive".into(),
            ));
        }
        if samples.is_empty() {
            return Err(Error::InvalidArgument("waveform must be non-empty".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite sample at index {i}"
            )));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, gain: f32) -> Self {
        Self {
            samples: self.samples.iter().map(|v| v * gain).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

/// Tiles `w` end-to-end and truncates to exactly `target_samples`.
pub fn extend_clip(w: &Waveform, target_samples: usize) -> Result<Waveform> {
    if target_samples == 0 {
        return Err(Error::InvalidArgument(
            "target length must be positive".into(),
        ));
    }
    let samples = w
        .samples
        .iter()
        .copied()
        .cycle()
        .take(target_samples)
        .collect();
    Ok(Waveform {
        samples,
        sample_rate: w.sample_rate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extend_tiles_and_truncates() {
        let w = Waveform::new(vec![1.0, 2.0, 3.0, 4.0], 16_000).unwrap();
        let e = extend_clip(&w, 10).unwrap();
        assert_eq!(
            e.samples(),
            &[1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0, 1.0, 2.0]
        );
        assert_eq!(extend_clip(&w, 4).unwrap(), w);
        assert!(extend_clip(&w, 0).is_err());
    }

    #[test]
    fn four_seconds_to_ten_point_two_four() {
        let clip: Vec<f32> = (0..64_000)
            .map(|i| ((i % 997) as f32 / 997.0) - 0.5)
            .collect();
        let w = Waveform::new(clip.clone(), 16_000).unwrap();
        let e = extend_clip(&w, 163_840).unwrap();
        assert_eq!(e.len(), 163_840);
        assert_eq!(&e.samples()[..64_000], &clip[..]);
        assert_eq!(&e.samples()[64_000..128_000], &clip[..]);
        assert_eq!(&e.samples()[128_000..], &clip[..35_840]);
    }

    #[test]
    fn waveform_rejects_bad_input() {
        assert!(Waveform::new(vec![], 16_000).is_err());
        assert!(Waveform::new(vec![0.0], 0).is_err());
        assert!(Waveform::new(vec![f32::NAN], 16_000).is_err());
    }
}
