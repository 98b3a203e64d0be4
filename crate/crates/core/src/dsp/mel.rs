use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::Waveform;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub window_length: usize,
    pub hop: usize,
    pub mel_bins: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl MelConfig {
    pub fn paper() -> Self {
        Self {
            sample_rate: 16_000,
            window_length: 1024,
            hop: 160,
            mel_bins: 64,
            fmin: 0.0,
            fmax: 8_000.0,
            log_floor: 1e-5,
        }
    }

    pub fn desk() -> Self {
        Self {
            mel_bins: 32,
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("mel config: {m}")));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive");
        }
        if self.hop == 0 || self.hop > self.window_length {
            return bad("hop must be in 1..=window_length");
        }
        if self.mel_bins == 0 {
            return bad("mel_bins must be at least 1");
        }
        if !(self.fmin >= 0.0
            && self.fmin < self.fmax
            && self.fmax <= self.sample_rate as f64 / 2.0)
        {
            return bad("require 0 <= fmin < fmax <= sample_rate/2");
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive");
        }
        Ok(())
    }

    pub fn log_min(&self) -> f32 {
        self.log_floor.ln() as f32
    }

    /// Samples needed for `frames` Mel frames.
    pub fn samples_for_frames(&self, frames: usize) -> usize {
        frames * self.hop
    }
}

/// Log-Mel grid stored bin-major: `values[f * frames + t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpec {
    values: Vec<f32>,
    frames: usize,
    config: MelConfig,
}

impl MelSpec {
    pub fn new(values: Vec<f32>, frames: usize, config: MelConfig) -> Result<Self> {
        if values.len() != frames * config.mel_bins {
            return Err(Error::Shape(format!(
                "mel values {} != {} bins x {} frames",
                values.len(),
                config.mel_bins,
                frames
            )));
        }
        let lo = config.log_min();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("mel values must be finite".into()));
        }
        let values = values.into_iter().map(|v| v.max(lo)).collect();
        Ok(Self {
            values,
            frames,
            config,
        })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn n_mels(&self) -> usize {
        self.config.mel_bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn config(&self) -> &MelConfig {
        &self.config
    }

    pub fn get(&self, bin: usize, frame: usize) -> f32 {
        self.values[bin * self.frames + frame]
    }

    /// Relative L2 distance `‖self − other‖ / ‖other‖`.
    pub fn relative_error(&self, other: &MelSpec) -> f64 {
        let num: f64 = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (*a as f64 - *b as f64).powi(2))
            .sum();
        let den: f64 = other.values.iter().map(|b| (*b as f64).powi(2)).sum();
        (num / den.max(f64::MIN_POSITIVE)).sqrt()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular HTK-scale filterbank, `mel_bins × (n_fft/2 + 1)`, unit peak.
pub fn mel_filterbank(cfg: &MelConfig) -> Vec<f64> {
    let n_freqs = cfg.window_length / 2 + 1;
    let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
    let pts: Vec<f64> = (0..cfg.mel_bins + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.mel_bins + 1) as f64))
        .collect();
    let mut fb = vec![0.0; cfg.mel_bins * n_freqs];
    for m in 0..cfg.mel_bins {
        let (l, c, r) = (pts[m], pts[m + 1], pts[m + 2]);
        for k in 0..n_freqs {
            let f = k as f64 * cfg.sample_rate as f64 / cfg.window_length as f64;
            let w = if f > l && f <= c {
                (f - l) / (c - l)
            } else if f > c && f < r {
                (r - f) / (r - c)
            } else {
                0.0
            };
            fb[m * n_freqs + k] = w;
        }
    }
    fb
}

/// Short-time Fourier transform with reflection padding so that a signal of
/// `k·hop` samples yields exactly `k` frames. Spectra are scaled by `1/Σwindow`.
pub struct Stft {
    n_fft: usize,
    hop: usize,
    window: Vec<f64>,
    norm: f64,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(n_fft: usize, hop: usize) -> Self {
        let window: Vec<f64> = (0..n_fft)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n_fft as f64).cos())
            .collect();
        let norm = window.iter().sum();
        let mut planner = FftPlanner::new();
        Self {
            n_fft,
            hop,
            window,
            norm,
            fwd: planner.plan_fft_forward(n_fft),
            inv: planner.plan_fft_inverse(n_fft),
        }
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    fn pad(&self) -> usize {
        self.n_fft / 2
    }

    /// Frame-major half spectrum (`frames × bins`).
    pub fn analyze(&self, x: &[f32]) -> Result<(Vec<Complex<f64>>, usize)> {
        let pad = self.pad();
        if x.len() <= pad {
            return Err(Error::InvalidArgument(format!(
                "waveform of {} samples is shorter than one window after padding (need > {pad})",
                x.len()
            )));
        }
        if !x.len().is_multiple_of(self.hop) {
            return Err(Error::InvalidArgument(format!(
                "waveform length {} is not a multiple of hop {}",
                x.len(),
                self.hop
            )));
        }
        let n = x.len();
        let reflect = |i: isize| -> f64 {
            let j = if i < 0 {
                (-i) as usize
            } else if i as usize >= n {
                2 * (n - 1) - i as usize
            } else {
                i as usize
            };
            x[j] as f64
        };
        let frames = n / self.hop;
        let bins = self.bins();
        let mut out = Vec::with_capacity(frames * bins);
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fwd.get_inplace_scratch_len()];
        for t in 0..frames {
            let start = (t * self.hop) as isize - pad as isize;
            for (i, b) in buf.iter_mut().enumerate() {
                *b = Complex::new(reflect(start + i as isize) * self.window[i], 0.0);
            }
            self.fwd.process_with_scratch(&mut buf, &mut scratch);
            out.extend(buf[..bins].iter().map(|c| c / self.norm));
        }
        Ok((out, frames))
    }

    /// Weighted overlap-add inverse of [`Stft::analyze`], `frames·hop` samples.
    pub fn synthesize(&self, spec: &[Complex<f64>], frames: usize) -> Vec<f64> {
        let bins = self.bins();
        let pad = self.pad();
        let total = (frames - 1) * self.hop + self.n_fft;
        let mut acc = vec![0.0; total];
        let mut wsum = vec![0.0; total];
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.inv.get_inplace_scratch_len()];
        for t in 0..frames {
            let half = &spec[t * bins..(t + 1) * bins];
            for k in 0..bins {
                buf[k] = half[k] * self.norm;
            }
            for k in bins..self.n_fft {
                buf[k] = (half[self.n_fft - k] * self.norm).conj();
            }
            self.inv.process_with_scratch(&mut buf, &mut scratch);
            let start = t * self.hop;
            for i in 0..self.n_fft {
                let w = self.window[i];
                acc[start + i] += buf[i].re / self.n_fft as f64 * w;
                wsum[start + i] += w * w;
            }
        }
        (pad..pad + frames * self.hop)
            .map(|i| {
                if wsum[i] > 1e-10 {
                    acc[i] / wsum[i]
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Mel power → log grid from a frame-major half spectrum.
pub(crate) fn log_mel_from_spectrum(
    spec: &[Complex<f64>],
    frames: usize,
    fb: &[f64],
    cfg: &MelConfig,
) -> Vec<f32> {
    let bins = cfg.window_length / 2 + 1;
    let mut out = vec![0.0f32; cfg.mel_bins * frames];
    let mut power = vec![0.0; bins];
    // Triangular rows: only the nonzero span contributes.
    let spans: Vec<(usize, usize)> = fb
        .chunks(bins)
        .map(|row| {
            let lo = row.iter().position(|&w| w != 0.0).unwrap_or(0);
            let hi = row.iter().rposition(|&w| w != 0.0).map_or(0, |i| i + 1);
            (lo, hi.max(lo))
        })
        .collect();
    for t in 0..frames {
        for (p, c) in power.iter_mut().zip(&spec[t * bins..(t + 1) * bins]) {
            *p = c.norm_sqr();
        }
        for (m, &(lo, hi)) in spans.iter().enumerate() {
            let row = &fb[m * bins + lo..m * bins + hi];
            let e: f64 = row.iter().zip(&power[lo..hi]).map(|(w, p)| w * p).sum();
            out[m * frames + t] = e.max(cfg.log_floor).ln() as f32;
        }
    }
    out
}

/// Log-Mel spectrogram with `len(w)/hop` frames.
pub fn mel_spectrogram(w: &Waveform, cfg: &MelConfig) -> Result<MelSpec> {
    cfg.validate()?;
    if w.sample_rate() != cfg.sample_rate {
        return Err(Error::InvalidArgument(format!(
            "waveform rate {} differs from mel config rate {}",
            w.sample_rate(),
            cfg.sample_rate
        )));
    }
    let stft = Stft::new(cfg.window_length, cfg.hop);
    let (spec, frames) = stft.analyze(w.samples())?;
    let fb = mel_filterbank(cfg);
    MelSpec::new(
        log_mel_from_spectrum(&spec, frames, &fb, cfg),
        frames,
        cfg.clone(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, n: usize, amp: f64) -> Waveform {
        Waveform::new(
            (0..n)
                .map(|i| {
                    (amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 16_000.0).sin()) as f32
                })
                .collect(),
            16_000,
        )
        .unwrap()
    }

    #[test]
    fn full_scale_grid_is_64_by_1024() {
        let w = sine(440.0, 163_840, 0.3);
        let m = mel_spectrogram(&w, &MelConfig::paper()).unwrap();
        assert_eq!((m.n_mels(), m.frames()), (64, 1024));
    }

    #[test]
    fn silence_is_floor_everywhere() {
        let cfg = MelConfig::desk();
        let w = Waveform::new(vec![0.0; 16_000], 16_000).unwrap();
        let m = mel_spectrogram(&w, &cfg).unwrap();
        assert!(m.values().iter().all(|&v| v == cfg.log_min()));
    }

    #[test]
    fn one_khz_sine_peaks_in_the_bin_centred_nearest_one_khz() {
        let cfg = MelConfig::desk();
        // independent centre-frequency oracle
        let mel_hi = 2595.0 * (1.0f64 + 8000.0 / 700.0).log10();
        let centres: Vec<f64> = (1..=cfg.mel_bins)
            .map(|i| {
                let m = mel_hi * i as f64 / (cfg.mel_bins + 1) as f64;
                700.0 * (10f64.powf(m / 2595.0) - 1.0)
            })
            .collect();
        let expected = (0..cfg.mel_bins)
            .min_by(|&a, &b| {
                (centres[a] - 1000.0)
                    .abs()
                    .total_cmp(&(centres[b] - 1000.0).abs())
            })
            .unwrap();
        let m = mel_spectrogram(&sine(1000.0, 32_000, 0.5), &cfg).unwrap();
        for t in 0..m.frames() {
            let arg = (0..m.n_mels())
                .max_by(|&a, &b| m.get(a, t).total_cmp(&m.get(b, t)))
                .unwrap();
            assert_eq!(arg, expected, "frame {t}");
        }
    }

    #[test]
    fn rejects_short_and_misaligned() {
        let cfg = MelConfig::desk();
        assert!(mel_spectrogram(&Waveform::new(vec![0.0; 480], 16_000).unwrap(), &cfg).is_err());
        assert!(mel_spectrogram(&Waveform::new(vec![0.0; 16_001], 16_000).unwrap(), &cfg).is_err());
    }

    #[test]
    fn stft_roundtrip_reconstructs_signal() {
        let stft = Stft::new(1024, 160);
        let w = sine(300.0, 16_000, 0.4);
        let (spec, frames) = stft.analyze(w.samples()).unwrap();
        let y = stft.synthesize(&spec, frames);
        let err = y
            .iter()
            .zip(w.samples())
            .map(|(a, b)| (a - *b as f64).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-6, "max err {err}");
    }

    #[test]
    fn config_validation() {
        let mut c = MelConfig::desk();
        c.fmax = 9_000.0;
        assert!(c.validate().is_err());
        let mut c = MelConfig::desk();
        c.hop = 2048;
        assert!(c.validate().is_err());
        let mut c = MelConfig::desk();
        c.mel_bins = 0;
        assert!(c.validate().is_err());
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(12))]
        #[test]
        fn doubling_amplitude_never_decreases_entries(seed in 0u64..1000, frames in 4usize..12) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let cfg = MelConfig::desk();
            let x: Vec<f32> = (0..frames * cfg.hop).map(|_| rng.random_range(-0.4f32..0.4)).collect();
            let w = Waveform::new(x, 16_000).unwrap();
            let a = mel_spectrogram(&w, &cfg).unwrap();
            let b = mel_spectrogram(&w.scaled(2.0), &cfg).unwrap();
            proptest::prop_assert_eq!(a.frames(), frames);
            for (x, y) in a.values().iter().zip(b.values()) {
                proptest::prop_assert!(y >= x);
            }
        }
    }
}
