use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;

use super::mel::{log_mel_from_spectrum, mel_filterbank, MelSpec, Stft};
use super::Waveform;
use crate::error::{Error, Result};

/// Re-analysis error of the retained estimate after each iteration.
#[derive(Clone, Debug, Default)]
pub struct GriffinLimTrace {
    pub errors: Vec<f64>,
}

pub fn griffin_lim(m: &MelSpec, iterations: usize, seed: u64) -> Result<Waveform> {
    griffin_lim_traced(m, iterations, seed).map(|(w, _)| w)
}

/// Inverts a log-Mel grid: filterbank pseudo-inverse for magnitudes, then
/// alternating projections from a seeded random phase. The estimate with the
/// lowest log-Mel re-analysis error seen so far is kept, so the traced error
/// never increases.
pub fn griffin_lim_traced(
    m: &MelSpec,
    iterations: usize,
    seed: u64,
) -> Result<(Waveform, GriffinLimTrace)> {
    if iterations == 0 {
        return Err(Error::InvalidArgument(
            "griffin_lim needs at least one iteration".into(),
        ));
    }
    let cfg = m.config();
    cfg.validate()?;
    let stft = Stft::new(cfg.window_length, cfg.hop);
    let bins = stft.bins();
    let frames = m.frames();
    let fb = mel_filterbank(cfg);
    let fb_mat = DMatrix::from_row_slice(cfg.mel_bins, bins, &fb);
    let pinv = fb_mat
        .pseudo_inverse(1e-10)
        .map_err(|e| Error::InvalidArgument(format!("filterbank pseudo-inverse: {e}")))?;

    // Entries at the floor carry no energy.
    let mel_power: Vec<f64> = m
        .values()
        .iter()
        .map(|&v| ((v as f64).exp() - cfg.log_floor).max(0.0))
        .collect();
    let mut mag = vec![0.0; frames * bins];
    for t in 0..frames {
        for k in 0..bins {
            let mut p = 0.0;
            for b in 0..cfg.mel_bins {
                p += pinv[(k, b)] * mel_power[b * frames + t];
            }
            mag[t * bins + k] = p.max(0.0).sqrt();
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut phase: Vec<Complex<f64>> = (0..frames * bins)
        .map(|_| Complex::from_polar(1.0, rng.random_range(0.0..std::f64::consts::TAU)))
        .collect();

    let mut best: Option<(f64, Vec<f32>)> = None;
    let mut trace = GriffinLimTrace::default();
    let mut spec = vec![Complex::new(0.0, 0.0); frames * bins];
    for _ in 0..iterations {
        for ((s, &a), p) in spec.iter_mut().zip(&mag).zip(&phase) {
            *s = p * a;
        }
        let x: Vec<f32> = stft
            .synthesize(&spec, frames)
            .into_iter()
            .map(|v| v.clamp(-1.0, 1.0) as f32)
            .collect();
        let (re, _) = stft.analyze(&x)?;
        let logmel = log_mel_from_spectrum(&re, frames, &fb, cfg);
        let err = relative_l2(&logmel, m.values());
        if best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, x));
        }
        trace
            .errors
            .push(best.as_ref().map(|(e, _)| *e).unwrap_or(err));
        for (p, c) in phase.iter_mut().zip(&re) {
            let n = c.norm();
            if n > 1e-12 {
                *p = c / n;
            }
        }
    }
    let (_, x) = best.expect("at least one iteration ran");
    Ok((Waveform::new(x, cfg.sample_rate)?, trace))
}

fn relative_l2(a: &[f32], b: &[f32]) -> f64 {
    let num: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum();
    let den: f64 = b.iter().map(|y| (*y as f64).powi(2)).sum();
    (num / den.max(f64::MIN_POSITIVE)).sqrt()
}
