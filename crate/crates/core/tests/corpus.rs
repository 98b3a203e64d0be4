use foley_core::dataset::{synthesize_class_clip, ClassLabel};
use foley_core::dsp::{load_wav, mel_spectrogram, MelConfig};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

fn peak_hz(x: &[f32], rate: u32) -> f64 {
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v as f64, 0.0)).collect();
    FftPlanner::new()
        .plan_fft_forward(buf.len())
        .process(&mut buf);
    let k = (1..buf.len() / 2)
        .max_by(|&a, &b| buf[a].norm().total_cmp(&buf[b].norm()))
        .unwrap();
    k as f64 * rate as f64 / x.len() as f64
}

#[test]
fn resampling_keeps_length_and_pitch() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tone.wav");
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: 22_050,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(&path, spec).unwrap();
    let len = 22_050;
    for i in 0..len {
        let v = (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / 22_050.0).sin() * 0.5;
        w.write_sample((v * i16::MAX as f64) as i16).unwrap();
    }
    w.finalize().unwrap();
    let out = load_wav(&path, Some(16_000)).unwrap();
    let want = len * 16_000 / 22_050;
    assert!(out.len().abs_diff(want) <= 1, "{} vs {want}", out.len());
    let f = peak_hz(out.samples(), 16_000);
    assert!((f - 1000.0).abs() <= 2.0, "peak at {f} Hz");
}

/// Softmax regression trained by full-batch gradient descent.
struct Probe {
    w: Vec<Vec<f64>>,
}

impl Probe {
    fn scores(&self, x: &[f64]) -> Vec<f64> {
        self.w
            .iter()
            .map(|row| {
                row.iter()
                    .zip(x.iter().chain([1.0].iter()))
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect()
    }

    fn fit(xs: &[Vec<f64>], ys: &[usize], k: usize, epochs: usize, lr: f64) -> Self {
        let d = xs[0].len() + 1;
        let mut p = Probe {
            w: vec![vec![0.0; d]; k],
        };
        for _ in 0..epochs {
            let mut grad = vec![vec![0.0; d]; k];
            for (x, &y) in xs.iter().zip(ys) {
                let s = p.scores(x);
                let m = s.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..k {
                    let g = e[c] / z - if c == y { 1.0 } else { 0.0 };
                    for (j, xv) in x.iter().chain([1.0].iter()).enumerate() {
                        grad[c][j] += g * xv;
                    }
                }
            }
            for (w, g) in p.w.iter_mut().zip(&grad) {
                for (wj, gj) in w.iter_mut().zip(g) {
                    *wj -= lr * gj / xs.len() as f64;
                }
            }
        }
        p
    }

    fn predict(&self, x: &[f64]) -> usize {
        let s = self.scores(x);
        (0..s.len()).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap()
    }
}

#[test]
fn classes_are_linearly_separable_on_mel_means() {
    let mel = MelConfig::desk();
    let mut feats = Vec::new();
    let mut labels = Vec::new();
    for (c, &label) in ClassLabel::ALL.iter().enumerate() {
        for i in 0..50 {
            let w = synthesize_class_clip(label, 1000 + i, 4.0).unwrap();
            let m = mel_spectrogram(&w, &mel).unwrap();
            let f: Vec<f64> = (0..m.n_mels())
                .map(|b| {
                    (0..m.frames()).map(|t| m.get(b, t) as f64).sum::<f64>() / m.frames() as f64
                })
                .collect();
            feats.push(f);
            labels.push(c);
        }
    }
    let d = feats[0].len();
    let mean: Vec<f64> = (0..d)
        .map(|j| feats.iter().map(|f| f[j]).sum::<f64>() / feats.len() as f64)
        .collect();
    let std: Vec<f64> = (0..d)
        .map(|j| {
            (feats.iter().map(|f| (f[j] - mean[j]).powi(2)).sum::<f64>() / feats.len() as f64)
                .sqrt()
                .max(1e-9)
        })
        .collect();
    for f in &mut feats {
        for j in 0..d {
            f[j] = (f[j] - mean[j]) / std[j];
        }
    }
    let (mut tx, mut ty, mut hx, mut hy) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, (f, y)) in feats.into_iter().zip(labels).enumerate() {
        if i % 5 == 4 {
            hx.push(f);
            hy.push(y);
        } else {
            tx.push(f);
            ty.push(y);
        }
    }
    let probe = Probe::fit(&tx, &ty, 7, 300, 0.5);
    let hits = hx
        .iter()
        .zip(&hy)
        .filter(|(x, &y)| probe.predict(x) == y)
        .count();
    let acc = hits as f64 / hx.len() as f64;
    assert!(acc >= 0.9, "held-out accuracy {acc}");
}
