use foley_core::dataset::{build_corpus, synthesize_class_clip, ClassLabel, Manifest};
use foley_core::dsp::{save_wav, MelConfig, Waveform};
use foley_core::embedding::Embedding;
use foley_core::fad::{
    evaluate, fit_stats, frechet_distance, stats_path, Embedder, EmbeddingStats,
};
use foley_core::features::load_corpus_mels;
use foley_core::mini_clap::{train_clap, ClapConfig, ClapModel, ClapTrainConfig};
use foley_core::pipeline::white_noise_clips;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_set(n: usize, d: usize, seed: u64, scale: f32, shift: f32) -> Vec<Embedding> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            Embedding::new(
                (0..d)
                    .map(|_| shift + scale * rng.sample::<f32, _>(StandardNormal))
                    .collect(),
            )
            .unwrap()
        })
        .collect()
}

fn diag(mean: Vec<f64>, var: &[f64]) -> EmbeddingStats {
    let d = var.len();
    let mut cov = vec![0.0; d * d];
    for (i, v) in var.iter().enumerate() {
        cov[i * d + i] = *v;
    }
    EmbeddingStats {
        mean,
        cov,
        count: 10,
        shrinkage: 0.0,
    }
}

#[test]
fn covariance_matches_scalar_loop() {
    let set = random_set(100, 8, 1, 1.3, 0.2);
    let s = fit_stats(&set, 1e-6).unwrap();
    let x: Vec<Vec<f64>> = set
        .iter()
        .map(|e| e.values().iter().map(|&v| v as f64).collect())
        .collect();
    let n = x.len() as f64;
    for j in 0..8 {
        let mu = x.iter().map(|r| r[j]).sum::<f64>() / n;
        assert!((s.mean[j] - mu).abs() <= 1e-10);
    }
    for i in 0..8 {
        for j in 0..8 {
            let (mi, mj) = (s.mean[i], s.mean[j]);
            let mut c = x.iter().map(|r| (r[i] - mi) * (r[j] - mj)).sum::<f64>() / (n - 1.0);
            if i == j {
                c += 1e-6;
            }
            assert!((s.cov[i * 8 + j] - c).abs() <= 1e-10, "({i},{j})");
            assert!((s.cov[i * 8 + j] - s.cov[j * 8 + i]).abs() <= 1e-8);
        }
    }
}

#[test]
fn analytic_cases() {
    let a = diag(vec![0.0], &[1.0]);
    let b = diag(vec![3.0], &[4.0]);
    assert!((frechet_distance(&a, &b).unwrap() - 10.0).abs() <= 1e-12);
    let s = fit_stats(&random_set(50, 6, 2, 1.0, 0.0), 1e-6).unwrap();
    assert!(frechet_distance(&s, &s).unwrap() <= 1e-8);
    let mut t = s.clone();
    t.mean = t
        .mean
        .iter()
        .enumerate()
        .map(|(i, m)| m + i as f64 * 0.5)
        .collect();
    let dmu: f64 = (0..6).map(|i| (i as f64 * 0.5).powi(2)).sum();
    assert!((frechet_distance(&s, &t).unwrap() - dmu).abs() <= 1e-8);
}

proptest! {
    #[test]
    fn diagonal_covariances_match_closed_form(
        va in prop::collection::vec(0.01f64..10.0, 4),
        vb in prop::collection::vec(0.01f64..10.0, 4),
        ma in prop::collection::vec(-3.0f64..3.0, 4),
        mb in prop::collection::vec(-3.0f64..3.0, 4),
    ) {
        let want: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum::<f64>()
            + va.iter().zip(&vb).map(|(x, y)| (x.sqrt() - y.sqrt()).powi(2)).sum::<f64>();
        let got = frechet_distance(&diag(ma, &va), &diag(mb, &vb)).unwrap();
        prop_assert!((got - want).abs() <= 1e-8 * want.max(1.0), "{} vs {}", got, want);
    }

    #[test]
    fn symmetric_and_nonnegative(seed in 0u64..500, shift in -1.0f32..1.0) {
        let a = fit_stats(&random_set(20, 5, seed, 1.0, 0.0), 1e-6).unwrap();
        let b = fit_stats(&random_set(20, 5, seed + 1000, 0.7, shift), 1e-6).unwrap();
        let ab = frechet_distance(&a, &b).unwrap();
        let ba = frechet_distance(&b, &a).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert!((ab - ba).abs() <= 1e-8 * ab.max(1.0));
        prop_assert!(frechet_distance(&a, &a).unwrap() <= 1e-8);
    }

    #[test]
    fn fit_is_permutation_invariant(seed in 0u64..500) {
        let set = random_set(15, 4, seed, 1.0, 0.3);
        let mut rev = set.clone();
        rev.reverse();
        rev.rotate_left((seed % 7) as usize);
        let (a, b) = (fit_stats(&set, 1e-6).unwrap(), fit_stats(&rev, 1e-6).unwrap());
        for (x, y) in a.mean.iter().chain(&a.cov).zip(b.mean.iter().chain(&b.cov)) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn shrinkage_perturbation_is_bounded(seed in 0u64..200, eps in 1e-8f64..1e-3) {
        let (xa, xb) = (random_set(30, 6, seed, 1.0, 0.0), random_set(30, 6, seed + 7, 1.5, 0.4));
        let base = frechet_distance(&fit_stats(&xa, 0.0).unwrap(), &fit_stats(&xb, 0.0).unwrap()).unwrap();
        let shrunk = frechet_distance(&fit_stats(&xa, eps).unwrap(), &fit_stats(&xb, eps).unwrap()).unwrap();
        prop_assert!((shrunk - base).abs() <= 10.0 * 6.0 * eps, "{} vs {}", shrunk, base);
    }
}

#[test]
fn dimension_and_count_errors() {
    let a = fit_stats(&random_set(5, 3, 1, 1.0, 0.0), 1e-6).unwrap();
    let b = fit_stats(&random_set(5, 4, 1, 1.0, 0.0), 1e-6).unwrap();
    assert!(frechet_distance(&a, &b).is_err());
    assert!(fit_stats(&random_set(1, 3, 1, 1.0, 0.0), 1e-6).is_err());
    let mut bad = a.clone();
    bad.mean[0] = f64::NAN;
    assert!(frechet_distance(&bad, &a).is_err());
}

fn untrained_embedder() -> ClapModel {
    let cfg = ClapConfig {
        embed_dim: 8,
        ..ClapConfig::desk()
    };
    ClapModel::new(cfg, ClassLabel::ALL.to_vec(), 3).unwrap()
}

#[test]
fn embed_set_preserves_order_and_count() {
    let clap = untrained_embedder();
    let mel = MelConfig::desk();
    let e = Embedder {
        clap: &clap,
        mel: &mel,
        frames: 64,
    };
    let clips: Vec<Waveform> = (0..3)
        .map(|i| synthesize_class_clip(ClassLabel::ALL[i], i as u64, 0.64).unwrap())
        .collect();
    let a = e.embed_set(&clips).unwrap();
    assert_eq!(a.len(), 3);
    let dup = e.embed_set(&[clips[1].clone(), clips[1].clone()]).unwrap();
    assert_eq!(dup[0], dup[1]);
    assert_eq!(dup[0], a[1]);
    let perm = e
        .embed_set(&[clips[2].clone(), clips[0].clone(), clips[1].clone()])
        .unwrap();
    assert_eq!(perm, vec![a[2].clone(), a[0].clone(), a[1].clone()]);
    assert!(e.embed_set(&[]).is_err());
}

#[test]
fn reference_set_against_itself_scores_zero() {
    let dir = tempfile::tempdir().unwrap();
    let clap = untrained_embedder();
    let mel = MelConfig::desk();
    let e = Embedder {
        clap: &clap,
        mel: &mel,
        frames: 64,
    };
    let classes = [ClassLabel::Rain, ClassLabel::Keyboard];
    for &label in &classes {
        let clips: Vec<Waveform> = (0..12)
            .map(|i| synthesize_class_clip(label, 40 + i, 0.64).unwrap())
            .collect();
        for (i, w) in clips.iter().enumerate() {
            save_wav(
                dir.path()
                    .join("gen")
                    .join(label.as_str())
                    .join(format!("{i:04}.wav")),
                w,
            )
            .unwrap();
        }
        let stats = fit_stats(&e.embed_set(&clips).unwrap(), 1e-6).unwrap();
        stats
            .write(stats_path(&dir.path().join("ref"), label))
            .unwrap();
    }
    let report = evaluate(
        &dir.path().join("gen"),
        &dir.path().join("ref"),
        &e,
        &classes,
    )
    .unwrap();
    assert_eq!(report.classes.len(), 2);
    for c in &report.classes {
        assert!(c.fad <= 1e-6, "{} scored {}", c.label, c.fad);
    }
    assert!(evaluate(
        &dir.path().join("gen"),
        &dir.path().join("ref"),
        &e,
        &[ClassLabel::DogBark]
    )
    .is_err());
}

#[test]
fn white_noise_is_farther_than_a_real_split() {
    let dir = tempfile::tempdir().unwrap();
    let mel = MelConfig::desk();
    let frames = 128;
    let classes = ClassLabel::ALL.to_vec();
    let corpus = build_corpus(&classes, 16, 5, 1.28, dir.path().join("train")).unwrap();
    let data = load_corpus_mels(&corpus, &mel, frames).unwrap();
    let cfg = ClapConfig {
        embed_dim: 8,
        ..ClapConfig::desk()
    };
    let (clap, _) = train_clap(
        &data,
        &classes,
        cfg,
        &ClapTrainConfig {
            epochs: 8,
            lr: 1e-3,
            seed: 9,
        },
    )
    .unwrap();
    let e = Embedder {
        clap: &clap,
        mel: &mel,
        frames,
    };
    let held = build_corpus(&classes, 24, 77, 1.28, dir.path().join("held")).unwrap();
    let held = Manifest::read(held.root.clone()).unwrap();
    let noise = white_noise_clips(12, mel.samples_for_frames(frames), mel.sample_rate, 3).unwrap();
    let noise_stats = fit_stats(&e.embed_set(&noise).unwrap(), 1e-6).unwrap();
    for &label in &classes {
        let clips: Vec<Waveform> = held
            .entries
            .iter()
            .filter(|x| x.label == label)
            .map(|x| foley_core::dsp::load_wav(held.path_of(x), Some(mel.sample_rate)).unwrap())
            .collect();
        let (a, b) = clips.split_at(12);
        let sa = fit_stats(&e.embed_set(a).unwrap(), 1e-6).unwrap();
        let sb = fit_stats(&e.embed_set(b).unwrap(), 1e-6).unwrap();
        let real = frechet_distance(&sa, &sb).unwrap();
        let noisy = frechet_distance(&noise_stats, &sb).unwrap();
        assert!(noisy > real, "{label}: noise {noisy} vs real split {real}");
    }
}
