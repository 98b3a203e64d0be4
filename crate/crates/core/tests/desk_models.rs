use std::sync::OnceLock;

use foley_core::config::{ExperimentConfig, Stage};
use foley_core::dataset::{build_corpus, ClassLabel};
use foley_core::embedding::cosine_similarity;
use foley_core::features::{load_corpus_mels, LabeledMel};
use foley_core::latent_clap::{
    agreement, distillation_pairs, train_latent_clap, LatentClapModel, LatentClapTrainConfig,
};
use foley_core::mini_clap::{train_clap, ClapModel, ClapTrainConfig, TrainReport};
use foley_core::pipeline::{clap_accuracy, reconstruction_error};
use foley_core::vae::{train_vae, EncodeMode, VaeModel, VaeTrainConfig};

struct Desk {
    train: Vec<LabeledMel>,
    held: Vec<LabeledMel>,
    clap: ClapModel,
    clap_report: TrainReport,
    vae: VaeModel,
    vae_report: TrainReport,
    lclap: LatentClapModel,
}

/// Desk-preset models trained once on the default corpus.
fn desk() -> &'static Desk {
    static CELL: OnceLock<Desk> = OnceLock::new();
    CELL.get_or_init(|| {
        let cfg = ExperimentConfig::load(None, &["seed=0".into()]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let ds = &cfg.dataset;
        let train = build_corpus(
            &cfg.classes,
            ds.per_class,
            cfg.stage_seed(Stage::Data),
            ds.duration_s,
            dir.path().join("t"),
        )
        .unwrap();
        let held =
            build_corpus(&cfg.classes, 16, 4242, ds.duration_s, dir.path().join("h")).unwrap();
        let train = load_corpus_mels(&train, &cfg.dsp, ds.frames).unwrap();
        let held = load_corpus_mels(&held, &cfg.dsp, ds.frames).unwrap();
        let (clap, clap_report) = train_clap(
            &train,
            &cfg.classes,
            cfg.clap.model.clone(),
            &ClapTrainConfig {
                epochs: cfg.clap.epochs,
                lr: cfg.clap.lr,
                seed: cfg.stage_seed(Stage::Clap),
            },
        )
        .unwrap();
        let v = &cfg.vae;
        let (vae, vae_report) = train_vae(
            &train,
            &cfg.dsp,
            v.model.clone(),
            &VaeTrainConfig {
                epochs: v.epochs,
                lr: v.lr,
                batch_size: v.batch_size,
                crop_frames: v.crop_frames,
                seed: cfg.stage_seed(Stage::Vae),
            },
        )
        .unwrap();
        let l = &cfg.latent_clap;
        let (lclap, _) = train_latent_clap(
            &train,
            &clap,
            &vae,
            l.model.clone(),
            &LatentClapTrainConfig {
                epochs: l.epochs,
                lr: l.lr,
                batch_size: l.batch_size,
                seed: cfg.stage_seed(Stage::LatentClap),
            },
        )
        .unwrap();
        Desk {
            train,
            held,
            clap,
            clap_report,
            vae,
            vae_report,
            lclap,
        }
    })
}

#[test]
fn clap_retrieves_training_classes() {
    let d = desk();
    let acc = clap_accuracy(&d.clap, &d.train).unwrap();
    assert!(acc >= 0.95, "retrieval accuracy {acc}");
    let l = &d.clap_report.epoch_losses;
    assert!(l.last() < l.first());
}

#[test]
fn clap_same_class_pairs_are_closer_than_cross_class() {
    let d = desk();
    let mels: Vec<_> = d.held.iter().map(|x| &x.mel).collect();
    let e = d.clap.encode_audio_batch(&mels).unwrap();
    let (mut same, mut ns, mut cross, mut nc) = (0.0, 0, 0.0, 0);
    for i in 0..e.len() {
        for j in i + 1..e.len() {
            let c = cosine_similarity(&e[i], &e[j]).unwrap();
            if d.held[i].label == d.held[j].label {
                same += c;
                ns += 1;
            } else {
                cross += c;
                nc += 1;
            }
        }
    }
    let (same, cross) = (same / ns as f64, cross / nc as f64);
    assert!(same > cross, "same-class {same} vs cross-class {cross}");
}

#[test]
fn vae_reconstructs_and_latents_are_diffusion_scaled() {
    let d = desk();
    let l = &d.vae_report.epoch_losses;
    assert!(l.last() < l.first());
    let err = reconstruction_error(&d.vae, &d.train).unwrap();
    assert!(err < 0.036, "relative reconstruction error {err}");
    let mels: Vec<_> = d.train.iter().map(|x| &x.mel).collect();
    let zs = d.vae.encode_batch(&mels, EncodeMode::Mean, 0).unwrap();
    let [c, h, w] = zs[0].shape();
    let mut stats = Vec::new();
    for ch in 0..c {
        let vals: Vec<f64> = zs
            .iter()
            .flat_map(|z| {
                z.values()[ch * h * w..(ch + 1) * h * w]
                    .iter()
                    .map(|&v| v as f64)
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
        stats.push((mean, std));
    }
    for (ch, (mean, std)) in stats.into_iter().enumerate() {
        assert!(
            (-1.0..=1.0).contains(&mean),
            "channel {ch}: mean {mean} std {std}"
        );
        assert!(
            (0.3..=3.0).contains(&std),
            "channel {ch}: mean {mean} std {std}"
        );
    }
}

#[test]
fn latent_clap_agrees_with_audio_branch_on_held_out_clips() {
    let d = desk();
    let (lat, tgt) = distillation_pairs(&d.held, &d.clap, &d.vae).unwrap();
    let cos = agreement(&d.lclap, &lat, &tgt).unwrap();
    assert!(cos >= 0.9, "mean cosine {cos}");
}

#[test]
fn classes_used_by_the_desk_preset() {
    assert_eq!(desk().clap.classes, ClassLabel::ALL.to_vec());
}
