mod common;

use std::process::Command;

use common::micro_pipeline_config;
use foley_core::config::{ExperimentConfig, Stage};
use foley_core::dataset::ClassLabel;
use foley_core::error::Error;
use foley_core::pipeline::Run;

fn foley() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_foley"));
    c.env_remove("FOLEY_SEED").env("RUST_LOG", "warn");
    c
}

#[test]
fn finetune_without_vae_names_the_missing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let out = foley()
        .args(["finetune-ldm", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("train-vae"), "{err}");
}

#[test]
fn unknown_subcommand_fails() {
    let out = foley().arg("train-everything").output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn overrides_and_seed_fallback_reach_the_config() {
    let out = foley()
        .args([
            "show-config",
            "--set",
            "generation.thresholds.keyboard=0.15",
            "--set",
            "ldm.train.loss.lambda=1000",
        ])
        .env("FOLEY_SEED", "99")
        .output()
        .unwrap();
    assert!(out.status.success());
    let cfg = ExperimentConfig::load(Some(&String::from_utf8(out.stdout).unwrap()), &[]).unwrap();
    assert_eq!(cfg.seed, 99);
    assert_eq!(
        cfg.generation
            .config
            .threshold(ClassLabel::Keyboard)
            .unwrap(),
        0.15
    );
    assert_eq!(cfg.ldm.train.loss.lambda, 1000.0);
    let out = foley()
        .args(["show-config", "--set", "seed=3"])
        .env("FOLEY_SEED", "99")
        .output()
        .unwrap();
    assert!(String::from_utf8_lossy(&out.stdout).contains("seed = 3"));
    let out = foley()
        .args(["show-config", "--set", "ldm.train.loss.lambda=-1"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let out = foley()
        .args(["show-config", "--set", "no.such.key=1"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn config_file_is_layered_under_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("exp.toml");
    std::fs::write(&path, "seed = 5\n[generation]\nguidance_weight = 1.5\n").unwrap();
    let out = foley()
        .args(["show-config", "--config"])
        .arg(&path)
        .args(["--set", "generation.guidance_weight=3.0"])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let cfg = ExperimentConfig::load(Some(&String::from_utf8(out.stdout).unwrap()), &[]).unwrap();
    assert_eq!((cfg.seed, cfg.generation.config.guidance_weight), (5, 3.0));
}

#[test]
fn paper_preset_snapshot() {
    let cfg = ExperimentConfig::load(None, &["preset=paper".into()]).unwrap();
    assert_eq!(cfg.vae.model.ratio, 4);
    assert_eq!(cfg.vae.model.latent_channels, 8);
    assert_eq!(cfg.dsp.mel_bins, 64);
    assert_eq!(cfg.dsp.sample_rate, 16_000);
    assert_eq!(cfg.dataset.frames, 1024);
    assert_eq!(cfg.clap.model.embed_dim, 512);
    assert_eq!(cfg.latent_clap.model.latent_shape, [8, 16, 256]);
    assert_eq!(cfg.ldm.model.latent_shape, [8, 16, 256]);
    assert_eq!(cfg.ldm.model.schedule.steps, 1000);
    assert_eq!(cfg.generation.config.inference_steps, 200);
    assert_eq!(cfg.generation.config.guidance_weight, 2.0);
    assert_eq!(cfg.ldm.train.lr, 3e-6);
    assert_eq!(cfg.ldm.train.epochs, 500);
    assert_eq!(cfg.ldm.train.loss.lambda, 2000.0);
    assert_eq!(cfg.ldm.train.loss.weight_base, 10.0);
    assert_eq!(cfg.ldm.train.loss.weight_scale, 200.0);
    assert_eq!(cfg.generation.clips_per_class, 100);
    assert_eq!(cfg.sweep.lambdas, vec![0.0, 1000.0, 2000.0]);
    let t = |l| cfg.generation.config.threshold(l).unwrap();
    assert_eq!(t(ClassLabel::Keyboard), 0.15);
    assert_eq!(t(ClassLabel::MotorVehicle), 0.75);
    for l in [
        ClassLabel::DogBark,
        ClassLabel::Footstep,
        ClassLabel::GunShot,
        ClassLabel::Rain,
        ClassLabel::SneezeCough,
    ] {
        assert_eq!(t(l), 0.2);
    }
}

#[test]
fn upstream_config_change_requires_force() {
    let dir = tempfile::tempdir().unwrap();
    let run = Run::new(dir.path(), micro_pipeline_config(1), false);
    run.make_data().unwrap();
    assert!(run.require(Stage::Data).is_ok());
    let mut changed = micro_pipeline_config(1);
    changed.dataset.per_class = 7;
    let stale = Run::new(dir.path(), changed.clone(), false);
    assert!(matches!(
        stale.require(Stage::Data),
        Err(Error::ConfigMismatch { .. })
    ));
    assert!(matches!(
        stale.train_clap(),
        Err(Error::ConfigMismatch { .. })
    ));
    assert!(Run::new(dir.path(), changed, true)
        .require(Stage::Data)
        .is_ok());
    let reseeded = Run::new(dir.path(), micro_pipeline_config(2), false);
    assert!(reseeded.require(Stage::Data).is_err());
    assert!(matches!(
        run.require(Stage::Vae),
        Err(Error::MissingStage {
            stage: "train-vae",
            ..
        })
    ));
}

#[test]
fn bench_with_no_clips_is_empty() {
    use foley_core::generate::GenerationConfig;
    use foley_core::pipeline::{bench_throughput, PlantedScorer};
    struct Never;
    impl foley_core::generate::ClipSource for Never {
        fn generate(
            &self,
            _: ClassLabel,
            _: &[u64],
        ) -> foley_core::Result<Vec<foley_core::generate::GeneratedClip>> {
            panic!("nothing should be generated")
        }
    }
    let cfg = GenerationConfig::desk();
    let r = bench_throughput(
        &Never,
        &PlantedScorer::with_rate(0, 0.1),
        ClassLabel::Rain,
        0,
        &cfg,
        0.1,
    )
    .unwrap();
    assert!(r.sections.is_empty());
}
