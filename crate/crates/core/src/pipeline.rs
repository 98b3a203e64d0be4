//! Stage graph over a run directory: data → contrastive models → VAE →
//! latent CLAP → diffusion fine-tune → generation → evaluation, plus the λ
//! sweep and throughput bench.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::checkpoint::{load_checkpoint, read_meta, save_checkpoint, CheckpointMeta};
use crate::config::{ExperimentConfig, Stage};
use crate::dataset::{build_corpus, ClassLabel, Manifest};
use crate::dsp::Waveform;
use crate::error::{Error, IoContext, Result};
use crate::fad::{
    evaluate, fit_stats, frechet_distance, stats_path, Embedder, EmbeddingStats, EvalReport,
};
use crate::features::{load_corpus_mels, LabeledMel};
use crate::generate::{
    generate_filtered, generate_unfiltered, write_class_output, ClapScorer, ClipScorer, ClipSource,
    GeneratedClip, GenerationConfig, GenerationReport, Pipeline,
};
use crate::latent_clap::{
    agreement, distillation_pairs, train_latent_clap, LatentClapModel, LatentClapTrainConfig,
};
use crate::ldm::{finetune_ldm, FinetuneData, LdmModel, TrainingRecord};
use crate::mini_clap::{train_clap, ClapModel, ClapTrainConfig};
use crate::vae::{train_vae, VaeModel, VaeTrainConfig};

pub const RUN_SUMMARY: &str = "run.json";

/// A run directory plus the configuration every stage reads.
pub struct Run {
    pub dir: PathBuf,
    pub cfg: ExperimentConfig,
    /// Proceed despite upstream config-hash mismatches.
    pub force: bool,
}

fn what(stage: Stage) -> &'static str {
    match stage {
        Stage::Data => "corpus",
        Stage::Clap => "CLAP checkpoint",
        Stage::EvalClap => "evaluation embedder checkpoint",
        Stage::Vae => "VAE checkpoint",
        Stage::LatentClap => "latent CLAP checkpoint",
        Stage::Ldm => "diffusion checkpoint",
        Stage::Generate => "generated audio",
    }
}

fn extra<T: serde::de::DeserializeOwned>(
    meta: &CheckpointMeta,
    key: &str,
    dir: &Path,
) -> Result<T> {
    serde_json::from_value(meta.extra.get(key).cloned().unwrap_or_default()).map_err(|e| {
        Error::Checkpoint {
            path: dir.to_path_buf(),
            reason: format!("meta field `{key}`: {e}"),
        }
    })
}

impl Run {
    pub fn new(dir: impl Into<PathBuf>, cfg: ExperimentConfig, force: bool) -> Self {
        Self {
            dir: dir.into(),
            cfg,
            force,
        }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.dir.join("data").join("corpus")
    }

    pub fn reference_dir(&self) -> PathBuf {
        self.dir.join("data").join("reference")
    }

    pub fn checkpoint_dir(&self, stage: Stage) -> PathBuf {
        match stage {
            Stage::Data => self.dir.join("data"),
            Stage::Generate => self.generated_dir(),
            s => self.dir.join("checkpoints").join(s.name()),
        }
    }

    pub fn ref_stats_dir(&self) -> PathBuf {
        self.dir.join("ref_stats")
    }

    pub fn generated_dir(&self) -> PathBuf {
        self.dir.join("generated")
    }

    pub fn eval_dir(&self) -> PathBuf {
        self.dir.join("eval")
    }

    /// Reads an upstream stage's meta, checking presence and config hash.
    pub fn require(&self, stage: Stage) -> Result<CheckpointMeta> {
        let dir = self.checkpoint_dir(stage);
        if !dir.join(crate::checkpoint::META_FILE).exists() {
            return Err(Error::MissingStage {
                stage: stage.command(),
                what: what(stage),
                path: dir,
            });
        }
        let meta = read_meta(&dir)?;
        let expected = self.cfg.module_hash(stage);
        if meta.config_hash != expected {
            if self.force {
                log::warn!("{}: config hash mismatch ignored (--force)", stage.name());
            } else {
                return Err(Error::ConfigMismatch {
                    module: stage.name().to_string(),
                    stage: stage.command(),
                    found: meta.config_hash,
                    expected,
                });
            }
        }
        Ok(meta)
    }

    fn meta(&self, stage: Stage, extra: serde_json::Value) -> CheckpointMeta {
        CheckpointMeta::new(stage.name(), self.cfg.module_hash(stage), extra)
    }

    pub fn corpus(&self) -> Result<Manifest> {
        self.require(Stage::Data)?;
        let m = Manifest::read(self.corpus_dir())?;
        m.validate(&self.cfg.classes)?;
        Ok(m)
    }

    pub fn corpus_mels(&self) -> Result<Vec<LabeledMel>> {
        load_corpus_mels(&self.corpus()?, &self.cfg.dsp, self.cfg.dataset.frames)
    }

    fn load_clap_at(&self, stage: Stage) -> Result<(ClapModel, CheckpointMeta)> {
        let meta = self.require(stage)?;
        let dir = self.checkpoint_dir(stage);
        let (params, _) = load_checkpoint(&dir)?;
        let model = ClapModel {
            config: extra(&meta, "config", &dir)?,
            classes: extra(&meta, "classes", &dir)?,
            params,
            tuning_enabled: extra(&meta, "tuning_enabled", &dir)?,
        };
        Ok((model, meta))
    }

    pub fn load_clap(&self) -> Result<(ClapModel, CheckpointMeta)> {
        self.load_clap_at(Stage::Clap)
    }

    pub fn load_eval_clap(&self) -> Result<(ClapModel, CheckpointMeta)> {
        self.load_clap_at(Stage::EvalClap)
    }

    pub fn load_vae(&self) -> Result<(VaeModel, CheckpointMeta)> {
        let meta = self.require(Stage::Vae)?;
        let dir = self.checkpoint_dir(Stage::Vae);
        let (params, _) = load_checkpoint(&dir)?;
        let model = VaeModel {
            config: extra(&meta, "config", &dir)?,
            mel: extra(&meta, "mel", &dir)?,
            params,
            latent_std: extra(&meta, "latent_std", &dir)?,
        };
        Ok((model, meta))
    }

    pub fn load_latent_clap(&self) -> Result<(LatentClapModel, CheckpointMeta)> {
        let meta = self.require(Stage::LatentClap)?;
        let dir = self.checkpoint_dir(Stage::LatentClap);
        let (params, _) = load_checkpoint(&dir)?;
        let model = LatentClapModel {
            config: extra(&meta, "config", &dir)?,
            params,
        };
        Ok((model, meta))
    }

    pub fn load_ldm_from(&self, dir: &Path) -> Result<LdmModel> {
        let meta = read_meta(dir)?;
        let (params, _) = load_checkpoint(dir)?;
        let config: crate::ldm::LdmConfig = extra(&meta, "config", dir)?;
        let mut model = LdmModel::new(config, 0)?;
        model.params = params;
        Ok(model)
    }

    pub fn load_ldm(&self) -> Result<(LdmModel, CheckpointMeta)> {
        let meta = self.require(Stage::Ldm)?;
        Ok((self.load_ldm_from(&self.checkpoint_dir(Stage::Ldm))?, meta))
    }

    /// Merges a stage summary into `run.json`.
    pub fn record(&self, stage: &str, summary: serde_json::Value) -> Result<()> {
        let path = self.dir.join(RUN_SUMMARY);
        let mut all: serde_json::Map<String, serde_json::Value> =
            match std::fs::read_to_string(&path) {
                Ok(t) => serde_json::from_str(&t).unwrap_or_default(),
                Err(_) => serde_json::Map::new(),
            };
        all.insert("preset".into(), json!(self.cfg.preset));
        all.insert("seed".into(), json!(self.cfg.seed));
        all.insert(stage.to_string(), summary);
        std::fs::create_dir_all(&self.dir).at(&self.dir)?;
        std::fs::write(&path, serde_json::to_string_pretty(&all)?).at(&path)
    }

    pub fn make_data(&self) -> Result<serde_json::Value> {
        let c = &self.cfg;
        let start = Instant::now();
        let corpus = build_corpus(
            &c.classes,
            c.dataset.per_class,
            c.stage_seed(Stage::Data),
            c.dataset.duration_s,
            self.corpus_dir(),
        )?;
        let reference = build_corpus(
            &c.classes,
            c.dataset.reference_per_class,
            c.stage_seed(Stage::Data) ^ 0x005E_ED0F_AB1E,
            c.dataset.duration_s,
            self.reference_dir(),
        )?;
        save_checkpoint(
            self.checkpoint_dir(Stage::Data),
            &Default::default(),
            &self.meta(
                Stage::Data,
                json!({"corpus": corpus.entries.len(), "reference": reference.entries.len()}),
            ),
        )?;
        let s = json!({
            "corpus_clips": corpus.entries.len(),
            "reference_clips": reference.entries.len(),
            "wall_time_s": start.elapsed().as_secs_f64(),
        });
        self.record("make-data", s.clone())?;
        Ok(s)
    }

    fn save_clap(
        &self,
        stage: Stage,
        model: &ClapModel,
        data_digest: &str,
    ) -> Result<CheckpointMeta> {
        let meta = self
            .meta(
                stage,
                json!({"config": model.config, "classes": model.classes, "tuning_enabled": model.tuning_enabled}),
            )
            .with_upstream("data", data_digest);
        save_checkpoint(self.checkpoint_dir(stage), &model.params, &meta)
    }

    /// Trains the generation-side contrastive model and the separately seeded
    /// evaluation embedder, then writes per-class reference statistics.
    pub fn train_clap(&self) -> Result<serde_json::Value> {
        let c = &self.cfg;
        let start = Instant::now();
        let data_meta = self.require(Stage::Data)?;
        let mels = self.corpus_mels()?;
        let (clap, rep) = train_clap(
            &mels,
            &c.classes,
            c.clap.model.clone(),
            &ClapTrainConfig {
                epochs: c.clap.epochs,
                lr: c.clap.lr,
                seed: c.stage_seed(Stage::Clap),
            },
        )?;
        let clap_meta = self.save_clap(Stage::Clap, &clap, &data_meta.config_hash)?;
        let (eval, eval_rep) = train_clap(
            &mels,
            &c.classes,
            c.eval.embedder.clone(),
            &ClapTrainConfig {
                epochs: c.eval.epochs,
                lr: c.eval.lr,
                seed: c.stage_seed(Stage::EvalClap),
            },
        )?;
        let eval_meta = self.save_clap(Stage::EvalClap, &eval, &data_meta.config_hash)?;
        let accuracy = clap_accuracy(&clap, &mels)?;
        let stats = self.write_reference_stats(&eval)?;
        let s = json!({
            "clap_digest": clap_meta.params_digest,
            "eval_digest": eval_meta.params_digest,
            "clap_losses": rep.epoch_losses,
            "eval_losses": eval_rep.epoch_losses,
            "clap_train_accuracy": accuracy,
            "reference_stats": stats,
            "wall_time_s": start.elapsed().as_secs_f64(),
        });
        self.record("train-clap", s.clone())?;
        Ok(s)
    }

    fn embedder<'a>(&'a self, clap: &'a ClapModel) -> Embedder<'a> {
        Embedder {
            clap,
            mel: &self.cfg.dsp,
            frames: self.cfg.dataset.frames,
        }
    }

    fn write_reference_stats(&self, eval: &ClapModel) -> Result<BTreeMap<String, usize>> {
        let manifest = Manifest::read(self.reference_dir())?;
        let embedder = self.embedder(eval);
        let mut out = BTreeMap::new();
        for &label in &self.cfg.classes {
            let clips = manifest
                .entries
                .iter()
                .filter(|e| e.label == label)
                .map(|e| crate::dsp::load_wav(manifest.path_of(e), Some(self.cfg.dsp.sample_rate)))
                .collect::<Result<Vec<_>>>()?;
            let stats = fit_stats(&embedder.embed_set(&clips)?, self.cfg.eval.shrinkage)?;
            stats.write(stats_path(&self.ref_stats_dir(), label))?;
            out.insert(label.as_str().to_string(), stats.count);
        }
        Ok(out)
    }

    pub fn train_vae(&self) -> Result<serde_json::Value> {
        let c = &self.cfg;
        let start = Instant::now();
        let data_meta = self.require(Stage::Data)?;
        let mels = self.corpus_mels()?;
        let (vae, rep) = train_vae(
            &mels,
            &c.dsp,
            c.vae.model.clone(),
            &VaeTrainConfig {
                epochs: c.vae.epochs,
                lr: c.vae.lr,
                batch_size: c.vae.batch_size,
                crop_frames: c.vae.crop_frames,
                seed: c.stage_seed(Stage::Vae),
            },
        )?;
        let meta = self
            .meta(
                Stage::Vae,
                json!({"config": vae.config, "mel": vae.mel, "latent_std": vae.latent_std}),
            )
            .with_upstream("data", &data_meta.config_hash);
        let meta = save_checkpoint(self.checkpoint_dir(Stage::Vae), &vae.params, &meta)?;
        let recon = reconstruction_error(&vae, &mels)?;
        let s = json!({
            "digest": meta.params_digest,
            "losses": rep.epoch_losses,
            "latent_std": vae.latent_std,
            "reconstruction_rel_l2": recon,
            "wall_time_s": start.elapsed().as_secs_f64(),
        });
        self.record("train-vae", s.clone())?;
        Ok(s)
    }

    pub fn train_latent_clap(&self) -> Result<serde_json::Value> {
        let c = &self.cfg;
        let start = Instant::now();
        let (clap, clap_meta) = self.load_clap()?;
        let (vae, vae_meta) = self.load_vae()?;
        let mels = self.corpus_mels()?;
        let (model, rep) = train_latent_clap(
            &mels,
            &clap,
            &vae,
            c.latent_clap.model.clone(),
            &LatentClapTrainConfig {
                epochs: c.latent_clap.epochs,
                lr: c.latent_clap.lr,
                batch_size: c.latent_clap.batch_size,
                seed: c.stage_seed(Stage::LatentClap),
            },
        )?;
        let meta = self
            .meta(Stage::LatentClap, json!({"config": model.config}))
            .with_upstream("clap", &clap_meta.params_digest)
            .with_upstream("vae", &vae_meta.params_digest);
        let meta = save_checkpoint(self.checkpoint_dir(Stage::LatentClap), &model.params, &meta)?;
        let manifest = Manifest::read(self.reference_dir())?;
        let held_out = load_corpus_mels(&manifest, &c.dsp, c.dataset.frames)?;
        let (lat, tgt) = distillation_pairs(&held_out, &clap, &vae)?;
        let cos = agreement(&model, &lat, &tgt)?;
        let s = json!({
            "digest": meta.params_digest,
            "losses": rep.epoch_losses,
            "held_out_cosine": cos,
            "wall_time_s": start.elapsed().as_secs_f64(),
        });
        self.record("train-latent-clap", s.clone())?;
        Ok(s)
    }

    /// Loads the frozen components and prepares per-clip training inputs.
    fn finetune_inputs(&self) -> Result<FinetuneInputs> {
        let (vae, vae_meta) = self.load_vae()?;
        let (clap, clap_meta) = self.load_clap()?;
        let (lclap, lclap_meta) = self.load_latent_clap()?;
        let mels = self.corpus_mels()?;
        let data = FinetuneData::prepare(&mels, &clap, &vae)?;
        Ok(FinetuneInputs {
            clap,
            vae,
            lclap,
            data,
            upstream: [
                ("clap".to_string(), clap_meta.params_digest),
                ("vae".to_string(), vae_meta.params_digest),
                ("latent_clap".to_string(), lclap_meta.params_digest),
            ]
            .into(),
        })
    }

    fn finetune_with(
        &self,
        inputs: &FinetuneInputs,
        lambda: f64,
        dir: &Path,
    ) -> Result<(LdmModel, Vec<TrainingRecord>, CheckpointMeta)> {
        let c = &self.cfg;
        let init = LdmModel::new(c.ldm.model.clone(), c.stage_seed(Stage::Ldm))?;
        let mut train = c.ldm.train.clone();
        train.seed = c.stage_seed(Stage::Ldm) ^ 0xF1E;
        train.loss.lambda = lambda;
        let (model, log) = finetune_ldm(
            &init,
            &inputs.data,
            &inputs.clap,
            Some(&inputs.lclap),
            &train,
        )?;
        let mut meta = self.meta(
            Stage::Ldm,
            json!({"config": model.config, "loss": train.loss, "tuning": train.tuning}),
        );
        meta.upstream = inputs.upstream.clone();
        let meta = save_checkpoint(dir, &model.params, &meta)?;
        let log_path = dir.join("train_log.jsonl");
        let mut text = String::new();
        for r in &log {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        std::fs::write(&log_path, text).at(&log_path)?;
        Ok((model, log, meta))
    }

    pub fn finetune_ldm(&self) -> Result<serde_json::Value> {
        let start = Instant::now();
        let inputs = self.finetune_inputs()?;
        let (_, log, meta) = self.finetune_with(
            &inputs,
            self.cfg.ldm.train.loss.lambda,
            &self.checkpoint_dir(Stage::Ldm),
        )?;
        let s = json!({
            "digest": meta.params_digest,
            "lambda": self.cfg.ldm.train.loss.lambda,
            "first_epoch_total": log.first().map(|r| r.total),
            "last_epoch_total": log.last().map(|r| r.total),
            "wall_time_s": start.elapsed().as_secs_f64(),
        });
        self.record("finetune-ldm", s.clone())?;
        Ok(s)
    }

    fn generation_config(&self) -> GenerationConfig {
        let mut g = self.cfg.generation.config.clone();
        g.seed = self.cfg.stage_seed(Stage::Generate).wrapping_add(g.seed);
        g
    }

    /// Generates every class into `out` with the given predictor.
    fn generate_into(
        &self,
        clap: &ClapModel,
        vae: &VaeModel,
        ldm: &LdmModel,
        out: &Path,
    ) -> Result<Vec<GenerationReport>> {
        let base = self.generation_config();
        let mut reports = Vec::new();
        for &label in &self.cfg.classes {
            let mut gcfg = base.clone();
            gcfg.seed = base.seed.wrapping_add((label.index() as u64) << 32);
            let pipe = Pipeline {
                clap,
                vae,
                ldm,
                config: &gcfg,
            };
            let k = self.cfg.generation.clips_per_class;
            let (clips, report) = if self.cfg.generation.filter {
                let scorer = ClapScorer {
                    clap,
                    mel: &self.cfg.dsp,
                };
                generate_filtered(&pipe, &scorer, label, k, gcfg.threshold(label)?, &gcfg)?
            } else {
                generate_unfiltered(&pipe, label, k, &gcfg)?
            };
            write_class_output(out, &clips, &report)?;
            log::info!(
                "{label}: {} clips ({} generated) in {:.1}s",
                report.accepted,
                report.generated_total,
                report.wall_time_s
            );
            reports.push(report);
        }
        Ok(reports)
    }

    pub fn generate(&self) -> Result<serde_json::Value> {
        let start = Instant::now();
        let (clap, _) = self.load_clap()?;
        let (vae, _) = self.load_vae()?;
        let (ldm, _) = self.load_ldm()?;
        let out = self.generated_dir();
        let reports = self.generate_into(&clap, &vae, &ldm, &out)?;
        save_checkpoint(
            &out,
            &Default::default(),
            &self.meta(Stage::Generate, json!({})),
        )?;
        let s = json!({
            "classes": reports.iter().map(|r| json!({
                "label": r.label, "generated_total": r.generated_total, "accepted": r.accepted,
                "acceptance_rate": r.acceptance_rate, "wall_time_s": r.wall_time_s,
            })).collect::<Vec<_>>(),
            "audio_digest": dir_digest(&out)?,
            "wall_time_s": start.elapsed().as_secs_f64(),
        });
        self.record("generate", s.clone())?;
        Ok(s)
    }

    fn evaluate_dir(&self, eval: &ClapModel, gen_dir: &Path) -> Result<EvalReport> {
        if !self.ref_stats_dir().is_dir() {
            return Err(Error::MissingStage {
                stage: Stage::EvalClap.command(),
                what: "reference statistics",
                path: self.ref_stats_dir(),
            });
        }
        evaluate(
            gen_dir,
            &self.ref_stats_dir(),
            &self.embedder(eval),
            &self.cfg.classes,
        )
    }

    /// Average FAD of seeded white noise against the reference statistics.
    pub fn white_noise_fad(&self, eval: &ClapModel, clips_per_class: usize) -> Result<f64> {
        let embedder = self.embedder(eval);
        let mut total = 0.0;
        for (i, &label) in self.cfg.classes.iter().enumerate() {
            let clips = white_noise_clips(
                clips_per_class.max(2),
                self.cfg.clip_samples(),
                self.cfg.dsp.sample_rate,
                self.cfg.seed ^ (i as u64 + 1),
            )?;
            let reference = EmbeddingStats::read(stats_path(&self.ref_stats_dir(), label))?;
            let stats = fit_stats(&embedder.embed_set(&clips)?, reference.shrinkage)?;
            total += frechet_distance(&stats, &reference)?;
        }
        Ok(total / self.cfg.classes.len() as f64)
    }

    pub fn evaluate(&self) -> Result<serde_json::Value> {
        let start = Instant::now();
        let (eval, _) = self.load_eval_clap()?;
        self.require(Stage::Generate)?;
        let report = self.evaluate_dir(&eval, &self.generated_dir())?;
        let noise = self.white_noise_fad(&eval, self.cfg.generation.clips_per_class)?;
        let dir = self.eval_dir();
        std::fs::create_dir_all(&dir).at(&dir)?;
        std::fs::write(dir.join("report.txt"), report.table()).at(dir.join("report.txt"))?;
        std::fs::write(dir.join("report.jsonl"), report.jsonl()?).at(dir.join("report.jsonl"))?;
        print!("{}", report.table());
        let s = json!({
            "average_fad": report.average,
            "std_fad": report.std,
            "mean_clap_similarity": report.mean_similarity,
            "white_noise_average_fad": noise,
            "classes": report.classes,
            "wall_time_s": start.elapsed().as_secs_f64(),
        });
        self.record("evaluate", s.clone())?;
        Ok(s)
    }

    /// Fine-tunes one predictor per λ from the same initialisation and seed,
    /// generates and evaluates each, and writes the λ → average-FAD table.
    pub fn sweep_lambda(&self, lambdas: &[f64]) -> Result<Vec<SweepRow>> {
        if lambdas.is_empty() {
            return Err(Error::InvalidArgument(
                "sweep needs at least one lambda".into(),
            ));
        }
        if let Some(l) = lambdas.iter().find(|l| !(**l >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "lambda must be >= 0, got {l}"
            )));
        }
        let start = Instant::now();
        let inputs = self.finetune_inputs()?;
        let (eval, _) = self.load_eval_clap()?;
        let root = self.dir.join("sweep");
        let mut rows = Vec::with_capacity(lambdas.len());
        for (i, &lambda) in lambdas.iter().enumerate() {
            let t = Instant::now();
            let dir = root.join(format!("{i:02}_lambda_{lambda}"));
            let (model, log, meta) = self.finetune_with(&inputs, lambda, &dir.join("ldm"))?;
            let gen = dir.join("generated");
            self.generate_into(&inputs.clap, &inputs.vae, &model, &gen)?;
            let report = self.evaluate_dir(&eval, &gen)?;
            std::fs::write(dir.join("report.txt"), report.table()).at(dir.join("report.txt"))?;
            log::info!("lambda {lambda}: average FAD {:.4}", report.average);
            rows.push(SweepRow {
                lambda,
                average_fad: report.average,
                std_fad: report.std,
                mean_clap_similarity: report.mean_similarity,
                per_class: report
                    .classes
                    .iter()
                    .map(|c| (c.label.clone(), c.fad))
                    .collect(),
                final_total_loss: log.last().map(|r| r.total).unwrap_or(f64::NAN),
                checkpoint_digest: meta.params_digest,
                audio_digest: dir_digest(&gen)?,
                wall_time_s: t.elapsed().as_secs_f64(),
            });
        }
        let mut table = String::from("lambda\taverage_fad\tstd_fad\tmean_clap_similarity\n");
        for r in &rows {
            table.push_str(&format!(
                "{}\t{:.6}\t{:.6}\t{:.4}\n",
                r.lambda, r.average_fad, r.std_fad, r.mean_clap_similarity
            ));
        }
        std::fs::create_dir_all(&root).at(&root)?;
        std::fs::write(root.join("sweep.tsv"), &table).at(root.join("sweep.tsv"))?;
        std::fs::write(
            root.join("sweep.json"),
            serde_json::to_string_pretty(&rows)?,
        )
        .at(root.join("sweep.json"))?;
        print!("{table}");
        let noise = self.white_noise_fad(&eval, self.cfg.generation.clips_per_class)?;
        self.record(
            "sweep-lambda",
            json!({"rows": rows, "white_noise_average_fad": noise, "wall_time_s": start.elapsed().as_secs_f64()}),
        )?;
        Ok(rows)
    }

    pub fn bench_throughput(&self, clips: usize) -> Result<BenchReport> {
        let (clap, _) = self.load_clap()?;
        let (vae, _) = self.load_vae()?;
        let (ldm, _) = self.load_ldm()?;
        let gcfg = self.generation_config();
        let pipe = Pipeline {
            clap: &clap,
            vae: &vae,
            ldm: &ldm,
            config: &gcfg,
        };
        let scorer = ClapScorer {
            clap: &clap,
            mel: &self.cfg.dsp,
        };
        let report = bench_throughput(
            &pipe,
            &scorer,
            self.cfg.bench.label,
            clips,
            &gcfg,
            self.cfg.bench.planted_acceptance,
        )?;
        let dir = self.dir.join("bench");
        std::fs::create_dir_all(&dir).at(&dir)?;
        std::fs::write(
            dir.join("bench.json"),
            serde_json::to_string_pretty(&report)?,
        )
        .at(dir.join("bench.json"))?;
        self.record("bench-throughput", serde_json::to_value(&report)?)?;
        Ok(report)
    }
}

struct FinetuneInputs {
    clap: ClapModel,
    vae: VaeModel,
    lclap: LatentClapModel,
    data: FinetuneData,
    upstream: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub average_fad: f64,
    pub std_fad: f64,
    pub mean_clap_similarity: f64,
    pub per_class: BTreeMap<String, f64>,
    pub final_total_loss: f64,
    pub checkpoint_digest: String,
    pub audio_digest: String,
    pub wall_time_s: f64,
}

/// Fraction of clips whose audio embedding is closest to their own class text.
pub fn clap_accuracy(clap: &ClapModel, data: &[LabeledMel]) -> Result<f64> {
    let texts = clap
        .classes
        .iter()
        .map(|&l| clap.encode_label(l, false))
        .collect::<Result<Vec<_>>>()?;
    let mut hits = 0;
    for chunk in data.chunks(32) {
        let mels: Vec<_> = chunk.iter().map(|d| &d.mel).collect();
        for (e, d) in clap.encode_audio_batch(&mels)?.iter().zip(chunk) {
            let best = texts
                .iter()
                .enumerate()
                .map(|(i, t)| (i, crate::embedding::cosine_similarity(e, t).unwrap_or(-1.0)))
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(i, _)| clap.classes[i]);
            if best == Some(d.label) {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / data.len().max(1) as f64)
}

/// Mean relative L2 error of mean-mode reconstructions.
pub fn reconstruction_error(vae: &VaeModel, data: &[LabeledMel]) -> Result<f64> {
    let mut sum = 0.0;
    for chunk in data.chunks(16) {
        let mels: Vec<_> = chunk.iter().map(|d| &d.mel).collect();
        let zs = vae.encode_batch(&mels, crate::vae::EncodeMode::Mean, 0)?;
        let refs: Vec<_> = zs.iter().collect();
        for (m, r) in mels.iter().zip(vae.decode_batch(&refs)?) {
            sum += r.relative_error(m);
        }
    }
    Ok(sum / data.len().max(1) as f64)
}

/// Gaussian white noise clips with standard deviation 0.3, clipped to ±1.
pub fn white_noise_clips(
    n: usize,
    samples: usize,
    sample_rate: u32,
    seed: u64,
) -> Result<Vec<Waveform>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0f32, 0.3).expect("valid std");
    (0..n)
        .map(|_| {
            let x = (0..samples)
                .map(|_| dist.sample(&mut rng).clamp(-1.0, 1.0))
                .collect();
            Waveform::new(x, sample_rate)
        })
        .collect()
}

/// SHA-256 over the relative paths and bytes of every `.wav` below `dir`.
pub fn dir_digest(dir: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).at(&d)? {
            let p = e.at(&d)?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "wav") {
                files.push(p);
            }
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(
            f.strip_prefix(dir)
                .unwrap_or(&f)
                .to_string_lossy()
                .as_bytes(),
        );
        h.update(std::fs::read(&f).at(&f)?);
    }
    Ok(hex::encode(h.finalize()))
}

/// Accepts candidates whose seed offset from `base` is a multiple of `every`.
pub struct PlantedScorer {
    pub base: u64,
    pub every: u64,
}

impl PlantedScorer {
    pub fn with_rate(base: u64, acceptance: f64) -> Self {
        Self {
            base,
            every: (1.0 / acceptance).round().max(1.0) as u64,
        }
    }
}

impl ClipScorer for PlantedScorer {
    fn score(&self, _: ClassLabel, clips: &[GeneratedClip]) -> Result<Vec<f64>> {
        Ok(clips
            .iter()
            .map(|c| {
                if c.seed.wrapping_sub(self.base) % self.every == 0 {
                    1.0
                } else {
                    -1.0
                }
            })
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSection {
    pub name: String,
    pub accepted: usize,
    pub generated_total: usize,
    pub acceptance_rate: f64,
    pub wall_time_s: f64,
    pub seconds_per_accepted: f64,
    pub clips_per_sec: f64,
}

impl BenchSection {
    fn from_report(name: &str, r: &GenerationReport) -> Self {
        let acc = r.accepted.max(1) as f64;
        Self {
            name: name.to_string(),
            accepted: r.accepted,
            generated_total: r.generated_total,
            acceptance_rate: r.acceptance_rate,
            wall_time_s: r.wall_time_s,
            seconds_per_accepted: r.wall_time_s / acc,
            clips_per_sec: if r.wall_time_s > 0.0 {
                r.accepted as f64 / r.wall_time_s
            } else {
                0.0
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub label: ClassLabel,
    pub clips: usize,
    pub sections: Vec<BenchSection>,
}

impl BenchReport {
    pub fn section(&self, name: &str) -> Option<&BenchSection> {
        self.sections.iter().find(|s| s.name == name)
    }
}

/// Times `clips` accepted clips without filtering, with a pass-everything
/// filter, with the configured class threshold and with a planted filter.
pub fn bench_throughput<S: ClipSource + ?Sized, F: ClipScorer + ?Sized>(
    source: &S,
    scorer: &F,
    label: ClassLabel,
    clips: usize,
    cfg: &GenerationConfig,
    planted_acceptance: f64,
) -> Result<BenchReport> {
    let mut sections = Vec::new();
    if clips > 0 {
        let (_, r) = generate_unfiltered(source, label, clips, cfg)?;
        sections.push(BenchSection::from_report("unfiltered", &r));
        let (_, r) = generate_filtered(source, scorer, label, clips, -1.0, cfg)?;
        sections.push(BenchSection::from_report("threshold_-1", &r));
        let (_, r) = generate_filtered(source, scorer, label, clips, cfg.threshold(label)?, cfg)?;
        sections.push(BenchSection::from_report("class_threshold", &r));
        let planted = PlantedScorer::with_rate(cfg.seed, planted_acceptance);
        let (_, r) = generate_filtered(source, &planted, label, clips, 0.0, cfg)?;
        sections.push(BenchSection::from_report("planted", &r));
    }
    for s in &sections {
        log::info!(
            "{}: {} accepted of {} in {:.2}s ({:.3}s per accepted clip)",
            s.name,
            s.accepted,
            s.generated_total,
            s.wall_time_s,
            s.seconds_per_accepted
        );
    }
    Ok(BenchReport {
        label,
        clips,
        sections,
    })
}
