//! Hierarchical experiment configuration: presets, TOML files, dotted overrides.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{parse_classes, ClassLabel};
use crate::dsp::MelConfig;
use crate::error::{Error, Result};
use crate::generate::GenerationConfig;
use crate::latent_clap::LatentClapConfig;
use crate::ldm::{FinetuneConfig, LdmConfig};
use crate::mini_clap::ClapConfig;
use crate::vae::VaeConfig;

pub const SEED_ENV: &str = "FOLEY_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSection {
    pub per_class: usize,
    pub reference_per_class: usize,
    pub duration_s: f64,
    /// Mel frames every clip is tiled or truncated to.
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClapSection {
    pub model: ClapConfig,
    pub epochs: usize,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VaeSection {
    pub model: VaeConfig,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub crop_frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentClapSection {
    pub model: LatentClapConfig,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LdmSection {
    pub model: LdmConfig,
    pub train: FinetuneConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationSection {
    #[serde(flatten)]
    pub config: GenerationConfig,
    pub clips_per_class: usize,
    /// Apply the per-class similarity thresholds while generating.
    pub filter: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub embedder: ClapConfig,
    pub epochs: usize,
    pub lr: f64,
    pub shrinkage: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub lambdas: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchSection {
    pub clips: usize,
    pub label: ClassLabel,
    /// Fraction of candidates the planted filter lets through.
    pub planted_acceptance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub seed: u64,
    pub classes: Vec<ClassLabel>,
    pub dsp: MelConfig,
    pub dataset: DatasetSection,
    pub clap: ClapSection,
    pub vae: VaeSection,
    pub latent_clap: LatentClapSection,
    pub ldm: LdmSection,
    pub generation: GenerationSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub bench: BenchSection,
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        let mut ldm_train = FinetuneConfig::desk();
        ldm_train.loss.lambda = 1000.0;
        Self {
            preset: Preset::Desk,
            seed: 0,
            classes: ClassLabel::ALL.to_vec(),
            dsp: MelConfig::desk(),
            dataset: DatasetSection {
                per_class: 64,
                reference_per_class: 32,
                duration_s: 4.0,
                frames: 256,
            },
            clap: ClapSection {
                model: ClapConfig::desk(),
                epochs: 30,
                lr: 1e-3,
            },
            vae: VaeSection {
                model: VaeConfig::desk(),
                epochs: 12,
                lr: 2e-3,
                batch_size: 16,
                crop_frames: 64,
            },
            latent_clap: LatentClapSection {
                model: LatentClapConfig::desk(),
                epochs: 30,
                lr: 1e-3,
                batch_size: 16,
            },
            ldm: LdmSection {
                model: LdmConfig::desk(),
                train: ldm_train,
            },
            generation: GenerationSection {
                config: GenerationConfig::desk(),
                clips_per_class: 32,
                filter: false,
            },
            eval: EvalSection {
                embedder: ClapConfig {
                    embed_dim: 16,
                    ..ClapConfig::desk()
                },
                epochs: 30,
                lr: 1e-3,
                shrinkage: crate::fad::DEFAULT_SHRINKAGE,
            },
            sweep: SweepSection {
                lambdas: vec![0.0, 100.0, 1000.0],
            },
            bench: BenchSection {
                clips: 5,
                label: ClassLabel::DogBark,
                planted_acceptance: 0.1,
            },
        }
    }

    pub fn paper() -> Self {
        let mut ldm_train = FinetuneConfig::paper();
        ldm_train.loss.lambda = 2000.0;
        let desk = Self::desk();
        Self {
            preset: Preset::Paper,
            dsp: MelConfig::paper(),
            dataset: DatasetSection {
                per_class: 600,
                reference_per_class: 100,
                duration_s: 10.24,
                frames: 1024,
            },
            clap: ClapSection {
                model: ClapConfig::paper(),
                ..desk.clap
            },
            vae: VaeSection {
                model: VaeConfig::paper(),
                ..desk.vae
            },
            latent_clap: LatentClapSection {
                model: LatentClapConfig::paper(),
                ..desk.latent_clap
            },
            ldm: LdmSection {
                model: LdmConfig::paper(),
                train: ldm_train,
            },
            generation: GenerationSection {
                config: GenerationConfig::paper(),
                clips_per_class: 100,
                filter: false,
            },
            eval: EvalSection {
                embedder: ClapConfig::paper(),
                ..desk.eval
            },
            sweep: SweepSection {
                lambdas: vec![0.0, 1000.0, 2000.0],
            },
            ..desk
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    /// Preset defaults, then `file` contents, then `overrides` (`a.b.c=value`).
    /// The seed falls back to `FOLEY_SEED` when neither file nor overrides set it.
    pub fn load(file: Option<&str>, overrides: &[String]) -> Result<Self> {
        let user: toml::Table = match file {
            Some(text) => text
                .parse()
                .map_err(|e| Error::Config(format!("config parse error: {e}")))?,
            None => toml::Table::new(),
        };
        let mut over = toml::Table::new();
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            set_path(&mut over, key.trim(), parse_value(value.trim()))?;
        }
        let preset_name = over
            .get("preset")
            .or_else(|| user.get("preset"))
            .cloned()
            .unwrap_or(toml::Value::String("desk".into()));
        let preset: Preset = preset_name
            .try_into()
            .map_err(|e| Error::Config(format!("unknown preset: {e}")))?;
        let mut base = toml::Table::try_from(Self::preset(preset))
            .map_err(|e| Error::Config(e.to_string()))?;
        let seed_given = user.contains_key("seed") || over.contains_key("seed");
        merge(&mut base, user);
        merge(&mut base, over);
        if !seed_given {
            if let Ok(s) = std::env::var(SEED_ENV) {
                let seed: u64 = s.parse().map_err(|_| {
                    Error::Config(format!("{SEED_ENV}={s} is not an unsigned integer"))
                })?;
                base.insert("seed".into(), toml::Value::Integer(seed as i64));
            }
        }
        let cfg: Self = toml::Value::Table(base)
            .try_into()
            .map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        crate::dataset::validate_classes(&self.classes)?;
        self.dsp.validate()?;
        self.vae.model.validate()?;
        self.ldm.model.validate()?;
        self.ldm.train.loss.validate()?;
        self.generation.config.validate()?;
        for l in &self.classes {
            self.generation.config.threshold(*l)?;
        }
        if self.sweep.lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::Config("sweep lambdas must be >= 0".into()));
        }
        if self.dsp.mel_bins != self.clap.model.mel_bins
            || self.dsp.mel_bins != self.vae.model.mel_bins
            || self.dsp.mel_bins != self.eval.embedder.mel_bins
        {
            return Err(Error::Config(
                "mel_bins must agree across dsp, clap, vae and eval".into(),
            ));
        }
        let r = self.vae.model.ratio;
        let latent = [
            self.vae.model.latent_channels,
            self.dsp.mel_bins / r,
            self.dataset.frames / r,
        ];
        if !self.dataset.frames.is_multiple_of(r) {
            return Err(Error::Config(format!(
                "dataset.frames must be divisible by vae ratio {r}"
            )));
        }
        if self.latent_clap.model.latent_shape != latent || self.ldm.model.latent_shape != latent {
            return Err(Error::Config(format!(
                "latent_clap and ldm latent shapes must equal the VAE latent {latent:?}"
            )));
        }
        let d = self.clap.model.embed_dim;
        if self.latent_clap.model.embed_dim != d || self.ldm.model.cond_dim != d {
            return Err(Error::Config(
                "embedding dims must agree across clap, latent_clap and ldm".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.bench.planted_acceptance)
            || self.bench.planted_acceptance == 0.0
        {
            return Err(Error::Config(
                "bench.planted_acceptance must lie in (0, 1]".into(),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn clip_samples(&self) -> usize {
        self.dsp.samples_for_frames(self.dataset.frames)
    }

    /// Seed for a named stage, derived from the global seed.
    pub fn stage_seed(&self, stage: Stage) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9)
            .wrapping_add(stage as u64 * 7919)
    }

    /// Fingerprint of everything a module's checkpoint depends on.
    pub fn module_hash(&self, module: Stage) -> String {
        let mut parts: Vec<serde_json::Value> = vec![serde_json::json!({
            "module": module.name(),
            "seed": self.seed,
        })];
        let j = |v: &dyn erased::Ser| v.json();
        match module {
            Stage::Data => {
                parts.push(j(&self.classes));
                parts.push(j(&self.dsp));
                parts.push(j(&self.dataset));
            }
            Stage::Clap => parts.push(j(&self.clap)),
            Stage::EvalClap => parts.push(j(&self.eval)),
            Stage::Vae => parts.push(j(&self.vae)),
            Stage::LatentClap => parts.push(j(&self.latent_clap)),
            Stage::Ldm => parts.push(j(&self.ldm)),
            Stage::Generate => parts.push(j(&self.generation)),
        }
        for up in module.upstream() {
            parts.push(serde_json::Value::String(self.module_hash(*up)));
        }
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&parts).expect("config serialises"));
        hex::encode(h.finalize())
    }
}

mod erased {
    pub trait Ser {
        fn json(&self) -> serde_json::Value;
    }
    impl<T: serde::Serialize> Ser for T {
        fn json(&self) -> serde_json::Value {
            serde_json::to_value(self).expect("config serialises")
        }
    }
}

/// Pipeline stages that produce artefacts other stages depend on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Data = 1,
    Clap = 2,
    EvalClap = 3,
    Vae = 4,
    LatentClap = 5,
    Ldm = 6,
    Generate = 7,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Data => "data",
            Stage::Clap => "clap",
            Stage::EvalClap => "eval_clap",
            Stage::Vae => "vae",
            Stage::LatentClap => "latent_clap",
            Stage::Ldm => "ldm",
            Stage::Generate => "generate",
        }
    }

    /// CLI subcommand producing this stage's artefacts.
    pub fn command(self) -> &'static str {
        match self {
            Stage::Data => "make-data",
            Stage::Clap | Stage::EvalClap => "train-clap",
            Stage::Vae => "train-vae",
            Stage::LatentClap => "train-latent-clap",
            Stage::Ldm => "finetune-ldm",
            Stage::Generate => "generate",
        }
    }

    pub fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Data => &[],
            Stage::Clap | Stage::EvalClap | Stage::Vae => &[Stage::Data],
            Stage::LatentClap => &[Stage::Clap, Stage::Vae],
            Stage::Ldm => &[Stage::Clap, Stage::Vae, Stage::LatentClap],
            Stage::Generate => &[Stage::Ldm],
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts = key.split('.').peekable();
    let mut cur = table;
    while let Some(p) = parts.next() {
        if p.is_empty() {
            return Err(Error::Config(format!("empty segment in key `{key}`")));
        }
        if parts.peek().is_none() {
            cur.insert(p.to_string(), value);
            return Ok(());
        }
        let next = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = next
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    Ok(())
}

fn merge(base: &mut toml::Table, top: toml::Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Class list from comma-separated names.
pub fn classes_from_arg(arg: &str) -> Result<Vec<ClassLabel>> {
    parse_classes(
        &arg.split(',')
            .map(|s| s.trim().to_string())
            .collect::<Vec<_>>(),
    )
}
