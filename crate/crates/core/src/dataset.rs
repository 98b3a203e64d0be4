//! Deterministic synthetic class-conditional Foley corpus and JSONL manifests.
//!
//! Each label maps to its own parametric sound family; seeds jitter rates,
//! pitches and envelopes inside the family.

use std::collections::HashSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::{save_wav, Waveform};
use crate::error::{Error, IoContext, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLabel {
    DogBark,
    Footstep,
    GunShot,
    Keyboard,
    MotorVehicle,
    Rain,
    SneezeCough,
}

impl ClassLabel {
    pub const ALL: [ClassLabel; 7] = [
        ClassLabel::DogBark,
        ClassLabel::Footstep,
        ClassLabel::GunShot,
        ClassLabel::Keyboard,
        ClassLabel::MotorVehicle,
        ClassLabel::Rain,
        ClassLabel::SneezeCough,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::DogBark => "dog_bark",
            ClassLabel::Footstep => "footstep",
            ClassLabel::GunShot => "gun_shot",
            ClassLabel::Keyboard => "keyboard",
            ClassLabel::MotorVehicle => "motor_vehicle",
            ClassLabel::Rain => "rain",
            ClassLabel::SneezeCough => "sneeze_cough",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&l| l == self).unwrap()
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::UnknownLabel(s.to_string()))
    }
}

/// `"This is a sound of <label>"` with underscores replaced by spaces.
pub fn prompt_of(label: ClassLabel) -> String {
    format!("This is a sound of {}", label.as_str().replace('_', " "))
}

/// Inverse of [`prompt_of`] over `classes`.
pub fn label_of_prompt(prompt: &str, classes: &[ClassLabel]) -> Result<ClassLabel> {
    classes
        .iter()
        .copied()
        .find(|&l| prompt_of(l) == prompt)
        .ok_or_else(|| Error::UnknownPrompt(prompt.to_string()))
}

pub fn parse_classes(names: &[String]) -> Result<Vec<ClassLabel>> {
    let labels = names
        .iter()
        .map(|n| n.parse())
        .collect::<Result<Vec<ClassLabel>>>()?;
    validate_classes(&labels)?;
    Ok(labels)
}

pub fn validate_classes(labels: &[ClassLabel]) -> Result<()> {
    if labels.len() < 2 {
        return Err(Error::InvalidArgument(
            "class set needs at least two labels".into(),
        ));
    }
    let uniq: HashSet<_> = labels.iter().collect();
    if uniq.len() != labels.len() {
        return Err(Error::InvalidArgument(
            "class set contains duplicates".into(),
        ));
    }
    Ok(())
}

fn mix_seed(label: ClassLabel, seed: u64) -> u64 {
    // splitmix64 finaliser over (seed, label)
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add((label.index() as u64 + 1).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Synth {
    rng: ChaCha8Rng,
    sr: f64,
    out: Vec<f64>,
}

impl Synth {
    fn noise(&mut self) -> f64 {
        self.rng.random_range(-1.0..1.0)
    }

    fn uni(&mut self, lo: f64, hi: f64) -> f64 {
        self.rng.random_range(lo..hi)
    }

    fn n(&self) -> usize {
        self.out.len()
    }

    /// Adds `f(t_local)` for `len` seconds starting at `onset` seconds.
    fn add_event(&mut self, onset: f64, len: f64, mut f: impl FnMut(&mut Self, f64) -> f64) {
        let start = (onset * self.sr) as usize;
        let end = (((onset + len) * self.sr) as usize).min(self.n());
        for i in start..end {
            let t = (i - start) as f64 / self.sr;
            let v = f(self, t);
            self.out[i] += v;
        }
    }
}

fn one_pole_lowpass(x: &mut [f64], cutoff: f64, sr: f64) {
    let a = (-2.0 * std::f64::consts::PI * cutoff / sr).exp();
    let mut y = 0.0;
    for v in x.iter_mut() {
        y = (1.0 - a) * *v + a * y;
        *v = y;
    }
}

fn one_pole_highpass(x: &mut [f64], cutoff: f64, sr: f64) {
    let mut low = x.to_vec();
    one_pole_lowpass(&mut low, cutoff, sr);
    for (v, l) in x.iter_mut().zip(low) {
        *v -= l;
    }
}

fn bandpass(x: &mut [f64], centre: f64, q: f64, sr: f64) {
    // RBJ biquad, constant 0 dB peak gain
    let w0 = 2.0 * std::f64::consts::PI * centre / sr;
    let alpha = w0.sin() / (2.0 * q);
    let (b0, b2) = (alpha, -alpha);
    let (a0, a1, a2) = (1.0 + alpha, -2.0 * w0.cos(), 1.0 - alpha);
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    for v in x.iter_mut() {
        let y = (b0 * *v + b2 * x2 - a1 * y1 - a2 * y2) / a0;
        x2 = x1;
        x1 = *v;
        y2 = y1;
        y1 = y;
        *v = y;
    }
}

const TAU: f64 = std::f64::consts::TAU;

/// Deterministic clip of `duration_s` seconds at 16 kHz for `label`.
pub fn synthesize_class_clip(label: ClassLabel, seed: u64, duration_s: f64) -> Result<Waveform> {
    synthesize_class_clip_at(label, seed, duration_s, crate::dsp::DEFAULT_SAMPLE_RATE)
}

pub fn synthesize_class_clip_at(
    label: ClassLabel,
    seed: u64,
    duration_s: f64,
    sample_rate: u32,
) -> Result<Waveform> {
    if !(duration_s > 0.0) || !duration_s.is_finite() {
        return Err(Error::InvalidArgument("duration must be positive".into()));
    }
    let sr = sample_rate as f64;
    let n = ((duration_s * sr).round() as usize).max(1);
    let mut s = Synth {
        rng: ChaCha8Rng::seed_from_u64(mix_seed(label, seed)),
        sr,
        out: vec![0.0; n],
    };
    let dur = duration_s;
    match label {
        ClassLabel::DogBark => {
            let barks = s.rng.random_range(2..=4);
            for _ in 0..barks {
                let onset = s.uni(0.0, (dur - 0.3).max(0.01));
                let len = s.uni(0.15, 0.3);
                let f0 = s.uni(350.0, 650.0);
                let glide = s.uni(0.6, 0.9);
                let mut phase = 0.0;
                s.add_event(onset, len, |s, t| {
                    let f = f0 * (1.0 - (1.0 - glide) * t / len);
                    phase += TAU * f / s.sr;
                    let env = (t / 0.01).min(1.0) * (-t / (len * 0.35)).exp();
                    let tone: f64 = (1..=6).map(|h| (h as f64 * phase).sin() / h as f64).sum();
                    env * (tone + 0.15 * s.noise())
                });
            }
        }
        ClassLabel::Footstep => {
            let rate = s.uni(1.6, 2.4);
            let mut t0 = s.uni(0.0, 0.3);
            while t0 < dur {
                let f = s.uni(60.0, 120.0);
                s.add_event(t0, 0.2, |s, t| {
                    let thump = (TAU * f * t).sin() * (-t / 0.03).exp();
                    let click = s.noise() * (-t / 0.012).exp() * 0.6;
                    thump + click
                });
                t0 += (1.0 / rate) * s.uni(0.85, 1.15);
            }
            let mut x = std::mem::take(&mut s.out);
            one_pole_lowpass(&mut x, 1500.0, sr);
            s.out = x;
        }
        ClassLabel::GunShot => {
            let shots = s.rng.random_range(1..=2);
            for _ in 0..shots {
                let onset = s.uni(0.0, (dur * 0.6).max(0.01));
                let tau = s.uni(0.04, 0.12);
                let boom = s.uni(40.0, 70.0);
                s.add_event(onset, (tau * 8.0).min(dur), |s, t| {
                    let env = (-t / tau).exp();
                    env * (s.noise() + 0.8 * (TAU * boom * t).sin())
                });
            }
        }
        ClassLabel::Keyboard => {
            let rate = s.uni(8.0, 14.0);
            let mut t0 = s.uni(0.0, 0.1);
            while t0 < dur {
                let ping = s.uni(2000.0, 4000.0);
                let amp = s.uni(0.5, 1.0);
                s.add_event(t0, 0.02, |s, t| {
                    amp * (s.noise() * (-t / 0.002).exp()
                        + 0.7 * (TAU * ping * t).sin() * (-t / 0.005).exp())
                });
                t0 += s.uni(0.3, 1.7) / rate;
            }
            let mut x = std::mem::take(&mut s.out);
            one_pole_highpass(&mut x, 800.0, sr);
            s.out = x;
        }
        ClassLabel::MotorVehicle => {
            let f0 = s.uni(35.0, 80.0);
            let vib = s.uni(0.2, 0.5);
            let am = s.uni(5.0, 15.0);
            let depth = s.uni(0.2, 0.5);
            let mut phase = 0.0;
            let mut rumble: Vec<f64> = (0..n).map(|_| s.noise()).collect();
            one_pole_lowpass(&mut rumble, 300.0, sr);
            for (i, r) in rumble.iter().enumerate() {
                let t = i as f64 / sr;
                let f = f0 * (1.0 + 0.08 * (TAU * vib * t).sin());
                phase += TAU * f / sr;
                let tone: f64 = (1..=12).map(|h| (h as f64 * phase).sin() / h as f64).sum();
                let env = 1.0 - depth * (0.5 + 0.5 * (TAU * am * t).sin());
                s.out[i] = env * tone + 2.0 * r;
            }
        }
        ClassLabel::Rain => {
            let hp = s.uni(400.0, 1200.0);
            let mut bed: Vec<f64> = (0..n).map(|_| s.noise()).collect();
            one_pole_highpass(&mut bed, hp, sr);
            s.out = bed.iter().map(|v| 0.5 * v).collect();
            let drops = (s.uni(30.0, 60.0) * dur) as usize;
            for _ in 0..drops {
                let onset = s.uni(0.0, dur);
                let amp = s.uni(0.3, 1.0);
                s.add_event(onset, 0.01, |s, t| amp * s.noise() * (-t / 0.002).exp());
            }
        }
        ClassLabel::SneezeCough => {
            let gusts = s.rng.random_range(1..=3);
            let mut burst = vec![0.0; n];
            for _ in 0..gusts {
                let onset = s.uni(0.0, (dur - 0.5).max(0.01));
                let rise = s.uni(0.03, 0.08);
                let decay = s.uni(0.2, 0.4);
                let start = (onset * sr) as usize;
                let end = (((onset + rise + 4.0 * decay) * sr) as usize).min(n);
                for (i, b) in burst.iter_mut().enumerate().take(end).skip(start) {
                    let t = (i - start) as f64 / sr;
                    let env = if t < rise {
                        t / rise
                    } else {
                        (-(t - rise) / decay).exp()
                    };
                    *b += env * s.rng.random_range(-1.0..1.0);
                }
            }
            let centre = s.uni(800.0, 2500.0);
            bandpass(&mut burst, centre, 1.5, sr);
            s.out = burst;
        }
    }
    let peak = s.out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let target = s.uni(0.5, 0.95);
    let gain = if peak > 0.0 { target / peak } else { 0.0 };
    Waveform::new(
        s.out.iter().map(|v| (v * gain) as f32).collect(),
        sample_rate,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest root.
    pub path: String,
    pub label: ClassLabel,
    pub duration_s: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

impl Manifest {
    pub fn path_of(&self, e: &ManifestEntry) -> PathBuf {
        self.root.join(&e.path)
    }

    pub fn labels(&self) -> Vec<ClassLabel> {
        let mut seen = Vec::new();
        for e in &self.entries {
            if !seen.contains(&e.label) {
                seen.push(e.label);
            }
        }
        seen
    }

    pub fn write(&self) -> Result<PathBuf> {
        let path = self.root.join(MANIFEST_FILE);
        let mut f = std::io::BufWriter::new(std::fs::File::create(&path).at(&path)?);
        for e in &self.entries {
            serde_json::to_writer(&mut f, e)?;
            f.write_all(b"\n").at(&path)?;
        }
        f.flush().at(&path)?;
        Ok(path)
    }

    /// Reads `manifest.jsonl` from a directory (or the file itself).
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        };
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let reader = std::io::BufReader::new(std::fs::File::open(&file).at(&file)?);
        let mut entries = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.at(&file)?;
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(&line).map_err(|e| Error::Manifest {
                path: file.clone(),
                reason: format!("line {}: {e}", i + 1),
            })?;
            entries.push(e);
        }
        Ok(Self { root, entries })
    }

    pub fn validate(&self, classes: &[ClassLabel]) -> Result<()> {
        let bad = |reason: String| Error::Manifest {
            path: self.root.join(MANIFEST_FILE),
            reason,
        };
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !classes.contains(&e.label) {
                return Err(bad(format!("label `{}` is not in the class set", e.label)));
            }
            if !seen.insert(&e.path) {
                return Err(bad(format!("duplicate path `{}`", e.path)));
            }
            if !self.path_of(e).exists() {
                return Err(bad(format!("missing file `{}`", e.path)));
            }
        }
        Ok(())
    }
}

/// Per-clip seed derived from the corpus seed and the clip index.
pub fn clip_seed(corpus_seed: u64, index: usize) -> u64 {
    corpus_seed
        .wrapping_mul(1_000_003)
        .wrapping_add(index as u64)
}

/// Writes `per_class` clips per label under `out_dir/<label>/<index>.wav` and a manifest.
pub fn build_corpus(
    classes: &[ClassLabel],
    per_class: usize,
    seed: u64,
    duration_s: f64,
    out_dir: impl AsRef<Path>,
) -> Result<Manifest> {
    validate_classes(classes)?;
    if per_class == 0 {
        return Err(Error::InvalidArgument("per_class must be positive".into()));
    }
    let root = out_dir.as_ref().to_path_buf();
    std::fs::create_dir_all(&root).at(&root)?;
    let mut entries = Vec::with_capacity(classes.len() * per_class);
    for &label in classes {
        for i in 0..per_class {
            let w = synthesize_class_clip(label, clip_seed(seed, i), duration_s)?;
            let rel = format!("{}/{:04}.wav", label.as_str(), i);
            save_wav(root.join(&rel), &w)?;
            entries.push(ManifestEntry {
                path: rel,
                label,
                duration_s: w.duration_s(),
            });
        }
    }
    let m = Manifest { root, entries };
    m.write()?;
    Ok(m)
}
