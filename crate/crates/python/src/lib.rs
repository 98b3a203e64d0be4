//! Python bindings: signal processing, metrics, loss terms and the stage runner.

use std::path::PathBuf;

use foley_core::config::ExperimentConfig;
use foley_core::dataset::{synthesize_class_clip, ClassLabel};
use foley_core::dsp::{mel_spectrogram as mel_of, MelConfig, Waveform};
use foley_core::embedding::Embedding;
use foley_core::fad::{fit_stats, frechet_distance as fd};
use foley_core::ldm::{make_schedule, step_weight as weight, total_loss as total, LossConfig};
use foley_core::pipeline::Run;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn py_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn mel_preset(name: &str) -> PyResult<MelConfig> {
    match name {
        "desk" => Ok(MelConfig::desk()),
        "paper" => Ok(MelConfig::paper()),
        other => Err(py_err(format!(
            "unknown mel preset `{other}` (expected desk or paper)"
        ))),
    }
}

/// Class names in canonical order.
#[pyfunction]
fn classes() -> Vec<&'static str> {
    ClassLabel::ALL.iter().map(|l| l.as_str()).collect()
}

/// Procedurally synthesised clip: `(samples, sample_rate)`.
#[pyfunction]
fn synthesize(class_name: &str, seed: u64, duration_s: f64) -> PyResult<(Vec<f32>, u32)> {
    let label: ClassLabel = class_name.parse().map_err(py_err)?;
    let w = synthesize_class_clip(label, seed, duration_s).map_err(py_err)?;
    let rate = w.sample_rate();
    Ok((w.into_samples(), rate))
}

/// Log-Mel spectrogram as `n_mels` rows of frames.
#[pyfunction]
#[pyo3(signature = (samples, sample_rate, preset = "desk"))]
fn mel_spectrogram(samples: Vec<f32>, sample_rate: u32, preset: &str) -> PyResult<Vec<Vec<f32>>> {
    let cfg = mel_preset(preset)?;
    let w = Waveform::new(samples, sample_rate).map_err(py_err)?;
    let mel = mel_of(&w, &cfg).map_err(py_err)?;
    Ok(mel
        .values()
        .chunks(mel.frames())
        .map(<[f32]>::to_vec)
        .collect())
}

/// Fréchet distance between Gaussians fitted to two embedding sets.
#[pyfunction]
#[pyo3(signature = (a, b, shrinkage = 0.0))]
fn frechet_distance(a: Vec<Vec<f32>>, b: Vec<Vec<f32>>, shrinkage: f64) -> PyResult<f64> {
    let fit = |rows: Vec<Vec<f32>>| -> PyResult<_> {
        let e: Vec<Embedding> = rows
            .into_iter()
            .map(Embedding::new)
            .collect::<Result<_, _>>()
            .map_err(py_err)?;
        fit_stats(&e, shrinkage).map_err(py_err)
    };
    fd(&fit(a)?, &fit(b)?).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (n, steps = 1000, beta_start = 1e-4, beta_end = 2e-2))]
fn alpha_bar(n: usize, steps: usize, beta_start: f64, beta_end: f64) -> PyResult<f64> {
    let s = make_schedule(steps, beta_start, beta_end).map_err(py_err)?;
    s.check_step(n).map_err(py_err)?;
    Ok(s.alpha_bar(n))
}

#[pyfunction]
fn step_weight(n: i64) -> PyResult<f64> {
    weight(n, &LossConfig::default()).map_err(py_err)
}

#[pyfunction]
fn total_loss(ddpm: f64, lclap: f64, lam: f64) -> f64 {
    total(
        ddpm,
        lclap,
        &LossConfig {
            lambda: lam,
            ..LossConfig::default()
        },
    )
}

/// Runs one pipeline stage (a CLI subcommand name) and returns its JSON summary.
#[pyfunction]
#[pyo3(signature = (out_dir, stage, overrides = Vec::new(), force = false))]
fn run_stage(
    py: Python<'_>,
    out_dir: PathBuf,
    stage: &str,
    overrides: Vec<String>,
    force: bool,
) -> PyResult<String> {
    let cfg = ExperimentConfig::load(None, &overrides).map_err(py_err)?;
    let run = Run::new(out_dir, cfg, force);
    let stage = stage.to_string();
    let summary = py.detach(move || match stage.as_str() {
        "make-data" => run.make_data(),
        "train-clap" => run.train_clap(),
        "train-vae" => run.train_vae(),
        "train-latent-clap" => run.train_latent_clap(),
        "finetune-ldm" => run.finetune_ldm(),
        "generate" => run.generate(),
        "evaluate" => run.evaluate(),
        other => Err(foley_core::Error::InvalidArgument(format!(
            "unknown stage `{other}`"
        ))),
    });
    serde_json::to_string_pretty(&summary.map_err(py_err)?).map_err(py_err)
}

#[pymodule]
fn foley(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(classes, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    m.add_function(wrap_pyfunction!(mel_spectrogram, m)?)?;
    m.add_function(wrap_pyfunction!(frechet_distance, m)?)?;
    m.add_function(wrap_pyfunction!(alpha_bar, m)?)?;
    m.add_function(wrap_pyfunction!(step_weight, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(run_stage, m)?)?;
    Ok(())
}
