#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod dsp;
pub mod embedding;
pub mod error;
pub mod fad;
pub mod features;
pub mod generate;
pub mod latent;
pub mod latent_clap;
pub mod ldm;
pub mod mini_clap;
pub mod nn;
pub mod pipeline;
pub mod vae;

pub use error::{Error, Result};
