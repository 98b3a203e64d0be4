//! Latent diffusion: schedule, losses, conditional noise predictor, sampler
//! and fine-tuning loop.

mod loss;
mod net;
mod sampler;
mod schedule;
mod train;

pub use loss::{cfg_combine, ddpm_loss, step_weight, total_loss, LossConfig};
pub use net::{LdmConfig, LdmModel};
pub use sampler::{ddim_timesteps, sample, sample_batch, EpsPredictor};
pub use schedule::{make_schedule, predict_s0, q_sample, NoiseSchedule, ScheduleConfig};
pub use train::{
    finetune_ldm, latent_clap_loss_term, lclap_term_graph, predictor_digest, text_condition,
    FinetuneConfig, FinetuneData, TrainingRecord,
};
