//! Latent diffusion: noise schedule, epsilon-prediction UNet, forward
//! noising, ancestral denoising, deterministic PLMS reconstruction, and
//! training on de-quantized latents.

mod sampler;
mod schedule;
mod train;
mod unet;

pub use sampler::{
    ancestral_reconstruct, ddim_transfer, ddpm_step, plms_reconstruct, PlmsOutcome,
    SamplerConfig, SamplerKind,
};
pub use schedule::{forward_noise, NoiseSchedule, ScheduleParams};
pub use train::{
    load_ddpm, train_ddpm, validation_loss, DdpmCheckpointMeta, DdpmEpochLog, DdpmTrainConfig,
    DdpmTrainOutcome, LatentStats,
};
pub use unet::{Unet, UnetConfig};
