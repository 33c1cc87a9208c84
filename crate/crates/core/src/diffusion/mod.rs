//! Pixel-space conditional denoising diffusion: variance schedule, forward
//! noising, the control-branch denoiser, Adam training with taped gradients,
//! deterministic DDIM sampling and checkpoints.

pub mod checkpoint;
mod model;
mod sample;
mod schedule;
mod train;

pub use model::{Conditioning, ConditionalUnet, ModelConfig, CONTROL_SITES};
pub use sample::{
    ddim_sample, ddim_sample_from, initial_noise, restyle_caption, tile_seed, to_pixels, Conditioned,
    EpsPredictor,
};
pub use schedule::{ddim_timesteps, forward_diffuse, make_schedule, NoiseSchedule, ScheduleKind};
pub use train::{
    batch_gradients, batch_indices, train_step, train_step_with, Ablation, AdamState, Predictor, TrainConfig,
    TrainSample, TrainState,
};
