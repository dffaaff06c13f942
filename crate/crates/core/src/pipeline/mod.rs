//! Synthetic data, optimization, metrics and the training driver.

pub mod metrics;
pub mod optim;
pub mod synth;
mod train;

pub use metrics::{psnr, ssim};
pub use optim::{adamw_step, cosine_lr, AdamState, AdamWConfig};
pub use synth::{synth_pair, BlurFamily, BlurKind, BlurSpec};
pub use train::{
    ablate, crop, deblur_image, derive_seed, random_pair, reflect_pad, train, RunConfig, StepStats, TrainConfig,
    TrainLog, TrainOutcome, Trainer, ValReport,
};
