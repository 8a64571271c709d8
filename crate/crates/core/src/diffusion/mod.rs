//! Noise schedule, the denoising loss with conditioning dropout, and the
//! training loop.

mod gradcheck;
mod schedule;
mod train;

pub use gradcheck::{jitter_trainable, loss_grad_check};
pub use schedule::{add_noise, NoiseSchedule, ScheduleKind};
pub use train::{
    cond_dropout, loss_and_grads, prepare_sample, sample_loss_tape, train, training_loss, DropoutConfig, LossConfig,
    LossRecord, NoisedSample, TrainConfig, Trainer,
};
