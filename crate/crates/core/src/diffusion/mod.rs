//! Noise schedule, training objectives, the two training phases and the
//! DDIM sampler.

mod loss;
mod optim;
mod sample;
mod schedule;
mod train;

pub use loss::{loss_graph, losses, region_mask, Losses};
pub use optim::{Optimizer, OptimizerKind};
pub use sample::{ddim_timesteps, layout_steps, sample_image, SampleOutput};
pub use schedule::{Schedule, SigmaRule, TimestepSampler, TimestepTag};
pub use train::{
    pretrain_base, train_layout, train_step, write_metrics_csv, Probe, ProbeValues, StepMetrics, TrainConfig, Trainer,
    TrainExample,
};
