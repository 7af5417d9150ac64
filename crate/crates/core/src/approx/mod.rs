//! A learned one-shot replacement for the guided step: dataset dumping,
//! the network, its training loop and the two-pass sampler.

pub mod dataset;
pub mod mlp;
pub mod sample;
pub mod train;

pub use dataset::{collect_trajectories, dump_trajectories, DatasetHeader, TrajectoryDataset, TrajectoryRecord};
pub use mlp::{Activation, Batch, Dense, FeedForwardModel, ModelShape};
pub use sample::{fphi_sample, ApproxRun, StepModel};
pub use train::{split_indices, train_fphi, train_step, EpochStats, Split, TrainConfig, TrainOutcome, TrainState};
