//! Guided sampling on an analytically tractable Gaussian-mixture world.
//!
//! The crate pairs an exact denoiser with forward guidance, backward guidance
//! and per-step self-recurrence, plus the metrics used to judge the samples
//! and a learned single-step approximator of the guided update.

pub mod approx;
pub mod error;
pub mod guidance;
pub mod math;
pub mod metrics;
pub mod sampler;
pub mod world;

pub use error::{Error, Result};
pub use guidance::{
    EmbeddingMap, GradientPath, GuidancePrompt, GuidanceSchedule, PromptTarget, Window,
};
pub use math::{NoiseSchedule, Point, RngStream, ScheduleKind, SpdMatrix};
pub use metrics::{fit_gaussian, frechet_distance, GaussianSummary};
pub use sampler::{guided_sample, unguided_sample, GuidedSampler, OpCounts, SampleRun, SamplerConfig};
pub use world::{Component, ExactDenoiser, GaussianMixtureWorld};
