//! Sampling with a learned step model in place of the guided update.

use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::guidance::{EmbeddingMap, GuidancePrompt};
use crate::math::{Point, RngStream};
use crate::sampler::{OpCounts, SamplerConfig};
use crate::world::{ExactDenoiser, GaussianMixtureWorld};

use super::mlp::FeedForwardModel;

/// Anything that maps `(z_t, eps_hat, t, prompt)` to `z_{t-1}`.
pub trait StepModel: Sync {
    fn dim(&self) -> usize;
    fn prompt_dim(&self) -> usize;
    fn predict_step(&self, z_in: &Point, eps_in: &Point, t: usize, prompt: &Point) -> Result<Point>;
}

impl StepModel for FeedForwardModel {
    fn dim(&self) -> usize {
        FeedForwardModel::dim(self)
    }

    fn prompt_dim(&self) -> usize {
        FeedForwardModel::prompt_dim(self)
    }

    fn predict_step(&self, z_in: &Point, eps_in: &Point, t: usize, prompt: &Point) -> Result<Point> {
        self.predict(z_in, eps_in, t, prompt)
    }
}

#[derive(Debug, Clone)]
pub struct ApproxRun {
    pub samples: Vec<(u64, Point)>,
    pub counts: OpCounts,
    pub failures: Vec<(u64, String)>,
    pub elapsed: f64,
}

impl ApproxRun {
    pub fn points(&self) -> Vec<Point> {
        self.samples.iter().map(|(_, p)| p.clone()).collect()
    }
}

/// Two model passes per step: the exact denoiser, then the step model.
/// Chains start from the same `z_T` draw as the guided sampler.
pub fn fphi_sample<M: StepModel>(
    model: &M,
    config: &SamplerConfig,
    world: &GaussianMixtureWorld,
    map: &EmbeddingMap,
    prompt: &GuidancePrompt,
) -> Result<ApproxRun> {
    config.validate()?;
    if model.dim() != world.dim() || config.dim != world.dim() {
        return Err(Error::InvalidArgument(format!(
            "step model dimension {} does not match world dimension {}",
            model.dim(),
            world.dim()
        )));
    }
    if model.prompt_dim() != map.embed_dim() {
        return Err(Error::InvalidArgument(format!(
            "step model expects prompt length {}, embedding map produces {}",
            model.prompt_dim(),
            map.embed_dim()
        )));
    }
    prompt.validate(map, world)?;
    let embedding = prompt.embedding_vector(map, world)?;
    let noise = config.noise_schedule()?;
    let denoiser = ExactDenoiser::new(world, &noise)?;
    let started = Instant::now();
    let outcomes: Vec<_> = (0..config.chains as u64)
        .into_par_iter()
        .map(|chain_id| {
            let mut z = RngStream::new(config.seed, chain_id).gaussian(config.dim);
            for t in (1..=noise.steps()).rev() {
                let eps = denoiser.epsilon(&z, t);
                z = model.predict_step(&z, &eps, t, &embedding).map_err(|e| e.to_string())?;
                if z.iter().any(|v| !v.is_finite()) {
                    return Err(format!("non-finite state at t={t}"));
                }
            }
            Ok(z)
        })
        .collect();
    let per_chain = OpCounts {
        denoiser_calls: noise.steps() as u64,
        approximator_calls: noise.steps() as u64,
        ..OpCounts::default()
    };
    let mut samples = Vec::new();
    let mut failures = Vec::new();
    let mut counts = OpCounts::default();
    for (chain_id, out) in outcomes.into_iter().enumerate() {
        match out {
            Ok(z) => {
                counts += per_chain;
                samples.push((chain_id as u64, z));
            }
            Err(msg) => failures.push((chain_id as u64, msg)),
        }
    }
    Ok(ApproxRun {
        samples,
        counts,
        failures,
        elapsed: started.elapsed().as_secs_f64(),
    })
}
