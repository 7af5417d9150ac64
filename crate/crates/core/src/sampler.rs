//! The DDIM reverse loop with forward guidance, backward guidance and
//! per-step self-recurrence.
//!
//! One reverse step at level `t` runs `k` rounds when guidance is active:
//!
//! ```text
//! eps^  = E[eps | z_t]
//! eps~  = forward_guidance(eps^)
//! delta = backward_guidance(predict_z0(z_t, eps~))      // m gradient steps
//! eps'  = apply_backward_to_eps(eps~, delta)
//! z_t-1 = ddim_step(z_t, eps')
//! z_t   = renoise(z_t-1)                                 // all but the last round
//! ```
//!
//! When the schedule has no prompt for step `t` the step is a single plain
//! DDIM update.

use std::ops::{Add, AddAssign};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::guidance::{
    apply_backward_to_eps, backward_guidance, clean_estimate, forward_guidance, EmbeddingMap,
    GuidancePrompt, GuidanceSchedule, PromptLoss,
};
use crate::math::{NoiseSchedule, Point, RngStream, ScheduleKind, MAX_DIM};
use crate::metrics::{aggregate_timing, ChainTiming, TimingReport};
use crate::world::{ExactDenoiser, GaussianMixtureWorld};

/// `sqrt(abar_t) z0 + sqrt(1 - abar_t) eps`.
pub fn forward_noise(z0: &Point, t: usize, eps: &Point, schedule: &NoiseSchedule) -> Point {
    let abar = schedule.abar(t);
    z0 * abar.sqrt() + eps * (1.0 - abar).sqrt()
}

/// Inverts the forward process for a given noise estimate (`1 <= t <= T`).
pub fn predict_z0(z_t: &Point, eps: &Point, t: usize, schedule: &NoiseSchedule) -> Point {
    clean_estimate(z_t, eps, schedule.abar(t))
}

/// Deterministic (eta = 0) DDIM update from level `t` to `t - 1`.
pub fn ddim_step(z_t: &Point, eps: &Point, t: usize, schedule: &NoiseSchedule) -> Point {
    let prev = schedule.abar(t - 1);
    predict_z0(z_t, eps, t, schedule) * prev.sqrt() + eps * (1.0 - prev).sqrt()
}

/// Moves a level `t - 1` point back to level `t` with fresh noise `eps`.
pub fn renoise_with(z_prev: &Point, t: usize, eps: &Point, schedule: &NoiseSchedule) -> Point {
    let ratio = schedule.abar(t) / schedule.abar(t - 1);
    z_prev * ratio.sqrt() + eps * (1.0 - ratio).sqrt()
}

pub fn renoise(z_prev: &Point, t: usize, rng: &mut RngStream, schedule: &NoiseSchedule) -> Point {
    let eps = rng.gaussian(z_prev.len());
    renoise_with(z_prev, t, &eps, schedule)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Number of reverse steps `T`.
    pub steps: usize,
    pub dim: usize,
    pub chains: usize,
    pub seed: u64,
    pub schedule_kind: ScheduleKind,
    /// Keep per-step records for every chain.
    pub record_traces: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            dim: 2,
            chains: 500,
            seed: 0,
            schedule_kind: ScheduleKind::Cosine,
            record_traces: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidArgument("steps T must satisfy T >= 1".into()));
        }
        if self.chains == 0 {
            return Err(Error::InvalidArgument("chain count must satisfy n_chains >= 1".into()));
        }
        if self.dim == 0 || self.dim > MAX_DIM {
            return Err(Error::InvalidArgument(format!("dimension must lie in 1..={MAX_DIM}")));
        }
        Ok(())
    }

    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.steps, self.schedule_kind)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    pub denoiser_calls: u64,
    pub forward_guidance_calls: u64,
    pub backward_gradient_steps: u64,
    pub renoise_calls: u64,
    /// Passes through a learned step model (zero for the guided sampler).
    pub approximator_calls: u64,
}

impl Add for OpCounts {
    type Output = OpCounts;

    fn add(self, o: OpCounts) -> OpCounts {
        OpCounts {
            denoiser_calls: self.denoiser_calls + o.denoiser_calls,
            forward_guidance_calls: self.forward_guidance_calls + o.forward_guidance_calls,
            backward_gradient_steps: self.backward_gradient_steps + o.backward_gradient_steps,
            renoise_calls: self.renoise_calls + o.renoise_calls,
            approximator_calls: self.approximator_calls + o.approximator_calls,
        }
    }
}

impl AddAssign for OpCounts {
    fn add_assign(&mut self, o: OpCounts) {
        *self = *self + o;
    }
}

impl std::iter::Sum for OpCounts {
    fn sum<I: Iterator<Item = OpCounts>>(iter: I) -> Self {
        iter.fold(OpCounts::default(), Add::add)
    }
}

/// Per-chain operation counts when guidance is active at every step.
pub fn op_counts(steps: usize, recurrence: usize, backward_steps: usize) -> OpCounts {
    let (t, k, m) = (steps as u64, recurrence as u64, backward_steps as u64);
    OpCounts {
        denoiser_calls: t * k,
        forward_guidance_calls: t * k,
        backward_gradient_steps: t * k * m,
        renoise_calls: t * k.saturating_sub(1),
        approximator_calls: 0,
    }
}

/// One reverse step of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: usize,
    /// Level-`t` input of the step.
    pub z_in: Point,
    /// Denoiser output at `z_in`.
    pub eps_hat: Point,
    /// Noise estimate used by the final DDIM update of the step.
    pub eps_used: Point,
    /// Level `t - 1` output of the step.
    pub z_out: Point,
    /// Stream position at the start of the step.
    pub rng_counter: u64,
    pub guided: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainTrace {
    pub chain_id: u64,
    /// Ordered from `t = T` down to `t = 1`.
    pub steps: Vec<StepRecord>,
    pub final_sample: Point,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainFailure {
    pub chain_id: u64,
    pub t: usize,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct ChainOutput {
    pub chain_id: u64,
    pub sample: Point,
    pub counts: OpCounts,
    pub timing: ChainTiming,
    pub trace: Option<ChainTrace>,
}

#[derive(Debug, Clone)]
pub struct SampleRun {
    /// `(chain_id, final sample)` for every chain that completed, ordered by chain id.
    pub samples: Vec<(u64, Point)>,
    pub traces: Vec<ChainTrace>,
    pub counts: OpCounts,
    pub timing: TimingReport,
    pub failures: Vec<ChainFailure>,
    /// Wall-clock seconds for the whole run.
    pub elapsed: f64,
}

impl SampleRun {
    pub fn points(&self) -> Vec<Point> {
        self.samples.iter().map(|(_, p)| p.clone()).collect()
    }
}

/// Everything a chain needs, shared immutably across chains.
#[derive(Debug)]
pub struct GuidedSampler<'a> {
    config: SamplerConfig,
    world: &'a GaussianMixtureWorld,
    map: &'a EmbeddingMap,
    schedule: &'a GuidanceSchedule,
    denoiser: ExactDenoiser,
}

#[derive(Default)]
struct StepMeter {
    counts: OpCounts,
    timing: ChainTiming,
}

impl<'a> GuidedSampler<'a> {
    pub fn new(
        config: &SamplerConfig,
        world: &'a GaussianMixtureWorld,
        schedule: &'a GuidanceSchedule,
        map: &'a EmbeddingMap,
    ) -> Result<Self> {
        config.validate()?;
        schedule.validate()?;
        if world.dim() != config.dim {
            return Err(Error::DimensionMismatch {
                expected: config.dim,
                got: world.dim(),
            });
        }
        if map.dim() != world.dim() {
            return Err(Error::DimensionMismatch {
                expected: world.dim(),
                got: map.dim(),
            });
        }
        schedule.prompt.validate(map, world)?;
        if let crate::guidance::Window::Switch { then, .. } = &schedule.window {
            then.validate(map, world)?;
        }
        let noise = config.noise_schedule()?;
        let denoiser = ExactDenoiser::new(world, &noise)?;
        Ok(Self {
            config: config.clone(),
            world,
            map,
            schedule,
            denoiser,
        })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.config
    }

    pub fn noise(&self) -> &NoiseSchedule {
        self.denoiser.noise()
    }

    pub fn denoiser(&self) -> &ExactDenoiser {
        &self.denoiser
    }

    /// The full guided step from `z_t` at level `t`; returns `z_{t-1}` and the
    /// noise estimate used by the final update.
    pub fn step(&self, z_t: &Point, t: usize, rng: &mut RngStream) -> Result<(Point, Point)> {
        let mut meter = StepMeter::default();
        let (z, _, eps) = self.step_metered(z_t, t, rng, &mut meter)?;
        Ok((z, eps))
    }

    fn step_metered(
        &self,
        z_t: &Point,
        t: usize,
        rng: &mut RngStream,
        meter: &mut StepMeter,
    ) -> Result<(Point, Point, Point)> {
        let noise = self.denoiser.noise();
        let prompt = self.schedule.active_prompt(t, noise.steps());
        let rounds = if prompt.is_some() { self.schedule.recurrence } else { 1 };
        let mut z = z_t.clone();
        let mut first_eps = None;
        let mut out = None;
        for round in 0..rounds {
            let clock = Instant::now();
            let eps_hat = self.denoiser.epsilon(&z, t);
            meter.timing.denoiser += clock.elapsed().as_secs_f64();
            meter.counts.denoiser_calls += 1;
            let eps = match prompt {
                Some(prompt) => self.guide(&z, &eps_hat, t, prompt, meter)?,
                None => eps_hat.clone(),
            };
            first_eps.get_or_insert(eps_hat);
            let z_prev = ddim_step(&z, &eps, t, noise);
            if round + 1 < rounds {
                let clock = Instant::now();
                z = renoise(&z_prev, t, rng, noise);
                meter.timing.renoise += clock.elapsed().as_secs_f64();
                meter.counts.renoise_calls += 1;
            } else {
                out = Some((z_prev, eps));
            }
        }
        let (z_prev, eps) = out.expect("at least one round");
        Ok((z_prev, first_eps.expect("at least one round"), eps))
    }

    fn guide(
        &self,
        z: &Point,
        eps_hat: &Point,
        t: usize,
        prompt: &GuidancePrompt,
        meter: &mut StepMeter,
    ) -> Result<Point> {
        let noise = self.denoiser.noise();
        let loss = PromptLoss {
            prompt,
            map: self.map,
            world: self.world,
        };
        let clock = Instant::now();
        let eps_tilde = forward_guidance(
            &loss,
            prompt.strength,
            eps_hat,
            z,
            t,
            &self.denoiser,
            self.schedule.gradient_path,
        )?;
        meter.timing.forward_guidance += clock.elapsed().as_secs_f64();
        meter.counts.forward_guidance_calls += 1;

        let clock = Instant::now();
        let z0 = predict_z0(z, &eps_tilde, t, noise);
        let delta = backward_guidance(
            &loss,
            &z0,
            self.schedule.backward_steps,
            self.schedule.backward_lr,
        )?;
        let eps = apply_backward_to_eps(&eps_tilde, &delta, t, noise)?;
        meter.timing.backward_guidance += clock.elapsed().as_secs_f64();
        meter.counts.backward_gradient_steps += self.schedule.backward_steps as u64;
        Ok(eps)
    }

    /// Runs one chain from `z_T ~ N(0, I)` drawn from the chain's own stream.
    pub fn run_chain(&self, chain_id: u64) -> std::result::Result<ChainOutput, ChainFailure> {
        let started = Instant::now();
        let noise = self.denoiser.noise();
        let total = noise.steps();
        let mut rng = RngStream::new(self.config.seed, chain_id);
        let mut z = rng.gaussian(self.config.dim);
        let mut meter = StepMeter::default();
        let mut steps = Vec::with_capacity(if self.config.record_traces { total } else { 0 });
        for t in (1..=total).rev() {
            let counter = rng.counter();
            let step_clock = Instant::now();
            let (z_prev, eps_hat, eps_used) =
                self.step_metered(&z, t, &mut rng, &mut meter)
                    .map_err(|e| ChainFailure {
                        chain_id,
                        t,
                        message: e.to_string(),
                    })?;
            if z_prev.iter().any(|v| !v.is_finite()) {
                let err = Error::NonFinite {
                    chain_id,
                    t,
                    what: format!("z_{} = {:?}", t - 1, z_prev.as_slice()),
                };
                return Err(ChainFailure {
                    chain_id,
                    t,
                    message: err.to_string(),
                });
            }
            if self.config.record_traces {
                steps.push(StepRecord {
                    t,
                    z_in: z.clone(),
                    eps_hat,
                    eps_used,
                    z_out: z_prev.clone(),
                    rng_counter: counter,
                    guided: self.schedule.active_prompt(t, total).is_some(),
                    seconds: step_clock.elapsed().as_secs_f64(),
                });
            }
            z = z_prev;
        }
        let timing = meter.timing.finish(started.elapsed().as_secs_f64());
        let trace = self.config.record_traces.then(|| ChainTrace {
            chain_id,
            steps,
            final_sample: z.clone(),
        });
        Ok(ChainOutput {
            chain_id,
            sample: z,
            counts: meter.counts,
            timing,
            trace,
        })
    }

    /// Runs every chain on the current rayon pool. Results are independent of
    /// the pool size: each chain owns its stream and outputs are gathered in
    /// chain order.
    pub fn run(&self) -> SampleRun {
        let started = Instant::now();
        let outputs: Vec<_> = (0..self.config.chains as u64)
            .into_par_iter()
            .map(|id| self.run_chain(id))
            .collect();
        let mut samples = Vec::with_capacity(outputs.len());
        let mut traces = Vec::new();
        let mut counts = OpCounts::default();
        let mut timings = Vec::with_capacity(outputs.len());
        let mut failures = Vec::new();
        for out in outputs {
            match out {
                Ok(out) => {
                    counts += out.counts;
                    timings.push(out.timing);
                    samples.push((out.chain_id, out.sample));
                    traces.extend(out.trace);
                }
                Err(fail) => {
                    log::warn!("chain {} aborted at t={}: {}", fail.chain_id, fail.t, fail.message);
                    failures.push(fail);
                }
            }
        }
        SampleRun {
            samples,
            traces,
            counts,
            timing: aggregate_timing(&timings),
            failures,
            elapsed: started.elapsed().as_secs_f64(),
        }
    }
}

pub fn guided_sample(
    config: &SamplerConfig,
    world: &GaussianMixtureWorld,
    schedule: &GuidanceSchedule,
    map: &EmbeddingMap,
) -> Result<SampleRun> {
    Ok(GuidedSampler::new(config, world, schedule, map)?.run())
}

/// Plain DDIM with no guidance at any step, sharing the chain-stream layout
/// of the guided sampler.
pub fn unguided_sample(config: &SamplerConfig, world: &GaussianMixtureWorld) -> Result<Vec<Point>> {
    config.validate()?;
    let noise = config.noise_schedule()?;
    let denoiser = ExactDenoiser::new(world, &noise)?;
    Ok((0..config.chains as u64)
        .into_par_iter()
        .map(|id| {
            let mut rng = RngStream::new(config.seed, id);
            let mut z = rng.gaussian(config.dim);
            for t in (1..=noise.steps()).rev() {
                let eps = denoiser.epsilon(&z, t);
                z = ddim_step(&z, &eps, t, &noise);
            }
            z
        })
        .collect())
}
