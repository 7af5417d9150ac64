//! Adam training of the step model on MSE.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::RngStream;

use super::dataset::TrajectoryDataset;
use super::mlp::{mean_squared, Batch, FeedForwardModel};

/// Stream id reserved for shuffling.
const SHUFFLE_STREAM: u64 = u64::MAX - 2;

pub const MIN_RECORDS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
}

impl TrainState {
    pub fn new(model: &FeedForwardModel, learning_rate: f64, batch_size: usize) -> Self {
        let n = model.parameter_count();
        Self {
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size,
        }
    }

    /// Bias-corrected Adam update of `params` in place.
    pub fn apply(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.first_moment[i] = self.beta1 * self.first_moment[i] + (1.0 - self.beta1) * g;
            self.second_moment[i] = self.beta2 * self.second_moment[i] + (1.0 - self.beta2) * g * g;
            let m = self.first_moment[i] / c1;
            let v = self.second_moment[i] / c2;
            params[i] -= self.learning_rate * m / (v.sqrt() + self.epsilon);
        }
    }
}

/// One Adam step on the batch; returns the batch MSE before the update.
pub fn train_step(
    model: &mut FeedForwardModel,
    state: &mut TrainState,
    batch: &Batch,
    target: &nalgebra::DMatrix<f64>,
) -> Result<f64> {
    let (loss, grad) = model.loss_and_gradient(batch, target)?;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Diverged {
            step: state.step as usize,
            what: format!("training loss {loss} or its gradient is not finite"),
        });
    }
    let mut params = model.parameters();
    state.apply(&mut params, &grad);
    model.set_parameters(&params)?;
    Ok(loss)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 256,
            max_epochs: 200,
            patience: 20,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidArgument("learning rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean of the batch losses seen during the epoch (full-set MSE for epoch 0).
    pub train_mse: f64,
    pub validation_mse: f64,
}

/// Index sets of a 6:3:1 split.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_indices(n: usize, seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    shuffle(&mut idx, &mut RngStream::new(seed, SHUFFLE_STREAM));
    let n_train = n * 6 / 10;
    let n_val = n * 3 / 10;
    let test = idx.split_off(n_train + n_val);
    let validation = idx.split_off(n_train);
    Split { train: idx, validation, test }
}

fn shuffle(v: &mut [usize], rng: &mut RngStream) {
    for i in (1..v.len()).rev() {
        v.swap(i, rng.next_index(i + 1));
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation MSE.
    pub model: FeedForwardModel,
    pub curves: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_validation_mse: f64,
    pub test_mse: f64,
    /// MSE of the unguided DDIM update as a predictor, per split.
    pub baseline_validation_mse: f64,
    pub baseline_test_mse: f64,
}

fn evaluate(model: &FeedForwardModel, data: &TrajectoryDataset, indices: &[usize]) -> Result<f64> {
    let mut sum = 0.0;
    for chunk in indices.chunks(4096) {
        let (batch, target) = data.batch(chunk);
        sum += model.mse(&batch, &target)? * chunk.len() as f64;
    }
    Ok(sum / indices.len() as f64)
}

fn baseline_mse(model: &FeedForwardModel, data: &TrajectoryDataset, indices: &[usize]) -> f64 {
    let (batch, target) = data.batch(indices);
    mean_squared(&(model.baseline(&batch) - target))
}

/// Trains with early stopping on validation MSE. Epoch 0 of the curves is the
/// untrained model.
pub fn train_fphi(data: &TrajectoryDataset, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if data.len() < MIN_RECORDS {
        return Err(Error::InsufficientData {
            needed: MIN_RECORDS,
            got: data.len(),
        });
    }
    let noise = crate::math::NoiseSchedule::new(data.header.steps, data.header.schedule_kind)?;
    let mut model = FeedForwardModel::new(data.header.dim, data.header.prompt_dim, &noise, config.seed)?;
    let split = split_indices(data.len(), config.seed);
    let mut state = TrainState::new(&model, config.learning_rate, config.batch_size);
    let mut rng = RngStream::new(config.seed.wrapping_add(1), SHUFFLE_STREAM);

    let mut curves = vec![EpochStats {
        epoch: 0,
        train_mse: evaluate(&model, data, &split.train)?,
        validation_mse: evaluate(&model, data, &split.validation)?,
    }];
    let mut best = (0, curves[0].validation_mse, model.parameters());
    let mut order = split.train.clone();
    for epoch in 1..=config.max_epochs {
        shuffle(&mut order, &mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let (batch, target) = data.batch(chunk);
            loss_sum += train_step(&mut model, &mut state, &batch, &target)? * chunk.len() as f64;
        }
        let stats = EpochStats {
            epoch,
            train_mse: loss_sum / order.len() as f64,
            validation_mse: evaluate(&model, data, &split.validation)?,
        };
        log::debug!("epoch {epoch}: train {:.3e} validation {:.3e}", stats.train_mse, stats.validation_mse);
        curves.push(stats);
        if stats.validation_mse < best.1 {
            best = (epoch, stats.validation_mse, model.parameters());
        } else if epoch - best.0 >= config.patience {
            break;
        }
    }
    model.set_parameters(&best.2)?;
    Ok(TrainOutcome {
        test_mse: evaluate(&model, data, &split.test)?,
        baseline_validation_mse: baseline_mse(&model, data, &split.validation),
        baseline_test_mse: baseline_mse(&model, data, &split.test),
        model,
        curves,
        best_epoch: best.0,
        best_validation_mse: best.1,
    })
}
