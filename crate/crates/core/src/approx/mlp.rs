//! A small dense network with a learned per-step time embedding and a
//! residual connection to the unguided DDIM update.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{NoiseSchedule, Point, RngStream, ScheduleKind};
use crate::sampler::ddim_step;

pub const TIME_EMBED_DIM: usize = 16;
pub const HIDDEN_WIDTH: usize = 128;

/// Stream id reserved for weight initialisation.
const INIT_STREAM: u64 = u64::MAX - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, a: &mut DMatrix<f64>) {
        match self {
            Activation::Tanh => a.apply(|v| *v = v.tanh()),
            Activation::Relu => a.apply(|v| *v = v.max(0.0)),
            Activation::Identity => {}
        }
    }

    /// Derivative expressed through the layer output `h = act(a)`.
    fn derivative_from_output(self, h: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - h * h,
            Activation::Relu => {
                if h > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// `h = act(x W + b)` with `W` stored `inputs x outputs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weights: DMatrix<f64>,
    pub bias: DVector<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn inputs(&self) -> usize {
        self.weights.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weights.ncols()
    }

    fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut a = x * &self.weights;
        for mut row in a.row_iter_mut() {
            row += self.bias.transpose();
        }
        self.activation.apply(&mut a);
        a
    }
}

/// Shape summary written next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub dim: usize,
    pub prompt_dim: usize,
    pub time_embed_dim: usize,
    pub steps: usize,
    pub schedule_kind: ScheduleKind,
    /// `(inputs, outputs, activation)` per dense layer.
    pub layers: Vec<(usize, usize, Activation)>,
    pub parameter_count: usize,
}

/// `f(z, eps, t, c) = ddim_step(z, eps, t) + MLP([z, eps, E[t], c])`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForwardModel {
    dim: usize,
    prompt_dim: usize,
    noise: NoiseSchedule,
    /// Row `t` is the embedding of step `t`; row 0 is unused.
    time_table: DMatrix<f64>,
    layers: Vec<Dense>,
}

/// One batch of model inputs.
#[derive(Debug, Clone)]
pub struct Batch {
    pub z_in: DMatrix<f64>,
    pub eps_in: DMatrix<f64>,
    pub t: Vec<usize>,
    pub prompt: DMatrix<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

struct Tape {
    /// Input to each layer followed by the network output.
    activations: Vec<DMatrix<f64>>,
}

impl FeedForwardModel {
    /// The standard architecture: two hidden tanh layers and a zero-initialised
    /// linear read-out, so the untrained model equals the unguided update.
    pub fn new(dim: usize, prompt_dim: usize, noise: &NoiseSchedule, seed: u64) -> Result<Self> {
        Self::with_layers(
            dim,
            prompt_dim,
            noise,
            &[(HIDDEN_WIDTH, Activation::Tanh), (HIDDEN_WIDTH, Activation::Tanh), (dim, Activation::Identity)],
            seed,
            true,
        )
    }

    /// Arbitrary layer stack; the last width must equal `dim`.
    pub fn with_layers(
        dim: usize,
        prompt_dim: usize,
        noise: &NoiseSchedule,
        widths: &[(usize, Activation)],
        seed: u64,
        zero_readout: bool,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("model dimension must be >= 1".into()));
        }
        match widths.last() {
            Some(&(w, _)) if w == dim => {}
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "last layer width must equal the sample dimension {dim}"
                )))
            }
        }
        let mut rng = RngStream::new(seed, INIT_STREAM);
        let mut inputs = 2 * dim + TIME_EMBED_DIM + prompt_dim;
        let mut layers = Vec::with_capacity(widths.len());
        for (i, &(outputs, activation)) in widths.iter().enumerate() {
            if outputs == 0 {
                return Err(Error::InvalidArgument("layer widths must be >= 1".into()));
            }
            let scale = (1.0 / inputs as f64).sqrt();
            let zero = zero_readout && i + 1 == widths.len();
            let weights = DMatrix::from_fn(inputs, outputs, |_, _| {
                if zero {
                    0.0
                } else {
                    scale * rng.gaussian(1)[0]
                }
            });
            layers.push(Dense {
                weights,
                bias: DVector::zeros(outputs),
                activation,
            });
            inputs = outputs;
        }
        let steps = noise.steps();
        // sinusoidal start; every entry is trained afterwards
        let time_table = DMatrix::from_fn(steps + 1, TIME_EMBED_DIM, |t, j| {
            let freq = (j / 2) as f64;
            let phase = std::f64::consts::PI * t as f64 / steps as f64 * 2f64.powf(freq) / 2.0;
            if j % 2 == 0 {
                phase.sin()
            } else {
                phase.cos()
            }
        });
        Ok(Self {
            dim,
            prompt_dim,
            noise: noise.clone(),
            time_table,
            layers,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn prompt_dim(&self) -> usize {
        self.prompt_dim
    }

    pub fn noise(&self) -> &NoiseSchedule {
        &self.noise
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn time_table(&self) -> &DMatrix<f64> {
        &self.time_table
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            dim: self.dim,
            prompt_dim: self.prompt_dim,
            time_embed_dim: TIME_EMBED_DIM,
            steps: self.noise.steps(),
            schedule_kind: self.noise.kind(),
            layers: self
                .layers
                .iter()
                .map(|l| (l.inputs(), l.outputs(), l.activation))
                .collect(),
            parameter_count: self.parameter_count(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.time_table.len()
            + self
                .layers
                .iter()
                .map(|l| l.weights.len() + l.bias.len())
                .sum::<usize>()
    }

    /// Parameters in a fixed order: time table, then weights and bias per layer
    /// (each in nalgebra's column-major order).
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        out.extend_from_slice(self.time_table.as_slice());
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(l.bias.as_slice());
        }
        out
    }

    pub fn set_parameters(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.parameter_count() {
            return Err(Error::DimensionMismatch {
                expected: self.parameter_count(),
                got: flat.len(),
            });
        }
        let mut rest = flat;
        let mut take = |dst: &mut [f64]| {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        };
        take(self.time_table.as_mut_slice());
        for l in &mut self.layers {
            take(l.weights.as_mut_slice());
            take(l.bias.as_mut_slice());
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let n = batch.len();
        let shapes = [
            (batch.z_in.shape(), (n, self.dim)),
            (batch.eps_in.shape(), (n, self.dim)),
            (batch.prompt.shape(), (n, self.prompt_dim)),
        ];
        for (got, want) in shapes {
            if got != want {
                return Err(Error::DimensionMismatch {
                    expected: want.1,
                    got: got.1,
                });
            }
        }
        if let Some(&t) = batch.t.iter().find(|&&t| t == 0 || t > self.noise.steps()) {
            return Err(Error::InvalidArgument(format!(
                "step {t} outside 1..={}",
                self.noise.steps()
            )));
        }
        Ok(())
    }

    fn features(&self, batch: &Batch) -> DMatrix<f64> {
        let n = batch.len();
        let d = self.dim;
        let mut x = DMatrix::zeros(n, 2 * d + TIME_EMBED_DIM + self.prompt_dim);
        x.view_mut((0, 0), (n, d)).copy_from(&batch.z_in);
        x.view_mut((0, d), (n, d)).copy_from(&batch.eps_in);
        for (row, &t) in batch.t.iter().enumerate() {
            x.view_mut((row, 2 * d), (1, TIME_EMBED_DIM))
                .copy_from(&self.time_table.row(t));
        }
        x.view_mut((0, 2 * d + TIME_EMBED_DIM), (n, self.prompt_dim))
            .copy_from(&batch.prompt);
        x
    }

    /// Unguided DDIM update for every row of the batch.
    pub fn baseline(&self, batch: &Batch) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(batch.len(), self.dim);
        for (row, &t) in batch.t.iter().enumerate() {
            let z = batch.z_in.row(row).transpose();
            let e = batch.eps_in.row(row).transpose();
            out.set_row(row, &ddim_step(&z, &e, t, &self.noise).transpose());
        }
        out
    }

    fn run(&self, batch: &Batch) -> Tape {
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(self.features(batch));
        for l in &self.layers {
            let next = l.forward(activations.last().expect("input present"));
            activations.push(next);
        }
        Tape { activations }
    }

    pub fn predict_batch(&self, batch: &Batch) -> Result<DMatrix<f64>> {
        self.check_batch(batch)?;
        let mut tape = self.run(batch);
        let correction = tape.activations.pop().expect("output present");
        Ok(correction + self.baseline(batch))
    }

    pub fn predict(&self, z_in: &Point, eps_in: &Point, t: usize, prompt: &Point) -> Result<Point> {
        let batch = Batch {
            z_in: DMatrix::from_row_slice(1, z_in.len(), z_in.as_slice()),
            eps_in: DMatrix::from_row_slice(1, eps_in.len(), eps_in.as_slice()),
            t: vec![t],
            prompt: DMatrix::from_row_slice(1, prompt.len(), prompt.as_slice()),
        };
        let out = self.predict_batch(&batch)?;
        Ok(out.row(0).transpose())
    }

    /// Mean over rows and coordinates of the squared error.
    pub fn mse(&self, batch: &Batch, target: &DMatrix<f64>) -> Result<f64> {
        let pred = self.predict_batch(batch)?;
        Ok(mean_squared(&(pred - target)))
    }

    /// MSE and its gradient with respect to [`FeedForwardModel::parameters`].
    pub fn loss_and_gradient(&self, batch: &Batch, target: &DMatrix<f64>) -> Result<(f64, Vec<f64>)> {
        self.check_batch(batch)?;
        if batch.is_empty() {
            return Err(Error::InsufficientData { needed: 1, got: 0 });
        }
        if target.shape() != (batch.len(), self.dim) {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: target.ncols(),
            });
        }
        let tape = self.run(batch);
        let residual = tape.activations.last().expect("output present") + self.baseline(batch) - target;
        let loss = mean_squared(&residual);

        let mut grad_layers = Vec::with_capacity(self.layers.len());
        let scale = 2.0 / residual.len() as f64;
        let mut upstream = residual * scale;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let out = &tape.activations[i + 1];
            let mut da = upstream;
            da.zip_apply(out, |g, h| *g *= layer.activation.derivative_from_output(h));
            let x = &tape.activations[i];
            let d_weights = x.tr_mul(&da);
            let d_bias = da.row_sum().transpose();
            upstream = &da * layer.weights.transpose();
            grad_layers.push((d_weights, d_bias));
        }
        grad_layers.reverse();

        let mut d_table = DMatrix::zeros(self.time_table.nrows(), TIME_EMBED_DIM);
        let offset = 2 * self.dim;
        for (row, &t) in batch.t.iter().enumerate() {
            let g = upstream.view((row, offset), (1, TIME_EMBED_DIM));
            let mut dst = d_table.row_mut(t);
            dst += g;
        }

        let mut flat = Vec::with_capacity(self.parameter_count());
        flat.extend_from_slice(d_table.as_slice());
        for (w, b) in &grad_layers {
            flat.extend_from_slice(w.as_slice());
            flat.extend_from_slice(b.as_slice());
        }
        Ok((loss, flat))
    }

    /// Writes the flat little-endian parameter file at `path` and the shape
    /// manifest next to it with a `.json` extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        for v in self.parameters() {
            file.write_all(&v.to_le_bytes())?;
        }
        file.flush()?;
        let manifest = serde_json::to_string_pretty(&self.shape())
            .map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path.with_extension("json"), manifest)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path.with_extension("json"))?;
        let shape: ModelShape =
            serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        let noise = NoiseSchedule::new(shape.steps, shape.schedule_kind)?;
        let widths: Vec<_> = shape.layers.iter().map(|&(_, o, a)| (o, a)).collect();
        let mut model = Self::with_layers(shape.dim, shape.prompt_dim, &noise, &widths, 0, true)?;
        if model.shape() != shape {
            return Err(Error::Format("checkpoint manifest does not describe a supported model".into()));
        }
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        if bytes.len() != 8 * shape.parameter_count {
            return Err(Error::Format(format!(
                "parameter file holds {} bytes, manifest expects {}",
                bytes.len(),
                8 * shape.parameter_count
            )));
        }
        let flat: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        model.set_parameters(&flat)?;
        Ok(model)
    }
}

pub(crate) fn mean_squared(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.iter().map(|v| v * v).sum::<f64>() / m.len() as f64
}
