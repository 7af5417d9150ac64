//! Guided-step training tuples and their on-disk format.
//!
//! File layout (all integers and floats little-endian):
//!
//! ```text
//! header   magic     8 bytes  "GLTRAJ\0\0"
//!          version   u32      = 1
//!          dim       u32      sample dimension d
//!          prompt    u32      prompt embedding length e
//!          steps     u32      T of the generating run
//!          schedule  u32      0 = cosine, 1 = linear
//!          seed      u64      seed of the generating run
//!          count     u64      number of records
//! record   chain_id  u64
//!          counter   u64      stream position at the start of the step
//!          t         u32
//!          z_in      d x f64
//!          eps_in    d x f64
//!          prompt    e x f64
//!          z_out     d x f64
//! ```

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::guidance::{EmbeddingMap, GuidanceSchedule};
use crate::math::{Point, ScheduleKind};
use crate::sampler::{GuidedSampler, SamplerConfig};
use crate::world::GaussianMixtureWorld;

use super::mlp::Batch;

pub const MAGIC: [u8; 8] = *b"GLTRAJ\0\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub chain_id: u64,
    pub rng_counter: u64,
    pub t: usize,
    pub z_in: Point,
    pub eps_in: Point,
    /// Embedding of the prompt active at this step (zeros when guidance is off).
    pub prompt_embedding: Point,
    pub z_out: Point,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetHeader {
    pub dim: usize,
    pub prompt_dim: usize,
    pub steps: usize,
    pub schedule_kind: ScheduleKind,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryDataset {
    pub header: DatasetHeader,
    pub records: Vec<TrajectoryRecord>,
}

impl TrajectoryDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let h = &self.header;
        for r in &self.records {
            let shapes = [(r.z_in.len(), h.dim), (r.eps_in.len(), h.dim), (r.z_out.len(), h.dim), (r.prompt_embedding.len(), h.prompt_dim)];
            if let Some(&(got, expected)) = shapes.iter().find(|(g, e)| g != e) {
                return Err(Error::DimensionMismatch { expected, got });
            }
            if r.t == 0 || r.t > h.steps {
                return Err(Error::Format(format!("record step {} outside 1..={}", r.t, h.steps)));
            }
            let finite = [&r.z_in, &r.eps_in, &r.prompt_embedding, &r.z_out]
                .iter()
                .all(|v| v.iter().all(|x| x.is_finite()));
            if !finite {
                return Err(Error::Format(format!(
                    "non-finite record for chain {} at t={}",
                    r.chain_id, r.t
                )));
            }
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, out: W) -> Result<()> {
        self.validate()?;
        let mut out = BufWriter::new(out);
        let h = &self.header;
        out.write_all(&MAGIC)?;
        for v in [FORMAT_VERSION, h.dim as u32, h.prompt_dim as u32, h.steps as u32, schedule_code(h.schedule_kind)] {
            out.write_all(&v.to_le_bytes())?;
        }
        out.write_all(&h.seed.to_le_bytes())?;
        out.write_all(&(self.records.len() as u64).to_le_bytes())?;
        for r in &self.records {
            out.write_all(&r.chain_id.to_le_bytes())?;
            out.write_all(&r.rng_counter.to_le_bytes())?;
            out.write_all(&(r.t as u32).to_le_bytes())?;
            for v in [&r.z_in, &r.eps_in, &r.prompt_embedding, &r.z_out] {
                for x in v.iter() {
                    out.write_all(&x.to_le_bytes())?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(input: R) -> Result<Self> {
        let mut input = BufReader::new(input);
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(Error::Format("not a trajectory dataset (bad magic)".into()));
        }
        let version = read_u32(&mut input)?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let dim = read_u32(&mut input)? as usize;
        let prompt_dim = read_u32(&mut input)? as usize;
        let steps = read_u32(&mut input)? as usize;
        let schedule_kind = match read_u32(&mut input)? {
            0 => ScheduleKind::Cosine,
            1 => ScheduleKind::Linear,
            other => return Err(Error::Format(format!("unknown schedule code {other}"))),
        };
        let seed = read_u64(&mut input)?;
        let count = read_u64(&mut input)?;
        let header = DatasetHeader { dim, prompt_dim, steps, schedule_kind, seed };
        let mut records = Vec::with_capacity(count.min(1 << 24) as usize);
        for _ in 0..count {
            let chain_id = read_u64(&mut input)?;
            let rng_counter = read_u64(&mut input)?;
            let t = read_u32(&mut input)? as usize;
            let z_in = read_point(&mut input, dim)?;
            let eps_in = read_point(&mut input, dim)?;
            let prompt_embedding = read_point(&mut input, prompt_dim)?;
            let z_out = read_point(&mut input, dim)?;
            records.push(TrajectoryRecord { chain_id, rng_counter, t, z_in, eps_in, prompt_embedding, z_out });
        }
        let mut trailing = [0u8; 1];
        if input.read(&mut trailing)? != 0 {
            return Err(Error::Format("trailing bytes after the last record".into()));
        }
        let data = Self { header, records };
        data.validate()?;
        Ok(data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }

    /// Model inputs and targets for the records at `indices`.
    pub fn batch(&self, indices: &[usize]) -> (Batch, DMatrix<f64>) {
        let (d, e) = (self.header.dim, self.header.prompt_dim);
        let n = indices.len();
        let mut batch = Batch {
            z_in: DMatrix::zeros(n, d),
            eps_in: DMatrix::zeros(n, d),
            t: Vec::with_capacity(n),
            prompt: DMatrix::zeros(n, e),
        };
        let mut target = DMatrix::zeros(n, d);
        for (row, &i) in indices.iter().enumerate() {
            let r = &self.records[i];
            batch.z_in.set_row(row, &r.z_in.transpose());
            batch.eps_in.set_row(row, &r.eps_in.transpose());
            batch.prompt.set_row(row, &r.prompt_embedding.transpose());
            batch.t.push(r.t);
            target.set_row(row, &r.z_out.transpose());
        }
        (batch, target)
    }
}

fn schedule_code(kind: ScheduleKind) -> u32 {
    match kind {
        ScheduleKind::Cosine => 0,
        ScheduleKind::Linear => 1,
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_point<R: Read>(r: &mut R, dim: usize) -> Result<Point> {
    let mut out = Point::zeros(dim);
    let mut b = [0u8; 8];
    for i in 0..dim {
        r.read_exact(&mut b)?;
        out[i] = f64::from_le_bytes(b);
    }
    Ok(out)
}

/// Runs the guided sampler with traces on and keeps one record per
/// `(chain, step)` of every chain that completed.
pub fn collect_trajectories(
    config: &SamplerConfig,
    world: &GaussianMixtureWorld,
    schedule: &GuidanceSchedule,
    map: &EmbeddingMap,
) -> Result<TrajectoryDataset> {
    let config = SamplerConfig { record_traces: true, ..config.clone() };
    let sampler = GuidedSampler::new(&config, world, schedule, map)?;
    let run = sampler.run();
    if !run.failures.is_empty() {
        log::warn!("{} chains aborted and contribute no records", run.failures.len());
    }
    let total = config.steps;
    let mut prompts = Vec::with_capacity(total + 1);
    prompts.push(Point::zeros(map.embed_dim()));
    for t in 1..=total {
        prompts.push(match schedule.active_prompt(t, total) {
            Some(p) => p.embedding_vector(map, world)?,
            None => Point::zeros(map.embed_dim()),
        });
    }
    let records = run
        .traces
        .into_iter()
        .flat_map(|trace| {
            let chain_id = trace.chain_id;
            let prompts = &prompts;
            trace.steps.into_iter().map(move |s| TrajectoryRecord {
                chain_id,
                rng_counter: s.rng_counter,
                t: s.t,
                z_in: s.z_in,
                eps_in: s.eps_hat,
                prompt_embedding: prompts[s.t].clone(),
                z_out: s.z_out,
            })
        })
        .collect();
    Ok(TrajectoryDataset {
        header: DatasetHeader {
            dim: config.dim,
            prompt_dim: map.embed_dim(),
            steps: total,
            schedule_kind: config.schedule_kind,
            seed: config.seed,
        },
        records,
    })
}

/// [`collect_trajectories`] followed by a write to `out_path`; returns the record count.
pub fn dump_trajectories(
    config: &SamplerConfig,
    world: &GaussianMixtureWorld,
    schedule: &GuidanceSchedule,
    map: &EmbeddingMap,
    out_path: &Path,
) -> Result<usize> {
    let data = collect_trajectories(config, world, schedule, map)?;
    data.save(out_path)?;
    Ok(data.len())
}
