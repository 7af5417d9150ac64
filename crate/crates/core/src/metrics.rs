//! Quality and cost metrics: Gaussian fits, the Fréchet distance between
//! them, and aggregation of per-chain timings.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{spd_sqrt, Point, SpdMatrix};

/// Ridge added to fitted covariances.
pub const COV_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianSummary {
    pub mean: Point,
    pub cov: SpdMatrix,
    /// Sample count, or `None` for a summary built from exact moments.
    pub n: Option<usize>,
}

impl GaussianSummary {
    pub fn from_moments(mean: Point, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                got: cov.nrows(),
            });
        }
        Ok(Self {
            mean,
            cov: SpdMatrix::new(cov)?,
            n: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased covariance (plus `COV_RIDGE * I`).
pub fn fit_gaussian(samples: &[Point]) -> Result<GaussianSummary> {
    if samples.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: samples.len(),
        });
    }
    let dim = samples[0].len();
    if let Some(bad) = samples.iter().find(|s| s.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: bad.len(),
        });
    }
    let n = samples.len() as f64;
    let mut mean = Point::zeros(dim);
    for s in samples {
        mean += s;
    }
    mean /= n;
    let mut cov = DMatrix::zeros(dim, dim);
    for s in samples {
        let d = s - &mean;
        cov += &d * d.transpose();
    }
    cov /= n - 1.0;
    cov += DMatrix::identity(dim, dim) * COV_RIDGE;
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianSummary {
        mean,
        cov: SpdMatrix::new(cov)?,
        n: Some(samples.len()),
    })
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})`, with the trace of the
/// root taken through the symmetric product `S_a^{1/2} S_b S_a^{1/2}`.
pub fn frechet_distance(a: &GaussianSummary, b: &GaussianSummary) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::InvalidArgument(format!(
            "cannot compare summaries of dimension {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    let root_a = a.cov.sqrt()?;
    let inner = root_a.matrix() * b.cov.matrix() * root_a.matrix();
    let inner = (&inner + inner.transpose()) * 0.5;
    let cross = spd_sqrt(&inner)?.matrix().trace();
    let mean_term = (&a.mean - &b.mean).norm_squared();
    let value = mean_term + a.cov.matrix().trace() + b.cov.matrix().trace() - 2.0 * cross;
    Ok(if (-1e-9..0.0).contains(&value) { 0.0 } else { value })
}

/// Wall-clock seconds spent by one chain in each class of substep.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainTiming {
    pub denoiser: f64,
    pub forward_guidance: f64,
    pub backward_guidance: f64,
    pub renoise: f64,
    pub bookkeeping: f64,
    pub total: f64,
}

impl ChainTiming {
    const FIELDS: usize = 6;

    fn to_array(self) -> [f64; Self::FIELDS] {
        [
            self.denoiser,
            self.forward_guidance,
            self.backward_guidance,
            self.renoise,
            self.bookkeeping,
            self.total,
        ]
    }

    fn from_array(a: [f64; Self::FIELDS]) -> Self {
        Self {
            denoiser: a[0],
            forward_guidance: a[1],
            backward_guidance: a[2],
            renoise: a[3],
            bookkeeping: a[4],
            total: a[5],
        }
    }

    /// Closes the books: bookkeeping is whatever `total` the measured classes don't cover.
    pub fn finish(mut self, total: f64) -> Self {
        self.total = total;
        let measured = self.denoiser + self.forward_guidance + self.backward_guidance + self.renoise;
        self.bookkeeping = (total - measured).max(0.0);
        self
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub chains: usize,
    /// Sums over chains; `totals.total` is the wall-clock total.
    pub totals: ChainTiming,
    pub medians: ChainTiming,
}

/// Sums and medians per substep class. Values are sorted before summing, so
/// the result does not depend on the order of `reports`.
pub fn aggregate_timing(reports: &[ChainTiming]) -> TimingReport {
    let mut totals = [0.0; ChainTiming::FIELDS];
    let mut medians = [0.0; ChainTiming::FIELDS];
    for field in 0..ChainTiming::FIELDS {
        let mut values: Vec<f64> = reports.iter().map(|r| r.to_array()[field]).collect();
        values.sort_by(f64::total_cmp);
        totals[field] = values.iter().sum();
        medians[field] = median_sorted(&values);
    }
    TimingReport {
        chains: reports.len(),
        totals: ChainTiming::from_array(totals),
        medians: ChainTiming::from_array(medians),
    }
}

fn median_sorted(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        n if n % 2 == 1 => values[n / 2],
        n => 0.5 * (values[n / 2 - 1] + values[n / 2]),
    }
}
