//! Gaussian-mixture data distributions and their exact denoiser.
//!
//! Under the forward process `z_t = sqrt(abar) z0 + sqrt(1 - abar) eps`, a
//! component `N(mu, Sigma)` becomes `N(sqrt(abar) mu, abar Sigma + (1 - abar) I)`
//! and the conditional law of `z0` given `z_t` stays Gaussian within each
//! component. Everything the sampler needs (responsibilities, `E[z0 | z_t]`,
//! `Cov[z0 | z_t]`, hence `E[eps | z_t]`) is available in closed form.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::math::{NoiseSchedule, Point, RngStream, SpdMatrix, MAX_DIM};

const LN_2PI: f64 = 1.837_877_066_409_345_5;
const WEIGHT_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: Point,
    pub cov: SpdMatrix,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct GaussianMixtureWorld {
    components: Vec<Component>,
    dim: usize,
    cov_roots: Vec<DMatrix<f64>>,
    clean: NoisedMixture,
}

/// Per-component posterior probabilities; nonnegative and summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentPosterior(pub Vec<f64>);

impl ComponentPosterior {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Index of the largest responsibility; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &r) in self.0.iter().enumerate().skip(1) {
            if r > self.0[best] {
                best = i;
            }
        }
        best
    }
}

impl GaussianMixtureWorld {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::InvalidArgument("a world needs at least one component".into()))?;
        let dim = first.mean.len();
        if dim == 0 || dim > MAX_DIM {
            return Err(Error::InvalidArgument(format!(
                "dimension {dim} outside 1..={MAX_DIM}"
            )));
        }
        let mut total = 0.0;
        for (i, c) in components.iter().enumerate() {
            if c.mean.len() != dim || c.cov.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: if c.mean.len() != dim { c.mean.len() } else { c.cov.dim() },
                });
            }
            if !(c.weight > 0.0) || !c.weight.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "component {i} has non-positive weight {}",
                    c.weight
                )));
            }
            if c.mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidArgument(format!("component {i} has a non-finite mean")));
            }
            total += c.weight;
        }
        if (total - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::InvalidArgument(format!(
                "component weights sum to {total}, expected 1"
            )));
        }
        let cov_roots = components
            .iter()
            .map(|c| c.cov.sqrt().map(SpdMatrix::into_inner))
            .collect::<Result<Vec<_>>>()?;
        let clean = NoisedMixture::build(&components, dim, 1.0);
        Ok(Self {
            components,
            dim,
            cov_roots,
            clean,
        })
    }

    /// Equal-weight, unit-covariance components at `(±offset, ±offset)`,
    /// labelled counter-clockwise from the first quadrant.
    pub fn four_corners(offset: f64) -> Result<Self> {
        let corners = [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)];
        let components = corners
            .iter()
            .enumerate()
            .map(|(label, &(sx, sy))| Component {
                weight: 0.25,
                mean: Point::from_vec(vec![sx * offset, sy * offset]),
                cov: SpdMatrix::identity(2),
                label,
            })
            .collect();
        Self::new(components)
    }

    /// The default benchmark world: `four_corners(4.0)`.
    pub fn default_benchmark() -> Self {
        Self::four_corners(4.0).expect("default world is valid")
    }

    /// `N(0, I)` in `dim` dimensions, as a single component with label 0.
    pub fn standard_normal(dim: usize) -> Result<Self> {
        Self::new(vec![Component {
            weight: 1.0,
            mean: Point::zeros(dim),
            cov: SpdMatrix::identity(dim),
            label: 0,
        }])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn has_label(&self, label: usize) -> bool {
        self.components.iter().any(|c| c.label == label)
    }

    pub fn check_label(&self, label: usize) -> Result<()> {
        if self.has_label(label) {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("world has no component labelled {label}")))
        }
    }

    pub fn labels(&self) -> Vec<usize> {
        let mut labels: Vec<usize> = self.components.iter().map(|c| c.label).collect();
        labels.sort_unstable();
        labels.dedup();
        labels
    }

    /// Mean and covariance of the sub-mixture formed by the components carrying `label`.
    pub fn label_moments(&self, label: usize) -> Result<(Point, DMatrix<f64>)> {
        self.check_label(label)?;
        let members: Vec<&Component> = self.components.iter().filter(|c| c.label == label).collect();
        let mass: f64 = members.iter().map(|c| c.weight).sum();
        let mut mean = Point::zeros(self.dim);
        for c in &members {
            mean += &c.mean * (c.weight / mass);
        }
        let mut cov = DMatrix::zeros(self.dim, self.dim);
        for c in &members {
            let d = &c.mean - &mean;
            cov += (c.cov.matrix() + &d * d.transpose()) * (c.weight / mass);
        }
        Ok((mean, cov))
    }

    /// `n` i.i.d. draws with the index of the component each came from.
    pub fn sample_prior(&self, rng: &mut RngStream, n: usize) -> Result<Vec<(Point, usize)>> {
        if n == 0 {
            return Err(Error::InvalidArgument("sample_prior needs n >= 1".into()));
        }
        Ok((0..n).map(|_| self.sample_one(rng)).collect())
    }

    fn sample_one(&self, rng: &mut RngStream) -> (Point, usize) {
        let u = rng.next_open01();
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (i, c) in self.components.iter().enumerate() {
            acc += c.weight;
            if u <= acc {
                pick = i;
                break;
            }
        }
        let g = rng.gaussian(self.dim);
        let comp = &self.components[pick];
        (&comp.mean + &self.cov_roots[pick] * g, comp.label)
    }

    /// The mixture seen through the forward process at signal level `abar`.
    pub fn at_noise(&self, abar: f64) -> Result<NoisedMixture> {
        if !(abar > 0.0 && abar <= 1.0) {
            return Err(Error::InvalidArgument(format!("abar={abar} outside (0, 1]")));
        }
        if abar == 1.0 {
            return Ok(self.clean.clone());
        }
        Ok(NoisedMixture::build(&self.components, self.dim, abar))
    }

    /// Responsibilities under the noised marginal at `abar`.
    pub fn component_posteriors(&self, z: &Point, abar: f64) -> Result<ComponentPosterior> {
        self.check_dim(z)?;
        Ok(self.at_noise(abar)?.responsibilities(z))
    }

    /// `E[z0 | z_t]`.
    pub fn posterior_mean_z0(&self, z_t: &Point, abar: f64) -> Result<Point> {
        self.check_dim(z_t)?;
        Ok(self.at_noise(abar)?.posterior_mean(z_t))
    }

    /// `E[eps | z_t]` at step `t` of `schedule` (legal for `1 <= t <= T`).
    pub fn exact_epsilon(&self, z_t: &Point, t: usize, schedule: &NoiseSchedule) -> Result<Point> {
        schedule.check_step(t)?;
        self.check_dim(z_t)?;
        Ok(self.at_noise(schedule.abar(t))?.epsilon(z_t))
    }

    /// Clean-data responsibilities (`abar = 1`).
    pub fn clean_posteriors(&self, x: &Point) -> ComponentPosterior {
        self.clean.responsibilities(x)
    }

    /// Label of the component with the largest clean responsibility.
    pub fn classify(&self, x: &Point) -> usize {
        self.components[self.clean.responsibilities(x).argmax()].label
    }

    /// `-log P(label | x)` at `abar = 1` and its gradient in `x`.
    pub fn class_nll(&self, x: &Point, label: usize) -> Result<(f64, Point)> {
        self.check_dim(x)?;
        self.check_label(label)?;
        let logs = self.clean.log_joint(x);
        let pick = |mine: bool| {
            logs.iter()
                .zip(&self.components)
                .filter(move |(_, c)| (c.label == label) == mine)
                .map(|(&l, _)| l)
        };
        let mine = log_sum_exp(pick(true));
        let other = log_sum_exp(pick(false));
        // -log P(label | x) = softplus(other - mine), exact even when tiny
        let a = other - mine;
        let value = if a > 0.0 { a + (-a).exp().ln_1p() } else { a.exp().ln_1p() };
        let p_other = if a > 0.0 { 1.0 / (1.0 + (-a).exp()) } else { a.exp() / (1.0 + a.exp()) };
        // d/dx log p_i(x) = -Sigma_i^{-1} (x - mu_i); the weight of component i is
        // P(i | x) - P(i | x, label), which factors through P(not label | x)
        let mut grad = Point::zeros(self.dim);
        for ((&l, c), term) in logs.iter().zip(&self.components).zip(&self.clean.terms) {
            let weight = if c.label == label {
                -(l - mine).exp() * p_other
            } else {
                (l - other).exp() * p_other
            };
            if weight != 0.0 {
                grad -= &term.precision * (x - &c.mean) * weight;
            }
        }
        Ok((value, grad))
    }

    /// Fraction of `samples` whose most responsible component carries `target_label`.
    pub fn consistency(&self, samples: &[Point], target_label: usize) -> Result<f64> {
        self.check_label(target_label)?;
        if samples.is_empty() {
            return Err(Error::InvalidArgument("consistency needs at least one sample".into()));
        }
        let hits = samples
            .iter()
            .filter(|x| self.classify(x) == target_label)
            .count();
        Ok(hits as f64 / samples.len() as f64)
    }

    fn check_dim(&self, z: &Point) -> Result<()> {
        if z.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: z.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct NoisedTerm {
    shifted_mean: Point,
    mean: Point,
    log_norm: f64,
    precision: DMatrix<f64>,
    gain: DMatrix<f64>,
    post_cov: DMatrix<f64>,
}

/// A world's component terms precomputed at one noise level.
#[derive(Debug, Clone)]
pub struct NoisedMixture {
    abar: f64,
    dim: usize,
    terms: Vec<NoisedTerm>,
}

/// Full conditional law of `z0` given `z_t`, per component.
#[derive(Debug, Clone)]
pub struct Posterior {
    pub responsibilities: ComponentPosterior,
    pub component_means: Vec<Point>,
    pub mean: Point,
}

impl NoisedMixture {
    fn build(components: &[Component], dim: usize, abar: f64) -> Self {
        let root = abar.sqrt();
        let eye = DMatrix::<f64>::identity(dim, dim);
        let terms = components
            .iter()
            .map(|c| {
                let sigma = c.cov.matrix();
                let marginal = sigma * abar + &eye * (1.0 - abar);
                let chol = marginal
                    .clone()
                    .cholesky()
                    .expect("abar*Sigma + (1-abar)*I is SPD for SPD Sigma");
                let log_det = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                let precision = chol.inverse();
                let precision = (&precision + precision.transpose()) * 0.5;
                let gain = sigma * &precision * root;
                let post_cov = sigma - &gain * sigma * root;
                NoisedTerm {
                    shifted_mean: &c.mean * root,
                    mean: c.mean.clone(),
                    log_norm: c.weight.ln() - 0.5 * log_det - 0.5 * dim as f64 * LN_2PI,
                    precision,
                    gain,
                    post_cov: (&post_cov + post_cov.transpose()) * 0.5,
                }
            })
            .collect();
        Self { abar, dim, terms }
    }

    pub fn abar(&self) -> f64 {
        self.abar
    }

    /// `log w_i + log N(z; sqrt(abar) mu_i, abar Sigma_i + (1 - abar) I)` per component.
    pub fn log_joint(&self, z: &Point) -> Vec<f64> {
        self.terms
            .iter()
            .map(|term| {
                let r = z - &term.shifted_mean;
                term.log_norm - 0.5 * r.dot(&(&term.precision * &r))
            })
            .collect()
    }

    pub fn responsibilities(&self, z: &Point) -> ComponentPosterior {
        ComponentPosterior(normalize_log_weights(self.log_joint(z)))
    }

    pub fn posterior(&self, z: &Point) -> Posterior {
        let responsibilities = self.responsibilities(z);
        let component_means: Vec<Point> = self
            .terms
            .iter()
            .map(|term| &term.mean + &term.gain * (z - &term.shifted_mean))
            .collect();
        let mut mean = Point::zeros(self.dim);
        for (r, m) in responsibilities.0.iter().zip(&component_means) {
            mean += m * *r;
        }
        Posterior {
            responsibilities,
            component_means,
            mean,
        }
    }

    /// `E[z0 | z]`.
    pub fn posterior_mean(&self, z: &Point) -> Point {
        self.posterior(z).mean
    }

    /// `E[eps | z] = (z - sqrt(abar) E[z0 | z]) / sqrt(1 - abar)`; requires `abar < 1`.
    pub fn epsilon(&self, z: &Point) -> Point {
        let z0 = self.posterior_mean(z);
        (z - z0 * self.abar.sqrt()) / (1.0 - self.abar).sqrt()
    }

    /// `Cov[z0 | z]` from the per-component Gaussian posteriors.
    pub fn posterior_cov(&self, posterior: &Posterior) -> DMatrix<f64> {
        let mut second = DMatrix::zeros(self.dim, self.dim);
        for ((r, m), term) in posterior
            .responsibilities
            .0
            .iter()
            .zip(&posterior.component_means)
            .zip(&self.terms)
        {
            second += (&term.post_cov + m * m.transpose()) * *r;
        }
        let cov = second - &posterior.mean * posterior.mean.transpose();
        (&cov + cov.transpose()) * 0.5
    }

    /// Jacobian of `z -> E[z0 | z]`, equal to `sqrt(abar) / (1 - abar) * Cov[z0 | z]`
    /// (symmetric). Requires `abar < 1`.
    pub fn mean_jacobian(&self, z: &Point) -> DMatrix<f64> {
        let posterior = self.posterior(z);
        self.posterior_cov(&posterior) * (self.abar.sqrt() / (1.0 - self.abar))
    }
}

/// The exact mixture denoiser with every noise level of a schedule precomputed.
#[derive(Debug, Clone)]
pub struct ExactDenoiser {
    levels: Vec<NoisedMixture>,
    noise: NoiseSchedule,
}

impl ExactDenoiser {
    pub fn new(world: &GaussianMixtureWorld, noise: &NoiseSchedule) -> Result<Self> {
        let levels = noise
            .as_slice()
            .iter()
            .map(|&abar| world.at_noise(abar))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            levels,
            noise: noise.clone(),
        })
    }

    pub fn noise(&self) -> &NoiseSchedule {
        &self.noise
    }

    /// Precomputed terms at step `t` (`t = 0` is the clean distribution).
    pub fn level(&self, t: usize) -> &NoisedMixture {
        &self.levels[t]
    }

    /// `E[eps | z_t]`, for `1 <= t <= T`.
    pub fn epsilon(&self, z_t: &Point, t: usize) -> Point {
        debug_assert!(t >= 1);
        self.levels[t].epsilon(z_t)
    }
}

pub(crate) fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn normalize_log_weights(mut logs: Vec<f64>) -> Vec<f64> {
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        log::warn!("all component densities underflowed; falling back to uniform responsibilities");
        let n = logs.len() as f64;
        return vec![1.0 / n; logs.len()];
    }
    let mut total = 0.0;
    for v in logs.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in logs.iter_mut() {
        *v /= total;
    }
    logs
}
