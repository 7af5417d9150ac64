//! Guidance losses, the forward and backward guidance transforms, and the
//! time-window policy that decides which prompt (if any) steers each step.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{NoiseSchedule, Point, RngStream};
use crate::world::{ExactDenoiser, GaussianMixtureWorld};

/// Default embedding width (rows of the map).
pub const EMBED_DIM: usize = 8;

/// Fixed linear embedding `h(x) = W x` standing in for an image encoder.
///
/// Entries are seeded standard normals; the thin side is orthonormalized,
/// so for `e >= d` the map is an isometry onto its range.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMap {
    matrix: DMatrix<f64>,
}

impl EmbeddingMap {
    pub fn from_seed(seed: u64, embed_dim: usize, dim: usize) -> Result<Self> {
        if embed_dim == 0 || dim == 0 {
            return Err(Error::InvalidArgument("embedding dimensions must be positive".into()));
        }
        let mut rng = RngStream::new(seed, u64::MAX);
        let draws: Vec<f64> = (0..embed_dim * dim).map(|_| rng.gaussian(1)[0]).collect();
        let raw = DMatrix::from_row_slice(embed_dim, dim, &draws);
        let matrix = if embed_dim >= dim {
            raw.qr().q()
        } else {
            raw.transpose().qr().q().transpose()
        };
        Ok(Self { matrix })
    }

    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self> {
        let rank = matrix.rank(1e-10);
        if rank < matrix.nrows().min(matrix.ncols()) {
            return Err(Error::InvalidArgument(format!(
                "embedding map must have full rank, got rank {rank}"
            )));
        }
        Ok(Self { matrix })
    }

    pub fn embed_dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn embed(&self, x: &Point) -> Point {
        &self.matrix * x
    }

    /// Unit-norm embedding of the mean of the components labelled `label`.
    pub fn class_embedding(&self, world: &GaussianMixtureWorld, label: usize) -> Result<Point> {
        let (mean, _) = world.label_moments(label)?;
        let e = self.embed(&mean);
        let norm = e.norm();
        if norm == 0.0 {
            return Err(Error::DegenerateInput(format!(
                "class {label} has its mean at the origin; its embedding has no direction"
            )));
        }
        Ok(e / norm)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PromptTarget {
    /// Unit vector in embedding space; loss is the negative cosine similarity.
    Embedding(Point),
    /// Class label; loss is the negative log clean-data responsibility.
    Class(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidancePrompt {
    pub target: PromptTarget,
    pub strength: f64,
}

impl GuidancePrompt {
    pub fn class(label: usize, strength: f64) -> Result<Self> {
        check_strength(strength)?;
        Ok(Self {
            target: PromptTarget::Class(label),
            strength,
        })
    }

    /// Normalizes `target` to unit length.
    pub fn embedding(target: Point, strength: f64) -> Result<Self> {
        check_strength(strength)?;
        let norm = target.norm();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::DegenerateInput("embedding target has no direction".into()));
        }
        Ok(Self {
            target: PromptTarget::Embedding(target / norm),
            strength,
        })
    }

    /// A zero-strength prompt steers nothing; the sampler treats it as inactive.
    pub fn is_null(&self) -> bool {
        self.strength == 0.0
    }

    /// Embedding-space description of the prompt (what a learned model is conditioned on).
    pub fn embedding_vector(&self, map: &EmbeddingMap, world: &GaussianMixtureWorld) -> Result<Point> {
        match &self.target {
            PromptTarget::Embedding(v) => Ok(v.clone()),
            PromptTarget::Class(label) => map.class_embedding(world, *label),
        }
    }

    pub fn validate(&self, map: &EmbeddingMap, world: &GaussianMixtureWorld) -> Result<()> {
        match &self.target {
            PromptTarget::Class(label) => world.check_label(*label),
            PromptTarget::Embedding(v) if v.len() != map.embed_dim() => Err(Error::DimensionMismatch {
                expected: map.embed_dim(),
                got: v.len(),
            }),
            PromptTarget::Embedding(_) => Ok(()),
        }
    }
}

fn check_strength(strength: f64) -> Result<()> {
    if !(strength >= 0.0) || !strength.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "guidance strength must be finite and >= 0, got {strength}"
        )));
    }
    Ok(())
}

/// A differentiable loss on the clean-space estimate.
pub trait GuidanceLoss {
    /// Loss value and its gradient with respect to `x`.
    fn evaluate(&self, x: &Point) -> Result<(f64, Point)>;
}

/// `l(c, h(x))` for a prompt.
#[derive(Debug, Clone, Copy)]
pub struct PromptLoss<'a> {
    pub prompt: &'a GuidancePrompt,
    pub map: &'a EmbeddingMap,
    pub world: &'a GaussianMixtureWorld,
}

impl GuidanceLoss for PromptLoss<'_> {
    fn evaluate(&self, x: &Point) -> Result<(f64, Point)> {
        guidance_loss(self.prompt, self.map, self.world, x)
    }
}

pub fn guidance_loss(
    prompt: &GuidancePrompt,
    map: &EmbeddingMap,
    world: &GaussianMixtureWorld,
    z0hat: &Point,
) -> Result<(f64, Point)> {
    if z0hat.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("guidance loss evaluated at a non-finite point".into()));
    }
    match &prompt.target {
        PromptTarget::Class(label) => world.class_nll(z0hat, *label),
        PromptTarget::Embedding(target) => {
            let u = map.embed(z0hat);
            let norm = u.norm();
            if norm == 0.0 {
                return Err(Error::DegenerateInput(
                    "embedding of the clean estimate is zero; cosine is undefined".into(),
                ));
            }
            let cos = u.dot(target) / norm;
            // d cos / du = target/|u| - cos * u/|u|^2
            let d_cos = (target - &u * (cos / norm)) / norm;
            Ok((-cos, -(map.matrix().transpose() * d_cos)))
        }
    }
}

/// How the loss gradient reaches `z_t` from the clean estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientPath {
    /// Treat the noise prediction as constant: `d z0hat / d z_t = I / sqrt(abar)`.
    FrozenEpsilon,
    /// Differentiate through the exact denoiser: `d z0hat / d z_t = sqrt(abar)/(1-abar) Cov[z0 | z_t]`.
    #[default]
    ThroughDenoiser,
}

/// Clean-space estimate implied by a noise prediction.
#[inline]
pub fn clean_estimate(z_t: &Point, eps: &Point, abar: f64) -> Point {
    (z_t - eps * (1.0 - abar).sqrt()) / abar.sqrt()
}

/// `eps~ = eps^ + s * sqrt(1 - abar_t) * grad_{z_t} l(c, z0hat(z_t))`.
pub fn forward_guidance<L: GuidanceLoss + ?Sized>(
    loss: &L,
    strength: f64,
    eps_hat: &Point,
    z_t: &Point,
    t: usize,
    denoiser: &ExactDenoiser,
    path: GradientPath,
) -> Result<Point> {
    denoiser.noise().check_step(t)?;
    if strength == 0.0 {
        return Ok(eps_hat.clone());
    }
    let abar = denoiser.noise().abar(t);
    let z0 = clean_estimate(z_t, eps_hat, abar);
    let (_, grad) = loss.evaluate(&z0)?;
    let grad_z = match path {
        GradientPath::FrozenEpsilon => grad / abar.sqrt(),
        GradientPath::ThroughDenoiser => denoiser.level(t).mean_jacobian(z_t).transpose() * grad,
    };
    Ok(eps_hat + grad_z * (strength * (1.0 - abar).sqrt()))
}

/// `m` plain gradient-descent steps on `delta -> l(z0hat + delta)` from zero.
pub fn backward_guidance<L: GuidanceLoss + ?Sized>(
    loss: &L,
    z0hat: &Point,
    steps: usize,
    lr: f64,
) -> Result<Point> {
    if !(lr > 0.0) {
        return Err(Error::InvalidArgument(format!("backward learning rate must be > 0, got {lr}")));
    }
    let mut delta = Point::zeros(z0hat.len());
    for step in 0..steps {
        let (value, grad) = loss.evaluate(&(z0hat + &delta)).map_err(|e| Error::Diverged {
            step,
            what: e.to_string(),
        })?;
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                step,
                what: format!("loss {value} or its gradient is not finite"),
            });
        }
        delta -= grad * lr;
    }
    Ok(delta)
}

/// Translates a clean-space correction into the noise prediction so that
/// `clean_estimate(z_t, eps', t) = clean_estimate(z_t, eps~, t) + delta`.
pub fn apply_backward_to_eps(
    eps_tilde: &Point,
    delta: &Point,
    t: usize,
    noise: &NoiseSchedule,
) -> Result<Point> {
    noise.check_step(t)?;
    if delta.iter().all(|&d| d == 0.0) {
        return Ok(eps_tilde.clone());
    }
    let abar = noise.abar(t);
    Ok(eps_tilde - delta * (abar / (1.0 - abar)).sqrt())
}

/// When guidance is active over the reverse trajectory.
///
/// Progress is `q = (T - t) / T`: zero at the first reverse step.
#[derive(Debug, Clone, PartialEq)]
pub enum Window {
    Always,
    /// Active while `q < p`.
    OnThenOff(f64),
    /// Active once `q >= p`.
    OffThenOn(f64),
    /// The schedule's prompt while `q < p`, then `then`.
    Switch { p: f64, then: GuidancePrompt },
}

impl Window {
    /// Ablation sign convention: positive `p` starts unguided and switches
    /// guidance on after fraction `p`; negative `p` starts guided and switches
    /// off after `|p|`; `0` and `-1` both mean guidance throughout.
    pub fn from_signed(p: f64) -> Result<Self> {
        if !(-1.0..=1.0).contains(&p) {
            return Err(Error::InvalidArgument(format!("signed ablation fraction {p} outside [-1, 1]")));
        }
        Ok(if p == 0.0 || p == -1.0 {
            Window::Always
        } else if p > 0.0 {
            Window::OffThenOn(p)
        } else {
            Window::OnThenOff(-p)
        })
    }

    fn fraction(&self) -> Option<f64> {
        match self {
            Window::Always => None,
            Window::OnThenOff(p) | Window::OffThenOn(p) | Window::Switch { p, .. } => Some(*p),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceSchedule {
    pub prompt: GuidancePrompt,
    pub window: Window,
    /// Self-recurrence rounds per step (`k`).
    pub recurrence: usize,
    /// Backward-guidance gradient steps per round (`m`).
    pub backward_steps: usize,
    pub backward_lr: f64,
    pub gradient_path: GradientPath,
}

impl GuidanceSchedule {
    pub fn new(prompt: GuidancePrompt, window: Window, recurrence: usize, backward_steps: usize) -> Result<Self> {
        let schedule = Self {
            prompt,
            window,
            recurrence,
            backward_steps,
            backward_lr: DEFAULT_BACKWARD_LR,
            gradient_path: GradientPath::default(),
        };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn with_backward_lr(mut self, lr: f64) -> Result<Self> {
        self.backward_lr = lr;
        self.validate()?;
        Ok(self)
    }

    pub fn with_gradient_path(mut self, path: GradientPath) -> Self {
        self.gradient_path = path;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.recurrence == 0 {
            return Err(Error::InvalidArgument("recurrence count k must satisfy k >= 1".into()));
        }
        if !(self.backward_lr > 0.0) || !self.backward_lr.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "backward learning rate must be > 0, got {}",
                self.backward_lr
            )));
        }
        if let Some(p) = self.window.fraction() {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("window fraction p={p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// The prompt governing step `t` of `total` steps, or `None` when guidance is off.
    pub fn query(&self, t: usize, total: usize) -> Option<&GuidancePrompt> {
        debug_assert!(t >= 1 && t <= total);
        let q = (total - t) as f64 / total as f64;
        match &self.window {
            Window::Always => Some(&self.prompt),
            Window::OnThenOff(p) => (q < *p).then_some(&self.prompt),
            Window::OffThenOn(p) => (q >= *p).then_some(&self.prompt),
            Window::Switch { p, then } => Some(if q < *p { &self.prompt } else { then }),
        }
    }

    /// Like [`GuidanceSchedule::query`] but also drops zero-strength prompts.
    pub fn active_prompt(&self, t: usize, total: usize) -> Option<&GuidancePrompt> {
        self.query(t, total).filter(|p| !p.is_null())
    }
}

pub const DEFAULT_STRENGTH: f64 = 0.2;
pub const DEFAULT_BACKWARD_LR: f64 = 1e-3;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::ScheduleKind;

    struct Quadratic(Point);

    impl GuidanceLoss for Quadratic {
        fn evaluate(&self, x: &Point) -> Result<(f64, Point)> {
            let d = x - &self.0;
            Ok((0.5 * d.norm_squared(), d))
        }
    }

    fn p(v: &[f64]) -> Point {
        Point::from_column_slice(v)
    }

    fn setup() -> (GaussianMixtureWorld, EmbeddingMap, ExactDenoiser) {
        let world = GaussianMixtureWorld::default_benchmark();
        let map = EmbeddingMap::from_seed(3, EMBED_DIM, 2).unwrap();
        let noise = NoiseSchedule::new(50, ScheduleKind::Cosine).unwrap();
        let den = ExactDenoiser::new(&world, &noise).unwrap();
        (world, map, den)
    }

    #[test]
    fn map_is_an_isometry() {
        let map = EmbeddingMap::from_seed(9, 8, 2).unwrap();
        let gram = map.matrix().transpose() * map.matrix();
        assert!((gram - DMatrix::identity(2, 2)).amax() < 1e-12);
        assert_eq!(map, EmbeddingMap::from_seed(9, 8, 2).unwrap());
    }

    #[test]
    fn cosine_optimum_and_orthogonal() {
        let (world, map, _) = setup();
        let x = p(&[1.0, 2.0]);
        let prompt = GuidancePrompt::embedding(map.embed(&x) * 3.0, 1.0).unwrap();
        let (v, g) = guidance_loss(&prompt, &map, &world, &x).unwrap();
        assert!((v + 1.0).abs() < 1e-14);
        assert!(g.amax() < 1e-14);
        // orthogonal target in embedding space
        let ortho = map.embed(&p(&[-2.0, 1.0]));
        let prompt = GuidancePrompt::embedding(ortho, 1.0).unwrap();
        let (v, g) = guidance_loss(&prompt, &map, &world, &x).unwrap();
        assert!(v.abs() < 1e-14);
        // scale invariance: gradient is orthogonal to the embedding ray of x
        assert!(g.dot(&x).abs() < 1e-14);
    }

    #[test]
    fn cosine_rejects_zero_embedding() {
        let (world, map, _) = setup();
        let prompt = GuidancePrompt::embedding(p(&[1.0; 8]), 1.0).unwrap();
        assert!(matches!(
            guidance_loss(&prompt, &map, &world, &p(&[0.0, 0.0])),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn zero_strength_is_identity() {
        let (world, map, den) = setup();
        let prompt = GuidancePrompt::class(0, 0.0).unwrap();
        let loss = PromptLoss { prompt: &prompt, map: &map, world: &world };
        let eps = p(&[0.3, -0.7]);
        let z = p(&[0.1, 0.2]);
        for path in [GradientPath::FrozenEpsilon, GradientPath::ThroughDenoiser] {
            let out = forward_guidance(&loss, 0.0, &eps, &z, 10, &den, path).unwrap();
            assert_eq!(out, eps);
        }
    }

    #[test]
    fn zero_gradient_leaves_eps() {
        let (_, _, den) = setup();
        let eps = p(&[0.3, -0.7]);
        let z = p(&[0.5, 0.2]);
        let t = 20;
        let anchor = clean_estimate(&z, &eps, den.noise().abar(t));
        let out = forward_guidance(&Quadratic(anchor), 2.0, &eps, &z, t, &den, GradientPath::FrozenEpsilon)
            .unwrap();
        assert!((out - &eps).amax() < 1e-12);
    }

    #[test]
    fn frozen_path_quadratic_closed_form_and_fd() {
        let (_, _, den) = setup();
        let a = p(&[1.0, -2.0]);
        let eps = p(&[0.4, 0.1]);
        let z = p(&[0.7, -0.3]);
        let s = 1.5;
        for t in [1, 10, 25, 50] {
            let abar = den.noise().abar(t);
            let out = forward_guidance(&Quadratic(a.clone()), s, &eps, &z, t, &den, GradientPath::FrozenEpsilon)
                .unwrap();
            let z0 = clean_estimate(&z, &eps, abar);
            let want = (&z0 - &a) * (s * (1.0 - abar).sqrt() / abar.sqrt());
            assert!(((&out - &eps) - &want).amax() < 1e-9 * want.amax().max(1.0));
            // finite differences of z_t -> l(clean_estimate(z_t, eps)) with eps frozen
            let composed = |zz: &Point| 0.5 * (clean_estimate(zz, &eps, abar) - &a).norm_squared();
            let h = 1e-6;
            for i in 0..2 {
                let mut up = z.clone();
                let mut down = z.clone();
                up[i] += h;
                down[i] -= h;
                let fd = (composed(&up) - composed(&down)) / (2.0 * h);
                let implied = (out[i] - eps[i]) / (s * (1.0 - abar).sqrt());
                assert!((fd - implied).abs() <= 1e-5 * implied.abs().max(1.0), "t={t}");
            }
        }
    }

    #[test]
    fn denoiser_path_matches_fd_of_composed_map() {
        let (world, map, den) = setup();
        let prompt = GuidancePrompt::class(1, 1.0).unwrap();
        let loss = PromptLoss { prompt: &prompt, map: &map, world: &world };
        let mut rng = RngStream::new(5, 0);
        for t in [3, 17, 40] {
            let abar = den.noise().abar(t);
            let z = rng.gaussian(2) * 2.0;
            let eps = den.epsilon(&z, t);
            let out = forward_guidance(&loss, 1.0, &eps, &z, t, &den, GradientPath::ThroughDenoiser).unwrap();
            let implied = (out - &eps) / (1.0 - abar).sqrt();
            let composed = |zz: &Point| {
                let e = den.epsilon(zz, t);
                loss.evaluate(&clean_estimate(zz, &e, abar)).unwrap().0
            };
            let h = 1e-5;
            for i in 0..2 {
                let mut up = z.clone();
                let mut down = z.clone();
                up[i] += h;
                down[i] -= h;
                let fd = (composed(&up) - composed(&down)) / (2.0 * h);
                assert!((fd - implied[i]).abs() <= 1e-5 * implied.amax().max(1e-3), "t={t}: {fd} vs {}", implied[i]);
            }
        }
    }

    #[test]
    fn backward_zero_steps() {
        let d = backward_guidance(&Quadratic(p(&[1.0, 1.0])), &p(&[0.0, 3.0]), 0, 0.1).unwrap();
        assert_eq!(d, p(&[0.0, 0.0]));
    }

    #[test]
    fn backward_exact_one_step_solve() {
        let a = p(&[1.0, -1.0]);
        let z0 = p(&[3.0, 2.0]);
        let d = backward_guidance(&Quadratic(a.clone()), &z0, 1, 1.0).unwrap();
        assert!((d - (&a - &z0)).amax() < 1e-15);
    }

    #[test]
    fn backward_geometric_convergence() {
        let a = p(&[1.0, -1.0]);
        let z0 = p(&[3.0, 2.0]);
        let target = &a - &z0;
        for m in [1, 5, 20] {
            let d = backward_guidance(&Quadratic(a.clone()), &z0, m, 0.5).unwrap();
            // delta_m = (1 - (1 - lr)^m) (a - z0)
            let want = &target * (1.0 - 0.5f64.powi(m as i32));
            assert!((&d - &want).amax() < 1e-12);
        }
        let d = backward_guidance(&Quadratic(a), &z0, 20, 0.5).unwrap();
        assert!((d - target).amax() < 1e-5);
    }

    #[test]
    fn backward_reports_divergence_step() {
        struct Blowup;
        impl GuidanceLoss for Blowup {
            fn evaluate(&self, x: &Point) -> Result<(f64, Point)> {
                Ok((x.norm_squared().exp(), x * 1e300))
            }
        }
        match backward_guidance(&Blowup, &p(&[1.0, 1.0]), 10, 1.0) {
            Err(Error::Diverged { step, .. }) => assert_eq!(step, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn backward_translation_examples() {
        let noise = NoiseSchedule::new(4, ScheduleKind::Linear).unwrap();
        // abar_2 = 0.6
        let eps = p(&[0.2, 0.3]);
        assert_eq!(apply_backward_to_eps(&eps, &p(&[0.0, 0.0]), 2, &noise).unwrap(), eps);
        // find a step with abar = 0.5: linear T=1 gives abar_1 = 0.5
        let half = NoiseSchedule::new(1, ScheduleKind::Linear).unwrap();
        let out = apply_backward_to_eps(&p(&[0.0, 0.0]), &p(&[1.0, 0.0]), 1, &half).unwrap();
        assert!((out - p(&[-1.0, 0.0])).amax() < 1e-15);
    }

    #[test]
    fn backward_translation_identity() {
        let noise = NoiseSchedule::new(100, ScheduleKind::Cosine).unwrap();
        let mut rng = RngStream::new(77, 0);
        for i in 0..1000 {
            let t = 1 + (i % 100);
            let abar = noise.abar(t);
            let z = rng.gaussian(2) * 3.0;
            let eps = rng.gaussian(2);
            let delta = rng.gaussian(2) * 2.0;
            let out = apply_backward_to_eps(&eps, &delta, t, &noise).unwrap();
            let lhs = clean_estimate(&z, &out, abar);
            let rhs = clean_estimate(&z, &eps, abar) + &delta;
            assert!((&lhs - &rhs).amax() <= 1e-12 * rhs.amax().max(1.0));
        }
    }

    fn schedule(window: Window) -> GuidanceSchedule {
        GuidanceSchedule::new(GuidancePrompt::class(0, 1.0).unwrap(), window, 1, 0).unwrap()
    }

    #[test]
    fn window_conventions() {
        let full = schedule(Window::OnThenOff(1.0));
        assert!((1..=10).all(|t| full.query(t, 10).is_some()));
        let early = schedule(Window::OnThenOff(0.6));
        let active: Vec<usize> = (1..=10).rev().filter(|&t| early.query(t, 10).is_some()).collect();
        assert_eq!(active, vec![10, 9, 8, 7, 6, 5]);
        let late = schedule(Window::OffThenOn(0.0));
        assert!((1..=10).all(|t| late.query(t, 10).is_some()));
    }

    #[test]
    fn switch_partitions_steps() {
        let then = GuidancePrompt::class(2, 1.0).unwrap();
        for total in [1usize, 7, 10, 100, 250] {
            for p in [0.0, 0.2, 0.35, 0.6, 1.0] {
                let s = schedule(Window::Switch { p, then: then.clone() });
                let first = (1..=total)
                    .filter(|&t| s.query(t, total).unwrap().target == PromptTarget::Class(0))
                    .count();
                let second = (1..=total)
                    .filter(|&t| s.query(t, total).unwrap().target == PromptTarget::Class(2))
                    .count();
                assert_eq!(first + second, total);
                assert_eq!(first, ((p * total as f64).ceil() as usize).min(total), "T={total} p={p}");
            }
        }
    }

    #[test]
    fn signed_ablation_convention() {
        assert_eq!(Window::from_signed(0.0).unwrap(), Window::Always);
        assert_eq!(Window::from_signed(-1.0).unwrap(), Window::Always);
        assert_eq!(Window::from_signed(0.6).unwrap(), Window::OffThenOn(0.6));
        assert_eq!(Window::from_signed(-0.6).unwrap(), Window::OnThenOff(0.6));
        assert!(Window::from_signed(1.5).is_err());
    }

    #[test]
    fn schedule_validation() {
        let prompt = GuidancePrompt::class(0, 1.0).unwrap();
        assert!(GuidanceSchedule::new(prompt.clone(), Window::Always, 0, 1).is_err());
        assert!(GuidanceSchedule::new(prompt.clone(), Window::OnThenOff(1.2), 1, 1).is_err());
        assert!(GuidanceSchedule::new(prompt, Window::Always, 1, 1).unwrap().with_backward_lr(0.0).is_err());
        assert!(GuidancePrompt::class(0, -1.0).is_err());
    }
}
