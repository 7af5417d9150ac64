//! Cumulative noise schedules.
//!
//! A schedule stores the cumulative signal fraction `abar[t]` for
//! `t = 0..=T`, so that a clean point `z0` noised to step `t` reads
//! `z_t = sqrt(abar[t]) * z0 + sqrt(1 - abar[t]) * eps`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest value `abar` may take; keeps `1 / sqrt(abar)` bounded near `t = T`.
pub const ABAR_MIN: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    #[default]
    Cosine,
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    abar: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds the schedule for `steps` reverse steps.
    ///
    /// The cosine kind maps `cos^2(pi/2 * t/T)` affinely onto `[ABAR_MIN, 1]`,
    /// which keeps the sequence strictly decreasing for every `T` while hitting
    /// the floor exactly at `t = T`. The linear kind is `max(1 - t/(T+1), ABAR_MIN)`.
    pub fn new(steps: usize, kind: ScheduleKind) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument(
                "noise schedule needs at least one step (T >= 1)".into(),
            ));
        }
        let total = steps as f64;
        let abar = (0..=steps)
            .map(|t| {
                if t == 0 {
                    return 1.0;
                }
                let frac = t as f64 / total;
                match kind {
                    ScheduleKind::Cosine => {
                        let c = (std::f64::consts::FRAC_PI_2 * frac).cos();
                        ABAR_MIN + (1.0 - ABAR_MIN) * c * c
                    }
                    ScheduleKind::Linear => (1.0 - t as f64 / (total + 1.0)).max(ABAR_MIN),
                }
            })
            .collect();
        Ok(Self { kind, abar })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of reverse steps `T`.
    pub fn steps(&self) -> usize {
        self.abar.len() - 1
    }

    /// `abar[t]`; panics if `t > T`.
    #[inline]
    pub fn abar(&self, t: usize) -> f64 {
        self.abar[t]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.abar
    }

    pub(crate) fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "step t={t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        let s = NoiseSchedule::new(10, ScheduleKind::Cosine).unwrap();
        assert_eq!(s.abar(0), 1.0);
        assert_eq!(s.abar(10), 1e-4);
    }

    #[test]
    fn linear_direct_formula() {
        let s = NoiseSchedule::new(4, ScheduleKind::Linear).unwrap();
        let expected = [1.0, 0.8, 0.6, 0.4, 0.2];
        for (got, want) in s.as_slice().iter().zip(expected) {
            assert!((got - want).abs() < 1e-15, "{got} vs {want}");
        }
    }

    #[test]
    fn zero_steps_rejected() {
        assert!(matches!(
            NoiseSchedule::new(0, ScheduleKind::Cosine),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn monotone_with_floor_for_all_lengths() {
        for kind in [ScheduleKind::Cosine, ScheduleKind::Linear] {
            for steps in 1..=10_000usize {
                let s = NoiseSchedule::new(steps, kind).unwrap();
                let a = s.as_slice();
                assert_eq!(a[0], 1.0);
                assert!(a[steps] >= ABAR_MIN);
                for w in a.windows(2) {
                    assert!(w[1] < w[0], "{kind:?} T={steps} not strictly decreasing");
                }
            }
        }
    }
}
