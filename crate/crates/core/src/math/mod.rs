//! Noise schedules, small dense linear algebra and the random-number contract.

pub mod linalg;
pub mod rng;
pub mod schedule;

pub use linalg::{spd_sqrt, Point, SpdMatrix, MAX_DIM};
pub use rng::RngStream;
pub use schedule::{NoiseSchedule, ScheduleKind, ABAR_MIN};
