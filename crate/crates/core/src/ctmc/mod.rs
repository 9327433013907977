//! Finite-state CTMC primitives: schedules, forward kernels, generators,
//! and reverse-time rates.

mod rate;
mod reverse;
mod schedule;

pub use rate::{decompose_rate, rate_from_schedule, DenseRate, ExitJump, ForwardRate, RateFn};
pub use reverse::{conditional_reverse, marginal_reverse, MarginalReverseRate, ReverseTarget};
pub use schedule::{AlphaFamily, Schedule, ScheduleKind, DEFAULT_EPS_FRACTION, MAX_STATES};
