//! Set-based time-series imputation with a hierarchy of attention models.
//!
//! Series are unordered sets of `(time, data)` points. Missing points are
//! filled coarse to fine: the targets farthest from any observation first,
//! each level of the hierarchy handled by its own model.

pub mod baseline;
pub mod cli;
pub mod error;
pub mod kernel;
pub mod metrics;
pub mod model;
pub mod schedule;
pub mod series;
pub mod synth;
pub mod time_codec;
pub mod train;

pub use error::{Error, Result};
pub use schedule::{level_of, ScheduleMode, SchedulePlan, ScheduleStep, SchedulerConfig};
pub use series::{compute_gaps, count_missing_dims, to_sequence, update_gaps, GapTable, SeriesSet, TimedPoint};
pub use time_codec::TimeCodecConfig;
