//! Experiment harness for `scoreblend`: JSON configs in, `result.json`,
//! `metrics.csv` and per-curve CSV files out.

// `!(x > 0.0)` is used on purpose so NaN is rejected alongside non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod experiments;
pub mod result;

pub use config::{ExperimentConfig, ExperimentKind, Method, MetricKind, Scale};
pub use error::{HarnessError, HarnessResult};
pub use experiments::{output_dir, run};
pub use result::{Cell, CellKey, CellStatus, NamedCurve, RunResult};
