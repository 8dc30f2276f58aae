//! Nonparametric score estimation for reverse-diffusion sampling from a bank
//! of reference particles: self-normalised importance sampling with the
//! Tweedie and target-score identities, their variance-optimal blend, a
//! kNN-Gaussian score proxy for banks without scores, a Heun reverse sampler
//! and the diagnostics used to compare them.

// `!(x > 0.0)` is used on purpose so NaN is rejected alongside non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bank_io;
pub mod error;
pub mod estimators;
pub mod kernel;
pub mod math;
pub mod metrics;
pub mod proxy;
pub mod sampler;
pub mod snis;
pub mod targets;

pub use bank_io::{read_bank, write_bank, BankProvenance};
pub use error::{Error, Result};
pub use estimators::{
    estimate_score, EstimatorConfig, EstimatorKind, ExactScore, FnScore, ScoreEstimate, ScoreEstimator, ScoreField,
    SnisDiagnostics, WeightMode,
};
pub use kernel::{AffineKernel, KernelVariant, Schedule, Transition};
pub use metrics::{CurvePoint, KernelSpec, KsdStatistic};
pub use proxy::{bank_with_proxy, fit_proxy, ProxyConfig, ProxyKind, ProxyModel, ProxyScoreMode};
pub use sampler::{mala_sample, sample, sample_field, SampleOutput, SamplerConfig, Spacing, TimeGrid};
pub use snis::{ReferenceBank, WeightSet};
pub use targets::{GaussianMixture, LinearGaussianLikelihood};
