use std::path::PathBuf;

use scoreblend::metrics::{KernelSpec, DEFAULT_IMQ_BETA, DEFAULT_IMQ_C};
use scoreblend::targets::preset;
use scoreblend::{EstimatorKind, KernelVariant, ProxyConfig, Spacing, TimeGrid};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, HarnessResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    PriorSampling,
    PosteriorSampling,
    CorrelationCurve,
    VarianceProfile,
    RegimeSweep,
    RmseVsNref,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::PriorSampling => "prior_sampling",
            Self::PosteriorSampling => "posterior_sampling",
            Self::CorrelationCurve => "correlation_curve",
            Self::VarianceProfile => "variance_profile",
            Self::RegimeSweep => "regime_sweep",
            Self::RmseVsNref => "rmse_vs_nref",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Tweedie,
    Tsi,
    Blend,
    /// Blend over a bank whose scores come from the kNN Gaussian proxy.
    BlendProxy,
    /// Reference MCMC on the exact posterior.
    Mala,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Self::Tweedie => "tweedie",
            Self::Tsi => "tsi",
            Self::Blend => "blend",
            Self::BlendProxy => "blend_proxy",
            Self::Mala => "mala",
        }
    }

    pub fn estimator(self) -> Option<EstimatorKind> {
        match self {
            Self::Tweedie => Some(EstimatorKind::Tweedie),
            Self::Tsi => Some(EstimatorKind::Tsi),
            Self::Blend | Self::BlendProxy => Some(EstimatorKind::Blend),
            Self::Mala => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Mmd,
    Ksd,
    ScoreRmse,
    MmdFloorRatio,
    MmdToMala,
    RmseAlpha,
    ForwardError,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Mmd => "mmd",
            Self::Ksd => "ksd",
            Self::ScoreRmse => "score_rmse",
            Self::MmdFloorRatio => "log_mmd_ratio",
            Self::MmdToMala => "mmd_to_mala",
            Self::RmseAlpha => "rmse_alpha",
            Self::ForwardError => "forward_error",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSettings {
    pub t_min: f64,
    pub t_max: f64,
    pub steps: usize,
    #[serde(default = "log_spacing")]
    pub spacing: Spacing,
}

fn log_spacing() -> Spacing {
    Spacing::Log
}

impl GridSettings {
    pub fn standard() -> Self {
        Self {
            t_min: 5e-4,
            t_max: 1.5,
            steps: 30,
            spacing: Spacing::Log,
        }
    }

    pub fn regime_sweep() -> Self {
        Self {
            t_min: 3e-4,
            t_max: 2.5,
            ..Self::standard()
        }
    }

    pub fn build(&self) -> HarnessResult<TimeGrid> {
        Ok(TimeGrid::new(self.t_min, self.t_max, self.steps, self.spacing)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSettings {
    pub n_particles: usize,
    pub grid: GridSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSettings {
    /// Queries per knot for the score RMSE.
    pub n_eval: usize,
    /// Fresh exact draws per MMD comparison; 0 means "as many as particles".
    pub n_exact: usize,
    pub ess_fraction: f64,
    pub mmd_kernel: KernelSpec,
    pub ksd_kernel: KernelSpec,
    /// Points used for KSD; larger sample sets are strided down.
    pub ksd_max_points: usize,
}

impl Default for EvaluationSettings {
    fn default() -> Self {
        Self {
            n_eval: 200,
            n_exact: 0,
            ess_fraction: scoreblend::estimators::DEFAULT_ESS_FRACTION,
            mmd_kernel: KernelSpec::median_heuristic(),
            ksd_kernel: KernelSpec::imq(DEFAULT_IMQ_C, DEFAULT_IMQ_BETA),
            ksd_max_points: 2000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    /// `diag(1, 1/2, …, 1/d)`.
    Harmonic,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LikelihoodSettings {
    pub sigma_rel: f64,
    pub operator: OperatorKind,
    /// Monte Carlo draws for the signal scale.
    pub n_mc: usize,
}

impl Default for LikelihoodSettings {
    fn default() -> Self {
        Self {
            sigma_rel: 0.2,
            operator: OperatorKind::Harmonic,
            n_mc: 20_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSettings {
    pub dims: Vec<usize>,
    pub sigma_rels: Vec<f64>,
    /// Seed of the spectral prior (shared by all cells of a dimension).
    pub prior_seed: u64,
    /// Overrides the default `σ = 0.5·√(d/2)` RBF kernel.
    pub kernel: Option<KernelSpec>,
}

/// `n` log-spaced points on `[lo, hi]`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![hi];
    }
    (0..n)
        .map(|i| (lo.ln() + (hi.ln() - lo.ln()) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            dims: vec![3, 6],
            sigma_rels: log_grid(0.025, 1.0, 8),
            prior_seed: 0,
            kernel: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorrelationSettings {
    pub n_queries: usize,
    pub n_batches: usize,
    /// Also run the proxy-score variant.
    pub proxy: bool,
}

impl Default for CorrelationSettings {
    fn default() -> Self {
        Self {
            n_queries: 200,
            n_batches: 4,
            proxy: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VarianceSettings {
    /// Knots on which the analytic factors are tabulated.
    pub factor_grid: GridSettings,
    /// Times at which empirical error variances are measured.
    pub empirical_times: Vec<f64>,
    pub n_banks: usize,
    pub n_queries: usize,
}

impl Default for VarianceSettings {
    fn default() -> Self {
        Self {
            factor_grid: GridSettings {
                t_min: 1e-3,
                t_max: 3.0,
                steps: 200,
                spacing: Spacing::Log,
            },
            empirical_times: vec![0.02, 0.05, 0.1, 0.2, 0.3, 1.0],
            n_banks: 20,
            n_queries: 100,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MalaSettings {
    pub chains: usize,
    pub burn_in: usize,
    pub step_size: f64,
    pub target_acceptance: f64,
    pub thin: usize,
}

impl Default for MalaSettings {
    fn default() -> Self {
        Self {
            chains: 16,
            burn_in: 2000,
            step_size: 0.05,
            target_acceptance: 0.57,
            thin: 5,
        }
    }
}

/// One experiment: everything needed to reproduce a [`crate::RunResult`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    /// Target or prior preset.
    pub target: String,
    #[serde(default = "ou")]
    pub kernel: KernelVariant,
    pub sampler: SamplerSettings,
    pub methods: Vec<Method>,
    pub metrics: Vec<MetricKind>,
    pub n_ref: Vec<usize>,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proxy: Option<ProxyConfig>,
    #[serde(default)]
    pub evaluation: EvaluationSettings,
    #[serde(default)]
    pub likelihood: LikelihoodSettings,
    #[serde(default)]
    pub sweep: SweepSettings,
    #[serde(default)]
    pub correlation: CorrelationSettings,
    #[serde(default)]
    pub variance: VarianceSettings,
    #[serde(default)]
    pub mala: MalaSettings,
}

fn ou() -> KernelVariant {
    KernelVariant::Ou
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    Desk,
    Paper,
}

impl ExperimentConfig {
    /// Built-in configuration for `kind`.
    pub fn preset(kind: ExperimentKind, scale: Scale) -> Self {
        let paper = scale == Scale::Paper;
        let seeds = |desk: u64, full: u64| (0..if paper { full } else { desk }).collect::<Vec<_>>();
        let base = Self {
            experiment: kind,
            target: "ring2d".into(),
            kernel: KernelVariant::Ou,
            sampler: SamplerSettings {
                n_particles: if paper { 4000 } else { 1000 },
                grid: GridSettings::standard(),
            },
            methods: vec![Method::Tweedie, Method::Tsi, Method::Blend, Method::BlendProxy],
            metrics: vec![MetricKind::Mmd, MetricKind::Ksd, MetricKind::ScoreRmse],
            n_ref: if paper {
                vec![250, 500, 1000, 2000, 4000, 8000]
            } else {
                vec![500, 2000]
            },
            seeds: seeds(3, 10),
            output_dir: None,
            proxy: None,
            evaluation: EvaluationSettings::default(),
            likelihood: LikelihoodSettings::default(),
            sweep: SweepSettings::default(),
            correlation: CorrelationSettings::default(),
            variance: VarianceSettings::default(),
            mala: MalaSettings::default(),
        };
        match kind {
            ExperimentKind::PriorSampling => base,
            ExperimentKind::RmseVsNref => Self {
                methods: vec![Method::Tweedie, Method::Tsi, Method::Blend],
                metrics: vec![MetricKind::ScoreRmse],
                n_ref: vec![500, 2000, 8000],
                seeds: seeds(3, 10),
                ..base
            },
            ExperimentKind::PosteriorSampling => Self {
                target: "bimodal2d".into(),
                methods: vec![Method::Tweedie, Method::Blend, Method::Mala],
                metrics: vec![
                    MetricKind::Mmd,
                    MetricKind::MmdFloorRatio,
                    MetricKind::MmdToMala,
                    MetricKind::RmseAlpha,
                    MetricKind::ForwardError,
                ],
                n_ref: vec![if paper { 4000 } else { 2000 }],
                ..base
            },
            ExperimentKind::CorrelationCurve => Self {
                target: "bimodal2d".into(),
                methods: vec![Method::Tweedie, Method::Tsi],
                metrics: vec![],
                n_ref: vec![2000],
                correlation: CorrelationSettings {
                    n_queries: if paper { 1000 } else { 200 },
                    ..CorrelationSettings::default()
                },
                ..base
            },
            ExperimentKind::VarianceProfile => Self {
                target: "gaussian2d".into(),
                methods: vec![Method::Tweedie, Method::Tsi],
                metrics: vec![],
                n_ref: vec![1000],
                ..base
            },
            ExperimentKind::RegimeSweep => Self {
                target: "spectral".into(),
                sampler: SamplerSettings {
                    n_particles: if paper { 2000 } else { 1000 },
                    grid: GridSettings::regime_sweep(),
                },
                methods: vec![Method::Tweedie, Method::Blend],
                metrics: vec![MetricKind::MmdFloorRatio],
                n_ref: vec![if paper { 4000 } else { 2000 }],
                sweep: SweepSettings {
                    dims: if paper { vec![3, 6, 12, 24] } else { vec![3, 6] },
                    sigma_rels: log_grid(0.025, 1.0, if paper { 12 } else { 8 }),
                    ..SweepSettings::default()
                },
                seeds: seeds(3, 5),
                ..base
            },
        }
    }

    pub fn from_json(text: &str) -> HarnessResult<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> HarnessResult<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.seeds.is_empty() {
            return bad("seeds must be non-empty".into());
        }
        if self.n_ref.is_empty() || self.n_ref.contains(&0) {
            return bad("n_ref must be a non-empty list of positive sizes".into());
        }
        if self.sampler.n_particles == 0 {
            return bad("sampler.n_particles must be positive".into());
        }
        if !matches!(self.kernel, KernelVariant::Ou) {
            return bad("only the OU kernel is supported by the experiment runners".into());
        }
        self.sampler.grid.build()?;
        if self.experiment == ExperimentKind::RegimeSweep {
            if self.target != "spectral" {
                return bad("the regime sweep uses the `spectral` prior family".into());
            }
            if self.sweep.dims.is_empty() || self.sweep.dims.contains(&0) || self.sweep.sigma_rels.is_empty() {
                return bad("sweep needs positive dims and at least one noise level".into());
            }
            if self.sweep.sigma_rels.iter().any(|s| !(*s > 0.0)) {
                return bad("sweep noise levels must be positive".into());
            }
        } else {
            preset(&self.target).map_err(|_| HarnessError::Config(format!("unknown preset `{}`", self.target)))?;
        }
        if self.experiment == ExperimentKind::PosteriorSampling && !(self.likelihood.sigma_rel > 0.0) {
            return bad("likelihood.sigma_rel must be positive".into());
        }
        if self.methods.is_empty()
            && !matches!(
                self.experiment,
                ExperimentKind::CorrelationCurve | ExperimentKind::VarianceProfile
            )
        {
            return bad("methods must be non-empty".into());
        }
        let posterior = matches!(
            self.experiment,
            ExperimentKind::PosteriorSampling | ExperimentKind::RegimeSweep
        );
        if !posterior && self.methods.contains(&Method::Mala) {
            return bad("mala is only available for posterior experiments".into());
        }
        self.evaluation.mmd_kernel.validate()?;
        self.evaluation.ksd_kernel.validate()?;
        if !(0.0..=1.0).contains(&self.evaluation.ess_fraction) {
            return bad("evaluation.ess_fraction must lie in [0, 1]".into());
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, ignoring the output location.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = None;
        let json = serde_json::to_string(&c).expect("config serialises");
        Sha256::digest(json.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn n_exact(&self) -> usize {
        if self.evaluation.n_exact == 0 {
            self.sampler.n_particles
        } else {
            self.evaluation.n_exact
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for kind in [
            ExperimentKind::PriorSampling,
            ExperimentKind::PosteriorSampling,
            ExperimentKind::CorrelationCurve,
            ExperimentKind::VarianceProfile,
            ExperimentKind::RegimeSweep,
            ExperimentKind::RmseVsNref,
        ] {
            for scale in [Scale::Desk, Scale::Paper] {
                let cfg = ExperimentConfig::preset(kind, scale);
                cfg.validate().unwrap();
                let json = serde_json::to_string_pretty(&cfg).unwrap();
                let back = ExperimentConfig::from_json(&json).unwrap();
                assert_eq!(back, cfg);
                assert_eq!(back.hash(), cfg.hash());
            }
        }
        let sweep = ExperimentConfig::preset(ExperimentKind::RegimeSweep, Scale::Desk);
        assert_eq!(
            sweep.sweep.dims.len() * sweep.sweep.sigma_rels.len() * sweep.seeds.len(),
            2 * 8 * 3
        );
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = ExperimentConfig::preset(ExperimentKind::PriorSampling, Scale::Desk);
        let mut b = a.clone();
        b.output_dir = Some("/tmp/x".into());
        assert_eq!(a.hash(), b.hash());
        b.seeds = vec![9];
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn validation_errors() {
        let mut c = ExperimentConfig::preset(ExperimentKind::PriorSampling, Scale::Desk);
        c.seeds.clear();
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::preset(ExperimentKind::PriorSampling, Scale::Desk);
        c.target = "nope".into();
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::preset(ExperimentKind::PriorSampling, Scale::Desk);
        c.methods.push(Method::Mala);
        assert!(c.validate().is_err());
        assert!(ExperimentConfig::from_json(r#"{"experiment":"prior_sampling","bogus":1}"#).is_err());
        let g = log_grid(0.025, 1.0, 8);
        assert!((g[0] - 0.025).abs() < 1e-15 && (g[7] - 1.0).abs() < 1e-15);
    }
}
