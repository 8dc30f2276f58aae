//! Experiment runners. Every random draw comes from a stream keyed by the run
//! seed and a tag naming its role, so paired methods see the same bank,
//! queries and sampler noise, and results do not depend on scheduling.

use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use scoreblend::estimators::variance_time_factors;
use scoreblend::metrics::{
    error_correlation_curve, forward_error, ksd2, mmd2, mmd_floor_ratio, rmse_alpha, sample_marginal, score_rmse,
};
use scoreblend::sampler::StepAdaptation;
use scoreblend::targets::{preset, signal_scale, spectral_gmm, SpectralGmmConfig};
use scoreblend::{
    bank_with_proxy, mala_sample, sample, AffineKernel, CurvePoint, Error, EstimatorConfig, ExactScore,
    GaussianMixture, KernelSpec, KsdStatistic, LinearGaussianLikelihood, ProxyConfig, ReferenceBank, SampleOutput,
    SamplerConfig, ScoreEstimator, ScoreField, WeightMode,
};

use crate::config::{
    ExperimentConfig, ExperimentKind, LikelihoodSettings, MalaSettings, Method, MetricKind, OperatorKind,
};
use crate::error::{HarnessError, HarnessResult};
use crate::result::{Cell, CellKey, CellStatus, NamedCurve, RunResult};

/// Environment variable naming the default output root.
pub const OUTPUT_ENV: &str = "SCOREBLEND_OUT";

mod tag {
    pub const BANK: u64 = 1;
    pub const SAMPLER: u64 = 2;
    pub const EXACT: u64 = 3;
    pub const QUERIES: u64 = 4;
    pub const PROBLEM: u64 = 5;
    pub const MALA: u64 = 6;
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Random stream for `(seed, tag path)`.
pub fn stream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(tags.iter().fold(0x5EED, |h, t| splitmix(h ^ t)));
    rng
}

fn derived_seed(seed: u64, tags: &[u64]) -> u64 {
    stream(seed, tags).random()
}

/// Per-cell output merged into a [`RunResult`].
#[derive(Default)]
struct Part {
    cells: Vec<Cell>,
    curves: Vec<NamedCurve>,
    nfe: u64,
    mala_evals: u64,
}

impl Part {
    fn merge(parts: Vec<Part>, result: &mut RunResult) {
        for p in parts {
            result.cells.extend(p.cells);
            result.curves.extend(p.curves);
            result.nfe += p.nfe;
            result.mala_gradient_evals += p.mala_evals;
        }
    }
}

/// Output directory: explicit override, then the config, then
/// `$SCOREBLEND_OUT`, then `./runs`; a per-run subdirectory named after the
/// experiment and config hash is appended.
pub fn output_dir(config: &ExperimentConfig, explicit: Option<PathBuf>) -> PathBuf {
    let root = explicit
        .or_else(|| config.output_dir.clone())
        .or_else(|| std::env::var_os(OUTPUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    root.join(format!("{}-{}", config.experiment.name(), &config.hash()[..12]))
}

/// Dispatch on the experiment kind.
pub fn run(config: &ExperimentConfig) -> HarnessResult<RunResult> {
    match config.experiment {
        ExperimentKind::PriorSampling | ExperimentKind::RmseVsNref => run_prior_sampling(config),
        ExperimentKind::PosteriorSampling => run_posterior_sampling(config),
        ExperimentKind::CorrelationCurve => run_correlation_curve(config),
        ExperimentKind::VarianceProfile => run_variance_profile(config),
        ExperimentKind::RegimeSweep => run_regime_sweep(config),
    }
}

fn expect_kind(config: &ExperimentConfig, kinds: &[ExperimentKind]) -> HarnessResult<()> {
    config.validate()?;
    if kinds.contains(&config.experiment) {
        Ok(())
    } else {
        Err(HarnessError::Config(format!(
            "runner does not handle `{}` experiments",
            config.experiment.name()
        )))
    }
}

fn finish(config: &ExperimentConfig, parts: Vec<Part>, start: Instant) -> RunResult {
    let mut result = RunResult::new(config);
    Part::merge(parts, &mut result);
    result.canonicalise();
    result.wall_clock_seconds = start.elapsed().as_secs_f64();
    result
}

fn sample_with(
    bank: &ReferenceBank,
    kernel: &AffineKernel,
    method: Method,
    mode: WeightMode,
    config: &ExperimentConfig,
    seed: u64,
) -> HarnessResult<SampleOutput> {
    let kind = method.estimator().expect("SNIS method");
    let estimator = EstimatorConfig {
        ess_fraction: config.evaluation.ess_fraction,
        ..EstimatorConfig::new(kind, mode)
    };
    let sc = SamplerConfig {
        n_particles: config.sampler.n_particles,
        grid: config.sampler.grid.build()?,
        estimator,
        seed,
        diagnostics: true,
    };
    Ok(sample(bank, kernel, &sc)?)
}

fn collapsed_fraction(out: &SampleOutput) -> f64 {
    match &out.records {
        Some(r) if !r.is_empty() => r.iter().filter(|x| x.ess_collapsed).count() as f64 / r.len() as f64,
        _ => 0.0,
    }
}

fn proxy_config(config: &ExperimentConfig, dim: usize, n: usize) -> Option<ProxyConfig> {
    if n < 3 {
        return None;
    }
    let mut p = config.proxy.unwrap_or_else(|| ProxyConfig::default_for(dim));
    p.k = p.k.min(n - 1);
    Some(p)
}

fn proxy_bank(points: ArrayView2<'_, f64>, config: &ExperimentConfig) -> HarnessResult<Option<ReferenceBank>> {
    match proxy_config(config, points.ncols(), points.nrows()) {
        Some(p) => Ok(Some(bank_with_proxy(points, &p)?.0)),
        None => Ok(None),
    }
}

fn strided(x: ArrayView2<'_, f64>, max: usize) -> Array2<f64> {
    let n = x.nrows();
    if n <= max {
        return x.to_owned();
    }
    let idx: Vec<usize> = (0..max).map(|i| i * n / max).collect();
    x.select(Axis(0), &idx)
}

fn no_valid_points(e: &scoreblend::Error) -> bool {
    matches!(e, Error::NoValidTimePoints)
}

// ---------------------------------------------------------------------------
// Prior sampling and score RMSE versus bank size.

/// MMD, KSD and score RMSE for each estimator at each bank size and seed.
pub fn run_prior_sampling(config: &ExperimentConfig) -> HarnessResult<RunResult> {
    expect_kind(config, &[ExperimentKind::PriorSampling, ExperimentKind::RmseVsNref])?;
    let start = Instant::now();
    let target = preset(&config.target)?;
    let grid: Vec<(u64, usize)> = config
        .seeds
        .iter()
        .flat_map(|&s| config.n_ref.iter().map(move |&n| (s, n)))
        .collect();
    let parts = grid
        .par_iter()
        .map(|&(seed, n)| prior_cell(config, &target, seed, n))
        .collect::<HarnessResult<Vec<_>>>()?;
    Ok(finish(config, parts, start))
}

fn prior_cell(config: &ExperimentConfig, target: &GaussianMixture, seed: u64, n: usize) -> HarnessResult<Part> {
    let d = target.dim();
    let kernel = AffineKernel::ou(d);
    let exact = ExactScore::new(target.clone(), kernel.clone())?;
    let key = CellKey {
        seed,
        n_ref: Some(n),
        ..CellKey::default()
    };
    let n64 = n as u64;
    let bank = ReferenceBank::from_target(target, n, &mut stream(seed, &[tag::BANK, n64]))?;
    let needs_samples = config
        .metrics
        .iter()
        .any(|m| matches!(m, MetricKind::Mmd | MetricKind::Ksd));
    let exact_draws = needs_samples.then(|| target.sample(config.n_exact(), &mut stream(seed, &[tag::EXACT, n64])));
    let proxy = if config.methods.contains(&Method::BlendProxy) {
        proxy_bank(bank.points(), config)?
    } else {
        None
    };
    let sampler_seed = derived_seed(seed, &[tag::SAMPLER, n64]);
    let grid = config.sampler.grid.build()?;
    let mut part = Part::default();

    for &method in &config.methods {
        let name = method.name();
        let bank_m = match method {
            Method::BlendProxy => match &proxy {
                Some(b) => b,
                None => {
                    for m in &config.metrics {
                        part.cells.push(key.failed(
                            name,
                            m.name(),
                            CellStatus::Invalid,
                            "bank too small for a kNN proxy",
                        ));
                    }
                    continue;
                }
            },
            _ => &bank,
        };
        if needs_samples {
            let out = sample_with(bank_m, &kernel, method, WeightMode::Prior, config, sampler_seed)?;
            part.nfe += out.nfe as u64;
            part.cells
                .push(key.cell(name, "ess_collapsed_fraction", collapsed_fraction(&out)));
            let draws = exact_draws.as_ref().expect("drawn when sampling");
            for m in &config.metrics {
                match m {
                    MetricKind::Mmd => {
                        let v = mmd2(out.samples.view(), draws.view(), &config.evaluation.mmd_kernel)?.sqrt();
                        part.cells.push(key.cell(name, m.name(), v));
                    }
                    MetricKind::Ksd => {
                        let pts = strided(out.samples.view(), config.evaluation.ksd_max_points);
                        let v = ksd2(
                            pts.view(),
                            |x| target.score(x),
                            &config.evaluation.ksd_kernel,
                            KsdStatistic::V,
                        )?;
                        part.cells.push(key.cell(name, m.name(), v.sqrt()));
                    }
                    _ => {}
                }
            }
        }
        if config.metrics.contains(&MetricKind::ScoreRmse) {
            let est_cfg = EstimatorConfig {
                ess_fraction: config.evaluation.ess_fraction,
                ..EstimatorConfig::new(method.estimator().expect("SNIS method"), WeightMode::Prior)
            };
            let est = ScoreEstimator::new(bank_m, &kernel, est_cfg)?;
            let mut rng = stream(seed, &[tag::QUERIES, n64]);
            match score_rmse(&est, &exact, grid.knots(), config.evaluation.n_eval, &mut rng) {
                Ok(r) => {
                    part.cells.push(key.cell(name, "score_rmse", r.rmse));
                    part.curves.push(NamedCurve {
                        name: format!("score_rmse/{name}/n{n}/s{seed}"),
                        points: r.curve,
                    });
                }
                Err(e) if no_valid_points(&e) => part.cells.push(key.failed(
                    name,
                    "score_rmse",
                    CellStatus::DroppedByEss,
                    "all knots below ESS floor",
                )),
                Err(e) => return Err(e.into()),
            }
        }
        for m in &config.metrics {
            if !matches!(m, MetricKind::Mmd | MetricKind::Ksd | MetricKind::ScoreRmse) {
                part.cells
                    .push(key.failed(name, m.name(), CellStatus::Invalid, "metric needs a likelihood"));
            }
        }
    }
    Ok(part)
}

// ---------------------------------------------------------------------------
// Posterior problems.

/// Linear-Gaussian inverse problem with a mixture prior and its exact
/// conjugate posterior.
#[derive(Debug, Clone)]
pub struct PosteriorProblem {
    pub likelihood: LinearGaussianLikelihood,
    pub x_star: Array1<f64>,
    pub y_clean: Array1<f64>,
    pub posterior: GaussianMixture,
    pub sigma: f64,
}

impl PosteriorProblem {
    /// Draw `x★ ~ prior`, set `σ = σ_rel · √E‖Ax‖²` and observe
    /// `y = Ax★ + σε`.
    pub fn draw<R: Rng + ?Sized>(
        prior: &GaussianMixture,
        settings: &LikelihoodSettings,
        sigma_rel: f64,
        rng: &mut R,
    ) -> HarnessResult<Self> {
        let d = prior.dim();
        let a = match settings.operator {
            OperatorKind::Harmonic => LinearGaussianLikelihood::harmonic_operator(d),
            OperatorKind::Identity => DMatrix::identity(d, d),
        };
        let scale = signal_scale(prior, &a, settings.n_mc, rng)?;
        let sigma = sigma_rel * scale;
        let x_star = prior.sample(1, rng).row(0).to_owned();
        let y_clean = &a * DVector::from_iterator(d, x_star.iter().copied());
        let noise = DVector::from_fn(y_clean.len(), |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let likelihood = LinearGaussianLikelihood::new(a, sigma, &y_clean + noise * sigma)?;
        let posterior = prior.conjugate_posterior(&likelihood)?;
        Ok(Self {
            likelihood,
            x_star,
            y_clean: Array1::from_iter(y_clean.iter().copied()),
            posterior,
            sigma,
        })
    }

    pub fn forward(&self, x: ndarray::ArrayView1<'_, f64>) -> Array1<f64> {
        let v = self.likelihood.operator() * DVector::from_iterator(x.len(), x.iter().copied());
        Array1::from_iter(v.iter().copied())
    }
}

/// `n` draws from `posterior` by MALA, pooled over parallel chains started
/// at prior draws. Returns the samples and the gradient-evaluation count.
pub fn mala_draws(
    posterior: &GaussianMixture,
    prior: &GaussianMixture,
    n: usize,
    settings: &MalaSettings,
    seed: u64,
) -> HarnessResult<(Array2<f64>, u64)> {
    let chains = settings.chains.clamp(1, n.max(1));
    let per_chain = n.div_ceil(chains);
    let thin = settings.thin.max(1);
    let evals = AtomicU64::new(0);
    let blocks = (0..chains)
        .into_par_iter()
        .map(|c| -> HarnessResult<Array2<f64>> {
            let mut rng = stream(seed, &[tag::MALA, c as u64]);
            let init = prior.sample(1, &mut rng).row(0).to_owned();
            let chain = mala_sample(
                |x| posterior.log_density(x),
                |x| {
                    evals.fetch_add(1, Ordering::Relaxed);
                    posterior.score(x)
                },
                init.view(),
                settings.burn_in + per_chain * thin,
                settings.burn_in,
                settings.step_size,
                Some(StepAdaptation {
                    target_acceptance: settings.target_acceptance,
                }),
                &mut rng,
            )?;
            let idx: Vec<usize> = (0..per_chain).map(|i| (i + 1) * thin - 1).collect();
            Ok(chain.samples.select(Axis(0), &idx))
        })
        .collect::<HarnessResult<Vec<_>>>()?;
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    let all = ndarray::concatenate(Axis(0), &views).map_err(|e| HarnessError::Config(e.to_string()))?;
    Ok((
        all.slice(ndarray::s![..n, ..]).to_owned(),
        evals.load(Ordering::Relaxed),
    ))
}

struct PosteriorCell<'a> {
    config: &'a ExperimentConfig,
    prior: &'a GaussianMixture,
    key: CellKey,
    sigma_rel: f64,
    mmd_kernel: KernelSpec,
    /// Extra stream tags distinguishing this cell.
    tags: Vec<u64>,
}

impl PosteriorCell<'_> {
    fn run(&self) -> HarnessResult<Part> {
        let config = self.config;
        let seed = self.key.seed;
        let n = self.key.n_ref.expect("posterior cells carry n_ref");
        let d = self.prior.dim();
        let kernel = AffineKernel::ou(d);
        let with = |t: u64| -> Vec<u64> { [&[t][..], &self.tags].concat() };
        let problem = PosteriorProblem::draw(
            self.prior,
            &config.likelihood,
            self.sigma_rel,
            &mut stream(seed, &with(tag::PROBLEM)),
        )?;
        let points = self.prior.sample(n, &mut stream(seed, &with(tag::BANK)));
        let mut exact_rng = stream(seed, &with(tag::EXACT));
        let exact_a = problem.posterior.sample(config.n_exact(), &mut exact_rng);
        let exact_b = problem.posterior.sample(config.n_exact(), &mut exact_rng);
        let spec = self.mmd_kernel.resolved(&[exact_a.view(), exact_b.view()])?;
        let floor = mmd2(exact_a.view(), exact_b.view(), &spec)?.sqrt();
        let sampler_seed = derived_seed(seed, &with(tag::SAMPLER));

        let mut part = Part::default();
        part.cells.push(self.key.cell("exact", "mmd_floor", floor));

        let mut generated: Vec<(Method, Array2<f64>)> = Vec::new();
        for &method in &config.methods {
            let samples = match method {
                Method::Mala => {
                    let (s, evals) = mala_draws(
                        &problem.posterior,
                        self.prior,
                        config.sampler.n_particles,
                        &config.mala,
                        sampler_seed,
                    )?;
                    part.mala_evals += evals;
                    s
                }
                _ => {
                    let base = if method == Method::BlendProxy {
                        match proxy_bank(points.view(), config)? {
                            Some(b) => b,
                            None => {
                                for m in &config.metrics {
                                    part.cells.push(self.key.failed(
                                        method.name(),
                                        m.name(),
                                        CellStatus::Invalid,
                                        "bank too small for a kNN proxy",
                                    ));
                                }
                                continue;
                            }
                        }
                    } else {
                        ReferenceBank::from_target(self.prior, n, &mut stream(seed, &with(tag::BANK)))?
                    };
                    let bank = base.tilted(&problem.likelihood)?;
                    let out = sample_with(&bank, &kernel, method, WeightMode::Posterior, config, sampler_seed)?;
                    part.nfe += out.nfe as u64;
                    part.cells.push(
                        self.key
                            .cell(method.name(), "ess_collapsed_fraction", collapsed_fraction(&out)),
                    );
                    out.samples
                }
            };
            generated.push((method, samples));
        }
        let mala = generated
            .iter()
            .find(|(m, _)| *m == Method::Mala)
            .map(|(_, s)| s.clone());

        for (method, samples) in &generated {
            let name = method.name();
            for m in &config.metrics {
                let cell = match m {
                    MetricKind::Mmd => {
                        self.key
                            .cell(name, m.name(), mmd2(samples.view(), exact_a.view(), &spec)?.sqrt())
                    }
                    MetricKind::MmdFloorRatio => {
                        match mmd_floor_ratio(samples.view(), exact_a.view(), exact_b.view(), &spec) {
                            Ok(v) => self.key.cell(name, m.name(), v),
                            Err(Error::ZeroFloor) => {
                                self.key.failed(name, m.name(), CellStatus::Invalid, "zero MMD floor")
                            }
                            Err(e) => return Err(e.into()),
                        }
                    }
                    MetricKind::MmdToMala => match (&mala, method) {
                        (_, Method::Mala) => continue,
                        (Some(ms), _) => self
                            .key
                            .cell(name, m.name(), mmd2(samples.view(), ms.view(), &spec)?.sqrt()),
                        (None, _) => self
                            .key
                            .failed(name, m.name(), CellStatus::Invalid, "mala not among the methods"),
                    },
                    MetricKind::RmseAlpha => {
                        self.key
                            .cell(name, m.name(), rmse_alpha(samples.view(), problem.x_star.view())?)
                    }
                    MetricKind::ForwardError => {
                        let mean = samples.mean_axis(Axis(0)).expect("non-empty samples");
                        self.key.cell(
                            name,
                            m.name(),
                            forward_error(|x| problem.forward(x), mean.view(), problem.y_clean.view())?,
                        )
                    }
                    MetricKind::Ksd => {
                        let pts = strided(samples.view(), config.evaluation.ksd_max_points);
                        let v = ksd2(
                            pts.view(),
                            |x| problem.posterior.score(x),
                            &config.evaluation.ksd_kernel,
                            KsdStatistic::V,
                        )?;
                        self.key.cell(name, m.name(), v.sqrt())
                    }
                    MetricKind::ScoreRmse => self.key.failed(
                        name,
                        m.name(),
                        CellStatus::Invalid,
                        "score RMSE is a prior-sampling metric",
                    ),
                };
                part.cells.push(cell);
            }
        }
        Ok(part)
    }
}

/// Tweedie, Blend and MALA against the exact conjugate posterior.
pub fn run_posterior_sampling(config: &ExperimentConfig) -> HarnessResult<RunResult> {
    expect_kind(config, &[ExperimentKind::PosteriorSampling])?;
    let start = Instant::now();
    let prior = preset(&config.target)?;
    let grid: Vec<(u64, usize)> = config
        .seeds
        .iter()
        .flat_map(|&s| config.n_ref.iter().map(move |&n| (s, n)))
        .collect();
    let parts = grid
        .par_iter()
        .map(|&(seed, n)| {
            PosteriorCell {
                config,
                prior: &prior,
                key: CellKey {
                    seed,
                    n_ref: Some(n),
                    sigma_rel: Some(config.likelihood.sigma_rel),
                    ..CellKey::default()
                },
                sigma_rel: config.likelihood.sigma_rel,
                mmd_kernel: config.evaluation.mmd_kernel.clone(),
                tags: vec![n as u64],
            }
            .run()
        })
        .collect::<HarnessResult<Vec<_>>>()?;
    Ok(finish(config, parts, start))
}

/// `log(MMD/floor)` over (dimension, noise level, bank size, seed) cells with
/// spectral-mixture priors.
pub fn run_regime_sweep(config: &ExperimentConfig) -> HarnessResult<RunResult> {
    expect_kind(config, &[ExperimentKind::RegimeSweep])?;
    let start = Instant::now();
    let priors = config
        .sweep
        .dims
        .iter()
        .map(|&d| Ok((d, spectral_gmm(&SpectralGmmConfig::new(d, config.sweep.prior_seed))?)))
        .collect::<HarnessResult<Vec<_>>>()?;
    let mut cells = Vec::new();
    for (d, prior) in &priors {
        for &s in &config.sweep.sigma_rels {
            for &n in &config.n_ref {
                for &seed in &config.seeds {
                    cells.push((*d, prior, s, n, seed));
                }
            }
        }
    }
    let parts = cells
        .par_iter()
        .map(|&(d, prior, s, n, seed)| {
            PosteriorCell {
                config,
                prior,
                key: CellKey {
                    seed,
                    n_ref: Some(n),
                    dim: Some(d),
                    sigma_rel: Some(s),
                },
                sigma_rel: s,
                mmd_kernel: config
                    .sweep
                    .kernel
                    .clone()
                    .unwrap_or_else(|| KernelSpec::regime_sweep(d)),
                tags: vec![d as u64, s.to_bits(), n as u64],
            }
            .run()
        })
        .collect::<HarnessResult<Vec<_>>>()?;
    Ok(finish(config, parts, start))
}

// ---------------------------------------------------------------------------
// Error-correlation curves.

/// `ρ(t)` for exact and proxy scores on every knot of the sampler grid.
pub fn run_correlation_curve(config: &ExperimentConfig) -> HarnessResult<RunResult> {
    expect_kind(config, &[ExperimentKind::CorrelationCurve])?;
    let start = Instant::now();
    let target = preset(&config.target)?;
    let exact = ExactScore::new(target.clone(), AffineKernel::ou(target.dim()))?;
    let knots = config.sampler.grid.build()?.knots().to_vec();
    let cs = config.correlation;
    let mut jobs = Vec::new();
    for &seed in &config.seeds {
        for &n in &config.n_ref {
            jobs.push((seed, n, false));
            if cs.proxy {
                jobs.push((seed, n, true));
            }
        }
    }
    let parts = jobs
        .par_iter()
        .map(|&(seed, n, use_proxy)| -> HarnessResult<Part> {
            let variant = if use_proxy { "proxy" } else { "exact" };
            let key = CellKey {
                seed,
                n_ref: Some(n),
                ..CellKey::default()
            };
            let mut part = Part::default();
            if use_proxy && proxy_config(config, target.dim(), n).is_none() {
                part.cells.push(key.failed(
                    variant,
                    "rho_at_min_kept_t",
                    CellStatus::Invalid,
                    "bank too small for a kNN proxy",
                ));
                return Ok(part);
            }
            let factory = |b: usize| -> scoreblend::Result<ReferenceBank> {
                let mut rng = stream(seed, &[tag::BANK, n as u64, b as u64]);
                if use_proxy {
                    let pts = target.sample(n, &mut rng);
                    let p = proxy_config(config, target.dim(), n).expect("checked above");
                    Ok(bank_with_proxy(pts.view(), &p)?.0)
                } else {
                    ReferenceBank::from_target(&target, n, &mut rng)
                }
            };
            let mut rng = stream(seed, &[tag::QUERIES, n as u64]);
            match error_correlation_curve(
                factory,
                &exact,
                &knots,
                cs.n_queries,
                cs.n_batches,
                Some(config.evaluation.ess_fraction),
                &mut rng,
            ) {
                Ok(curve) => {
                    let first = curve
                        .iter()
                        .filter(|p| p.kept)
                        .min_by(|a, b| a.t.total_cmp(&b.t))
                        .expect("at least one kept knot");
                    part.cells.push(key.cell(variant, "rho_at_min_kept_t", first.value));
                    part.cells.push(key.cell(variant, "min_kept_t", first.t));
                    part.curves.push(NamedCurve {
                        name: format!("rho/{variant}/n{n}/s{seed}"),
                        points: curve,
                    });
                }
                Err(e) if no_valid_points(&e) => part.cells.push(key.failed(
                    variant,
                    "rho_at_min_kept_t",
                    CellStatus::DroppedByEss,
                    "all knots below ESS floor",
                )),
                Err(e) => return Err(e.into()),
            }
            Ok(part)
        })
        .collect::<HarnessResult<Vec<_>>>()?;
    Ok(finish(config, parts, start))
}

// ---------------------------------------------------------------------------
// Variance profiles.

/// Time at which `f_T(t) = f_C(t)`, by linear interpolation of
/// `log(f_C/f_T)` between the bracketing knots.
pub fn crossover_time(times: &[f64]) -> HarnessResult<Option<f64>> {
    let g = |t: f64| -> HarnessResult<f64> {
        let (tsi, twd) = variance_time_factors(t)?;
        Ok((tsi / twd).ln())
    };
    let mut sorted = times.to_vec();
    sorted.sort_by(f64::total_cmp);
    for w in sorted.windows(2) {
        let (a, b) = (g(w[0])?, g(w[1])?);
        if a == 0.0 {
            return Ok(Some(w[0]));
        }
        if a.signum() != b.signum() {
            return Ok(Some(w[0] + (w[1] - w[0]) * a / (a - b)));
        }
    }
    Ok(None)
}

/// Analytic variance factors on a grid plus empirical Tweedie and TSI error
/// variances on a Gaussian target.
pub fn run_variance_profile(config: &ExperimentConfig) -> HarnessResult<RunResult> {
    expect_kind(config, &[ExperimentKind::VarianceProfile])?;
    let start = Instant::now();
    let vs = &config.variance;
    let knots = vs.factor_grid.build()?.knots().to_vec();
    let mut tsi_curve = Vec::new();
    let mut twd_curve = Vec::new();
    for &t in knots.iter().rev() {
        let (tsi, twd) = variance_time_factors(t)?;
        tsi_curve.push(CurvePoint {
            t,
            value: tsi,
            ess_mean: None,
            kept: true,
        });
        twd_curve.push(CurvePoint {
            t,
            value: twd,
            ess_mean: None,
            kept: true,
        });
    }
    let mut head = Part::default();
    head.curves.push(NamedCurve {
        name: "factor/tsi".into(),
        points: tsi_curve,
    });
    head.curves.push(NamedCurve {
        name: "factor/tweedie".into(),
        points: twd_curve,
    });
    let key0 = CellKey {
        seed: config.seeds[0],
        ..CellKey::default()
    };
    match crossover_time(&knots)? {
        Some(t) => head.cells.push(key0.cell("analytic", "crossover_t", t)),
        None => head.cells.push(key0.failed(
            "analytic",
            "crossover_t",
            CellStatus::Invalid,
            "no sign change on the grid",
        )),
    }

    let target = preset(&config.target)?;
    let exact = ExactScore::new(target.clone(), AffineKernel::ou(target.dim()))?;
    let jobs: Vec<(u64, usize)> = config
        .seeds
        .iter()
        .flat_map(|&s| config.n_ref.iter().map(move |&n| (s, n)))
        .collect();
    let mut parts = jobs
        .par_iter()
        .map(|&(seed, n)| empirical_variances(config, &target, &exact, seed, n))
        .collect::<HarnessResult<Vec<_>>>()?;
    parts.push(head);
    Ok(finish(config, parts, start))
}

fn empirical_variances(
    config: &ExperimentConfig,
    target: &GaussianMixture,
    exact: &ExactScore,
    seed: u64,
    n: usize,
) -> HarnessResult<Part> {
    let vs = &config.variance;
    let kernel = exact.kernel();
    let key = CellKey {
        seed,
        n_ref: Some(n),
        ..CellKey::default()
    };
    let banks = (0..vs.n_banks)
        .map(|b| ReferenceBank::from_target(target, n, &mut stream(seed, &[tag::BANK, n as u64, b as u64])))
        .collect::<scoreblend::Result<Vec<_>>>()?;
    let floor = config.evaluation.ess_fraction * n as f64;
    let mut part = Part::default();
    for method in [Method::Tweedie, Method::Tsi] {
        let est_cfg = EstimatorConfig {
            ess_fraction: config.evaluation.ess_fraction,
            ..EstimatorConfig::new(method.estimator().expect("SNIS method"), WeightMode::Prior)
        };
        let mut curve = Vec::new();
        for (ti, &t) in vs.empirical_times.iter().enumerate() {
            let mut sq = Vec::new();
            let mut ess = Vec::new();
            for (b, bank) in banks.iter().enumerate() {
                let est = ScoreEstimator::new(bank, kernel, est_cfg)?;
                let ys = sample_marginal(
                    exact,
                    t,
                    vs.n_queries,
                    &mut stream(seed, &[tag::QUERIES, n as u64, b as u64, ti as u64]),
                )?;
                for y in ys.outer_iter() {
                    let e = est.estimate(y, t)?;
                    let s = exact.score(y, t)?;
                    sq.push((&e.score - &s).mapv(|v| v * v).sum());
                    ess.push(e.diagnostics.ess);
                }
            }
            let value = sq.iter().sum::<f64>() / sq.len() as f64;
            let ess_mean = ess.iter().sum::<f64>() / ess.len() as f64;
            part.cells
                .push(key.cell(method.name(), &format!("error_variance@{t}"), value));
            curve.push(CurvePoint {
                t,
                value,
                ess_mean: Some(ess_mean),
                kept: ess_mean >= floor,
            });
        }
        part.curves.push(NamedCurve {
            name: format!("error_variance/{}/n{n}/s{seed}", method.name()),
            points: curve,
        });
    }
    Ok(part)
}
