//! Tweedie, TSI and variance-optimally blended score estimators.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::kernel::AffineKernel;
use crate::snis::{median, median_of_means, mom_partition, posterior_weights, prior_weights, ReferenceBank, WeightSet};
use crate::targets::GaussianMixture;

/// Smallest time at which an estimator may be queried.
pub const MIN_TIME: f64 = 1e-12;

/// Default ESS floor as a fraction of the bank size.
pub const DEFAULT_ESS_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    Tweedie,
    Tsi,
    Blend,
}

impl EstimatorKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Tweedie => "tweedie",
            Self::Tsi => "tsi",
            Self::Blend => "blend",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    Prior,
    Posterior,
}

/// Per-query diagnostics. Moments are `None` when the weights have collapsed
/// onto a single particle or the needed column is absent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SnisDiagnostics {
    pub lambda: f64,
    #[serde(rename = "sigma_T2")]
    pub sigma_t2: Option<f64>,
    #[serde(rename = "sigma_C2")]
    pub sigma_c2: Option<f64>,
    pub cov: Option<f64>,
    pub ess: f64,
    pub ess_collapsed: bool,
}

/// Score vector plus its diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreEstimate {
    pub score: Array1<f64>,
    pub diagnostics: SnisDiagnostics,
}

/// JSON-lines record of one query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticRecord {
    pub t: f64,
    #[serde(flatten)]
    pub diagnostics: SnisDiagnostics,
}

/// Anything that can be asked for a score at `(y, t)`.
pub trait ScoreField: Sync {
    fn dim(&self) -> usize;

    fn score(&self, y: ArrayView1<'_, f64>, t: f64) -> Result<Array1<f64>>;

    fn score_with_diagnostics(&self, y: ArrayView1<'_, f64>, t: f64) -> Result<(Array1<f64>, Option<SnisDiagnostics>)> {
        Ok((self.score(y, t)?, None))
    }

    /// ESS threshold below which a query counts as collapsed, if the field
    /// is built from importance weights.
    fn ess_floor(&self) -> Option<f64> {
        None
    }
}

impl<S: ScoreField + ?Sized> ScoreField for &S {
    fn dim(&self) -> usize {
        (**self).dim()
    }

    fn score(&self, y: ArrayView1<'_, f64>, t: f64) -> Result<Array1<f64>> {
        (**self).score(y, t)
    }

    fn score_with_diagnostics(&self, y: ArrayView1<'_, f64>, t: f64) -> Result<(Array1<f64>, Option<SnisDiagnostics>)> {
        (**self).score_with_diagnostics(y, t)
    }

    fn ess_floor(&self) -> Option<f64> {
        (**self).ess_floor()
    }
}

/// Wraps a closure as a [`ScoreField`].
pub struct FnScore<F> {
    dim: usize,
    f: F,
}

impl<F> FnScore<F>
where
    F: Fn(ArrayView1<'_, f64>, f64) -> Result<Array1<f64>> + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> ScoreField for FnScore<F>
where
    F: Fn(ArrayView1<'_, f64>, f64) -> Result<Array1<f64>> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn score(&self, y: ArrayView1<'_, f64>, t: f64) -> Result<Array1<f64>> {
        (self.f)(y, t)
    }
}

/// Exact time-`t` score of an OU-diffused Gaussian mixture. Diffused mixtures
/// are cached per time so repeated queries on a fixed grid refactor nothing.
pub struct ExactScore {
    target: GaussianMixture,
    kernel: AffineKernel,
    cache: Mutex<HashMap<u64, Arc<GaussianMixture>>>,
}

impl ExactScore {
    pub fn new(target: GaussianMixture, kernel: AffineKernel) -> Result<Self> {
        if !kernel.is_ou() {
            return Err(Error::UnsupportedKernel(
                "exact diffused scores are implemented for OU only",
            ));
        }
        check_dim(target.dim(), kernel.dim)?;
        Ok(Self {
            target,
            kernel,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn target(&self) -> &GaussianMixture {
        &self.target
    }

    pub fn kernel(&self) -> &AffineKernel {
        &self.kernel
    }

    /// Law of `X_t`.
    pub fn marginal(&self, t: f64) -> Result<Arc<GaussianMixture>> {
        let key = t.to_bits();
        if let Some(g) = self.cache.lock().expect("cache poisoned").get(&key) {
            return Ok(Arc::clone(g));
        }
        let g = Arc::new(self.target.diffused(&self.kernel, t)?);
        self.cache.lock().expect("cache poisoned").insert(key, Arc::clone(&g));
        Ok(g)
    }
}

impl ScoreField for ExactScore {
    fn dim(&self) -> usize {
        self.target.dim()
    }

    fn score(&self, y: ArrayView1<'_, f64>, t: f64) -> Result<Array1<f64>> {
        self.marginal(t)?.score(y)
    }
}

/// `bᵢ = −Γ⁻¹(y − Φ x₀ⁱ − m)`, one row per particle.
pub fn tweedie_contributions(
    bank: &ReferenceBank,
    kernel: &AffineKernel,
    y: ArrayView1<'_, f64>,
    t: f64,
) -> Result<Array2<f64>> {
    check_time(t)?;
    check_dim(bank.dim(), y.len())?;
    check_dim(bank.dim(), kernel.dim)?;
    let tr = kernel.transition(t)?;
    let mut out = bank.points().to_owned();
    for mut row in out.rows_mut() {
        for (v, yi) in row.iter_mut().zip(y.iter()) {
            *v = -(yi - tr.phi * *v - tr.offset) / tr.variance;
        }
    }
    Ok(out)
}

/// `aᵢ = Φ^{-T} s₀(x₀ⁱ)`, one row per particle.
pub fn tsi_contributions(bank: &ReferenceBank, kernel: &AffineKernel, t: f64) -> Result<Array2<f64>> {
    check_dim(bank.dim(), kernel.dim)?;
    let scores = bank.scores().ok_or(Error::MissingColumn("score"))?;
    let pref = kernel.tsi_prefactor(t)?;
    Ok(scores.mapv(|s| pref * s))
}

/// Minimiser of the blended objective over `[0, 1]`.
pub fn lambda_star(sigma_t2: f64, sigma_c2: f64, cov: f64) -> f64 {
    if sigma_t2 == 0.0 && sigma_c2 == 0.0 {
        return 0.5;
    }
    let den = sigma_t2 + sigma_c2 - 2.0 * cov;
    if den.abs() < 1e-12 * (sigma_t2 + sigma_c2 + 1.0) {
        return (sigma_c2 / (sigma_t2 + sigma_c2)).clamp(0.0, 1.0);
    }
    ((sigma_c2 - cov) / den).clamp(0.0, 1.0)
}

/// `J(λ) = λ²σ_T² + (1−λ)²σ_C² + 2λ(1−λ)cov`.
pub fn blended_objective(lambda: f64, sigma_t2: f64, sigma_c2: f64, cov: f64) -> f64 {
    let mu = 1.0 - lambda;
    lambda * lambda * sigma_t2 + mu * mu * sigma_c2 + 2.0 * lambda * mu * cov
}

/// Closed-form value of `J` at the unconstrained minimiser.
pub fn optimal_objective(sigma_t2: f64, sigma_c2: f64, cov: f64) -> f64 {
    (sigma_t2 * sigma_c2 - cov * cov) / (sigma_t2 + sigma_c2 - 2.0 * cov)
}

/// `(e^{2t}, e^{−2t}/(1−e^{−2t})²)`: the bank-size-free variance factors of
/// the TSI and Tweedie estimators under OU.
pub fn variance_time_factors(t: f64) -> Result<(f64, f64)> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::InvalidTime(t, "variance factors need t > 0"));
    }
    let s2 = -(-2.0 * t).exp_m1();
    Ok(((2.0 * t).exp(), (-2.0 * t).exp() / (s2 * s2)))
}

fn check_time(t: f64) -> Result<()> {
    if !(t >= MIN_TIME) || !t.is_finite() {
        return Err(Error::InvalidTime(t, "estimators need t ≥ 1e-12"));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    pub mode: WeightMode,
    /// ESS floor as a fraction of the bank size.
    #[serde(default = "default_ess_fraction")]
    pub ess_fraction: f64,
    /// Median-of-means batches; 1 disables batching.
    #[serde(default = "default_batches")]
    pub mom_batches: usize,
    #[serde(default)]
    pub mom_seed: u64,
}

fn default_ess_fraction() -> f64 {
    DEFAULT_ESS_FRACTION
}

fn default_batches() -> usize {
    1
}

impl EstimatorConfig {
    pub fn new(kind: EstimatorKind, mode: WeightMode) -> Self {
        Self {
            kind,
            mode,
            ess_fraction: DEFAULT_ESS_FRACTION,
            mom_batches: 1,
            mom_seed: 0,
        }
    }
}

/// SNIS score estimator bound to a bank and kernel.
pub struct ScoreEstimator<'a> {
    bank: &'a ReferenceBank,
    kernel: &'a AffineKernel,
    config: EstimatorConfig,
    batches: Vec<ReferenceBank>,
}

impl<'a> ScoreEstimator<'a> {
    pub fn new(bank: &'a ReferenceBank, kernel: &'a AffineKernel, config: EstimatorConfig) -> Result<Self> {
        check_dim(bank.dim(), kernel.dim)?;
        if config.kind != EstimatorKind::Tweedie && bank.scores().is_none() {
            return Err(Error::MissingColumn("score"));
        }
        if config.mode == WeightMode::Posterior && bank.log_likelihoods().is_none() {
            return Err(Error::MissingColumn("log-likelihood"));
        }
        if !(config.ess_fraction >= 0.0 && config.ess_fraction <= 1.0) {
            return Err(invalid("ess_fraction", "must lie in [0, 1]"));
        }
        let batches = if config.mom_batches > 1 {
            mom_partition(bank.n_ref(), config.mom_batches, config.mom_seed)?
                .iter()
                .map(|idx| bank.subset(idx))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        Ok(Self {
            bank,
            kernel,
            config,
            batches,
        })
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    pub fn estimate(&self, y: ArrayView1<'_, f64>, t: f64) -> Result<ScoreEstimate> {
        if self.batches.is_empty() {
            return estimate_on(self.bank, self.kernel, y, t, &self.config);
        }
        let parts = self
            .batches
            .iter()
            .map(|b| estimate_on(b, self.kernel, y, t, &self.config))
            .collect::<Result<Vec<_>>>()?;
        let scores: Vec<Array1<f64>> = parts.iter().map(|p| p.score.clone()).collect();
        let med = |f: &dyn Fn(&SnisDiagnostics) -> Option<f64>| -> Option<f64> {
            let mut v: Vec<f64> = parts.iter().filter_map(|p| f(&p.diagnostics)).collect();
            (!v.is_empty()).then(|| median(&mut v))
        };
        let diagnostics = SnisDiagnostics {
            lambda: med(&|d| Some(d.lambda)).unwrap_or(0.5),
            sigma_t2: med(&|d| d.sigma_t2),
            sigma_c2: med(&|d| d.sigma_c2),
            cov: med(&|d| d.cov),
            ess: med(&|d| Some(d.ess)).unwrap_or(1.0),
            ess_collapsed: parts.iter().any(|p| p.diagnostics.ess_collapsed),
        };
        Ok(ScoreEstimate {
            score: median_of_means(&scores)?,
            diagnostics,
        })
    }
}

impl ScoreField for ScoreEstimator<'_> {
    fn dim(&self) -> usize {
        self.bank.dim()
    }

    fn score(&self, y: ArrayView1<'_, f64>, t: f64) -> Result<Array1<f64>> {
        Ok(self.estimate(y, t)?.score)
    }

    fn score_with_diagnostics(&self, y: ArrayView1<'_, f64>, t: f64) -> Result<(Array1<f64>, Option<SnisDiagnostics>)> {
        let e = self.estimate(y, t)?;
        Ok((e.score, Some(e.diagnostics)))
    }

    /// Measured against the per-batch bank size when batching is on.
    fn ess_floor(&self) -> Option<f64> {
        let n = self.batches.first().map_or(self.bank.n_ref(), ReferenceBank::n_ref);
        Some(self.config.ess_fraction * n as f64)
    }
}

/// One-shot estimate with the default ESS floor and no batching.
pub fn estimate_score(
    bank: &ReferenceBank,
    kernel: &AffineKernel,
    y: ArrayView1<'_, f64>,
    t: f64,
    kind: EstimatorKind,
    mode: WeightMode,
) -> Result<ScoreEstimate> {
    estimate_on(bank, kernel, y, t, &EstimatorConfig::new(kind, mode))
}

/// Weighted means and weighted second moments in a single sweep.
///
/// The Tweedie deviations are `δbᵢ = (Φ/σ²)(x₀ⁱ − x̄)` and the TSI deviations
/// `δaᵢ = Φ^{-T}(s₀ⁱ − s̄)`, so neither contribution array is materialised.
fn estimate_on(
    bank: &ReferenceBank,
    kernel: &AffineKernel,
    y: ArrayView1<'_, f64>,
    t: f64,
    config: &EstimatorConfig,
) -> Result<ScoreEstimate> {
    check_time(t)?;
    check_dim(bank.dim(), y.len())?;
    let need_scores = config.kind != EstimatorKind::Tweedie;
    let scores = bank.scores_slice();
    if need_scores && scores.is_none() {
        return Err(Error::MissingColumn("score"));
    }
    let w: WeightSet = match config.mode {
        WeightMode::Prior => prior_weights(bank, kernel, y, t)?,
        WeightMode::Posterior => posterior_weights(bank, kernel, y, t)?,
    };
    let tr = kernel.transition(t)?;
    let d = bank.dim();
    let pts = bank.points_slice();

    let mut xbar = vec![0.0; d];
    let mut sbar = vec![0.0; d];
    for (i, wi) in w.weights.iter().enumerate() {
        if *wi == 0.0 {
            continue;
        }
        for (acc, x) in xbar.iter_mut().zip(&pts[i * d..(i + 1) * d]) {
            *acc += wi * x;
        }
        if let Some(s) = scores {
            for (acc, v) in sbar.iter_mut().zip(&s[i * d..(i + 1) * d]) {
                *acc += wi * v;
            }
        }
    }

    let sum_sq = w.sum_sq();
    let denom = 1.0 - sum_sq;
    let collapsed_moments = !(denom > f64::EPSILON);
    let (mut sxx, mut sss, mut sxs) = (0.0, 0.0, 0.0);
    if !collapsed_moments {
        for (i, wi) in w.weights.iter().enumerate() {
            let w2 = wi * wi;
            if w2 == 0.0 {
                continue;
            }
            let x = &pts[i * d..(i + 1) * d];
            let (mut nx, mut ns, mut ip) = (0.0, 0.0, 0.0);
            match scores {
                Some(s) => {
                    let s = &s[i * d..(i + 1) * d];
                    for j in 0..d {
                        let dx = x[j] - xbar[j];
                        let ds = s[j] - sbar[j];
                        nx += dx * dx;
                        ns += ds * ds;
                        ip += dx * ds;
                    }
                }
                None => {
                    for j in 0..d {
                        let dx = x[j] - xbar[j];
                        nx += dx * dx;
                    }
                }
            }
            sxx += w2 * nx;
            sss += w2 * ns;
            sxs += w2 * ip;
        }
    }
    let cb = tr.phi / tr.variance;
    let ca = tr.tsi_prefactor;
    let (sigma_t2, sigma_c2, cov) = if collapsed_moments {
        (None, None, None)
    } else {
        let has = scores.is_some();
        (
            Some(cb * cb * sxx / denom),
            has.then(|| ca * ca * sss / denom),
            has.then(|| cb * ca * sxs / denom),
        )
    };

    let tweedie = || -> Array1<f64> {
        Array1::from_iter(
            y.iter()
                .zip(&xbar)
                .map(|(yi, xb)| -(yi - tr.offset - tr.phi * xb) / tr.variance),
        )
    };
    let tsi = || -> Array1<f64> { Array1::from_iter(sbar.iter().map(|s| ca * s)) };

    let (lambda, score) = match config.kind {
        EstimatorKind::Tweedie => (1.0, tweedie()),
        EstimatorKind::Tsi => (0.0, tsi()),
        EstimatorKind::Blend => {
            let lambda = match (sigma_t2, sigma_c2, cov) {
                (Some(st), Some(sc), Some(c)) => {
                    let lambda = lambda_star(st, sc, c);
                    debug_assert!({
                        let scale = st + sc + 1.0;
                        let flat = (st + sc - 2.0 * c).abs() < 1e-12 * scale;
                        let j = |l| blended_objective(l, st, sc, c);
                        flat || j(lambda) <= j(0.0).min(j(1.0)) + 1e-12 * scale
                    });
                    lambda
                }
                _ => 0.5,
            };
            let score = if lambda == 1.0 {
                tweedie()
            } else if lambda == 0.0 {
                tsi()
            } else {
                tweedie() * lambda + tsi() * (1.0 - lambda)
            };
            (lambda, score)
        }
    };

    let floor = config.ess_fraction * bank.n_ref() as f64;
    Ok(ScoreEstimate {
        score,
        diagnostics: SnisDiagnostics {
            lambda,
            sigma_t2,
            sigma_c2,
            cov,
            ess: w.ess,
            ess_collapsed: collapsed_moments || w.ess < floor,
        },
    })
}

/// Errors of the Tweedie and TSI estimators for a single Gaussian target,
/// centred on the exact posterior mean of `x₀` given `y`:
/// `ε_T = (Φ/σ²)Δ`, `ε_C = −Φ^{-T}Σ⁻¹Δ`, `Δ = μ̂_SNIS − μ_post`.
pub fn gaussian_error_pair(
    target: &GaussianMixture,
    bank: &ReferenceBank,
    kernel: &AffineKernel,
    y: ArrayView1<'_, f64>,
    t: f64,
) -> Result<(Array1<f64>, Array1<f64>)> {
    use nalgebra::{DMatrix, DVector};
    if target.n_components() != 1 {
        return Err(invalid("target", "error pair needs a single Gaussian"));
    }
    check_time(t)?;
    check_dim(target.dim(), bank.dim())?;
    let w = prior_weights(bank, kernel, y, t)?;
    let tr = kernel.transition(t)?;
    let d = target.dim();
    let mu_hat = w.weights.dot(&bank.points());

    let cov = &target.covariances()[0];
    let prec = cov.precision();
    let mu0 = DVector::from_column_slice(&target.means()[0]);
    let yv = DVector::from_iterator(d, y.iter().map(|v| v - tr.offset));
    let post_prec = &prec + DMatrix::identity(d, d) * (tr.phi * tr.phi / tr.variance);
    let rhs = &prec * mu0 + yv * (tr.phi / tr.variance);
    let mu_post = post_prec
        .cholesky()
        .ok_or(Error::NotPositiveDefinite("posterior precision"))?
        .solve(&rhs);

    let delta: Vec<f64> = mu_hat.iter().zip(mu_post.iter()).map(|(a, b)| a - b).collect();
    let eps_t = Array1::from_iter(delta.iter().map(|v| tr.phi / tr.variance * v));
    let eps_c = Array1::from_iter(cov.solve(&delta).into_iter().map(|v| -tr.tsi_prefactor * v));
    Ok((eps_t, eps_c))
}
