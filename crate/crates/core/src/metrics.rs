//! Sample-quality and score-accuracy diagnostics.
//!
//! Kernel double sums are split by rows across threads; row sums and the final
//! reduction use [`pairwise_sum`], so results do not depend on the thread count.

use std::cmp::Ordering;
use std::io::Write;

use ndarray::{concatenate, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::estimators::{tsi_contributions, tweedie_contributions, ExactScore, ScoreField, DEFAULT_ESS_FRACTION};
use crate::math::{dot, pairwise_sum, sq_dist};
use crate::snis::{median, prior_weights, snis_mean, ReferenceBank};

pub const DEFAULT_IMQ_C: f64 = 1.0;
pub const DEFAULT_IMQ_BETA: f64 = -0.5;
pub const DEFAULT_MEDIAN_SUBSAMPLE: usize = 1024;
pub const DEFAULT_MEDIAN_MULTIPLIERS: [f64; 3] = [0.5, 1.0, 2.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Bandwidths {
    Fixed {
        sigmas: Vec<f64>,
    },
    /// Median pairwise distance on an evenly strided subsample of the pooled
    /// points, times each multiplier.
    Median {
        multipliers: Vec<f64>,
        subsample: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum KernelSpec {
    /// `exp(−‖x−y‖²/2σ²)`, averaged over the bandwidth list.
    Rbf { bandwidths: Bandwidths },
    /// `(c² + ‖x−y‖²)^β` with `β < 0`.
    Imq { c: f64, beta: f64 },
}

impl KernelSpec {
    pub fn rbf(sigma: f64) -> Self {
        Self::multiscale(vec![sigma])
    }

    pub fn multiscale(sigmas: Vec<f64>) -> Self {
        Self::Rbf {
            bandwidths: Bandwidths::Fixed { sigmas },
        }
    }

    pub fn median_heuristic() -> Self {
        Self::Rbf {
            bandwidths: Bandwidths::Median {
                multipliers: DEFAULT_MEDIAN_MULTIPLIERS.to_vec(),
                subsample: DEFAULT_MEDIAN_SUBSAMPLE,
            },
        }
    }

    pub fn imq(c: f64, beta: f64) -> Self {
        Self::Imq { c, beta }
    }

    /// Single RBF with `σ = 0.5·√(d/2)`.
    pub fn regime_sweep(dim: usize) -> Self {
        Self::rbf(0.5 * (dim as f64 / 2.0).sqrt())
    }

    /// Ten RBF bandwidths `0.1, 0.2, …, 1.0`.
    pub fn ksd_multiscale() -> Self {
        Self::multiscale((1..=10).map(|i| i as f64 / 10.0).collect())
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Self::Rbf { bandwidths } => match bandwidths {
                Bandwidths::Fixed { sigmas } => {
                    if sigmas.is_empty() || sigmas.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
                        return Err(invalid("bandwidths", "need a non-empty list of positive values"));
                    }
                }
                Bandwidths::Median { multipliers, subsample } => {
                    if multipliers.is_empty() || multipliers.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
                        return Err(invalid("multipliers", "need a non-empty list of positive values"));
                    }
                    if *subsample < 2 {
                        return Err(invalid("subsample", "need at least 2 points"));
                    }
                }
            },
            Self::Imq { c, beta } => {
                if !(*c > 0.0 && c.is_finite()) {
                    return Err(invalid("c", "must be positive"));
                }
                if !(*beta < 0.0 && beta.is_finite()) {
                    return Err(invalid("beta", "must be negative"));
                }
            }
        }
        Ok(())
    }

    /// Replace a median-heuristic bandwidth by the fixed values it yields on
    /// the pooled `sets`.
    pub fn resolved(&self, sets: &[ArrayView2<'_, f64>]) -> Result<Self> {
        Ok(match self.base_kernels(sets)?.as_slice() {
            [BaseKernel::Imq { c, beta }] => Self::imq(*c, *beta),
            ks => Self::multiscale(
                ks.iter()
                    .map(|k| match k {
                        BaseKernel::Rbf { sigma } => *sigma,
                        BaseKernel::Imq { .. } => unreachable!("families are not mixed"),
                    })
                    .collect(),
            ),
        })
    }

    fn base_kernels(&self, sets: &[ArrayView2<'_, f64>]) -> Result<Vec<BaseKernel>> {
        self.validate()?;
        Ok(match self {
            Self::Imq { c, beta } => vec![BaseKernel::Imq { c: *c, beta: *beta }],
            Self::Rbf { bandwidths } => match bandwidths {
                Bandwidths::Fixed { sigmas } => sigmas.iter().map(|&sigma| BaseKernel::Rbf { sigma }).collect(),
                Bandwidths::Median { multipliers, subsample } => {
                    let med = median_distance(sets, *subsample)?;
                    multipliers.iter().map(|m| BaseKernel::Rbf { sigma: m * med }).collect()
                }
            },
        })
    }
}

fn median_distance(sets: &[ArrayView2<'_, f64>], subsample: usize) -> Result<f64> {
    let pooled = concatenate(Axis(0), sets).map_err(|_| invalid("points", "sets must share a dimension"))?;
    let n = pooled.nrows();
    if n < 2 {
        return Err(invalid("points", "median heuristic needs at least 2 points"));
    }
    let m = n.min(subsample);
    let rows: Vec<ArrayView1<'_, f64>> = (0..m).map(|i| pooled.row(i * n / m)).collect();
    let mut dists: Vec<f64> = (0..m)
        .flat_map(|i| (i + 1..m).map(move |j| (i, j)))
        .map(|(i, j)| sq_dist(rows[i].as_slice().unwrap(), rows[j].as_slice().unwrap()).sqrt())
        .collect();
    let med = median(&mut dists);
    if med > 0.0 {
        Ok(med)
    } else {
        Err(invalid("points", "median pairwise distance is zero"))
    }
}

/// One positive-definite kernel with closed-form derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BaseKernel {
    Rbf { sigma: f64 },
    Imq { c: f64, beta: f64 },
}

impl BaseKernel {
    /// `(k, g)` at squared distance `r2`, where `∇ₓk = g·(x − y)`.
    fn value_and_slope(&self, r2: f64) -> (f64, f64) {
        match *self {
            Self::Rbf { sigma } => {
                let s2 = sigma * sigma;
                let k = (-r2 / (2.0 * s2)).exp();
                (k, -k / s2)
            }
            Self::Imq { c, beta } => {
                let base = c * c + r2;
                (base.powf(beta), 2.0 * beta * base.powf(beta - 1.0))
            }
        }
    }

    /// `tr(∇ₓ∇_y k)` at squared distance `r2` in dimension `d`.
    fn trace_at(&self, r2: f64, d: usize) -> f64 {
        let d = d as f64;
        match *self {
            Self::Rbf { sigma } => {
                let s2 = sigma * sigma;
                (-r2 / (2.0 * s2)).exp() * (d / s2 - r2 / (s2 * s2))
            }
            Self::Imq { c, beta } => {
                let base = c * c + r2;
                -2.0 * beta * base.powf(beta - 2.0) * (d * base + 2.0 * (beta - 1.0) * r2)
            }
        }
    }

    pub fn value(&self, x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> f64 {
        self.value_and_slope(sq(x, y)).0
    }

    pub fn grad_x(&self, x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> Array1<f64> {
        let g = self.value_and_slope(sq(x, y)).1;
        (&x - &y) * g
    }

    pub fn grad_y(&self, x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> Array1<f64> {
        -self.grad_x(x, y)
    }

    pub fn trace_cross(&self, x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> f64 {
        self.trace_at(sq(x, y), x.len())
    }

    /// Stein kernel `u(x, y)` for score values `sx = s(x)`, `sy = s(y)`.
    pub fn stein(&self, x: &[f64], y: &[f64], sx: &[f64], sy: &[f64]) -> f64 {
        let r2 = sq_dist(x, y);
        let (k, g) = self.value_and_slope(r2);
        // sxᵀ∇_y k + syᵀ∇ₓk = g·(sy − sx)ᵀ(x − y)
        let cross: f64 = x
            .iter()
            .zip(y)
            .zip(sx.iter().zip(sy))
            .map(|((a, b), (p, q))| (q - p) * (a - b))
            .sum();
        k * dot(sx, sy) + g * cross + self.trace_at(r2, x.len())
    }
}

fn sq(x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn rows_of(a: ArrayView2<'_, f64>) -> Vec<f64> {
    a.iter().copied().collect()
}

/// Mean of `f(i, j)` over `i < n`, `j < m` (or `j ≠ i` when `skip_diag`).
fn double_mean<F>(n: usize, m: usize, skip_diag: bool, f: F) -> f64
where
    F: Fn(usize, usize) -> f64 + Sync,
{
    let row_sums: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let vals: Vec<f64> = (0..m).filter(|&j| !(skip_diag && i == j)).map(|j| f(i, j)).collect();
            pairwise_sum(&vals)
        })
        .collect();
    let count = if skip_diag { n * (m - 1) } else { n * m };
    pairwise_sum(&row_sums) / count as f64
}

fn mean_kernel(a: &[f64], n: usize, b: &[f64], m: usize, d: usize, k: BaseKernel) -> f64 {
    double_mean(n, m, false, |i, j| {
        k.value_and_slope(sq_dist(&a[i * d..(i + 1) * d], &b[j * d..(j + 1) * d]))
            .0
    })
}

fn lex_cmp(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Ordering {
    a.nrows().cmp(&b.nrows()).then_with(|| {
        a.iter()
            .zip(b.iter())
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// Biased squared MMD (V-statistic), averaged over the kernel's bandwidths.
/// Arguments are put in a canonical order first, so swapping them gives the
/// same bits. Tiny negative round-off is clamped to zero.
pub fn mmd2(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>, spec: &KernelSpec) -> Result<f64> {
    if x.nrows() == 0 || y.nrows() == 0 {
        return Err(invalid("points", "mmd needs at least one point per set"));
    }
    check_dim(x.ncols(), y.ncols())?;
    let (x, y) = if lex_cmp(x, y) == Ordering::Greater {
        (y, x)
    } else {
        (x, y)
    };
    let kernels = spec.base_kernels(&[x, y])?;
    let d = x.ncols();
    let (n, m) = (x.nrows(), y.nrows());
    let (xs, ys) = (rows_of(x), rows_of(y));
    let per: Vec<f64> = kernels
        .iter()
        .map(|&k| {
            let kxx = mean_kernel(&xs, n, &xs, n, d, k);
            let kyy = mean_kernel(&ys, m, &ys, m, d, k);
            let kxy = mean_kernel(&xs, n, &ys, m, d, k);
            (kxx + kyy - 2.0 * kxy).max(0.0)
        })
        .collect();
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KsdStatistic {
    #[default]
    V,
    U,
}

/// Squared kernel Stein discrepancy of `x` against the law with score
/// `score_fn`, averaged over the kernel's bandwidths.
pub fn ksd2<F>(x: ArrayView2<'_, f64>, score_fn: F, spec: &KernelSpec, statistic: KsdStatistic) -> Result<f64>
where
    F: Fn(ArrayView1<'_, f64>) -> Result<Array1<f64>> + Sync,
{
    let n = x.nrows();
    let d = x.ncols();
    if n == 0 || (statistic == KsdStatistic::U && n < 2) {
        return Err(invalid("points", "not enough points for the requested statistic"));
    }
    let kernels = spec.base_kernels(&[x])?;
    let scores: Vec<Array1<f64>> = x.outer_iter().into_par_iter().map(&score_fn).collect::<Result<_>>()?;
    let mut flat = Vec::with_capacity(n * d);
    for s in &scores {
        check_dim(d, s.len())?;
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteTarget);
        }
        flat.extend(s.iter());
    }
    let xs = rows_of(x);
    let row = |i: usize| (i * d, (i + 1) * d);
    let per: Vec<f64> = kernels
        .iter()
        .map(|&k| {
            double_mean(n, n, statistic == KsdStatistic::U, |i, j| {
                let (a0, a1) = row(i);
                let (b0, b1) = row(j);
                k.stein(&xs[a0..a1], &xs[b0..b1], &flat[a0..a1], &flat[b0..b1])
            })
        })
        .collect();
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// One knot of a per-time diagnostic curve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub t: f64,
    pub value: f64,
    /// Mean per-query ESS; empty for fields without importance weights.
    pub ess_mean: Option<f64>,
    pub kept: bool,
}

/// Write `t,value,ess_mean,kept` rows.
pub fn write_curve_csv<W: Write>(points: &[CurvePoint], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for p in points {
        w.serialize(p).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRmse {
    /// Root of the mean squared error over all kept knots.
    pub rmse: f64,
    /// Per-knot RMSE.
    pub curve: Vec<CurvePoint>,
}

/// Draw `n` points from the diffused target at time `t`.
pub fn sample_marginal<R: Rng + ?Sized>(exact: &ExactScore, t: f64, n: usize, rng: &mut R) -> Result<Array2<f64>> {
    let x0 = exact.target().sample(n, rng);
    let d = x0.ncols();
    let mut out = Array2::zeros((n, d));
    for (mut row, x) in out.rows_mut().into_iter().zip(x0.rows()) {
        let z = Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal));
        row.assign(&exact.kernel().forward_sample(x, t, z.view())?);
    }
    Ok(out)
}

fn keep(ess_mean: Option<f64>, floor: Option<f64>) -> bool {
    match (ess_mean, floor) {
        (Some(e), Some(f)) => e >= f,
        _ => true,
    }
}

/// Time-averaged score RMSE over the knots whose mean ESS clears the
/// estimator's floor. Fresh queries are drawn at every knot.
pub fn score_rmse<S, R>(
    estimator: &S,
    exact: &ExactScore,
    times: &[f64],
    n_eval: usize,
    rng: &mut R,
) -> Result<ScoreRmse>
where
    S: ScoreField + ?Sized,
    R: Rng + ?Sized,
{
    check_dim(exact.dim(), estimator.dim())?;
    if n_eval == 0 {
        return Err(invalid("n_eval", "must be at least 1"));
    }
    let floor = estimator.ess_floor();
    let mut curve = Vec::with_capacity(times.len());
    let mut kept_mse = Vec::new();
    for &t in times {
        let ys = sample_marginal(exact, t, n_eval, rng)?;
        let evals: Vec<(f64, Option<f64>)> = ys
            .outer_iter()
            .into_par_iter()
            .map(|y| {
                let (s_hat, diag) = estimator.score_with_diagnostics(y, t)?;
                let s = exact.score(y, t)?;
                Ok((sq(s_hat.view(), s.view()), diag.map(|d| d.ess)))
            })
            .collect::<Result<_>>()?;
        let errs: Vec<f64> = evals.iter().map(|e| e.0).collect();
        let mse = pairwise_sum(&errs) / n_eval as f64;
        let ess_mean = evals
            .iter()
            .map(|e| e.1)
            .collect::<Option<Vec<f64>>>()
            .map(|v| pairwise_sum(&v) / v.len() as f64);
        let kept = keep(ess_mean, floor);
        if kept {
            kept_mse.push(mse);
        }
        curve.push(CurvePoint {
            t,
            value: mse.sqrt(),
            ess_mean,
            kept,
        });
    }
    if kept_mse.is_empty() {
        return Err(Error::NoValidTimePoints);
    }
    Ok(ScoreRmse {
        rmse: (pairwise_sum(&kept_mse) / kept_mse.len() as f64).sqrt(),
        curve,
    })
}

/// `Σ⟨ε_T, ε_C⟩ / √(Σ‖ε_T‖² · Σ‖ε_C‖²)` over rows, clamped to `[−1, 1]`.
/// Zero when either error vanishes identically.
pub fn correlation_coefficient(eps_t: ArrayView2<'_, f64>, eps_c: ArrayView2<'_, f64>) -> Result<f64> {
    if eps_t.dim() != eps_c.dim() {
        return Err(invalid("errors", "shapes differ"));
    }
    let cross: Vec<f64> = eps_t
        .outer_iter()
        .zip(eps_c.outer_iter())
        .map(|(a, b)| a.dot(&b))
        .collect();
    let tt: Vec<f64> = eps_t.outer_iter().map(|a| a.dot(&a)).collect();
    let cc: Vec<f64> = eps_c.outer_iter().map(|a| a.dot(&a)).collect();
    let den = (pairwise_sum(&tt) * pairwise_sum(&cc)).sqrt();
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok((pairwise_sum(&cross) / den).clamp(-1.0, 1.0))
}

/// Correlation `ρ(t)` between Tweedie and TSI errors, pooled over
/// `n_queries` draws from `p_t` and `n_batches` independent banks. Queries
/// are shared across banks at each knot. A knot is kept when the mean ESS
/// is at least `ess_fraction · N_ref`.
pub fn error_correlation_curve<F, R>(
    mut bank_factory: F,
    exact: &ExactScore,
    times: &[f64],
    n_queries: usize,
    n_batches: usize,
    ess_fraction: Option<f64>,
    rng: &mut R,
) -> Result<Vec<CurvePoint>>
where
    F: FnMut(usize) -> Result<ReferenceBank>,
    R: Rng + ?Sized,
{
    if n_queries == 0 || n_batches == 0 {
        return Err(invalid("n_queries/n_batches", "must be at least 1"));
    }
    let kernel = exact.kernel();
    let banks = (0..n_batches).map(&mut bank_factory).collect::<Result<Vec<_>>>()?;
    for b in &banks {
        check_dim(exact.dim(), b.dim())?;
        if b.scores().is_none() {
            return Err(Error::MissingColumn("score"));
        }
    }
    let fraction = ess_fraction.unwrap_or(DEFAULT_ESS_FRACTION);
    let floor = fraction * banks[0].n_ref() as f64;
    let d = exact.dim();
    let mut curve = Vec::with_capacity(times.len());
    for &t in times {
        let ys = sample_marginal(exact, t, n_queries, rng)?;
        let truth: Vec<Array1<f64>> = ys.outer_iter().map(|y| exact.score(y, t)).collect::<Result<_>>()?;
        let mut eps_t = Array2::zeros((n_batches * n_queries, d));
        let mut eps_c = Array2::zeros((n_batches * n_queries, d));
        let mut ess = Vec::with_capacity(n_batches * n_queries);
        for (b, bank) in banks.iter().enumerate() {
            let tsi = tsi_contributions(bank, kernel, t)?;
            let rows: Vec<(Array1<f64>, Array1<f64>, f64)> = ys
                .outer_iter()
                .into_par_iter()
                .zip(truth.par_iter())
                .map(|(y, s)| {
                    let w = prior_weights(bank, kernel, y, t)?;
                    let twd = snis_mean(&w, tweedie_contributions(bank, kernel, y, t)?.view())?;
                    let c = snis_mean(&w, tsi.view())?;
                    Ok((twd - s, c - s, w.ess))
                })
                .collect::<Result<_>>()?;
            for (q, (et, ec, e)) in rows.into_iter().enumerate() {
                eps_t.row_mut(b * n_queries + q).assign(&et);
                eps_c.row_mut(b * n_queries + q).assign(&ec);
                ess.push(e);
            }
        }
        let ess_mean = pairwise_sum(&ess) / ess.len() as f64;
        curve.push(CurvePoint {
            t,
            value: correlation_coefficient(eps_t.view(), eps_c.view())?,
            ess_mean: Some(ess_mean),
            kept: ess_mean >= floor,
        });
    }
    if !curve.iter().any(|p| p.kept) {
        return Err(Error::NoValidTimePoints);
    }
    Ok(curve)
}

/// `‖mean(samples) − α★‖ / √q`.
pub fn rmse_alpha(samples: ArrayView2<'_, f64>, alpha_star: ArrayView1<'_, f64>) -> Result<f64> {
    check_dim(alpha_star.len(), samples.ncols())?;
    let mean = samples
        .mean_axis(Axis(0))
        .ok_or_else(|| invalid("samples", "need at least one row"))?;
    Ok(sq(mean.view(), alpha_star).sqrt() / (alpha_star.len() as f64).sqrt())
}

/// `‖F(ᾱ) − y‖ / ‖y‖`.
pub fn forward_error<F>(forward: F, alpha_bar: ArrayView1<'_, f64>, y_clean: ArrayView1<'_, f64>) -> Result<f64>
where
    F: Fn(ArrayView1<'_, f64>) -> Array1<f64>,
{
    let norm = y_clean.dot(&y_clean).sqrt();
    if norm == 0.0 {
        return Err(Error::ZeroObservation);
    }
    let fy = forward(alpha_bar);
    check_dim(y_clean.len(), fy.len())?;
    Ok(sq(fy.view(), y_clean).sqrt() / norm)
}

/// `log(MMD(generated, a) / MMD(a, b))` with `a`, `b` two independent exact
/// draws. A median-heuristic bandwidth is fixed once on `a ∪ b` and shared by
/// both terms.
pub fn mmd_floor_ratio(
    generated: ArrayView2<'_, f64>,
    exact_a: ArrayView2<'_, f64>,
    exact_b: ArrayView2<'_, f64>,
    spec: &KernelSpec,
) -> Result<f64> {
    let spec = spec.resolved(&[exact_a, exact_b])?;
    let floor = mmd2(exact_a, exact_b, &spec)?.sqrt();
    if floor == 0.0 {
        return Err(Error::ZeroFloor);
    }
    Ok((mmd2(generated, exact_a, &spec)?.sqrt() / floor).ln())
}
