//! Self-normalised importance weights over a fixed reference bank.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{check_dim, invalid, Error, Result};
use crate::kernel::AffineKernel;
use crate::math::pairwise_sum;
use crate::targets::{GaussianMixture, LinearGaussianLikelihood};

/// Above this bank size the log-weights are evaluated in parallel.
const PAR_THRESHOLD: usize = 1 << 14;

/// Reference particles `x₀ⁱ` with optional clean scores and log-likelihoods.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceBank {
    points: Array2<f64>,
    scores: Option<Array2<f64>>,
    log_likelihoods: Option<Array1<f64>>,
}

impl ReferenceBank {
    pub fn new(points: Array2<f64>) -> Result<Self> {
        if points.nrows() == 0 || points.ncols() == 0 {
            return Err(invalid("bank", "needs at least one particle of positive dimension"));
        }
        Ok(Self {
            points: points.as_standard_layout().into_owned(),
            scores: None,
            log_likelihoods: None,
        })
    }

    pub fn with_scores(mut self, scores: Array2<f64>) -> Result<Self> {
        check_dim(self.n_ref(), scores.nrows())?;
        check_dim(self.dim(), scores.ncols())?;
        self.scores = Some(scores.as_standard_layout().into_owned());
        Ok(self)
    }

    pub fn with_log_likelihoods(mut self, log_likelihoods: Array1<f64>) -> Result<Self> {
        check_dim(self.n_ref(), log_likelihoods.len())?;
        self.log_likelihoods = Some(log_likelihoods);
        Ok(self)
    }

    /// `n` draws from `target` with their exact clean scores.
    pub fn from_target<R: Rng + ?Sized>(target: &GaussianMixture, n: usize, rng: &mut R) -> Result<Self> {
        if n == 0 {
            return Err(invalid("n_ref", "must be at least 1"));
        }
        let points = target.sample(n, rng);
        let mut scores = Array2::zeros(points.raw_dim());
        for (p, mut s) in points.rows().into_iter().zip(scores.rows_mut()) {
            s.assign(&target.score(p)?);
        }
        Self::new(points)?.with_scores(scores)
    }

    /// Posterior bank: log-likelihood column filled in and the score column
    /// tilted to `s₀ + ∇ log L`.
    pub fn tilted(&self, lik: &LinearGaussianLikelihood) -> Result<Self> {
        check_dim(self.dim(), lik.input_dim())?;
        let scores = self.scores.as_ref().ok_or(Error::MissingColumn("score"))?;
        let mut tilted = scores.clone();
        let mut logl = Array1::zeros(self.n_ref());
        for ((p, mut s), l) in self
            .points
            .rows()
            .into_iter()
            .zip(tilted.rows_mut())
            .zip(logl.iter_mut())
        {
            s += &lik.grad_log_likelihood(p)?;
            *l = lik.log_likelihood(p)?;
        }
        Ok(Self {
            points: self.points.clone(),
            scores: Some(tilted),
            log_likelihoods: Some(logl),
        })
    }

    /// Rows `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(invalid("indices", "empty subset"));
        }
        Ok(Self {
            points: self.points.select(Axis(0), indices),
            scores: self.scores.as_ref().map(|s| s.select(Axis(0), indices)),
            log_likelihoods: self.log_likelihoods.as_ref().map(|l| l.select(Axis(0), indices)),
        })
    }

    pub fn n_ref(&self) -> usize {
        self.points.nrows()
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn scores(&self) -> Option<ArrayView2<'_, f64>> {
        self.scores.as_ref().map(|s| s.view())
    }

    pub fn log_likelihoods(&self) -> Option<ArrayView1<'_, f64>> {
        self.log_likelihoods.as_ref().map(|l| l.view())
    }

    pub(crate) fn points_slice(&self) -> &[f64] {
        self.points.as_slice().expect("standard layout")
    }

    pub(crate) fn scores_slice(&self) -> Option<&[f64]> {
        self.scores.as_ref().map(|s| s.as_slice().expect("standard layout"))
    }
}

/// Normalised importance weights with their log-normaliser and ESS.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSet {
    pub weights: Array1<f64>,
    pub log_normalizer: f64,
    pub ess: f64,
}

impl WeightSet {
    /// Normalise unnormalised log-weights with a max shift.
    pub fn from_log_weights(log_weights: &[f64]) -> Result<Self> {
        if log_weights.is_empty() {
            return Err(invalid("weights", "empty"));
        }
        if log_weights.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(invalid("weights", "log-weights must be finite or -inf"));
        }
        let max = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateWeights);
        }
        let shifted: Vec<f64> = log_weights.iter().map(|v| (v - max).exp()).collect();
        let total = pairwise_sum(&shifted);
        let weights = Array1::from_iter(shifted.iter().map(|w| w / total));
        let ess = ess(weights.view());
        Ok(Self {
            weights,
            log_normalizer: max + total.ln(),
            ess,
        })
    }

    pub fn sum_sq(&self) -> f64 {
        sum_sq(self.weights.view())
    }
}

fn sum_sq(w: ArrayView1<'_, f64>) -> f64 {
    let sq: Vec<f64> = w.iter().map(|v| v * v).collect();
    pairwise_sum(&sq)
}

/// `1 / Σ w̃ᵢ²`.
pub fn ess(weights: ArrayView1<'_, f64>) -> f64 {
    1.0 / sum_sq(weights)
}

/// Unnormalised log transition weights `log p_{t|0}(y | x₀ⁱ)`.
pub fn log_transition_weights(
    bank: &ReferenceBank,
    kernel: &AffineKernel,
    y: ArrayView1<'_, f64>,
    t: f64,
) -> Result<Vec<f64>> {
    check_dim(bank.dim(), kernel.dim)?;
    check_dim(bank.dim(), y.len())?;
    let tr = kernel.transition(t)?;
    let d = bank.dim();
    let y = y.to_vec();
    let row = |x: &[f64]| {
        let dist2: f64 = x
            .iter()
            .zip(&y)
            .map(|(xi, yi)| {
                let r = yi - tr.phi * xi - tr.offset;
                r * r
            })
            .sum();
        tr.log_density(dist2)
    };
    let pts = bank.points_slice();
    Ok(if bank.n_ref() >= PAR_THRESHOLD {
        pts.par_chunks_exact(d).map(row).collect()
    } else {
        pts.chunks_exact(d).map(row).collect()
    })
}

/// `w̃ᵢ ∝ p_{t|0}(y | x₀ⁱ)`.
pub fn prior_weights(bank: &ReferenceBank, kernel: &AffineKernel, y: ArrayView1<'_, f64>, t: f64) -> Result<WeightSet> {
    WeightSet::from_log_weights(&log_transition_weights(bank, kernel, y, t)?)
}

/// `αᵢ ∝ p_{t|0}(y | x₀ⁱ) L(x₀ⁱ)`.
pub fn posterior_weights(
    bank: &ReferenceBank,
    kernel: &AffineKernel,
    y: ArrayView1<'_, f64>,
    t: f64,
) -> Result<WeightSet> {
    let logl = bank.log_likelihoods().ok_or(Error::MissingColumn("log-likelihood"))?;
    let mut lw = log_transition_weights(bank, kernel, y, t)?;
    let max_l = logl.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max_l == f64::NEG_INFINITY {
        return Err(Error::DegenerateWeights);
    }
    // Tilting by `log L − max log L` leaves the weights untouched when the
    // likelihood is constant.
    for (w, l) in lw.iter_mut().zip(logl.iter()) {
        *w += l - max_l;
    }
    let mut ws = WeightSet::from_log_weights(&lw)?;
    ws.log_normalizer += max_l;
    Ok(ws)
}

/// `Σ w̃ᵢ vᵢ`.
pub fn snis_mean(weights: &WeightSet, values: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    check_dim(weights.weights.len(), values.nrows())?;
    Ok(weights.weights.dot(&values))
}

/// Plug-in variances of the two SNIS estimators and their raw covariance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PluginMoments {
    pub sigma_c2: f64,
    pub sigma_t2: f64,
    pub cov: f64,
}

/// Plug-in moments from TSI contributions `a` and Tweedie contributions `b`.
pub fn plugin_moments(weights: &WeightSet, a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<PluginMoments> {
    let n = weights.weights.len();
    check_dim(n, a.nrows())?;
    check_dim(n, b.nrows())?;
    check_dim(a.ncols(), b.ncols())?;
    let s2 = weights.sum_sq();
    let denom = 1.0 - s2;
    if !(denom > f64::EPSILON) {
        return Err(Error::EssCollapse);
    }
    let ma = snis_mean(weights, a)?;
    let mb = snis_mean(weights, b)?;
    let (mut sa, mut sb, mut sab) = (0.0, 0.0, 0.0);
    for ((w, ar), br) in weights.weights.iter().zip(a.rows()).zip(b.rows()) {
        let w2 = w * w;
        let (mut na, mut nb, mut ip) = (0.0, 0.0, 0.0);
        for (((x, mx), y), my) in ar.iter().zip(&ma).zip(br.iter()).zip(&mb) {
            let da = x - mx;
            let db = y - my;
            na += da * da;
            nb += db * db;
            ip += da * db;
        }
        sa += w2 * na;
        sb += w2 * nb;
        sab += w2 * ip;
    }
    Ok(PluginMoments {
        sigma_c2: sa / denom,
        sigma_t2: sb / denom,
        cov: sab / denom,
    })
}

/// Coordinate-wise median across batch estimates.
pub fn median_of_means(batch_estimates: &[Array1<f64>]) -> Result<Array1<f64>> {
    let first = batch_estimates
        .first()
        .ok_or_else(|| invalid("batches", "need at least one"))?;
    let d = first.len();
    for b in batch_estimates {
        check_dim(d, b.len())?;
    }
    let mut out = Array1::zeros(d);
    let mut col = vec![0.0; batch_estimates.len()];
    for j in 0..d {
        for (c, b) in col.iter_mut().zip(batch_estimates) {
            *c = b[j];
        }
        out[j] = median(&mut col);
    }
    Ok(out)
}

/// Median of a slice (mean of the two middle values for even length).
pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Seeded shuffle of `0..n` cut into `n_batches` contiguous blocks.
pub fn mom_partition(n: usize, n_batches: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n_batches == 0 || n_batches > n {
        return Err(invalid("n_batches", format!("must lie in [1, {n}], got {n_batches}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = n / n_batches;
    let extra = n % n_batches;
    let mut out = Vec::with_capacity(n_batches);
    let mut start = 0;
    for b in 0..n_batches {
        let len = base + usize::from(b < extra);
        out.push(idx[start..start + len].to_vec());
        start += len;
    }
    Ok(out)
}
