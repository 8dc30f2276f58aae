//! Data-only local Gaussian proxies for the clean score.
//!
//! Each reference point (anchor) gets a Gaussian fitted to its `k` nearest
//! neighbours with adaptive-bandwidth kernel weights. The proxy score at the
//! anchor is `Σᵢ⁻¹(μᵢ − xᵢ)`; a query-time variant mixes the Gaussians of the
//! nearest anchors.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};
use crate::math::{dot, log_sum_exp, sq_dist};
use crate::snis::ReferenceBank;

const LN_2PI: f64 = 1.837_877_066_409_345_5;
/// Relative (to the squared data diameter) floor on bandwidths and variances.
const REL_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProxyKind {
    Diag,
    Lrd,
}

/// How the bank's score column is filled from a fitted proxy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ProxyScoreMode {
    Anchor,
    Kmix { k_mix: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProxyConfig {
    pub kind: ProxyKind,
    pub k: usize,
    /// Retained rank for the low-rank-plus-diagonal fit.
    pub rank: usize,
    /// Diagonal ridge `τᵢ = γ · mean variance`.
    pub ridge_gamma: f64,
    /// Low-rank tail floor as a fraction of the mean retained eigenvalue.
    pub tail_floor: f64,
    pub score_mode: ProxyScoreMode,
}

impl ProxyConfig {
    pub fn diag(k: usize) -> Self {
        Self {
            kind: ProxyKind::Diag,
            k,
            rank: 1,
            ridge_gamma: 1e-2,
            tail_floor: 1e-3,
            score_mode: ProxyScoreMode::Anchor,
        }
    }

    pub fn lrd(k: usize, rank: usize) -> Self {
        Self {
            kind: ProxyKind::Lrd,
            rank,
            ..Self::diag(k)
        }
    }

    /// `k = 64`, `r = min(8, d)`, Diag.
    pub fn default_for(dim: usize) -> Self {
        Self {
            rank: dim.min(8),
            ..Self::diag(64)
        }
    }
}

/// Per-anchor covariance parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum ProxyCovariance {
    /// `Σᵢ = diag(vᵢ) + τᵢ I`.
    Diag { variances: Array2<f64>, ridge: Array1<f64> },
    /// `Σᵢ = diag(tailᵢ) + Vᵢ Λᵢ Vᵢᵀ` with `Vᵢ` of shape `d × r`.
    Lrd {
        factors: Array3<f64>,
        eigenvalues: Array2<f64>,
        tail: Array2<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProxyModel {
    anchors: Array2<f64>,
    mu: Array2<f64>,
    covariance: ProxyCovariance,
    k: usize,
}

impl ProxyModel {
    pub fn from_parts(anchors: Array2<f64>, mu: Array2<f64>, covariance: ProxyCovariance, k: usize) -> Result<Self> {
        let (n, d) = anchors.dim();
        check_dim(n, mu.nrows())?;
        check_dim(d, mu.ncols())?;
        match &covariance {
            ProxyCovariance::Diag { variances, ridge } => {
                check_dim(n, variances.nrows())?;
                check_dim(d, variances.ncols())?;
                check_dim(n, ridge.len())?;
                let bad = variances
                    .rows()
                    .into_iter()
                    .zip(ridge)
                    .any(|(row, r)| row.iter().any(|v| !(v + r > 0.0)));
                if bad {
                    return Err(Error::NotPositiveDefinite("proxy variances must be positive"));
                }
            }
            ProxyCovariance::Lrd {
                factors,
                eigenvalues,
                tail,
            } => {
                let (fn_, fd, r) = factors.dim();
                check_dim(n, fn_)?;
                check_dim(d, fd)?;
                check_dim(n, eigenvalues.nrows())?;
                check_dim(r, eigenvalues.ncols())?;
                check_dim(n, tail.nrows())?;
                check_dim(d, tail.ncols())?;
                if tail.iter().any(|v| !(*v > 0.0)) || eigenvalues.iter().any(|v| !(*v >= 0.0)) {
                    return Err(Error::NotPositiveDefinite(
                        "proxy tail must be positive, eigenvalues nonnegative",
                    ));
                }
            }
        }
        Ok(Self {
            anchors: anchors.as_standard_layout().into_owned(),
            mu: mu.as_standard_layout().into_owned(),
            covariance,
            k,
        })
    }

    pub fn n_anchors(&self) -> usize {
        self.anchors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.anchors.ncols()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn kind(&self) -> ProxyKind {
        match self.covariance {
            ProxyCovariance::Diag { .. } => ProxyKind::Diag,
            ProxyCovariance::Lrd { .. } => ProxyKind::Lrd,
        }
    }

    pub fn anchors(&self) -> ArrayView2<'_, f64> {
        self.anchors.view()
    }

    pub fn means(&self) -> ArrayView2<'_, f64> {
        self.mu.view()
    }

    pub fn covariance(&self) -> &ProxyCovariance {
        &self.covariance
    }

    /// `Σᵢ⁻¹ u`.
    fn solve(&self, i: usize, u: &[f64]) -> Vec<f64> {
        match &self.covariance {
            ProxyCovariance::Diag { variances, ridge } => u
                .iter()
                .zip(variances.row(i))
                .map(|(a, v)| a / (v + ridge[i]))
                .collect(),
            ProxyCovariance::Lrd {
                factors,
                eigenvalues,
                tail,
            } => {
                let v = factor_matrix(factors, i);
                woodbury_solve(
                    tail.row(i).as_slice().expect("row"),
                    &v,
                    eigenvalues.row(i).as_slice().expect("row"),
                    u,
                )
            }
        }
    }

    /// `log det Σᵢ`.
    fn log_det(&self, i: usize) -> f64 {
        match &self.covariance {
            ProxyCovariance::Diag { variances, ridge } => variances.row(i).iter().map(|v| (v + ridge[i]).ln()).sum(),
            ProxyCovariance::Lrd {
                factors,
                eigenvalues,
                tail,
            } => {
                let v = factor_matrix(factors, i);
                lowrank_log_det(
                    tail.row(i).as_slice().expect("row"),
                    &v,
                    eigenvalues.row(i).as_slice().expect("row"),
                )
            }
        }
    }

    /// `Σᵢ⁻¹(μᵢ − xᵢ)`.
    pub fn anchor_score(&self, i: usize) -> Result<Array1<f64>> {
        if i >= self.n_anchors() {
            return Err(invalid("anchor", format!("index {i} out of range")));
        }
        let diff: Vec<f64> = self
            .mu
            .row(i)
            .iter()
            .zip(self.anchors.row(i))
            .map(|(m, x)| m - x)
            .collect();
        Ok(Array1::from_vec(self.solve(i, &diff)))
    }

    /// Score of the uniform mixture of the `k_mix` nearest anchor Gaussians.
    pub fn kmix_score(&self, x: ArrayView1<'_, f64>, k_mix: usize) -> Result<Array1<f64>> {
        check_dim(self.dim(), x.len())?;
        if k_mix == 0 || k_mix > self.n_anchors() {
            return Err(invalid("k_mix", format!("must lie in [1, {}]", self.n_anchors())));
        }
        let x = x.to_vec();
        let anchors = self.anchors.as_slice().expect("standard layout");
        let near = nearest(anchors, self.dim(), &x, k_mix, None);
        let log_prior = -(k_mix as f64).ln();
        let mut logs = Vec::with_capacity(k_mix);
        let mut pulls = Vec::with_capacity(k_mix);
        for &(_, i) in &near {
            let diff: Vec<f64> = self.mu.row(i).iter().zip(&x).map(|(m, v)| m - v).collect();
            let pull = self.solve(i, &diff);
            let maha = dot(&diff, &pull);
            logs.push(log_prior - 0.5 * maha - 0.5 * (self.dim() as f64 * LN_2PI + self.log_det(i)));
            pulls.push(pull);
        }
        let lse = log_sum_exp(&logs);
        let mut out = Array1::zeros(self.dim());
        for (l, p) in logs.iter().zip(&pulls) {
            let w = (l - lse).exp();
            for (o, v) in out.iter_mut().zip(p) {
                *o += w * v;
            }
        }
        Ok(out)
    }

    /// Proxy scores at every anchor, per `mode`.
    pub fn scores(&self, mode: ProxyScoreMode) -> Result<Array2<f64>> {
        let rows: Vec<Array1<f64>> = (0..self.n_anchors())
            .into_par_iter()
            .map(|i| match mode {
                ProxyScoreMode::Anchor => self.anchor_score(i),
                ProxyScoreMode::Kmix { k_mix } => self.kmix_score(self.anchors.row(i), k_mix),
            })
            .collect::<Result<_>>()?;
        let d = self.dim();
        let mut out = Array2::zeros((rows.len(), d));
        for (mut o, r) in out.rows_mut().into_iter().zip(rows) {
            o.assign(&r);
        }
        Ok(out)
    }
}

fn factor_matrix(factors: &Array3<f64>, i: usize) -> DMatrix<f64> {
    let (_, d, r) = factors.dim();
    DMatrix::from_fn(d, r, |a, b| factors[[i, a, b]])
}

/// `(D + VΛVᵀ)⁻¹ u` via Woodbury with `U = VΛ^{1/2}`, which stays valid when
/// some retained eigenvalues are zero:
/// `D⁻¹u − D⁻¹U(I + UᵀD⁻¹U)⁻¹UᵀD⁻¹u`.
pub fn woodbury_solve(diag: &[f64], v: &DMatrix<f64>, eigenvalues: &[f64], u: &[f64]) -> Vec<f64> {
    let d = diag.len();
    let r = eigenvalues.len();
    let dinv_u: Vec<f64> = u.iter().zip(diag).map(|(a, b)| a / b).collect();
    if r == 0 {
        return dinv_u;
    }
    let sq: Vec<f64> = eigenvalues.iter().map(|l| l.max(0.0).sqrt()).collect();
    let uu = DMatrix::from_fn(d, r, |a, b| v[(a, b)] * sq[b]);
    let mut core = DMatrix::<f64>::identity(r, r);
    for a in 0..r {
        for b in 0..r {
            core[(a, b)] += (0..d).map(|l| uu[(l, a)] * uu[(l, b)] / diag[l]).sum::<f64>();
        }
    }
    let rhs = DVector::from_iterator(r, (0..r).map(|a| (0..d).map(|l| uu[(l, a)] * dinv_u[l]).sum::<f64>()));
    let sol = core.cholesky().expect("I + UᵀD⁻¹U is positive definite").solve(&rhs);
    (0..d)
        .map(|l| dinv_u[l] - (0..r).map(|a| uu[(l, a)] * sol[a]).sum::<f64>() / diag[l])
        .collect()
}

/// `log det(D + VΛVᵀ) = log det D + log det(I + UᵀD⁻¹U)`.
pub fn lowrank_log_det(diag: &[f64], v: &DMatrix<f64>, eigenvalues: &[f64]) -> f64 {
    let d = diag.len();
    let r = eigenvalues.len();
    let base: f64 = diag.iter().map(|x| x.ln()).sum();
    if r == 0 {
        return base;
    }
    let sq: Vec<f64> = eigenvalues.iter().map(|l| l.max(0.0).sqrt()).collect();
    let mut core = DMatrix::<f64>::identity(r, r);
    for a in 0..r {
        for b in 0..r {
            core[(a, b)] += (0..d)
                .map(|l| v[(l, a)] * sq[a] * v[(l, b)] * sq[b] / diag[l])
                .sum::<f64>();
        }
    }
    let chol = core.cholesky().expect("I + UᵀD⁻¹U is positive definite");
    base + 2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>()
}

/// `k` nearest rows of `points` to `x` as `(squared distance, index)`, ties
/// broken by index. `exclude` skips one row.
fn nearest(points: &[f64], d: usize, x: &[f64], k: usize, exclude: Option<usize>) -> Vec<(f64, usize)> {
    let mut all: Vec<(f64, usize)> = points
        .chunks_exact(d)
        .enumerate()
        .filter(|(j, _)| Some(*j) != exclude)
        .map(|(j, p)| (sq_dist(p, x), j))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < all.len() {
        all.select_nth_unstable_by(k - 1, cmp);
        all.truncate(k);
    }
    all.sort_by(cmp);
    all
}

/// Indices of the `k` nearest neighbours of every row, excluding the row itself.
pub fn knn_indices(points: ArrayView2<'_, f64>, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = points.nrows();
    if k == 0 || k >= n {
        return Err(invalid("k", format!("must lie in [1, {}), got {k}", n)));
    }
    let pts = points.as_standard_layout();
    let flat = pts.as_slice().expect("standard layout");
    let d = points.ncols();
    Ok((0..n)
        .into_par_iter()
        .map(|i| {
            nearest(flat, d, &flat[i * d..(i + 1) * d], k, Some(i))
                .into_iter()
                .map(|(_, j)| j)
                .collect()
        })
        .collect())
}

fn squared_diameter(points: &[f64], d: usize) -> f64 {
    let n = points.len() / d;
    let mut lo = vec![f64::INFINITY; d];
    let mut hi = vec![f64::NEG_INFINITY; d];
    for p in points.chunks_exact(d) {
        for l in 0..d {
            lo[l] = lo[l].min(p[l]);
            hi[l] = hi[l].max(p[l]);
        }
    }
    if n == 0 {
        return 0.0;
    }
    lo.iter().zip(&hi).map(|(a, b)| (b - a) * (b - a)).sum()
}

struct LocalFit {
    mu: Vec<f64>,
    cov: LocalCov,
}

enum LocalCov {
    Diag {
        variances: Vec<f64>,
        ridge: f64,
    },
    Lrd {
        factors: Vec<f64>,
        eigenvalues: Vec<f64>,
        tail: Vec<f64>,
    },
}

/// Fit a local Gaussian at every point.
pub fn fit_proxy(points: ArrayView2<'_, f64>, config: &ProxyConfig) -> Result<ProxyModel> {
    let (n, d) = points.dim();
    if n == 0 || d == 0 {
        return Err(invalid("points", "empty"));
    }
    if config.k < 2 {
        return Err(invalid("k", "must be at least 2"));
    }
    if config.k >= n {
        return Err(invalid("k", format!("must be below the number of points ({n})")));
    }
    if config.kind == ProxyKind::Lrd && (config.rank == 0 || config.rank > config.k.min(d)) {
        return Err(invalid("rank", format!("must lie in [1, {}]", config.k.min(d))));
    }
    if !(config.ridge_gamma >= 0.0) || !(config.tail_floor >= 0.0) {
        return Err(invalid("gamma", "must be nonnegative"));
    }
    let pts = points.as_standard_layout().into_owned();
    let flat = pts.as_slice().expect("standard layout");
    let diam2 = squared_diameter(flat, d);
    if !(diam2 > 0.0) {
        return Err(invalid("points", "all points coincide"));
    }
    let floor = REL_FLOOR * diam2;
    let neighbours = knn_indices(pts.view(), config.k)?;

    let fits: Vec<LocalFit> = neighbours
        .par_iter()
        .enumerate()
        .map(|(i, nb)| fit_anchor(flat, d, i, nb, config, floor))
        .collect();

    let mut mu = Array2::zeros((n, d));
    for (mut row, f) in mu.rows_mut().into_iter().zip(&fits) {
        row.assign(&ArrayView1::from(&f.mu));
    }
    let covariance = match config.kind {
        ProxyKind::Diag => {
            let mut variances = Array2::zeros((n, d));
            let mut ridge = Array1::zeros(n);
            for (i, f) in fits.iter().enumerate() {
                if let LocalCov::Diag { variances: v, ridge: r } = &f.cov {
                    variances.row_mut(i).assign(&ArrayView1::from(v));
                    ridge[i] = *r;
                }
            }
            ProxyCovariance::Diag { variances, ridge }
        }
        ProxyKind::Lrd => {
            let r = config.rank;
            let mut factors = Array3::zeros((n, d, r));
            let mut eigenvalues = Array2::zeros((n, r));
            let mut tail = Array2::zeros((n, d));
            for (i, f) in fits.iter().enumerate() {
                if let LocalCov::Lrd {
                    factors: v,
                    eigenvalues: e,
                    tail: t,
                } = &f.cov
                {
                    for a in 0..d {
                        for b in 0..r {
                            factors[[i, a, b]] = v[a * r + b];
                        }
                    }
                    eigenvalues.row_mut(i).assign(&ArrayView1::from(e));
                    tail.row_mut(i).assign(&ArrayView1::from(t));
                }
            }
            ProxyCovariance::Lrd {
                factors,
                eigenvalues,
                tail,
            }
        }
    };
    ProxyModel::from_parts(pts, mu, covariance, config.k)
}

fn fit_anchor(flat: &[f64], d: usize, i: usize, nb: &[usize], config: &ProxyConfig, floor: f64) -> LocalFit {
    let x = &flat[i * d..(i + 1) * d];
    let d2: Vec<f64> = nb.iter().map(|&j| sq_dist(&flat[j * d..(j + 1) * d], x)).collect();
    let h2 = d2.iter().copied().fold(0.0, f64::max).max(floor);
    let raw: Vec<f64> = d2.iter().map(|v| (-v / (2.0 * h2)).exp()).collect();
    let total: f64 = raw.iter().sum();
    let w: Vec<f64> = raw.iter().map(|v| v / total).collect();

    let mut mu = vec![0.0; d];
    for (wj, &j) in w.iter().zip(nb) {
        for (m, v) in mu.iter_mut().zip(&flat[j * d..(j + 1) * d]) {
            *m += wj * v;
        }
    }

    match config.kind {
        ProxyKind::Diag => {
            let mut var = vec![0.0; d];
            for (wj, &j) in w.iter().zip(nb) {
                for l in 0..d {
                    let r = flat[j * d + l] - mu[l];
                    var[l] += wj * r * r;
                }
            }
            let mean_var = var.iter().sum::<f64>() / d as f64;
            let ridge = config.ridge_gamma * mean_var;
            // Keep every effective variance strictly positive.
            for v in var.iter_mut() {
                if *v + ridge < floor {
                    *v = floor - ridge;
                }
            }
            LocalFit {
                mu,
                cov: LocalCov::Diag { variances: var, ridge },
            }
        }
        ProxyKind::Lrd => {
            let r = config.rank;
            let mut m = DMatrix::<f64>::zeros(d, d);
            for (wj, &j) in w.iter().zip(nb) {
                let res = DVector::from_iterator(d, (0..d).map(|l| flat[j * d + l] - mu[l]));
                m += &res * res.transpose() * *wj;
            }
            let eig = SymmetricEigen::new(m.clone());
            let mut order: Vec<usize> = (0..d).collect();
            order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
            let keep = &order[..r];
            let eigenvalues: Vec<f64> = keep.iter().map(|&c| eig.eigenvalues[c].max(0.0)).collect();
            let mut factors = vec![0.0; d * r];
            for (b, &c) in keep.iter().enumerate() {
                for a in 0..d {
                    factors[a * r + b] = eig.eigenvectors[(a, c)];
                }
            }
            let mean_ev = eigenvalues.iter().sum::<f64>() / r as f64;
            let tail_floor = (config.tail_floor * mean_ev).max(floor);
            let tail: Vec<f64> = (0..d)
                .map(|l| {
                    let low: f64 = (0..r).map(|b| factors[l * r + b].powi(2) * eigenvalues[b]).sum();
                    (m[(l, l)] - low).max(tail_floor)
                })
                .collect();
            LocalFit {
                mu,
                cov: LocalCov::Lrd {
                    factors,
                    eigenvalues,
                    tail,
                },
            }
        }
    }
}

/// Fit a proxy to `points` and return a bank whose score column holds the
/// proxy scores, together with the model.
pub fn bank_with_proxy(points: ArrayView2<'_, f64>, config: &ProxyConfig) -> Result<(ReferenceBank, ProxyModel)> {
    let model = fit_proxy(points, config)?;
    let scores = model.scores(config.score_mode)?;
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NotPositiveDefinite("proxy produced a non-finite score"));
    }
    let bank = ReferenceBank::new(points.to_owned())?.with_scores(scores)?;
    Ok((bank, model))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian_points(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| rng.sample(StandardNormal))
    }

    fn diag_model(anchor: Vec<f64>, mu: Vec<f64>, var: Vec<f64>) -> ProxyModel {
        let d = anchor.len();
        ProxyModel::from_parts(
            Array2::from_shape_vec((1, d), anchor).unwrap(),
            Array2::from_shape_vec((1, d), mu).unwrap(),
            ProxyCovariance::Diag {
                variances: Array2::from_shape_vec((1, d), var).unwrap(),
                ridge: array![0.0],
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn anchor_score_examples() {
        let m = diag_model(vec![0.3, 0.4], vec![0.3, 0.4], vec![1.0, 2.0]);
        assert_eq!(m.anchor_score(0).unwrap(), array![0.0, 0.0]);
        let m = diag_model(vec![0.0, 0.0], vec![2.0, 0.0], vec![2.0, 2.0]);
        assert_eq!(m.anchor_score(0).unwrap(), array![1.0, 0.0]);
        assert!(m.anchor_score(1).is_err());
    }

    #[test]
    fn lrd_anchor_matches_dense_solve() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let d = 4;
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let factors = Array3::from_shape_fn((1, d, 1), |(_, a, _)| v[a] / norm);
        let tail = Array2::from_shape_fn((1, d), |_| rng.random_range(0.1..1.0));
        let eig = array![[2.5]];
        let anchor = Array2::from_shape_fn((1, d), |_| rng.sample(StandardNormal));
        let mu = Array2::from_shape_fn((1, d), |_| rng.sample(StandardNormal));
        let m = ProxyModel::from_parts(
            anchor.clone(),
            mu.clone(),
            ProxyCovariance::Lrd {
                factors: factors.clone(),
                eigenvalues: eig.clone(),
                tail: tail.clone(),
            },
            1,
        )
        .unwrap();
        let vv = DVector::from_iterator(d, (0..d).map(|a| factors[[0, a, 0]]));
        let dense = DMatrix::from_diagonal(&DVector::from_iterator(d, tail.row(0).iter().copied()))
            + &vv * vv.transpose() * 2.5;
        let rhs = DVector::from_iterator(d, (0..d).map(|a| mu[[0, a]] - anchor[[0, a]]));
        let want = dense.clone().lu().solve(&rhs).unwrap();
        let got = m.anchor_score(0).unwrap();
        for a in 0..d {
            assert!((got[a] - want[a]).abs() < 1e-10);
        }
        assert_relative_eq!(m.log_det(0), dense.determinant().ln(), epsilon = 1e-10);
    }

    #[test]
    fn woodbury_handles_zero_eigenvalue() {
        let v = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let out = woodbury_solve(&[2.0, 4.0], &v, &[0.0], &[2.0, 4.0]);
        assert_relative_eq!(out[0], 1.0);
        assert_relative_eq!(out[1], 1.0);
    }

    #[test]
    fn kmix_examples() {
        let pts = gaussian_points(200, 2, 3);
        let model = fit_proxy(pts.view(), &ProxyConfig::diag(10)).unwrap();
        let x = array![0.1, -0.2];
        let one = model.kmix_score(x.view(), 1).unwrap();
        let flat = pts.as_slice().unwrap();
        let (_, i) = nearest(flat, 2, &x.to_vec(), 1, None)[0];
        let diff: Vec<f64> = model.means().row(i).iter().zip(x.iter()).map(|(m, v)| m - v).collect();
        let want = model.solve(i, &diff);
        for j in 0..2 {
            assert_relative_eq!(one[j], want[j], epsilon = 1e-14);
        }
        assert!(model.kmix_score(x.view(), 0).is_err());
        assert!(model.kmix_score(x.view(), 201).is_err());
    }

    #[test]
    fn kmix_duplicate_anchors_match_single() {
        let anchors = array![[0.0, 0.0], [0.01, 0.0], [0.0, 0.01]];
        let mu = array![[0.5, 0.5], [0.5, 0.5], [0.5, 0.5]];
        let m = ProxyModel::from_parts(
            anchors,
            mu,
            ProxyCovariance::Diag {
                variances: Array2::from_elem((3, 2), 0.7),
                ridge: Array1::from_elem(3, 0.1),
            },
            2,
        )
        .unwrap();
        let x = array![0.2, -0.1];
        let a = m.kmix_score(x.view(), 1).unwrap();
        let b = m.kmix_score(x.view(), 3).unwrap();
        for j in 0..2 {
            assert_relative_eq!(a[j], b[j], epsilon = 1e-14);
        }
    }

    #[test]
    fn kmix_matches_finite_differences() {
        let anchors = array![[0.0, 0.0], [1.0, 0.5], [-0.5, 1.0]];
        let mu = array![[0.1, -0.1], [0.9, 0.7], [-0.4, 0.8]];
        let m = ProxyModel::from_parts(
            anchors,
            mu.clone(),
            ProxyCovariance::Diag {
                variances: array![[0.3, 0.5], [0.2, 0.4], [0.6, 0.25]],
                ridge: array![0.01, 0.02, 0.0],
            },
            2,
        )
        .unwrap();
        let logp = |x: &[f64]| {
            let terms: Vec<f64> = (0..3)
                .map(|i| {
                    let mut s = -(3f64).ln();
                    for l in 0..2 {
                        let var = match m.covariance() {
                            ProxyCovariance::Diag { variances, ridge } => variances[[i, l]] + ridge[i],
                            _ => unreachable!(),
                        };
                        s += -0.5 * (x[l] - mu[[i, l]]).powi(2) / var - 0.5 * (LN_2PI + var.ln());
                    }
                    s
                })
                .collect();
            log_sum_exp(&terms)
        };
        let x = [0.3, 0.4];
        let s = m.kmix_score(ArrayView1::from(&x), 3).unwrap();
        let h = 1e-5;
        for l in 0..2 {
            let mut p = x;
            let mut q = x;
            p[l] += h;
            q[l] -= h;
            let fd = (logp(&p) - logp(&q)) / (2.0 * h);
            assert!((fd - s[l]).abs() <= 1e-5 * s[l].abs().max(1.0), "{fd} vs {}", s[l]);
        }
    }

    #[test]
    fn neighbours_stay_in_cluster() {
        let mut pts = gaussian_points(100, 2, 5).mapv(|v| 0.1 * v);
        for mut r in pts.rows_mut().into_iter().skip(50) {
            r[0] += 100.0;
        }
        let nb = knn_indices(pts.view(), 20).unwrap();
        for (i, list) in nb.iter().enumerate() {
            assert!(!list.contains(&i));
            assert!(list.iter().all(|&j| (j < 50) == (i < 50)));
        }
    }

    #[test]
    fn constant_neighbours_keep_positive_variance() {
        let mut pts = Array2::zeros((12, 2));
        pts[[11, 0]] = 5.0;
        let cfg = ProxyConfig {
            ridge_gamma: 0.0,
            ..ProxyConfig::diag(3)
        };
        let m = fit_proxy(pts.view(), &cfg).unwrap();
        if let ProxyCovariance::Diag { variances, ridge } = m.covariance() {
            for (i, row) in variances.rows().into_iter().enumerate() {
                assert!(row.iter().all(|v| v + ridge[i] > 0.0));
            }
        }
        assert!(m.anchor_score(0).unwrap().iter().all(|v| v.is_finite()));
        assert!(fit_proxy(Array2::zeros((5, 2)).view(), &cfg).is_err());
    }

    #[test]
    fn fit_rejects_bad_parameters() {
        let pts = gaussian_points(20, 3, 1);
        assert!(fit_proxy(pts.view(), &ProxyConfig::diag(20)).is_err());
        assert!(fit_proxy(pts.view(), &ProxyConfig::diag(1)).is_err());
        assert!(fit_proxy(pts.view(), &ProxyConfig::lrd(5, 4)).is_err());
        assert!(fit_proxy(pts.view(), &ProxyConfig::lrd(5, 2)).is_ok());
    }

    #[test]
    fn bank_with_proxy_is_deterministic_and_finite() {
        let pts = gaussian_points(400, 2, 8);
        let cfg = ProxyConfig::lrd(20, 1);
        let (a, _) = bank_with_proxy(pts.view(), &cfg).unwrap();
        let (b, _) = bank_with_proxy(pts.view(), &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.scores().unwrap().iter().all(|v| v.is_finite()));
        let kmix = ProxyConfig {
            score_mode: ProxyScoreMode::Kmix { k_mix: 4 },
            ..cfg
        };
        let (c, _) = bank_with_proxy(pts.view(), &kmix).unwrap();
        assert!(c.scores().unwrap().iter().all(|v| v.is_finite()));
    }
}
