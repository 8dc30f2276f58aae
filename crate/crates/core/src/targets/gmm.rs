use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2, ArrayView1};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::covariance::{Covariance, CovarianceSpec};
use super::likelihood::LinearGaussianLikelihood;
use crate::error::{check_dim, invalid, Error, Result};
use crate::kernel::AffineKernel;
use crate::math::log_sum_exp;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Finite mixture of Gaussians `Σ_k w_k N(μ_k, Σ_k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MixtureSpec", into = "MixtureSpec")]
pub struct GaussianMixture {
    dim: usize,
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covariances: Vec<Covariance>,
    /// `log w_k − ½ log det(2πΣ_k)` per component.
    log_norms: Vec<f64>,
    name: Option<String>,
    seed: Option<u64>,
}

/// JSON document describing a mixture preset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<CovarianceSpec>,
}

impl TryFrom<MixtureSpec> for GaussianMixture {
    type Error = Error;

    fn try_from(spec: MixtureSpec) -> Result<Self> {
        let covs = spec
            .covariances
            .iter()
            .map(Covariance::from_spec)
            .collect::<Result<Vec<_>>>()?;
        let mut gmm = GaussianMixture::new(spec.weights, spec.means, covs)?;
        gmm.name = spec.name;
        gmm.seed = spec.seed;
        Ok(gmm)
    }
}

impl From<GaussianMixture> for MixtureSpec {
    fn from(g: GaussianMixture) -> Self {
        MixtureSpec {
            name: g.name,
            seed: g.seed,
            weights: g.weights,
            means: g.means,
            covariances: g.covariances.iter().map(Covariance::to_spec).collect(),
        }
    }
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, covariances: Vec<Covariance>) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || covariances.len() != k {
            return Err(invalid(
                "mixture",
                "weights, means and covariances must be non-empty and of equal length",
            ));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(invalid("mixture", "weights must be nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(invalid("mixture", format!("weights sum to {total}, not 1")));
        }
        let dim = means[0].len();
        if dim == 0 {
            return Err(invalid("mixture", "zero dimension"));
        }
        for (m, c) in means.iter().zip(&covariances) {
            check_dim(dim, m.len())?;
            check_dim(dim, c.dim())?;
        }
        let log_norms = weights
            .iter()
            .zip(&covariances)
            .map(|(w, c)| w.ln() - 0.5 * (dim as f64 * LN_2PI + c.log_det()))
            .collect();
        Ok(Self {
            dim,
            weights,
            means,
            covariances,
            log_norms,
            name: None,
            seed: None,
        })
    }

    /// Single Gaussian `N(mean, cov)`.
    pub fn gaussian(mean: Vec<f64>, cov: Covariance) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![cov])
    }

    /// Standard normal `N(0, I_d)`.
    pub fn standard_normal(dim: usize) -> Result<Self> {
        Self::gaussian(vec![0.0; dim], Covariance::isotropic(dim, 1.0)?)
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }

    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[Covariance] {
        &self.covariances
    }

    /// Per-component `(log w_k + log N(x; μ_k, Σ_k), Σ_k⁻¹(μ_k − x))`.
    fn component_terms(&self, x: &[f64]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let mut logs = Vec::with_capacity(self.n_components());
        let mut pulls = Vec::with_capacity(self.n_components());
        for ((mean, cov), log_norm) in self.means.iter().zip(&self.covariances).zip(&self.log_norms) {
            let diff: Vec<f64> = mean.iter().zip(x).map(|(m, v)| m - v).collect();
            let pull = cov.solve(&diff);
            let maha: f64 = diff.iter().zip(&pull).map(|(a, b)| a * b).sum();
            logs.push(log_norm - 0.5 * maha);
            pulls.push(pull);
        }
        (logs, pulls)
    }

    pub fn log_density(&self, x: ArrayView1<'_, f64>) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        let x = x.to_vec();
        let (logs, _) = self.component_terms(&x);
        Ok(log_sum_exp(&logs))
    }

    /// `∇ₓ log p(x)`.
    pub fn score(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        Ok(self.log_density_and_score(x)?.1)
    }

    pub fn log_density_and_score(&self, x: ArrayView1<'_, f64>) -> Result<(f64, Array1<f64>)> {
        check_dim(self.dim, x.len())?;
        let x = x.to_vec();
        let (logs, pulls) = self.component_terms(&x);
        let lse = log_sum_exp(&logs);
        let mut score = Array1::zeros(self.dim);
        for (l, pull) in logs.iter().zip(&pulls) {
            let r = (l - lse).exp();
            if r == 0.0 {
                continue;
            }
            for (s, p) in score.iter_mut().zip(pull) {
                *s += r * p;
            }
        }
        Ok((lse, score))
    }

    /// `n` i.i.d. draws, one per row.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Array2<f64> {
        let index = WeightedIndex::new(&self.weights).expect("weights validated at construction");
        let mut out = Array2::zeros((n, self.dim));
        let mut z = vec![0.0; self.dim];
        for mut row in out.rows_mut() {
            let k = index.sample(rng);
            for v in z.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let shifted = self.covariances[k].mul_sqrt(&z);
            for ((o, m), s) in row.iter_mut().zip(&self.means[k]).zip(&shifted) {
                *o = m + s;
            }
        }
        out
    }

    /// Law of `X_t` when `X_0` follows this mixture and the forward process is OU.
    pub fn diffused(&self, kernel: &AffineKernel, t: f64) -> Result<Self> {
        if !kernel.is_ou() {
            return Err(Error::UnsupportedKernel(
                "diffused mixtures are implemented for OU only",
            ));
        }
        check_dim(self.dim, kernel.dim)?;
        let phi = kernel.phi(t)?;
        let var = kernel.noise_variance(t)?;
        let means = self.means.iter().map(|m| m.iter().map(|v| phi * v).collect()).collect();
        let covs = self
            .covariances
            .iter()
            .map(|c| c.scaled_plus_identity(phi * phi, var))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Self::new(self.weights.clone(), means, covs)?;
        out.name = self.name.clone();
        out.seed = self.seed;
        Ok(out)
    }

    /// Exact posterior `p(x | y_obs) ∝ p(x) N(y_obs; Ax, σ²I)`, again a mixture.
    pub fn conjugate_posterior(&self, lik: &LinearGaussianLikelihood) -> Result<Self> {
        check_dim(self.dim, lik.input_dim())?;
        let a = lik.operator();
        let s2 = lik.sigma() * lik.sigma();
        let y = lik.observation();
        let m = lik.output_dim();
        let ata = a.transpose() * a / s2;
        let aty = a.transpose() * y / s2;

        let mut log_w = Vec::with_capacity(self.n_components());
        let mut means = Vec::with_capacity(self.n_components());
        let mut covs = Vec::with_capacity(self.n_components());
        for ((w, mean), cov) in self.weights.iter().zip(&self.means).zip(&self.covariances) {
            let mu = DVector::from_column_slice(mean);
            let prior_prec = cov.precision();
            let post_prec = &prior_prec + &ata;
            let post_chol = post_prec
                .clone()
                .cholesky()
                .ok_or(Error::NotPositiveDefinite("posterior precision"))?;
            let post_cov = post_chol.inverse();
            let post_mean = post_chol.solve(&(&prior_prec * &mu + &aty));

            // Component evidence N(y; Aμ, AΣAᵀ + σ²I), in log space.
            let pred_cov = a * cov.to_dense() * a.transpose() + DMatrix::identity(m, m) * s2;
            let pred_chol = pred_cov
                .cholesky()
                .ok_or(Error::NotPositiveDefinite("predictive covariance"))?;
            let resid = y - a * &mu;
            let sol = pred_chol.solve(&resid);
            let log_det = 2.0 * pred_chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
            let log_ev = -0.5 * (resid.dot(&sol) + log_det + m as f64 * LN_2PI);
            log_w.push(w.ln() + log_ev);

            means.push(post_mean.as_slice().to_vec());
            covs.push(Covariance::full(post_cov)?);
        }
        let lse = log_sum_exp(&log_w);
        let mut weights: Vec<f64> = log_w.iter().map(|l| (l - lse).exp()).collect();
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        let mut out = Self::new(weights, means, covs)?;
        out.name = self.name.as_ref().map(|n| format!("{n}|posterior"));
        Ok(out)
    }
}

/// Monte Carlo estimate of `√E_{p₀}‖Ax‖²`, the signal scale that converts a
/// relative noise level into an absolute one.
pub fn signal_scale<R: Rng + ?Sized>(
    prior: &GaussianMixture,
    operator: &DMatrix<f64>,
    n_mc: usize,
    rng: &mut R,
) -> Result<f64> {
    if n_mc == 0 {
        return Err(invalid("n_mc", "must be at least 1"));
    }
    check_dim(prior.dim(), operator.ncols())?;
    let draws = prior.sample(n_mc, rng);
    let mut acc = 0.0;
    for row in draws.rows() {
        let x = DVector::from_iterator(row.len(), row.iter().copied());
        acc += (operator * x).norm_squared();
    }
    Ok((acc / n_mc as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bimodal_1d() -> GaussianMixture {
        GaussianMixture::new(
            vec![0.5, 0.5],
            vec![vec![-1.0], vec![1.0]],
            vec![Covariance::isotropic(1, 1.0).unwrap(); 2],
        )
        .unwrap()
    }

    #[test]
    fn log_density_examples() {
        let g = GaussianMixture::standard_normal(1).unwrap();
        assert_relative_eq!(
            g.log_density(array![0.0].view()).unwrap(),
            -0.5 * (2.0 * std::f64::consts::PI).ln(),
            epsilon = 1e-15
        );
        let dup = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![vec![0.3], vec![0.3]],
            vec![Covariance::isotropic(1, 2.0).unwrap(); 2],
        )
        .unwrap();
        let single = GaussianMixture::gaussian(vec![0.3], Covariance::isotropic(1, 2.0).unwrap()).unwrap();
        for x in [-1.0, 0.0, 2.5] {
            assert_relative_eq!(
                dup.log_density(array![x].view()).unwrap(),
                single.log_density(array![x].view()).unwrap(),
                epsilon = 1e-14
            );
        }
        // ½N(0;−1,1) + ½N(0;1,1) = e^{−½}/√(2π)
        let expected = ((-0.5f64).exp() / (2.0 * std::f64::consts::PI).sqrt()).ln();
        assert_relative_eq!(
            bimodal_1d().log_density(array![0.0].view()).unwrap(),
            expected,
            epsilon = 1e-14
        );
    }

    #[test]
    fn score_examples() {
        let g = GaussianMixture::standard_normal(3).unwrap();
        let y = array![0.2, -1.0, 3.0];
        assert_eq!(g.score(y.view()).unwrap(), -&y);

        let sigma = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let mu0 = vec![1.0, -1.0];
        let g = GaussianMixture::gaussian(mu0.clone(), Covariance::full(sigma.clone()).unwrap()).unwrap();
        let x = array![0.3, 0.7];
        let expected = -sigma.try_inverse().unwrap() * DVector::from_vec(vec![0.3 - 1.0, 0.7 + 1.0]);
        let s = g.score(x.view()).unwrap();
        assert_relative_eq!(s[0], expected[0], epsilon = 1e-13);
        assert_relative_eq!(s[1], expected[1], epsilon = 1e-13);

        assert_eq!(bimodal_1d().score(array![0.0].view()).unwrap()[0], 0.0);
    }

    #[test]
    fn sample_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let g = GaussianMixture::standard_normal(1).unwrap();
        let draws = g.sample(n, &mut rng);
        let mean = draws.mean().unwrap();
        assert!(mean.abs() < 4.0 / (n as f64).sqrt());

        let g = GaussianMixture::new(
            vec![1.0, 0.0],
            vec![vec![5.0], vec![-5.0]],
            vec![Covariance::isotropic(1, 0.01).unwrap(); 2],
        )
        .unwrap();
        assert!(g.sample(1000, &mut rng).iter().all(|v| *v > 4.0));

        let sigma = DMatrix::from_row_slice(2, 2, &[1.5, -0.4, -0.4, 0.7]);
        let g = GaussianMixture::gaussian(vec![0.0, 0.0], Covariance::full(sigma.clone()).unwrap()).unwrap();
        let draws = g.sample(n, &mut rng);
        let mut emp = DMatrix::<f64>::zeros(2, 2);
        for r in draws.rows() {
            let v = DVector::from_iterator(2, r.iter().copied());
            emp += &v * v.transpose();
        }
        emp /= n as f64;
        assert!((emp - sigma).norm() < 0.05);
    }

    #[test]
    fn diffused_examples() {
        let k = AffineKernel::ou(2);
        let g = GaussianMixture::new(
            vec![0.3, 0.7],
            vec![vec![2.0, 0.0], vec![-1.0, 1.0]],
            vec![
                Covariance::isotropic(2, 0.1).unwrap(),
                Covariance::full(DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.2])).unwrap(),
            ],
        )
        .unwrap();
        let same = g.diffused(&k, 0.0).unwrap();
        for (a, b) in same.means().iter().zip(g.means()) {
            assert_eq!(a, b);
        }
        assert!((same.covariances()[1].to_dense() - g.covariances()[1].to_dense()).norm() < 1e-15);

        let sn = GaussianMixture::standard_normal(2).unwrap().diffused(&k, 0.7).unwrap();
        assert!((sn.covariances()[0].to_dense() - DMatrix::identity(2, 2)).norm() < 1e-15);

        let far = g.diffused(&k, 40.0).unwrap();
        for (m, c) in far.means().iter().zip(far.covariances()) {
            assert!(m.iter().all(|v| v.abs() < 1e-15));
            assert!((c.to_dense() - DMatrix::identity(2, 2)).norm() < 1e-12);
        }
        assert!(g
            .diffused(
                &AffineKernel::ve(2, crate::kernel::Schedule::constant(1.0).unwrap()),
                0.5
            )
            .is_err());
    }

    #[test]
    fn json_round_trip() {
        let g = bimodal_1d().with_name("bimodal").with_seed(9);
        let s = serde_json::to_string(&g).unwrap();
        let back: GaussianMixture = serde_json::from_str(&s).unwrap();
        assert_eq!(g, back);
        assert!(serde_json::from_str::<GaussianMixture>(
            r#"{"weights":[0.5,0.6],"means":[[0],[1]],"covariances":[{"diagonal":[1]},{"diagonal":[1]}]}"#
        )
        .is_err());
    }

    #[test]
    fn signal_scale_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = GaussianMixture::standard_normal(3).unwrap();
        assert_eq!(signal_scale(&g, &DMatrix::zeros(3, 3), 10, &mut rng).unwrap(), 0.0);
        assert!(signal_scale(&g, &DMatrix::identity(3, 3), 0, &mut rng).is_err());
    }
}
