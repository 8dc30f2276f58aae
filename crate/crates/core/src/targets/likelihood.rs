use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use super::gmm::GaussianMixture;
use crate::error::{check_dim, invalid, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `y_obs | x ~ N(Ax, σ² I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussianLikelihood {
    a: DMatrix<f64>,
    sigma: f64,
    y_obs: DVector<f64>,
}

impl LinearGaussianLikelihood {
    pub fn new(a: DMatrix<f64>, sigma: f64, y_obs: DVector<f64>) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(invalid("sigma", format!("must be positive and finite, got {sigma}")));
        }
        check_dim(a.nrows(), y_obs.len())?;
        if a.ncols() == 0 {
            return Err(invalid("operator", "zero columns"));
        }
        Ok(Self { a, sigma, y_obs })
    }

    /// Diagonal operator `A = diag(1/i)`, `i = 1..d`.
    pub fn harmonic_operator(dim: usize) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_iterator(dim, (1..=dim).map(|i| 1.0 / i as f64)))
    }

    pub fn operator(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn observation(&self) -> &DVector<f64> {
        &self.y_obs
    }

    pub fn input_dim(&self) -> usize {
        self.a.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.a.nrows()
    }

    fn residual(&self, x: ArrayView1<'_, f64>) -> Result<DVector<f64>> {
        check_dim(self.input_dim(), x.len())?;
        let x = DVector::from_iterator(x.len(), x.iter().copied());
        Ok(&self.y_obs - &self.a * x)
    }

    /// Normalised `log N(y_obs; Ax, σ²I)`.
    pub fn log_likelihood(&self, x: ArrayView1<'_, f64>) -> Result<f64> {
        let r = self.residual(x)?;
        let s2 = self.sigma * self.sigma;
        Ok(-0.5 * r.norm_squared() / s2 - 0.5 * self.output_dim() as f64 * (LN_2PI + s2.ln()))
    }

    /// `∇ₓ log L(x) = Aᵀ(y_obs − Ax)/σ²`.
    pub fn grad_log_likelihood(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let r = self.residual(x)?;
        let g = self.a.transpose() * r / (self.sigma * self.sigma);
        Ok(Array1::from_vec(g.as_slice().to_vec()))
    }
}

/// Exact posterior score `∇ log p₀(x) + Aᵀ(y_obs − Ax)/σ²`.
pub fn posterior_score_exact(
    prior: &GaussianMixture,
    lik: &LinearGaussianLikelihood,
    x: ArrayView1<'_, f64>,
) -> Result<Array1<f64>> {
    Ok(prior.score(x)? + lik.grad_log_likelihood(x)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::Covariance;
    use approx::assert_relative_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_d(y: f64, sigma: f64) -> LinearGaussianLikelihood {
        LinearGaussianLikelihood::new(DMatrix::identity(1, 1), sigma, DVector::from_vec(vec![y])).unwrap()
    }

    #[test]
    fn rejects_bad_sigma() {
        assert!(LinearGaussianLikelihood::new(DMatrix::identity(1, 1), 0.0, DVector::zeros(1)).is_err());
        assert!(LinearGaussianLikelihood::new(DMatrix::identity(2, 2), 1.0, DVector::zeros(1)).is_err());
    }

    #[test]
    fn posterior_score_examples() {
        let prior = GaussianMixture::standard_normal(1).unwrap();
        let s = posterior_score_exact(&prior, &one_d(2.0, 1.0), array![0.0].view()).unwrap();
        assert_relative_eq!(s[0], 2.0);
        let x = array![0.7];
        let s = posterior_score_exact(&prior, &one_d(0.7, 0.3), x.view()).unwrap();
        assert_relative_eq!(s[0], prior.score(x.view()).unwrap()[0]);
    }

    #[test]
    fn conjugate_examples() {
        let prior = GaussianMixture::standard_normal(1).unwrap();
        let post = prior.conjugate_posterior(&one_d(0.0, 1.0)).unwrap();
        assert_relative_eq!(post.means()[0][0], 0.0);
        assert_relative_eq!(post.covariances()[0].to_dense()[(0, 0)], 0.5, epsilon = 1e-15);

        let prior = GaussianMixture::new(
            vec![0.3, 0.7],
            vec![vec![-1.0, 0.5], vec![2.0, 0.0]],
            vec![
                Covariance::isotropic(2, 0.4).unwrap(),
                Covariance::diagonal(vec![1.0, 0.2]).unwrap(),
            ],
        )
        .unwrap();
        let lik =
            LinearGaussianLikelihood::new(DMatrix::identity(2, 2), 1e6, DVector::from_vec(vec![0.3, 0.1])).unwrap();
        let post = prior.conjugate_posterior(&lik).unwrap();
        for k in 0..2 {
            assert!((post.weights()[k] - prior.weights()[k]).abs() < 1e-8);
            for (a, b) in post.means()[k].iter().zip(&prior.means()[k]) {
                assert!((a - b).abs() < 1e-8);
            }
            assert!((post.covariances()[k].to_dense() - prior.covariances()[k].to_dense()).norm() < 1e-8);
        }
    }

    #[test]
    fn conjugate_score_matches_sum_of_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let prior = GaussianMixture::new(
            vec![0.25, 0.75],
            vec![vec![-1.0, 1.0, 0.0], vec![1.5, -0.5, 0.3]],
            vec![
                Covariance::full(DMatrix::from_row_slice(
                    3,
                    3,
                    &[1.0, 0.2, 0.0, 0.2, 0.5, 0.1, 0.0, 0.1, 0.8],
                ))
                .unwrap(),
                Covariance::diagonal(vec![0.3, 0.6, 0.9]).unwrap(),
            ],
        )
        .unwrap();
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 0.5, 0.0, 0.0, -0.3, 2.0]);
        let lik = LinearGaussianLikelihood::new(a, 0.4, DVector::from_vec(vec![0.2, -1.0])).unwrap();
        let post = prior.conjugate_posterior(&lik).unwrap();
        assert!((post.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for _ in 0..20 {
            let x = Array1::from_shape_fn(3, |_| rng.random_range(-2.0..2.0));
            let direct = posterior_score_exact(&prior, &lik, x.view()).unwrap();
            let via = post.score(x.view()).unwrap();
            for (u, v) in direct.iter().zip(via.iter()) {
                assert!((u - v).abs() <= 1e-8 * (1.0 + u.abs()));
            }
        }
    }

    #[test]
    fn identity_operator_shrinks_covariance() {
        let prior = GaussianMixture::gaussian(
            vec![0.0, 0.0],
            Covariance::full(DMatrix::from_row_slice(2, 2, &[2.0, 0.7, 0.7, 1.0])).unwrap(),
        )
        .unwrap();
        let lik = LinearGaussianLikelihood::new(DMatrix::identity(2, 2), 0.8, DVector::zeros(2)).unwrap();
        let post = prior.conjugate_posterior(&lik).unwrap();
        let gap = prior.covariances()[0].to_dense() - post.covariances()[0].to_dense();
        assert!(gap.symmetric_eigenvalues().iter().all(|e| *e >= -1e-12));
    }
}
