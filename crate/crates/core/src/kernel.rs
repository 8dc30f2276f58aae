//! Closed-form transition laws of the affine forward diffusions.
//!
//! Every kernel here is isotropic: the fundamental matrix is `phi(t) * I`, the
//! drift offset is zero and the transition covariance is `noise_variance(t) * I`.
//! The variance-preserving and variance-exploding variants take piecewise-constant
//! rate schedules so that all integrals are exact.

use ndarray::{Array1, ArrayView1, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Piecewise-constant function of time.
///
/// Segment `k` covers `[breakpoints[k], breakpoints[k + 1])`; the last segment
/// extends to infinity. The first breakpoint must be zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    breakpoints: Vec<f64>,
    values: Vec<f64>,
}

impl Schedule {
    pub fn new(breakpoints: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if breakpoints.is_empty() || breakpoints.len() != values.len() {
            return Err(invalid(
                "schedule",
                "breakpoints and values must be non-empty and of equal length",
            ));
        }
        if breakpoints[0] != 0.0 {
            return Err(invalid("schedule", "first breakpoint must be 0"));
        }
        if breakpoints.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid("schedule", "breakpoints must be strictly increasing"));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid("schedule", "values must be finite and nonnegative"));
        }
        Ok(Self { breakpoints, values })
    }

    pub fn constant(value: f64) -> Result<Self> {
        Self::new(vec![0.0], vec![value])
    }

    pub fn value(&self, t: f64) -> f64 {
        let k = self.breakpoints.partition_point(|&b| b <= t).saturating_sub(1);
        self.values[k]
    }

    /// Exact `∫₀ᵗ f(u) du`.
    pub fn integral(&self, t: f64) -> f64 {
        self.integrate(t, |v| v)
    }

    /// Exact `∫₀ᵗ f(u)² du`.
    pub fn integral_of_square(&self, t: f64) -> f64 {
        self.integrate(t, |v| v * v)
    }

    fn integrate(&self, t: f64, f: impl Fn(f64) -> f64) -> f64 {
        let mut acc = 0.0;
        for (k, &start) in self.breakpoints.iter().enumerate() {
            if t <= start {
                break;
            }
            let end = self.breakpoints.get(k + 1).copied().unwrap_or(f64::INFINITY);
            acc += f(self.values[k]) * (t.min(end) - start);
        }
        acc
    }
}

/// Which forward diffusion the kernel describes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum KernelVariant {
    /// `dX = -X dt + √2 dW`.
    Ou,
    /// `dX = -½β(t) X dt + √β(t) dW`.
    Vp { beta: Schedule },
    /// `dX = g(t) dW`.
    Ve { g: Schedule },
}

/// Transition law `p_{t|0}(y | x0) = N(phi(t) x0, noise_variance(t) I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineKernel {
    pub variant: KernelVariant,
    pub dim: usize,
}

impl AffineKernel {
    pub fn ou(dim: usize) -> Self {
        Self {
            variant: KernelVariant::Ou,
            dim,
        }
    }

    pub fn vp(dim: usize, beta: Schedule) -> Self {
        Self {
            variant: KernelVariant::Vp { beta },
            dim,
        }
    }

    pub fn ve(dim: usize, g: Schedule) -> Self {
        Self {
            variant: KernelVariant::Ve { g },
            dim,
        }
    }

    pub fn is_ou(&self) -> bool {
        matches!(self.variant, KernelVariant::Ou)
    }

    /// Scalar factor of the fundamental matrix `Φ(t, 0)`.
    pub fn phi(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(match &self.variant {
            KernelVariant::Ou => (-t).exp(),
            KernelVariant::Vp { beta } => (-0.5 * beta.integral(t)).exp(),
            KernelVariant::Ve { .. } => 1.0,
        })
    }

    /// Scalar variance `σ_t²` of the isotropic transition covariance.
    pub fn noise_variance(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(match &self.variant {
            // -expm1 keeps full relative precision for small t.
            KernelVariant::Ou => -(-2.0 * t).exp_m1(),
            KernelVariant::Vp { beta } => -(-beta.integral(t)).exp_m1(),
            KernelVariant::Ve { g } => g.integral_of_square(t),
        })
    }

    /// Drift offset `m(t)`; zero for every built-in variant.
    pub fn mean_offset(&self, t: f64) -> Result<f64> {
        check_time(t)?;
        Ok(0.0)
    }

    /// Scalar factor of `Φ(t, 0)^{-T}`, the prefactor of the target score identity.
    pub fn tsi_prefactor(&self, t: f64) -> Result<f64> {
        let phi = self.phi(t)?;
        if phi == 0.0 || !phi.is_finite() {
            return Err(Error::NotPositiveDefinite("fundamental matrix is singular"));
        }
        Ok(match &self.variant {
            KernelVariant::Ou => t.exp(),
            KernelVariant::Vp { beta } => (0.5 * beta.integral(t)).exp(),
            KernelVariant::Ve { .. } => 1.0,
        })
    }

    /// `x_t = Φ x0 + m + √Γ · noise`.
    pub fn forward_sample(&self, x0: ArrayView1<'_, f64>, t: f64, noise: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        check_dim(self.dim, x0.len())?;
        check_dim(self.dim, noise.len())?;
        let phi = self.phi(t)?;
        let m = self.mean_offset(t)?;
        let sigma = self.noise_variance(t)?.sqrt();
        let mut out = Array1::zeros(self.dim);
        Zip::from(&mut out)
            .and(&x0)
            .and(&noise)
            .for_each(|o, &x, &z| *o = phi * x + m + sigma * z);
        Ok(out)
    }

    /// Normalised Gaussian log-density `log p_{t|0}(y | x0)`.
    pub fn log_transition_density(&self, y: ArrayView1<'_, f64>, x0: ArrayView1<'_, f64>, t: f64) -> Result<f64> {
        check_dim(self.dim, y.len())?;
        check_dim(self.dim, x0.len())?;
        let params = self.transition(t)?;
        let dist2: f64 = y
            .iter()
            .zip(x0.iter())
            .map(|(&a, &b)| {
                let r = a - params.phi * b - params.offset;
                r * r
            })
            .sum();
        Ok(params.log_density(dist2))
    }

    /// Precomputed transition parameters at a strictly positive time.
    pub fn transition(&self, t: f64) -> Result<Transition> {
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::InvalidTime(t, "transition kernel requires t > 0"));
        }
        let variance = self.noise_variance(t)?;
        if !(variance > 0.0) {
            return Err(Error::InvalidTime(t, "transition covariance is degenerate"));
        }
        Ok(Transition {
            dim: self.dim,
            phi: self.phi(t)?,
            offset: self.mean_offset(t)?,
            variance,
            tsi_prefactor: self.tsi_prefactor(t)?,
        })
    }
}

/// Kernel quantities frozen at one time `t > 0`, shared by the estimator hot loops.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub dim: usize,
    pub phi: f64,
    pub offset: f64,
    pub variance: f64,
    pub tsi_prefactor: f64,
}

impl Transition {
    /// Log-density given the squared residual `‖y − Φ x0 − m‖²`.
    pub fn log_density(&self, dist2: f64) -> f64 {
        -0.5 * dist2 / self.variance - 0.5 * self.dim as f64 * (LN_2PI + self.variance.ln())
    }
}

fn check_time(t: f64) -> Result<()> {
    if t.is_nan() || t < 0.0 {
        Err(Error::InvalidTime(t, "time must be nonnegative"))
    } else {
        Ok(())
    }
}
