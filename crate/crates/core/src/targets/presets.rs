//! Named target distributions used by the experiments.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::covariance::Covariance;
use super::gmm::GaussianMixture;
use crate::error::{invalid, Result};

/// Prior of the regime sweep: equal-weight components with means on a sphere
/// and a shared diagonal covariance with power-law spectrum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralGmmConfig {
    pub dim: usize,
    pub n_components: usize,
    pub radius: f64,
    pub eigen_decay: f64,
    #[serde(default = "one")]
    pub scale: f64,
    pub seed: u64,
}

fn one() -> f64 {
    1.0
}

impl SpectralGmmConfig {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self {
            dim,
            n_components: 64,
            radius: 2.0,
            eigen_decay: 2.0,
            scale: 1.0,
            seed,
        }
    }
}

pub fn spectral_gmm(config: &SpectralGmmConfig) -> Result<GaussianMixture> {
    if config.dim == 0 {
        return Err(invalid("dim", "must be at least 1"));
    }
    if config.n_components == 0 {
        return Err(invalid("n_components", "must be at least 1"));
    }
    if !(config.radius > 0.0) {
        return Err(invalid("radius", "must be positive"));
    }
    if !(config.scale > 0.0) {
        return Err(invalid("scale", "must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let means: Vec<Vec<f64>> = (0..config.n_components)
        .map(|_| {
            random_direction(config.dim, &mut rng)
                .into_iter()
                .map(|v| config.radius * v)
                .collect()
        })
        .collect();
    let eig: Vec<f64> = (1..=config.dim)
        .map(|i| config.scale * (i as f64).powf(-config.eigen_decay))
        .collect();
    let cov = Covariance::diagonal(eig)?;
    let k = config.n_components;
    Ok(GaussianMixture::new(vec![1.0 / k as f64; k], means, vec![cov; k])?
        .with_name(format!("spectral{}d", config.dim))
        .with_seed(config.seed))
}

/// Uniform point on the unit sphere; the norm is re-normalised so it is exact
/// to rounding.
fn random_direction<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Mixture with means along a 3-D helix, embedded isometrically in a higher
/// ambient space by a seeded orthonormal frame. Each component is stretched
/// along the helix tangent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelixConfig {
    pub ambient_dim: usize,
    pub n_components: usize,
    pub radius: f64,
    /// Rise per radian.
    pub pitch: f64,
    pub turns: f64,
    pub tangent_variance: f64,
    pub normal_variance: f64,
    pub seed: u64,
}

impl Default for HelixConfig {
    fn default() -> Self {
        Self {
            ambient_dim: 9,
            n_components: 8,
            radius: 2.0,
            pitch: 0.3,
            turns: 1.5,
            tangent_variance: 0.15,
            normal_variance: 0.02,
            seed: 2024,
        }
    }
}

pub fn helix_gmm(config: &HelixConfig) -> Result<GaussianMixture> {
    let d = config.ambient_dim;
    if d < 3 {
        return Err(invalid("ambient_dim", "must be at least 3"));
    }
    if config.n_components == 0 {
        return Err(invalid("n_components", "must be at least 1"));
    }
    if !(config.tangent_variance > 0.0 && config.normal_variance > 0.0) {
        return Err(invalid("variance", "must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let frame = g.qr().q();
    let embed = frame.columns(0, 3).into_owned();

    let k = config.n_components;
    let mut means = Vec::with_capacity(k);
    let mut covs = Vec::with_capacity(k);
    let span = 2.0 * std::f64::consts::PI * config.turns;
    for j in 0..k {
        let theta = if k == 1 { 0.0 } else { span * j as f64 / (k - 1) as f64 };
        let p = nalgebra::Vector3::new(
            config.radius * theta.cos(),
            config.radius * theta.sin(),
            config.pitch * theta,
        );
        let tangent =
            nalgebra::Vector3::new(-config.radius * theta.sin(), config.radius * theta.cos(), config.pitch).normalize();
        let mean = &embed * p;
        let u = &embed * tangent;
        let cov = DMatrix::identity(d, d) * config.normal_variance
            + &u * u.transpose() * (config.tangent_variance - config.normal_variance);
        means.push(mean.as_slice().to_vec());
        covs.push(Covariance::full(cov)?);
    }
    Ok(GaussianMixture::new(vec![1.0 / k as f64; k], means, covs)?
        .with_name(format!("helix{d}d"))
        .with_seed(config.seed))
}

/// Two well-separated isotropic modes in the plane.
pub fn bimodal2d() -> GaussianMixture {
    GaussianMixture::new(
        vec![0.5, 0.5],
        vec![vec![-1.5, 0.0], vec![1.5, 0.0]],
        vec![Covariance::isotropic(2, 0.25).expect("positive variance"); 2],
    )
    .expect("valid preset")
    .with_name("bimodal2d")
}

/// Eight anisotropic modes on a circle of radius 2, unequal weights.
pub fn ring2d() -> GaussianMixture {
    let k = 8;
    let raw: Vec<f64> = (0..k).map(|j| 1.0 + 0.5 * (j % 3) as f64).collect();
    let total: f64 = raw.iter().sum();
    let weights = raw.iter().map(|w| w / total).collect();
    let mut means = Vec::with_capacity(k);
    let mut covs = Vec::with_capacity(k);
    for j in 0..k {
        let th = 2.0 * std::f64::consts::PI * j as f64 / k as f64;
        let (s, c) = th.sin_cos();
        means.push(vec![2.0 * c, 2.0 * s]);
        // Stretched along the tangent direction.
        let rot = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
        let diag = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![0.02, 0.08]));
        covs.push(Covariance::full(&rot * diag * rot.transpose()).expect("positive definite"));
    }
    GaussianMixture::new(weights, means, covs)
        .expect("valid preset")
        .with_name("ring2d")
}

/// Names accepted by [`preset`].
pub const PRESET_NAMES: &[&str] = &[
    "gaussian2d",
    "gaussian3d",
    "bimodal2d",
    "ring2d",
    "helix9d",
    "spectral3d",
];

/// Look up a built-in target by name. `gaussian<d>d` and `spectral<d>d` accept
/// any positive dimension.
pub fn preset(name: &str) -> Result<GaussianMixture> {
    let dim_of = |prefix: &str| -> Option<usize> {
        name.strip_prefix(prefix)?
            .strip_suffix('d')?
            .parse()
            .ok()
            .filter(|d| *d > 0)
    };
    match name {
        "bimodal2d" => Ok(bimodal2d()),
        "ring2d" => Ok(ring2d()),
        "helix9d" => helix_gmm(&HelixConfig::default()),
        _ => {
            if let Some(d) = dim_of("gaussian") {
                Ok(GaussianMixture::standard_normal(d)?.with_name(name))
            } else if let Some(d) = dim_of("spectral") {
                spectral_gmm(&SpectralGmmConfig::new(d, 0))
            } else {
                Err(invalid("preset", format!("unknown preset `{name}`")))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::signal_scale;
    use crate::targets::LinearGaussianLikelihood;

    #[test]
    fn spectral_examples() {
        let cfg = SpectralGmmConfig::new(6, 11);
        let g = spectral_gmm(&cfg).unwrap();
        assert_eq!(g.n_components(), 64);
        for m in g.means() {
            let n = m.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 2.0).abs() < 1e-12);
        }
        let eig = g.covariances()[0].to_dense().diagonal();
        assert_eq!(eig[0], 1.0);
        assert!((eig[0] / eig[3] - 16.0).abs() < 1e-12);
        assert_eq!(spectral_gmm(&cfg).unwrap(), g);
        assert_ne!(spectral_gmm(&SpectralGmmConfig::new(6, 12)).unwrap(), g);
    }

    #[test]
    fn helix_components_on_curve() {
        let g = helix_gmm(&HelixConfig::default()).unwrap();
        assert_eq!(g.dim(), 9);
        let r = HelixConfig::default().radius;
        let p = HelixConfig::default().pitch;
        let span = 2.0 * std::f64::consts::PI * HelixConfig::default().turns;
        for (j, m) in g.means().iter().enumerate() {
            let th = span * j as f64 / 7.0;
            let n2: f64 = m.iter().map(|v| v * v).sum();
            assert!((n2 - (r * r + p * p * th * th)).abs() < 1e-10);
        }
    }

    #[test]
    fn preset_lookup() {
        for name in PRESET_NAMES {
            assert!(preset(name).is_ok(), "{name}");
        }
        assert_eq!(preset("gaussian5d").unwrap().dim(), 5);
        assert!(preset("nope").is_err());
    }

    #[test]
    fn signal_scale_trace_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let g = GaussianMixture::standard_normal(3).unwrap();
        let s = signal_scale(&g, &DMatrix::identity(3, 3), n, &mut rng).unwrap();
        // Var‖x‖² = 2d for N(0, I); delta method on the square root.
        let se = (6.0f64 / n as f64).sqrt() / (2.0 * 3f64.sqrt());
        assert!((s - 3f64.sqrt()).abs() < 3.0 * se);

        let g = GaussianMixture::standard_normal(2).unwrap();
        let a = LinearGaussianLikelihood::harmonic_operator(2);
        let s = signal_scale(&g, &a, n, &mut rng).unwrap();
        // Var(x₁² + x₂²/4) = 2 + 2/16.
        let se = (2.125f64 / n as f64).sqrt() / (2.0 * 1.25f64.sqrt());
        assert!((s - 1.25f64.sqrt()).abs() < 3.0 * se);
    }
}
