//! Analytic targets, likelihoods and their exact closed forms.

mod covariance;
mod gmm;
mod likelihood;
mod presets;

pub use covariance::{Covariance, CovarianceSpec};
pub use gmm::{signal_scale, GaussianMixture, MixtureSpec};
pub use likelihood::{posterior_score_exact, LinearGaussianLikelihood};
pub use presets::{bimodal2d, helix_gmm, preset, ring2d, spectral_gmm, HelixConfig, SpectralGmmConfig, PRESET_NAMES};
