//! Statistical checks: Monte Carlo rates, sign of the error correlation and
//! end-to-end sampling against exact scores.

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use scoreblend::estimators::gaussian_error_pair;
use scoreblend::metrics::{error_correlation_curve, mmd2, sample_marginal};
use scoreblend::targets::bimodal2d;
use scoreblend::{
    estimate_score, fit_proxy, sample_field, AffineKernel, EstimatorKind, ExactScore, GaussianMixture, KernelSpec,
    ProxyConfig, ProxyScoreMode, ReferenceBank, Spacing, TimeGrid, WeightMode,
};

fn rmse_on_standard_normal(kind: EstimatorKind, n_ref: usize, seed: u64) -> f64 {
    let d = 2;
    let target = GaussianMixture::standard_normal(d).unwrap();
    let kernel = AffineKernel::ou(d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n_banks, n_queries, t) = (8, 100, 0.5);
    let mut acc = 0.0;
    for _ in 0..n_banks {
        let bank = ReferenceBank::from_target(&target, n_ref, &mut rng).unwrap();
        for _ in 0..n_queries {
            let y = Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal));
            let s = estimate_score(&bank, &kernel, y.view(), t, kind, WeightMode::Prior)
                .unwrap()
                .score;
            acc += (&s + &y).mapv(|v| v * v).sum();
        }
    }
    (acc / (n_banks * n_queries) as f64).sqrt()
}

#[test]
fn rmse_halves_when_bank_quadruples() {
    for kind in [EstimatorKind::Tweedie, EstimatorKind::Tsi] {
        let r: Vec<f64> = [1_000, 4_000, 16_000]
            .iter()
            .map(|&n| rmse_on_standard_normal(kind, n, 21))
            .collect();
        for w in r.windows(2) {
            let ratio = w[0] / w[1];
            assert!((2.0 * 0.7..=2.0 * 1.3).contains(&ratio), "{kind:?} ratio {ratio}");
        }
    }
}

#[test]
fn gaussian_errors_are_anticorrelated_in_every_batch() {
    let d = 3;
    let target = GaussianMixture::standard_normal(d).unwrap();
    let kernel = AffineKernel::ou(d);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for &t in &[0.05, 0.3, 1.0] {
        for _ in 0..1000 {
            let bank = ReferenceBank::from_target(&target, 256, &mut rng).unwrap();
            let y = Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal));
            let (et, ec) = gaussian_error_pair(&target, &bank, &kernel, y.view(), t).unwrap();
            assert!(et.dot(&ec) <= 0.0);
        }
    }
}

#[test]
fn small_time_errors_correlate_negatively_on_two_modes() {
    let target = bimodal2d();
    let exact = ExactScore::new(target.clone(), AffineKernel::ou(2)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut bank_rng = ChaCha8Rng::seed_from_u64(24);
    let curve = error_correlation_curve(
        |_| ReferenceBank::from_target(&target, 2000, &mut bank_rng),
        &exact,
        &[1e-3],
        250,
        1,
        Some(0.0),
        &mut rng,
    )
    .unwrap();
    assert!(curve[0].value < 0.0, "rho {}", curve[0].value);
}

#[test]
fn proxy_anchor_error_shrinks_with_bank_size() {
    let d = 2;
    let target = GaussianMixture::standard_normal(d).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let errs: Vec<f64> = [1_000usize, 4_000, 16_000]
        .iter()
        .map(|&n| {
            let k = (0.5 * (n as f64).powf(4.0 / (d as f64 + 4.0))).round() as usize;
            let pts = target.sample(n, &mut rng);
            let model = fit_proxy(pts.view(), &ProxyConfig::diag(k)).unwrap();
            let s = model.scores(ProxyScoreMode::Anchor).unwrap();
            (&s + &pts).rows().into_iter().map(|r| r.dot(&r).sqrt()).sum::<f64>() / n as f64
        })
        .collect();
    for w in errs.windows(2) {
        assert!(w[1] <= 1.1 * w[0], "{errs:?}");
    }
}

#[test]
fn exact_score_sampler_reaches_the_mmd_floor() {
    let target = bimodal2d();
    let exact = ExactScore::new(target.clone(), AffineKernel::ou(2)).unwrap();
    let grid = TimeGrid::new(5e-4, 1.5, 60, Spacing::Log).unwrap();
    let m = 4000;
    let out = sample_field(&exact, &grid, m, 26, false).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(27);
    // Exact draws at the last knot.
    let a = sample_marginal(&exact, grid.t_min(), m, &mut rng).unwrap();
    let b = sample_marginal(&exact, grid.t_min(), m, &mut rng).unwrap();
    let spec = KernelSpec::median_heuristic().resolved(&[a.view(), b.view()]).unwrap();
    let gen = mmd2(out.samples.view(), a.view(), &spec).unwrap().sqrt();
    let floor = mmd2(a.view(), b.view(), &spec).unwrap().sqrt();
    assert!(gen <= 2.0 * floor, "mmd {gen} vs floor {floor}");
}
