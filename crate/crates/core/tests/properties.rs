use nalgebra::DMatrix;
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use scoreblend::estimators::{blended_objective, lambda_star};
use scoreblend::metrics::{correlation_coefficient, mmd2};
use scoreblend::proxy::{lowrank_log_det, woodbury_solve};
use scoreblend::snis::{ess, plugin_moments, prior_weights};
use scoreblend::{
    fit_proxy, AffineKernel, KernelSpec, ProxyConfig, ProxyScoreMode, ReferenceBank, Schedule, WeightSet,
};

fn gaussian_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng.sample(StandardNormal))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn ess_lies_between_one_and_n(log_w in prop::collection::vec(-50.0f64..50.0, 1..200)) {
        let w = WeightSet::from_log_weights(&log_w).unwrap();
        let n = log_w.len() as f64;
        prop_assert!(w.ess >= 1.0 - 1e-9 && w.ess <= n * (1.0 + 1e-12));
        prop_assert!((ess(w.weights.view()) - w.ess).abs() <= 1e-9 * n);
    }

    #[test]
    fn uniform_weights_reach_n(n in 1usize..500, level in -600.0f64..600.0) {
        let w = WeightSet::from_log_weights(&vec![level; n]).unwrap();
        prop_assert!((w.ess - n as f64).abs() <= 1e-9 * n as f64);
    }

    #[test]
    fn weights_invariant_to_log_shift(seed in any::<u64>(), shift in -500.0f64..500.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let log_w: Vec<f64> = (0..64).map(|_| 5.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let shifted: Vec<f64> = log_w.iter().map(|l| l + shift).collect();
        let a = WeightSet::from_log_weights(&log_w).unwrap();
        let b = WeightSet::from_log_weights(&shifted).unwrap();
        for (x, y) in a.weights.iter().zip(b.weights.iter()) {
            prop_assert!((x - y).abs() <= 1e-12 * x.max(*y));
        }
    }

    #[test]
    fn plugin_moments_obey_cauchy_schwarz(seed in any::<u64>(), n in 3usize..80, d in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let log_w: Vec<f64> = (0..n).map(|_| 2.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let w = WeightSet::from_log_weights(&log_w).unwrap();
        let a = gaussian_matrix(&mut rng, n, d);
        let b = &gaussian_matrix(&mut rng, n, d) - &a * rng.random_range(-2.0..2.0);
        if let Ok(m) = plugin_moments(&w, a.view(), b.view()) {
            prop_assert!(m.sigma_c2 >= 0.0 && m.sigma_t2 >= 0.0);
            prop_assert!(m.cov.abs() <= (m.sigma_t2 * m.sigma_c2).sqrt() * (1.0 + 1e-12) + 1e-300);
        }
    }

    #[test]
    fn lambda_star_minimises_on_admissible_triples(
        st in 1e-6f64..10.0,
        sc in 1e-6f64..10.0,
        rho in -1.0f64..1.0,
    ) {
        let cov = rho * (st * sc).sqrt();
        prop_assume!(cov <= st.min(sc));
        let l = lambda_star(st, sc, cov);
        prop_assert!((0.0..=1.0).contains(&l));
        let best = blended_objective(l, st, sc, cov);
        let scale = st + sc;
        for i in 0..=1000 {
            let other = blended_objective(i as f64 / 1000.0, st, sc, cov);
            prop_assert!(best <= other + 1e-12 * scale);
        }
    }

    #[test]
    fn woodbury_matches_dense(seed in any::<u64>(), d in 1usize..=16, r_raw in 0usize..=4) {
        let r = r_raw.min(d);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let diag: Vec<f64> = (0..d).map(|_| rng.random_range(0.05..3.0)).collect();
        let g = DMatrix::from_fn(d, d.max(1), |_, _| rng.sample::<f64, _>(StandardNormal));
        let q = g.qr().q();
        let v = q.columns(0, r).into_owned();
        let eig: Vec<f64> = (0..r).map(|i| if i == 0 && seed % 5 == 0 { 0.0 } else { rng.random_range(0.0..5.0) }).collect();
        let u: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();

        let dense = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(diag.clone()))
            + &v * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(eig.clone())) * v.transpose();
        let chol = dense.clone().cholesky().unwrap();
        let expect = chol.solve(&nalgebra::DVector::from_vec(u.clone()));
        let got = woodbury_solve(&diag, &v, &eig, &u);
        for (a, b) in got.iter().zip(expect.iter()) {
            prop_assert!((a - b).abs() <= 1e-8);
        }
        let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        prop_assert!((lowrank_log_det(&diag, &v, &eig) - log_det).abs() <= 1e-8 * (1.0 + log_det.abs()));
    }

    #[test]
    fn mmd_is_symmetric_and_nonnegative(seed in any::<u64>(), n in 1usize..40, m in 1usize..40, shift in 0.0f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = gaussian_matrix(&mut rng, n, 2);
        let y = gaussian_matrix(&mut rng, m, 2) + shift;
        for spec in [KernelSpec::rbf(0.7), KernelSpec::imq(1.0, -0.5), KernelSpec::multiscale(vec![0.3, 1.0, 3.0])] {
            let a = mmd2(x.view(), y.view(), &spec).unwrap();
            let b = mmd2(y.view(), x.view(), &spec).unwrap();
            prop_assert_eq!(a.to_bits(), b.to_bits());
            prop_assert!(a >= 0.0);
        }
    }

    #[test]
    fn correlation_stays_in_unit_interval(seed in any::<u64>(), n in 1usize..50, d in 1usize..4, mix in -1.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = gaussian_matrix(&mut rng, n, d);
        let b = &a * mix + &gaussian_matrix(&mut rng, n, d) * (1.0 - mix.abs());
        let rho = correlation_coefficient(a.view(), b.view()).unwrap();
        prop_assert!((-1.0..=1.0).contains(&rho));
    }

    #[test]
    fn prefactor_inverts_phi(b0 in 0.01f64..5.0, b1 in 0.01f64..5.0, g in 0.1f64..5.0, t in 1e-4f64..4.0) {
        let vp = AffineKernel::vp(2, Schedule::new(vec![0.0, 1.0], vec![b0, b1]).unwrap());
        let ve = AffineKernel::ve(2, Schedule::constant(g).unwrap());
        for k in [AffineKernel::ou(2), vp, ve] {
            let p = k.tsi_prefactor(t).unwrap() * k.phi(t).unwrap();
            prop_assert!((p - 1.0).abs() <= 1e-12);
            let t2 = t * 1.37;
            prop_assert!(k.noise_variance(t2).unwrap() >= k.noise_variance(t).unwrap());
        }
    }

    #[test]
    fn proxy_scores_permutation_invariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 60;
        let pts = gaussian_matrix(&mut rng, n, 3);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let permuted = Array2::from_shape_fn((n, 3), |(i, j)| pts[[perm[i], j]]);
        for cfg in [ProxyConfig::diag(8), ProxyConfig::lrd(8, 2)] {
            let a = fit_proxy(pts.view(), &cfg).unwrap().scores(ProxyScoreMode::Anchor).unwrap();
            let b = fit_proxy(permuted.view(), &cfg).unwrap().scores(ProxyScoreMode::Anchor).unwrap();
            for i in 0..n {
                for j in 0..3 {
                    prop_assert!((b[[i, j]] - a[[perm[i], j]]).abs() <= 1e-9 * (1.0 + a[[perm[i], j]].abs()));
                }
            }
        }
    }

    #[test]
    fn prior_weights_depend_only_on_distances(seed in any::<u64>(), t in 0.01f64..2.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bank = ReferenceBank::new(gaussian_matrix(&mut rng, 30, 2)).unwrap();
        let y = Array1::from_shape_fn(2, |_| rng.sample(StandardNormal));
        let w = prior_weights(&bank, &AffineKernel::ou(2), y.view(), t).unwrap();
        prop_assert!((w.weights.sum() - 1.0).abs() <= 1e-12);
        prop_assert!(w.weights.iter().all(|v| *v >= 0.0));
    }
}
