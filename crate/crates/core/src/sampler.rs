//! Reverse-time OU integration with the Heun predictor–corrector, and MALA.

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::estimators::{EstimatorConfig, ScoreEstimator, ScoreField, SnisDiagnostics};
use crate::kernel::AffineKernel;
use crate::snis::ReferenceBank;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spacing {
    Log,
    Linear,
}

/// Strictly decreasing knots `t_K = t_max > … > t_0 = t_min > 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    knots: Vec<f64>,
    spacing: Spacing,
}

impl TimeGrid {
    pub fn new(t_min: f64, t_max: f64, steps: usize, spacing: Spacing) -> Result<Self> {
        if !(t_min > 0.0 && t_max > t_min && t_max.is_finite()) {
            return Err(invalid(
                "time grid",
                format!("need 0 < t_min < t_max, got [{t_min}, {t_max}]"),
            ));
        }
        if steps < 2 {
            return Err(invalid("steps", "need at least 2 steps"));
        }
        let k = steps as f64;
        let mut knots: Vec<f64> = (0..=steps)
            .rev()
            .map(|i| {
                let u = i as f64 / k;
                match spacing {
                    Spacing::Log => (t_min.ln() + u * (t_max.ln() - t_min.ln())).exp(),
                    Spacing::Linear => t_min + u * (t_max - t_min),
                }
            })
            .collect();
        knots[0] = t_max;
        knots[steps] = t_min;
        Ok(Self { knots, spacing })
    }

    /// `[5e-4, 1.5]`, 30 log steps.
    pub fn standard() -> Self {
        Self::new(5e-4, 1.5, 30, Spacing::Log).expect("valid preset")
    }

    /// `[3e-4, 2.5]`, 30 log steps.
    pub fn regime_sweep() -> Self {
        Self::new(3e-4, 2.5, 30, Spacing::Log).expect("valid preset")
    }

    /// Knots from `t_max` down to `t_min`.
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn steps(&self) -> usize {
        self.knots.len() - 1
    }

    pub fn t_min(&self) -> f64 {
        *self.knots.last().expect("non-empty")
    }

    pub fn t_max(&self) -> f64 {
        self.knots[0]
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }
}

fn check_finite(v: &Array1<f64>, t: f64) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteScore {
            particle: 0,
            step: 0,
            t,
        })
    }
}

/// One Heun predictor–corrector step of the reverse OU dynamics from `t_hi`
/// down to `t_lo`, with reverse drift `f(y, t) = y + 2ŝ(y, t)`:
///
/// `ỹ = y + δ f(y, t_hi) + √(2δ) z`,
/// `y' = y + (δ/2)(f(y, t_hi) + f(ỹ, t_lo)) + √(2δ) z`,
///
/// with the same `z` in both stages.
pub fn heun_pc_step<S: ScoreField + ?Sized>(
    score: &S,
    y: ArrayView1<'_, f64>,
    t_hi: f64,
    t_lo: f64,
    z: ArrayView1<'_, f64>,
) -> Result<Array1<f64>> {
    heun_inner(score, y, t_hi, t_lo, z, &mut |_, _| {})
}

fn heun_inner<S: ScoreField + ?Sized>(
    score: &S,
    y: ArrayView1<'_, f64>,
    t_hi: f64,
    t_lo: f64,
    z: ArrayView1<'_, f64>,
    record: &mut dyn FnMut(f64, Option<SnisDiagnostics>),
) -> Result<Array1<f64>> {
    if !(t_hi > t_lo && t_lo > 0.0) {
        return Err(invalid("step", format!("need t_hi > t_lo > 0, got {t_hi} → {t_lo}")));
    }
    let delta = t_hi - t_lo;
    let noise = z.mapv(|v| (2.0 * delta).sqrt() * v);

    let (s_hi, d_hi) = score.score_with_diagnostics(y, t_hi)?;
    check_finite(&s_hi, t_hi)?;
    record(t_hi, d_hi);
    let f_hi = &y + &(s_hi * 2.0);
    let pred = &y + &(&f_hi * delta) + &noise;

    let (s_lo, d_lo) = score.score_with_diagnostics(pred.view(), t_lo)?;
    check_finite(&s_lo, t_lo)?;
    record(t_lo, d_lo);
    let f_lo = &pred + &(s_lo * 2.0);
    Ok(&y + &((f_hi + f_lo) * (0.5 * delta)) + noise)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_particles: usize,
    pub grid: TimeGrid,
    pub estimator: EstimatorConfig,
    pub seed: u64,
    #[serde(default)]
    pub diagnostics: bool,
}

/// Diagnostics of one score call inside the sampler.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub particle: usize,
    pub step: usize,
    pub t: f64,
    pub lambda: f64,
    pub ess: f64,
    pub ess_collapsed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    /// Final particles at `t_min`, one per row.
    pub samples: Array2<f64>,
    /// Present when diagnostics were requested; sorted by step, then particle.
    pub records: Option<Vec<StepRecord>>,
    /// Score evaluations performed.
    pub nfe: usize,
}

/// Per-particle random stream: seed plus the particle index as stream id, so
/// outputs do not depend on how particles are scheduled across threads.
pub fn particle_rng(seed: u64, particle: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(particle as u64);
    rng
}

/// Integrate `n_particles` trajectories from `N(0, I)` at `t_max` down to
/// `t_min` using any score field.
pub fn sample_field<S: ScoreField + ?Sized>(
    score: &S,
    grid: &TimeGrid,
    n_particles: usize,
    seed: u64,
    diagnostics: bool,
) -> Result<SampleOutput> {
    if n_particles == 0 {
        return Err(invalid("n_particles", "must be at least 1"));
    }
    let d = score.dim();
    let knots = grid.knots();
    let per_particle: Vec<(Array1<f64>, Vec<StepRecord>)> = (0..n_particles)
        .into_par_iter()
        .map(|p| -> Result<_> {
            let mut rng = particle_rng(seed, p);
            let mut y = Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal));
            let mut recs = Vec::new();
            for (step, pair) in knots.windows(2).enumerate() {
                let z = Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal));
                let mut record = |t: f64, dg: Option<SnisDiagnostics>| {
                    if let (true, Some(dg)) = (diagnostics, dg) {
                        recs.push(StepRecord {
                            particle: p,
                            step,
                            t,
                            lambda: dg.lambda,
                            ess: dg.ess,
                            ess_collapsed: dg.ess_collapsed,
                        });
                    }
                };
                y = heun_inner(score, y.view(), pair[0], pair[1], z.view(), &mut record).map_err(|e| match e {
                    Error::NonFiniteScore { t, .. } => Error::NonFiniteScore { particle: p, step, t },
                    other => other,
                })?;
            }
            Ok((y, recs))
        })
        .collect::<Result<_>>()?;

    let mut samples = Array2::zeros((n_particles, d));
    let mut records = Vec::new();
    for (mut row, (y, recs)) in samples.rows_mut().into_iter().zip(per_particle) {
        row.assign(&y);
        records.extend(recs);
    }
    records.sort_by_key(|r| (r.step, r.particle));
    Ok(SampleOutput {
        samples,
        records: diagnostics.then_some(records),
        nfe: 2 * grid.steps() * n_particles,
    })
}

/// Reverse sampling with an SNIS estimator over `bank`.
pub fn sample(bank: &ReferenceBank, kernel: &AffineKernel, config: &SamplerConfig) -> Result<SampleOutput> {
    if !kernel.is_ou() {
        return Err(Error::UnsupportedKernel(
            "the reverse sampler integrates the OU dynamics",
        ));
    }
    let est = ScoreEstimator::new(bank, kernel, config.estimator)?;
    sample_field(&est, &config.grid, config.n_particles, config.seed, config.diagnostics)
}

/// Robbins–Monro step-size adaptation, applied during burn-in only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepAdaptation {
    pub target_acceptance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MalaChain {
    /// Post-burn-in states, one per row.
    pub samples: Array2<f64>,
    /// Acceptance rate over the post-burn-in iterations.
    pub acceptance_rate: f64,
    pub step_size: f64,
}

/// Metropolis-adjusted Langevin chain. `n_iters` counts all iterations,
/// burn-in included.
#[allow(clippy::too_many_arguments)]
pub fn mala_sample<L, G, R>(
    log_density: L,
    grad: G,
    init: ArrayView1<'_, f64>,
    n_iters: usize,
    burn_in: usize,
    step_size: f64,
    adaptation: Option<StepAdaptation>,
    rng: &mut R,
) -> Result<MalaChain>
where
    L: Fn(ArrayView1<'_, f64>) -> Result<f64>,
    G: Fn(ArrayView1<'_, f64>) -> Result<Array1<f64>>,
    R: Rng + ?Sized,
{
    if !(step_size > 0.0) {
        return Err(invalid("step_size", "must be positive"));
    }
    if n_iters <= burn_in {
        return Err(invalid("n_iters", "must exceed burn_in"));
    }
    let d = init.len();
    let mut x = init.to_owned();
    let mut lp = log_density(x.view())?;
    let mut g = grad(x.view())?;
    if !lp.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteTarget);
    }
    let mut h = step_size;
    let mut samples = Array2::zeros((n_iters - burn_in, d));
    let mut accepted = 0usize;

    // log q(to | from) up to a constant shared by both directions.
    let log_q = |to: &Array1<f64>, from: &Array1<f64>, g_from: &Array1<f64>, h: f64| -> f64 {
        let r2: f64 = to
            .iter()
            .zip(from)
            .zip(g_from)
            .map(|((a, b), gb)| {
                let r = a - b - 0.5 * h * gb;
                r * r
            })
            .sum();
        -r2 / (2.0 * h)
    };

    for it in 0..n_iters {
        let z = Array1::from_shape_fn(d, |_| rng.sample::<f64, _>(StandardNormal));
        let prop = &x + &(&g * (0.5 * h)) + &(z * h.sqrt());
        let lp_prop = log_density(prop.view())?;
        let (g_prop, log_alpha) = if lp_prop.is_finite() {
            let g_prop = grad(prop.view())?;
            let la = lp_prop - lp + log_q(&x, &prop, &g_prop, h) - log_q(&prop, &x, &g, h);
            (Some(g_prop), la)
        } else {
            (None, f64::NEG_INFINITY)
        };
        let accept = log_alpha >= 0.0 || rng.random::<f64>().ln() < log_alpha;
        if accept {
            if let Some(gp) = g_prop {
                x = prop;
                lp = lp_prop;
                g = gp;
            }
        }
        if it < burn_in {
            if let Some(ad) = adaptation {
                let a = log_alpha.min(0.0).exp();
                let gain = 1.0 / ((it + 1) as f64).powf(0.6);
                h = (h.ln() + gain * (a - ad.target_acceptance)).exp();
            }
        } else {
            if accept {
                accepted += 1;
            }
            samples.row_mut(it - burn_in).assign(&x);
        }
    }
    Ok(MalaChain {
        samples,
        acceptance_rate: accepted as f64 / (n_iters - burn_in) as f64,
        step_size: h,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::FnScore;
    use approx::assert_relative_eq;
    use ndarray::array;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn grid_examples() {
        let g = TimeGrid::new(5e-4, 1.5, 30, Spacing::Log).unwrap();
        assert_eq!(g.knots().len(), 31);
        assert_eq!(g.t_max(), 1.5);
        assert_eq!(g.t_min(), 5e-4);
        assert!(g.knots().windows(2).all(|w| w[0] > w[1]));
        let g = TimeGrid::new(0.01, 4.0, 2, Spacing::Log).unwrap();
        assert_relative_eq!(g.knots()[1], (0.04f64).sqrt(), epsilon = 1e-15);
        let g = TimeGrid::new(1.0, 3.0, 2, Spacing::Linear).unwrap();
        assert_eq!(g.knots(), &[3.0, 2.0, 1.0]);
        assert!(TimeGrid::new(0.0, 1.0, 4, Spacing::Log).is_err());
        assert!(TimeGrid::new(1.0, 1.0, 4, Spacing::Log).is_err());
        assert!(TimeGrid::new(0.1, 1.0, 1, Spacing::Log).is_err());
    }

    #[test]
    fn heun_examples() {
        let zero = FnScore::new(1, |y: ArrayView1<'_, f64>, _| Ok(Array1::zeros(y.len())));
        let y = array![1.0];
        let z = array![0.0];
        // ỹ = 1 + 0.1·1 = 1.1; y' = 1 + 0.05(1 + 1.1).
        let out = heun_pc_step(&zero, y.view(), 0.6, 0.5, z.view()).unwrap();
        assert_relative_eq!(out[0], 1.105, epsilon = 1e-14);

        let exact = FnScore::new(2, |y: ArrayView1<'_, f64>, _| Ok(-y.to_owned()));
        let y = array![0.7, -1.3];
        let out = heun_pc_step(&exact, y.view(), 0.5 + 1e-12, 0.5, array![0.0, 0.0].view()).unwrap();
        for j in 0..2 {
            assert!((out[j] - y[j]).abs() < 1e-8);
        }

        let nan = FnScore::new(1, |_: ArrayView1<'_, f64>, _| Ok(array![f64::NAN]));
        assert!(matches!(
            heun_pc_step(&nan, array![0.0].view(), 0.2, 0.1, array![0.0].view()),
            Err(Error::NonFiniteScore { .. })
        ));
    }

    #[test]
    fn nfe_is_two_per_step_per_particle() {
        let calls = AtomicUsize::new(0);
        let f = FnScore::new(2, |y: ArrayView1<'_, f64>, _| {
            calls.fetch_add(1, Ordering::Relaxed);
            Ok(-y.to_owned())
        });
        let grid = TimeGrid::new(1e-3, 1.0, 7, Spacing::Log).unwrap();
        let out = sample_field(&f, &grid, 13, 1, false).unwrap();
        assert_eq!(calls.load(Ordering::Relaxed), 2 * 7 * 13);
        assert_eq!(out.nfe, 2 * 7 * 13);
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let f = FnScore::new(2, |y: ArrayView1<'_, f64>, _| Ok(-y.to_owned()));
        let grid = TimeGrid::new(1e-3, 1.0, 5, Spacing::Log).unwrap();
        let a = sample_field(&f, &grid, 64, 7, false).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| sample_field(&f, &grid, 64, 7, false).unwrap());
        assert_eq!(a.samples, b.samples);
        let c = sample_field(&f, &grid, 64, 8, false).unwrap();
        assert_ne!(a.samples, c.samples);
    }

    #[test]
    fn nonfinite_score_reports_particle_and_step() {
        let f = FnScore::new(1, |y: ArrayView1<'_, f64>, t| {
            Ok(if t < 0.01 { array![f64::INFINITY] } else { -y.to_owned() })
        });
        let grid = TimeGrid::new(1e-3, 1.0, 4, Spacing::Log).unwrap();
        match sample_field(&f, &grid, 3, 0, false) {
            Err(Error::NonFiniteScore { step, .. }) => assert!(step >= 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mala_standard_normal() {
        // Four pooled chains: the lag-one autocorrelation at h = 0.5 is about
        // 0.75, so a single chain's mean has standard error near 0.02.
        let draws: Vec<f64> = (0..4u64)
            .flat_map(|seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                mala_sample(
                    |x| Ok(-0.5 * x[0] * x[0]),
                    |x| Ok(-x.to_owned()),
                    array![0.0].view(),
                    20_000,
                    2_000,
                    0.5,
                    None,
                    &mut rng,
                )
                .unwrap()
                .samples
                .into_raw_vec_and_offset()
                .0
            })
            .collect();
        let n = draws.len() as f64;
        let m = draws.iter().sum::<f64>() / n;
        let v = draws.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        assert!(m.abs() <= 0.05, "mean {m}");
        assert!((0.9..=1.1).contains(&v), "var {v}");
    }

    #[test]
    fn mala_small_step_accepts() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let chain = mala_sample(
            |x| Ok(-0.5 * x.dot(&x)),
            |x| Ok(-x.to_owned()),
            array![0.3, -0.2].view(),
            1_001,
            1,
            1e-6,
            None,
            &mut rng,
        )
        .unwrap();
        assert!(chain.acceptance_rate >= 0.99);
    }

    #[test]
    fn mala_adaptation_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let chain = mala_sample(
            |x| Ok(-0.5 * x.dot(&x)),
            |x| Ok(-x.to_owned()),
            array![0.0, 0.0, 0.0].view(),
            6_000,
            3_000,
            5.0,
            Some(StepAdaptation {
                target_acceptance: 0.57,
            }),
            &mut rng,
        )
        .unwrap();
        assert!((chain.acceptance_rate - 0.57).abs() < 0.1, "{}", chain.acceptance_rate);
        assert!(mala_sample(
            |_| Ok(f64::NEG_INFINITY),
            |x| Ok(x.to_owned()),
            array![0.0].view(),
            10,
            1,
            0.1,
            None,
            &mut rng
        )
        .is_err());
        assert!(mala_sample(
            |_| Ok(0.0),
            |x| Ok(x.to_owned()),
            array![0.0].view(),
            10,
            10,
            0.1,
            None,
            &mut rng
        )
        .is_err());
    }
}
