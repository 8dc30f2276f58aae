use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scoreblend::metrics::mmd2;
use scoreblend::targets::ring2d;
use scoreblend::{
    estimate_score, fit_proxy, AffineKernel, EstimatorKind, KernelSpec, ProxyConfig, ReferenceBank, WeightMode,
};

fn bench_estimate(c: &mut Criterion) {
    let target = ring2d();
    let kernel = AffineKernel::ou(2);
    let y = Array1::from_vec(vec![0.3, -0.2]);
    let mut group = c.benchmark_group("estimate_score");
    for n in [500usize, 2000, 8000] {
        let bank = ReferenceBank::from_target(&target, n, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for kind in [EstimatorKind::Tweedie, EstimatorKind::Blend] {
            group.bench_with_input(BenchmarkId::new(kind.name(), n), &bank, |b, bank| {
                b.iter(|| estimate_score(bank, &kernel, black_box(y.view()), 0.1, kind, WeightMode::Prior).unwrap())
            });
        }
    }
    group.finish();
}

fn bench_proxy(c: &mut Criterion) {
    let points = ring2d().sample(2000, &mut ChaCha8Rng::seed_from_u64(1));
    let mut group = c.benchmark_group("fit_proxy");
    group.sample_size(10);
    for (name, cfg) in [("diag", ProxyConfig::diag(64)), ("lrd", ProxyConfig::lrd(64, 2))] {
        group.bench_function(name, |b| b.iter(|| fit_proxy(black_box(points.view()), &cfg).unwrap()));
    }
    group.finish();
}

fn bench_mmd(c: &mut Criterion) {
    let target = ring2d();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = target.sample(1000, &mut rng);
    let y = target.sample(1000, &mut rng);
    let spec = KernelSpec::median_heuristic();
    c.bench_function("mmd2/median_rbf/1000", |b| {
        b.iter(|| mmd2(black_box(x.view()), y.view(), &spec).unwrap())
    });
}

criterion_group!(benches, bench_estimate, bench_proxy, bench_mmd);
criterion_main!(benches);
