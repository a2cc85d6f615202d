use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rayon::ThreadPoolBuilder;
use tcsis_core::energy::{IsingModel, SequenceState};
use tcsis_core::estimator::estimate_concrete_score;
use tcsis_core::kernel::NoiseSchedule;
use tcsis_core::oracle::ExactOracle;
use tcsis_core::rng::stream;
use tcsis_core::sampler::{sample, OracleSource, SamplerConfig};

fn pools() -> Vec<(&'static str, rayon::ThreadPool)> {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    vec![
        ("sequential", ThreadPoolBuilder::new().num_threads(1).build().unwrap()),
        ("parallel", ThreadPoolBuilder::new().num_threads(cores).build().unwrap()),
    ]
}

fn mc_scores(c: &mut Criterion) {
    let model = IsingModel::new(4, 0.4407, true).unwrap();
    let x = SequenceState::uniform(16, 2, &mut stream(3, &[]));
    let mut group = c.benchmark_group("mc_concrete_score_4x4_n1000");
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| pool.install(|| estimate_concrete_score(&model, &x, 0.3, 1000, &mut stream(1, &[])).unwrap()))
        });
    }
    group.finish();
}

fn oracle_sampling(c: &mut Criterion) {
    let model = IsingModel::new(3, 0.4407, true).unwrap();
    let source = OracleSource { oracle: ExactOracle::new(&model, 1 << 10).unwrap(), schedule: NoiseSchedule::default_for(2) };
    let cfg = SamplerConfig { n_steps: 16, n_samples: 2000, seed: 5 };
    let mut group = c.benchmark_group("oracle_sampling_3x3");
    group.sample_size(10);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::from_parameter(name), |b| b.iter(|| pool.install(|| sample(&source, &cfg).unwrap())));
    }
    group.finish();
}

criterion_group!(benches, mc_scores, oracle_sampling);
criterion_main!(benches);
