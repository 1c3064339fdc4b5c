use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qfi_core::{build_ccdf, evaluate, FaultSite, FaultSpec, LabeledDataset, Parallelism, Plans};

fn setup() -> (qfi_core::ModelGraph, LabeledDataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 200;
    let images: Vec<f32> = (0..n * 784).map(|_| rng.random()).collect();
    let labels = (0..n).map(|_| rng.random_range(0..10u8)).collect();
    let data = LabeledDataset::new(images, labels).unwrap();
    let mut model = build_ccdf(3);
    let (x, _) = data.gather(&(0..64).collect::<Vec<_>>());
    model.forward_train(&x, Plans::None, &mut rng).unwrap();
    model.freeze();
    (model, data)
}

fn bench(c: &mut Criterion) {
    let (model, data) = setup();
    let mut group = c.benchmark_group("evaluate_200");
    group.sample_size(10);
    for n_faults in [0u64, 256] {
        let spec = FaultSpec {
            n_faults,
            protected: vec![FaultSite::B32, FaultSite::O32],
            site_filter: None,
            seed: 1,
            repeat: 0,
        };
        for (name, mode) in [("sequential", Parallelism::Sequential), ("rayon", Parallelism::Rayon)] {
            group.bench_with_input(BenchmarkId::new(name, n_faults), &spec, |b, spec| {
                b.iter(|| evaluate(&model, &data, spec, mode).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
