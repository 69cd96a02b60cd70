//! Space-wide scoring on a single-thread pool versus the full pool.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rayon::ThreadPoolBuilder;
use tracenas::data::{gen_dataset, GenParams, GeneratorKind};
use tracenas::eval::{rank_space, ScoreOptions, Scorer};
use tracenas::loss::LossKind;
use tracenas::space::CellSpace;

fn scoring(c: &mut Criterion) {
    let space = CellSpace::default_conv();
    let params = GenParams {
        samples: 64,
        input: space.input,
        classes: space.output,
        noise: 1.0,
        normalize: true,
    };
    let data = gen_dataset(GeneratorKind::ImagePatches, &params, 0).expect("dataset");
    let opts = ScoreOptions {
        loss: LossKind::Mse,
        batch_size: 32,
        batch_seed: 0,
    };
    let full = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut group = c.benchmark_group("rank_conv_space");
    group.sample_size(10);
    for (label, scorers) in [("approx", vec![Scorer::Approx]), ("exact", vec![Scorer::Exact])] {
        for threads in [1, full] {
            let pool = ThreadPoolBuilder::new().num_threads(threads).build().expect("pool");
            group.bench_with_input(BenchmarkId::new(label, format!("{threads}-threads")), &threads, |b, _| {
                b.iter(|| pool.install(|| rank_space(&space, &data.x, &data.y, &scorers, &opts).expect("scores")))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, scoring);
criterion_main!(benches);
