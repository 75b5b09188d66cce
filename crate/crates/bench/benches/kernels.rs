use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use gwfract::branching::{extinction_prob, sample_gw};
use gwfract::extraction::{
    find_subtree, percolation_pipeline, PercolationParams, PercolationWitness, PredContext, ScanOptions,
    SubtreePredicate, DEFAULT_GROUP_C,
};
use gwfract::fixpoint::{g_k_a_curve, smallest_fixed_point};
use gwfract::geometry::{render_full, width, SimilarityIfs};
use gwfract::{GFunction, MonotoneCollection, OffspringDistribution};

fn bin(n: u32, p: f64) -> OffspringDistribution {
    OffspringDistribution::binomial(n, p).unwrap()
}

fn sampling(c: &mut Criterion) {
    let off = bin(9, 0.6);
    c.bench_function("sample_gw bin(9,0.6) depth 5", |b| {
        let mut seed = 0u64;
        b.iter(|| {
            seed += 1;
            sample_gw(&off, 5, seed).unwrap().tree.len()
        })
    });
}

fn fixed_points(c: &mut Criterion) {
    let off = bin(9, 0.6);
    c.bench_function("extinction q bin(9,0.6)", |b| b.iter(|| extinction_prob(black_box(&off), 1e-14).unwrap().q));
    let gf = GFunction::new(off.clone(), MonotoneCollection::Ary(2)).unwrap();
    c.bench_function("smallest fixed point ary:2", |b| b.iter(|| smallest_fixed_point(&gf, 1e-13).unwrap().s0));
    c.bench_function("g_k curve k<=6 exact", |b| {
        b.iter(|| g_k_a_curve(&off, 6, |k| 1 << k, 0.5, 0, 1).unwrap().len())
    });
}

fn geometry(c: &mut Criterion) {
    let cloud = render_full(&SimilarityIfs::sierpinski(), 8, None).unwrap();
    c.bench_function("width of 6561 gasket points", |b| b.iter(|| width(black_box(&cloud)).width));
}

fn extraction(c: &mut Criterion) {
    let off = bin(3, 0.9);
    let ctx = PredContext::default();
    c.bench_function("find binary subtree depth 6", |b| {
        let mut seed = 0u64;
        b.iter_batched(
            || {
                seed += 1;
                sample_gw(&off, 6, seed).unwrap().tree
            },
            |t| find_subtree(&t, &SubtreePredicate::Ary(2), &ctx, 6).unwrap().is_some(),
            BatchSize::SmallInput,
        )
    });
    let params = PercolationParams {
        b: 3,
        d: 2,
        p: 0.7,
        c: 3.0,
        k: None,
        witness: PercolationWitness::SectionDiffuse { c: DEFAULT_GROUP_C },
    };
    let opts = ScanOptions { levels: Some(2), ..ScanOptions::default() };
    let mut group = c.benchmark_group("pipeline");
    group.sample_size(10);
    group.bench_function("percolation c=3, 2 levels", |b| {
        b.iter(|| percolation_pipeline(&params, &opts, 4).unwrap().cloud.len())
    });
    group.finish();
}

criterion_group!(benches, sampling, fixed_points, geometry, extraction);
criterion_main!(benches);
