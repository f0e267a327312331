use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use geowind_core::plane::nearest_orbit_element;
use geowind_core::tree::busemann_cocycle;
use geowind_core::walk::{RaySpec, StabilizationRule};
use geowind_core::{BoundaryWord, DiskPoint, Geometry, Projection, SchottkyModel, SimConfig, Simulator, StepMeasure, Word};
use num_complex::Complex64;

fn srw() -> StepMeasure {
    StepMeasure::simple_random_walk(Geometry::Tree { rank: 2 }).unwrap()
}

fn tree_steps(c: &mut Criterion) {
    let sim = Simulator::new(srw(), Projection::canonical(2), SimConfig::new(1, 1, 1)).unwrap();
    let mut g = c.benchmark_group("tree_walk");
    const STEPS: u64 = 100_000;
    g.throughput(Throughput::Elements(STEPS));
    g.bench_function("srw_steps", |b| {
        b.iter(|| {
            let mut w = sim.tree_walker(black_box(7));
            for _ in 0..STEPS {
                w.step();
            }
            w.word().len()
        })
    });
    g.finish();
}

fn sample_paths(c: &mut Criterion) {
    let mut g = c.benchmark_group("sample_path");
    g.sample_size(10);
    for horizon in [1_000u64, 10_000] {
        let mut cfg = SimConfig::new(horizon, 1, 3);
        cfg.ray =
            Some(RaySpec { times: vec![horizon as f64 / 2.0], rule: StabilizationRule { rate: 0.5, spread: 0.906 }, search_depth: 8 });
        let sim = Simulator::new(srw(), Projection::canonical(2), cfg).unwrap();
        g.throughput(Throughput::Elements(horizon));
        g.bench_with_input(BenchmarkId::new("srw_with_ray", horizon), &sim, |b, sim| b.iter(|| sim.sample_indexed(black_box(0)).unwrap()));
    }
    g.finish();
}

fn exact_core(c: &mut Criterion) {
    let a: Word = "uvUUvvuVuvvUVuuv".parse().unwrap();
    let b: Word = "VuuvUvvUUvuVVuvu".parse().unwrap();
    let xi = BoundaryWord::eventually_periodic("uvU".parse().unwrap(), "Vuu".parse().unwrap()).unwrap();
    c.bench_function("word_multiply", |bn| bn.iter(|| black_box(&a).multiply(black_box(&b))));
    c.bench_function("busemann_cocycle", |bn| bn.iter(|| busemann_cocycle(black_box(&a), black_box(&xi)).unwrap()));
}

fn nearest_orbit(c: &mut Criterion) {
    let model = SchottkyModel::symmetric(2, 4.0).unwrap();
    let mut g = c.benchmark_group("nearest_orbit");
    for depth in [8usize, 16] {
        let z = DiskPoint::new(Complex64::from_polar(0.97, 1.1)).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(depth), &depth, |b, &d| {
            b.iter(|| nearest_orbit_element(&model, black_box(z), d).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, tree_steps, sample_paths, exact_core, nearest_orbit);
criterion_main!(benches);
