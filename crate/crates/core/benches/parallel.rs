//! Sequential vs. rayon execution of the two data-parallel workloads:
//! Monte-Carlo bound estimation and experiment rows.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use flowopt::bound::{estimate_bound_mc, BoundConfig};
use flowopt::config;
use flowopt::experiments;
use flowopt::Exec;

const AFFINE: &str = include_str!("../../../configs/affine-sweep.toml");
const MIXTURE: &str = include_str!("../../../configs/inversion.toml");

fn bound(c: &mut Criterion) {
    let mut group = c.benchmark_group("bound_mc");
    group.sample_size(10);
    for (name, text) in [("affine_d8", AFFINE), ("mixture_d2", MIXTURE)] {
        let sc = config::parse(text).unwrap();
        let flow = sc.flow(sc.default_tag()).unwrap();
        for exec in [Exec::Sequential, Exec::Parallel] {
            let cfg = BoundConfig {
                num_realizations: 2000,
                exec,
                ..sc.bound.clone()
            };
            group.bench_with_input(BenchmarkId::new(name, format!("{exec:?}")), &cfg, |b, cfg| {
                b.iter(|| black_box(estimate_bound_mc(&flow, cfg).unwrap().bound))
            });
        }
    }
    group.finish();
}

fn rows(c: &mut Criterion) {
    let mut group = c.benchmark_group("inversion_rows");
    group.sample_size(10);
    let sc = config::parse(MIXTURE).unwrap();
    let mut exp = sc.experiment.clone().unwrap();
    exp.seeds = (0..16).collect();
    exp.eta_factors.clear();
    exp.etas = vec![0.7];
    for exec in [Exec::Sequential, Exec::Parallel] {
        group.bench_function(format!("{exec:?}"), |b| {
            b.iter(|| black_box(experiments::run_with(&sc, &exp, exec).unwrap().rows.len()))
        });
    }
    group.finish();
}

criterion_group!(benches, bound, rows);
criterion_main!(benches);
