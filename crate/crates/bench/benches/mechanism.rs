use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use truthfed_bench::{paper_config, pending_instance};
use truthfed_core::mechanism::{truthful_incentive_search, vanilla_greedy_search};
use truthfed_core::payments::critical_value_bisection;
use truthfed_core::protocol::Simulation;
use truthfed_core::{MechanismKind, SelectionRule};

fn selection(c: &mut Criterion) {
    let mut group = c.benchmark_group("selection");
    for steps in [100u64, 1000] {
        let inst = pending_instance(1, steps).unwrap();
        group.bench_with_input(BenchmarkId::new("truth_fedban", steps), &inst, |b, inst| {
            b.iter(|| truthful_incentive_search(black_box(inst), 1.0).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("vanilla_greedy", steps), &inst, |b, inst| {
            b.iter(|| vanilla_greedy_search(black_box(inst)).unwrap())
        });
    }
    group.finish();
}

fn bisection(c: &mut Criterion) {
    let inst = pending_instance(1, 1000).unwrap();
    let rule = SelectionRule::new(MechanismKind::TruthFedban, 1.0);
    let i = rule.select(&inst).unwrap().sorted()[0];
    let mut group = c.benchmark_group("bisection");
    for gamma in [1.0, 1e-3] {
        group.bench_with_input(BenchmarkId::from_parameter(gamma), &gamma, |b, &gamma| {
            b.iter(|| critical_value_bisection(black_box(&inst), i, &rule, gamma).unwrap())
        });
    }
    group.finish();
}

fn simulation_step(c: &mut Criterion) {
    let cfg = paper_config(1).unwrap();
    c.bench_function("simulation_step", |b| {
        b.iter_batched(
            || Simulation::new(cfg.clone()).unwrap(),
            |mut sim| sim.step().unwrap(),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, selection, bisection, simulation_step);
criterion_main!(benches);
