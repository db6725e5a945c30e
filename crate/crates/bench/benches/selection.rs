use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use conformal_crew::conformal;
use conformal_crew::selection::greedy_select;
use conformal_crew::synth;
use conformal_crew_bench::selection_case;

fn bench_greedy(c: &mut Criterion) {
    let mut group = c.benchmark_group("greedy_select");
    for &(h, size) in &[(4, 3), (16, 6), (64, 16)] {
        let case = selection_case(32, h, size, 1);
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("h{h}_c{size}")),
            &case,
            |b, case| {
                b.iter(|| greedy_select(black_box(&case.set), &case.restricted, &case.initial))
            },
        );
    }
    group.finish();
}

fn bench_calibrate(c: &mut Criterion) {
    let outputs = synth::classifier_outputs(10, 5000, 2.0, 3).expect("valid");
    let scores: Vec<f64> = outputs
        .records()
        .iter()
        .map(|r| conformal::score(&r.probs, r.true_label))
        .collect();
    c.bench_function("calibrate_5000", |b| {
        b.iter(|| conformal::calibrate(black_box(&scores), 0.1).expect("valid"))
    });
}

criterion_group!(benches, bench_greedy, bench_calibrate);
criterion_main!(benches);
