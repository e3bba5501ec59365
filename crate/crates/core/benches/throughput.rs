//! Parallel vs sequential throughput of the hot paths.
//!
//! "parallel" uses the default rayon pool, "sequential" the same code inside a
//! one-thread pool. Building with `--no-default-features` removes rayon from
//! the library entirely; both variants then measure the sequential fallback.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rayon::ThreadPool;
use ueo_core::datamodel::{make_shift_spec, ShiftKind};
use ueo_core::experiment::{run_plan, ExperimentData, ExperimentPlan, HeadConfig, RunMethod};
use ueo_core::metrics::{lambda_grid, os_hos_curve, score_eval_set};
use ueo_core::model::{predict_probs, ModelState};
use ueo_core::objectives::{loss_and_grad, LossConfig, Method};
use ueo_core::synth::{generate, SynthConfig};
use ueo_core::trainer::TrainConfig;

fn pools() -> [(&'static str, ThreadPool); 2] {
    let build = |n| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .unwrap()
    };
    [("parallel", build(0)), ("sequential", build(1))]
}

fn data() -> ExperimentData {
    let s = generate(&SynthConfig {
        d: 128,
        n_classes: 64,
        per_class: 16,
        noise_sigma: 0.1,
        proto_noise: 0.1,
        shift_angle: 0.5,
        ..SynthConfig::default()
    })
    .unwrap();
    ExperimentData::new(s.train, s.test, s.prototypes).unwrap()
}

fn bench(c: &mut Criterion) {
    let data = data();
    let spec = make_shift_spec(ShiftKind::OpenPartial, 48, 64, 8, 8).unwrap();
    let head = HeadConfig::default()
        .build(&data.prototypes, &spec)
        .unwrap();
    let state = ModelState::new(head);
    let batch = data.train.features();
    let w = vec![0.5; batch.rows()];
    let cfg = LossConfig::with_method(Method::Ueo);
    let scored = score_eval_set(&state, &data.test, &spec).unwrap();
    let lambdas = lambda_grid(&scored.scores, 201);
    let plan = ExperimentPlan {
        shifts: vec![("open-partial".into(), spec.clone())],
        train_config: TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        },
        head: HeadConfig::default(),
        methods: vec![
            RunMethod::Train(Method::Ueo),
            RunMethod::Train(Method::Entmin),
        ],
        seeds: vec![0, 1],
        curve_points: 0,
    };

    let mut group = c.benchmark_group("throughput");
    group.sample_size(20);
    for (name, pool) in pools() {
        group.bench_function(BenchmarkId::new("predict_probs", name), |b| {
            pool.install(|| b.iter(|| predict_probs(black_box(&state), black_box(&batch)).unwrap()))
        });
        group.bench_function(BenchmarkId::new("loss_and_grad", name), |b| {
            pool.install(|| b.iter(|| loss_and_grad(&cfg, &state, black_box(&batch), &w).unwrap()))
        });
        group.bench_function(BenchmarkId::new("os_hos_curve", name), |b| {
            pool.install(|| {
                b.iter(|| {
                    os_hos_curve(
                        &scored.preds,
                        &scored.labels,
                        &scored.scores,
                        &spec,
                        black_box(&lambdas),
                    )
                    .unwrap()
                })
            })
        });
        group.bench_function(BenchmarkId::new("run_plan", name), |b| {
            pool.install(|| b.iter(|| run_plan(black_box(&data), &plan)))
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
