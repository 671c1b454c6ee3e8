use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use ltfl_bench::{big_client, params, round_updates};
use ltfl_core::aggregation::{qffl_step, tra_fedavg_aggregate, tra_qffl_step};
use ltfl_core::model::{init_params, local_train};
use ltfl_core::netsim::transmit;
use ltfl_core::rng::{stream, Domain};
use ltfl_core::{CompensationForm, CompensationMode, ModelSpec, NetworkProfile, TrainHyper};

fn local_training(c: &mut Criterion) {
    let data = big_client();
    let mut group = c.benchmark_group("local_train");
    for (label, spec) in [
        ("logistic", ModelSpec::logistic(60, 10)),
        ("mlp20", ModelSpec::mlp(60, 10, 20)),
    ] {
        let w = init_params(&spec, 1);
        let name = format!("{label}/{}_samples", data.n_train());
        group.bench_function(name, |b| {
            b.iter(|| {
                local_train(
                    &spec,
                    &w,
                    &data,
                    &TrainHyper::default(),
                    &mut stream(1, Domain::Training, 0, 0),
                )
                .expect("training succeeds")
            })
        });
    }
    group.finish();
}

fn transmission(c: &mut Criterion) {
    let p = params(610, 0);
    let profile = NetworkProfile::insufficient(0.3);
    let mut group = c.benchmark_group("transmit");
    for packet_size in [1, 256] {
        group.bench_function(format!("dim610/packet{packet_size}"), |b| {
            let mut round = 0;
            b.iter(|| {
                round += 1;
                transmit(
                    black_box(&p),
                    &profile,
                    packet_size,
                    &mut stream(2, Domain::Network, round, 0),
                )
                .expect("valid")
            })
        });
    }
    group.finish();
}

fn aggregation(c: &mut Criterion) {
    let updates = round_updates(10, 610, 0.3, 256);
    let global = params(610, 99);
    c.bench_function("tra_fedavg/10x610", |b| {
        b.iter(|| {
            tra_fedavg_aggregate(
                black_box(&updates),
                CompensationMode::Nominal,
                CompensationForm::Corrected,
            )
        })
    });
    c.bench_function("qffl_step/10x610", |b| {
        b.iter(|| qffl_step(black_box(&global), &updates, 1.0, 10.0))
    });
    c.bench_function("tra_qffl_step/10x610", |b| {
        b.iter_batched(
            || updates.clone(),
            |u| tra_qffl_step(&global, &u, 1.0, 10.0, CompensationMode::Nominal),
            BatchSize::SmallInput,
        )
    });
}

criterion_group!(benches, local_training, transmission, aggregation);
criterion_main!(benches);
