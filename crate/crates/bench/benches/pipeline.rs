use std::time::Duration;

use chrono::NaiveDate;
use criterion::{criterion_group, criterion_main, Criterion};
use flowgan_core::codec::{encode, fit_scale, FlowMatrix};
use flowgan_core::dynmap::{demo_map_specs, DEMO_EXTENT};
use flowgan_core::gravity::{derive_masses, fit};
use flowgan_core::mobility::{aggregate, extract_trips, hotspot_masses, synth_city, SynthConfig};
use flowgan_core::model::{train, ConditionedSample, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn samples(count: usize) -> Vec<ConditionedSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let flows: Vec<FlowMatrix> = (0..count)
        .map(|_| {
            let mut m = FlowMatrix::zeros(30);
            for i in 0..30 {
                for j in 0..30 {
                    if i != j {
                        m.add(i, j, rng.random_range(0..40));
                    }
                }
            }
            m
        })
        .collect();
    let scale = fit_scale(&flows);
    flows
        .iter()
        .enumerate()
        .map(|(k, m)| ConditionedSample {
            image: encode(m, scale).unwrap(),
            condition: ["A", "B"][k % 2].into(),
            day: NaiveDate::from_ymd_opt(2024, 1, 1).unwrap(),
            group: 1,
        })
        .collect()
}

fn gan(c: &mut Criterion) {
    let data = samples(16);
    let cfg = TrainConfig {
        epochs: 1,
        ..TrainConfig::default()
    };
    let mut group = c.benchmark_group("gan");
    group.sample_size(10).measurement_time(Duration::from_secs(20));
    group.bench_function("train_step_batch16", |b| b.iter(|| train(&data, &cfg, 1).unwrap()));
    let model = train(&data, &cfg, 1).unwrap().model;
    group.bench_function("generate_100", |b| {
        b.iter(|| model.generate_batch("A", 100, 5).unwrap())
    });
    group.finish();
}

fn data_pipeline(c: &mut Criterion) {
    let map = demo_map_specs()[0].build().unwrap();
    let zones = flowgan_core::dynmap::build_map(
        DEMO_EXTENT,
        &flowgan_core::dynmap::RefinementSpec {
            name: "zones".into(),
            mid_rects: vec![],
            fine_rects: vec![],
        },
    )
    .unwrap();
    let cfg = SynthConfig {
        users: 500,
        days: 7,
        start_date: NaiveDate::from_ymd_opt(2024, 1, 1).unwrap(),
        tz_offset_secs: 0,
        gamma: 2.0,
        intensities: [0.5; 6],
        masses: hotspot_masses(&zones, &[(20_000.0, 18_000.0, 10.0, 8_000.0)]),
    };
    let records = synth_city(&cfg, &zones, 1).unwrap();
    c.bench_function("extract_and_aggregate", |b| {
        b.iter(|| aggregate(&extract_trips(records.clone(), &map).trips, &map, 0))
    });
    let ds = aggregate(&extract_trips(records.clone(), &map).trips, &map, 0);
    let masses = derive_masses(&ds).unwrap();
    c.bench_function("gravity_fit", |b| b.iter(|| fit(&ds, &map, &masses).unwrap()));
}

criterion_group!(benches, gan, data_pipeline);
criterion_main!(benches);
