use std::sync::Arc;

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};

use ramp_bench::{cfp, document, simulated_auction};
use ramp_core::harness::synth::{random_workload, RandomWorkload};
use ramp_core::pricing::make_offer;
use ramp_core::protocol::{decode_message, encode_message};
use ramp_core::queuesim::{parse_swf, serialize_swf};
use ramp_core::rfql::{parse_rfq, serialize_rfq};
use ramp_core::{LoadSnapshot, MachineModel, Money, PricingConfig, QueueSystem, SimClock, Timestamp};

fn pricing(c: &mut Criterion) {
    let cfg = PricingConfig::band(65, 25, 3).unwrap();
    c.bench_function("make_offer", |b| {
        b.iter(|| make_offer(&cfg, black_box(LoadSnapshot::from_cores(3_000, 9_216)), black_box(Money::from_units(50))))
    });
}

fn codec(c: &mut Criterion) {
    let msg = cfp();
    let frame = encode_message(&msg).unwrap();
    c.bench_function("encode_cfp", |b| b.iter(|| encode_message(black_box(&msg)).unwrap()));
    c.bench_function("decode_cfp", |b| b.iter(|| decode_message(black_box(&frame)).unwrap()));
}

fn rfql(c: &mut Criterion) {
    let mut group = c.benchmark_group("parse_rfq");
    for units in [1, 8, 64] {
        let xml = serialize_rfq(&document(units));
        group.bench_with_input(BenchmarkId::from_parameter(units), &xml, |b, xml| b.iter(|| parse_rfq(xml).unwrap()));
    }
    group.finish();
}

fn queue(c: &mut Criterion) {
    let log = random_workload(
        "bench",
        &RandomWorkload {
            total_cores: 8_192,
            utilization: 0.7,
            from: 0,
            to: 30 * 24 * 3600,
            seed: 7,
        },
    );
    let text = serialize_swf(&log);
    c.bench_function("parse_swf_30d", |b| b.iter(|| parse_swf(black_box(&text)).unwrap()));

    let start = Timestamp::from_secs(1_800_000_000);
    let machine = MachineModel::new("bench", 8_192, Arc::new(log), SimClock::new(start, 14 * 24 * 3600).unwrap()).unwrap();
    c.bench_function("snapshot_load", |b| {
        b.iter(|| machine.availability(black_box(start.plus_secs(3_600)), 256, 3_600).unwrap())
    });
    c.bench_function("earliest_feasible", |b| {
        b.iter(|| machine.earliest_feasible(black_box(start), start.plus_secs(7 * 24 * 3600), 1_024, 7_200).unwrap())
    });
}

fn auction(c: &mut Criterion) {
    let mut group = c.benchmark_group("simulated_auction");
    group.sample_size(10);
    for units in [1, 4] {
        group.bench_with_input(BenchmarkId::new("units", units), &units, |b, &u| b.iter(|| simulated_auction(u, 3)));
    }
    group.finish();
}

criterion_group!(benches, pricing, codec, rfql, queue, auction);
criterion_main!(benches);
