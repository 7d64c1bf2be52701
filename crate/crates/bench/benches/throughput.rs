use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;

use mandelq::simulate::{simulate, SimulationConfig};
use mandelq::stats::{g2_histogram_cw, mandel_q, Binning};
use mandelq::{merge_channels, merge_detectors, Acquisition, DetectionChainParams, EmitterRates, ExcitationMode};

fn config(duration: u64) -> SimulationConfig {
    SimulationConfig {
        rates: EmitterRates::three_level(205e3, 1.6e3, 1.4e3, 420e3).unwrap(),
        chain: DetectionChainParams::symmetric(0.248, 80_000, 0.0),
        mode: ExcitationMode::cw(),
        duration,
        seed: 1,
    }
}

fn acquisition() -> Acquisition {
    simulate(&config(1_000_000_000_000)).unwrap()
}

fn bench_simulate(c: &mut Criterion) {
    let mut g = c.benchmark_group("simulate");
    g.sample_size(10);
    // 100 ms of CW emission
    g.bench_function("cw_100ms", |b| b.iter(|| simulate(black_box(&config(100_000_000_000))).unwrap()));
    g.finish();
}

fn bench_mandel_q(c: &mut Criterion) {
    let acq = acquisition();
    let s = merge_detectors(&acq).unwrap();
    let mut g = c.benchmark_group("mandel_q");
    g.throughput(Throughput::Elements(s.len() as u64));
    for window in [100_000u64, 10_000_000] {
        g.bench_with_input(BenchmarkId::from_parameter(window), &window, |b, &w| {
            b.iter(|| mandel_q(&s, w, mandelq::DEFAULT_K_MAX, 0).unwrap())
        });
    }
    g.finish();
}

fn bench_g2(c: &mut Criterion) {
    let acq = acquisition();
    let a = merge_channels(&acq, &[1]).unwrap();
    let b = merge_channels(&acq, &[2]).unwrap();
    let mut g = c.benchmark_group("g2");
    g.throughput(Throughput::Elements((a.len() + b.len()) as u64));
    g.bench_function("linear_1ns_1us", |bch| {
        bch.iter(|| g2_histogram_cw(&a, &b, 1_000_000, &Binning::Linear { bin_width: 1_000 }).unwrap())
    });
    g.bench_function("log_100_bins_10us", |bch| {
        bch.iter(|| g2_histogram_cw(&a, &b, 10_000_000, &Binning::Log { min_lag: 100, n_bins: 100 }).unwrap())
    });
    g.finish();
}

criterion_group!(benches, bench_simulate, bench_mandel_q, bench_g2);
criterion_main!(benches);
