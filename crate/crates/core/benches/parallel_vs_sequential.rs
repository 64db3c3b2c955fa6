use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use layerprobe::activation::{synth_activations, RecordSet, SynthSpec};
use layerprobe::exec::Exec;
use layerprobe::mdl::{layerwise_on, DEFAULT_FRACTIONS};
use layerprobe::probe::{evaluate_accuracy, init_params, ProbeConfig};
use layerprobe::transfer::run_edge_probe;

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn data(n: usize, layers: usize) -> RecordSet {
    synth_activations(&SynthSpec::new(n, layers, 16, 2, 1).with_signal(1, 3.0))
        .unwrap()
        .all()
        .unwrap()
}

fn small_config() -> ProbeConfig {
    ProbeConfig {
        projection_dim: 64,
        mlp_hidden_dim: 64,
        ..ProbeConfig::default()
    }
}

fn layer_curve(c: &mut Criterion) {
    let train = data(400, 4);
    let mut group = c.benchmark_group("layerwise_compression");
    group.sample_size(10);
    for (name, exec) in MODES {
        let config = small_config().with_exec(exec);
        group.bench_with_input(BenchmarkId::from_parameter(name), &config, |b, cfg| {
            b.iter(|| layerwise_on(black_box(&train), cfg, &DEFAULT_FRACTIONS, 1, None).unwrap())
        });
    }
    group.finish();
}

fn seeds(c: &mut Criterion) {
    let all = data(600, 2);
    let train = all.prefix(480);
    let test = all.with_records(all.records[480..].to_vec());
    let mut group = c.benchmark_group("edge_probe_seeds");
    group.sample_size(10);
    for (name, exec) in MODES {
        let config = small_config().with_exec(exec);
        group.bench_with_input(BenchmarkId::from_parameter(name), &config, |b, cfg| {
            b.iter(|| run_edge_probe(black_box(&train), &test, cfg, &[1, 2, 3, 4]).unwrap())
        });
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let test = data(4000, 2);
    let mut group = c.benchmark_group("evaluate_accuracy");
    for (name, exec) in MODES {
        let config = ProbeConfig::default().with_exec(exec);
        let params = init_params(2, 16, &config, 1);
        group.bench_with_input(BenchmarkId::from_parameter(name), &config, |b, cfg| {
            b.iter(|| evaluate_accuracy(&params, black_box(&test), cfg).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, layer_curve, seeds, evaluation);
criterion_main!(benches);
