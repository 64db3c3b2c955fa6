mod common;

use layerprobe::activation::{synth_activations, RecordSet, SynthSpec};
use layerprobe::corpus::{balance_and_split, Corpus, Ratios};
use layerprobe::exec::Exec;
use layerprobe::mdl::{
    compression, layerwise_on, make_schedule, mdl_probe, online_coding, portion_seed, PortionSchedule,
    DEFAULT_FRACTIONS,
};
use layerprobe::probe::{forward, train_probe, LayerMode, ProbeConfig};
use proptest::prelude::*;

/// Online coding recomputed the long way: train on each prefix, then code
/// the next block one record at a time through the public forward pass.
fn naive_total(data: &RecordSet, config: &ProbeConfig, boundaries: &[usize], seed: u64) -> f64 {
    let k = config.num_classes as f64;
    let mut total = boundaries[0] as f64 * k.log2();
    for (i, w) in boundaries.windows(2).enumerate() {
        let prefix = RecordSet {
            records: data.records[..w[0]].to_vec(),
            ..data.clone()
        };
        let (params, _) = train_probe(&prefix, config, portion_seed(seed, i)).unwrap();
        let mut block = 0.0f64;
        for r in &data.records[w[0]..w[1]] {
            let p = forward(&params, r, config).unwrap();
            block += -p[r.label as usize].max(2f64.powi(-60)).log2();
        }
        total += block;
    }
    total
}

fn arb_boundaries(n: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::btree_set(1..n, 1..5).prop_map(move |s| {
        let mut b: Vec<usize> = s.into_iter().collect();
        b.push(n);
        b
    })
}

fn arb_instance() -> impl Strategy<Value = (usize, usize, usize, usize, Vec<usize>, u64, bool)> {
    (4usize..=64, 2usize..=4, 1usize..=3, 2usize..=4).prop_flat_map(|(n, k, l, h)| {
        (Just(n), Just(k), Just(l), Just(h), arb_boundaries(n), any::<u64>(), any::<bool>())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn online_coding_matches_naive_oracle((n, k, l, h, boundaries, seed, mix) in arb_instance()) {
        let data = common::random_records(seed, n, l, h, k);
        let mut config = common::tiny_config(k);
        config.layer_mode = if mix { LayerMode::Mix } else { LayerMode::Single(l - 1) };
        let schedule = PortionSchedule::new(n, boundaries.clone()).unwrap();
        let report = online_coding(&data, &config, &schedule, seed).unwrap();
        let oracle = naive_total(&data, &config, &boundaries, seed);
        prop_assert_eq!(report.total_mdl_bits.to_bits(), oracle.to_bits(), "{} vs {}", report.total_mdl_bits, oracle);

        let additive = report.block_codelengths_bits.iter().fold(report.uniform_cost_bits, |a, b| a + b);
        prop_assert_eq!(additive, report.total_mdl_bits);
        prop_assert!(report.block_codelengths_bits.iter().all(|&b| b >= 0.0));
        prop_assert!(report.compression > 0.0);
        prop_assert_eq!(report.compression, n as f64 * (k as f64).log2() / report.total_mdl_bits);
    }

    #[test]
    fn single_boundary_is_exactly_uniform(n in 1usize..200, k in 2usize..6, seed in any::<u64>()) {
        let data = common::random_records(seed, n, 1, 2, k);
        let schedule = PortionSchedule::new(n, vec![n]).unwrap();
        let report = online_coding(&data, &common::tiny_config(k), &schedule, seed).unwrap();
        prop_assert!(report.block_codelengths_bits.is_empty());
        prop_assert_eq!(report.total_mdl_bits, n as f64 * (k as f64).log2());
        prop_assert_eq!(report.compression, 1.0);
    }

    #[test]
    fn zero_step_probe_codes_uniformly(n in 10usize..120, k in prop::sample::select(vec![2usize, 4, 8]), seed in any::<u64>()) {
        let data = common::random_records(seed, n, 2, 3, k);
        let config = ProbeConfig { epochs: 0, ..common::tiny_config(k) };
        let schedule = make_schedule(n, &DEFAULT_FRACTIONS).unwrap();
        let report = online_coding(&data, &config, &schedule, seed).unwrap();
        let bits = (k as f64).log2();
        for (w, &cost) in schedule.boundaries.windows(2).zip(&report.block_codelengths_bits) {
            prop_assert_eq!(cost, (w[1] - w[0]) as f64 * bits);
        }
        prop_assert_eq!(report.compression, 1.0);
    }
}

#[test]
fn tiny_instance_matches_oracle() {
    let data = common::random_records(3, 8, 2, 3, 2);
    let config = ProbeConfig {
        projection_dim: 16,
        mlp_hidden_dim: 16,
        batch_size: 2,
        ..ProbeConfig::default()
    };
    let schedule = PortionSchedule::new(8, vec![2, 4, 8]).unwrap();
    let report = online_coding(&data, &config, &schedule, 5).unwrap();
    assert_eq!(report.total_mdl_bits, naive_total(&data, &config, &[2, 4, 8], 5));
    assert_eq!(report.uniform_cost_bits, 2.0);
    assert_eq!(report.block_codelengths_bits.len(), 2);
}

#[test]
fn schedules() {
    let s = make_schedule(1000, &DEFAULT_FRACTIONS).unwrap();
    assert_eq!(s.boundaries, [1, 2, 4, 8, 16, 32, 63, 125, 250, 500, 1000]);
    assert_eq!(make_schedule(10, &[0.5, 1.0]).unwrap().boundaries, [5, 10]);
    assert_eq!(make_schedule(10, &[0.41, 0.44, 1.0]).unwrap().boundaries, [4, 10]);
    assert!(make_schedule(10, &[1.0]).is_err());
    assert_eq!(compression(1000.0, 1000, 2).unwrap(), 1.0);
    assert_eq!(compression(500.0, 1000, 2).unwrap(), 2.0);
    assert!(compression(0.0, 1000, 2).is_err());
}

fn synth_train(strength: f64, layers: usize, signal_layer: usize, seed: u64) -> (layerprobe::activation::ActivationSet, layerprobe::corpus::CorpusSplits) {
    let mut spec = SynthSpec::new(2000, layers, 16, 2, seed);
    if strength > 0.0 {
        spec = spec.with_signal(signal_layer, strength);
    }
    let set = synth_activations(&spec).unwrap();
    let corpus = Corpus::from_activations(&set, "synthetic", "xx").unwrap();
    let splits = balance_and_split(&corpus, Ratios::default(), seed).unwrap();
    (set, splits)
}

#[test]
fn compression_grows_with_signal() {
    let config = ProbeConfig::default();
    let mut medians = Vec::new();
    for strength in [0.0, 1.0, 2.0, 5.0] {
        let runs = (1..=3)
            .map(|seed| {
                let (set, splits) = synth_train(strength, 1, 0, seed);
                mdl_probe(&set, &splits, &config, &DEFAULT_FRACTIONS, seed).unwrap().compression
            })
            .collect();
        medians.push(common::median(runs));
    }
    assert!(medians.windows(2).all(|w| w[0] <= w[1]), "{medians:?}");
    assert!((0.9..=1.1).contains(&medians[0]), "{medians:?}");
}

#[test]
fn layer_values_do_not_depend_on_probe_order() {
    let data = common::random_records(8, 120, 3, 4, 2);
    let config = common::tiny_config(2);
    let fractions = [0.1, 0.25, 0.5, 1.0];
    let a = layerwise_on(&data, &config, &fractions, 4, None).unwrap();
    let b = layerwise_on(&data, &config, &fractions, 4, Some(&[2, 0])).unwrap();
    let c = layerwise_on(&data, &config, &fractions, 4, Some(&[1])).unwrap();
    assert_eq!(a.at(2), b.at(2));
    assert_eq!(a.at(0), b.at(0));
    assert_eq!(a.at(1), c.at(1));
    assert_eq!(a.layers, [0, 1, 2]);
}

#[test]
fn reports_are_reproducible_in_both_exec_modes() {
    let data = common::random_records(9, 150, 2, 4, 3);
    let config = common::tiny_config(3);
    let fractions = [0.05, 0.2, 0.5, 1.0];
    let seq = layerwise_on(&data, &config.clone().with_exec(Exec::Sequential), &fractions, 2, None).unwrap();
    let par = layerwise_on(&data, &config.clone().with_exec(Exec::Parallel), &fractions, 2, None).unwrap();
    let again = layerwise_on(&data, &config.with_exec(Exec::Parallel), &fractions, 2, None).unwrap();
    assert_eq!(seq, par);
    assert_eq!(par, again);
    assert_eq!(serde_json::to_string(&seq).unwrap(), serde_json::to_string(&again).unwrap());
}
