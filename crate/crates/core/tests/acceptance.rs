//! Acceptance checks, one line per criterion. Run with
//! `cargo test --test acceptance`; exits nonzero if any check fails.

mod common;

use std::collections::{BTreeMap, HashSet};
use std::time::{Duration, Instant};

use layerprobe::activation::{
    synth_activations, ActivationHeader, ActivationRecord, ActivationSet, ActivationWriter, RecordSet, SynthSpec,
};
use layerprobe::corpus::{balance_and_split, subsample_train, Corpus, Ratios};
use layerprobe::mdl::{layerwise_compression, make_schedule, mdl_probe, online_coding, portion_seed, PortionSchedule, DEFAULT_FRACTIONS};
use layerprobe::probe::{forward, train_probe, LayerMode, ProbeConfig};
use layerprobe::selfcheck::{gradient_sweep, tampered_gradient_error};
use layerprobe::transfer::{run_edge_probe, run_transfer_matrix, DistributionKey, TransferSplit, WeightsMode};
use layerprobe::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Check = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn err(e: Error) -> String {
    e.to_string()
}

fn gradient_correctness() -> Outcome {
    let started = Instant::now();
    let sweep = gradient_sweep(25, 2024).map_err(err)?;
    let elapsed = started.elapsed();
    ensure!(sweep.max_rel_error < 1e-4, "max relative error {:.3e} in {}", sweep.max_rel_error, sweep.worst_group);
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    let tampered = tampered_gradient_error(7).map_err(err)?;
    ensure!(tampered > 1e-2, "perturbed gradient only flagged at {tampered:.3e}");
    Ok(format!("{} draws, max rel error {:.2e}, perturbed {:.2e}", sweep.draws, sweep.max_rel_error, tampered))
}

fn random_classifier_compression() -> Outcome {
    let config = ProbeConfig::default();
    let mut values = Vec::new();
    for seed in 1..=3 {
        let data = synth_activations(&SynthSpec::new(2000, 1, 16, 2, seed)).map_err(err)?.all().map_err(err)?;
        let schedule = make_schedule(data.len(), &DEFAULT_FRACTIONS).map_err(err)?;
        values.push(online_coding(&data, &config, &schedule, seed).map_err(err)?.compression);
    }
    let m = common::median(values.clone());
    ensure!((0.90..=1.10).contains(&m), "median compression {m:.4} from {values:?}");
    Ok(format!("median compression {m:.4} over seeds 1..=3"))
}

fn signal_recovery() -> Outcome {
    let seed = 3;
    let set = synth_activations(&SynthSpec::new(2000, 13, 16, 2, seed).with_signal(3, 5.0)).map_err(err)?;
    let corpus = Corpus::from_activations(&set, "synthetic", "xx").map_err(err)?;
    let splits = balance_and_split(&corpus, Ratios::default(), seed).map_err(err)?;
    let config = ProbeConfig::default();
    let curve = layerwise_compression(&set, &splits, &config, &DEFAULT_FRACTIONS, seed, None).map_err(err)?;
    let at3 = curve.at(3).unwrap_or(f64::NAN);
    ensure!(curve.best_layer == 3, "best layer {} (curve {:?})", curve.best_layer, curve.compression);
    ensure!(at3 >= 1.5, "compression at layer 3 is {at3:.4}");

    let train = set.select(&splits.train_ids()).map_err(err)?;
    let test = set.select(&splits.test_ids()).map_err(err)?;
    let edge = run_edge_probe(&train, &test, &config.with_layer(LayerMode::Single(curve.best_layer)), &[1, 2, 3])
        .map_err(err)?;
    ensure!(edge.mean_accuracy >= 0.99, "edge accuracy {:.4}", edge.mean_accuracy);
    Ok(format!(
        "best layer 3, compression {at3:.3} (layer 0: {:.3}), edge accuracy {:.4}",
        curve.compression[0], edge.mean_accuracy
    ))
}

/// Trains on each prefix and codes the next block record by record.
fn naive_total(data: &RecordSet, config: &ProbeConfig, boundaries: &[usize], seed: u64) -> f64 {
    let mut total = boundaries[0] as f64 * (config.num_classes as f64).log2();
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

fn mdl_oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(64);
    let mut instances = vec![(8usize, 2usize, vec![2usize, 4, 8])];
    while instances.len() < 40 {
        let n = rng.random_range(2..=64);
        let k = rng.random_range(2..=4);
        let mut b: Vec<usize> = (0..rng.random_range(1..5)).map(|_| rng.random_range(1..n)).collect();
        b.push(n);
        b.sort_unstable();
        b.dedup();
        instances.push((n, k, b));
    }
    for (i, (n, k, b)) in instances.iter().enumerate() {
        let data = common::random_records(i as u64, *n, 2, 3, *k);
        let mut config = common::tiny_config(*k);
        if i % 2 == 1 {
            config.layer_mode = LayerMode::Single(1);
        }
        let schedule = PortionSchedule::new(*n, b.clone()).map_err(err)?;
        let got = online_coding(&data, &config, &schedule, i as u64).map_err(err)?.total_mdl_bits;
        let want = naive_total(&data, &config, b, i as u64);
        ensure!(got.to_bits() == want.to_bits(), "instance {i} (N={n}, schedule {b:?}): {got} vs {want}");
    }
    Ok(format!("{} instances with N <= 64 match bit-for-bit", instances.len()))
}

fn degenerate_schedules() -> Outcome {
    for (n, k) in [(1, 2), (37, 3), (500, 2), (64, 5)] {
        let data = common::random_records(n as u64, n, 1, 3, k);
        let report = online_coding(&data, &common::tiny_config(k), &PortionSchedule::new(n, vec![n]).map_err(err)?, 1)
            .map_err(err)?;
        ensure!(report.compression == 1.0, "single boundary N={n} K={k}: compression {}", report.compression);
    }
    for k in [2, 4] {
        let data = common::random_records(k as u64, 300, 2, 3, k);
        let config = ProbeConfig { epochs: 0, ..ProbeConfig::default().with_classes(k) };
        let schedule = make_schedule(300, &DEFAULT_FRACTIONS).map_err(err)?;
        let report = online_coding(&data, &config, &schedule, 1).map_err(err)?;
        for (w, &cost) in schedule.boundaries.windows(2).zip(&report.block_codelengths_bits) {
            let expect = (w[1] - w[0]) as f64 * (k as f64).log2();
            ensure!(cost == expect, "K={k}: block {w:?} cost {cost}, expected {expect}");
        }
        ensure!(report.compression == 1.0, "zero-step K={k}: compression {}", report.compression);
    }
    Ok("single boundary and zero-step probes code uniformly, exactly".into())
}

fn protocol_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..50 {
        let counts: Vec<usize> = (0..rng.random_range(2..5)).map(|_| rng.random_range(1..120)).collect();
        let s = balance_and_split(&common::corpus_with_counts(&counts), Ratios::default(), trial).map_err(err)?;
        for split in [&s.train, &s.dev, &s.test] {
            let c = s.class_counts(split);
            ensure!(c.iter().max().unwrap() - c.iter().min().unwrap() <= 1, "counts {counts:?}: split classes {c:?}");
        }
        ensure!(s.overlap().is_empty(), "counts {counts:?}: splits overlap");
    }

    let mut sets = BTreeMap::new();
    for (lang, seed) in [("aa", 1u64), ("bb", 2)] {
        for (mode, strength) in [(WeightsMode::Pretrained, 3.0), (WeightsMode::Randomized, 0.0)] {
            let mut spec = SynthSpec::new(400, 1, 8, 2, seed * 10 + strength as u64);
            spec.id_offset = seed * 100_000;
            if strength > 0.0 {
                spec = spec.with_signal(0, strength);
            }
            let set = synth_activations(&spec).map_err(err)?;
            let corpus = Corpus::from_activations(&set, "toy", lang).map_err(err)?;
            let sp = balance_and_split(&corpus, Ratios::default(), 1).map_err(err)?;
            let sp = subsample_train(&sp, 250, 1).map_err(err)?;
            let split = TransferSplit {
                train: set.select(&sp.train_ids()).map_err(err)?,
                test: set.select(&sp.test_ids()).map_err(err)?,
            };
            sets.insert(DistributionKey::new("toy", lang, "enc", mode), split);
        }
    }
    let config = ProbeConfig { learning_rate: 1e-3, ..ProbeConfig::default() };
    let seeds = [1, 2];
    let m = run_transfer_matrix(&sets, &config, &seeds).map_err(err)?;
    for (key, split) in &sets {
        let alone = run_edge_probe(&split.train, &split.test, &config, &seeds).map_err(err)?;
        ensure!(m.cell(key, key, key.weights_mode).map(|c| &c.result) == Some(&alone), "diagonal {key} differs from standalone run");
    }
    for c in &m.cells {
        let train: HashSet<u64> = sets[&c.source.with_mode(c.weights_mode)].train.ids().into_iter().collect();
        let leaked = sets[&c.target.with_mode(c.weights_mode)].test.ids().into_iter().filter(|id| train.contains(id)).count();
        ensure!(leaked == 0, "cell {} -> {} shares {leaked} ids", c.source, c.target);
    }
    let again = run_transfer_matrix(&sets, &config, &seeds).map_err(err)?;
    ensure!(serde_json::to_vec(&m).unwrap() == serde_json::to_vec(&again).unwrap(), "transfer matrix not reproducible");

    let set = synth_activations(&SynthSpec::new(300, 2, 6, 2, 9).with_signal(1, 2.0)).map_err(err)?;
    let sp = balance_and_split(&Corpus::from_activations(&set, "toy", "xx").map_err(err)?, Ratios::default(), 9).map_err(err)?;
    let a = mdl_probe(&set, &sp, &ProbeConfig::default(), &DEFAULT_FRACTIONS, 4).map_err(err)?;
    let b = mdl_probe(&set, &sp, &ProbeConfig::default(), &DEFAULT_FRACTIONS, 4).map_err(err)?;
    ensure!(serde_json::to_vec(&a).unwrap() == serde_json::to_vec(&b).unwrap(), "MDL report not reproducible");
    Ok(format!("50 balanced splits, {} transfer cells clean, reports reproducible", m.cells.len()))
}

fn random_file(rng: &mut ChaCha8Rng) -> (ActivationHeader, Vec<ActivationRecord>) {
    let (l, h, k) = (rng.random_range(1..5u32), rng.random_range(1..9u32), rng.random_range(2..6u32));
    let n = rng.random_range(1..20usize);
    let records: Vec<ActivationRecord> = (0..n)
        .map(|_| {
            let t = rng.random_range(1..5u32);
            ActivationRecord {
                example_id: rng.random(),
                label: rng.random_range(0..k),
                span_len: t,
                values: (0..(t * l * h)).map(|_| rng.random_range(-1e4f32..1e4)).collect(),
            }
        })
        .collect();
    let header = ActivationHeader::new(l, h, k, n as u64).with_meta("encoder", format!("enc{}", rng.random::<u8>()));
    (header, records)
}

fn encode(header: &ActivationHeader, records: &[ActivationRecord]) -> Vec<u8> {
    let mut w = ActivationWriter::new(std::io::Cursor::new(Vec::new()), "mem", header.clone()).unwrap();
    for r in records {
        w.push(r).unwrap();
    }
    w.finish().unwrap().into_inner()
}

fn format_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for i in 0..200 {
        let (header, records) = random_file(&mut rng);
        let bytes = encode(&header, &records);
        let set = ActivationSet::from_bytes(bytes.clone()).map_err(err)?;
        ensure!(set.header() == &header && set.to_records().map_err(err)? == records, "file {i} did not round-trip");

        let mut bad = bytes.clone();
        bad[1] ^= 0x20;
        match ActivationSet::from_bytes(bad) {
            Err(Error::Format(m)) if m.contains("magic") => {}
            other => return Err(format!("file {i}: corrupted magic gave {other:?}")),
        }
        let cut = rng.random_range(4..bytes.len());
        match ActivationSet::from_bytes(bytes[..cut].to_vec()) {
            Err(Error::Corrupt { offset, .. }) if offset <= cut as u64 => {}
            other => return Err(format!("file {i}: truncation at {cut} gave {other:?}")),
        }
    }
    Ok("200 random files round-trip; bad magic and truncation located".into())
}

fn main() {
    let checks: [Check; 7] = [
        ("gradient correctness", gradient_correctness),
        ("random-classifier compression", random_classifier_compression),
        ("signal recovery", signal_recovery),
        ("MDL oracle equivalence", mdl_oracle_equivalence),
        ("degenerate-schedule exactness", degenerate_schedules),
        ("protocol invariants", protocol_invariants),
        ("format round trip and corruption", format_round_trip),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let started = Instant::now();
        let outcome = check();
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    println!("{} of {} acceptance checks passed", checks.len() - failed, checks.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
