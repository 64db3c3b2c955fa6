#![allow(dead_code)]

use layerprobe::activation::{ActivationRecord, RecordSet};
use layerprobe::corpus::{Corpus, LabeledExample};
use layerprobe::probe::ProbeConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A small probe that keeps property tests fast.
pub fn tiny_config(num_classes: usize) -> ProbeConfig {
    ProbeConfig {
        projection_dim: 8,
        mlp_hidden_dim: 8,
        batch_size: 4,
        epochs: 2,
        learning_rate: 1e-2,
        num_classes,
        ..ProbeConfig::default()
    }
}

pub fn random_records(seed: u64, n: usize, layers: usize, hidden: usize, classes: usize) -> RecordSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = (0..n)
        .map(|i| {
            let span_len = rng.random_range(1..=3u32);
            ActivationRecord {
                example_id: 1000 + i as u64,
                label: rng.random_range(0..classes as u32),
                span_len,
                values: (0..span_len as usize * layers * hidden)
                    .map(|_| rng.random_range(-3.0f32..3.0))
                    .collect(),
            }
        })
        .collect();
    RecordSet {
        num_layers: layers,
        hidden_dim: hidden,
        num_classes: classes,
        records,
    }
}

pub fn example(id: u64, label: &str) -> LabeledExample {
    LabeledExample {
        id,
        text: "the river of time flows".into(),
        span_start: 2,
        span_end: 3,
        label: label.into(),
        label_index: 0,
        lang: "en".into(),
        dataset: "toy".into(),
        source_domain: None,
        target_domain: None,
    }
}

/// A corpus with the given per-class counts, labels `c0`, `c1`, ...
pub fn corpus_with_counts(counts: &[usize]) -> Corpus {
    let mut id = 0;
    let mut examples = Vec::new();
    for (k, &c) in counts.iter().enumerate() {
        for _ in 0..c {
            examples.push(example(id, &format!("c{k}")));
            id += 1;
        }
    }
    Corpus::new(examples).unwrap()
}

pub fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}
