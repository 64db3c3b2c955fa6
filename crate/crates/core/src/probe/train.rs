use std::ops::Range;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::model::{forward_backward, forward_row, init_params, loss_bits, ProbeParams, SpanFeatures, Workspace};
use super::ProbeConfig;
use crate::activation::RecordSet;
use crate::exec::Exec;
use crate::rng::substream;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per epoch, in bits.
    pub epoch_losses: Vec<f64>,
    pub dev_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub seed: u64,
    pub wall_clock_secs: f64,
}

/// Trains a fresh probe on `train`.
///
/// Each epoch reshuffles the examples with its own seeded stream and walks
/// them in mini-batches of `config.batch_size`; the last batch may be
/// smaller. Every batch takes one Adam step on the mean loss in bits. There
/// is no early stopping.
pub fn train_probe(train: &RecordSet, config: &ProbeConfig, seed: u64) -> Result<(ProbeParams, TrainReport)> {
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    check_classes(train, config)?;
    config.validate(train.num_layers)?;
    let features = SpanFeatures::build(train, config.layer_mode)?;
    train_probe_on(&features, 0..features.len(), config, seed)
}

/// Trains on the feature rows in `rows`.
pub fn train_probe_on(
    features: &SpanFeatures,
    rows: Range<usize>,
    config: &ProbeConfig,
    seed: u64,
) -> Result<(ProbeParams, TrainReport)> {
    let started = Instant::now();
    config.validate(features.num_layers)?;
    if features.mode != config.layer_mode {
        return Err(Error::Config("features were built for a different layer mode".into()));
    }
    if rows.is_empty() || rows.end > features.len() {
        return Err(Error::invalid(format!(
            "training rows {rows:?} invalid for {} examples",
            features.len()
        )));
    }
    let mut params = init_params(features.num_layers, features.hidden_dim, config, seed);
    let mut grads = params.zeros_like();
    let mut adam = Adam::new(&params, config.learning_rate);
    let mut ws = Workspace::new(&params);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let n = rows.len();

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = rows.clone().collect();
        order.shuffle(&mut substream(seed, "shuffle", epoch as u64));
        let mut epoch_total = 0.0;
        for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
            grads.fill_zero();
            let scale = 1.0 / chunk.len() as f64;
            let mut batch_total = 0.0;
            for &i in chunk {
                batch_total += forward_backward(
                    &params,
                    config.layer_mode,
                    features.row(i),
                    features.label(i),
                    scale,
                    &mut ws,
                    &mut grads,
                );
            }
            if !batch_total.is_finite() || !grads.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch });
            }
            epoch_total += batch_total;
            adam.step(&mut params, &grads);
            ws.refresh(&params);
        }
        epoch_losses.push(epoch_total / n as f64);
    }

    let report = TrainReport {
        epoch_losses,
        dev_accuracy: None,
        test_accuracy: None,
        seed,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((params, report))
}

fn check_classes(data: &RecordSet, config: &ProbeConfig) -> Result<()> {
    if data.num_classes != config.num_classes {
        return Err(Error::Config(format!(
            "data has {} classes, probe configured for {}",
            data.num_classes, config.num_classes
        )));
    }
    Ok(())
}

const EVAL_CHUNK: usize = 256;

fn chunks(n: usize) -> Vec<Range<usize>> {
    (0..n).step_by(EVAL_CHUNK).map(|s| s..(s + EVAL_CHUNK).min(n)).collect()
}

/// Probability vectors for every feature row, in order.
pub(crate) fn probabilities(params: &ProbeParams, features: &SpanFeatures, rows: Range<usize>, exec: Exec) -> Vec<Vec<f64>> {
    let offset = rows.start;
    exec.map(&chunks(rows.len()), |r| {
        let mut ws = Workspace::new(params);
        r.clone()
            .map(|i| {
                forward_row(params, features.mode, features.row(offset + i), &mut ws);
                ws.probs.clone()
            })
            .collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect()
}

/// Sum of per-example codelengths (bits) of `rows` under `params`,
/// accumulated in row order.
pub(crate) fn codelength_bits(params: &ProbeParams, features: &SpanFeatures, rows: Range<usize>) -> f64 {
    let offset = rows.start;
    probabilities(params, features, rows, Exec::Sequential)
        .iter()
        .enumerate()
        .map(|(i, p)| loss_bits(p, features.label(offset + i)))
        .fold(0.0, |acc, l| acc + l)
}

fn argmax(probs: &[f64]) -> usize {
    // First maximum wins, so ties go to the lowest class index.
    let mut best = 0;
    for (k, &p) in probs.iter().enumerate().skip(1) {
        if p > probs[best] {
            best = k;
        }
    }
    best
}

/// Predicted class per record.
pub fn predict(params: &ProbeParams, data: &RecordSet, config: &ProbeConfig) -> Result<Vec<usize>> {
    params.check_shape(data.num_layers, data.hidden_dim)?;
    let features = SpanFeatures::build(data, config.layer_mode)?;
    Ok(probabilities(params, &features, 0..features.len(), config.exec)
        .iter()
        .map(|p| argmax(p))
        .collect())
}

/// Fraction of records whose arg-max class equals the label.
pub fn evaluate_accuracy(params: &ProbeParams, data: &RecordSet, config: &ProbeConfig) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("evaluation set is empty"));
    }
    let predicted = predict(params, data, config)?;
    let correct = predicted
        .iter()
        .zip(&data.records)
        .filter(|(p, r)| **p == r.label as usize)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::activation::ActivationRecord;

    fn tiny_config() -> ProbeConfig {
        ProbeConfig {
            projection_dim: 8,
            mlp_hidden_dim: 8,
            ..ProbeConfig::default()
        }
    }

    fn constant_label_set(n: usize) -> RecordSet {
        let records = (0..n)
            .map(|i| ActivationRecord {
                example_id: i as u64,
                label: 1,
                span_len: 1,
                values: vec![(i % 7) as f32 * 0.1, 1.0, -1.0, 0.5],
            })
            .collect();
        RecordSet {
            num_layers: 2,
            hidden_dim: 2,
            num_classes: 2,
            records,
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
    }

    #[test]
    fn fresh_probe_predicts_class_zero() {
        let data = constant_label_set(10);
        let cfg = tiny_config();
        let params = init_params(2, 2, &cfg, 0);
        assert_eq!(evaluate_accuracy(&params, &data, &cfg).unwrap(), 0.0);
    }

    #[test]
    fn zero_epochs_returns_init() {
        let data = constant_label_set(10);
        let mut cfg = tiny_config();
        cfg.epochs = 0;
        let (params, report) = train_probe(&data, &cfg, 3).unwrap();
        assert_eq!(params, init_params(2, 2, &cfg, 3));
        assert!(report.epoch_losses.is_empty());
    }

    #[test]
    fn constant_label_is_learned() {
        let data = constant_label_set(500);
        let cfg = ProbeConfig {
            learning_rate: 1e-3,
            ..ProbeConfig::default()
        };
        let (params, report) = train_probe(&data, &cfg, 1).unwrap();
        assert!(*report.epoch_losses.last().unwrap() < 0.01, "{:?}", report.epoch_losses);
        assert_eq!(evaluate_accuracy(&params, &data, &cfg).unwrap(), 1.0);
    }

    #[test]
    fn class_count_mismatch_is_config_error() {
        let data = constant_label_set(4);
        let cfg = tiny_config().with_classes(3);
        assert!(matches!(train_probe(&data, &cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn exec_modes_agree() {
        let data = constant_label_set(600);
        let cfg = tiny_config();
        let params = crate::probe::ProbeParams::random(2, 2, &cfg, 5, 1.0);
        let a = predict(&params, &data, &cfg.clone().with_exec(Exec::Sequential)).unwrap();
        let b = predict(&params, &data, &cfg.with_exec(Exec::Parallel)).unwrap();
        assert_eq!(a, b);
    }
}
