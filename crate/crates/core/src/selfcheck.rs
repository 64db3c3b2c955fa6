//! Built-in correctness checks run by `layerprobe selftest`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::activation::{ActivationRecord, RecordSet};
use crate::mdl::portion_seed;
use crate::probe::{
    analytic_gradient, check_gradients, compare_gradients, forward, loss_bits, numeric_gradient, relu_margin,
    train_probe, LayerMode, ProbeConfig, ProbeParams,
};
use crate::rng::{derive_seed, substream};
use crate::Result;

/// Finite-difference step used by the sweep.
pub const GRAD_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientSweep {
    pub draws: usize,
    pub max_rel_error: f64,
    pub worst_group: String,
}

/// Draws closer than this to a rectifier kink are redrawn: a central
/// difference straddling the kink measures a one-sided slope.
pub const KINK_MARGIN: f64 = 1e-2;

/// A random small probe problem: parameters, a batch and a config, with
/// every hidden pre-activation at least [`KINK_MARGIN`] from zero.
pub fn random_problem(seed: u64) -> (ProbeParams, RecordSet, ProbeConfig) {
    for attempt in 0.. {
        let (params, data, config) = draw_problem(seed, attempt);
        if relu_margin(&params, &data, config.layer_mode).is_ok_and(|m| m >= KINK_MARGIN) {
            return (params, data, config);
        }
    }
    unreachable!()
}

fn draw_problem(seed: u64, attempt: u64) -> (ProbeParams, RecordSet, ProbeConfig) {
    let mut rng = substream(seed, "gradcheck-problem", attempt);
    let layers = rng.random_range(1..=4usize);
    let hidden = rng.random_range(2..=6usize);
    let classes = rng.random_range(2..=4usize);
    let mode = if rng.random_bool(0.5) {
        LayerMode::Mix
    } else {
        LayerMode::Single(rng.random_range(0..layers))
    };
    let config = ProbeConfig {
        projection_dim: rng.random_range(4..=10),
        mlp_hidden_dim: rng.random_range(4..=10),
        num_classes: classes,
        layer_mode: mode,
        ..ProbeConfig::default()
    };
    let batch = rng.random_range(1..=6usize);
    let records = (0..batch)
        .map(|i| {
            let span_len = rng.random_range(1..=3u32);
            ActivationRecord {
                example_id: i as u64,
                label: rng.random_range(0..classes as u32),
                span_len,
                values: (0..span_len as usize * layers * hidden)
                    .map(|_| rng.random_range(-2.0f32..2.0))
                    .collect(),
            }
        })
        .collect();
    let data = RecordSet {
        num_layers: layers,
        hidden_dim: hidden,
        num_classes: classes,
        records,
    };
    let params = ProbeParams::random(layers, hidden, &config, derive_seed(seed, "gradcheck-params", attempt), 0.5);
    (params, data, config)
}

/// Gradient check over `draws` random problems.
pub fn gradient_sweep(draws: usize, seed: u64) -> Result<GradientSweep> {
    let mut sweep = GradientSweep {
        draws,
        max_rel_error: 0.0,
        worst_group: String::new(),
    };
    for d in 0..draws {
        let (params, batch, config) = random_problem(seed.wrapping_add(d as u64));
        let report = check_gradients(&params, &batch, &config, GRAD_STEP)?;
        for (group, err) in report.groups {
            if err > sweep.max_rel_error {
                sweep.max_rel_error = err;
                sweep.worst_group = group;
            }
        }
    }
    Ok(sweep)
}

/// Error the checker reports when the analytic projection gradient is
/// scaled by 1.1. A working checker reports well above 1e-2.
pub fn tampered_gradient_error(seed: u64) -> Result<f64> {
    let (params, batch, config) = random_problem(seed);
    let mut analytic = analytic_gradient(&params, &batch, &config)?;
    for g in analytic.proj_weight.iter_mut().chain(analytic.proj_bias.iter_mut()) {
        *g *= 1.1;
    }
    let numeric = numeric_gradient(&params, &batch, &config, GRAD_STEP)?;
    Ok(compare_gradients(&analytic, &numeric).max_rel_error)
}

/// Online-coding total recomputed from scratch: per portion, train a probe
/// on the prefix, code each following record one at a time.
pub fn naive_online_total(data: &RecordSet, config: &ProbeConfig, boundaries: &[usize], seed: u64) -> Result<f64> {
    let mut total = boundaries[0] as f64 * (config.num_classes as f64).log2();
    for i in 0..boundaries.len() - 1 {
        let (params, _) = train_probe(&data.prefix(boundaries[i]), config, portion_seed(seed, i))?;
        let mut block = 0.0;
        for record in &data.records[boundaries[i]..boundaries[i + 1]] {
            block += loss_bits(&forward(&params, record, config)?, record.label as usize);
        }
        total += block;
    }
    Ok(total)
}
