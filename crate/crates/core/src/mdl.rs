//! Online-coding description length and compression.
//!
//! With portion boundaries `t_1 < ... < t_S = N`, the first `t_1` labels are
//! sent with a uniform code, and block `(t_i, t_{i+1}]` is sent with a probe
//! trained from scratch on the first `t_i` examples:
//!
//! ```text
//! MDL = t_1 * log2(K) + sum_i sum_{j in block i} -log2 p_i(y_j | x_j)
//! compression = N * log2(K) / MDL
//! ```
//!
//! Each block is summed in record order starting from zero; the total starts
//! from the uniform cost and adds blocks in order. All sums are `f64`.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::activation::{ActivationSet, RecordSet};
use crate::corpus::CorpusSplits;
use crate::probe::{train_probe_on, LayerMode, ProbeConfig, SpanFeatures};
use crate::rng::{derive_seed, substream};
use crate::{Error, Result};

/// Portion fractions of the doubling grid from 0.1% to 100%.
pub const DEFAULT_FRACTIONS: [f64; 11] = [
    0.001, 0.002, 0.004, 0.008, 0.016, 0.032, 0.0625, 0.125, 0.25, 0.5, 1.0,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortionSchedule {
    pub num_examples: usize,
    /// Strictly increasing example counts ending at `num_examples`.
    pub boundaries: Vec<usize>,
}

impl PortionSchedule {
    pub fn new(num_examples: usize, boundaries: Vec<usize>) -> Result<Self> {
        if boundaries.is_empty() || boundaries[0] < 1 {
            return Err(Error::invalid("schedule must start at a boundary >= 1"));
        }
        if boundaries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("schedule boundaries must be strictly increasing"));
        }
        if *boundaries.last().unwrap() != num_examples {
            return Err(Error::invalid(format!(
                "last schedule boundary must equal N = {num_examples}"
            )));
        }
        Ok(PortionSchedule {
            num_examples,
            boundaries,
        })
    }

    pub fn first(&self) -> usize {
        self.boundaries[0]
    }

    /// Number of coded blocks after the uniform one.
    pub fn num_blocks(&self) -> usize {
        self.boundaries.len() - 1
    }
}

/// Rounds `fraction * n` (half away from zero), clamps to `[1, n]` and drops
/// duplicates.
pub fn make_schedule(n: usize, fractions: &[f64]) -> Result<PortionSchedule> {
    if n < 10 {
        return Err(Error::invalid(format!("online coding needs N >= 10, got {n}")));
    }
    if fractions.iter().any(|f| !(f.is_finite() && *f > 0.0 && *f <= 1.0)) {
        return Err(Error::invalid("portion fractions must lie in (0, 1]"));
    }
    let mut boundaries: Vec<usize> = fractions
        .iter()
        .map(|f| ((f * n as f64).round() as usize).clamp(1, n))
        .collect();
    boundaries.sort_unstable();
    boundaries.dedup();
    if boundaries.len() < 2 {
        return Err(Error::invalid(format!(
            "fractions yield fewer than 2 distinct boundaries for N = {n}"
        )));
    }
    if *boundaries.last().unwrap() != n {
        return Err(Error::invalid("largest portion fraction must be 1.0"));
    }
    PortionSchedule::new(n, boundaries)
}

/// `N * log2(K) / total_bits`.
pub fn compression(total_bits: f64, n: usize, k: usize) -> Result<f64> {
    if total_bits.is_nan() || total_bits <= 0.0 {
        return Err(Error::invalid(format!("total codelength must be > 0, got {total_bits}")));
    }
    Ok(n as f64 * (k as f64).log2() / total_bits)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MdlReport {
    pub num_examples: usize,
    pub num_classes: usize,
    pub schedule: Vec<usize>,
    pub uniform_cost_bits: f64,
    pub block_codelengths_bits: Vec<f64>,
    pub total_mdl_bits: f64,
    pub compression: f64,
    pub seed: u64,
    /// Probed layer, when a single layer was used.
    pub layer: Option<usize>,
}

/// Seed of the probe trained for portion `index`.
pub fn portion_seed(seed: u64, index: usize) -> u64 {
    derive_seed(seed, "portion", index as u64)
}

/// Online coding over `data` in the given order.
///
/// The caller shuffles `data` beforehand. Every portion trains a fresh probe
/// seeded by [`portion_seed`].
pub fn online_coding(data: &RecordSet, config: &ProbeConfig, schedule: &PortionSchedule, seed: u64) -> Result<MdlReport> {
    if data.len() != schedule.num_examples {
        return Err(Error::invalid(format!(
            "schedule is for {} examples, data has {}",
            schedule.num_examples,
            data.len()
        )));
    }
    if data.num_classes != config.num_classes {
        return Err(Error::Config(format!(
            "data has {} classes, probe configured for {}",
            data.num_classes, config.num_classes
        )));
    }
    config.validate(data.num_layers)?;
    let features = SpanFeatures::build(data, config.layer_mode)?;
    online_coding_features(&features, config, schedule, seed)
}

pub(crate) fn online_coding_features(
    features: &SpanFeatures,
    config: &ProbeConfig,
    schedule: &PortionSchedule,
    seed: u64,
) -> Result<MdlReport> {
    let k = config.num_classes;
    let b = &schedule.boundaries;
    let portions: Vec<usize> = (0..schedule.num_blocks()).collect();
    let blocks = config.exec.try_map(&portions, |&i| {
        let (params, _) = train_probe_on(features, 0..b[i], config, portion_seed(seed, i)).map_err(|e| Error::Portion {
            portion: i,
            source: Box::new(e),
        })?;
        Ok(crate::probe::codelength_bits(&params, features, b[i]..b[i + 1]))
    })?;
    let uniform_cost_bits = schedule.first() as f64 * (k as f64).log2();
    let total_mdl_bits = blocks.iter().fold(uniform_cost_bits, |acc, x| acc + x);
    Ok(MdlReport {
        num_examples: schedule.num_examples,
        num_classes: k,
        schedule: b.clone(),
        uniform_cost_bits,
        block_codelengths_bits: blocks,
        total_mdl_bits,
        compression: compression(total_mdl_bits, schedule.num_examples, k)?,
        seed,
        layer: match config.layer_mode {
            LayerMode::Single(l) => Some(l),
            LayerMode::Mix => None,
        },
    })
}

/// Train-split records of `set` in the seeded online-coding order.
pub fn shuffled_train(set: &ActivationSet, splits: &CorpusSplits, seed: u64) -> Result<RecordSet> {
    let mut ids = splits.train_ids();
    ids.shuffle(&mut substream(seed, "mdl-order", 0));
    set.select(&ids)
}

/// Online coding on the shuffled train split with `config` as given.
pub fn mdl_probe(
    set: &ActivationSet,
    splits: &CorpusSplits,
    config: &ProbeConfig,
    fractions: &[f64],
    seed: u64,
) -> Result<MdlReport> {
    let train = shuffled_train(set, splits, seed)?;
    let schedule = make_schedule(train.len(), fractions)?;
    online_coding(&train, config, &schedule, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCurve {
    pub layers: Vec<usize>,
    pub compression: Vec<f64>,
    pub best_layer: usize,
    pub reports: Vec<MdlReport>,
}

impl LayerCurve {
    fn from_reports(layers: Vec<usize>, reports: Vec<MdlReport>) -> Self {
        let compression: Vec<f64> = reports.iter().map(|r| r.compression).collect();
        let mut best = (layers[0], compression[0]);
        for (&l, &c) in layers.iter().zip(&compression) {
            if c > best.1 || (c == best.1 && l < best.0) {
                best = (l, c);
            }
        }
        let best_layer = best.0;
        LayerCurve {
            layers,
            compression,
            best_layer,
            reports,
        }
    }

    pub fn at(&self, layer: usize) -> Option<f64> {
        self.layers.iter().position(|&l| l == layer).map(|i| self.compression[i])
    }
}

/// Runs online coding once per layer with a single-layer probe.
///
/// Every layer sees the same shuffled train split and the same seeds, so a
/// layer's value does not depend on which other layers are probed. `layers`
/// defaults to all layers in order.
pub fn layerwise_compression(
    set: &ActivationSet,
    splits: &CorpusSplits,
    config: &ProbeConfig,
    fractions: &[f64],
    seed: u64,
    layers: Option<&[usize]>,
) -> Result<LayerCurve> {
    let train = shuffled_train(set, splits, seed)?;
    layerwise_on(&train, config, fractions, seed, layers)
}

/// [`layerwise_compression`] over records already in coding order.
pub fn layerwise_on(
    train: &RecordSet,
    config: &ProbeConfig,
    fractions: &[f64],
    seed: u64,
    layers: Option<&[usize]>,
) -> Result<LayerCurve> {
    let layers: Vec<usize> = match layers {
        Some(ls) => ls.to_vec(),
        None => (0..train.num_layers).collect(),
    };
    if layers.is_empty() {
        return Err(Error::invalid("no layers to probe"));
    }
    let schedule = make_schedule(train.len(), fractions)?;
    let reports = config.exec.try_map(&layers, |&layer| {
        let cfg = config.clone().with_layer(LayerMode::Single(layer));
        online_coding(train, &cfg, &schedule, seed).map_err(|e| Error::Layer {
            layer,
            source: Box::new(e),
        })
    })?;
    Ok(LayerCurve::from_reports(layers, reports))
}
