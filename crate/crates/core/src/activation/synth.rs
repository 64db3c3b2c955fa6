use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ActivationHeader, ActivationRecord, ActivationSet};
use crate::rng::substream;
use crate::{Error, Result};

/// Synthetic activation generator settings.
///
/// Tensors are standard-normal noise. With a `signal_layer`, every span
/// token at that layer gets `signal_strength` added on dimension `label`,
/// so class means there sit `signal_strength * sqrt(2)` apart and the label is
/// linearly decodable from that layer alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub num_examples: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub signal_layer: Option<usize>,
    pub signal_strength: f64,
    /// Span lengths are drawn uniformly from `1..=max_span_len`.
    pub max_span_len: usize,
    /// Added to every example id, so sets built from different specs can
    /// be kept id-disjoint.
    pub id_offset: u64,
}

impl SynthSpec {
    pub fn new(num_examples: usize, num_layers: usize, hidden_dim: usize, num_classes: usize, seed: u64) -> Self {
        SynthSpec {
            num_examples,
            num_layers,
            hidden_dim,
            num_classes,
            seed,
            signal_layer: None,
            signal_strength: 0.0,
            max_span_len: 3,
            id_offset: 0,
        }
    }

    pub fn with_signal(mut self, layer: usize, strength: f64) -> Self {
        self.signal_layer = Some(layer);
        self.signal_strength = strength;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_examples < 1 || self.num_layers < 1 || self.hidden_dim < 1 || self.max_span_len < 1 {
            return Err(Error::invalid("synthetic spec dimensions must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("synthetic spec needs at least 2 classes"));
        }
        if !(self.signal_strength >= 0.0 && self.signal_strength.is_finite()) {
            return Err(Error::invalid("signal_strength must be finite and >= 0"));
        }
        if let Some(layer) = self.signal_layer {
            if layer >= self.num_layers {
                return Err(Error::invalid(format!(
                    "signal_layer {layer} out of range for {} layers",
                    self.num_layers
                )));
            }
            if self.num_classes > self.hidden_dim {
                return Err(Error::invalid("planting a signal needs num_classes <= hidden_dim"));
            }
        }
        Ok(())
    }
}

pub fn synth_activations(spec: &SynthSpec) -> Result<ActivationSet> {
    spec.validate()?;
    let mut rng = substream(spec.seed, "synth", 0);
    let (layers, hidden) = (spec.num_layers, spec.hidden_dim);
    let records = (0..spec.num_examples)
        .map(|i| {
            let label = rng.random_range(0..spec.num_classes as u32);
            let span_len = rng.random_range(1..=spec.max_span_len as u32);
            let mut values: Vec<f32> = (0..span_len as usize * layers * hidden)
                .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
                .collect();
            if let Some(layer) = spec.signal_layer {
                for t in 0..span_len as usize {
                    let at = (layer * span_len as usize + t) * hidden + label as usize;
                    values[at] += spec.signal_strength as f32;
                }
            }
            ActivationRecord {
                example_id: spec.id_offset + i as u64,
                label,
                span_len,
                values,
            }
        })
        .collect();
    let header = ActivationHeader::new(
        layers as u32,
        hidden as u32,
        spec.num_classes as u32,
        spec.num_examples as u64,
    )
    .with_meta("encoder", "synthetic")
    .with_meta("seed", spec.seed.to_string())
    .with_meta(
        "signal",
        match spec.signal_layer {
            Some(l) => format!("layer {l}, strength {}", spec.signal_strength),
            None => "none".into(),
        },
    );
    ActivationSet::from_records(header, records)
}
