//! Edge-probing classifier.
//!
//! Pipeline per example: layer pooling (softmax-weighted scalar mix scaled by
//! `gamma`, or a single fixed layer), a linear projection to
//! `projection_dim`, mean pooling over the span tokens, then an MLP with one
//! rectified hidden layer and a `K`-way softmax. Losses are cross-entropies
//! in bits.
//!
//! Projection is linear, so projecting every token and averaging equals
//! projecting the token average; [`SpanFeatures`] caches the per-layer token
//! means once per data set and the model works from those.

mod adam;
mod blob;
mod gradcheck;
mod model;
mod train;

use serde::{Deserialize, Serialize};

use crate::exec::Exec;
use crate::{Error, Result};

pub use adam::Adam;
pub use gradcheck::{analytic_gradient, check_gradients, compare_gradients, numeric_gradient, GradCheckReport};
pub use model::{forward, init_params, loss_bits, ParamGroup, ProbeParams, SpanFeatures, PROB_FLOOR_BITS};
pub(crate) use model::relu_margin;
pub(crate) use train::codelength_bits;
pub use train::{evaluate_accuracy, predict, train_probe, train_probe_on, TrainReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerMode {
    /// Learned scalar mix over all layers.
    Mix,
    /// One fixed layer.
    Single(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub projection_dim: usize,
    pub mlp_hidden_dim: usize,
    pub layer_mode: LayerMode,
    pub pooling: Pooling,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub num_classes: usize,
    /// How independent jobs (evaluation chunks, layers, seeds) are run.
    /// Results do not depend on it.
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            projection_dim: 256,
            mlp_hidden_dim: 256,
            layer_mode: LayerMode::Mix,
            pooling: Pooling::Mean,
            learning_rate: 5e-5,
            batch_size: 32,
            epochs: 5,
            seed: 0,
            num_classes: 2,
            exec: Exec::default(),
        }
    }
}

impl ProbeConfig {
    pub fn with_classes(mut self, k: usize) -> Self {
        self.num_classes = k;
        self
    }

    pub fn with_layer(mut self, mode: LayerMode) -> Self {
        self.layer_mode = mode;
        self
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if self.projection_dim < 1 || self.mlp_hidden_dim < 1 || self.batch_size < 1 {
            return Err(Error::Config("probe dimensions and batch size must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("probe needs at least 2 classes".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config("learning rate must be finite and >= 0".into()));
        }
        if let LayerMode::Single(layer) = self.layer_mode {
            if layer >= num_layers {
                return Err(Error::Config(format!(
                    "layer {layer} out of range for {num_layers} layers"
                )));
            }
        }
        Ok(())
    }
}
