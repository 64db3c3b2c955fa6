use serde::{Deserialize, Serialize};

use super::model::{forward_backward, forward_row, loss_bits, ParamGroup, ProbeParams, SpanFeatures, Workspace};
use super::ProbeConfig;
use crate::activation::RecordSet;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    /// `(group, ||analytic - numeric|| / (||analytic|| + ||numeric||))`.
    pub groups: Vec<(String, f64)>,
    pub max_rel_error: f64,
}

fn batch_features(params: &ProbeParams, batch: &RecordSet, config: &ProbeConfig) -> Result<SpanFeatures> {
    if batch.is_empty() {
        return Err(Error::invalid("gradient check needs a nonempty batch"));
    }
    params.check_shape(batch.num_layers, batch.hidden_dim)?;
    SpanFeatures::build(batch, config.layer_mode)
}

fn mean_loss(params: &ProbeParams, features: &SpanFeatures, ws: &mut Workspace) -> f64 {
    ws.refresh(params);
    let mut total = 0.0;
    for i in 0..features.len() {
        forward_row(params, features.mode, features.row(i), ws);
        total += loss_bits(&ws.probs, features.label(i));
    }
    total / features.len() as f64
}

/// Backpropagated gradient of the mean batch loss (bits).
pub fn analytic_gradient(params: &ProbeParams, batch: &RecordSet, config: &ProbeConfig) -> Result<ProbeParams> {
    let features = batch_features(params, batch, config)?;
    let mut grads = params.zeros_like();
    let mut ws = Workspace::new(params);
    let scale = 1.0 / features.len() as f64;
    for i in 0..features.len() {
        forward_backward(params, features.mode, features.row(i), features.label(i), scale, &mut ws, &mut grads);
    }
    Ok(grads)
}

/// Central finite differences of the mean batch loss, one parameter at a time.
pub fn numeric_gradient(params: &ProbeParams, batch: &RecordSet, config: &ProbeConfig, step: f64) -> Result<ProbeParams> {
    let features = batch_features(params, batch, config)?;
    let mut probe = params.clone();
    let mut grads = params.zeros_like();
    let mut ws = Workspace::new(params);
    for g in ParamGroup::ALL {
        for i in 0..params.group(g).len() {
            let original = params.group(g)[i];
            probe.group_mut(g)[i] = original + step;
            let up = mean_loss(&probe, &features, &mut ws);
            probe.group_mut(g)[i] = original - step;
            let down = mean_loss(&probe, &features, &mut ws);
            probe.group_mut(g)[i] = original;
            grads.group_mut(g)[i] = (up - down) / (2.0 * step);
        }
    }
    Ok(grads)
}

fn norm(xs: impl Iterator<Item = f64>) -> f64 {
    xs.map(|x| x * x).sum::<f64>().sqrt()
}

/// Relative error per parameter group. Groups whose gradients are both
/// below 1e-12 in norm count as exact.
pub fn compare_gradients(analytic: &ProbeParams, numeric: &ProbeParams) -> GradCheckReport {
    let groups: Vec<(String, f64)> = ParamGroup::ALL
        .iter()
        .map(|&g| {
            let (a, n) = (analytic.group(g), numeric.group(g));
            let diff = norm(a.iter().zip(n).map(|(x, y)| x - y));
            let scale = norm(a.iter().copied()) + norm(n.iter().copied());
            let rel = if scale < 1e-12 { 0.0 } else { diff / scale };
            (g.name().to_owned(), rel)
        })
        .collect();
    let max_rel_error = groups.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    GradCheckReport { groups, max_rel_error }
}

/// Compares backpropagation against central differences for every
/// parameter group.
pub fn check_gradients(params: &ProbeParams, batch: &RecordSet, config: &ProbeConfig, step: f64) -> Result<GradCheckReport> {
    let analytic = analytic_gradient(params, batch, config)?;
    let numeric = numeric_gradient(params, batch, config, step)?;
    Ok(compare_gradients(&analytic, &numeric))
}
