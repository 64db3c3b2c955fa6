use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{LayerMode, ProbeConfig};
use crate::activation::{ActivationRecord, RecordSet};
use crate::rng::substream;
use crate::{Error, Result};

/// Codelengths are capped here, i.e. probabilities are floored at 2^-60.
pub const PROB_FLOOR_BITS: f64 = 60.0;

/// Cross-entropy of `label` under `probs`, in bits.
pub fn loss_bits(probs: &[f64], label: usize) -> f64 {
    let p = probs[label];
    if p <= 0.0 {
        return PROB_FLOOR_BITS;
    }
    (-p.log2()).clamp(0.0, PROB_FLOOR_BITS)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    MixLogits,
    Gamma,
    ProjWeight,
    ProjBias,
    HiddenWeight,
    HiddenBias,
    OutWeight,
    OutBias,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 8] = [
        ParamGroup::MixLogits,
        ParamGroup::Gamma,
        ParamGroup::ProjWeight,
        ParamGroup::ProjBias,
        ParamGroup::HiddenWeight,
        ParamGroup::HiddenBias,
        ParamGroup::OutWeight,
        ParamGroup::OutBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::MixLogits => "mix_logits",
            ParamGroup::Gamma => "gamma",
            ParamGroup::ProjWeight => "proj_weight",
            ParamGroup::ProjBias => "proj_bias",
            ParamGroup::HiddenWeight => "hidden_weight",
            ParamGroup::HiddenBias => "hidden_bias",
            ParamGroup::OutWeight => "out_weight",
            ParamGroup::OutBias => "out_bias",
        }
    }
}

/// All trainable probe weights. Matrices are row-major `[out][in]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeParams {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub projection_dim: usize,
    pub mlp_hidden_dim: usize,
    pub num_classes: usize,
    pub mix_logits: Vec<f64>,
    pub gamma: f64,
    pub proj_weight: Vec<f64>,
    pub proj_bias: Vec<f64>,
    pub hidden_weight: Vec<f64>,
    pub hidden_bias: Vec<f64>,
    pub out_weight: Vec<f64>,
    pub out_bias: Vec<f64>,
}

impl ProbeParams {
    /// All-zero parameters (including `gamma`) of the given shape; used as a
    /// gradient accumulator.
    pub fn zeros(num_layers: usize, hidden_dim: usize, projection_dim: usize, mlp_hidden_dim: usize, num_classes: usize) -> Self {
        ProbeParams {
            num_layers,
            hidden_dim,
            projection_dim,
            mlp_hidden_dim,
            num_classes,
            mix_logits: vec![0.0; num_layers],
            gamma: 0.0,
            proj_weight: vec![0.0; projection_dim * hidden_dim],
            proj_bias: vec![0.0; projection_dim],
            hidden_weight: vec![0.0; mlp_hidden_dim * projection_dim],
            hidden_bias: vec![0.0; mlp_hidden_dim],
            out_weight: vec![0.0; num_classes * mlp_hidden_dim],
            out_bias: vec![0.0; num_classes],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.num_layers, self.hidden_dim, self.projection_dim, self.mlp_hidden_dim, self.num_classes)
    }

    pub fn group(&self, g: ParamGroup) -> &[f64] {
        match g {
            ParamGroup::MixLogits => &self.mix_logits,
            ParamGroup::Gamma => std::slice::from_ref(&self.gamma),
            ParamGroup::ProjWeight => &self.proj_weight,
            ParamGroup::ProjBias => &self.proj_bias,
            ParamGroup::HiddenWeight => &self.hidden_weight,
            ParamGroup::HiddenBias => &self.hidden_bias,
            ParamGroup::OutWeight => &self.out_weight,
            ParamGroup::OutBias => &self.out_bias,
        }
    }

    pub fn group_mut(&mut self, g: ParamGroup) -> &mut [f64] {
        match g {
            ParamGroup::MixLogits => &mut self.mix_logits,
            ParamGroup::Gamma => std::slice::from_mut(&mut self.gamma),
            ParamGroup::ProjWeight => &mut self.proj_weight,
            ParamGroup::ProjBias => &mut self.proj_bias,
            ParamGroup::HiddenWeight => &mut self.hidden_weight,
            ParamGroup::HiddenBias => &mut self.hidden_bias,
            ParamGroup::OutWeight => &mut self.out_weight,
            ParamGroup::OutBias => &mut self.out_bias,
        }
    }

    pub fn num_params(&self) -> usize {
        ParamGroup::ALL.iter().map(|g| self.group(*g).len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        ParamGroup::ALL.iter().all(|g| self.group(*g).iter().all(|v| v.is_finite()))
    }

    pub(crate) fn fill_zero(&mut self) {
        for g in ParamGroup::ALL {
            self.group_mut(g).fill(0.0);
        }
    }

    /// Softmax of the mix logits.
    pub fn mix_weights(&self) -> Vec<f64> {
        softmax(&self.mix_logits)
    }

    /// Every parameter drawn uniformly from `[-scale, scale]`, `gamma` from
    /// `[0.5, 1.5]`. Test fixture for gradient checks.
    pub fn random(num_layers: usize, hidden_dim: usize, config: &ProbeConfig, seed: u64, scale: f64) -> Self {
        let mut p = Self::zeros(num_layers, hidden_dim, config.projection_dim, config.mlp_hidden_dim, config.num_classes);
        let mut rng = substream(seed, "random-params", 0);
        for g in ParamGroup::ALL {
            for v in p.group_mut(g) {
                *v = rng.random_range(-scale..=scale);
            }
        }
        p.gamma = rng.random_range(0.5..=1.5);
        p
    }

    pub(crate) fn check_shape(&self, num_layers: usize, hidden_dim: usize) -> Result<()> {
        if self.num_layers != num_layers || self.hidden_dim != hidden_dim {
            return Err(Error::invalid(format!(
                "probe expects L={} H={}, data has L={num_layers} H={hidden_dim}",
                self.num_layers, self.hidden_dim
            )));
        }
        Ok(())
    }
}

/// Mix logits 0, `gamma` 1, projection and hidden layers uniform in
/// `+-1/sqrt(fan_in)`, output layer zero. The zero output layer makes every
/// fresh probe predict exactly `1/K`.
pub fn init_params(num_layers: usize, hidden_dim: usize, config: &ProbeConfig, seed: u64) -> ProbeParams {
    let (p, m, k) = (config.projection_dim, config.mlp_hidden_dim, config.num_classes);
    let mut params = ProbeParams::zeros(num_layers, hidden_dim, p, m, k);
    params.gamma = 1.0;
    let mut rng = substream(seed, "init", 0);
    let mut fill = |xs: &mut [f64], fan_in: usize| {
        let bound = 1.0 / (fan_in as f64).sqrt();
        for x in xs {
            *x = rng.random_range(-bound..bound);
        }
    };
    fill(&mut params.proj_weight, hidden_dim);
    fill(&mut params.proj_bias, hidden_dim);
    fill(&mut params.hidden_weight, p);
    fill(&mut params.hidden_bias, p);
    params
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    out
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Per-layer span means of a record set, in 64-bit precision.
///
/// `Mix` keeps all `L` layers per example; `Single(l)` keeps only layer `l`.
#[derive(Debug, Clone)]
pub struct SpanFeatures {
    pub mode: LayerMode,
    pub num_layers: usize,
    pub hidden_dim: usize,
    rows: usize,
    values: Vec<f64>,
    labels: Vec<usize>,
}

impl SpanFeatures {
    pub fn build(data: &RecordSet, mode: LayerMode) -> Result<Self> {
        let (layers, hidden) = (data.num_layers, data.hidden_dim);
        let rows = match mode {
            LayerMode::Mix => layers,
            LayerMode::Single(l) if l < layers => 1,
            LayerMode::Single(l) => {
                return Err(Error::Config(format!("layer {l} out of range for {layers} layers")))
            }
        };
        let mut features = SpanFeatures {
            mode,
            num_layers: layers,
            hidden_dim: hidden,
            rows,
            values: Vec::with_capacity(data.len() * rows * hidden),
            labels: Vec::with_capacity(data.len()),
        };
        for (i, r) in data.records.iter().enumerate() {
            check_record(i, r, layers, hidden, data.num_classes)?;
            features.push(r);
        }
        Ok(features)
    }

    pub fn from_record(record: &ActivationRecord, num_layers: usize, hidden_dim: usize, mode: LayerMode) -> Result<Self> {
        let set = RecordSet {
            num_layers,
            hidden_dim,
            num_classes: usize::MAX,
            records: Vec::new(),
        };
        let mut features = Self::build(&set, mode)?;
        check_record(0, record, num_layers, hidden_dim, usize::MAX)?;
        features.push(record);
        Ok(features)
    }

    fn push(&mut self, record: &ActivationRecord) {
        let layers = match self.mode {
            LayerMode::Mix => 0..self.num_layers,
            LayerMode::Single(l) => l..l + 1,
        };
        for l in layers {
            push_span_mean(&mut self.values, record, l, self.hidden_dim);
        }
        self.labels.push(record.label as usize);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.rows * self.hidden_dim;
        &self.values[i * w..(i + 1) * w]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }
}

fn check_record(i: usize, r: &ActivationRecord, layers: usize, hidden: usize, classes: usize) -> Result<()> {
    let expected = r.span_len as usize * layers * hidden;
    if r.span_len == 0 || r.values.len() != expected {
        return Err(Error::Dimension {
            index: i,
            expected,
            found: r.values.len(),
        });
    }
    if r.label as usize >= classes {
        return Err(Error::invalid(format!("record {i}: label {} >= {classes}", r.label)));
    }
    Ok(())
}

fn push_span_mean(out: &mut Vec<f64>, r: &ActivationRecord, layer: usize, hidden: usize) {
    let start = out.len();
    out.resize(start + hidden, 0.0);
    let acc = &mut out[start..];
    for t in 0..r.span_len as usize {
        for (a, &v) in acc.iter_mut().zip(r.token(layer, t, hidden)) {
            *a += v as f64;
        }
    }
    let n = r.span_len as f64;
    for a in acc.iter_mut() {
        *a /= n;
    }
}

/// Scratch buffers for one forward/backward pass.
pub(crate) struct Workspace {
    mix: Vec<f64>,
    pooled: Vec<f64>,
    proj: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
    logits: Vec<f64>,
    pub(crate) probs: Vec<f64>,
    d_logits: Vec<f64>,
    d_act: Vec<f64>,
    d_proj: Vec<f64>,
    d_pooled: Vec<f64>,
}

impl Workspace {
    pub(crate) fn new(params: &ProbeParams) -> Self {
        Workspace {
            mix: params.mix_weights(),
            pooled: vec![0.0; params.hidden_dim],
            proj: vec![0.0; params.projection_dim],
            pre: vec![0.0; params.mlp_hidden_dim],
            act: vec![0.0; params.mlp_hidden_dim],
            logits: vec![0.0; params.num_classes],
            probs: vec![0.0; params.num_classes],
            d_logits: vec![0.0; params.num_classes],
            d_act: vec![0.0; params.mlp_hidden_dim],
            d_proj: vec![0.0; params.projection_dim],
            d_pooled: vec![0.0; params.hidden_dim],
        }
    }

    /// Recomputes the cached mix weights; call after the parameters change.
    pub(crate) fn refresh(&mut self, params: &ProbeParams) {
        self.mix = params.mix_weights();
    }
}

fn matvec(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (o, (row, &bias)) in out.iter_mut().zip(w.chunks_exact(n).zip(b)) {
        *o = bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Forward pass over one feature row; leaves probabilities in `ws.probs`.
pub(crate) fn forward_row(params: &ProbeParams, mode: LayerMode, row: &[f64], ws: &mut Workspace) {
    let h = params.hidden_dim;
    match mode {
        LayerMode::Single(_) => ws.pooled.copy_from_slice(row),
        LayerMode::Mix => {
            ws.pooled.fill(0.0);
            for (x, &w) in row.chunks_exact(h).zip(&ws.mix) {
                let c = params.gamma * w;
                for (p, &v) in ws.pooled.iter_mut().zip(x) {
                    *p += c * v;
                }
            }
        }
    }
    matvec(&params.proj_weight, &params.proj_bias, &ws.pooled, &mut ws.proj);
    matvec(&params.hidden_weight, &params.hidden_bias, &ws.proj, &mut ws.pre);
    for (a, &z) in ws.act.iter_mut().zip(&ws.pre) {
        *a = z.max(0.0);
    }
    matvec(&params.out_weight, &params.out_bias, &ws.act, &mut ws.logits);
    softmax_into(&ws.logits, &mut ws.probs);
}

/// Smallest `|pre-activation|` of any hidden unit over `data`: how close
/// the batch sits to a rectifier kink.
pub(crate) fn relu_margin(params: &ProbeParams, data: &RecordSet, mode: LayerMode) -> Result<f64> {
    let features = SpanFeatures::build(data, mode)?;
    let mut ws = Workspace::new(params);
    let mut margin = f64::INFINITY;
    for i in 0..features.len() {
        forward_row(params, mode, features.row(i), &mut ws);
        margin = ws.pre.iter().fold(margin, |m, z| m.min(z.abs()));
    }
    Ok(margin)
}

/// Forward plus backward for one example; adds `scale * dloss/dparams` into
/// `grads` and returns the loss in bits.
pub(crate) fn forward_backward(
    params: &ProbeParams,
    mode: LayerMode,
    row: &[f64],
    label: usize,
    scale: f64,
    ws: &mut Workspace,
    grads: &mut ProbeParams,
) -> f64 {
    forward_row(params, mode, row, ws);
    let loss = loss_bits(&ws.probs, label);
    if loss >= PROB_FLOOR_BITS {
        // Flat region of the floored loss.
        return loss;
    }
    let (p, m) = (params.projection_dim, params.mlp_hidden_dim);

    for (k, d) in ws.d_logits.iter_mut().enumerate() {
        let target = if k == label { 1.0 } else { 0.0 };
        *d = (ws.probs[k] - target) * std::f64::consts::LOG2_E * scale;
    }

    ws.d_act.fill(0.0);
    for (k, &g) in ws.d_logits.iter().enumerate() {
        grads.out_bias[k] += g;
        let w_row = &params.out_weight[k * m..(k + 1) * m];
        let g_row = &mut grads.out_weight[k * m..(k + 1) * m];
        for j in 0..m {
            g_row[j] += g * ws.act[j];
            ws.d_act[j] += w_row[j] * g;
        }
    }
    // Rectifier gate.
    for (d, &z) in ws.d_act.iter_mut().zip(&ws.pre) {
        if z <= 0.0 {
            *d = 0.0;
        }
    }

    ws.d_proj.fill(0.0);
    for (j, &g) in ws.d_act.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        grads.hidden_bias[j] += g;
        let w_row = &params.hidden_weight[j * p..(j + 1) * p];
        let g_row = &mut grads.hidden_weight[j * p..(j + 1) * p];
        for i in 0..p {
            g_row[i] += g * ws.proj[i];
            ws.d_proj[i] += w_row[i] * g;
        }
    }

    let h = params.hidden_dim;
    let need_pooled = matches!(mode, LayerMode::Mix);
    ws.d_pooled.fill(0.0);
    for (i, &g) in ws.d_proj.iter().enumerate() {
        grads.proj_bias[i] += g;
        let w_row = &params.proj_weight[i * h..(i + 1) * h];
        let g_row = &mut grads.proj_weight[i * h..(i + 1) * h];
        for (gw, &x) in g_row.iter_mut().zip(&ws.pooled) {
            *gw += g * x;
        }
        if need_pooled {
            for (dp, &w) in ws.d_pooled.iter_mut().zip(w_row) {
                *dp += w * g;
            }
        }
    }

    if need_pooled {
        // pooled = gamma * sum_l w_l x_l, w = softmax(s)
        let dots: Vec<f64> = row
            .chunks_exact(h)
            .map(|x| x.iter().zip(&ws.d_pooled).map(|(a, b)| a * b).sum())
            .collect();
        let d_gamma: f64 = dots.iter().zip(&ws.mix).map(|(u, w)| u * w).sum();
        grads.gamma += d_gamma;
        // d w_l = gamma * u_l; d s_l = w_l (d w_l - sum_k w_k d w_k) = gamma w_l (u_l - d_gamma)
        for (l, (&u, &w)) in dots.iter().zip(&ws.mix).enumerate() {
            grads.mix_logits[l] += params.gamma * w * (u - d_gamma);
        }
    }
    loss
}

/// Class probabilities for one record.
pub fn forward(params: &ProbeParams, record: &ActivationRecord, config: &ProbeConfig) -> Result<Vec<f64>> {
    let features = SpanFeatures::from_record(record, params.num_layers, params.hidden_dim, config.layer_mode)?;
    let mut ws = Workspace::new(params);
    forward_row(params, config.layer_mode, features.row(0), &mut ws);
    Ok(ws.probs)
}
