//! Quantization-aware training with trainable strategy mixtures.
//!
//! Three trainable quantizer families form the QAT candidate pool:
//!
//! * `dorefa` — weights pass through tanh, are normalized by the tanh max
//!   and quantized on [0,1] before remapping to [-1,1]; activations clip to
//!   [0,1]. Stateless.
//! * `pact` — learnable clip scalar; activations clip to [0, a], weights to
//!   [-a, a]. The clip scalar receives gradient from the saturated region.
//! * `lsq` — learnable step size; the step gradient follows the
//!   round-as-identity rule (q - v inside the range, the clip level
//!   outside) scaled by 1/sqrt(numel * qmax).
//!
//! All branches of a layer quantize one shared weight tensor, so every
//! branch gradient accumulates into that single tensor, and hyper-parameters
//! and weights update together in one forward-backward pass per step.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::counters;
use crate::dqss::{ThetaState, ThetaTraceRow};
use crate::error::QatError;
use crate::graph::{argmax_rows, Graph, LayerKind, TensorClass};
use crate::model_io::CalibrationSet;
use crate::quantizer::QuantParams;
use crate::tape::{NodeId, QatBranch, Tape};
use crate::tensor::Tensor;

/// Learnable scalars are projected to at least this value after every step.
pub const SCALAR_FLOOR: f32 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QatStrategy {
    DoReFa,
    Pact,
    Lsq,
}

impl QatStrategy {
    pub const ALL: [QatStrategy; 3] = [QatStrategy::DoReFa, QatStrategy::Pact, QatStrategy::Lsq];

    pub fn as_str(&self) -> &'static str {
        match self {
            QatStrategy::DoReFa => "dorefa",
            QatStrategy::Pact => "pact",
            QatStrategy::Lsq => "lsq",
        }
    }

    pub fn weight_rule(&self, bits: u8) -> QatRule {
        match self {
            QatStrategy::DoReFa => QatRule::DorefaWeight { bits },
            QatStrategy::Pact => QatRule::PactWeight { bits },
            QatStrategy::Lsq => QatRule::Lsq { bits },
        }
    }

    pub fn act_rule(&self, bits: u8) -> QatRule {
        match self {
            QatStrategy::DoReFa => QatRule::DorefaAct { bits },
            QatStrategy::Pact => QatRule::PactAct { bits },
            QatStrategy::Lsq => QatRule::Lsq { bits },
        }
    }

    /// Whether the rule for this tensor class carries a learnable scalar.
    pub fn has_scalar(&self) -> bool {
        !matches!(self, QatStrategy::DoReFa)
    }
}

impl fmt::Display for QatStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for QatStrategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "dorefa" => Ok(QatStrategy::DoReFa),
            "pact" => Ok(QatStrategy::Pact),
            "lsq" => Ok(QatStrategy::Lsq),
            other => Err(format!(
                "unknown qat strategy `{other}` (expected dorefa|pact|lsq)"
            )),
        }
    }
}

/// Elementwise quantization rule of one branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QatRule {
    DorefaWeight { bits: u8 },
    DorefaAct { bits: u8 },
    PactAct { bits: u8 },
    PactWeight { bits: u8 },
    Lsq { bits: u8 },
}

fn unsigned_levels(bits: u8) -> f32 {
    ((1u32 << bits) - 1) as f32
}

/// Apply a rule elementwise. `scalar` is the PACT clip or LSQ step; rules
/// without state ignore it.
pub fn rule_forward(rule: QatRule, x: &[f32], scalar: Option<f32>, out: &mut [f32]) {
    match rule {
        QatRule::DorefaWeight { bits } => {
            let levels = unsigned_levels(bits);
            let m = x.iter().fold(0.0f32, |m, &v| m.max(v.tanh().abs()));
            if m == 0.0 {
                out.fill(0.0);
                return;
            }
            for (o, &v) in out.iter_mut().zip(x) {
                let w01 = v.tanh() / (2.0 * m) + 0.5;
                let q = (w01 * levels).round_ties_even() / levels;
                *o = 2.0 * q - 1.0;
            }
        }
        QatRule::DorefaAct { bits } => {
            let levels = unsigned_levels(bits);
            for (o, &v) in out.iter_mut().zip(x) {
                let c = v.clamp(0.0, 1.0);
                *o = (c * levels).round_ties_even() / levels;
            }
        }
        QatRule::PactAct { bits } => {
            let levels = unsigned_levels(bits);
            let a = scalar.expect("pact requires a clip scalar").max(SCALAR_FLOOR);
            for (o, &v) in out.iter_mut().zip(x) {
                let c = v.clamp(0.0, a);
                *o = (c * levels / a).round_ties_even() * a / levels;
            }
        }
        QatRule::PactWeight { bits } => {
            let qmax = QuantParams::level_max(bits) as f32;
            let a = scalar.expect("pact requires a clip scalar").max(SCALAR_FLOOR);
            for (o, &v) in out.iter_mut().zip(x) {
                let c = v.clamp(-a, a);
                *o = (c * qmax / a).round_ties_even() * a / qmax;
            }
        }
        QatRule::Lsq { bits } => {
            let qmax = QuantParams::level_max(bits) as f32;
            let s = scalar.expect("lsq requires a step scalar").max(SCALAR_FLOOR);
            for (o, &v) in out.iter_mut().zip(x) {
                let q = (v / s).round_ties_even().clamp(-qmax, qmax);
                *o = q * s;
            }
        }
    }
}

/// Backward of one branch inside a theta-weighted mixture.
///
/// Accumulates `theta_w * (dy/dx) * g` into `dx_acc` when given, returns
/// `<g, y>` (gradient w.r.t. this branch's theta; only computed when
/// `want_dtheta`) and the theta-weighted gradient of the learnable scalar.
pub fn rule_backward(
    rule: QatRule,
    x: &[f32],
    scalar: Option<f32>,
    upstream: &[f32],
    theta_w: f32,
    mut dx_acc: Option<&mut [f32]>,
    want_dtheta: bool,
) -> (f32, f32) {
    let mut dtheta = 0.0f64;
    let mut dscalar = 0.0f64;
    match rule {
        QatRule::DorefaWeight { bits } => {
            let levels = unsigned_levels(bits);
            let m = x.iter().fold(0.0f32, |m, &v| m.max(v.tanh().abs()));
            for (j, (&v, &g)) in x.iter().zip(upstream).enumerate() {
                // tanh max treated as a constant; identity when degenerate
                let dydx = if m == 0.0 {
                    1.0
                } else {
                    let t = v.tanh();
                    (1.0 - t * t) / m
                };
                if let Some(dx) = dx_acc.as_deref_mut() {
                    dx[j] += theta_w * dydx * g;
                }
                if want_dtheta {
                    let y = if m == 0.0 {
                        0.0
                    } else {
                        let w01 = v.tanh() / (2.0 * m) + 0.5;
                        2.0 * (w01 * levels).round_ties_even() / levels - 1.0
                    };
                    dtheta += f64::from(g) * f64::from(y);
                }
            }
        }
        QatRule::DorefaAct { bits } => {
            let levels = unsigned_levels(bits);
            for (j, (&v, &g)) in x.iter().zip(upstream).enumerate() {
                let pass = (0.0..=1.0).contains(&v);
                if let Some(dx) = dx_acc.as_deref_mut() {
                    if pass {
                        dx[j] += theta_w * g;
                    }
                }
                if want_dtheta {
                    let y = (v.clamp(0.0, 1.0) * levels).round_ties_even() / levels;
                    dtheta += f64::from(g) * f64::from(y);
                }
            }
        }
        QatRule::PactAct { bits } => {
            let levels = unsigned_levels(bits);
            let a = scalar.expect("pact requires a clip scalar").max(SCALAR_FLOOR);
            for (j, (&v, &g)) in x.iter().zip(upstream).enumerate() {
                if let Some(dx) = dx_acc.as_deref_mut() {
                    if v >= 0.0 && v < a {
                        dx[j] += theta_w * g;
                    }
                }
                if v >= a {
                    dscalar += f64::from(theta_w) * f64::from(g);
                }
                if want_dtheta {
                    let y = (v.clamp(0.0, a) * levels / a).round_ties_even() * a / levels;
                    dtheta += f64::from(g) * f64::from(y);
                }
            }
        }
        QatRule::PactWeight { bits } => {
            let qmax = QuantParams::level_max(bits) as f32;
            let a = scalar.expect("pact requires a clip scalar").max(SCALAR_FLOOR);
            for (j, (&v, &g)) in x.iter().zip(upstream).enumerate() {
                if let Some(dx) = dx_acc.as_deref_mut() {
                    if v.abs() < a {
                        dx[j] += theta_w * g;
                    }
                }
                if v >= a {
                    dscalar += f64::from(theta_w) * f64::from(g);
                } else if v <= -a {
                    dscalar -= f64::from(theta_w) * f64::from(g);
                }
                if want_dtheta {
                    let y = (v.clamp(-a, a) * qmax / a).round_ties_even() * a / qmax;
                    dtheta += f64::from(g) * f64::from(y);
                }
            }
        }
        QatRule::Lsq { bits } => {
            let qmax = QuantParams::level_max(bits) as f32;
            let s = scalar.expect("lsq requires a step scalar").max(SCALAR_FLOOR);
            let gscale = 1.0 / ((x.len() as f32) * qmax).sqrt();
            for (j, (&v, &g)) in x.iter().zip(upstream).enumerate() {
                let rel = v / s;
                let ds_elem = if rel < -qmax {
                    -qmax
                } else if rel > qmax {
                    qmax
                } else {
                    if let Some(dx) = dx_acc.as_deref_mut() {
                        dx[j] += theta_w * g;
                    }
                    rel.round_ties_even() - rel
                };
                dscalar += f64::from(theta_w) * f64::from(g) * f64::from(ds_elem * gscale);
                if want_dtheta {
                    let y = rel.round_ties_even().clamp(-qmax, qmax) * s;
                    dtheta += f64::from(g) * f64::from(y);
                }
            }
        }
    }
    (dtheta as f32, dscalar as f32)
}

/// One strategy applied to a tensor outside of the training tape.
pub fn qat_quantize(
    t: &Tensor,
    strategy: QatStrategy,
    class: TensorClass,
    bits: u8,
    scalar: Option<f32>,
) -> Tensor {
    let rule = match class {
        TensorClass::Activation => strategy.act_rule(bits),
        TensorClass::Weight => strategy.weight_rule(bits),
    };
    let mut out = vec![0.0f32; t.numel()];
    rule_forward(rule, t.data(), scalar, &mut out);
    Tensor::new(t.shape().to_vec(), out).expect("shape preserved")
}

/// Learnable quantizer scalars for one searchable layer.
#[derive(Debug, Clone, PartialEq)]
pub struct QatLayerState {
    pub layer: String,
    pub pact_alpha_act: f32,
    pub pact_alpha_weight: f32,
    pub lsq_step_act: f32,
    pub lsq_step_weight: f32,
    /// Running max|activation| observed during warm-up (EMA, momentum 0.9).
    pub ema_act_max: f32,
}

/// Full trainable state of a QAT run besides the graph weights.
#[derive(Debug, Clone)]
pub struct QatState {
    pub bits: u8,
    pub pool: Vec<QatStrategy>,
    pub theta: ThetaState,
    pub layers: Vec<QatLayerState>,
    pub epochs_done: usize,
    pub warmed_up: bool,
}

impl QatState {
    pub fn init(graph: &Graph, pool: Vec<QatStrategy>, bits: u8) -> Self {
        let theta = ThetaState::init(graph, pool.len());
        let layers = graph
            .searchable()
            .into_iter()
            .map(|(_, name)| QatLayerState {
                layer: name.to_string(),
                pact_alpha_act: 1.0,
                pact_alpha_weight: 1.0,
                lsq_step_act: 1.0,
                lsq_step_weight: 1.0,
                ema_act_max: 0.0,
            })
            .collect();
        QatState {
            bits,
            pool,
            theta,
            layers,
            epochs_done: 0,
            warmed_up: false,
        }
    }
}

/// Scalar leaf ids for one layer's branches during one tape recording.
#[derive(Debug, Clone, Copy)]
pub struct LayerScalarIds {
    pub pact_act: Option<NodeId>,
    pub pact_weight: Option<NodeId>,
    pub lsq_act: Option<NodeId>,
    pub lsq_weight: Option<NodeId>,
}

pub fn branches_for(
    pool: &[QatStrategy],
    bits: u8,
    class: TensorClass,
    ids: &LayerScalarIds,
) -> Vec<QatBranch> {
    pool.iter()
        .map(|s| {
            let (rule, scalar) = match class {
                TensorClass::Activation => (
                    s.act_rule(bits),
                    match s {
                        QatStrategy::Pact => ids.pact_act,
                        QatStrategy::Lsq => ids.lsq_act,
                        QatStrategy::DoReFa => None,
                    },
                ),
                TensorClass::Weight => (
                    s.weight_rule(bits),
                    match s {
                        QatStrategy::Pact => ids.pact_weight,
                        QatStrategy::Lsq => ids.lsq_weight,
                        QatStrategy::DoReFa => None,
                    },
                ),
            };
            QatBranch { rule, scalar }
        })
        .collect()
}

/// Record the shared-weight mixture of one layer: quantize the activation
/// and the single shared weight tensor with every branch, weight by theta,
/// and hand back the reduced pair for the layer's one convolution.
#[allow(clippy::too_many_arguments)]
pub fn record_shared_mixture(
    tape: &mut Tape,
    x: NodeId,
    w: NodeId,
    theta_a: NodeId,
    theta_b: NodeId,
    pool: &[QatStrategy],
    bits: u8,
    ids: &LayerScalarIds,
) -> Result<(NodeId, NodeId), crate::error::TensorError> {
    let a_hat = tape.qat_mix(x, theta_a, branches_for(pool, bits, TensorClass::Activation, ids))?;
    let w_hat = tape.qat_mix(w, theta_b, branches_for(pool, bits, TensorClass::Weight, ids))?;
    Ok((a_hat, w_hat))
}

/// Training hyper-parameters.
#[derive(Debug, Clone)]
pub struct QatConfig {
    pub bits: u8,
    pub lr_weights: f32,
    pub lr_hyper: f32,
    pub epochs: usize,
    /// 1-based epochs at whose start both learning rates divide by 10.
    pub decay_epochs: Vec<usize>,
    pub batch_size: Option<usize>,
    pub seed: u64,
    /// Abort when loss exceeds this multiple of the initial loss.
    pub divergence_factor: f32,
}

impl Default for QatConfig {
    fn default() -> Self {
        QatConfig {
            bits: 4,
            lr_weights: 1e-3,
            lr_hyper: 1e-4,
            epochs: 2,
            decay_epochs: vec![],
            batch_size: None,
            seed: 42,
            divergence_factor: 1e3,
        }
    }
}

/// Outcome counters and traces of a QAT run.
#[derive(Debug, Clone, Default)]
pub struct QatReport {
    pub steps: u64,
    pub forwards: u64,
    pub backwards: u64,
    pub epoch_losses: Vec<f32>,
    pub trace: Vec<ThetaTraceRow>,
}

fn batch_of(items: &[(Tensor, usize)], idxs: &[usize]) -> (Tensor, Vec<usize>) {
    let refs: Vec<&Tensor> = idxs.iter().map(|&i| &items[i].0).collect();
    let labels: Vec<usize> = idxs.iter().map(|&i| items[i].1).collect();
    (Tensor::stack(&refs).expect("uniform sample shapes"), labels)
}

fn theta_dump(theta: &ThetaState) -> String {
    let mut parts = Vec::new();
    for layer in &theta.layers {
        parts.push(format!(
            "{}: act={:?} weight={:?}",
            layer.layer,
            theta.theta_for(&layer.raw_alpha),
            theta.theta_for(&layer.raw_beta)
        ));
    }
    parts.join("; ")
}

/// Warm-up: observe activation magnitudes for one epoch without touching
/// any parameter, then seed the PACT clips and LSQ steps from the running
/// statistics. Weight-side scalars come from the weight tensors directly.
pub fn warm_up(graph: &Graph, state: &mut QatState, train: &CalibrationSet, cfg: &QatConfig) {
    let searchable = graph.searchable();
    let batch_size = effective_batch(cfg, train.items.len());
    let order: Vec<usize> = (0..train.items.len()).collect();
    for chunk in order.chunks(batch_size) {
        let (batch, _) = batch_of(&train.items, chunk);
        let mut maxima = vec![0.0f32; searchable.len()];
        let _ = graph.forward_hooked(&batch, &mut |idx, class, _, data| {
            if class == TensorClass::Activation {
                if let Some(s) = searchable.iter().position(|&(i, _)| i == idx) {
                    maxima[s] = data.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
                }
            }
            None
        });
        for (s, &m) in maxima.iter().enumerate() {
            let ema = &mut state.layers[s].ema_act_max;
            *ema = if *ema == 0.0 { m } else { 0.9 * *ema + 0.1 * m };
        }
    }
    let qmax = QuantParams::level_max(state.bits) as f32;
    for (s, (idx, _)) in searchable.iter().enumerate() {
        let w_max = match &graph.layers[*idx].kind {
            LayerKind::Conv2d { weight, .. } | LayerKind::Linear { weight, .. } => {
                weight.max_abs()
            }
            _ => unreachable!("searchable layers are conv/linear"),
        };
        let st = &mut state.layers[s];
        let act = st.ema_act_max.max(SCALAR_FLOOR);
        let wm = w_max.max(SCALAR_FLOOR);
        st.pact_alpha_act = act;
        st.lsq_step_act = act / qmax;
        st.pact_alpha_weight = wm;
        st.lsq_step_weight = wm / qmax;
    }
    state.warmed_up = true;
}

fn effective_batch(cfg: &QatConfig, n: usize) -> usize {
    cfg.batch_size.unwrap_or_else(|| (n / 8).max(1)).min(n).max(1)
}

/// Joint fine-tuning: weights, importance parameters and quantizer scalars
/// all update from the same forward-backward pass, one pass per step.
pub fn qat_train(
    graph: &mut Graph,
    state: &mut QatState,
    train: &CalibrationSet,
    cfg: &QatConfig,
) -> Result<QatReport, QatError> {
    if train.items.is_empty() {
        return Err(QatError::EmptyTrainSet);
    }
    if !state.warmed_up {
        warm_up(graph, state, train, cfg);
    }
    let mut report = QatReport::default();
    push_theta_trace(&mut report.trace, state, state.epochs_done);

    let ops_before = counters::ops();
    let batch_size = effective_batch(cfg, train.items.len());
    let searchable = graph.searchable();
    let names: Vec<String> = searchable.iter().map(|&(_, n)| n.to_string()).collect();
    let idx_to_slot: std::collections::HashMap<usize, usize> = searchable
        .iter()
        .enumerate()
        .map(|(s, &(i, _))| (i, s))
        .collect();

    let mut lr_w = cfg.lr_weights;
    let mut lr_h = cfg.lr_hyper;
    // Replay decays for completed epochs when resuming.
    for e in 1..=state.epochs_done {
        if cfg.decay_epochs.contains(&e) {
            lr_w /= 10.0;
            lr_h /= 10.0;
        }
    }
    let mut initial_loss: Option<f32> = None;

    let first_epoch = state.epochs_done + 1;
    let last_epoch = state.epochs_done + cfg.epochs;
    for epoch in first_epoch..=last_epoch {
        if cfg.decay_epochs.contains(&epoch) {
            lr_w /= 10.0;
            lr_h /= 10.0;
        }
        let mut order: Vec<usize> = (0..train.items.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for (step_in_epoch, chunk) in order.chunks(batch_size).enumerate() {
            let (batch, labels) = batch_of(&train.items, chunk);

            let mut tape = Tape::new();
            let input = tape.leaf_tensor(&batch);
            let mut raw_ids = Vec::with_capacity(names.len());
            let mut scalar_ids = Vec::with_capacity(names.len());
            for (s, lt) in state.theta.layers.iter().enumerate() {
                let ra = tape.leaf(&[state.pool.len()], &lt.raw_alpha, true);
                let rb = tape.leaf(&[state.pool.len()], &lt.raw_beta, true);
                raw_ids.push((ra, rb));
                let ls = &state.layers[s];
                let has_pact = state.pool.contains(&QatStrategy::Pact);
                let has_lsq = state.pool.contains(&QatStrategy::Lsq);
                scalar_ids.push(LayerScalarIds {
                    pact_act: has_pact.then(|| tape.leaf(&[1], &[ls.pact_alpha_act], true)),
                    pact_weight: has_pact.then(|| tape.leaf(&[1], &[ls.pact_alpha_weight], true)),
                    lsq_act: has_lsq.then(|| tape.leaf(&[1], &[ls.lsq_step_act], true)),
                    lsq_weight: has_lsq.then(|| tape.leaf(&[1], &[ls.lsq_step_weight], true)),
                });
            }

            let pool = state.pool.clone();
            let bits = state.bits;
            let (logits, param_ids) =
                graph.record_forward(&mut tape, input, true, &mut |tape, idx, x, w| {
                    let slot = idx_to_slot[&idx];
                    let (ra, rb) = raw_ids[slot];
                    let ta = tape.softmax_vec(ra);
                    let tb = tape.softmax_vec(rb);
                    record_shared_mixture(tape, x, w, ta, tb, &pool, bits, &scalar_ids[slot])
                })?;
            let loss_id = tape.cross_entropy(logits, &labels)?;
            let loss = tape.data(loss_id)[0];

            if !loss.is_finite() {
                return Err(QatError::Diverged {
                    epoch,
                    step: step_in_epoch,
                    loss,
                    initial: initial_loss.unwrap_or(f32::NAN),
                    limit: f32::INFINITY,
                    dump: theta_dump(&state.theta),
                });
            }
            let init = *initial_loss.get_or_insert(loss);
            if loss > cfg.divergence_factor * init.max(1e-6) {
                return Err(QatError::Diverged {
                    epoch,
                    step: step_in_epoch,
                    loss,
                    initial: init,
                    limit: cfg.divergence_factor * init.max(1e-6),
                    dump: theta_dump(&state.theta),
                });
            }
            epoch_loss += f64::from(loss);
            batches += 1;

            let grads = tape.backward(loss_id)?;

            // Weight and bias updates.
            for ids in &param_ids {
                let layer = &mut graph.layers[ids.layer_idx];
                let (weight, bias) = match &mut layer.kind {
                    LayerKind::Conv2d { weight, bias, .. } => (weight, bias.as_mut()),
                    LayerKind::Linear { weight, bias } => (weight, bias.as_mut()),
                    _ => unreachable!("searchable layers are conv/linear"),
                };
                if let Some(g) = grads.get(ids.weight) {
                    sgd_tensor(weight, g, lr_w);
                }
                if let (Some(b), Some(bid)) = (bias, ids.bias) {
                    if let Some(g) = grads.get(bid) {
                        sgd_tensor(b, g, lr_w);
                    }
                }
            }
            // Importance-parameter and quantizer-scalar updates.
            for (s, lt) in state.theta.layers.iter_mut().enumerate() {
                let (ra, rb) = raw_ids[s];
                if let Some(g) = grads.get(ra) {
                    sgd_slice(&mut lt.raw_alpha, g, lr_h);
                }
                if let Some(g) = grads.get(rb) {
                    sgd_slice(&mut lt.raw_beta, g, lr_h);
                }
                let ids = scalar_ids[s];
                let ls = &mut state.layers[s];
                update_scalar(&mut ls.pact_alpha_act, ids.pact_act, &grads, lr_h, "pact act clip");
                update_scalar(
                    &mut ls.pact_alpha_weight,
                    ids.pact_weight,
                    &grads,
                    lr_h,
                    "pact weight clip",
                );
                update_scalar(&mut ls.lsq_step_act, ids.lsq_act, &grads, lr_h, "lsq act step");
                update_scalar(
                    &mut ls.lsq_step_weight,
                    ids.lsq_weight,
                    &grads,
                    lr_h,
                    "lsq weight step",
                );
            }
            report.steps += 1;
        }
        report
            .epoch_losses
            .push((epoch_loss / batches.max(1) as f64) as f32);
        state.epochs_done = epoch;
        push_theta_trace(&mut report.trace, state, epoch);
    }

    let ops_after = counters::ops();
    report.forwards = ops_after.forward_passes - ops_before.forward_passes;
    report.backwards = ops_after.backward_passes - ops_before.backward_passes;
    Ok(report)
}

fn push_theta_trace(trace: &mut Vec<ThetaTraceRow>, state: &QatState, epoch: usize) {
    for lt in &state.theta.layers {
        for (class, raw) in [
            (TensorClass::Activation, &lt.raw_alpha),
            (TensorClass::Weight, &lt.raw_beta),
        ] {
            let theta = state.theta.theta_for(raw);
            for (k, s) in state.pool.iter().enumerate() {
                trace.push(ThetaTraceRow {
                    epoch,
                    layer: lt.layer.clone(),
                    class,
                    strategy: s.as_str().to_string(),
                    theta: theta[k],
                });
            }
        }
    }
}

fn sgd_tensor(t: &mut Tensor, grad: &[f32], lr: f32) {
    for (p, g) in t.data_mut().iter_mut().zip(grad) {
        *p -= lr * g;
    }
    let _ = t.set_grad(grad.to_vec());
}

fn sgd_slice(params: &mut [f32], grad: &[f32], lr: f32) {
    for (p, g) in params.iter_mut().zip(grad) {
        *p -= lr * g;
    }
}

fn update_scalar(
    value: &mut f32,
    id: Option<NodeId>,
    grads: &crate::tape::Gradients,
    lr: f32,
    what: &str,
) {
    if let Some(id) = id {
        if let Some(g) = grads.get(id) {
            *value -= lr * g[0];
            if *value < SCALAR_FLOOR {
                log::warn!("{what} fell to {value}; projecting to {SCALAR_FLOOR}");
                *value = SCALAR_FLOOR;
            }
        }
    }
}

/// Plain fp32 SGD training with the same loop shape as `qat_train`;
/// the reference twin for QAT accuracy checks.
pub fn train_fp32(
    graph: &mut Graph,
    train: &CalibrationSet,
    cfg: &QatConfig,
) -> Result<Vec<f32>, QatError> {
    if train.items.is_empty() {
        return Err(QatError::EmptyTrainSet);
    }
    let batch_size = effective_batch(cfg, train.items.len());
    let mut lr = cfg.lr_weights;
    let mut epoch_losses = Vec::new();
    for epoch in 1..=cfg.epochs {
        if cfg.decay_epochs.contains(&epoch) {
            lr /= 10.0;
        }
        let mut order: Vec<usize> = (0..train.items.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(batch_size) {
            let (batch, labels) = batch_of(&train.items, chunk);
            let mut tape = Tape::new();
            let input = tape.leaf_tensor(&batch);
            let (logits, param_ids) =
                graph.record_forward(&mut tape, input, true, &mut |_, _, x, w| Ok((x, w)))?;
            let loss_id = tape.cross_entropy(logits, &labels)?;
            epoch_loss += f64::from(tape.data(loss_id)[0]);
            batches += 1;
            let grads = tape.backward(loss_id)?;
            for ids in &param_ids {
                let layer = &mut graph.layers[ids.layer_idx];
                let (weight, bias) = match &mut layer.kind {
                    LayerKind::Conv2d { weight, bias, .. } => (weight, bias.as_mut()),
                    LayerKind::Linear { weight, bias } => (weight, bias.as_mut()),
                    _ => unreachable!(),
                };
                if let Some(g) = grads.get(ids.weight) {
                    sgd_tensor(weight, g, lr);
                }
                if let (Some(b), Some(bid)) = (bias, ids.bias) {
                    if let Some(g) = grads.get(bid) {
                        sgd_tensor(b, g, lr);
                    }
                }
            }
        }
        epoch_losses.push((epoch_loss / batches.max(1) as f64) as f32);
    }
    Ok(epoch_losses)
}

/// Accuracy of a QAT-mixture model on a labeled set, evaluated with the
/// current theta and quantizer scalars (no parameter updates).
pub fn qat_eval(
    graph: &Graph,
    state: &QatState,
    items: &[(Tensor, usize)],
    batch_size: usize,
) -> Result<f64, QatError> {
    let searchable = graph.searchable();
    let idx_to_slot: std::collections::HashMap<usize, usize> = searchable
        .iter()
        .enumerate()
        .map(|(s, &(i, _))| (i, s))
        .collect();
    let mut correct = 0usize;
    for chunk in (0..items.len()).collect::<Vec<_>>().chunks(batch_size.max(1)) {
        let (batch, labels) = batch_of(items, chunk);
        let mut tape = Tape::new();
        let input = tape.leaf_tensor(&batch);
        let mut raws = Vec::new();
        let mut scalars = Vec::new();
        for (s, lt) in state.theta.layers.iter().enumerate() {
            let ra = tape.leaf(&[state.pool.len()], &lt.raw_alpha, false);
            let rb = tape.leaf(&[state.pool.len()], &lt.raw_beta, false);
            raws.push((ra, rb));
            let ls = &state.layers[s];
            let has_pact = state.pool.contains(&QatStrategy::Pact);
            let has_lsq = state.pool.contains(&QatStrategy::Lsq);
            scalars.push(LayerScalarIds {
                pact_act: has_pact.then(|| tape.leaf(&[1], &[ls.pact_alpha_act], false)),
                pact_weight: has_pact.then(|| tape.leaf(&[1], &[ls.pact_alpha_weight], false)),
                lsq_act: has_lsq.then(|| tape.leaf(&[1], &[ls.lsq_step_act], false)),
                lsq_weight: has_lsq.then(|| tape.leaf(&[1], &[ls.lsq_step_weight], false)),
            });
        }
        let pool = state.pool.clone();
        let bits = state.bits;
        let (logits, _) = graph.record_forward(&mut tape, input, false, &mut |tape, idx, x, w| {
            let slot = idx_to_slot[&idx];
            let (ra, rb) = raws[slot];
            let ta = tape.softmax_vec(ra);
            let tb = tape.softmax_vec(rb);
            record_shared_mixture(tape, x, w, ta, tb, &pool, bits, &scalars[slot])
        })?;
        let out = Tensor::new(tape.shape(logits).to_vec(), tape.data(logits).to_vec())?;
        for (pred, &label) in argmax_rows(&out).iter().zip(&labels) {
            if *pred == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / items.len() as f64)
}
