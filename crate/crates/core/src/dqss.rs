//! Differentiable per-layer quantization strategy search.
//!
//! Every conv/linear layer gets N quantized activation branches and N
//! quantized weight branches, one per calibration strategy in the pool.
//! Raw importance parameters soften through a softmax into branch weights;
//! because convolution is bilinear, the full N x N branch combination
//! collapses into a single convolution of the theta-reduced activation and
//! weight tensors. Gradient descent moves the importance parameters on a
//! calibration set, and a winner-take-all argmax finalizes one strategy per
//! tensor per layer.
//!
//! The quadratic-cost branch-by-branch evaluation is retained as
//! `mixture_forward_naive`, the reference the efficient path is tested
//! against.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::calibrate::{CalibratorKind, QParamsTable};
use crate::counters::TrackedVec;
use crate::error::{SearchError, TensorError};
use crate::graph::{argmax_rows, Graph, LayerKind, TensorClass};
use crate::kernels::{self, ConvDims};
use crate::model_io::CalibrationSet;
use crate::quantizer::{self, QuantParams};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Raw importance parameters of one searchable layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTheta {
    pub layer: String,
    pub layer_idx: usize,
    pub raw_alpha: Vec<f32>,
    pub raw_beta: Vec<f32>,
}

/// All importance parameters of a search, in searchable-layer order.
/// The softened weights are always recomputed from the raw values; nothing
/// normalized is ever stored or incrementally updated.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaState {
    pub layers: Vec<LayerTheta>,
}

/// Initial raw importance value; softmax of a constant vector is uniform.
pub const RAW_INIT: f32 = 0.1;

impl ThetaState {
    pub fn init(graph: &Graph, pool_size: usize) -> Self {
        let layers = graph
            .searchable()
            .into_iter()
            .map(|(idx, name)| LayerTheta {
                layer: name.to_string(),
                layer_idx: idx,
                raw_alpha: vec![RAW_INIT; pool_size],
                raw_beta: vec![RAW_INIT; pool_size],
            })
            .collect();
        ThetaState { layers }
    }

    pub fn pool_size(&self) -> usize {
        self.layers.first().map_or(0, |l| l.raw_alpha.len())
    }

    /// Total raw parameter count: 2 tensors per layer, N per tensor.
    pub fn param_count(&self) -> usize {
        self.layers.len() * 2 * self.pool_size()
    }

    /// Softened weights of one raw vector.
    pub fn theta_for(&self, raw: &[f32]) -> Vec<f32> {
        softmax_theta(raw)
    }
}

/// Softmax with max-subtraction, the raw-to-softened transform.
pub fn softmax_theta(raw: &[f32]) -> Vec<f32> {
    kernels::softmax_vec(raw)
}

/// Per-branch quantization parameters of one searchable layer.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureLayer {
    pub layer: String,
    pub layer_idx: usize,
    /// Activation-branch params, pool order.
    pub act_params: Vec<QuantParams>,
    /// Weight-branch params, pool order.
    pub weight_params: Vec<QuantParams>,
}

/// A graph wrapped for strategy search: every searchable layer carries its
/// branch parameters; everything else passes through untouched.
#[derive(Debug, Clone)]
pub struct SearchModel {
    pub graph: Graph,
    pub pool: Vec<CalibratorKind>,
    pub mixtures: Vec<MixtureLayer>,
}

/// Wrap a graph for search. Fails if the table lacks any layer x strategy
/// entry for either tensor class.
pub fn build_search_model(
    graph: &Graph,
    pool: &[CalibratorKind],
    table: &QParamsTable,
) -> Result<(SearchModel, ThetaState), SearchError> {
    let mut mixtures = Vec::new();
    for (idx, name) in graph.searchable() {
        let mut act_params = Vec::with_capacity(pool.len());
        let mut weight_params = Vec::with_capacity(pool.len());
        for &kind in pool {
            let a = table.get(name, TensorClass::Activation, kind).ok_or_else(|| {
                SearchError::MissingQuantParams {
                    layer: name.to_string(),
                    strategy: kind.as_str().to_string(),
                    class: "act",
                }
            })?;
            let w = table.get(name, TensorClass::Weight, kind).ok_or_else(|| {
                SearchError::MissingQuantParams {
                    layer: name.to_string(),
                    strategy: kind.as_str().to_string(),
                    class: "weight",
                }
            })?;
            act_params.push(*a);
            weight_params.push(*w);
        }
        mixtures.push(MixtureLayer {
            layer: name.to_string(),
            layer_idx: idx,
            act_params,
            weight_params,
        });
    }
    let theta = ThetaState::init(graph, pool.len());
    Ok((
        SearchModel {
            graph: graph.clone(),
            pool: pool.to_vec(),
            mixtures,
        },
        theta,
    ))
}

/// theta-weighted sum of fake-quantized copies, reduced in place. At most
/// one branch copy is alive at a time.
pub fn fq_mix_reduce(data: &[f32], theta: &[f32], params: &[QuantParams]) -> Vec<f32> {
    let mut acc = TrackedVec::zeros(data.len());
    let mut tmp = TrackedVec::zeros(data.len());
    for (i, p) in params.iter().enumerate() {
        quantizer::fake_quant_into(data, p, &mut tmp);
        let w = theta[i];
        for (a, &t) in acc.iter_mut().zip(tmp.iter()) {
            *a += w * t;
        }
    }
    drop(tmp);
    acc.into_vec()
}

/// Mixture forward through the whole model, one convolution per layer:
/// each searchable layer computes conv(sum_j theta_b[j] W_j, sum_i theta_a[i] A_i).
pub fn mixture_forward_efficient(
    model: &SearchModel,
    theta: &ThetaState,
    batch: &Tensor,
) -> Result<Tensor, TensorError> {
    let mixtures = &model.mixtures;
    model.graph.forward_hooked(batch, &mut |idx, class, _, data| {
        let slot = mixtures.iter().position(|m| m.layer_idx == idx)?;
        let lt = &theta.layers[slot];
        let m = &mixtures[slot];
        match class {
            TensorClass::Activation => Some(fq_mix_reduce(
                data,
                &softmax_theta(&lt.raw_alpha),
                &m.act_params,
            )),
            TensorClass::Weight => Some(fq_mix_reduce(
                data,
                &softmax_theta(&lt.raw_beta),
                &m.weight_params,
            )),
        }
    })
}

/// Reference mixture forward: materializes every activation and weight
/// branch, runs all N x N convolutions per layer and sums the weighted
/// results. Quadratic in the pool size by construction; used as the oracle
/// for the efficient path.
pub fn mixture_forward_naive(
    model: &SearchModel,
    theta: &ThetaState,
    batch: &Tensor,
) -> Result<Tensor, TensorError> {
    let graph = &model.graph;
    let mut shape = batch.shape().to_vec();
    let mut data = batch.data().to_vec();
    for (idx, layer) in graph.layers.iter().enumerate() {
        if let Some(slot) = model.mixtures.iter().position(|m| m.layer_idx == idx) {
            let m = &model.mixtures[slot];
            let lt = &theta.layers[slot];
            let theta_a = softmax_theta(&lt.raw_alpha);
            let theta_b = softmax_theta(&lt.raw_beta);
            let n = m.act_params.len();

            // All branch tensors held live at once, as in the direct
            // formulation (N activation copies + N weight copies).
            let act_branches: Vec<TrackedVec> = m
                .act_params
                .iter()
                .map(|p| {
                    let mut buf = TrackedVec::zeros(data.len());
                    quantizer::fake_quant_into(&data, p, &mut buf);
                    buf
                })
                .collect();

            match &layer.kind {
                LayerKind::Conv2d {
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let weight_branches: Vec<TrackedVec> = m
                        .weight_params
                        .iter()
                        .map(|p| {
                            let mut buf = TrackedVec::zeros(weight.numel());
                            quantizer::fake_quant_into(weight.data(), p, &mut buf);
                            buf
                        })
                        .collect();
                    let dims = ConvDims::resolve(&shape, weight.shape(), *stride, *padding)?;
                    let mut out = vec![0.0f32; dims.output_len()];
                    for (i, a) in act_branches.iter().enumerate() {
                        for (j, w) in weight_branches.iter().enumerate() {
                            let y = kernels::conv2d(a, w, None, &dims);
                            let coeff = theta_a[i] * theta_b[j];
                            for (o, &v) in out.iter_mut().zip(&y) {
                                *o += coeff * v;
                            }
                        }
                    }
                    if let Some(b) = bias {
                        let q = dims.oh * dims.ow;
                        for ni in 0..dims.n {
                            for (oc, &bv) in b.data().iter().enumerate() {
                                let base = (ni * dims.o + oc) * q;
                                for v in &mut out[base..base + q] {
                                    *v += bv;
                                }
                            }
                        }
                    }
                    let _ = n;
                    data = out;
                    shape = dims.output_shape();
                }
                LayerKind::Linear { weight, bias } => {
                    let weight_branches: Vec<TrackedVec> = m
                        .weight_params
                        .iter()
                        .map(|p| {
                            let mut buf = TrackedVec::zeros(weight.numel());
                            quantizer::fake_quant_into(weight.data(), p, &mut buf);
                            buf
                        })
                        .collect();
                    let (rows, k, o) = (shape[0], shape[1], weight.shape()[0]);
                    let mut out = vec![0.0f32; rows * o];
                    let mut y = vec![0.0f32; rows * o];
                    for (i, a) in act_branches.iter().enumerate() {
                        for (j, w) in weight_branches.iter().enumerate() {
                            kernels::matmul_nt(a, w, rows, k, o, &mut y);
                            let coeff = theta_a[i] * theta_b[j];
                            for (ov, &v) in out.iter_mut().zip(&y) {
                                *ov += coeff * v;
                            }
                        }
                    }
                    if let Some(b) = bias {
                        for r in 0..rows {
                            for (c, &bv) in b.data().iter().enumerate() {
                                out[r * o + c] += bv;
                            }
                        }
                    }
                    data = out;
                    shape = vec![rows, o];
                }
                _ => unreachable!("mixture layers are conv/linear"),
            }
        } else {
            let (s, d) = passthrough(&layer.kind, shape, data)?;
            shape = s;
            data = d;
        }
    }
    Tensor::new(shape, data)
}

fn passthrough(
    kind: &LayerKind,
    shape: Vec<usize>,
    mut data: Vec<f32>,
) -> Result<(Vec<usize>, Vec<f32>), TensorError> {
    match kind {
        LayerKind::BatchNorm {
            gamma,
            beta,
            mean,
            var,
            eps,
        } => {
            let out = kernels::batchnorm(
                &data,
                &shape,
                gamma.data(),
                beta.data(),
                mean.data(),
                var.data(),
                *eps,
            );
            Ok((shape, out))
        }
        LayerKind::Relu => {
            for v in data.iter_mut() {
                *v = v.max(0.0);
            }
            Ok((shape, data))
        }
        LayerKind::MaxPool { kernel, stride } => {
            let dims = kernels::PoolDims::resolve(&shape, *kernel, *stride)?;
            let (out, _) = kernels::maxpool(&data, &dims);
            Ok((dims.output_shape(), out))
        }
        LayerKind::AvgPool { kernel, stride } => {
            let dims = kernels::PoolDims::resolve(&shape, *kernel, *stride)?;
            Ok((dims.output_shape(), kernels::avgpool(&data, &dims)))
        }
        LayerKind::Flatten => {
            let rest: usize = shape[1..].iter().product();
            Ok((vec![shape[0], rest], data))
        }
        LayerKind::Conv2d { .. } | LayerKind::Linear { .. } => {
            unreachable!("searchable layers handled by the caller")
        }
    }
}

/// Loss driving the importance-parameter updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Supervised cross-entropy on the labeled calibration set.
    CrossEntropy,
    /// Mean squared error against the fp32 model's outputs.
    OutputMse,
}

impl std::str::FromStr for LossKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ce" => Ok(LossKind::CrossEntropy),
            "mse" => Ok(LossKind::OutputMse),
            other => Err(format!("unknown loss kind `{other}` (expected ce|mse)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SearchConfig {
    pub lr: f32,
    pub epochs: usize,
    /// 1-based epochs at whose start the learning rate divides by 10.
    pub decay_epochs: Vec<usize>,
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub loss: LossKind,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            lr: 1e-4,
            epochs: 3,
            decay_epochs: vec![2, 3],
            batch_size: None,
            seed: 42,
            loss: LossKind::CrossEntropy,
        }
    }
}

/// One row of the theta trace emitted for reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaTraceRow {
    pub epoch: usize,
    pub layer: String,
    pub class: TensorClass,
    pub strategy: String,
    pub theta: f32,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub theta: ThetaState,
    pub trace: Vec<ThetaTraceRow>,
    pub epoch_losses: Vec<f32>,
}

fn snapshot_theta(
    trace: &mut Vec<ThetaTraceRow>,
    theta: &ThetaState,
    pool: &[CalibratorKind],
    epoch: usize,
) {
    for lt in &theta.layers {
        for (class, raw) in [
            (TensorClass::Activation, &lt.raw_alpha),
            (TensorClass::Weight, &lt.raw_beta),
        ] {
            let th = softmax_theta(raw);
            for (k, kind) in pool.iter().enumerate() {
                trace.push(ThetaTraceRow {
                    epoch,
                    layer: lt.layer.clone(),
                    class,
                    strategy: kind.as_str().to_string(),
                    theta: th[k],
                });
            }
        }
    }
}

fn theta_dump(theta: &ThetaState) -> String {
    theta
        .layers
        .iter()
        .map(|lt| {
            format!(
                "{}: act={:?} weight={:?}",
                lt.layer,
                softmax_theta(&lt.raw_alpha),
                softmax_theta(&lt.raw_beta)
            )
        })
        .collect::<Vec<_>>()
        .join("; ")
}

/// Gradient-descent search over the importance parameters. Weights stay
/// frozen; only the raw alpha/beta vectors move. Deterministic under a
/// fixed seed.
pub fn search(
    model: &SearchModel,
    mut theta: ThetaState,
    calib: &CalibrationSet,
    cfg: &SearchConfig,
) -> Result<SearchOutcome, SearchError> {
    if calib.items.is_empty() {
        return Err(SearchError::EmptyCalibration);
    }
    let mut trace = Vec::new();
    snapshot_theta(&mut trace, &theta, &model.pool, 0);
    let mut epoch_losses = Vec::new();

    let n = model.pool.len();
    let batch_size = cfg
        .batch_size
        .unwrap_or_else(|| (calib.items.len() / 8).max(1))
        .clamp(1, calib.items.len());
    let mut lr = cfg.lr;

    for epoch in 1..=cfg.epochs {
        if cfg.decay_epochs.contains(&epoch) {
            lr /= 10.0;
        }
        let mut order: Vec<usize> = (0..calib.items.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for (batch_idx, chunk) in order.chunks(batch_size).enumerate() {
            let refs: Vec<&Tensor> = chunk.iter().map(|&i| &calib.items[i].0).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| calib.items[i].1).collect();
            let batch = Tensor::stack(&refs)?;

            let mut tape = Tape::new();
            let input = tape.leaf_tensor(&batch);
            let raw_ids: Vec<(usize, usize)> = theta
                .layers
                .iter()
                .map(|lt| {
                    let ra = tape.leaf(&[n], &lt.raw_alpha, true);
                    let rb = tape.leaf(&[n], &lt.raw_beta, true);
                    (ra, rb)
                })
                .collect();

            let mixtures = &model.mixtures;
            let (logits, _) =
                model
                    .graph
                    .record_forward(&mut tape, input, false, &mut |tape, idx, x, w| {
                        let slot = mixtures
                            .iter()
                            .position(|m| m.layer_idx == idx)
                            .expect("every searchable layer has a mixture");
                        let (ra, rb) = raw_ids[slot];
                        let ta = tape.softmax_vec(ra);
                        let tb = tape.softmax_vec(rb);
                        let xa = tape.fq_mix(x, ta, mixtures[slot].act_params.clone())?;
                        let wa = tape.fq_mix(w, tb, mixtures[slot].weight_params.clone())?;
                        Ok((xa, wa))
                    })?;

            let loss_id = match cfg.loss {
                LossKind::CrossEntropy => tape.cross_entropy(logits, &labels)?,
                LossKind::OutputMse => {
                    let fp32 = model.graph.forward(&batch)?;
                    let target = tape.leaf_tensor(&fp32);
                    tape.mse(logits, target)?
                }
            };
            let loss = tape.data(loss_id)[0];
            if !loss.is_finite() {
                return Err(SearchError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    theta_dump: theta_dump(&theta),
                });
            }
            epoch_loss += f64::from(loss);
            batches += 1;

            let grads = tape.backward(loss_id)?;
            for (lt, &(ra, rb)) in theta.layers.iter_mut().zip(&raw_ids) {
                if let Some(g) = grads.get(ra) {
                    for (p, &gv) in lt.raw_alpha.iter_mut().zip(g) {
                        *p -= lr * gv;
                    }
                }
                if let Some(g) = grads.get(rb) {
                    for (p, &gv) in lt.raw_beta.iter_mut().zip(g) {
                        *p -= lr * gv;
                    }
                }
            }
        }
        epoch_losses.push((epoch_loss / batches.max(1) as f64) as f32);
        snapshot_theta(&mut trace, &theta, &model.pool, epoch);
    }

    Ok(SearchOutcome {
        theta,
        trace,
        epoch_losses,
    })
}

/// Finalized per-layer strategy choice.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// (layer name, activation strategy, weight strategy), searchable order.
    pub layers: Vec<(String, CalibratorKind, CalibratorKind)>,
}

impl Assignment {
    pub fn get(&self, layer: &str) -> Option<(CalibratorKind, CalibratorKind)> {
        self.layers
            .iter()
            .find(|(n, _, _)| n == layer)
            .map(|&(_, a, w)| (a, w))
    }

    /// Same strategy everywhere, for uniform-baseline evaluation.
    pub fn uniform(graph: &Graph, kind: CalibratorKind) -> Self {
        Assignment {
            layers: graph
                .searchable()
                .into_iter()
                .map(|(_, name)| (name.to_string(), kind, kind))
                .collect(),
        }
    }
}

/// Index of the maximum entry; ties resolve to the lowest index.
fn argmax(xs: &[f32]) -> usize {
    let mut best = 0usize;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Winner-take-all: per layer, pick the strategy with the largest softened
/// importance for each tensor class.
pub fn finalize(theta: &ThetaState, pool: &[CalibratorKind]) -> Assignment {
    Assignment {
        layers: theta
            .layers
            .iter()
            .map(|lt| {
                let a = pool[argmax(&softmax_theta(&lt.raw_alpha))];
                let w = pool[argmax(&softmax_theta(&lt.raw_beta))];
                (lt.layer.clone(), a, w)
            })
            .collect(),
    }
}

/// A graph with one fixed strategy per tensor per layer; no mixtures left.
#[derive(Debug, Clone)]
pub struct QuantizedModel {
    pub graph: Graph,
    /// (layer idx, act params, weight params), searchable order.
    pub static_params: Vec<(usize, QuantParams, QuantParams)>,
}

impl QuantizedModel {
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor, TensorError> {
        let params = &self.static_params;
        self.graph.forward_hooked(batch, &mut |idx, class, _, data| {
            let (_, act, weight) = params.iter().find(|&&(i, _, _)| i == idx)?;
            let p = match class {
                TensorClass::Activation => act,
                TensorClass::Weight => weight,
            };
            let mut out = vec![0.0f32; data.len()];
            quantizer::fake_quant_into(data, p, &mut out);
            Some(out)
        })
    }
}

/// Statically quantize every searchable layer per the assignment.
pub fn apply_assignment(
    graph: &Graph,
    assignment: &Assignment,
    table: &QParamsTable,
) -> Result<QuantizedModel, SearchError> {
    let mut static_params = Vec::new();
    for (idx, name) in graph.searchable() {
        let (act_kind, weight_kind) =
            assignment
                .get(name)
                .ok_or_else(|| SearchError::MissingAssignment {
                    layer: name.to_string(),
                })?;
        let act = table
            .get(name, TensorClass::Activation, act_kind)
            .ok_or_else(|| SearchError::MissingQuantParams {
                layer: name.to_string(),
                strategy: act_kind.as_str().to_string(),
                class: "act",
            })?;
        let weight = table
            .get(name, TensorClass::Weight, weight_kind)
            .ok_or_else(|| SearchError::MissingQuantParams {
                layer: name.to_string(),
                strategy: weight_kind.as_str().to_string(),
                class: "weight",
            })?;
        static_params.push((idx, *act, *weight));
    }
    Ok(QuantizedModel {
        graph: graph.clone(),
        static_params,
    })
}

/// Per-strategy selection counts for activations and weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionReport {
    pub pool: Vec<CalibratorKind>,
    pub act_counts: Vec<usize>,
    pub weight_counts: Vec<usize>,
}

impl DistributionReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tensor_class,strategy,count\n");
        for (k, kind) in self.pool.iter().enumerate() {
            out.push_str(&format!("act,{},{}\n", kind.as_str(), self.act_counts[k]));
        }
        for (k, kind) in self.pool.iter().enumerate() {
            out.push_str(&format!(
                "weight,{},{}\n",
                kind.as_str(),
                self.weight_counts[k]
            ));
        }
        out
    }
}

/// Count how often each strategy was selected (the strategy-distribution
/// report).
pub fn report_distribution(
    assignment: &Assignment,
    pool: &[CalibratorKind],
) -> DistributionReport {
    let mut act_counts = vec![0usize; pool.len()];
    let mut weight_counts = vec![0usize; pool.len()];
    for (_, a, w) in &assignment.layers {
        if let Some(i) = pool.iter().position(|k| k == a) {
            act_counts[i] += 1;
        }
        if let Some(i) = pool.iter().position(|k| k == w) {
            weight_counts[i] += 1;
        }
    }
    DistributionReport {
        pool: pool.to_vec(),
        act_counts,
        weight_counts,
    }
}

/// Top-1 accuracy and mean cross-entropy of an arbitrary forward function
/// over a labeled set, evaluated in fixed batches in index order.
pub fn eval_with<F>(
    mut forward: F,
    items: &[(Tensor, usize)],
    batch_size: usize,
) -> Result<(f64, f32), TensorError>
where
    F: FnMut(&Tensor) -> Result<Tensor, TensorError>,
{
    let mut correct = 0usize;
    let mut loss_sum = 0.0f64;
    let idxs: Vec<usize> = (0..items.len()).collect();
    for chunk in idxs.chunks(batch_size.max(1)) {
        let refs: Vec<&Tensor> = chunk.iter().map(|&i| &items[i].0).collect();
        let labels: Vec<usize> = chunk.iter().map(|&i| items[i].1).collect();
        let batch = Tensor::stack(&refs)?;
        let logits = forward(&batch)?;
        let classes = logits.shape()[1];
        loss_sum += f64::from(kernels::cross_entropy(logits.data(), classes, &labels))
            * chunk.len() as f64;
        for (pred, &label) in argmax_rows(&logits).iter().zip(&labels) {
            if *pred == label {
                correct += 1;
            }
        }
    }
    Ok((
        correct as f64 / items.len() as f64,
        (loss_sum / items.len() as f64) as f32,
    ))
}

/// Decode an assignment from a flat index in [0, pool^(2L)).
pub fn assignment_from_index(
    graph: &Graph,
    pool: &[CalibratorKind],
    mut index: usize,
) -> Assignment {
    let n = pool.len();
    let layers = graph
        .searchable()
        .into_iter()
        .map(|(_, name)| {
            let a = pool[index % n];
            index /= n;
            let w = pool[index % n];
            index /= n;
            (name.to_string(), a, w)
        })
        .collect();
    Assignment { layers }
}

/// Evaluate the loss of every possible assignment (pool^(2L) of them).
/// Returns losses in assignment-index order; parallel inside, but reduced
/// in index order so the result is deterministic.
pub fn brute_force_losses(
    graph: &Graph,
    table: &QParamsTable,
    pool: &[CalibratorKind],
    items: &[(Tensor, usize)],
    batch_size: usize,
) -> Result<Vec<f32>, SearchError> {
    let layer_count = graph.searchable().len();
    let total = pool.len().pow(2 * layer_count as u32);
    let losses: Vec<Result<f32, SearchError>> = (0..total)
        .into_par_iter()
        .map(|k| {
            let assignment = assignment_from_index(graph, pool, k);
            let model = apply_assignment(graph, &assignment, table)?;
            let (_, loss) = eval_with(|b| model.forward(b), items, batch_size)
                .map_err(SearchError::Tensor)?;
            Ok(loss)
        })
        .collect();
    losses.into_iter().collect()
}
