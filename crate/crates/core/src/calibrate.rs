//! Post-training calibration strategies: the discrete alphabet the
//! strategy search selects from.
//!
//! * `maxabs` — threshold at the largest magnitude.
//! * `kl`     — histogram the magnitudes, scan every candidate clip point
//!   and keep the one whose quantized re-binning stays closest in KL
//!   divergence. Outliers fold into the last kept bin; ties between equal
//!   divergences resolve toward the larger threshold.
//! * `eq`     — grid-search the scale around the max-abs scale, maximizing
//!   mean cosine similarity between the layer's fp32 outputs and the
//!   outputs with the target tensor fake-quantized; ties take the smaller
//!   scale.
//! * `admm`   — alternating projection / least squares on the
//!   reconstruction error: snap to the integer grid, refit the scale,
//!   repeat. The objective never increases, and the result is never worse
//!   than the max-abs start.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CalibrationError, TensorError};
use crate::graph::{Graph, LayerKind, TensorClass};
use crate::kernels::{self, ConvDims};
use crate::quantizer::{self, QuantParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CalibratorKind {
    MaxAbs,
    Kl,
    Eq,
    Admm,
}

impl CalibratorKind {
    pub const ALL: [CalibratorKind; 4] = [
        CalibratorKind::MaxAbs,
        CalibratorKind::Kl,
        CalibratorKind::Eq,
        CalibratorKind::Admm,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            CalibratorKind::MaxAbs => "maxabs",
            CalibratorKind::Kl => "kl",
            CalibratorKind::Eq => "eq",
            CalibratorKind::Admm => "admm",
        }
    }
}

impl fmt::Display for CalibratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CalibratorKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "maxabs" => Ok(CalibratorKind::MaxAbs),
            "kl" => Ok(CalibratorKind::Kl),
            "eq" => Ok(CalibratorKind::Eq),
            "admm" => Ok(CalibratorKind::Admm),
            other => Err(format!(
                "unknown strategy `{other}` (expected maxabs|kl|eq|admm)"
            )),
        }
    }
}

/// Magnitude histogram with uniform bins over [0, max|x|].
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub max_abs: f32,
    pub counts: Vec<u64>,
}

impl Histogram {
    /// Two-pass build over sample slices: find the magnitude range, then bin.
    pub fn from_samples(samples: &[&[f32]], bins: usize) -> Result<Self, CalibrationError> {
        let mut max_abs = 0.0f32;
        let mut any = false;
        for s in samples {
            for &v in *s {
                any = true;
                max_abs = max_abs.max(v.abs());
            }
        }
        if !any {
            return Err(CalibrationError::EmptyInput { context: "histogram" });
        }
        if max_abs == 0.0 {
            return Err(CalibrationError::AllZero { context: "histogram" });
        }
        let mut counts = vec![0u64; bins];
        for s in samples {
            for &v in *s {
                let frac = v.abs() / max_abs;
                let bin = ((frac * bins as f32) as usize).min(bins - 1);
                counts[bin] += 1;
            }
        }
        Ok(Histogram { max_abs, counts })
    }

    pub fn bins(&self) -> usize {
        self.counts.len()
    }

    /// Upper edge of bin `i` (edges are strictly increasing over (0, max]).
    pub fn upper_edge(&self, i: usize) -> f32 {
        self.max_abs * (i + 1) as f32 / self.bins() as f32
    }
}

/// Threshold at max|T|.
pub fn calibrate_maxabs(data: &[f32], bits: u8) -> Result<QuantParams, TensorError> {
    let max = data.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
    QuantParams::symmetric(max, bits)
}

/// KL divergence of one clip candidate: keep `kept` bins, fold the tail
/// mass into the last kept bin, re-express through `levels` quantization
/// groups (mass spread uniformly over each group's nonzero bins), compare.
pub(crate) fn kl_for_candidate(counts: &[u64], kept: usize, levels: usize) -> f64 {
    let mut p: Vec<f64> = counts[..kept].iter().map(|&c| c as f64).collect();
    let tail: f64 = counts[kept..].iter().map(|&c| c as f64).sum();
    p[kept - 1] += tail;
    let total: f64 = p.iter().sum();
    if total == 0.0 {
        return f64::INFINITY;
    }

    let mut q = vec![0.0f64; kept];
    for g in 0..levels {
        let start = g * kept / levels;
        let end = ((g + 1) * kept / levels).max(start + 1).min(kept);
        let mass: f64 = p[start..end].iter().sum();
        let nonzero = p[start..end].iter().filter(|&&v| v > 0.0).count();
        if nonzero > 0 {
            let share = mass / nonzero as f64;
            for b in start..end {
                if p[b] > 0.0 {
                    q[b] = share;
                }
            }
        }
    }

    let mut kl = 0.0f64;
    for (pb, qb) in p.iter().zip(&q) {
        if *pb > 0.0 {
            let pn = pb / total;
            let qn = (qb / total).max(1e-9);
            kl += pn * (pn / qn).ln();
        }
    }
    kl
}

/// KL-minimizing threshold from a magnitude histogram. Candidates range
/// from `levels` kept bins up to the full histogram; equal divergences
/// resolve to the larger threshold.
pub fn calibrate_kl_from_histogram(
    hist: &Histogram,
    bits: u8,
) -> Result<QuantParams, CalibrationError> {
    let levels = QuantParams::level_max(bits) as usize;
    if hist.bins() < levels {
        return Err(CalibrationError::TooFewBins {
            bins: hist.bins(),
            levels,
        });
    }
    let mut best_kept = levels;
    let mut best_kl = f64::INFINITY;
    for kept in levels..=hist.bins() {
        let kl = kl_for_candidate(&hist.counts, kept, levels);
        if kl <= best_kl {
            best_kl = kl;
            best_kept = kept;
        }
    }
    let threshold = hist.upper_edge(best_kept - 1);
    Ok(QuantParams::symmetric(threshold, bits)?)
}

pub const KL_BINS_DEFAULT: usize = 2048;

/// KL calibration over raw sample slices.
pub fn calibrate_kl(
    samples: &[&[f32]],
    bits: u8,
    bins: usize,
) -> Result<QuantParams, CalibrationError> {
    let hist = Histogram::from_samples(samples, bins)?;
    calibrate_kl_from_histogram(&hist, bits)
}

/// The layer operation EQ replays while scoring scales.
#[derive(Debug, Clone, Copy)]
pub enum LayerOp {
    Conv { stride: usize, padding: usize },
    Linear,
}

/// Layer context for the cosine-similarity grid search.
pub struct EqLayerContext<'a> {
    pub op: LayerOp,
    pub weight: &'a Tensor,
    pub bias: Option<&'a Tensor>,
    /// Batched layer inputs observed on the calibration set.
    pub inputs: &'a [Tensor],
}

#[derive(Debug, Clone, Copy)]
pub struct EqConfig {
    pub grid_points: usize,
    /// Grid spans [lo_frac, hi_frac] times the max-abs scale.
    pub lo_frac: f32,
    pub hi_frac: f32,
}

impl Default for EqConfig {
    fn default() -> Self {
        EqConfig {
            grid_points: 100,
            lo_frac: 0.5,
            hi_frac: 1.2,
        }
    }
}

fn layer_outputs(
    ctx: &EqLayerContext,
    input: &Tensor,
    quant_act: Option<&QuantParams>,
    quant_weight: Option<&QuantParams>,
) -> Result<Vec<f32>, TensorError> {
    let mut act_buf;
    let act: &[f32] = match quant_act {
        Some(p) => {
            act_buf = vec![0.0f32; input.numel()];
            quantizer::fake_quant_into(input.data(), p, &mut act_buf);
            &act_buf
        }
        None => input.data(),
    };
    let mut w_buf;
    let w: &[f32] = match quant_weight {
        Some(p) => {
            w_buf = vec![0.0f32; ctx.weight.numel()];
            quantizer::fake_quant_into(ctx.weight.data(), p, &mut w_buf);
            &w_buf
        }
        None => ctx.weight.data(),
    };
    match ctx.op {
        LayerOp::Conv { stride, padding } => {
            let dims = ConvDims::resolve(input.shape(), ctx.weight.shape(), stride, padding)?;
            Ok(kernels::conv2d(act, w, ctx.bias.map(|b| b.data()), &dims))
        }
        LayerOp::Linear => {
            let (m, k, n) = (
                input.shape()[0],
                input.shape()[1],
                ctx.weight.shape()[0],
            );
            let mut out = vec![0.0f32; m * n];
            kernels::matmul_nt(act, w, m, k, n, &mut out);
            if let Some(b) = ctx.bias {
                for i in 0..m {
                    for (j, &bv) in b.data().iter().enumerate() {
                        out[i * n + j] += bv;
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Mean cosine similarity between per-sample output rows; rows where either
/// side has zero norm are excluded. Returns None when every row is excluded.
fn mean_cosine(fp32: &[Vec<f32>], quant: &[Vec<f32>], rows_per_batch: &[usize]) -> Option<f64> {
    let mut total = 0.0f64;
    let mut used = 0usize;
    for ((a, b), &rows) in fp32.iter().zip(quant).zip(rows_per_batch) {
        let per_row = a.len() / rows;
        for r in 0..rows {
            let ra = &a[r * per_row..(r + 1) * per_row];
            let rb = &b[r * per_row..(r + 1) * per_row];
            let mut dot = 0.0f64;
            let mut na = 0.0f64;
            let mut nb = 0.0f64;
            for (&x, &y) in ra.iter().zip(rb) {
                dot += f64::from(x) * f64::from(y);
                na += f64::from(x) * f64::from(x);
                nb += f64::from(y) * f64::from(y);
            }
            if na > 0.0 && nb > 0.0 {
                total += dot / (na.sqrt() * nb.sqrt());
                used += 1;
            }
        }
    }
    (used > 0).then(|| total / used as f64)
}

/// Cosine-similarity scale search for one tensor of one layer; the other
/// tensor stays fp32.
pub fn calibrate_eq(
    ctx: &EqLayerContext,
    target: TensorClass,
    bits: u8,
    cfg: &EqConfig,
) -> Result<QuantParams, CalibrationError> {
    if ctx.inputs.is_empty() {
        return Err(CalibrationError::EmptyInput { context: "eq inputs" });
    }
    let qmax = QuantParams::level_max(bits) as f32;
    let target_max = match target {
        TensorClass::Weight => ctx.weight.max_abs(),
        TensorClass::Activation => ctx
            .inputs
            .iter()
            .fold(0.0f32, |m, t| m.max(t.max_abs())),
    };
    if target_max == 0.0 {
        // Degenerate all-zero target: quantization is exact at any scale.
        return Ok(QuantParams::symmetric(0.0, bits)?);
    }
    let s_maxabs = target_max / qmax;

    let fp32_outputs: Vec<Vec<f32>> = ctx
        .inputs
        .iter()
        .map(|inp| layer_outputs(ctx, inp, None, None))
        .collect::<Result<_, _>>()?;
    let rows_per_batch: Vec<usize> = ctx.inputs.iter().map(|t| t.shape()[0]).collect();

    let mut best: Option<(f64, QuantParams)> = None;
    for k in 0..cfg.grid_points {
        let frac = if cfg.grid_points == 1 {
            cfg.lo_frac
        } else {
            cfg.lo_frac + (cfg.hi_frac - cfg.lo_frac) * k as f32 / (cfg.grid_points - 1) as f32
        };
        let scale = frac * s_maxabs;
        let params = QuantParams::symmetric(scale * qmax, bits)?;
        let quant_outputs: Vec<Vec<f32>> = ctx
            .inputs
            .iter()
            .map(|inp| match target {
                TensorClass::Activation => layer_outputs(ctx, inp, Some(&params), None),
                TensorClass::Weight => layer_outputs(ctx, inp, None, Some(&params)),
            })
            .collect::<Result<_, _>>()?;
        if let Some(cos) = mean_cosine(&fp32_outputs, &quant_outputs, &rows_per_batch) {
            // Strict improvement only: equal scores keep the smaller scale.
            if best.as_ref().is_none_or(|(b, _)| cos > *b) {
                best = Some((cos, params));
            }
        }
    }
    best.map(|(_, p)| p).ok_or(CalibrationError::DegenerateCosine)
}

/// Objective trace of one alternating-minimization run.
#[derive(Debug, Clone)]
pub struct AdmmRun {
    pub params: QuantParams,
    /// Reconstruction error per iteration, non-increasing.
    pub objectives: Vec<f64>,
    pub iterations: usize,
}

pub const ADMM_ITERS_DEFAULT: usize = 50;
pub const ADMM_TOL_DEFAULT: f32 = 1e-6;

fn reconstruction_error_f32(data: &[f32], p: &QuantParams) -> f64 {
    data.iter()
        .map(|&w| {
            let d = f64::from(w) - f64::from(quantizer::fake_quant_one(w, p));
            d * d
        })
        .sum()
}

/// Alternating projection / least squares for the scale, starting from the
/// max-abs scale, with the objective evaluated in f64.
pub fn calibrate_admm_trace(
    data: &[f32],
    bits: u8,
    iters: usize,
    tol: f32,
) -> Result<AdmmRun, CalibrationError> {
    if data.is_empty() {
        return Err(CalibrationError::EmptyInput { context: "admm" });
    }
    let max = data.iter().fold(0.0f32, |m, &v| m.max(v.abs()));
    if max == 0.0 {
        return Err(CalibrationError::AllZero { context: "admm" });
    }
    let qmax = f64::from(QuantParams::level_max(bits));
    let init = QuantParams::symmetric(max, bits)?;
    let mut s = f64::from(max) / qmax;

    let w64: Vec<f64> = data.iter().map(|&v| f64::from(v)).collect();
    let mut objectives = Vec::new();
    let mut codes = vec![0.0f64; w64.len()];
    let mut iterations = 0usize;
    for _ in 0..iters {
        iterations += 1;
        // Projection: snap to the integer grid at the current scale.
        for (q, &w) in codes.iter_mut().zip(&w64) {
            *q = (w / s).round_ties_even().clamp(-qmax, qmax);
        }
        let obj: f64 = w64
            .iter()
            .zip(&codes)
            .map(|(&w, &q)| (w - s * q) * (w - s * q))
            .sum();
        objectives.push(obj);

        // Least squares: refit the scale to the frozen codes.
        let qq: f64 = codes.iter().map(|&q| q * q).sum();
        if qq == 0.0 {
            break;
        }
        let wq: f64 = w64.iter().zip(&codes).map(|(&w, &q)| w * q).sum();
        let s_new = wq / qq;
        if s_new <= 0.0 {
            break;
        }
        let delta = ((s_new - s) / s).abs();
        s = s_new;
        if delta < f64::from(tol) {
            break;
        }
    }

    let refined = QuantParams::symmetric((s * qmax) as f32, bits)?;
    // The refined scale cannot be allowed to score worse than the start
    // under f32 evaluation, whatever rounding did.
    let params = if reconstruction_error_f32(data, &refined)
        <= reconstruction_error_f32(data, &init)
    {
        refined
    } else {
        init
    };
    Ok(AdmmRun {
        params,
        objectives,
        iterations,
    })
}

pub fn calibrate_admm(
    data: &[f32],
    bits: u8,
    iters: usize,
    tol: f32,
) -> Result<QuantParams, CalibrationError> {
    Ok(calibrate_admm_trace(data, bits, iters, tol)?.params)
}

/// Per-layer, per-strategy parameter table for both tensor classes.
#[derive(Debug, Clone, PartialEq)]
pub struct QParamsTable {
    pub bits: u8,
    pub pool: Vec<CalibratorKind>,
    pub layers: Vec<LayerQParams>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerQParams {
    pub layer: String,
    pub act: Vec<(CalibratorKind, QuantParams)>,
    pub weight: Vec<(CalibratorKind, QuantParams)>,
}

impl QParamsTable {
    pub fn get(
        &self,
        layer: &str,
        class: TensorClass,
        kind: CalibratorKind,
    ) -> Option<&QuantParams> {
        let l = self.layers.iter().find(|l| l.layer == layer)?;
        let list = match class {
            TensorClass::Activation => &l.act,
            TensorClass::Weight => &l.weight,
        };
        list.iter().find(|(k, _)| *k == kind).map(|(_, p)| p)
    }
}

/// Inputs observed at one searchable layer over the calibration set.
#[derive(Debug, Clone)]
pub struct CollectedLayer {
    pub layer: String,
    pub layer_idx: usize,
    pub inputs: Vec<Tensor>,
}

/// Run the fp32 model over the calibration set and keep every searchable
/// layer's input batches.
pub fn collect_layer_inputs(
    graph: &Graph,
    items: &[(Tensor, usize)],
    batch_size: usize,
) -> Result<Vec<CollectedLayer>, TensorError> {
    let mut collected: Vec<CollectedLayer> = graph
        .searchable()
        .into_iter()
        .map(|(idx, name)| CollectedLayer {
            layer: name.to_string(),
            layer_idx: idx,
            inputs: Vec::new(),
        })
        .collect();
    let idxs: Vec<usize> = (0..items.len()).collect();
    for chunk in idxs.chunks(batch_size.max(1)) {
        let refs: Vec<&Tensor> = chunk.iter().map(|&i| &items[i].0).collect();
        let batch = Tensor::stack(&refs)?;
        let mut grabbed: Vec<(usize, Tensor)> = Vec::new();
        graph.forward_hooked(&batch, &mut |idx, class, shape, data| {
            if class == TensorClass::Activation {
                if let Ok(t) = Tensor::new(shape.to_vec(), data.to_vec()) {
                    grabbed.push((idx, t));
                }
            }
            None
        })?;
        for (idx, t) in grabbed {
            if let Some(slot) = collected.iter_mut().find(|c| c.layer_idx == idx) {
                slot.inputs.push(t);
            }
        }
    }
    Ok(collected)
}

/// Knobs for the calibration pipeline.
#[derive(Debug, Clone)]
pub struct CalibrationConfig {
    pub bits: u8,
    pub kl_bins: usize,
    pub eq: EqConfig,
    pub admm_iters: usize,
    pub admm_tol: f32,
    /// EQ replays the layer op per grid point; cap the batches it sees.
    pub eq_batch_cap: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            bits: 8,
            kl_bins: KL_BINS_DEFAULT,
            eq: EqConfig::default(),
            admm_iters: ADMM_ITERS_DEFAULT,
            admm_tol: ADMM_TOL_DEFAULT,
            eq_batch_cap: 4,
        }
    }
}

fn calibrate_tensor_class(
    kind: CalibratorKind,
    class: TensorClass,
    weight: &Tensor,
    collected: &CollectedLayer,
    ctx: &EqLayerContext,
    cfg: &CalibrationConfig,
) -> Result<QuantParams, CalibrationError> {
    match (kind, class) {
        (CalibratorKind::MaxAbs, TensorClass::Weight) => {
            Ok(calibrate_maxabs(weight.data(), cfg.bits)?)
        }
        (CalibratorKind::MaxAbs, TensorClass::Activation) => {
            let max = collected
                .inputs
                .iter()
                .fold(0.0f32, |m, t| m.max(t.max_abs()));
            Ok(QuantParams::symmetric(max, cfg.bits)?)
        }
        (CalibratorKind::Kl, TensorClass::Weight) => {
            calibrate_kl(&[weight.data()], cfg.bits, cfg.kl_bins)
        }
        (CalibratorKind::Kl, TensorClass::Activation) => {
            let slices: Vec<&[f32]> = collected.inputs.iter().map(|t| t.data()).collect();
            calibrate_kl(&slices, cfg.bits, cfg.kl_bins)
        }
        (CalibratorKind::Eq, _) => calibrate_eq(ctx, class, cfg.bits, &cfg.eq),
        (CalibratorKind::Admm, TensorClass::Weight) => {
            calibrate_admm(weight.data(), cfg.bits, cfg.admm_iters, cfg.admm_tol)
        }
        (CalibratorKind::Admm, TensorClass::Activation) => {
            let mut all = Vec::new();
            for t in &collected.inputs {
                all.extend_from_slice(t.data());
            }
            calibrate_admm(&all, cfg.bits, cfg.admm_iters, cfg.admm_tol)
        }
    }
}

/// Calibrate every searchable layer for every strategy in the pool, for
/// both tensor classes. Layers run in parallel; the result order is the
/// graph order.
pub fn calibrate_table(
    graph: &Graph,
    pool: &[CalibratorKind],
    items: &[(Tensor, usize)],
    batch_size: usize,
    cfg: &CalibrationConfig,
) -> Result<QParamsTable, CalibrationError> {
    if items.is_empty() {
        return Err(CalibrationError::EmptyInput {
            context: "calibration set",
        });
    }
    let collected = collect_layer_inputs(graph, items, batch_size)?;
    let layers: Vec<Result<LayerQParams, CalibrationError>> = collected
        .par_iter()
        .map(|col| {
            let layer = &graph.layers[col.layer_idx];
            let (weight, bias, op) = match &layer.kind {
                LayerKind::Conv2d {
                    weight,
                    bias,
                    stride,
                    padding,
                } => (
                    weight,
                    bias.as_ref(),
                    LayerOp::Conv {
                        stride: *stride,
                        padding: *padding,
                    },
                ),
                LayerKind::Linear { weight, bias } => (weight, bias.as_ref(), LayerOp::Linear),
                _ => unreachable!("searchable layers are conv/linear"),
            };
            let eq_inputs = &col.inputs[..col.inputs.len().min(cfg.eq_batch_cap)];
            let ctx = EqLayerContext {
                op,
                weight,
                bias,
                inputs: eq_inputs,
            };
            let mut act = Vec::with_capacity(pool.len());
            let mut w = Vec::with_capacity(pool.len());
            for &kind in pool {
                act.push((
                    kind,
                    calibrate_tensor_class(kind, TensorClass::Activation, weight, col, &ctx, cfg)?,
                ));
                w.push((
                    kind,
                    calibrate_tensor_class(kind, TensorClass::Weight, weight, col, &ctx, cfg)?,
                ));
            }
            Ok(LayerQParams {
                layer: col.layer.clone(),
                act,
                weight: w,
            })
        })
        .collect();
    let layers = layers.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(QParamsTable {
        bits: cfg.bits,
        pool: pool.to_vec(),
        layers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn maxabs_is_definitional() {
        let p = calibrate_maxabs(&[-2.0, 1.0, 0.5], 8).unwrap();
        assert_eq!(p.threshold, 2.0);
        assert!((p.scale - 2.0 / 127.0).abs() < 1e-9);
        assert_eq!(p.zero_point, 0);

        let p = calibrate_maxabs(&[5.0], 8).unwrap();
        assert_eq!(p.threshold, 5.0);
        assert!((p.scale - 5.0 / 127.0).abs() < 1e-9);

        let p = calibrate_maxabs(&[0.0, 0.0], 8).unwrap();
        assert!(p.degenerate);
        assert_eq!(p.threshold, 1.0);
    }

    /// Independent exhaustive scan: rebuilds the clipped and re-binned
    /// distributions literally for every candidate and keeps the argmin
    /// (ties toward the larger threshold, as documented).
    fn kl_oracle_best_kept(counts: &[u64], levels: usize) -> usize {
        let bins = counts.len();
        let mut best_kept = levels;
        let mut best = f64::INFINITY;
        for kept in levels..=bins {
            // clipped distribution with folded tail
            let mut p = vec![0.0f64; kept];
            for (b, &c) in counts.iter().enumerate() {
                if b < kept {
                    p[b] += c as f64;
                } else {
                    p[kept - 1] += c as f64;
                }
            }
            // group mass spread over the nonzero members of each group
            let mut q = vec![0.0f64; kept];
            for g in 0..levels {
                let lo = g * kept / levels;
                let hi = (((g + 1) * kept / levels).max(lo + 1)).min(kept);
                let members: Vec<usize> = (lo..hi).filter(|&b| p[b] > 0.0).collect();
                if members.is_empty() {
                    continue;
                }
                let mass: f64 = (lo..hi).map(|b| p[b]).sum();
                for &b in &members {
                    q[b] = mass / members.len() as f64;
                }
            }
            let total: f64 = p.iter().sum();
            let mut kl = 0.0;
            for b in 0..kept {
                if p[b] > 0.0 {
                    let pn = p[b] / total;
                    let qn = (q[b] / total).max(1e-9);
                    kl += pn * (pn / qn).ln();
                }
            }
            if kl <= best {
                best = kl;
                best_kept = kept;
            }
        }
        best_kept
    }

    #[test]
    fn kl_matches_exhaustive_oracle_on_random_histograms() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        for trial in 0..20 {
            let bins = 256usize;
            let mut counts = vec![0u64; bins];
            // lumpy random histogram with occasional far tail
            for _ in 0..rng.gen_range(200..2000) {
                let bin = if rng.gen::<f32>() < 0.05 {
                    rng.gen_range(bins * 3 / 4..bins)
                } else {
                    rng.gen_range(0..bins / 3)
                };
                counts[bin] += rng.gen_range(1..5);
            }
            let hist = Histogram {
                max_abs: 1.0,
                counts: counts.clone(),
            };
            let got = calibrate_kl_from_histogram(&hist, 8).unwrap();
            let levels = QuantParams::level_max(8) as usize;
            let expect_kept = kl_oracle_best_kept(&counts, levels);
            let expect_threshold = hist.upper_edge(expect_kept - 1);
            assert_eq!(
                got.threshold.to_bits(),
                expect_threshold.to_bits(),
                "trial {trial}: impl {} vs oracle {}",
                got.threshold,
                expect_threshold
            );
        }
    }

    #[test]
    fn kl_single_occupied_bin_keeps_that_bin_edge() {
        // All mass in the last bin (the only way a magnitude histogram has
        // a single occupied bin); every candidate ties at zero divergence
        // and the tie rule keeps the full range.
        let mut counts = vec![0u64; 512];
        counts[511] = 1000;
        let hist = Histogram {
            max_abs: 3.0,
            counts,
        };
        let p = calibrate_kl_from_histogram(&hist, 8).unwrap();
        assert_eq!(p.threshold, 3.0);
    }

    #[test]
    fn kl_clips_far_outlier() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut samples: Vec<f32> = (0..10_000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        samples.push(100.0);
        let p = calibrate_kl(&[&samples], 8, KL_BINS_DEFAULT).unwrap();
        assert!(p.threshold < 100.0, "outlier not clipped: t={}", p.threshold);
        assert!(p.threshold >= 0.9, "threshold collapsed: t={}", p.threshold);
    }

    #[test]
    fn kl_rejects_too_few_bins() {
        let hist = Histogram {
            max_abs: 1.0,
            counts: vec![1; 64],
        };
        assert!(matches!(
            calibrate_kl_from_histogram(&hist, 8),
            Err(CalibrationError::TooFewBins { .. })
        ));
    }

    fn eq_ctx_linear<'a>(weight: &'a Tensor, inputs: &'a [Tensor]) -> EqLayerContext<'a> {
        EqLayerContext {
            op: LayerOp::Linear,
            weight,
            bias: None,
            inputs,
        }
    }

    #[test]
    fn eq_finds_lossless_grid_point() {
        // weight entries sit exactly on the grid of scale 2^-7, and the
        // grid {0.5, 1.0, 1.5} x s_maxabs contains that scale exactly.
        let s = 0.0078125f32; // 2^-7
        let weight = Tensor::new(
            vec![2, 3],
            vec![127.0 * s, -64.0 * s, 3.0 * s, -127.0 * s, 1.0 * s, 0.0],
        )
        .unwrap();
        let inputs = vec![synth::random_tensor(&[4, 3], -1.0, 1.0, 9)];
        let ctx = eq_ctx_linear(&weight, &inputs);
        let cfg = EqConfig {
            grid_points: 3,
            lo_frac: 0.5,
            hi_frac: 1.5,
        };
        let p = calibrate_eq(&ctx, TensorClass::Weight, 8, &cfg).unwrap();
        assert_eq!(p.scale.to_bits(), s.to_bits());
    }

    #[test]
    fn eq_grid_of_one_returns_that_scale() {
        let weight = synth::random_tensor(&[2, 3], -1.0, 1.0, 3);
        let inputs = vec![synth::random_tensor(&[4, 3], -1.0, 1.0, 4)];
        let ctx = eq_ctx_linear(&weight, &inputs);
        let cfg = EqConfig {
            grid_points: 1,
            lo_frac: 0.8,
            hi_frac: 1.2,
        };
        let p = calibrate_eq(&ctx, TensorClass::Weight, 8, &cfg).unwrap();
        let expected = 0.8 * weight.max_abs() / 127.0;
        assert!((p.scale - expected).abs() / expected < 1e-5);
    }

    #[test]
    fn eq_result_attains_grid_maximum_under_rescan() {
        let weight = synth::random_tensor(&[3, 5], -0.8, 0.8, 21);
        let inputs = vec![
            synth::random_tensor(&[3, 5], -1.0, 1.0, 22),
            synth::random_tensor(&[3, 5], -1.0, 1.0, 23),
        ];
        let ctx = eq_ctx_linear(&weight, &inputs);
        let cfg = EqConfig::default();
        for class in [TensorClass::Weight, TensorClass::Activation] {
            let chosen = calibrate_eq(&ctx, class, 8, &cfg).unwrap();
            // independent re-evaluation of every grid point
            let qmax = QuantParams::level_max(8) as f32;
            let target_max = match class {
                TensorClass::Weight => ctx.weight.max_abs(),
                TensorClass::Activation => {
                    ctx.inputs.iter().fold(0.0f32, |m, t| m.max(t.max_abs()))
                }
            };
            let s_maxabs = target_max / qmax;
            let fp32: Vec<Vec<f32>> = ctx
                .inputs
                .iter()
                .map(|i| layer_outputs(&ctx, i, None, None).unwrap())
                .collect();
            let rows: Vec<usize> = ctx.inputs.iter().map(|t| t.shape()[0]).collect();
            let score = |p: &QuantParams| {
                let quant: Vec<Vec<f32>> = ctx
                    .inputs
                    .iter()
                    .map(|i| match class {
                        TensorClass::Activation => layer_outputs(&ctx, i, Some(p), None).unwrap(),
                        TensorClass::Weight => layer_outputs(&ctx, i, None, Some(p)).unwrap(),
                    })
                    .collect();
                mean_cosine(&fp32, &quant, &rows).unwrap()
            };
            let chosen_score = score(&chosen);
            for k in 0..cfg.grid_points {
                let frac = cfg.lo_frac
                    + (cfg.hi_frac - cfg.lo_frac) * k as f32 / (cfg.grid_points - 1) as f32;
                let p = QuantParams::symmetric(frac * s_maxabs * qmax, 8).unwrap();
                assert!(
                    score(&p) <= chosen_score + 1e-12,
                    "grid point {k} beats the chosen scale for {class:?}"
                );
            }
        }
    }

    #[test]
    fn admm_fixed_point_on_grid() {
        let s = 0.03125f32;
        let w: Vec<f32> = vec![4.0 * s, -7.0 * s, 2.0 * s, 7.0 * s];
        let run = calibrate_admm_trace(&w, 4, 50, 1e-6).unwrap();
        assert!(
            *run.objectives.last().unwrap() < 1e-12,
            "objectives: {:?}",
            run.objectives
        );
    }

    #[test]
    fn admm_two_point_tensor_reaches_exact_grid() {
        let run = calibrate_admm_trace(&[1.0, -1.0], 8, 50, 1e-6).unwrap();
        let p = run.params;
        assert!((p.scale - 1.0 / 127.0).abs() / (1.0 / 127.0) < 1e-6);
        let err = reconstruction_error_f32(&[1.0, -1.0], &p);
        assert!(err < 1e-10, "residual error {err}");
        // dense scan over scales confirms nothing does better
        let mut best = f64::INFINITY;
        for k in 1..=2000 {
            let t = 1.5f32 * k as f32 / 2000.0;
            let cand = QuantParams::symmetric(t, 8).unwrap();
            best = best.min(reconstruction_error_f32(&[1.0, -1.0], &cand));
        }
        assert!(err <= best + 1e-12);
    }

    #[test]
    fn admm_objective_monotone_and_beats_init_on_random_tensors() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        for trial in 0..20 {
            let n = rng.gen_range(8..200);
            let w: Vec<f32> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let bits = *[4u8, 8].choose(&mut rng).unwrap();
            let run = calibrate_admm_trace(&w, bits, 50, 0.0).unwrap();
            for pair in run.objectives.windows(2) {
                assert!(
                    pair[1] <= pair[0] * (1.0 + 1e-9) + 1e-30,
                    "trial {trial}: objective increased {} -> {}",
                    pair[0],
                    pair[1]
                );
            }
            let init = QuantParams::symmetric(
                w.iter().fold(0.0f32, |m, &v| m.max(v.abs())),
                bits,
            )
            .unwrap();
            assert!(
                reconstruction_error_f32(&w, &run.params)
                    <= reconstruction_error_f32(&w, &init) + 1e-9
            );
        }
    }

    #[test]
    fn admm_rejects_all_zero() {
        assert!(matches!(
            calibrate_admm(&[0.0, 0.0], 8, 10, 1e-6),
            Err(CalibrationError::AllZero { .. })
        ));
    }

    #[test]
    fn calibrate_table_covers_pool_and_layers() {
        let g = synth::toy_cnn(1, 8, 8, 2, 3);
        let set = synth::pattern_dataset(
            &synth::PatternSpec {
                channels: 1,
                height: 8,
                width: 8,
                ..synth::PatternSpec::tiny()
            },
            16,
        );
        let cfg = CalibrationConfig {
            eq: EqConfig {
                grid_points: 10,
                ..EqConfig::default()
            },
            ..CalibrationConfig::default()
        };
        let table =
            calibrate_table(&g, &CalibratorKind::ALL, &set.items, 8, &cfg).unwrap();
        assert_eq!(table.layers.len(), 3);
        for l in &table.layers {
            assert_eq!(l.act.len(), 4);
            assert_eq!(l.weight.len(), 4);
            for (_, p) in l.act.iter().chain(&l.weight) {
                p.validate().unwrap();
                assert!(p.scale > 0.0);
            }
        }
    }
}
