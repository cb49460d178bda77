//! Sequential layer graphs for toy CNN/MLP models.
//!
//! A `Graph` is an ordered pipeline of layers; each node feeds the next.
//! Batchnorm layers carry frozen statistics and are never folded into
//! neighbouring convolutions. The same layer walk backs three execution
//! styles: a pure forward (optionally transforming the tensors entering
//! conv/linear layers through a hook), a calibration pass that observes
//! those tensors, and a tape recording for gradient-based training.

use crate::counters;
use crate::error::TensorError;
use crate::kernels::{self, ConvDims, PoolDims};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv2d {
        weight: Tensor,
        bias: Option<Tensor>,
        stride: usize,
        padding: usize,
    },
    Linear {
        weight: Tensor,
        bias: Option<Tensor>,
    },
    BatchNorm {
        gamma: Tensor,
        beta: Tensor,
        mean: Tensor,
        var: Tensor,
        eps: f32,
    },
    Relu,
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    AvgPool {
        kernel: usize,
        stride: usize,
    },
    Flatten,
}

impl LayerKind {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Linear { .. } => "linear",
            LayerKind::BatchNorm { .. } => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::AvgPool { .. } => "avgpool",
            LayerKind::Flatten => "flatten",
        }
    }

    /// Conv and fully-connected layers take part in strategy search.
    pub fn is_searchable(&self) -> bool {
        matches!(self, LayerKind::Conv2d { .. } | LayerKind::Linear { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
}

/// Which tensor a hook is being offered at a searchable layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorClass {
    Activation,
    Weight,
}

impl TensorClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            TensorClass::Activation => "act",
            TensorClass::Weight => "weight",
        }
    }
}

/// Replaces (or merely observes) the tensors entering searchable layers.
/// Return `Some(buffer)` to substitute the tensor, `None` to leave it alone.
pub type LayerHook<'h> =
    dyn FnMut(usize, TensorClass, &[usize], &[f32]) -> Option<Vec<f32>> + 'h;

/// Tape node ids of one searchable layer's parameters.
#[derive(Debug, Clone, Copy)]
pub struct TapeLayerIds {
    pub layer_idx: usize,
    pub weight: NodeId,
    pub bias: Option<NodeId>,
}

/// Transforms the (activation, weight) node pair entering a searchable
/// layer during tape recording. Identity for plain training.
pub type TapeWrap<'w> = dyn FnMut(&mut Tape, usize, NodeId, NodeId) -> Result<(NodeId, NodeId), TensorError> + 'w;

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    /// Per-sample input shape, without the batch axis.
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
}

impl Graph {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Self {
        Graph {
            input_shape,
            layers,
        }
    }

    /// Indices and names of searchable (conv / fully-connected) layers.
    pub fn searchable(&self) -> Vec<(usize, &str)> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind.is_searchable())
            .map(|(i, l)| (i, l.name.as_str()))
            .collect()
    }

    pub fn layer_by_name(&self, name: &str) -> Option<(usize, &Layer)> {
        self.layers
            .iter()
            .enumerate()
            .find(|(_, l)| l.name == name)
    }

    /// Static shape check: walks a symbolic batch of 1 through every layer,
    /// verifying parameter shapes and unique names. Returns the per-layer
    /// input shapes (with the symbolic batch axis).
    pub fn validate(&self) -> Result<Vec<Vec<usize>>, TensorError> {
        let mut names = std::collections::HashSet::new();
        for l in &self.layers {
            if !names.insert(&l.name) {
                return Err(TensorError::ShapeMismatch {
                    op: "graph",
                    detail: format!("duplicate layer name `{}`", l.name),
                });
            }
        }
        let mut shape: Vec<usize> = std::iter::once(1usize)
            .chain(self.input_shape.iter().copied())
            .collect();
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            per_layer.push(shape.clone());
            shape = self.output_shape_of(l, &shape)?;
        }
        Ok(per_layer)
    }

    fn output_shape_of(&self, layer: &Layer, input: &[usize]) -> Result<Vec<usize>, TensorError> {
        match &layer.kind {
            LayerKind::Conv2d {
                weight,
                bias,
                stride,
                padding,
            } => {
                let dims = ConvDims::resolve(input, weight.shape(), *stride, *padding)?;
                if let Some(b) = bias {
                    if b.shape() != [dims.o] {
                        return Err(TensorError::ShapeMismatch {
                            op: "conv2d",
                            detail: format!(
                                "layer `{}`: bias {:?} vs output channels {}",
                                layer.name,
                                b.shape(),
                                dims.o
                            ),
                        });
                    }
                }
                Ok(dims.output_shape())
            }
            LayerKind::Linear { weight, bias } => {
                let ws = weight.shape();
                if input.len() != 2 || ws.len() != 2 || input[1] != ws[1] {
                    return Err(TensorError::ShapeMismatch {
                        op: "linear",
                        detail: format!(
                            "layer `{}`: input {:?} vs weight {:?}",
                            layer.name, input, ws
                        ),
                    });
                }
                if let Some(b) = bias {
                    if b.shape() != [ws[0]] {
                        return Err(TensorError::ShapeMismatch {
                            op: "linear",
                            detail: format!(
                                "layer `{}`: bias {:?} vs output features {}",
                                layer.name,
                                b.shape(),
                                ws[0]
                            ),
                        });
                    }
                }
                Ok(vec![input[0], ws[0]])
            }
            LayerKind::BatchNorm { gamma, .. } => {
                if input.len() < 2 || gamma.shape() != [input[1]] {
                    return Err(TensorError::ShapeMismatch {
                        op: "batchnorm",
                        detail: format!(
                            "layer `{}`: input {:?} vs gamma {:?}",
                            layer.name,
                            input,
                            gamma.shape()
                        ),
                    });
                }
                Ok(input.to_vec())
            }
            LayerKind::Relu => Ok(input.to_vec()),
            LayerKind::MaxPool { kernel, stride } | LayerKind::AvgPool { kernel, stride } => {
                let dims = PoolDims::resolve(input, *kernel, *stride)?;
                Ok(dims.output_shape())
            }
            LayerKind::Flatten => {
                let rest: usize = input[1..].iter().product();
                Ok(vec![input[0], rest])
            }
        }
    }

    /// Deterministic fp32 forward of a batched input.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor, TensorError> {
        self.forward_hooked(batch, &mut |_, _, _, _| None)
    }

    /// Forward pass with a hook over the tensors entering searchable layers.
    pub fn forward_hooked(
        &self,
        batch: &Tensor,
        hook: &mut LayerHook,
    ) -> Result<Tensor, TensorError> {
        self.check_batch(batch)?;
        counters::note_forward();
        let mut shape = batch.shape().to_vec();
        let mut data = batch.data().to_vec();
        for (idx, layer) in self.layers.iter().enumerate() {
            match &layer.kind {
                LayerKind::Conv2d {
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let act = hook(idx, TensorClass::Activation, &shape, &data)
                        .unwrap_or_else(|| std::mem::take(&mut data));
                    let w = hook(idx, TensorClass::Weight, weight.shape(), weight.data());
                    let wd = w.as_deref().unwrap_or(weight.data());
                    let dims = ConvDims::resolve(&shape, weight.shape(), *stride, *padding)?;
                    data = kernels::conv2d(&act, wd, bias.as_ref().map(|b| b.data()), &dims);
                    shape = dims.output_shape();
                }
                LayerKind::Linear { weight, bias } => {
                    if shape.len() != 2 || shape[1] != weight.shape()[1] {
                        return Err(TensorError::ShapeMismatch {
                            op: "linear",
                            detail: format!(
                                "layer `{}`: input {:?} vs weight {:?}",
                                layer.name,
                                shape,
                                weight.shape()
                            ),
                        });
                    }
                    let act = hook(idx, TensorClass::Activation, &shape, &data)
                        .unwrap_or_else(|| std::mem::take(&mut data));
                    let w = hook(idx, TensorClass::Weight, weight.shape(), weight.data());
                    let wd = w.as_deref().unwrap_or(weight.data());
                    let (m, k, n) = (shape[0], shape[1], weight.shape()[0]);
                    let mut out = vec![0.0f32; m * n];
                    kernels::matmul_nt(&act, wd, m, k, n, &mut out);
                    if let Some(b) = bias {
                        for i in 0..m {
                            for (j, &bv) in b.data().iter().enumerate() {
                                out[i * n + j] += bv;
                            }
                        }
                    }
                    data = out;
                    shape = vec![m, n];
                }
                LayerKind::BatchNorm {
                    gamma,
                    beta,
                    mean,
                    var,
                    eps,
                } => {
                    data = kernels::batchnorm(
                        &data,
                        &shape,
                        gamma.data(),
                        beta.data(),
                        mean.data(),
                        var.data(),
                        *eps,
                    );
                }
                LayerKind::Relu => {
                    for v in data.iter_mut() {
                        *v = v.max(0.0);
                    }
                }
                LayerKind::MaxPool { kernel, stride } => {
                    let dims = PoolDims::resolve(&shape, *kernel, *stride)?;
                    let (out, _) = kernels::maxpool(&data, &dims);
                    data = out;
                    shape = dims.output_shape();
                }
                LayerKind::AvgPool { kernel, stride } => {
                    let dims = PoolDims::resolve(&shape, *kernel, *stride)?;
                    data = kernels::avgpool(&data, &dims);
                    shape = dims.output_shape();
                }
                LayerKind::Flatten => {
                    let rest: usize = shape[1..].iter().product();
                    shape = vec![shape[0], rest];
                }
            }
        }
        Tensor::new(shape, data)
    }

    /// Record a forward pass on a tape. `train_params` controls whether
    /// conv/linear weights and biases become gradient leaves; `wrap`
    /// transforms the (activation, weight) nodes of searchable layers.
    pub fn record_forward(
        &self,
        tape: &mut Tape,
        input: NodeId,
        train_params: bool,
        wrap: &mut TapeWrap,
    ) -> Result<(NodeId, Vec<TapeLayerIds>), TensorError> {
        counters::note_forward();
        let mut x = input;
        let mut param_ids = Vec::new();
        for (idx, layer) in self.layers.iter().enumerate() {
            match &layer.kind {
                LayerKind::Conv2d {
                    weight,
                    bias,
                    stride,
                    padding,
                } => {
                    let w = tape.leaf(weight.shape(), weight.data(), train_params);
                    let b = bias
                        .as_ref()
                        .map(|b| tape.leaf(b.shape(), b.data(), train_params));
                    let (xa, wa) = wrap(tape, idx, x, w)?;
                    x = tape.conv2d(xa, wa, b, *stride, *padding)?;
                    param_ids.push(TapeLayerIds {
                        layer_idx: idx,
                        weight: w,
                        bias: b,
                    });
                }
                LayerKind::Linear { weight, bias } => {
                    let w = tape.leaf(weight.shape(), weight.data(), train_params);
                    let b = bias
                        .as_ref()
                        .map(|b| tape.leaf(b.shape(), b.data(), train_params));
                    let (xa, wa) = wrap(tape, idx, x, w)?;
                    x = tape.linear(xa, wa, b)?;
                    param_ids.push(TapeLayerIds {
                        layer_idx: idx,
                        weight: w,
                        bias: b,
                    });
                }
                LayerKind::BatchNorm {
                    gamma,
                    beta,
                    mean,
                    var,
                    eps,
                } => {
                    let g = tape.leaf(gamma.shape(), gamma.data(), false);
                    let bt = tape.leaf(beta.shape(), beta.data(), false);
                    let mu = tape.leaf(mean.shape(), mean.data(), false);
                    let vr = tape.leaf(var.shape(), var.data(), false);
                    x = tape.batchnorm(x, g, bt, mu, vr, *eps)?;
                }
                LayerKind::Relu => {
                    x = tape.relu(x);
                }
                LayerKind::MaxPool { kernel, stride } => {
                    x = tape.maxpool(x, *kernel, *stride)?;
                }
                LayerKind::AvgPool { kernel, stride } => {
                    x = tape.avgpool(x, *kernel, *stride)?;
                }
                LayerKind::Flatten => {
                    x = tape.flatten(x)?;
                }
            }
        }
        Ok((x, param_ids))
    }

    fn check_batch(&self, batch: &Tensor) -> Result<(), TensorError> {
        if batch.shape().len() != self.input_shape.len() + 1
            || batch.shape()[1..] != self.input_shape[..]
        {
            return Err(TensorError::ShapeMismatch {
                op: "forward",
                detail: format!(
                    "batch shape {:?} vs declared per-sample shape {:?}",
                    batch.shape(),
                    self.input_shape
                ),
            });
        }
        Ok(())
    }
}

/// Row-wise argmax; ties resolve to the lowest class index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks(classes)
        .map(|row| {
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::tensor;

    fn mlp() -> Graph {
        let w1 = tensor(&[3, 4], &[0.0; 12]);
        let b1 = tensor(&[3], &[0.5, -0.5, 1.0]);
        Graph::new(
            vec![4],
            vec![
                Layer {
                    name: "fc1".into(),
                    kind: LayerKind::Linear {
                        weight: w1,
                        bias: Some(b1),
                    },
                },
                Layer {
                    name: "relu1".into(),
                    kind: LayerKind::Relu,
                },
            ],
        )
    }

    #[test]
    fn flatten_only_graph_is_identity() {
        let g = Graph::new(
            vec![2, 2],
            vec![Layer {
                name: "flat".into(),
                kind: LayerKind::Flatten,
            }],
        );
        let input = tensor(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let out = g.forward(&input).unwrap();
        assert_eq!(out.shape(), &[1, 4]);
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn zero_weight_mlp_outputs_bias() {
        let g = mlp();
        let input = tensor(&[2, 4], &[1.0; 8]);
        let out = g.forward(&input).unwrap();
        assert_eq!(out.data(), &[0.5, 0.0, 1.0, 0.5, 0.0, 1.0]);
    }

    #[test]
    fn duplicate_layer_names_rejected() {
        let mut g = mlp();
        g.layers[1].name = "fc1".into();
        assert!(g.validate().is_err());
    }

    #[test]
    fn forward_rejects_wrong_batch_shape() {
        let g = mlp();
        let input = tensor(&[2, 3], &[0.0; 6]);
        assert!(g.forward(&input).is_err());
    }

    #[test]
    fn tape_and_pure_forward_agree_bitwise() {
        let g = crate::synth::toy_cnn(3, 8, 8, 4, 42);
        let input = crate::synth::random_tensor(&[2, 3, 8, 8], -1.0, 1.0, 7);
        let pure = g.forward(&input).unwrap();

        let mut tape = Tape::new();
        let x = tape.leaf_tensor(&input);
        let (out, _) = g
            .record_forward(&mut tape, x, false, &mut |_, _, x, w| Ok((x, w)))
            .unwrap();
        assert_eq!(tape.data(out), pure.data());
    }

    #[test]
    fn forward_is_deterministic_across_runs() {
        let g = crate::synth::toy_cnn(3, 8, 8, 4, 1);
        let input = crate::synth::random_tensor(&[4, 3, 8, 8], -1.0, 1.0, 2);
        let first = g.forward(&input).unwrap();
        for _ in 0..9 {
            let again = g.forward(&input).unwrap();
            assert_eq!(first.data(), again.data());
        }
    }
}
