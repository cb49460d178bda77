//! Reverse-mode autodiff over a single recorded forward pass.
//!
//! The tape is an append-only list of nodes; every op references earlier
//! node ids, so the list is already topologically ordered and backward is a
//! single reverse sweep. Non-differentiable quantization ops carry
//! straight-through rules. The mixture ops (`fq_mix`, `qat_mix`) are fused:
//! their forward reduces all branches into one tensor and their backward
//! recomputes per-branch values on the fly, so the live working set never
//! scales with the number of branches.
//!
//! Higher-order gradients are out of scope; a tape records one forward pass
//! and `backward` may run once per recording.

use crate::counters::{self, TrackedVec};
use crate::error::TensorError;
use crate::kernels::{self, ConvDims, PoolDims};
use crate::qat::QatRule;
use crate::quantizer::{self, QuantParams};
use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Debug)]
struct Value {
    shape: Vec<usize>,
    data: TrackedVec,
}

impl Value {
    fn new(shape: Vec<usize>, data: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Value {
            shape,
            data: TrackedVec::from_vec(data),
        }
    }
}

/// Per-branch spec for the shared-input QAT mixture.
#[derive(Debug, Clone)]
pub struct QatBranch {
    pub rule: QatRule,
    /// Learnable scalar leaf (PACT clip / LSQ scale); `None` for stateless rules.
    pub scalar: Option<NodeId>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f32),
    Sum(NodeId),
    Relu(NodeId),
    Reshape(NodeId),
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    },
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        dims: ConvDims,
    },
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: NodeId,
        var: NodeId,
        eps: f32,
    },
    MaxPool {
        input: NodeId,
        switches: Vec<u32>,
    },
    AvgPool {
        input: NodeId,
        dims: PoolDims,
    },
    SoftmaxVec(NodeId),
    FakeQuant {
        input: NodeId,
        params: QuantParams,
    },
    FqMix {
        input: NodeId,
        theta: NodeId,
        params: Vec<QuantParams>,
    },
    QatQuant {
        input: NodeId,
        branch: QatBranch,
    },
    QatMix {
        input: NodeId,
        theta: NodeId,
        branches: Vec<QatBranch>,
    },
    CrossEntropy {
        logits: NodeId,
        classes: usize,
        labels: Vec<usize>,
    },
    Mse {
        pred: NodeId,
        target: NodeId,
    },
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// Gradient table produced by `Tape::backward`, indexed by node id.
/// Only nodes on a path from a grad-requiring leaf to the loss hold entries.
#[derive(Debug)]
pub struct Gradients {
    slots: Vec<Option<TrackedVec>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f32]> {
        self.slots.get(id).and_then(|s| s.as_deref())
    }

    /// Copy this node's gradient into the tensor's grad slot.
    pub fn write_to(&self, id: NodeId, tensor: &mut Tensor) -> Result<(), TensorError> {
        match self.get(id) {
            Some(g) => tensor.set_grad(g.to_vec()),
            None => Ok(()),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

fn debug_assert_finite(op: &str, data: &[f32]) {
    if cfg!(debug_assertions) {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            panic!("non-finite output of {op} at flat index {i}");
        }
    }
    let _ = op;
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].value.shape
    }

    pub fn data(&self, id: NodeId) -> &[f32] {
        &self.nodes[id].value.data
    }

    pub fn needs_grad(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    fn push(&mut self, value: Value, op: Op, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn parents_need_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&id| self.nodes[id].needs_grad)
    }

    pub fn leaf(&mut self, shape: &[usize], data: &[f32], requires_grad: bool) -> NodeId {
        self.push(
            Value::new(shape.to_vec(), data.to_vec()),
            Op::Leaf,
            requires_grad,
        )
    }

    pub fn leaf_tensor(&mut self, t: &Tensor) -> NodeId {
        self.leaf(t.shape(), t.data(), t.requires_grad())
    }

    fn check_same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.check_same_shape("add", a, b)?;
        let data: Vec<f32> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        debug_assert_finite("add", &data);
        let ng = self.parents_need_grad(&[a, b]);
        Ok(self.push(Value::new(self.shape(a).to_vec(), data), Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.check_same_shape("sub", a, b)?;
        let data: Vec<f32> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let ng = self.parents_need_grad(&[a, b]);
        Ok(self.push(Value::new(self.shape(a).to_vec(), data), Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.check_same_shape("mul", a, b)?;
        let data: Vec<f32> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let ng = self.parents_need_grad(&[a, b]);
        Ok(self.push(Value::new(self.shape(a).to_vec(), data), Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: NodeId, c: f32) -> NodeId {
        let data: Vec<f32> = self.data(a).iter().map(|&x| x * c).collect();
        let ng = self.nodes[a].needs_grad;
        self.push(Value::new(self.shape(a).to_vec(), data), Op::Scale(a, c), ng)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let mut acc = 0.0f64;
        for &v in self.data(a) {
            acc += f64::from(v);
        }
        let ng = self.nodes[a].needs_grad;
        self.push(Value::new(vec![1], vec![acc as f32]), Op::Sum(a), ng)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let data: Vec<f32> = self.data(a).iter().map(|&x| x.max(0.0)).collect();
        let ng = self.nodes[a].needs_grad;
        self.push(Value::new(self.shape(a).to_vec(), data), Op::Relu(a), ng)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId, TensorError> {
        if shape.iter().product::<usize>() != self.data(a).len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                detail: format!(
                    "cannot view {} elements as {:?}",
                    self.data(a).len(),
                    shape
                ),
            });
        }
        let data = self.data(a).to_vec();
        let ng = self.nodes[a].needs_grad;
        Ok(self.push(Value::new(shape, data), Op::Reshape(a), ng))
    }

    /// Flatten [N, ...] to [N, rest].
    pub fn flatten(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let shape = self.shape(a);
        if shape.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "flatten",
                detail: "input has no axes".into(),
            });
        }
        let n = shape[0];
        let rest: usize = shape[1..].iter().product();
        self.reshape(a, vec![n, rest])
    }

    /// y = x W^T + b with x: [m,k], W: [n,k], b: [n].
    pub fn linear(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    ) -> Result<NodeId, TensorError> {
        let xs = self.shape(input);
        let ws = self.shape(weight);
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                detail: format!("input {xs:?} vs weight {ws:?} (inner axes must match)"),
            });
        }
        let (m, k, n) = (xs[0], xs[1], ws[0]);
        if let Some(b) = bias {
            if self.shape(b) != [n] {
                return Err(TensorError::ShapeMismatch {
                    op: "linear",
                    detail: format!("bias {:?} vs output features {n}", self.shape(b)),
                });
            }
        }
        let mut out = vec![0.0f32; m * n];
        kernels::matmul_nt(self.data(input), self.data(weight), m, k, n, &mut out);
        if let Some(b) = bias {
            let bd = self.data(b);
            for i in 0..m {
                for j in 0..n {
                    out[i * n + j] += bd[j];
                }
            }
        }
        debug_assert_finite("linear", &out);
        let ng = self.parents_need_grad(&[input, weight])
            || bias.is_some_and(|b| self.nodes[b].needs_grad);
        Ok(self.push(
            Value::new(vec![m, n], out),
            Op::Linear {
                input,
                weight,
                bias,
            },
            ng,
        ))
    }

    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId, TensorError> {
        let dims = ConvDims::resolve(self.shape(input), self.shape(weight), stride, padding)?;
        if let Some(b) = bias {
            if self.shape(b) != [dims.o] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d",
                    detail: format!(
                        "bias {:?} vs output channel axis O={}",
                        self.shape(b),
                        dims.o
                    ),
                });
            }
        }
        let out = kernels::conv2d(
            self.data(input),
            self.data(weight),
            bias.map(|b| self.data(b)),
            &dims,
        );
        debug_assert_finite("conv2d", &out);
        let ng = self.parents_need_grad(&[input, weight])
            || bias.is_some_and(|b| self.nodes[b].needs_grad);
        Ok(self.push(
            Value::new(dims.output_shape(), out),
            Op::Conv2d {
                input,
                weight,
                bias,
                dims,
            },
            ng,
        ))
    }

    pub fn batchnorm(
        &mut self,
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: NodeId,
        var: NodeId,
        eps: f32,
    ) -> Result<NodeId, TensorError> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::ShapeMismatch {
                op: "batchnorm",
                detail: format!("input must have a channel axis, got {shape:?}"),
            });
        }
        let c = shape[1];
        for (name, id) in [("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)] {
            if self.shape(id) != [c] {
                return Err(TensorError::ShapeMismatch {
                    op: "batchnorm",
                    detail: format!("{name} {:?} vs channel axis C={c}", self.shape(id)),
                });
            }
        }
        let out = kernels::batchnorm(
            self.data(input),
            &shape,
            self.data(gamma),
            self.data(beta),
            self.data(mean),
            self.data(var),
            eps,
        );
        debug_assert_finite("batchnorm", &out);
        let ng = self.parents_need_grad(&[input, gamma, beta]);
        Ok(self.push(
            Value::new(shape, out),
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                var,
                eps,
            },
            ng,
        ))
    }

    pub fn maxpool(
        &mut self,
        input: NodeId,
        kernel: usize,
        stride: usize,
    ) -> Result<NodeId, TensorError> {
        let dims = PoolDims::resolve(self.shape(input), kernel, stride)?;
        let (out, switches) = kernels::maxpool(self.data(input), &dims);
        let ng = self.nodes[input].needs_grad;
        Ok(self.push(
            Value::new(dims.output_shape(), out),
            Op::MaxPool { input, switches },
            ng,
        ))
    }

    pub fn avgpool(
        &mut self,
        input: NodeId,
        kernel: usize,
        stride: usize,
    ) -> Result<NodeId, TensorError> {
        let dims = PoolDims::resolve(self.shape(input), kernel, stride)?;
        let out = kernels::avgpool(self.data(input), &dims);
        let ng = self.nodes[input].needs_grad;
        Ok(self.push(
            Value::new(dims.output_shape(), out),
            Op::AvgPool { input, dims },
            ng,
        ))
    }

    /// Softmax over a flat vector (the importance-parameter transform).
    pub fn softmax_vec(&mut self, a: NodeId) -> NodeId {
        let out = kernels::softmax_vec(self.data(a));
        debug_assert_finite("softmax_vec", &out);
        let ng = self.nodes[a].needs_grad;
        self.push(
            Value::new(self.shape(a).to_vec(), out),
            Op::SoftmaxVec(a),
            ng,
        )
    }

    /// Uniform fake quantization with clipped-STE backward.
    pub fn fake_quant(
        &mut self,
        input: NodeId,
        params: QuantParams,
    ) -> Result<NodeId, TensorError> {
        params.validate()?;
        let out = quantizer::fake_quant(self.data(input), &params)?;
        let ng = self.nodes[input].needs_grad;
        Ok(self.push(
            Value::new(self.shape(input).to_vec(), out),
            Op::FakeQuant { input, params },
            ng,
        ))
    }

    /// Theta-weighted sum of fake-quantized branches, reduced in place:
    /// out = sum_i theta[i] * fake_quant(x, params[i]).
    ///
    /// One full-size temporary exists at a time regardless of branch count;
    /// backward recomputes branch values instead of storing them.
    pub fn fq_mix(
        &mut self,
        input: NodeId,
        theta: NodeId,
        params: Vec<QuantParams>,
    ) -> Result<NodeId, TensorError> {
        let n = params.len();
        if n == 0 || self.shape(theta) != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "fq_mix",
                detail: format!("theta shape {:?} vs {} branch params", self.shape(theta), n),
            });
        }
        for p in &params {
            p.validate()?;
        }
        let numel = self.data(input).len();
        let mut acc = TrackedVec::zeros(numel);
        let mut tmp = TrackedVec::zeros(numel);
        for (i, p) in params.iter().enumerate() {
            let w = self.data(theta)[i];
            quantizer::fake_quant_into(self.data(input), p, &mut tmp);
            for (a, &t) in acc.iter_mut().zip(tmp.iter()) {
                *a += w * t;
            }
        }
        drop(tmp);
        debug_assert_finite("fq_mix", &acc);
        let ng = self.parents_need_grad(&[input, theta]);
        let shape = self.shape(input).to_vec();
        Ok(self.push(
            Value { shape, data: acc },
            Op::FqMix {
                input,
                theta,
                params,
            },
            ng,
        ))
    }

    /// Single trainable-strategy quantizer application.
    pub fn qat_quant(&mut self, input: NodeId, branch: QatBranch) -> Result<NodeId, TensorError> {
        let scalar = self.branch_scalar(&branch)?;
        let mut out = vec![0.0f32; self.data(input).len()];
        crate::qat::rule_forward(branch.rule, self.data(input), scalar, &mut out);
        debug_assert_finite("qat_quant", &out);
        let mut ng = self.nodes[input].needs_grad;
        if let Some(s) = branch.scalar {
            ng |= self.nodes[s].needs_grad;
        }
        Ok(self.push(
            Value::new(self.shape(input).to_vec(), out),
            Op::QatQuant { input, branch },
            ng,
        ))
    }

    /// Theta-weighted sum of trainable-strategy branches over one shared
    /// input tensor: out = sum_i theta[i] * rule_i(x). Branch gradients all
    /// accumulate into the single shared input.
    pub fn qat_mix(
        &mut self,
        input: NodeId,
        theta: NodeId,
        branches: Vec<QatBranch>,
    ) -> Result<NodeId, TensorError> {
        let n = branches.len();
        if n == 0 || self.shape(theta) != [n] {
            return Err(TensorError::ShapeMismatch {
                op: "qat_mix",
                detail: format!("theta shape {:?} vs {} branches", self.shape(theta), n),
            });
        }
        let numel = self.data(input).len();
        let mut acc = TrackedVec::zeros(numel);
        let mut tmp = TrackedVec::zeros(numel);
        for (i, b) in branches.iter().enumerate() {
            let w = self.data(theta)[i];
            let scalar = self.branch_scalar(b)?;
            crate::qat::rule_forward(b.rule, self.data(input), scalar, &mut tmp);
            for (a, &t) in acc.iter_mut().zip(tmp.iter()) {
                *a += w * t;
            }
        }
        drop(tmp);
        debug_assert_finite("qat_mix", &acc);
        let mut ng = self.parents_need_grad(&[input, theta]);
        for b in &branches {
            if let Some(s) = b.scalar {
                ng |= self.nodes[s].needs_grad;
            }
        }
        let shape = self.shape(input).to_vec();
        Ok(self.push(
            Value { shape, data: acc },
            Op::QatMix {
                input,
                theta,
                branches,
            },
            ng,
        ))
    }

    fn branch_scalar(&self, branch: &QatBranch) -> Result<Option<f32>, TensorError> {
        match branch.scalar {
            None => Ok(None),
            Some(id) => {
                if self.data(id).len() != 1 {
                    return Err(TensorError::ShapeMismatch {
                        op: "qat branch scalar",
                        detail: format!("expected scalar, got {:?}", self.shape(id)),
                    });
                }
                Ok(Some(self.data(id)[0]))
            }
        }
    }

    /// Mean softmax cross-entropy of [rows, classes] logits against labels.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
    ) -> Result<NodeId, TensorError> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("logits {shape:?} vs {} labels", labels.len()),
            });
        }
        let classes = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy",
                detail: format!("label {bad} out of range for {classes} classes"),
            });
        }
        let loss = kernels::cross_entropy(self.data(logits), classes, labels);
        let ng = self.nodes[logits].needs_grad;
        Ok(self.push(
            Value::new(vec![1], vec![loss]),
            Op::CrossEntropy {
                logits,
                classes,
                labels: labels.to_vec(),
            },
            ng,
        ))
    }

    /// Mean squared error between two same-shape nodes.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId, TensorError> {
        self.check_same_shape("mse", pred, target)?;
        let loss = kernels::mse(self.data(pred), self.data(target));
        let ng = self.parents_need_grad(&[pred, target]);
        Ok(self.push(Value::new(vec![1], vec![loss]), Op::Mse { pred, target }, ng))
    }

    /// Reverse sweep from a scalar loss. Consumes the recording: calling it
    /// again on the same tape reports a stale graph.
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients, TensorError> {
        if self.consumed {
            return Err(TensorError::StaleTape);
        }
        self.consumed = true;
        let len = self.data(loss).len();
        if len != 1 {
            return Err(TensorError::NonScalarLoss { len });
        }
        counters::note_backward();

        let mut slots: Vec<Option<TrackedVec>> = (0..self.nodes.len()).map(|_| None).collect();
        slots[loss] = Some(TrackedVec::from_vec(vec![1.0]));

        for id in (0..=loss).rev() {
            if !self.nodes[id].needs_grad {
                slots[id] = None;
                continue;
            }
            let Some(grad) = slots[id].take() else {
                continue;
            };
            self.backprop_node(id, &grad, &mut slots);
            // Leaves keep their accumulated gradient; interior buffers are freed.
            if matches!(self.nodes[id].op, Op::Leaf) {
                slots[id] = Some(grad);
            }
        }
        Ok(Gradients { slots })
    }

    fn accum(&self, slots: &mut [Option<TrackedVec>], id: NodeId, contribution: &[f32]) {
        if !self.nodes[id].needs_grad {
            return;
        }
        match &mut slots[id] {
            Some(existing) => {
                for (e, &c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(TrackedVec::from_slice(contribution)),
        }
    }

    fn backprop_node(&self, id: NodeId, grad: &TrackedVec, slots: &mut [Option<TrackedVec>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(slots, *a, grad);
                self.accum(slots, *b, grad);
            }
            Op::Sub(a, b) => {
                self.accum(slots, *a, grad);
                if self.nodes[*b].needs_grad {
                    let neg: Vec<f32> = grad.iter().map(|&g| -g).collect();
                    self.accum(slots, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.nodes[*a].needs_grad {
                    let da: Vec<f32> = grad
                        .iter()
                        .zip(self.data(*b))
                        .map(|(&g, &v)| g * v)
                        .collect();
                    self.accum(slots, *a, &da);
                }
                if self.nodes[*b].needs_grad {
                    let db: Vec<f32> = grad
                        .iter()
                        .zip(self.data(*a))
                        .map(|(&g, &v)| g * v)
                        .collect();
                    self.accum(slots, *b, &db);
                }
            }
            Op::Scale(a, c) => {
                let da: Vec<f32> = grad.iter().map(|&g| g * c).collect();
                self.accum(slots, *a, &da);
            }
            Op::Sum(a) => {
                let g = grad[0];
                let da = vec![g; self.data(*a).len()];
                self.accum(slots, *a, &da);
            }
            Op::Relu(a) => {
                let da: Vec<f32> = grad
                    .iter()
                    .zip(self.data(*a))
                    .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                self.accum(slots, *a, &da);
            }
            Op::Reshape(a) => {
                self.accum(slots, *a, grad);
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let xs = self.shape(*input);
                let ws = self.shape(*weight);
                let (m, k, n) = (xs[0], xs[1], ws[0]);
                if self.nodes[*input].needs_grad {
                    let mut dx = vec![0.0f32; m * k];
                    kernels::matmul(grad, self.data(*weight), m, n, k, &mut dx);
                    self.accum(slots, *input, &dx);
                }
                if self.nodes[*weight].needs_grad {
                    let mut dw = vec![0.0f32; n * k];
                    kernels::matmul_tn(grad, self.data(*input), m, n, k, &mut dw);
                    self.accum(slots, *weight, &dw);
                }
                if let Some(b) = bias {
                    if self.nodes[*b].needs_grad {
                        let mut db = vec![0.0f32; n];
                        for i in 0..m {
                            for j in 0..n {
                                db[j] += grad[i * n + j];
                            }
                        }
                        self.accum(slots, *b, &db);
                    }
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                dims,
            } => {
                let want_dx = self.nodes[*input].needs_grad;
                let want_dw = self.nodes[*weight].needs_grad;
                let (dx, dw, db) = kernels::conv2d_backward(
                    self.data(*input),
                    self.data(*weight),
                    grad,
                    dims,
                    want_dx,
                    want_dw,
                );
                if let Some(dx) = dx {
                    self.accum(slots, *input, &dx);
                }
                if let Some(dw) = dw {
                    self.accum(slots, *weight, &dw);
                }
                if let Some(b) = bias {
                    if self.nodes[*b].needs_grad {
                        self.accum(slots, *b, &db);
                    }
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                mean,
                var,
                eps,
            } => {
                let shape = self.shape(*input).to_vec();
                if self.nodes[*input].needs_grad {
                    let dx = kernels::batchnorm_backward_input(
                        grad,
                        &shape,
                        self.data(*gamma),
                        self.data(*var),
                        *eps,
                    );
                    self.accum(slots, *input, &dx);
                }
                if self.nodes[*gamma].needs_grad || self.nodes[*beta].needs_grad {
                    let channels = shape[1];
                    let spatial: usize = shape[2..].iter().product::<usize>().max(1);
                    let x = self.data(*input);
                    let mu = self.data(*mean);
                    let vr = self.data(*var);
                    let mut dgamma = vec![0.0f32; channels];
                    let mut dbeta = vec![0.0f32; channels];
                    for ni in 0..shape[0] {
                        for ci in 0..channels {
                            let inv = 1.0 / (vr[ci] + eps).sqrt();
                            let base = (ni * channels + ci) * spatial;
                            for s in 0..spatial {
                                let g = grad[base + s];
                                dgamma[ci] += g * (x[base + s] - mu[ci]) * inv;
                                dbeta[ci] += g;
                            }
                        }
                    }
                    if self.nodes[*gamma].needs_grad {
                        self.accum(slots, *gamma, &dgamma);
                    }
                    if self.nodes[*beta].needs_grad {
                        self.accum(slots, *beta, &dbeta);
                    }
                }
            }
            Op::MaxPool { input, switches } => {
                let dx = kernels::maxpool_backward(grad, switches, self.data(*input).len());
                self.accum(slots, *input, &dx);
            }
            Op::AvgPool { input, dims } => {
                let dx = kernels::avgpool_backward(grad, dims);
                self.accum(slots, *input, &dx);
            }
            Op::SoftmaxVec(a) => {
                let theta = &self.nodes[id].value.data;
                let da = kernels::softmax_vec_backward(theta, grad);
                self.accum(slots, *a, &da);
            }
            Op::FakeQuant { input, params } => {
                let da: Vec<f32> = grad
                    .iter()
                    .zip(self.data(*input))
                    .map(|(&g, &x)| g * quantizer::ste_mask_one(x, params))
                    .collect();
                self.accum(slots, *input, &da);
            }
            Op::FqMix {
                input,
                theta,
                params,
            } => {
                let x = self.data(*input);
                let th = self.data(*theta);
                if self.nodes[*theta].needs_grad {
                    // d/d theta_i = <grad, fake_quant(x, p_i)>, recomputed per branch.
                    let mut dtheta = vec![0.0f32; params.len()];
                    for (i, p) in params.iter().enumerate() {
                        let mut acc = 0.0f64;
                        for (&g, &xv) in grad.iter().zip(x) {
                            acc += f64::from(g) * f64::from(quantizer::fake_quant_one(xv, p));
                        }
                        dtheta[i] = acc as f32;
                    }
                    self.accum(slots, *theta, &dtheta);
                }
                if self.nodes[*input].needs_grad {
                    // Clipped STE per branch, weighted by theta.
                    let dx: Vec<f32> = grad
                        .iter()
                        .zip(x)
                        .map(|(&g, &xv)| {
                            let mut w = 0.0f32;
                            for (i, p) in params.iter().enumerate() {
                                w += th[i] * quantizer::ste_mask_one(xv, p);
                            }
                            g * w
                        })
                        .collect();
                    self.accum(slots, *input, &dx);
                }
            }
            Op::QatQuant { input, branch } => {
                let scalar = self
                    .branch_scalar(branch)
                    .expect("validated at record time");
                let want_dx = self.nodes[*input].needs_grad;
                let mut dx = vec![0.0f32; self.data(*input).len()];
                let (_, dscalar) = crate::qat::rule_backward(
                    branch.rule,
                    self.data(*input),
                    scalar,
                    grad,
                    1.0,
                    want_dx.then_some(dx.as_mut_slice()),
                    false,
                );
                if want_dx {
                    self.accum(slots, *input, &dx);
                }
                if let Some(sid) = branch.scalar {
                    if self.nodes[sid].needs_grad {
                        self.accum(slots, sid, &[dscalar]);
                    }
                }
            }
            Op::QatMix {
                input,
                theta,
                branches,
            } => {
                let x = self.data(*input);
                let th = self.data(*theta);
                let want_dx = self.nodes[*input].needs_grad;
                let want_dtheta = self.nodes[*theta].needs_grad;
                let mut dx = vec![0.0f32; x.len()];
                let mut dtheta = vec![0.0f32; branches.len()];
                for (i, b) in branches.iter().enumerate() {
                    let scalar = self.branch_scalar(b).expect("validated at record time");
                    let (dth, dscalar) = crate::qat::rule_backward(
                        b.rule,
                        x,
                        scalar,
                        grad,
                        th[i],
                        want_dx.then_some(dx.as_mut_slice()),
                        want_dtheta,
                    );
                    dtheta[i] = dth;
                    if let Some(sid) = b.scalar {
                        if self.nodes[sid].needs_grad {
                            self.accum(slots, sid, &[dscalar]);
                        }
                    }
                }
                if want_dx {
                    self.accum(slots, *input, &dx);
                }
                if want_dtheta {
                    self.accum(slots, *theta, &dtheta);
                }
            }
            Op::CrossEntropy {
                logits,
                classes,
                labels,
            } => {
                let dl =
                    kernels::cross_entropy_backward(self.data(*logits), *classes, labels, grad[0]);
                self.accum(slots, *logits, &dl);
            }
            Op::Mse { pred, target } => {
                if self.nodes[*pred].needs_grad {
                    let dp = kernels::mse_backward(self.data(*pred), self.data(*target), grad[0]);
                    self.accum(slots, *pred, &dp);
                }
                if self.nodes[*target].needs_grad {
                    let dt = kernels::mse_backward(self.data(*target), self.data(*pred), grad[0]);
                    self.accum(slots, *target, &dt);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of a scalar-valued function of a flat input.
    fn numerical_grad<F>(f: &F, x: &[f32], h: f32) -> Vec<f32>
    where
        F: Fn(&[f32]) -> f32,
    {
        let mut grad = vec![0.0f32; x.len()];
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            let mut xm = x.to_vec();
            xp[i] += h;
            xm[i] -= h;
            grad[i] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        grad
    }

    fn assert_close(actual: &[f32], expected: &[f32], rel: f32) {
        for (i, (&a, &e)) in actual.iter().zip(expected).enumerate() {
            let denom = e.abs().max(1e-2);
            assert!(
                (a - e).abs() / denom < rel,
                "index {i}: got {a}, expected {e}"
            );
        }
    }

    #[test]
    fn linear_function_gradient() {
        // loss = sum(3 * x), so d loss / d x = 3.
        let mut tape = Tape::new();
        let x = tape.leaf(&[1], &[5.0], true);
        let y = tape.scale(x, 3.0);
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[3.0]);
    }

    #[test]
    fn constant_leaf_has_no_grad_slot() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[2], &[1.0, 2.0], true);
        let c = tape.leaf(&[2], &[4.0, 5.0], false);
        let y = tape.mul(x, c).unwrap();
        let loss = tape.sum(y);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[4.0, 5.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn second_backward_is_stale() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[1], &[1.0], true);
        let loss = tape.sum(x);
        tape.backward(loss).unwrap();
        let err = tape.backward(loss).unwrap_err();
        assert!(matches!(err, TensorError::StaleTape));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[2], &[1.0, 2.0], true);
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, TensorError::NonScalarLoss { len: 2 }));
    }

    #[test]
    fn conv_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f32> = (0..18).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f32> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let run = |xv: &[f32], wv: &[f32]| {
            let mut tape = Tape::new();
            let xi = tape.leaf(&[1, 2, 3, 3], xv, true);
            let wi = tape.leaf(&[1, 2, 2, 2], wv, true);
            let y = tape.conv2d(xi, wi, None, 1, 0).unwrap();
            let loss = tape.sum(y);
            (tape, xi, wi, loss)
        };

        let (mut tape, xi, wi, loss) = run(&x, &w);
        let grads = tape.backward(loss).unwrap();

        let fx = |xv: &[f32]| {
            let (t, _, _, l) = run(xv, &w);
            t.data(l)[0]
        };
        let fw = |wv: &[f32]| {
            let (t, _, _, l) = run(&x, wv);
            t.data(l)[0]
        };
        assert_close(grads.get(xi).unwrap(), &numerical_grad(&fx, &x, 1e-3), 1e-3);
        assert_close(grads.get(wi).unwrap(), &numerical_grad(&fw, &w, 1e-3), 1e-3);
    }

    #[test]
    fn linear_and_losses_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<f32> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f32> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..4).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let labels = vec![1usize, 3];

        let run = |wv: &[f32]| {
            let mut tape = Tape::new();
            let xi = tape.leaf(&[2, 3], &x, false);
            let wi = tape.leaf(&[4, 3], wv, true);
            let bi = tape.leaf(&[4], &b, true);
            let y = tape.linear(xi, wi, Some(bi)).unwrap();
            let loss = tape.cross_entropy(y, &labels).unwrap();
            (tape, wi, bi, loss)
        };
        let (mut tape, wi, _bi, loss) = run(&w);
        let grads = tape.backward(loss).unwrap();
        let f = |wv: &[f32]| {
            let (t, _, _, l) = run(wv);
            t.data(l)[0]
        };
        assert_close(grads.get(wi).unwrap(), &numerical_grad(&f, &w, 1e-3), 1e-2);
    }

    #[test]
    fn pool_and_bn_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x: Vec<f32> = (0..32).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gamma = vec![1.2f32, 0.8];
        let beta = vec![0.1f32, -0.2];
        let mean = vec![0.05f32, -0.1];
        let var = vec![0.9f32, 1.1];

        let run = |xv: &[f32]| {
            let mut tape = Tape::new();
            let xi = tape.leaf(&[1, 2, 4, 4], xv, true);
            let g = tape.leaf(&[2], &gamma, false);
            let bt = tape.leaf(&[2], &beta, false);
            let mu = tape.leaf(&[2], &mean, false);
            let vr = tape.leaf(&[2], &var, false);
            let y = tape.batchnorm(xi, g, bt, mu, vr, 1e-5).unwrap();
            let p = tape.avgpool(y, 2, 2).unwrap();
            let loss = tape.sum(p);
            (tape, xi, loss)
        };
        let (mut tape, xi, loss) = run(&x);
        let grads = tape.backward(loss).unwrap();
        let f = |xv: &[f32]| {
            let (t, _, l) = run(xv);
            t.data(l)[0]
        };
        assert_close(grads.get(xi).unwrap(), &numerical_grad(&f, &x, 1e-3), 1e-2);
    }

    #[test]
    fn ste_matches_clamp_surrogate_finite_differences() {
        // The STE treats rounding as identity, so its gradient must equal the
        // finite differences of the clamp-only surrogate s(x) = clamp(x, -t, t)
        // away from the threshold.
        let p = QuantParams::symmetric(1.0, 8).unwrap();
        let x = vec![-1.5f32, -0.4, 0.3, 0.9, 1.7];
        let g = vec![1.0f32; 5];
        let analytic = quantizer::ste_backward(&g, &x, &p).unwrap();
        let h = 1e-3f64;
        for (i, &xv) in x.iter().enumerate() {
            let xv = f64::from(xv);
            let fd = ((xv + h).clamp(-1.0, 1.0) - (xv - h).clamp(-1.0, 1.0)) / (2.0 * h);
            assert!(
                (f64::from(analytic[i]) - fd).abs() < 1e-6,
                "index {i}: ste {} vs fd {fd}",
                analytic[i]
            );
        }
    }

    #[test]
    fn softmax_grad_matches_finite_differences() {
        let raw = vec![0.3f32, -0.2, 0.7, 0.1];
        let run = |rv: &[f32]| {
            let mut tape = Tape::new();
            let r = tape.leaf(&[4], rv, true);
            let th = tape.softmax_vec(r);
            // weigh components unevenly so the Jacobian is exercised
            let w = tape.leaf(&[4], &[1.0, -2.0, 0.5, 3.0], false);
            let y = tape.mul(th, w).unwrap();
            let loss = tape.sum(y);
            (tape, r, loss)
        };
        let (mut tape, r, loss) = run(&raw);
        let grads = tape.backward(loss).unwrap();
        let f = |rv: &[f32]| {
            let (t, _, l) = run(rv);
            t.data(l)[0]
        };
        assert_close(grads.get(r).unwrap(), &numerical_grad(&f, &raw, 1e-3), 1e-2);
    }

    #[test]
    fn fq_mix_single_branch_equals_fake_quant() {
        let p = QuantParams::symmetric(1.0, 8).unwrap();
        let x = vec![0.3f32, -0.8, 1.4, 0.0];
        let mut tape = Tape::new();
        let xi = tape.leaf(&[4], &x, false);
        let raw = tape.leaf(&[1], &[0.1], false);
        let th = tape.softmax_vec(raw);
        let mixed = tape.fq_mix(xi, th, vec![p]).unwrap();
        let single = tape.fake_quant(xi, p).unwrap();
        assert_eq!(tape.data(mixed), tape.data(single));
    }

    #[test]
    fn fq_mix_theta_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f32> = (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let params: Vec<QuantParams> = [0.5f32, 1.0, 2.0, 4.0]
            .iter()
            .map(|&t| QuantParams::symmetric(t, 8).unwrap())
            .collect();
        let raw = vec![0.1f32, 0.4, -0.3, 0.2];

        let run = |rv: &[f32]| {
            let mut tape = Tape::new();
            let xi = tape.leaf(&[16], &x, false);
            let r = tape.leaf(&[4], rv, true);
            let th = tape.softmax_vec(r);
            let mixed = tape.fq_mix(xi, th, params.clone()).unwrap();
            let sq = tape.mul(mixed, mixed).unwrap();
            let loss = tape.sum(sq);
            (tape, r, loss)
        };
        let (mut tape, r, loss) = run(&raw);
        let grads = tape.backward(loss).unwrap();
        let f = |rv: &[f32]| {
            let (t, _, l) = run(rv);
            t.data(l)[0]
        };
        // Loss is smooth in raw theta: branches are constant w.r.t. them.
        assert_close(grads.get(r).unwrap(), &numerical_grad(&f, &raw, 1e-3), 1e-2);
    }
}
