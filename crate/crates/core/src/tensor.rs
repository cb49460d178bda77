//! Dense row-major f32 tensors.
//!
//! `Tensor` is the currency of every module: activations are `[N, C, H, W]`,
//! convolution weights `[O, I, Kh, Kw]`, fully-connected weights
//! `[out, in]`. The gradient slot is populated by the autodiff tape for
//! tensors that request it.

use crate::error::TensorError;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    /// Build a tensor, checking that the element count matches the shape.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "Tensor::new",
                detail: format!(
                    "shape {:?} implies {} elements, data holds {}",
                    shape,
                    numel,
                    data.len()
                ),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: f32) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, v: bool) {
        self.requires_grad = v;
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Store a gradient. The slot must match the tensor shape.
    pub fn set_grad(&mut self, grad: Vec<f32>) -> Result<(), TensorError> {
        if grad.len() != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "Tensor::set_grad",
                detail: format!(
                    "grad has {} elements, tensor has {}",
                    grad.len(),
                    self.data.len()
                ),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Reinterpret the same elements with a new shape.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(TensorError::ShapeMismatch {
                op: "Tensor::reshaped",
                detail: format!(
                    "cannot view {} elements as shape {:?}",
                    self.data.len(),
                    shape
                ),
            });
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, &v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stack per-sample tensors into a batch along a new leading axis.
    pub fn stack(samples: &[&Tensor]) -> Result<Self, TensorError> {
        let first = samples.first().ok_or(TensorError::ShapeMismatch {
            op: "Tensor::stack",
            detail: "empty sample list".into(),
        })?;
        let mut data = Vec::with_capacity(first.numel() * samples.len());
        for (i, s) in samples.iter().enumerate() {
            if s.shape != first.shape {
                return Err(TensorError::ShapeMismatch {
                    op: "Tensor::stack",
                    detail: format!(
                        "sample {} has shape {:?}, expected {:?}",
                        i, s.shape, first.shape
                    ),
                });
            }
            data.extend_from_slice(&s.data);
        }
        let mut shape = Vec::with_capacity(first.shape.len() + 1);
        shape.push(samples.len());
        shape.extend_from_slice(&first.shape);
        Tensor::new(shape, data)
    }
}

/// Convenience constructor used heavily in tests.
pub fn tensor(shape: &[usize], data: &[f32]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).expect("literal tensor shape/data mismatch")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_shape() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn stack_builds_batch_axis() {
        let a = tensor(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let b = tensor(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
        let s = Tensor::stack(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2]);
        assert_eq!(s.data()[4], 5.0);
    }

    #[test]
    fn grad_slot_absent_by_default() {
        let t = tensor(&[2], &[1.0, 2.0]);
        assert!(t.grad().is_none());
        assert!(!t.requires_grad());
    }
}
