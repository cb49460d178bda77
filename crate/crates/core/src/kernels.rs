//! Raw f32 compute kernels.
//!
//! Everything here operates on plain slices with fixed, documented loop
//! orders so results are bit-reproducible on one machine. The default
//! convolution lowers to im2col + GEMM; `conv2d_naive` keeps the
//! six-nested-loop reference used as the independent oracle in tests.

use crate::counters;
use crate::error::TensorError;

/// Resolved convolution geometry. Construction validates every axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    pub fn resolve(
        input_shape: &[usize],
        weight_shape: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self, TensorError> {
        if input_shape.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input must be [N,C,H,W], got {input_shape:?}"),
            });
        }
        if weight_shape.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("weight must be [O,C,Kh,Kw], got {weight_shape:?}"),
            });
        }
        let (n, c, h, w) = (
            input_shape[0],
            input_shape[1],
            input_shape[2],
            input_shape[3],
        );
        let (o, wc, kh, kw) = (
            weight_shape[0],
            weight_shape[1],
            weight_shape[2],
            weight_shape[3],
        );
        if c != wc {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!("input channel axis C={c} != weight channel axis C={wc}"),
            });
        }
        if stride == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: "stride must be >= 1".into(),
            });
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                detail: format!(
                    "kernel {kh}x{kw} larger than padded input {}x{}",
                    h + 2 * padding,
                    w + 2 * padding
                ),
            });
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        Ok(ConvDims {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            stride,
            padding,
            oh,
            ow,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.n, self.o, self.oh, self.ow]
    }

    pub fn output_len(&self) -> usize {
        self.n * self.o * self.oh * self.ow
    }
}

/// C[m,n] = A[m,k] * B[k,n], i-k-j loop order.
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// C[m,n] = A[m,k] * B[n,k]^T (dot of rows).
pub fn matmul_nt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0f32;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
}

/// C[n,k] = A[m,n]^T * B[m,k].
pub fn matmul_tn(a: &[f32], b: &[f32], m: usize, n: usize, k: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), m * k);
    debug_assert_eq!(out.len(), n * k);
    out.fill(0.0);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let brow = &b[i * k..(i + 1) * k];
        for (j, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut out[j * k..(j + 1) * k];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Lower the input into the [C*Kh*Kw, N*Oh*Ow] patch matrix.
pub fn im2col(input: &[f32], d: &ConvDims, col: &mut [f32]) {
    let ckk = d.c * d.kh * d.kw;
    let q = d.n * d.oh * d.ow;
    debug_assert_eq!(col.len(), ckk * q);
    col.fill(0.0);
    for ni in 0..d.n {
        for ci in 0..d.c {
            for ki in 0..d.kh {
                for kj in 0..d.kw {
                    let row = ((ci * d.kh) + ki) * d.kw + kj;
                    for oy in 0..d.oh {
                        let iy = (oy * d.stride + ki) as isize - d.padding as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        for ox in 0..d.ow {
                            let ix = (ox * d.stride + kj) as isize - d.padding as isize;
                            if ix < 0 || ix >= d.w as isize {
                                continue;
                            }
                            let src =
                                ((ni * d.c + ci) * d.h + iy as usize) * d.w + ix as usize;
                            let dst = row * q + (ni * d.oh + oy) * d.ow + ox;
                            col[dst] = input[src];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the patch matrix back onto an input-shaped buffer.
pub fn col2im_add(col: &[f32], d: &ConvDims, out: &mut [f32]) {
    let q = d.n * d.oh * d.ow;
    debug_assert_eq!(out.len(), d.n * d.c * d.h * d.w);
    for ni in 0..d.n {
        for ci in 0..d.c {
            for ki in 0..d.kh {
                for kj in 0..d.kw {
                    let row = ((ci * d.kh) + ki) * d.kw + kj;
                    for oy in 0..d.oh {
                        let iy = (oy * d.stride + ki) as isize - d.padding as isize;
                        if iy < 0 || iy >= d.h as isize {
                            continue;
                        }
                        for ox in 0..d.ow {
                            let ix = (ox * d.stride + kj) as isize - d.padding as isize;
                            if ix < 0 || ix >= d.w as isize {
                                continue;
                            }
                            let dst =
                                ((ni * d.c + ci) * d.h + iy as usize) * d.w + ix as usize;
                            out[dst] += col[row * q + (ni * d.oh + oy) * d.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation via im2col + GEMM. Counts one convolution call.
pub fn conv2d(input: &[f32], weight: &[f32], bias: Option<&[f32]>, d: &ConvDims) -> Vec<f32> {
    counters::note_conv();
    let ckk = d.c * d.kh * d.kw;
    let q = d.n * d.oh * d.ow;
    let mut col = counters::TrackedVec::zeros(ckk * q);
    im2col(input, d, &mut col);
    let mut ymat = counters::TrackedVec::zeros(d.o * q);
    matmul(weight, &col, d.o, ckk, q, &mut ymat);
    drop(col);
    let mut out = vec![0.0f32; d.output_len()];
    for ni in 0..d.n {
        for oc in 0..d.o {
            let b = bias.map_or(0.0, |bs| bs[oc]);
            for oy in 0..d.oh {
                for ox in 0..d.ow {
                    out[((ni * d.o + oc) * d.oh + oy) * d.ow + ox] =
                        ymat[oc * q + (ni * d.oh + oy) * d.ow + ox] + b;
                }
            }
        }
    }
    out
}

/// Reference convolution: the direct six-nested-loop definition. Kept as the
/// independent oracle for the im2col path.
pub fn conv2d_naive(input: &[f32], weight: &[f32], bias: Option<&[f32]>, d: &ConvDims) -> Vec<f32> {
    counters::note_conv();
    let mut out = vec![0.0f32; d.output_len()];
    for ni in 0..d.n {
        for oc in 0..d.o {
            for oy in 0..d.oh {
                for ox in 0..d.ow {
                    let mut acc = bias.map_or(0.0, |bs| bs[oc]);
                    for ci in 0..d.c {
                        for ki in 0..d.kh {
                            let iy = (oy * d.stride + ki) as isize - d.padding as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            for kj in 0..d.kw {
                                let ix = (ox * d.stride + kj) as isize - d.padding as isize;
                                if ix < 0 || ix >= d.w as isize {
                                    continue;
                                }
                                let xv = input
                                    [((ni * d.c + ci) * d.h + iy as usize) * d.w + ix as usize];
                                let wv = weight[((oc * d.c + ci) * d.kh + ki) * d.kw + kj];
                                acc += xv * wv;
                            }
                        }
                    }
                    out[((ni * d.o + oc) * d.oh + oy) * d.ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// Gradients of conv2d w.r.t. input, weight and bias.
pub fn conv2d_backward(
    input: &[f32],
    weight: &[f32],
    dy: &[f32],
    d: &ConvDims,
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>, Vec<f32>) {
    let ckk = d.c * d.kh * d.kw;
    let q = d.n * d.oh * d.ow;

    // dy reordered as [O, N*Oh*Ow]
    let mut dy_mat = counters::TrackedVec::zeros(d.o * q);
    for ni in 0..d.n {
        for oc in 0..d.o {
            for oy in 0..d.oh {
                for ox in 0..d.ow {
                    dy_mat[oc * q + (ni * d.oh + oy) * d.ow + ox] =
                        dy[((ni * d.o + oc) * d.oh + oy) * d.ow + ox];
                }
            }
        }
    }

    let mut db = vec![0.0f32; d.o];
    for oc in 0..d.o {
        let mut acc = 0.0f32;
        for qq in 0..q {
            acc += dy_mat[oc * q + qq];
        }
        db[oc] = acc;
    }

    let dw = if want_dw {
        let mut col = counters::TrackedVec::zeros(ckk * q);
        im2col(input, d, &mut col);
        let mut dwm = vec![0.0f32; d.o * ckk];
        matmul_nt(&dy_mat, &col, d.o, q, ckk, &mut dwm);
        Some(dwm)
    } else {
        None
    };

    let dx = if want_dx {
        let mut dcol = counters::TrackedVec::zeros(ckk * q);
        matmul_tn(weight, &dy_mat, d.o, ckk, q, &mut dcol);
        let mut dxv = vec![0.0f32; d.n * d.c * d.h * d.w];
        col2im_add(&dcol, d, &mut dxv);
        Some(dxv)
    } else {
        None
    };

    (dx, dw, db)
}

/// Pool geometry for 2-D max/avg pooling (no padding).
#[derive(Debug, Clone, Copy)]
pub struct PoolDims {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl PoolDims {
    pub fn resolve(shape: &[usize], kernel: usize, stride: usize) -> Result<Self, TensorError> {
        if shape.len() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "pool2d",
                detail: format!("input must be [N,C,H,W], got {shape:?}"),
            });
        }
        if kernel == 0 || stride == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "pool2d",
                detail: "kernel and stride must be >= 1".into(),
            });
        }
        if shape[2] < kernel || shape[3] < kernel {
            return Err(TensorError::ShapeMismatch {
                op: "pool2d",
                detail: format!("kernel {kernel} larger than spatial dims of {shape:?}"),
            });
        }
        Ok(PoolDims {
            n: shape[0],
            c: shape[1],
            h: shape[2],
            w: shape[3],
            kernel,
            stride,
            oh: (shape[2] - kernel) / stride + 1,
            ow: (shape[3] - kernel) / stride + 1,
        })
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.n, self.c, self.oh, self.ow]
    }

    pub fn output_len(&self) -> usize {
        self.n * self.c * self.oh * self.ow
    }
}

/// Max pooling; returns output and the flat argmax index per output element.
/// Ties resolve to the first maximum in scan order.
pub fn maxpool(input: &[f32], d: &PoolDims) -> (Vec<f32>, Vec<u32>) {
    let mut out = vec![0.0f32; d.output_len()];
    let mut switches = vec![0u32; d.output_len()];
    for ni in 0..d.n {
        for ci in 0..d.c {
            for oy in 0..d.oh {
                for ox in 0..d.ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for ky in 0..d.kernel {
                        for kx in 0..d.kernel {
                            let iy = oy * d.stride + ky;
                            let ix = ox * d.stride + kx;
                            let idx = ((ni * d.c + ci) * d.h + iy) * d.w + ix;
                            if input[idx] > best {
                                best = input[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let oidx = ((ni * d.c + ci) * d.oh + oy) * d.ow + ox;
                    out[oidx] = best;
                    switches[oidx] = best_idx as u32;
                }
            }
        }
    }
    (out, switches)
}

pub fn maxpool_backward(dy: &[f32], switches: &[u32], input_len: usize) -> Vec<f32> {
    let mut dx = vec![0.0f32; input_len];
    for (g, &s) in dy.iter().zip(switches) {
        dx[s as usize] += g;
    }
    dx
}

pub fn avgpool(input: &[f32], d: &PoolDims) -> Vec<f32> {
    let norm = 1.0 / (d.kernel * d.kernel) as f32;
    let mut out = vec![0.0f32; d.output_len()];
    for ni in 0..d.n {
        for ci in 0..d.c {
            for oy in 0..d.oh {
                for ox in 0..d.ow {
                    let mut acc = 0.0f32;
                    for ky in 0..d.kernel {
                        for kx in 0..d.kernel {
                            let iy = oy * d.stride + ky;
                            let ix = ox * d.stride + kx;
                            acc += input[((ni * d.c + ci) * d.h + iy) * d.w + ix];
                        }
                    }
                    out[((ni * d.c + ci) * d.oh + oy) * d.ow + ox] = acc * norm;
                }
            }
        }
    }
    out
}

pub fn avgpool_backward(dy: &[f32], d: &PoolDims) -> Vec<f32> {
    let norm = 1.0 / (d.kernel * d.kernel) as f32;
    let mut dx = vec![0.0f32; d.n * d.c * d.h * d.w];
    for ni in 0..d.n {
        for ci in 0..d.c {
            for oy in 0..d.oh {
                for ox in 0..d.ow {
                    let g = dy[((ni * d.c + ci) * d.oh + oy) * d.ow + ox] * norm;
                    for ky in 0..d.kernel {
                        for kx in 0..d.kernel {
                            let iy = oy * d.stride + ky;
                            let ix = ox * d.stride + kx;
                            dx[((ni * d.c + ci) * d.h + iy) * d.w + ix] += g;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Inference-mode batchnorm over the channel axis (axis 1).
/// Works for [N,C,H,W] and [N,C] layouts.
pub fn batchnorm(
    input: &[f32],
    shape: &[usize],
    gamma: &[f32],
    beta: &[f32],
    mean: &[f32],
    var: &[f32],
    eps: f32,
) -> Vec<f32> {
    let channels = shape[1];
    let spatial: usize = shape[2..].iter().product::<usize>().max(1);
    let mut out = vec![0.0f32; input.len()];
    for ni in 0..shape[0] {
        for ci in 0..channels {
            let scale = gamma[ci] / (var[ci] + eps).sqrt();
            let shift = beta[ci] - mean[ci] * scale;
            let base = (ni * channels + ci) * spatial;
            for s in 0..spatial {
                out[base + s] = input[base + s] * scale + shift;
            }
        }
    }
    out
}

pub fn batchnorm_backward_input(
    dy: &[f32],
    shape: &[usize],
    gamma: &[f32],
    var: &[f32],
    eps: f32,
) -> Vec<f32> {
    let channels = shape[1];
    let spatial: usize = shape[2..].iter().product::<usize>().max(1);
    let mut dx = vec![0.0f32; dy.len()];
    for ni in 0..shape[0] {
        for ci in 0..channels {
            let scale = gamma[ci] / (var[ci] + eps).sqrt();
            let base = (ni * channels + ci) * spatial;
            for s in 0..spatial {
                dx[base + s] = dy[base + s] * scale;
            }
        }
    }
    dx
}

/// Numerically stable softmax of a flat vector.
pub fn softmax_vec(x: &[f32]) -> Vec<f32> {
    let max = x.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f32> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: f32 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn softmax_vec_backward(theta: &[f32], dy: &[f32]) -> Vec<f32> {
    let dot: f32 = theta.iter().zip(dy).map(|(&t, &g)| t * g).sum();
    theta
        .iter()
        .zip(dy)
        .map(|(&t, &g)| t * (g - dot))
        .collect()
}

/// Mean cross-entropy of row-wise softmax against integer labels.
/// Accumulates in f64 for stability.
pub fn cross_entropy(logits: &[f32], classes: usize, labels: &[usize]) -> f32 {
    let rows = labels.len();
    let mut total = 0.0f64;
    for (r, &label) in labels.iter().enumerate() {
        let row = &logits[r * classes..(r + 1) * classes];
        let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
        let mut sum = 0.0f64;
        for &v in row {
            sum += f64::from(v - max).exp();
        }
        let lse = f64::from(max) + sum.ln();
        total += lse - f64::from(row[label]);
    }
    (total / rows as f64) as f32
}

pub fn cross_entropy_backward(
    logits: &[f32],
    classes: usize,
    labels: &[usize],
    upstream: f32,
) -> Vec<f32> {
    let rows = labels.len();
    let scale = upstream / rows as f32;
    let mut dx = vec![0.0f32; logits.len()];
    for (r, &label) in labels.iter().enumerate() {
        let row = &logits[r * classes..(r + 1) * classes];
        let sm = softmax_vec(row);
        for (j, &p) in sm.iter().enumerate() {
            let ind = if j == label { 1.0 } else { 0.0 };
            dx[r * classes + j] = (p - ind) * scale;
        }
    }
    dx
}

/// Mean squared error, f64 accumulation.
pub fn mse(pred: &[f32], target: &[f32]) -> f32 {
    let mut acc = 0.0f64;
    for (&p, &t) in pred.iter().zip(target) {
        let d = f64::from(p) - f64::from(t);
        acc += d * d;
    }
    (acc / pred.len() as f64) as f32
}

pub fn mse_backward(pred: &[f32], target: &[f32], upstream: f32) -> Vec<f32> {
    let scale = 2.0 * upstream / pred.len() as f32;
    pred.iter()
        .zip(target)
        .map(|(&p, &t)| (p - t) * scale)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn matmul_identity() {
        let a = vec![1.0, 0.0, 0.0, 1.0];
        let b = vec![3.0, 4.0, 5.0, 6.0];
        let mut out = vec![0.0; 4];
        matmul(&a, &b, 2, 2, 2, &mut out);
        assert_eq!(out, b);
    }

    #[test]
    fn conv_zero_input_gives_bias() {
        let d = ConvDims::resolve(&[1, 1, 3, 3], &[2, 1, 3, 3], 1, 0).unwrap();
        let x = vec![0.0; 9];
        let w = vec![0.5; 18];
        let bias = [1.5f32, -0.5];
        let y = conv2d(&x, &w, Some(&bias), &d);
        assert_eq!(y, vec![1.5, -0.5]);
    }

    #[test]
    fn conv_scalar_product() {
        let d = ConvDims::resolve(&[1, 1, 1, 1], &[1, 1, 1, 1], 1, 0).unwrap();
        let y = conv2d(&[2.0], &[3.0], None, &d);
        assert_eq!(y, vec![6.0]);
    }

    #[test]
    fn conv_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(stride, padding) in &[(1usize, 0usize), (1, 1), (2, 1)] {
            let d = ConvDims::resolve(&[1, 2, 5, 5], &[3, 2, 3, 3], stride, padding).unwrap();
            let x = rand_vec(&mut rng, 50);
            let w = rand_vec(&mut rng, 54);
            let b = rand_vec(&mut rng, 3);
            let fast = conv2d(&x, &w, Some(&b), &d);
            let slow = conv2d_naive(&x, &w, Some(&b), &d);
            for (a, e) in fast.iter().zip(&slow) {
                assert!((a - e).abs() <= 1e-6, "fast {a} vs naive {e}");
            }
        }
    }

    #[test]
    fn conv_is_bilinear() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = ConvDims::resolve(&[1, 2, 4, 4], &[2, 2, 3, 3], 1, 1).unwrap();
        let x = rand_vec(&mut rng, 32);
        let w1 = rand_vec(&mut rng, 36);
        let w2 = rand_vec(&mut rng, 36);
        let (a, b) = (0.7f32, -1.3f32);
        let mixed: Vec<f32> = w1.iter().zip(&w2).map(|(&u, &v)| a * u + b * v).collect();
        let lhs = conv2d(&x, &mixed, None, &d);
        let y1 = conv2d(&x, &w1, None, &d);
        let y2 = conv2d(&x, &w2, None, &d);
        for ((l, u), v) in lhs.iter().zip(&y1).zip(&y2) {
            let rhs = a * u + b * v;
            let denom = rhs.abs().max(1e-3);
            assert!((l - rhs).abs() / denom <= 1e-5);
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let err = ConvDims::resolve(&[1, 3, 5, 5], &[2, 2, 3, 3], 1, 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("C=3") && msg.contains("C=2"), "{msg}");
    }

    #[test]
    fn maxpool_picks_max_and_routes_gradient() {
        let d = PoolDims::resolve(&[1, 1, 2, 2], 2, 2).unwrap();
        let (y, sw) = maxpool(&[1.0, 5.0, 3.0, 2.0], &d);
        assert_eq!(y, vec![5.0]);
        let dx = maxpool_backward(&[2.0], &sw, 4);
        assert_eq!(dx, vec![0.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_uniform_input() {
        let t = softmax_vec(&[0.1, 0.1, 0.1, 0.1]);
        assert_eq!(t, vec![0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let loss = cross_entropy(&[0.0, 0.0, 0.0, 0.0], 4, &[2]);
        assert!((loss - (4.0f32).ln()).abs() < 1e-6);
    }
}
