//! Uniform symmetric per-tensor fake quantization.
//!
//! quantize:   q = clamp(round_half_even(x / s) + z, qmin, qmax)
//! dequantize: x̂ = s * (q - z)
//!
//! Symmetric mode pins z = 0 and qmin = -qmax with qmax = 2^(bits-1) - 1,
//! trading one code for exact zero and exact odd symmetry. Rounding ties go
//! to even. A tensor of all zeros would force scale 0; that case is replaced
//! by threshold 1.0 and flagged `degenerate` so pipelines stay total.

use serde::{Deserialize, Serialize};

use crate::error::TensorError;

pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 8;

/// Per-tensor quantization parameter bundle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub threshold: f32,
    pub scale: f32,
    pub zero_point: i32,
    pub qmin: i32,
    pub qmax: i32,
    pub bits: u8,
    pub degenerate: bool,
}

impl QuantParams {
    /// Largest positive code for a symmetric range at `bits`.
    pub fn level_max(bits: u8) -> i32 {
        (1i32 << (bits - 1)) - 1
    }

    /// Symmetric params from a clipping threshold. A non-positive threshold
    /// (all-zero tensor) is replaced by 1.0 and flagged.
    pub fn symmetric(threshold: f32, bits: u8) -> Result<Self, TensorError> {
        if !(MIN_BITS..=MAX_BITS).contains(&bits) {
            return Err(TensorError::InvalidParams(format!(
                "bits must be in [{MIN_BITS}, {MAX_BITS}], got {bits}"
            )));
        }
        if !threshold.is_finite() || threshold < 0.0 {
            return Err(TensorError::InvalidParams(format!(
                "threshold must be finite and >= 0, got {threshold}"
            )));
        }
        let degenerate = threshold == 0.0;
        let t = if degenerate { 1.0 } else { threshold };
        let qmax = Self::level_max(bits);
        Ok(QuantParams {
            threshold: t,
            scale: t / qmax as f32,
            zero_point: 0,
            qmin: -qmax,
            qmax,
            bits,
            degenerate,
        })
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let qmax = Self::level_max(self.bits);
        if self.zero_point != 0 || self.qmax != qmax || self.qmin != -qmax {
            return Err(TensorError::InvalidParams(format!(
                "symmetric params require z=0, qmax={qmax}, qmin={}; got z={}, qmax={}, qmin={}",
                -qmax, self.zero_point, self.qmax, self.qmin
            )));
        }
        if !(self.scale > 0.0) || !(self.threshold > 0.0) {
            return Err(TensorError::InvalidParams(format!(
                "scale and threshold must be > 0, got s={}, t={}",
                self.scale, self.threshold
            )));
        }
        if self.scale != self.threshold / self.qmax as f32 {
            return Err(TensorError::InvalidParams(format!(
                "scale {} inconsistent with threshold {} / qmax {}",
                self.scale, self.threshold, self.qmax
            )));
        }
        Ok(())
    }
}

/// Elementwise quantization to integer codes.
pub fn quantize(data: &[f32], p: &QuantParams) -> Result<Vec<i32>, TensorError> {
    let mut out = Vec::with_capacity(data.len());
    for (i, &x) in data.iter().enumerate() {
        if !x.is_finite() {
            return Err(TensorError::NonFinite {
                context: "quantize input",
                index: i,
            });
        }
        let q = (x / p.scale).round_ties_even() + p.zero_point as f32;
        out.push((q.max(p.qmin as f32).min(p.qmax as f32)) as i32);
    }
    Ok(out)
}

/// Integer codes back to the float grid.
pub fn dequantize(codes: &[i32], p: &QuantParams) -> Result<Vec<f32>, TensorError> {
    for &q in codes {
        if q < p.qmin || q > p.qmax {
            return Err(TensorError::OutOfRange {
                value: q,
                qmin: p.qmin,
                qmax: p.qmax,
            });
        }
    }
    Ok(codes
        .iter()
        .map(|&q| p.scale * (q - p.zero_point) as f32)
        .collect())
}

/// Fused quantize→dequantize for one element.
#[inline]
pub fn fake_quant_one(x: f32, p: &QuantParams) -> f32 {
    let q = (x / p.scale)
        .round_ties_even()
        .max(p.qmin as f32)
        .min(p.qmax as f32);
    p.scale * q
}

/// Quantize-then-dequantize, simulating the integer grid in float.
pub fn fake_quant(data: &[f32], p: &QuantParams) -> Result<Vec<f32>, TensorError> {
    let mut out = Vec::with_capacity(data.len());
    for (i, &x) in data.iter().enumerate() {
        if !x.is_finite() {
            return Err(TensorError::NonFinite {
                context: "fake_quant input",
                index: i,
            });
        }
        out.push(fake_quant_one(x, p));
    }
    Ok(out)
}

/// In-place fake quantization into a caller-provided buffer.
pub fn fake_quant_into(data: &[f32], p: &QuantParams, out: &mut [f32]) {
    for (o, &x) in out.iter_mut().zip(data) {
        *o = fake_quant_one(x, p);
    }
}

/// Clipped straight-through estimator: the upstream gradient passes where
/// |x| <= threshold and is zeroed where the clamp saturates.
pub fn ste_backward(
    upstream: &[f32],
    input: &[f32],
    p: &QuantParams,
) -> Result<Vec<f32>, TensorError> {
    if upstream.len() != input.len() {
        return Err(TensorError::ShapeMismatch {
            op: "ste_backward",
            detail: format!(
                "upstream has {} elements, input has {}",
                upstream.len(),
                input.len()
            ),
        });
    }
    Ok(upstream
        .iter()
        .zip(input)
        .map(|(&g, &x)| if x.abs() <= p.threshold { g } else { 0.0 })
        .collect())
}

/// STE pass-through mask for one element.
#[inline]
pub fn ste_mask_one(x: f32, p: &QuantParams) -> f32 {
    if x.abs() <= p.threshold {
        1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p8(threshold: f32) -> QuantParams {
        QuantParams::symmetric(threshold, 8).unwrap()
    }

    #[test]
    fn zero_maps_to_zero() {
        let p = p8(2.0);
        assert_eq!(quantize(&[0.0], &p).unwrap(), vec![0]);
        assert_eq!(dequantize(&[0], &p).unwrap(), vec![0.0]);
    }

    #[test]
    fn spec_arithmetic_cases() {
        let p = p8(2.0);
        // 0.5 / (2/127) = 31.75 -> 32
        assert_eq!(quantize(&[0.5], &p).unwrap(), vec![32]);
        // 3.0 / (2/127) = 190.5 -> clamped to 127
        assert_eq!(quantize(&[3.0], &p).unwrap(), vec![127]);
        // code 127 reproduces the threshold exactly for t = 2.0
        assert_eq!(dequantize(&[127], &p).unwrap(), vec![2.0]);
        let x = dequantize(&[32], &p).unwrap()[0];
        assert!((x - 0.503_937).abs() < 1e-6);
    }

    #[test]
    fn non_finite_input_reports_index() {
        let p = p8(1.0);
        let err = quantize(&[0.0, f32::NAN], &p).unwrap_err();
        match err {
            TensorError::NonFinite { index, .. } => assert_eq!(index, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn dequantize_rejects_out_of_range() {
        let p = p8(1.0);
        assert!(dequantize(&[128], &p).is_err());
    }

    #[test]
    fn degenerate_threshold_policy() {
        let p = QuantParams::symmetric(0.0, 8).unwrap();
        assert!(p.degenerate);
        assert_eq!(p.threshold, 1.0);
        assert!(p.scale > 0.0);
    }

    #[test]
    fn grid_points_are_fixed_points() {
        let p = p8(2.0);
        for k in -127i32..=127 {
            let x = p.scale * k as f32;
            assert_eq!(fake_quant_one(x, &p), x, "code {k} moved");
        }
    }

    #[test]
    fn values_beyond_threshold_saturate() {
        let p = p8(2.0);
        assert_eq!(fake_quant_one(5.0, &p), 2.0);
        assert_eq!(fake_quant_one(-5.0, &p), -2.0);
    }

    #[test]
    fn ste_regions() {
        let p = p8(1.0);
        let g = vec![1.0, 2.0, 3.0];
        let x = vec![0.5, -0.9, 0.2];
        assert_eq!(ste_backward(&g, &x, &p).unwrap(), g);
        let x_out = vec![1.5, -2.0, 7.0];
        assert_eq!(ste_backward(&g, &x_out, &p).unwrap(), vec![0.0, 0.0, 0.0]);
        let x_mixed = vec![0.5, -2.0, 0.2];
        assert_eq!(ste_backward(&g, &x_mixed, &p).unwrap(), vec![1.0, 0.0, 3.0]);
    }

    proptest! {
        #[test]
        fn fake_quant_idempotent(xs in prop::collection::vec(-10.0f32..10.0, 1..64),
                                 t in 0.05f32..8.0, bits in 2u8..=8) {
            let p = QuantParams::symmetric(t, bits).unwrap();
            let once = fake_quant(&xs, &p).unwrap();
            let twice = fake_quant(&once, &p).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn fake_quant_odd_symmetry(xs in prop::collection::vec(-10.0f32..10.0, 1..64),
                                   t in 0.05f32..8.0, bits in 2u8..=8) {
            let p = QuantParams::symmetric(t, bits).unwrap();
            let pos = fake_quant(&xs, &p).unwrap();
            let negated: Vec<f32> = xs.iter().map(|&x| -x).collect();
            let neg = fake_quant(&negated, &p).unwrap();
            for (a, b) in pos.iter().zip(&neg) {
                prop_assert_eq!(a.to_bits(), (-b).to_bits());
            }
        }

        #[test]
        fn fake_quant_bounded_error(x in -8.0f32..8.0, t in 0.5f32..8.0, bits in 2u8..=8) {
            let p = QuantParams::symmetric(t, bits).unwrap();
            if x.abs() <= p.threshold {
                let y = fake_quant_one(x, &p);
                prop_assert!((y - x).abs() <= p.scale / 2.0 * (1.0 + 1e-5));
            }
        }

        #[test]
        fn fake_quant_monotone(a in -8.0f32..8.0, b in -8.0f32..8.0,
                               t in 0.05f32..8.0, bits in 2u8..=8) {
            let p = QuantParams::symmetric(t, bits).unwrap();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(fake_quant_one(lo, &p) <= fake_quant_one(hi, &p));
        }
    }
}
