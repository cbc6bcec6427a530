//! Post-training 8-bit quantization with FP16 outlier fallback.
//!
//! Weights with `|x| ≤ 6` become E4M3 codes; larger magnitudes are kept as
//! FP16 in a sparse, index-sorted outlier list. Tensors are walked in blocks
//! of [`BLOCK`] elements, which only affects the per-block statistics.

pub mod fp8;
mod model;

pub use model::{is_quantized_container, quantize_model, quantized_memory, QuantizedMemoryReport, QuantizedModel, TensorQuantStats};

use half::f16;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BLOCK: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    codes: Vec<u8>,
    outliers: Vec<(u32, u16)>,
}

/// Outlier count per block of [`BLOCK`] elements.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BlockStats {
    pub outliers_per_block: Vec<u32>,
}

/// Nearest FP16 value whose magnitude stays above the code range, so that
/// re-quantizing a dequantized outlier routes it to FP16 again.
fn outlier_half(x: f32) -> f16 {
    let h = f16::from_f32(x);
    if h.to_f32().abs() > fp8::RANGE {
        return h;
    }
    let above = f16::from_bits(f16::from_f32(fp8::RANGE).to_bits() + 1);
    if x < 0.0 {
        -above
    } else {
        above
    }
}

impl QuantizedTensor {
    pub fn from_parts(shape: Vec<usize>, codes: Vec<u8>, outliers: Vec<(u32, u16)>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) || codes.len() + outliers.len() != n {
            return Err(Error::Format(format!(
                "quantized tensor {shape:?} has {} codes and {} outliers",
                codes.len(),
                outliers.len()
            )));
        }
        if outliers.windows(2).any(|w| w[0].0 >= w[1].0) || outliers.iter().any(|o| o.0 as usize >= n) {
            return Err(Error::Format("outlier indices must be sorted, unique and in range".into()));
        }
        if outliers.iter().any(|o| f16::from_bits(o.1).to_f32().abs() <= fp8::RANGE) {
            return Err(Error::Format("outlier value inside the 8-bit range".into()));
        }
        Ok(Self { shape, codes, outliers })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.codes.len() + self.outliers.len()
    }

    /// One byte per non-outlier element.
    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    /// `(flat index, FP16 bits)`, sorted by index.
    pub fn outliers(&self) -> &[(u32, u16)] {
        &self.outliers
    }

    pub fn outlier_fraction(&self) -> f64 {
        self.outliers.len() as f64 / self.numel() as f64
    }

    /// Storage bytes: one per code, two per outlier.
    pub fn bytes(&self) -> usize {
        self.codes.len() + 2 * self.outliers.len()
    }

    pub fn block_stats(&self) -> BlockStats {
        let blocks = self.numel().div_ceil(BLOCK);
        let mut counts = vec![0u32; blocks];
        for &(i, _) in &self.outliers {
            counts[i as usize / BLOCK] += 1;
        }
        BlockStats {
            outliers_per_block: counts,
        }
    }
}

pub fn quantize_weights(t: &Tensor) -> Result<QuantizedTensor> {
    t.require_fp32("quantize_weights")?;
    let mut codes = Vec::with_capacity(t.numel());
    let mut outliers = Vec::new();
    for (b, block) in t.data().chunks(BLOCK).enumerate() {
        for (j, &x) in block.iter().enumerate() {
            if !x.is_finite() {
                return Err(Error::NonFinite("quantize_weights"));
            }
            if x.abs() > fp8::RANGE {
                outliers.push(((b * BLOCK + j) as u32, outlier_half(x).to_bits()));
            } else {
                codes.push(fp8::encode(x)?);
            }
        }
    }
    Ok(QuantizedTensor {
        shape: t.shape().to_vec(),
        codes,
        outliers,
    })
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let table = fp8::decode_table();
    let n = q.numel();
    let mut data = Vec::with_capacity(n);
    let mut codes = q.codes.iter();
    let mut outliers = q.outliers.iter().peekable();
    for i in 0..n {
        match outliers.peek() {
            Some(&&(idx, bits)) if idx as usize == i => {
                data.push(f16::from_bits(bits).to_f32());
                outliers.next();
            }
            _ => data.push(table[*codes.next().expect("validated counts") as usize]),
        }
    }
    Tensor::new(q.shape.clone(), data).expect("validated shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zeros_round_trip_without_outliers() {
        let t = Tensor::zeros(&[3, 50]);
        let q = quantize_weights(&t).unwrap();
        assert!(q.outliers().is_empty());
        assert!(dequantize(&q).bit_eq(&t));
    }

    #[test]
    fn seven_becomes_an_fp16_outlier() {
        let t = Tensor::vector(vec![0.5, 7.0, -1.0]).unwrap();
        let q = quantize_weights(&t).unwrap();
        assert_eq!(q.outliers().len(), 1);
        assert_eq!(q.outliers()[0].0, 1);
        assert_eq!(dequantize(&q).data(), &[0.5, 7.0, -1.0]);
        assert!((q.outlier_fraction() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(q.bytes(), 2 + 2);
    }

    #[test]
    fn boundary_routing_is_exact() {
        let above = f32::from_bits(6.0f32.to_bits() + 1);
        let t = Tensor::vector(vec![6.0, above, -6.0, -above]).unwrap();
        let q = quantize_weights(&t).unwrap();
        let idx: Vec<u32> = q.outliers().iter().map(|o| o.0).collect();
        assert_eq!(idx, vec![1, 3]);
        // requantizing the dequantized values keeps the same routing
        assert_eq!(quantize_weights(&dequantize(&q)).unwrap(), q);
    }

    #[test]
    fn non_finite_is_rejected() {
        let t = Tensor::vector(vec![1.0, f32::NAN]).unwrap();
        assert!(matches!(quantize_weights(&t), Err(Error::NonFinite(_))));
        let t = Tensor::vector(vec![f32::INFINITY]).unwrap();
        assert!(quantize_weights(&t).is_err());
    }

    #[test]
    fn uniform_unit_tensor_has_bounded_error_and_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..4096).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t = Tensor::new(vec![64, 64], data).unwrap();
        let q = quantize_weights(&t).unwrap();
        assert_eq!(q.outlier_fraction(), 0.0);
        let r = dequantize(&q);
        for (a, b) in t.data().iter().zip(r.data()) {
            let tol = (a.abs() / 8.0).max(2f32.powi(-10));
            assert!((a - b).abs() <= tol, "{a} -> {b}");
        }
        assert_eq!(quantize_weights(&r).unwrap(), q);
    }

    #[test]
    fn all_codes_match_the_decode_table() {
        let table = fp8::decode_table();
        let values: Vec<f32> = table.iter().copied().filter(|v| v.abs() <= 6.0).collect();
        let t = Tensor::vector(values.clone()).unwrap();
        let q = quantize_weights(&t).unwrap();
        for (c, v) in q.codes().iter().zip(&values) {
            assert_eq!(table[*c as usize].to_bits(), v.to_bits());
        }
    }

    #[test]
    fn block_stats_count_outliers() {
        let mut data = vec![0.0f32; 130];
        data[3] = 9.0;
        data[70] = -8.0;
        data[71] = 100.0;
        let q = quantize_weights(&Tensor::vector(data).unwrap()).unwrap();
        assert_eq!(q.block_stats().outliers_per_block, vec![1, 2, 0]);
    }
}
