use std::path::Path;

use serde::Serialize;

use super::{dequantize, quantize_weights, QuantizedTensor};
use crate::blocks::ParamVisit;
use crate::error::{Error, Result};
use crate::model::{is_accounted, read_checkpoint, write_checkpoint, Model, ModelConfig, Record, RecordPayload};
use crate::tensor::{Precision, Tensor};

/// A model with every tensor stored as FP8 codes plus FP16 outliers. Only
/// precomputed λ pairs stay in FP32.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModel {
    pub config: ModelConfig,
    pub quantized: Vec<(String, QuantizedTensor)>,
    pub fp32: Vec<(String, Tensor)>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorQuantStats {
    pub name: String,
    pub elements: usize,
    pub outliers: usize,
    pub bytes: usize,
    pub accounted: bool,
    pub max_outliers_per_block: u32,
}

pub fn quantize_model(model: &Model) -> Result<QuantizedModel> {
    let mut quantized = Vec::new();
    let mut err = None;
    model.visit(&mut |n, t| {
        if err.is_some() {
            return;
        }
        match quantize_weights(t) {
            Ok(q) => quantized.push((n.to_string(), q)),
            Err(e) => err = Some(e),
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    let fp32 = model
        .frozen_lambda_records()
        .into_iter()
        .map(|r| match r.payload {
            RecordPayload::Fp32(t) => (r.name, t),
            _ => unreachable!("frozen lambdas are FP32"),
        })
        .collect();
    Ok(QuantizedModel {
        config: model.config.clone(),
        quantized,
        fp32,
    })
}

/// Memory of a quantized model: codes at one byte, outliers at two, and the
/// activation peak held in FP16.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QuantizedMemoryReport {
    pub w_total: u64,
    pub outliers: u64,
    pub outlier_fraction: f64,
    pub weight_bytes: u64,
    pub a_peak: u64,
    pub activation_bytes: u64,
    pub bytes_total: u64,
    /// Same model with FP32 weights and activations.
    pub fp32_bytes: u64,
    pub reduction: f64,
}

pub fn quantized_memory(q: &QuantizedModel) -> Result<QuantizedMemoryReport> {
    if let Some((n, _)) = q.fp32.iter().find(|(n, _)| !n.ends_with(".lambdas.frozen")) {
        return Err(Error::InvalidArgument(format!("unquantized parameter `{n}`")));
    }
    let analytic = crate::analyzer::model_memory(&q.config)?;
    let (mut w_total, mut outliers, mut weight_bytes) = (0u64, 0u64, 0u64);
    for (_, t) in q.quantized.iter().filter(|(n, _)| is_accounted(n)) {
        w_total += t.numel() as u64;
        outliers += t.outliers().len() as u64;
        weight_bytes += t.bytes() as u64;
    }
    let activation_bytes = 2 * analytic.a_peak;
    let bytes_total = weight_bytes + activation_bytes;
    let fp32_bytes = 4 * (w_total + analytic.a_peak);
    Ok(QuantizedMemoryReport {
        w_total,
        outliers,
        outlier_fraction: outliers as f64 / w_total.max(1) as f64,
        weight_bytes,
        a_peak: analytic.a_peak,
        activation_bytes,
        bytes_total,
        fp32_bytes,
        reduction: fp32_bytes as f64 / bytes_total as f64,
    })
}

impl QuantizedModel {
    pub fn weight_bytes(&self) -> usize {
        self.quantized
            .iter()
            .filter(|(n, _)| is_accounted(n))
            .map(|(_, q)| q.bytes())
            .sum()
    }

    pub fn outlier_fraction(&self) -> f64 {
        let (mut o, mut n) = (0usize, 0usize);
        for (_, q) in &self.quantized {
            o += q.outliers().len();
            n += q.numel();
        }
        o as f64 / n as f64
    }

    pub fn stats(&self) -> Vec<TensorQuantStats> {
        self.quantized
            .iter()
            .map(|(n, q)| TensorQuantStats {
                name: n.clone(),
                elements: q.numel(),
                outliers: q.outliers().len(),
                bytes: q.bytes(),
                accounted: is_accounted(n),
                max_outliers_per_block: q.block_stats().outliers_per_block.into_iter().max().unwrap_or(0),
            })
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<&QuantizedTensor> {
        self.quantized.iter().find(|(n, _)| n == name).map(|(_, q)| q)
    }

    pub fn replace(&mut self, name: &str, q: QuantizedTensor) -> Result<()> {
        let slot = self
            .quantized
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::InvalidArgument(format!("no quantized tensor `{name}`")))?;
        if slot.1.shape() != q.shape() {
            return Err(Error::ShapeMismatch {
                op: "replace",
                lhs: slot.1.shape().to_vec(),
                rhs: q.shape().to_vec(),
            });
        }
        slot.1 = q;
        Ok(())
    }

    /// FP32 model with dequantized weights, used for inference and PEFT.
    pub fn dequantize(&self) -> Result<Model> {
        let tensors = self
            .quantized
            .iter()
            .map(|(n, q)| (n.clone(), dequantize(q)))
            .chain(self.fp32.iter().cloned())
            .collect();
        Model::from_tensors(&self.config, tensors)
    }

    pub fn to_records(&self) -> Vec<Record> {
        self.quantized
            .iter()
            .map(|(n, q)| Record {
                name: n.clone(),
                payload: RecordPayload::Fp8(q.clone()),
            })
            .chain(self.fp32.iter().map(|(n, t)| Record {
                name: n.clone(),
                payload: RecordPayload::Fp32(t.clone()),
            }))
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        write_checkpoint(&self.config, &self.to_records())
    }

    /// Accepts only containers whose records are all FP8, apart from
    /// frozen λ pairs.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (config, records) = read_checkpoint(bytes)?;
        let mut out = QuantizedModel {
            config,
            quantized: Vec::new(),
            fp32: Vec::new(),
        };
        for r in records {
            match r.payload {
                RecordPayload::Fp8(q) => out.quantized.push((r.name, q)),
                RecordPayload::Fp32(t) if r.name.ends_with(".lambdas.frozen") => out.fp32.push((r.name, t)),
                p => {
                    return Err(Error::Format(format!(
                        "record `{}` is {:?} in a quantized container",
                        r.name,
                        p.precision()
                    )))
                }
            }
        }
        // structural check: names and shapes must form a valid model
        out.dequantize()?;
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// True when every record of a container is stored below FP32.
pub fn is_quantized_container(bytes: &[u8]) -> Result<bool> {
    let (_, records) = read_checkpoint(bytes)?;
    Ok(records
        .iter()
        .all(|r| r.payload.precision() == Precision::Fp8 || r.name.ends_with(".lambdas.frozen")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    fn small() -> ModelConfig {
        let mut c = ModelConfig::embbert_q();
        c.v = 50;
        c.seq_len = 10;
        c.d = 8;
        c.r_d = Some(2);
        c.k = Some(3);
        c.layers = 1;
        c
    }

    #[test]
    fn embbert_q_memory_with_no_outliers() {
        let m = build_model(&ModelConfig::embbert_q(), 2).unwrap();
        let q = quantize_model(&m).unwrap();
        assert_eq!(q.outlier_fraction(), 0.0);
        assert_eq!(q.weight_bytes(), 353_536);
        let r = quantized_memory(&q).unwrap();
        assert_eq!((r.a_peak, r.bytes_total, r.fp32_bytes), (131_072, 615_680, 1_938_432));
        assert!(r.reduction > 3.0);
        let mut bad = q.clone();
        bad.fp32.push(("layers.0.attn.w1".into(), Tensor::zeros(&[1])));
        assert!(quantized_memory(&bad).is_err());
    }

    #[test]
    fn outliers_cost_two_bytes() {
        let mut m = build_model(&small(), 2).unwrap();
        let mut w = m.tensor("layers.0.attn.w1").unwrap();
        w.data_mut()[3] = 9.0;
        w.data_mut()[60] = -100.0;
        m.set_tensor("layers.0.attn.w1", w).unwrap();
        let q = quantize_model(&m).unwrap();
        assert_eq!(q.weight_bytes(), m.weight_count() + 2);
        let back = q.dequantize().unwrap();
        let w = back.tensor("layers.0.attn.w1").unwrap();
        assert_eq!(w.data()[3], 9.0);
        assert_eq!(w.data()[60], -100.0);
        let s = q.stats().into_iter().find(|s| s.name == "layers.0.attn.w1").unwrap();
        // 8×8 is a single block
        assert_eq!((s.outliers, s.max_outliers_per_block), (2, 2));
    }

    #[test]
    fn container_round_trip_is_byte_stable() {
        let mut m = build_model(&small(), 8).unwrap();
        m.attach_head(2, 8).unwrap();
        m.freeze_lambdas().unwrap();
        let q = quantize_model(&m).unwrap();
        let bytes = q.to_bytes().unwrap();
        assert!(is_quantized_container(&bytes).unwrap());
        let back = QuantizedModel::from_bytes(&bytes).unwrap();
        assert_eq!(back, q);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        // requantizing the dequantized model reproduces every code
        let again = quantize_model(&back.dequantize().unwrap()).unwrap();
        assert_eq!(again, q);
        let fp32 = write_checkpoint(&m.config, &m.to_records()).unwrap();
        assert!(QuantizedModel::from_bytes(&fp32).is_err());
    }
}
