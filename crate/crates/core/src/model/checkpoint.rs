//! Binary checkpoint container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "TLMK" | u32 version | u32 len, config text | u32 record count
//! record: u32 len, name | u32 rank | u32 extent × rank | u8 precision tag | payload
//! ```
//!
//! FP32 payloads are raw `f32`s and FP16 payloads raw half bits. An FP8
//! payload is `u32 outlier count`, then `(u32 index, u16 half bits)` pairs,
//! then one code byte per non-outlier element.

use std::path::Path;

use half::f16;

use super::{Model, ModelConfig};
use crate::blocks::ParamVisit;
use crate::error::{Error, Result};
use crate::quant::QuantizedTensor;
use crate::tensor::{Precision, Tensor};

const MAGIC: &[u8; 4] = b"TLMK";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum RecordPayload {
    Fp32(Tensor),
    /// Values on the FP16 grid, widened.
    Fp16(Tensor),
    Fp8(QuantizedTensor),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub payload: RecordPayload,
}

impl RecordPayload {
    pub fn shape(&self) -> &[usize] {
        match self {
            RecordPayload::Fp32(t) | RecordPayload::Fp16(t) => t.shape(),
            RecordPayload::Fp8(q) => q.shape(),
        }
    }

    pub fn precision(&self) -> Precision {
        match self {
            RecordPayload::Fp32(_) => Precision::Fp32,
            RecordPayload::Fp16(_) => Precision::Fp16,
            RecordPayload::Fp8(_) => Precision::Fp8,
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

pub fn write_checkpoint(config: &ModelConfig, records: &[Record]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_str(&mut out, &config.to_text())?;
    put_u32(&mut out, records.len())?;
    for r in records {
        put_str(&mut out, &r.name)?;
        let shape = r.payload.shape();
        put_u32(&mut out, shape.len())?;
        for &e in shape {
            put_u32(&mut out, e)?;
        }
        out.push(r.payload.precision().tag());
        match &r.payload {
            RecordPayload::Fp32(t) => {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            RecordPayload::Fp16(t) => {
                for &v in t.data() {
                    out.extend_from_slice(&f16::from_f32(v).to_bits().to_le_bytes());
                }
            }
            RecordPayload::Fp8(q) => {
                put_u32(&mut out, q.outliers().len())?;
                for &(i, bits) in q.outliers() {
                    out.extend_from_slice(&i.to_le_bytes());
                    out.extend_from_slice(&bits.to_le_bytes());
                }
                out.extend_from_slice(q.codes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("string is not UTF-8".into()))
    }
}

/// Parses a container without interpreting the records.
pub fn read_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, Vec<Record>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let config = ModelConfig::from_text(&r.string()?)?;
    let count = r.u32()?;
    let mut records = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()?;
        if rank == 0 || rank > 4 {
            return Err(Error::Format(format!("record `{name}` has rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .filter(|&n| n > 0 && n <= bytes.len())
            .ok_or_else(|| Error::Format(format!("record `{name}` has bad shape {shape:?}")))?;
        let tag = r.take(1)?[0];
        let precision =
            Precision::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown precision tag {tag}")))?;
        let payload = match precision {
            Precision::Fp32 => {
                let data = r
                    .take(4 * n)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                RecordPayload::Fp32(Tensor::new(shape, data)?)
            }
            Precision::Fp16 => {
                let data = (0..n).map(|_| r.u16().map(|b| f16::from_bits(b).to_f32())).collect::<Result<_>>()?;
                RecordPayload::Fp16(Tensor::new(shape, data)?.to_precision(Precision::Fp16)?)
            }
            Precision::Fp8 => {
                let k = r.u32()?;
                if k > n {
                    return Err(Error::Format(format!("record `{name}` has {k} outliers for {n} elements")));
                }
                let outliers = (0..k).map(|_| Ok((r.u32()? as u32, r.u16()?))).collect::<Result<Vec<_>>>()?;
                let codes = r.take(n - k)?.to_vec();
                RecordPayload::Fp8(QuantizedTensor::from_parts(shape, codes, outliers)?)
            }
        };
        records.push(Record { name, payload });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((config, records))
}

/// Name of the FP32 record holding a frozen layer's `(λ_EA, λ_CS)`.
pub(crate) fn frozen_lambda_name(layer: usize) -> String {
    format!("layers.{layer}.lambdas.frozen")
}

impl Model {
    /// FP32 records for every tensor, plus frozen λ pairs.
    pub fn to_records(&self) -> Vec<Record> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| {
            out.push(Record {
                name: n.to_string(),
                payload: RecordPayload::Fp32(t.clone()),
            })
        });
        out.extend(self.frozen_lambda_records());
        out
    }

    pub(crate) fn frozen_lambda_records(&self) -> Vec<Record> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            if let super::Layer::Efficient(p) = l {
                if p.lambdas.is_frozen() {
                    let (ea, cs) = p.lambdas.values();
                    out.push(Record {
                        name: frozen_lambda_name(i),
                        payload: RecordPayload::Fp32(Tensor::vector(vec![ea, cs]).expect("two values")),
                    });
                }
            }
        }
        out
    }

    /// Rebuilds a model from plain tensors; every model tensor must be
    /// present exactly once. The head is recreated when records carry one.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Model> {
        let mut model = super::build_model(config, 0)?;
        let mut head_classes = None;
        for (n, t) in &tensors {
            if n == "head.bias" {
                head_classes = Some(t.numel());
            }
        }
        if let Some(c) = head_classes {
            model.head = Some(super::Head::zeros(config.d, c));
        }
        let mut expected: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
        model.visit(&mut |n, _| {
            expected.insert(n.to_string());
        });
        for (n, t) in tensors {
            if let Some(rest) = n.strip_prefix("layers.").and_then(|r| r.strip_suffix(".lambdas.frozen")) {
                let i: usize = rest
                    .parse()
                    .map_err(|_| Error::Format(format!("bad frozen lambda record `{n}`")))?;
                match (model.layers.get_mut(i), t.data()) {
                    (Some(super::Layer::Efficient(p)), &[ea, cs]) => p.lambdas.set_frozen(Some((ea, cs))),
                    _ => return Err(Error::Format(format!("bad frozen lambda record `{n}`"))),
                }
                continue;
            }
            if !expected.remove(&n) {
                return Err(Error::Format(format!("unexpected or duplicate tensor `{n}`")));
            }
            model
                .set_tensor(&n, t.widen())
                .map_err(|e| Error::Format(format!("tensor `{n}`: {e}")))?;
        }
        if let Some(missing) = expected.into_iter().next() {
            return Err(Error::Format(format!("missing tensor `{missing}`")));
        }
        Ok(model)
    }
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, write_checkpoint(&model.config, &model.to_records())?)?;
    Ok(())
}

/// Loads an FP32 or quantized container as a full-precision model; FP8
/// records are dequantized.
pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let (config, records) = read_checkpoint(&std::fs::read(path)?)?;
    let tensors = records
        .into_iter()
        .map(|r| {
            let t = match r.payload {
                RecordPayload::Fp32(t) | RecordPayload::Fp16(t) => t,
                RecordPayload::Fp8(q) => crate::quant::dequantize(&q),
            };
            (r.name, t)
        })
        .collect();
    Model::from_tensors(&config, tensors)
}
