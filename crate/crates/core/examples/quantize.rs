//! FP8 weight quantization with FP16 outliers, and what it does to memory
//! and logits.

use tlmk::model::{build_model, ModelConfig};
use tlmk::quant::{quantize_model, quantized_memory};

fn main() -> tlmk::Result<()> {
    let mut model = build_model(&ModelConfig::embbert_q(), 1)?;
    model.attach_head(2, 2)?;
    // push a few weights past the FP8 range
    let mut w = model.tensor("layers.0.attn.w1").expect("layer 0 exists");
    w.data_mut()[..3].copy_from_slice(&[7.5, -9.0, 12.25]);
    model.set_tensor("layers.0.attn.w1", w)?;
    let q = quantize_model(&model)?;
    let r = quantized_memory(&q)?;
    println!("weights {}  outliers {} ({:.5})", r.w_total, r.outliers, r.outlier_fraction);
    println!("quantized {} B  fp32 {} B  reduction {:.3}x", r.bytes_total, r.fp32_bytes, r.reduction);

    let restored = q.dequantize()?;
    let tokens: Vec<usize> = (0..64).map(|i| 5 + i * 101 % 8000).collect();
    let a = model.forward_classify(&tokens, &[], 2)?;
    let b = restored.forward_classify(&tokens, &[], 2)?;
    println!("fp32 logits {:?}\nfp8 logits  {:?}", a.data(), b.data());
    Ok(())
}
