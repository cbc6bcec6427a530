//! Saves and reloads FP32 and quantized checkpoints.

use tlmk::model::{build_model, load_checkpoint, save_checkpoint, ModelConfig};
use tlmk::quant::{quantize_model, QuantizedModel};

fn main() -> tlmk::Result<()> {
    let dir = std::env::temp_dir();
    let mut model = build_model(&ModelConfig::bert_2mb(), 0)?;
    model.attach_head(4, 1)?;

    let fp32 = dir.join("tlmk-example.ckpt");
    save_checkpoint(&model, &fp32)?;
    let back = load_checkpoint(&fp32)?;
    let tokens = [10, 20, 30, 40];
    assert!(model.forward_classify(&tokens, &[], 4)?.bit_eq(&back.forward_classify(&tokens, &[], 4)?));
    println!("{}: {} bytes", fp32.display(), std::fs::metadata(&fp32)?.len());

    let q8 = dir.join("tlmk-example.q8");
    quantize_model(&model)?.save(&q8)?;
    let q = QuantizedModel::load(&q8)?;
    println!("{}: {} bytes, {} weight bytes", q8.display(), std::fs::metadata(&q8)?.len(), q.weight_bytes());
    Ok(())
}
