//! Masked-LM plus next-sentence pretraining on a toy corpus.

use tlmk::model::{build_model, Arch, ModelConfig};
use tlmk::textpipe::{train_bpe, MaskingRule};
use tlmk::trainer::{pretrain_mlm_nsp, TrainSettings};

const CORPUS: &str = "small models run on small chips
memory is the tightest constraint
weights and activations share the budget
attention mixes tokens across the sentence
convolutions mix neighbouring tokens
the embedder turns ids into vectors
quantization shrinks every weight to one byte
outliers keep two bytes";

fn main() -> tlmk::Result<()> {
    let vocab = train_bpe(CORPUS.lines(), 128)?;
    let sentences: Vec<Vec<usize>> = CORPUS.lines().map(|l| vocab.encode(l)).collect();
    let config = ModelConfig { arch: Arch::EmbBert, v: 128, seq_len: 48, d: 16, r_d: Some(8), k: Some(5), layers: 2, ..ModelConfig::embbert_q() };
    let model = build_model(&config, 11)?;
    let settings = TrainSettings { learning_rate: 5e-3, batch_size: 4, epochs: 30, ..TrainSettings::pretrain() };
    let out = pretrain_mlm_nsp(&model, &sentences, &settings, MaskingRule::default())?;
    for (step, (loss, nsp)) in out.losses.iter().zip(&out.nsp_losses).enumerate().step_by(10) {
        println!("step {step:>3}  loss {loss:.4}  nsp {nsp:.4}");
    }
    Ok(())
}
