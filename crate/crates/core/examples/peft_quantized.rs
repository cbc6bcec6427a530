//! Quantizes a trained backbone, then fine-tunes only the head, norms and
//! λ vectors.
//! The frozen FP8 payloads are left exactly as they were.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tlmk::model::{build_model, trainable_mask, Arch, MaskMode, ModelConfig};
use tlmk::quant::quantize_model;
use tlmk::trainer::{evaluate, train_classifier, train_peft_quantized, Example, MetricTask, TaskData, Target, TrainSettings};

fn examples(n: usize, rng: &mut ChaCha8Rng) -> Vec<Example> {
    (0..n)
        .map(|i| {
            let mut tokens: Vec<usize> = (0..10).map(|_| rng.gen_range(8..64)).collect();
            if i % 2 == 1 {
                tokens[rng.gen_range(0..10)] = 7;
            }
            Example { segments: vec![0; 10], tokens, target: Target::Class(i % 2) }
        })
        .collect()
}

fn main() -> tlmk::Result<()> {
    let config = ModelConfig { arch: Arch::EmbBert, v: 64, seq_len: 16, d: 16, r_d: Some(8), k: Some(4), layers: 2, ..ModelConfig::embbert_q() };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let data = TaskData { task: MetricTask::Classify, outputs: 2, train: examples(192, &mut rng), val: examples(64, &mut rng) };

    // a backbone that already knows the task, then a fresh head
    let mut model = build_model(&config, 5)?;
    model.attach_head(2, 6)?;
    let full = TrainSettings { learning_rate: 1e-2, epochs: 6, batch_size: 16, min_batches: 0, ..TrainSettings::fine_tune() };
    let mut model = train_classifier(&model, &data, &full, &trainable_mask(&model, MaskMode::All))?.best;
    model.attach_head(2, 8)?;
    println!("fresh head: val MCC {:.3}", evaluate(&model, &data.val, MetricTask::Classify, 1)?.mcc.unwrap());

    let mask = trainable_mask(&model, MaskMode::Peft);
    println!("trainable {} of {} ({:.1}%)", mask.trainable_params, mask.total_params, 100.0 * mask.fraction());

    let q = quantize_model(&model)?;
    let settings = TrainSettings { learning_rate: 1e-2, epochs: 4, batch_size: 16, ..TrainSettings::peft() };
    let out = train_peft_quantized(&q, &data, &settings)?;
    println!("after PEFT: best epoch {} (MCC {:.3})", out.best_epoch, out.best_score);

    let frozen: Vec<_> = q.quantized.iter().filter(|(n, _)| !mask.contains(n)).collect();
    let untouched = frozen.iter().filter(|(n, t)| out.model.get(n) == Some(t)).count();
    println!("{untouched} of {} frozen quantized tensors unchanged", frozen.len());
    Ok(())
}
