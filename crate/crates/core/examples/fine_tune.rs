//! Fine-tunes a tiny EmbBERT on a synthetic two-class task and saves the
//! best epoch.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tlmk::model::{build_model, save_checkpoint, trainable_mask, Arch, MaskMode, ModelConfig};
use tlmk::trainer::{Example, MetricTask, TaskData, Target, TrainSettings, train_classifier};

/// Label 1 when token 7 appears.
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
    let config = ModelConfig {
        arch: Arch::EmbBert,
        v: 64,
        seq_len: 16,
        d: 16,
        r_d: Some(8),
        k: Some(4),
        layers: 1,
        ..ModelConfig::embbert_q()
    };
    let mut model = build_model(&config, 1)?;
    model.attach_head(2, 2)?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let data = TaskData {
        task: MetricTask::Classify,
        outputs: 2,
        train: examples(256, &mut rng),
        val: examples(64, &mut rng),
    };
    let settings = TrainSettings { learning_rate: 1e-2, epochs: 5, min_batches: 0, batch_size: 16, ..TrainSettings::fine_tune() };
    let out = train_classifier(&model, &data, &settings, &trainable_mask(&model, MaskMode::All))?;
    print!("{}", out.history.to_jsonl()?);
    println!("best epoch {} (MCC {:.3})", out.best_epoch, out.best_score);

    let path = std::env::temp_dir().join("tlmk-fine-tune.ckpt");
    save_checkpoint(&out.best, &path)?;
    println!("saved {}", path.display());
    Ok(())
}
