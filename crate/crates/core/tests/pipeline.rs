mod common;

use tlmk::model::{build_model, load_checkpoint, save_checkpoint, trainable_mask, MaskMode, ModelConfig};
use tlmk::quant::{quantize_model, QuantizedModel};
use tlmk::textpipe::{split_dataset, OfficialSplits, Record};
use tlmk::trainer::{predict, train_classifier, MetricTask, TaskData, TrainSettings};
use tlmk::Tensor;

fn settings() -> TrainSettings {
    TrainSettings {
        learning_rate: 1e-2,
        epochs: 6,
        batch_size: 16,
        min_batches: 0,
        seed: 3,
        ..TrainSettings::fine_tune()
    }
}

#[test]
fn checkpoint_round_trip_gives_identical_logits() {
    let mut m = build_model(&ModelConfig::embbert_q(), 1).unwrap();
    m.attach_head(3, 2).unwrap();
    m.freeze_lambdas().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    save_checkpoint(&m, &p).unwrap();
    let back = load_checkpoint(&p).unwrap();
    let tokens: Vec<usize> = (0..50).map(|i| 5 + i * 31 % 8000).collect();
    let a = m.forward_classify(&tokens, &[], 3).unwrap();
    let b = back.forward_classify(&tokens, &[], 3).unwrap();
    assert!(a.bit_eq(&b));
}

#[test]
fn quantized_container_round_trips_byte_for_byte() {
    let mut m = build_model(&common::tiny_embbert(), 4).unwrap();
    m.attach_head(2, 5).unwrap();
    let q = quantize_model(&m).unwrap();
    let bytes = q.to_bytes().unwrap();
    assert_eq!(QuantizedModel::from_bytes(&bytes).unwrap().to_bytes().unwrap(), bytes);
}

#[test]
fn quantization_keeps_confident_predictions() {
    let mut m = build_model(&common::tiny_embbert(), 6).unwrap();
    m.attach_head(2, 7).unwrap();
    let data = common::marker_task(128, 64, 8);
    let out = train_classifier(&m, &data, &settings(), &trainable_mask(&m, MaskMode::All)).unwrap();
    let deq = quantize_model(&out.best).unwrap().dequantize().unwrap();
    let mut confident = 0;
    for ex in &data.val {
        let a = out.best.forward_classify(&ex.tokens, &ex.segments, 2).unwrap();
        let margin = (a.data()[0] - a.data()[1]).abs();
        if margin > 0.5 {
            confident += 1;
            let b = deq.forward_classify(&ex.tokens, &ex.segments, 2).unwrap();
            let arg = |t: &Tensor| usize::from(t.data()[1] > t.data()[0]);
            assert_eq!(arg(&a), arg(&b));
        }
    }
    assert!(confident > data.val.len() / 2);
}

#[test]
fn permuting_head_columns_permutes_logits() {
    let mut m = build_model(&common::tiny_embbert(), 9).unwrap();
    m.attach_head(3, 10).unwrap();
    let mut p = m.clone();
    let perm = [2usize, 0, 1];
    let head = p.head.as_mut().unwrap();
    let (d, c) = head.weight.dims2();
    let w = m.head.as_ref().unwrap().weight.clone();
    let bias = vec![0.1f32, -0.2, 0.3];
    head.bias = Tensor::vector(perm.iter().map(|&j| bias[j]).collect()).unwrap();
    for i in 0..d {
        for (to, &from) in perm.iter().enumerate() {
            head.weight.data_mut()[i * c + to] = w.at(i, from);
        }
    }
    m.head.as_mut().unwrap().bias = Tensor::vector(bias).unwrap();
    let tokens = [9, 7, 33, 12];
    let a = m.forward_classify(&tokens, &[], 3).unwrap();
    let b = p.forward_classify(&tokens, &[], 3).unwrap();
    for (to, &from) in perm.iter().enumerate() {
        assert_eq!(b.data()[to].to_bits(), a.data()[from].to_bits());
    }
}

#[test]
fn full_batch_loss_does_not_increase() {
    let mut m = build_model(&common::tiny_embbert(), 11).unwrap();
    m.attach_head(2, 12).unwrap();
    let data = common::marker_task(32, 16, 13);
    let s = TrainSettings {
        learning_rate: 1e-3,
        epochs: 10,
        batch_size: data.train.len(),
        min_batches: 0,
        ..TrainSettings::fine_tune()
    };
    let out = train_classifier(&m, &data, &s, &trainable_mask(&m, MaskMode::All)).unwrap();
    let losses: Vec<f64> = out.history.epochs.iter().map(|e| e.train_loss).collect();
    assert_eq!(losses.len(), 10);
    for w in losses.windows(2) {
        assert!(w[1] <= w[0], "{losses:?}");
    }
}

#[test]
fn training_is_reproducible_for_a_seed() {
    let mut m = build_model(&common::tiny_embbert(), 14).unwrap();
    m.attach_head(2, 15).unwrap();
    let data = common::marker_task(48, 16, 16);
    let s = TrainSettings { epochs: 2, ..settings() };
    let mask = trainable_mask(&m, MaskMode::All);
    let a = train_classifier(&m, &data, &s, &mask).unwrap();
    let b = train_classifier(&m, &data, &TrainSettings { threads: 4, ..s }, &mask).unwrap();
    assert_eq!(a.history.to_jsonl().unwrap(), b.history.to_jsonl().unwrap());
    assert_eq!(predict(&a.best, &data.val, 1).unwrap(), predict(&b.best, &data.val, 1).unwrap());
}

#[test]
fn regression_task_data_rejects_class_targets() {
    let mut m = build_model(&common::tiny_embbert(), 17).unwrap();
    m.attach_regression_head(18);
    let mut data: TaskData = common::marker_task(16, 8, 19);
    data.task = MetricTask::Regress;
    data.outputs = 1;
    let s = TrainSettings {
        selection_metric: tlmk::trainer::SelectionMetric::Scc,
        ..settings()
    };
    assert!(train_classifier(&m, &data, &s, &trainable_mask(&m, MaskMode::All)).is_err());
}

#[test]
fn splits_partition_records_for_every_form() {
    let recs = |n: usize, tag: &str| -> Vec<Record> { (0..n).map(|i| Record::new("x", format!("{tag}{i}"))).collect() };
    for seed in 0..50 {
        for (input, n) in [
            (OfficialSplits::None(recs(57, "a")), 57),
            (OfficialSplits::Two(recs(12, "t"), recs(40, "b")), 52),
            (
                OfficialSplits::Three {
                    train: recs(20, "t"),
                    val: recs(5, "v"),
                    test: recs(6, "s"),
                },
                31,
            ),
        ] {
            let s = split_dataset(input, seed).unwrap();
            let mut names: Vec<String> = s.train.iter().chain(&s.val).chain(&s.test).map(|r| r.text.clone()).collect();
            assert_eq!(names.len(), n);
            names.sort();
            names.dedup();
            assert_eq!(names.len(), n, "seed {seed}: overlap");
            assert!(!s.val.is_empty() && !s.test.is_empty());
        }
    }
}
