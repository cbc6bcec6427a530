//! Optimization and evaluation.
//!
//! Gradients are computed one example per graph and averaged over the
//! batch; examples of a batch may run on several threads, and results are
//! always reduced in example order, so the thread count never changes the
//! numbers.

mod metrics;
mod optim;

pub use metrics::{
    classification_metrics, confusion_matrix, evaluate_metrics, macro_f1, mcc, ranks, regression_metrics, spearman,
    MetricRecord, MetricTask,
};
pub use optim::{adamw_step, AdamState, AdamWConfig};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{Binder, ParamVisit};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{trainable_mask, MaskMode, Model, TrainableMask};
use crate::quant::{dequantize, quantize_weights, QuantizedModel};
use crate::seed::{sub_seed, PRETRAIN_BATCH, SHUFFLE};
use crate::tensor::Tensor;
use crate::textpipe::{make_mlm_nsp_batch, special, BpeVocab, MaskingRule, Record};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    Mcc,
    Scc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub selection_metric: SelectionMetric,
    /// Epochs are repeated until at least this many batches ran.
    pub min_batches: usize,
    /// Hard stop on optimizer steps, if set.
    pub max_steps: Option<usize>,
    pub threads: usize,
}

impl TrainSettings {
    /// Fine-tuning: lr 3e-4, batch 32, 10 epochs, at least 1000 batches.
    pub fn fine_tune() -> Self {
        Self {
            learning_rate: 3e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 10,
            batch_size: 32,
            seed: 0,
            selection_metric: SelectionMetric::Mcc,
            min_batches: 1000,
            max_steps: None,
            threads: 1,
        }
    }

    /// One pass at lr 5e-4, batch 32.
    pub fn pretrain() -> Self {
        Self {
            learning_rate: 5e-4,
            epochs: 1,
            min_batches: 0,
            ..Self::fine_tune()
        }
    }

    /// Two epochs at lr 1e-4.
    pub fn peft() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 2,
            min_batches: 0,
            ..Self::fine_tune()
        }
    }

    /// A zero learning rate is accepted and freezes every parameter.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 || self.threads == 0 {
            return bad("epochs, batch_size and threads must be positive");
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Target {
    Class(usize),
    Score(f32),
}

/// Unpadded tokens; the model adds CLS and padding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub segments: Vec<usize>,
    pub target: Target,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub task: MetricTask,
    /// Head outputs: the class count, or 1 for regression.
    pub outputs: usize,
    pub train: Vec<Example>,
    pub val: Vec<Example>,
}

/// Tokenizes records; pairs become `A [SEP] B` with B on segment 1. Inputs
/// are cut to `max_tokens`. Class labels index into `labels`; regression
/// labels are parsed as numbers.
pub fn encode_examples(
    vocab: &BpeVocab,
    records: &[Record],
    task: MetricTask,
    labels: &[String],
    max_tokens: usize,
) -> Result<Vec<Example>> {
    records
        .iter()
        .map(|r| {
            let mut tokens = vocab.encode(&r.text);
            let mut segments = vec![0; tokens.len()];
            if let Some(b) = &r.text_b {
                tokens.push(special::SEP);
                segments.push(0);
                let bt = vocab.encode(b);
                segments.extend(std::iter::repeat_n(1, bt.len()));
                tokens.extend(bt);
            }
            tokens.truncate(max_tokens);
            segments.truncate(max_tokens);
            let target = match task {
                MetricTask::Classify => Target::Class(
                    labels
                        .iter()
                        .position(|l| *l == r.label)
                        .ok_or_else(|| Error::InvalidArgument(format!("unknown label `{}`", r.label)))?,
                ),
                MetricTask::Regress => Target::Score(
                    r.label
                        .parse()
                        .map_err(|_| Error::InvalidArgument(format!("label `{}` is not a number", r.label)))?,
                ),
            };
            Ok(Example {
                tokens,
                segments,
                target,
            })
        })
        .collect()
}

/// Runs `f` over `items` on up to `threads` scoped threads, keeping order.
fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let parts: Vec<Result<Vec<R>>> = std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Result<Vec<R>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

type Grads = BTreeMap<String, Vec<f32>>;

fn check_target(task: MetricTask, outputs: usize, t: &Target) -> Result<()> {
    match (task, t) {
        (MetricTask::Classify, Target::Class(c)) if *c < outputs => Ok(()),
        (MetricTask::Regress, Target::Score(_)) if outputs == 1 => Ok(()),
        _ => Err(Error::InvalidArgument(format!("target {t:?} does not fit a {task:?} head with {outputs} outputs"))),
    }
}

/// Loss and gradients of the trainable tensors for one example.
fn example_grads(model: &Model, mask: &TrainableMask, ex: &Example) -> Result<(f32, Grads)> {
    let (ids, segs) = model.prepare_input(&ex.tokens, &ex.segments)?;
    let mut g = Graph::new();
    let mut b = Binder::with(|n| mask.contains(n));
    let vars = model.bind(&mut g, &mut b)?;
    let h = model.encode(&mut g, &vars, &ids, &segs)?;
    let p = model.pool(&mut g, h)?;
    let z = model.logits(&mut g, &vars, p)?;
    let loss = match ex.target {
        Target::Class(c) => g.cross_entropy(z, &[Some(c)])?,
        Target::Score(s) => g.mse(z, &[s])?,
    };
    let value = g.value(loss).data()[0];
    let grads = g.backward(loss)?;
    let mut out = Grads::new();
    for (name, v) in b.into_trainable_vars() {
        if let Some(gr) = grads.get(v) {
            out.insert(name, gr.to_vec());
        }
    }
    Ok((value, out))
}

/// Per-example predictions: class index or regression output.
pub fn predict(model: &Model, examples: &[Example], threads: usize) -> Result<Vec<f64>> {
    par_map(examples, threads, |ex| {
        let (ids, segs) = model.prepare_input(&ex.tokens, &ex.segments)?;
        let mut g = Graph::new();
        let vars = model.bind(&mut g, &mut Binder::frozen())?;
        let h = model.encode(&mut g, &vars, &ids, &segs)?;
        let p = model.pool(&mut g, h)?;
        let z = model.logits(&mut g, &vars, p)?;
        let out = g.value(z).data();
        Ok(if out.len() == 1 {
            out[0] as f64
        } else {
            // first maximum wins ties
            let mut best = 0;
            for (i, &v) in out.iter().enumerate() {
                if v > out[best] {
                    best = i;
                }
            }
            best as f64
        })
    })
}

pub fn evaluate(model: &Model, examples: &[Example], task: MetricTask, threads: usize) -> Result<MetricRecord> {
    let pred = predict(model, examples, threads)?;
    let labels: Vec<f64> = examples
        .iter()
        .map(|e| match e.target {
            Target::Class(c) => c as f64,
            Target::Score(s) => s as f64,
        })
        .collect();
    match task {
        MetricTask::Classify => {
            let outputs = model.head.as_ref().map_or(2, |h| h.classes());
            let p: Vec<usize> = pred.iter().map(|&x| x as usize).collect();
            let t: Vec<usize> = labels.iter().map(|&x| x as usize).collect();
            classification_metrics(&p, &t, outputs)
        }
        MetricTask::Regress => regression_metrics(&pred, &labels),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryHeader {
    pub epochs_requested: usize,
    pub epochs_run: usize,
    pub batches_per_epoch: usize,
    pub min_batches: usize,
    /// True when epochs were added to reach `min_batches`.
    pub extended_for_min_batches: bool,
    pub selection_metric: SelectionMetric,
    pub trainable_params: usize,
    pub total_params: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub val: MetricRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub header: HistoryHeader,
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// The header, then one JSON object per epoch, one per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = serde_json::to_string(&serde_json::json!({ "header": self.header }))?;
        s.push('\n');
        for e in &self.epochs {
            s.push_str(&serde_json::to_string(e)?);
            s.push('\n');
        }
        Ok(s)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: Model,
    pub best_epoch: usize,
    pub best_score: f64,
    pub history: TrainHistory,
}

fn selection_score(metric: SelectionMetric, m: &MetricRecord) -> f64 {
    match metric {
        SelectionMetric::Mcc => m.mcc.unwrap_or(f64::NEG_INFINITY),
        SelectionMetric::Scc => m.scc.unwrap_or(f64::NEG_INFINITY),
    }
}

/// The shared loop: `masters` hold the trainable tensors, `materialize`
/// turns them into the model used for forward passes.
fn run_training(
    masters: &mut BTreeMap<String, Tensor>,
    materialize: &dyn Fn(&BTreeMap<String, Tensor>) -> Result<Model>,
    mask: &TrainableMask,
    data: &TaskData,
    s: &TrainSettings,
) -> Result<(BTreeMap<String, Tensor>, usize, f64, TrainHistory)> {
    s.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::InvalidArgument("training and validation splits must be non-empty".into()));
    }
    let metric_ok = matches!(
        (data.task, s.selection_metric),
        (MetricTask::Classify, SelectionMetric::Mcc) | (MetricTask::Regress, SelectionMetric::Scc)
    );
    if !metric_ok {
        return Err(Error::InvalidConfig(format!(
            "selection metric {:?} does not apply to {:?}",
            s.selection_metric, data.task
        )));
    }
    for e in data.train.iter().chain(&data.val) {
        check_target(data.task, data.outputs, &e.target)?;
    }
    let batches_per_epoch = data.train.len().div_ceil(s.batch_size);
    let epochs_run = s.epochs.max(s.min_batches.div_ceil(batches_per_epoch));
    let opt = s.optimizer();
    let mut states: BTreeMap<String, AdamState> =
        masters.iter().map(|(n, t)| (n.clone(), AdamState::zeros(t.numel()))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(s.seed, SHUFFLE));
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut history = TrainHistory {
        header: HistoryHeader {
            epochs_requested: s.epochs,
            epochs_run,
            batches_per_epoch,
            min_batches: s.min_batches,
            extended_for_min_batches: epochs_run > s.epochs,
            selection_metric: s.selection_metric,
            trainable_params: mask.trainable_params,
            total_params: mask.total_params,
        },
        epochs: Vec::new(),
    };
    let mut best: Option<(BTreeMap<String, Tensor>, usize, f64)> = None;
    let mut steps = 0usize;
    'epochs: for epoch in 0..epochs_run {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut loss_n) = (0.0f64, 0usize);
        for batch in order.chunks(s.batch_size) {
            if s.max_steps.is_some_and(|m| steps >= m) {
                break;
            }
            let model = materialize(masters)?;
            let examples: Vec<&Example> = batch.iter().map(|&i| &data.train[i]).collect();
            let results = par_map(&examples, s.threads, |ex| example_grads(&model, mask, ex))?;
            let scale = 1.0 / results.len() as f32;
            let mut total = Grads::new();
            for (loss, grads) in results {
                loss_sum += loss as f64;
                loss_n += 1;
                for (n, g) in grads {
                    let acc = total.entry(n).or_insert_with(|| vec![0.0; g.len()]);
                    for (a, x) in acc.iter_mut().zip(&g) {
                        *a += x * scale;
                    }
                }
            }
            for (n, t) in masters.iter_mut() {
                let zero;
                let g = match total.get(n) {
                    Some(g) => g.as_slice(),
                    None => {
                        zero = vec![0.0; t.numel()];
                        &zero
                    }
                };
                adamw_step(t.data_mut(), g, states.get_mut(n).expect("state per master"), &opt)?;
            }
            steps += 1;
        }
        let model = materialize(masters)?;
        let val = evaluate(&model, &data.val, data.task, s.threads)?;
        let score = selection_score(s.selection_metric, &val);
        if best.as_ref().is_none_or(|b| score > b.2) {
            best = Some((masters.clone(), epoch, score));
        }
        history.epochs.push(EpochRecord {
            epoch,
            steps,
            train_loss: if loss_n > 0 { loss_sum / loss_n as f64 } else { 0.0 },
            val,
        });
        if s.max_steps.is_some_and(|m| steps >= m) {
            break 'epochs;
        }
    }
    let (m, e, sc) = best.expect("at least one epoch ran");
    Ok((m, e, sc, history))
}

fn masters_of(model: &Model, mask: &TrainableMask) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    model.visit(&mut |n, t| {
        if mask.contains(n) {
            out.insert(n.to_string(), t.clone());
        }
    });
    out
}

/// Fine-tunes the masked tensors and keeps the epoch with the best
/// validation score.
pub fn train_classifier(model: &Model, data: &TaskData, s: &TrainSettings, mask: &TrainableMask) -> Result<TrainOutcome> {
    let head = model
        .head
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("model needs a head before training".into()))?;
    if head.classes() != data.outputs {
        return Err(Error::InvalidArgument(format!(
            "head has {} outputs, task needs {}",
            head.classes(),
            data.outputs
        )));
    }
    let mut masters = masters_of(model, mask);
    let materialize = |m: &BTreeMap<String, Tensor>| {
        let mut out = model.clone();
        for (n, t) in m {
            out.set_tensor(n, t.clone())?;
        }
        Ok(out)
    };
    let (best, best_epoch, best_score, history) = run_training(&mut masters, &materialize, mask, data, s)?;
    Ok(TrainOutcome {
        best: materialize(&best)?,
        best_epoch,
        best_score,
        history,
    })
}

fn fake_quant(t: &Tensor) -> Result<Tensor> {
    Ok(dequantize(&quantize_weights(t)?))
}

#[derive(Clone, Debug)]
pub struct PeftOutcome {
    pub model: QuantizedModel,
    pub best_epoch: usize,
    pub best_score: f64,
    pub history: TrainHistory,
}

/// Fine-tunes the PEFT subset of a quantized model. Forward passes use the
/// dequantized frozen weights and the fake-quantized FP32 masters of the
/// trainable tensors; gradients pass straight through the rounding. Only
/// the trainable tensors are re-quantized at the end.
pub fn train_peft_quantized(q: &QuantizedModel, data: &TaskData, s: &TrainSettings) -> Result<PeftOutcome> {
    let base = q.dequantize()?;
    if base.head.as_ref().map(|h| h.classes()) != Some(data.outputs) {
        return Err(Error::InvalidArgument("quantized model head does not match the task".into()));
    }
    let mask = trainable_mask(&base, MaskMode::Peft);
    let mut masters = masters_of(&base, &mask);
    let materialize = |m: &BTreeMap<String, Tensor>| {
        let mut out = base.clone();
        for (n, t) in m {
            out.set_tensor(n, fake_quant(t)?)?;
        }
        Ok(out)
    };
    let (best, best_epoch, best_score, history) = run_training(&mut masters, &materialize, &mask, data, s)?;
    let mut model = q.clone();
    for (n, t) in &best {
        model.replace(n, quantize_weights(t)?)?;
    }
    Ok(PeftOutcome {
        model,
        best_epoch,
        best_score,
        history,
    })
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub model: Model,
    pub steps: usize,
    /// Mean joint loss per step.
    pub losses: Vec<f32>,
    pub nsp_losses: Vec<f32>,
}

/// Joint MLM + NSP pretraining, one pass over `sentences` (consecutive,
/// encoded sentences). Token prediction reuses the embedding tables; the
/// NSP head starts at zero and is discarded afterwards.
pub fn pretrain_mlm_nsp(
    model: &Model,
    sentences: &[Vec<usize>],
    s: &TrainSettings,
    rule: MaskingRule,
) -> Result<PretrainOutcome> {
    s.validate()?;
    if model.config.arch.is_embedder_only() {
        return Err(Error::Unsupported(format!(
            "{} has no encoder to pretrain with MLM/NSP",
            model.config.arch
        )));
    }
    let c = &model.config;
    let mut work = model.clone();
    work.head = None;
    let mut nsp_w = Tensor::zeros(&[c.d, 2]);
    let mut nsp_b = Tensor::zeros(&[2]);
    let all = trainable_mask(&work, MaskMode::All);
    let mut states: BTreeMap<String, AdamState> = BTreeMap::new();
    work.visit(&mut |n, t| {
        states.insert(n.to_string(), AdamState::zeros(t.numel()));
    });
    let mut nsp_states = (AdamState::zeros(2 * c.d), AdamState::zeros(2));
    let opt = s.optimizer();
    let steps = sentences.len().div_ceil(s.batch_size).max(1) * s.epochs;
    let (mut losses, mut nsp_losses) = (Vec::new(), Vec::new());
    for step in 0..steps {
        let batch = make_mlm_nsp_batch(
            sentences,
            c.v,
            c.seq_len,
            s.batch_size,
            rule,
            sub_seed(s.seed, PRETRAIN_BATCH + step as u64),
        )?;
        let rows: Vec<usize> = (0..batch.len()).collect();
        let model_ref = &work;
        let (w_ref, b_ref) = (&nsp_w, &nsp_b);
        let results = par_map(&rows, s.threads, |&r| {
            let mut g = Graph::new();
            let mut binder = Binder::with(|n| all.contains(n));
            let vars = model_ref.bind(&mut g, &mut binder)?;
            let wv = g.param(w_ref.clone())?;
            let bv = g.param(b_ref.clone())?;
            let h = model_ref.encode(&mut g, &vars, &batch.ids[r], &batch.segments[r])?;
            let cls = g.select_row(h, 0)?;
            let z = g.matmul(cls, wv)?;
            let z = g.add_bias(z, bv)?;
            let nsp = g.cross_entropy(z, &[Some(batch.nsp[r])])?;
            let nsp_value = g.value(nsp).data()[0];
            let loss = if batch.masked[r].is_empty() {
                nsp
            } else {
                let logits = model_ref.mlm_logits(&mut g, &vars, h)?;
                let mlm = g.cross_entropy(logits, &batch.targets(r))?;
                g.add(mlm, nsp)?
            };
            let value = g.value(loss).data()[0];
            let grads = g.backward(loss)?;
            let mut out = Grads::new();
            for (n, v) in binder.into_trainable_vars() {
                if let Some(gr) = grads.get(v) {
                    out.insert(n, gr.to_vec());
                }
            }
            let gw = grads.get(wv).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; 2 * c.d]);
            let gb = grads.get(bv).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; 2]);
            Ok((value, nsp_value, out, gw, gb))
        })?;
        let scale = 1.0 / results.len() as f32;
        let mut total = Grads::new();
        let mut gw_total = vec![0.0; 2 * c.d];
        let mut gb_total = vec![0.0; 2];
        let (mut loss, mut nsp_loss) = (0.0f32, 0.0f32);
        for (l, nl, grads, gw, gb) in results {
            loss += l * scale;
            nsp_loss += nl * scale;
            for (n, g) in grads {
                let acc = total.entry(n).or_insert_with(|| vec![0.0; g.len()]);
                for (a, x) in acc.iter_mut().zip(&g) {
                    *a += x * scale;
                }
            }
            for (a, x) in gw_total.iter_mut().zip(&gw) {
                *a += x * scale;
            }
            for (a, x) in gb_total.iter_mut().zip(&gb) {
                *a += x * scale;
            }
        }
        let mut err = None;
        work.visit_mut(&mut |n, t| {
            if err.is_some() {
                return;
            }
            let zero;
            let g = match total.get(n) {
                Some(g) => g.as_slice(),
                None => {
                    zero = vec![0.0; t.numel()];
                    &zero
                }
            };
            if let Err(e) = adamw_step(t.data_mut(), g, states.get_mut(n).expect("state per tensor"), &opt) {
                err = Some(e);
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        adamw_step(nsp_w.data_mut(), &gw_total, &mut nsp_states.0, &opt)?;
        adamw_step(nsp_b.data_mut(), &gb_total, &mut nsp_states.1, &opt)?;
        losses.push(loss);
        nsp_losses.push(nsp_loss);
    }
    work.head = model.head.clone();
    Ok(PretrainOutcome {
        model: work,
        steps,
        losses,
        nsp_losses,
    })
}
