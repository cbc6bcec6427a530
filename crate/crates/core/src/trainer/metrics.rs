use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricTask {
    Classify,
    Regress,
}

/// Metrics of one evaluation; fields not produced by the task are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    pub mcc: Option<f64>,
    pub confusion: Option<Vec<Vec<u64>>>,
    pub scc: Option<f64>,
    pub mean_loss: Option<f64>,
}

/// `confusion[true][pred]`.
pub fn confusion_matrix(pred: &[usize], labels: &[usize], classes: usize) -> Result<Vec<Vec<u64>>> {
    if pred.len() != labels.len() {
        return Err(Error::LengthMismatch(pred.len(), labels.len()));
    }
    let mut m = vec![vec![0u64; classes]; classes];
    for (&p, &t) in pred.iter().zip(labels) {
        if p >= classes || t >= classes {
            return Err(Error::InvalidArgument(format!("class id out of range for {classes} classes")));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

/// Generalized MCC over a confusion matrix; 0 when the denominator vanishes.
pub fn mcc(confusion: &[Vec<u64>]) -> f64 {
    let k = confusion.len();
    let s: f64 = confusion.iter().flatten().map(|&x| x as f64).sum();
    let c: f64 = (0..k).map(|i| confusion[i][i] as f64).sum();
    let t: Vec<f64> = (0..k).map(|i| confusion[i].iter().sum::<u64>() as f64).collect();
    let p: Vec<f64> = (0..k).map(|j| confusion.iter().map(|r| r[j]).sum::<u64>() as f64).collect();
    let pt: f64 = p.iter().zip(&t).map(|(a, b)| a * b).sum();
    let pp: f64 = p.iter().map(|x| x * x).sum();
    let tt: f64 = t.iter().map(|x| x * x).sum();
    let den = ((s * s - pp) * (s * s - tt)).sqrt();
    if den == 0.0 {
        0.0
    } else {
        (c * s - pt) / den
    }
}

/// Unweighted mean of per-class F1; classes absent from both sides count as 0.
pub fn macro_f1(confusion: &[Vec<u64>]) -> f64 {
    let k = confusion.len();
    let mut total = 0.0;
    for i in 0..k {
        let tp = confusion[i][i] as f64;
        let fp: f64 = (0..k).filter(|&r| r != i).map(|r| confusion[r][i] as f64).sum();
        let fn_: f64 = (0..k).filter(|&c| c != i).map(|c| confusion[i][c] as f64).sum();
        let den = 2.0 * tp + fp + fn_;
        if den > 0.0 {
            total += 2.0 * tp / den;
        }
    }
    total / k as f64
}

/// Average ranks, 1-based, ties sharing the mean of their positions.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    let den = (saa * sbb).sqrt();
    if den == 0.0 {
        0.0
    } else {
        sab / den
    }
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Ok(0.0);
    }
    Ok(pearson(&ranks(a), &ranks(b)))
}

pub fn classification_metrics(pred: &[usize], labels: &[usize], classes: usize) -> Result<MetricRecord> {
    let conf = confusion_matrix(pred, labels, classes)?;
    let correct = pred.iter().zip(labels).filter(|(p, t)| p == t).count();
    Ok(MetricRecord {
        accuracy: Some(if pred.is_empty() { 0.0 } else { correct as f64 / pred.len() as f64 }),
        macro_f1: Some(macro_f1(&conf)),
        mcc: Some(mcc(&conf)),
        confusion: Some(conf),
        ..Default::default()
    })
}

/// SCC and mean squared error.
pub fn regression_metrics(pred: &[f64], labels: &[f64]) -> Result<MetricRecord> {
    let scc = spearman(pred, labels)?;
    let mse = pred.iter().zip(labels).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len().max(1) as f64;
    Ok(MetricRecord {
        scc: Some(scc),
        mean_loss: Some(mse),
        ..Default::default()
    })
}

/// Classification inputs must hold non-negative integers.
pub fn evaluate_metrics(pred: &[f64], labels: &[f64], task: MetricTask) -> Result<MetricRecord> {
    if pred.len() != labels.len() {
        return Err(Error::LengthMismatch(pred.len(), labels.len()));
    }
    match task {
        MetricTask::Regress => regression_metrics(pred, labels),
        MetricTask::Classify => {
            let to_class = |x: &f64| {
                if x.fract() == 0.0 && *x >= 0.0 {
                    Ok(*x as usize)
                } else {
                    Err(Error::InvalidArgument(format!("class label {x} is not a non-negative integer")))
                }
            };
            let p: Vec<usize> = pred.iter().map(to_class).collect::<Result<_>>()?;
            let t: Vec<usize> = labels.iter().map(to_class).collect::<Result<_>>()?;
            let classes = p.iter().chain(&t).copied().max().map_or(1, |m| m + 1).max(2);
            classification_metrics(&p, &t, classes)
        }
    }
}
