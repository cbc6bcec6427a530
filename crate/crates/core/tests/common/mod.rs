//! Helpers shared by the integration tests.
#![allow(dead_code)]

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tlmk::analyzer::LayerKind;
use tlmk::model::{Arch, ModelConfig};
use tlmk::profile::OpCounters;
use tlmk::trainer::{Example, MetricTask, TaskData, Target};

fn uses_kernel(a: Arch) -> bool {
    matches!(a, Arch::EmbBert | Arch::EmbedderConv)
}

fn uses_heads(a: Arch) -> bool {
    matches!(a, Arch::BertStd | Arch::BertNe)
}

/// A small valid config of an executable arch.
pub fn random_config(rng: &mut impl Rng, arch: Arch) -> ModelConfig {
    let heads = if uses_heads(arch) { [1, 2, 4][rng.gen_range(0..3)] } else { 1 };
    let d = heads * rng.gen_range(1..=6usize);
    let c = ModelConfig {
        arch,
        v: rng.gen_range(8..=40),
        seq_len: rng.gen_range(2..=12),
        d,
        r_d: arch.uses_nano_embedder().then(|| rng.gen_range(1..=d)),
        alpha: rng.gen_range(1..=3),
        k: uses_kernel(arch).then(|| rng.gen_range(1..=5)),
        heads,
        layers: if arch.is_embedder_only() { 0 } else { rng.gen_range(1..=3) },
        d_state: None,
        rho: None,
        p_w: 4,
        p_a: 4,
    };
    c.validate().expect("generator only builds valid configs");
    c
}

/// Per-kind operation counts typed out by hand, row by row; `fold_norm` adds the normalization row.
pub fn reference_counters(kind: LayerKind, c: &ModelConfig, fold_norm: bool) -> OpCounters {
    let l = c.seq_len as u64;
    let d = c.d as u64;
    let a = c.alpha as u64;
    let h = c.heads as u64;
    let k = c.k.unwrap_or(0) as u64;
    let r = c.r_d.unwrap_or(0) as u64;
    let norm = OpCounters::new((l + 1) * d * 2, l * d, l * d);
    match kind {
        LayerKind::StdEmbedder => OpCounters::new(l * (4 * d + 2) + 2 * d, l * 2 * d, 0),
        LayerKind::NanoEmbedder => OpCounters::new(
            l * (r * 4 * d + d + 2 * r + 2) + 2 * d,
            2 * l * d * (r + 1),
            l * r * d * 2,
        ),
        LayerKind::Norm => norm,
        LayerKind::FeedForward => OpCounters::new(
            4 * l * d * (d * a + 1),
            2 * l * d * (d * a + 1),
            2 * l * d * (d * a + 1),
        ),
        LayerKind::Attention => OpCounters::new(
            8 * l * d * d + 2 * l * l * h * (2 * d + 1),
            l * d * (4 * d + 1) + l * l * h * (2 * d + 1),
            4 * l * d * d + l * l * h * (2 * d + 3),
        ),
        LayerKind::EffAttention => OpCounters::new(
            4 * l * d * d + 4 * l * l * d + 2 * l * l,
            2 * l * d * d + 2 * l * l * d + l * l + l * d,
            2 * l * d * d + 2 * l * l * d + 2 * l * l,
        ),
        LayerKind::EffDiffSkip => {
            let eds = OpCounters::new(
                l * d * d * (4 + 2 * a) + l * l * (4 * d + 2) + l * d * k * a,
                l * d * d * (2 + a) + l * l * (2 * d + 1) + l * d * (a * k + 1),
                l * d * d * (2 + a) + l * l * (2 * d + 2) + l * d * a * k,
            );
            if fold_norm {
                eds + norm
            } else {
                eds
            }
        }
        LayerKind::DepthwiseConv => OpCounters::new(l * d * k, l * d * k, l * d * k),
        other => panic!("{other} is not executable"),
    }
}

/// MCC from the covariance definition over one-hot encodings.
pub fn mcc_oracle(pred: &[usize], truth: &[usize], classes: usize) -> f64 {
    let n = pred.len() as f64;
    let onehot = |v: &[usize]| -> Vec<Vec<f64>> {
        v.iter()
            .map(|&c| (0..classes).map(|k| if k == c { 1.0 } else { 0.0 }).collect())
            .collect()
    };
    let (x, y) = (onehot(pred), onehot(truth));
    let mean = |m: &Vec<Vec<f64>>, k: usize| m.iter().map(|r| r[k]).sum::<f64>() / n;
    let cov = |p: &Vec<Vec<f64>>, q: &Vec<Vec<f64>>| -> f64 {
        (0..classes)
            .map(|k| {
                let (mp, mq) = (mean(p, k), mean(q, k));
                p.iter().zip(q).map(|(a, b)| (a[k] - mp) * (b[k] - mq)).sum::<f64>()
            })
            .sum()
    };
    let den = (cov(&x, &x) * cov(&y, &y)).sqrt();
    if den == 0.0 {
        0.0
    } else {
        cov(&x, &y) / den
    }
}

/// Average ranks by counting, then Pearson correlation.
pub fn scc_oracle(a: &[f64], b: &[f64]) -> f64 {
    let rank = |v: &[f64]| -> Vec<f64> {
        v.iter()
            .map(|&x| {
                let less = v.iter().filter(|&&y| y < x).count() as f64;
                let equal = v.iter().filter(|&&y| y == x).count() as f64;
                less + (equal + 1.0) / 2.0
            })
            .collect()
    };
    let (ra, rb) = (rank(a), rank(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}

pub fn tiny_embbert() -> ModelConfig {
    ModelConfig {
        arch: Arch::EmbBert,
        v: 64,
        seq_len: 16,
        d: 16,
        r_d: Some(8),
        alpha: 1,
        k: Some(4),
        heads: 1,
        layers: 1,
        d_state: None,
        rho: None,
        p_w: 4,
        p_a: 4,
    }
}

/// Two classes: class 1 iff the marker token 7 occurs among random filler.
pub fn marker_examples(n: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = rng.gen_range(4..=12);
            let mut tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(8..64)).collect();
            let c = i % 2;
            if c == 1 {
                let p = rng.gen_range(0..len);
                tokens[p] = 7;
            }
            Example {
                segments: vec![0; len],
                tokens,
                target: Target::Class(c),
            }
        })
        .collect()
}

pub fn marker_task(train: usize, val: usize, seed: u64) -> TaskData {
    TaskData {
        task: MetricTask::Classify,
        outputs: 2,
        train: marker_examples(train, seed),
        val: marker_examples(val, seed + 1000),
    }
}
