//! Masked-language-model and next-sentence-prediction batches.
//!
//! Each row is `[CLS] A [SEP] B`, padded to ℓ; segment 0 covers CLS, A and
//! SEP, segment 1 covers B. Half of the pairs (rounded down) are
//! consecutive sentences.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::special;
use crate::error::{Error, Result};

/// Masking rates: a token is selected with `mask_prob`; a selected token
/// becomes `<MASK>` with `replace_mask`, a random token with
/// `replace_random`, and stays otherwise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskingRule {
    pub mask_prob: f64,
    pub replace_mask: f64,
    pub replace_random: f64,
}

impl Default for MaskingRule {
    fn default() -> Self {
        Self {
            mask_prob: 1.0 / 6.0,
            replace_mask: 0.70,
            replace_random: 0.15,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlmNspBatch {
    pub ids: Vec<Vec<usize>>,
    pub segments: Vec<Vec<usize>>,
    /// Per row: `(position, original id)` for every selected token.
    pub masked: Vec<Vec<(usize, usize)>>,
    /// 1 when B follows A in the source.
    pub nsp: Vec<usize>,
    /// Rows whose pair had to be cut to fit ℓ.
    pub truncated: usize,
}

impl MlmNspBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Cross-entropy targets for one row: the original id at masked positions.
    pub fn targets(&self, row: usize) -> Vec<Option<usize>> {
        let mut t = vec![None; self.ids[row].len()];
        for &(p, id) in &self.masked[row] {
            t[p] = Some(id);
        }
        t
    }
}

/// Cuts the longer side first until `a + b` fits.
fn truncate_pair(a: &mut Vec<usize>, b: &mut Vec<usize>, room: usize) -> bool {
    let mut cut = false;
    while a.len() + b.len() > room {
        cut = true;
        if a.len() >= b.len() {
            a.pop();
        } else {
            b.pop();
        }
    }
    cut
}

/// `sentences` are consecutive, already encoded sentences of one corpus.
pub fn make_mlm_nsp_batch(
    sentences: &[Vec<usize>],
    vocab_size: usize,
    seq_len: usize,
    batch: usize,
    rule: MaskingRule,
    seed: u64,
) -> Result<MlmNspBatch> {
    if sentences.len() < 2 {
        return Err(Error::InvalidArgument("need at least 2 sentences".into()));
    }
    if seq_len < 4 {
        return Err(Error::InvalidArgument(format!("sequence length {seq_len} leaves no room for a pair")));
    }
    if vocab_size <= special::COUNT {
        return Err(Error::VocabTooSmall {
            target: vocab_size,
            minimum: special::COUNT + 1,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..batch).map(|i| usize::from(i < batch / 2)).collect();
    labels.shuffle(&mut rng);
    let n = sentences.len();
    let mut out = MlmNspBatch {
        ids: Vec::with_capacity(batch),
        segments: Vec::with_capacity(batch),
        masked: Vec::with_capacity(batch),
        nsp: labels.clone(),
        truncated: 0,
    };
    for &label in &labels {
        let (i, j) = if label == 1 {
            let i = rng.gen_range(0..n - 1);
            (i, i + 1)
        } else {
            let i = rng.gen_range(0..n);
            // any sentence except the true successor
            let mut j = rng.gen_range(0..n - 1);
            if j >= i + 1 {
                j += 1;
            }
            (i, j.min(n - 1))
        };
        let (mut a, mut b) = (sentences[i].clone(), sentences[j].clone());
        if truncate_pair(&mut a, &mut b, seq_len - 2) {
            out.truncated += 1;
        }
        let mut ids = Vec::with_capacity(seq_len);
        ids.push(special::CLS);
        ids.extend_from_slice(&a);
        ids.push(special::SEP);
        let b_start = ids.len();
        ids.extend_from_slice(&b);
        let used = ids.len();
        ids.resize(seq_len, special::PAD);
        let mut segs = vec![0; seq_len];
        segs[b_start..used].fill(1);
        let mut masked = Vec::new();
        for (p, id) in ids.iter_mut().enumerate().take(used) {
            if special::is_special(*id) || !rng.gen_bool(rule.mask_prob) {
                continue;
            }
            masked.push((p, *id));
            let u: f64 = rng.gen();
            if u < rule.replace_mask {
                *id = special::MASK;
            } else if u < rule.replace_mask + rule.replace_random {
                *id = rng.gen_range(special::COUNT..vocab_size);
            }
        }
        out.ids.push(ids);
        out.segments.push(segs);
        out.masked.push(masked);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(n: usize, len: usize) -> Vec<Vec<usize>> {
        (0..n).map(|i| (0..len).map(|j| 5 + (i * 7 + j) % 90).collect()).collect()
    }

    #[test]
    fn rows_are_well_formed() {
        let b = make_mlm_nsp_batch(&corpus(20, 5), 100, 16, 9, MaskingRule::default(), 3).unwrap();
        assert_eq!(b.len(), 9);
        let pos = b.nsp.iter().filter(|&&x| x == 1).count();
        assert!((pos as i64 - (9 - pos) as i64).abs() <= 1);
        for r in 0..b.len() {
            assert_eq!(b.ids[r][0], special::CLS);
            assert_eq!(b.ids[r].iter().filter(|&&x| x == special::SEP).count(), 1);
            assert_eq!(b.ids[r].len(), 16);
            for &(p, orig) in &b.masked[r] {
                assert!(!special::is_special(orig));
                assert!(p > 0);
            }
            let t = b.targets(r);
            assert_eq!(t.iter().filter(|x| x.is_some()).count(), b.masked[r].len());
        }
    }

    #[test]
    fn masking_rates_within_three_sigma() {
        let sentences = corpus(200, 50);
        let b = make_mlm_nsp_batch(&sentences, 100, 102, 100, MaskingRule::default(), 11).unwrap();
        let tokens: usize = b.ids.iter().map(|r| r.iter().filter(|&&x| x != special::PAD).count() - 2).sum();
        assert!(tokens >= 10_000);
        let masked: usize = b.masked.iter().map(Vec::len).sum();
        let p = 1.0 / 6.0;
        let sigma = (tokens as f64 * p * (1.0 - p)).sqrt();
        assert!((masked as f64 - tokens as f64 * p).abs() < 3.0 * sigma);
        let as_mask: usize = (0..b.len())
            .map(|r| b.masked[r].iter().filter(|&&(pos, _)| b.ids[r][pos] == special::MASK).count())
            .sum();
        let sigma = (masked as f64 * 0.7 * 0.3).sqrt();
        assert!((as_mask as f64 - masked as f64 * 0.7).abs() < 3.0 * sigma);
    }

    #[test]
    fn zero_probability_leaves_inputs_alone() {
        let rule = MaskingRule {
            mask_prob: 0.0,
            ..MaskingRule::default()
        };
        let b = make_mlm_nsp_batch(&corpus(5, 3), 100, 10, 4, rule, 0).unwrap();
        assert!(b.masked.iter().all(Vec::is_empty));
        assert!(b.ids.iter().all(|r| r.iter().all(|&x| x != special::MASK)));
    }

    #[test]
    fn truncation_is_flagged_and_batches_repeat() {
        let s = corpus(4, 30);
        let a = make_mlm_nsp_batch(&s, 100, 20, 6, MaskingRule::default(), 5).unwrap();
        assert_eq!(a.truncated, 6);
        assert_eq!(a, make_mlm_nsp_batch(&s, 100, 20, 6, MaskingRule::default(), 5).unwrap());
        assert!(make_mlm_nsp_batch(&s[..1], 100, 20, 6, MaskingRule::default(), 5).is_err());
    }
}
