//! Byte-level BPE with whitespace pre-splitting.
//!
//! Every word after the first on a line carries a leading space byte, so
//! concatenating decoded symbols gives back the words joined by single
//! spaces. Ids are laid out as specials, then the base bytes in ascending
//! order, then one id per merge in training order. If merging stops early
//! the remaining ids up to `v` are reserved and never emitted.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use super::special;
use crate::error::{Error, Result};

type Pair = (u32, u32);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BpeVocab {
    v: usize,
    base: Vec<u8>,
    merges: Vec<Pair>,
    /// Byte string of every symbol, base bytes first.
    symbols: Vec<Vec<u8>>,
    byte_symbol: [Option<u32>; 256],
    ranks: HashMap<Pair, u32>,
}

/// Words of one line with the leading-space convention applied.
pub fn pre_split(line: &str) -> Vec<Vec<u8>> {
    line.split_whitespace()
        .enumerate()
        .map(|(i, w)| {
            let mut b = Vec::with_capacity(w.len() + 1);
            if i > 0 {
                b.push(b' ');
            }
            b.extend_from_slice(w.as_bytes());
            b
        })
        .collect()
}

struct Word {
    symbols: Vec<u32>,
    freq: u64,
}

fn pairs_of(s: &[u32]) -> impl Iterator<Item = Pair> + '_ {
    s.windows(2).map(|w| (w[0], w[1]))
}

fn apply_merge(s: &[u32], pair: Pair, new: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(s.len());
    let mut i = 0;
    while i < s.len() {
        if i + 1 < s.len() && (s[i], s[i + 1]) == pair {
            out.push(new);
            i += 2;
        } else {
            out.push(s[i]);
            i += 1;
        }
    }
    out
}

/// Greedy most-frequent-pair merging over the corpus lines until the table
/// holds `v` ids or no adjacent pair is left. Ties go to the pair that
/// occurs first when scanning words in order of first appearance.
pub fn train_bpe<'a>(corpus: impl IntoIterator<Item = &'a str>, v: usize) -> Result<BpeVocab> {
    let mut index: HashMap<Vec<u8>, usize> = HashMap::new();
    let mut raw: Vec<(Vec<u8>, u64)> = Vec::new();
    for line in corpus {
        for w in pre_split(line) {
            match index.get(&w) {
                Some(&i) => raw[i].1 += 1,
                None => {
                    index.insert(w.clone(), raw.len());
                    raw.push((w, 1));
                }
            }
        }
    }
    if raw.is_empty() {
        return Err(Error::InvalidArgument("corpus has no words".into()));
    }
    let base: Vec<u8> = raw
        .iter()
        .flat_map(|(w, _)| w.iter().copied())
        .collect::<BTreeSet<u8>>()
        .into_iter()
        .collect();
    let minimum = special::COUNT + base.len();
    if v < minimum {
        return Err(Error::VocabTooSmall { target: v, minimum });
    }
    let mut vocab = BpeVocab::from_parts(v, base, Vec::new())?;
    let mut words: Vec<Word> = raw
        .into_iter()
        .map(|(w, freq)| Word {
            symbols: w.iter().map(|b| vocab.byte_symbol[*b as usize].expect("base byte")).collect(),
            freq,
        })
        .collect();
    let mut counts: HashMap<Pair, u64> = HashMap::new();
    let mut holders: HashMap<Pair, BTreeSet<usize>> = HashMap::new();
    for (wi, w) in words.iter().enumerate() {
        for p in pairs_of(&w.symbols) {
            *counts.entry(p).or_default() += w.freq;
            holders.entry(p).or_default().insert(wi);
        }
    }
    while special::COUNT + vocab.symbols.len() < v {
        let Some(best) = counts.values().copied().max().filter(|&c| c > 0) else {
            break;
        };
        let pair = counts
            .iter()
            .filter(|(_, &c)| c == best)
            .map(|(&p, _)| {
                let wi = *holders[&p].first().expect("counted pair has a holder");
                let pos = pairs_of(&words[wi].symbols).position(|q| q == p).expect("holder contains pair");
                ((wi, pos), p)
            })
            .min()
            .expect("a pair reaches the max")
            .1;
        let new = vocab.push_merge(pair);
        let affected: Vec<usize> = holders.remove(&pair).into_iter().flatten().collect();
        for wi in affected {
            let w = &mut words[wi];
            for p in pairs_of(&w.symbols) {
                if let Some(c) = counts.get_mut(&p) {
                    *c -= w.freq;
                    if *c == 0 {
                        counts.remove(&p);
                    }
                }
                if let Some(h) = holders.get_mut(&p) {
                    h.remove(&wi);
                }
            }
            w.symbols = apply_merge(&w.symbols, pair, new);
            for p in pairs_of(&w.symbols) {
                *counts.entry(p).or_default() += w.freq;
                holders.entry(p).or_default().insert(wi);
            }
        }
        counts.remove(&pair);
    }
    Ok(vocab)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn unhex(s: &str, line: usize) -> Result<Vec<u8>> {
    if s.is_empty() || s.len() % 2 != 0 {
        return Err(Error::Parse {
            line,
            msg: format!("bad hex symbol `{s}`"),
        });
    }
    (0..s.len())
        .step_by(2)
        .map(|i| {
            u8::from_str_radix(&s[i..i + 2], 16).map_err(|_| Error::Parse {
                line,
                msg: format!("bad hex symbol `{s}`"),
            })
        })
        .collect()
}

impl BpeVocab {
    /// Rebuilds the table by replaying `merges`, given as symbol byte strings.
    pub fn from_parts(v: usize, base: Vec<u8>, merges: Vec<(Vec<u8>, Vec<u8>)>) -> Result<Self> {
        if base.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Format("base bytes must be sorted and unique".into()));
        }
        let mut byte_symbol = [None; 256];
        for (i, &b) in base.iter().enumerate() {
            byte_symbol[b as usize] = Some(i as u32);
        }
        let mut vocab = BpeVocab {
            v,
            symbols: base.iter().map(|&b| vec![b]).collect(),
            base,
            merges: Vec::new(),
            byte_symbol,
            ranks: HashMap::new(),
        };
        let mut lookup: HashMap<Vec<u8>, u32> =
            vocab.symbols.iter().enumerate().map(|(i, s)| (s.clone(), i as u32)).collect();
        for (a, b) in merges {
            let (Some(&x), Some(&y)) = (lookup.get(&a), lookup.get(&b)) else {
                return Err(Error::Format(format!("merge of unknown symbols {} {}", hex(&a), hex(&b))));
            };
            if vocab.ranks.contains_key(&(x, y)) {
                return Err(Error::Format(format!("duplicate merge {} {}", hex(&a), hex(&b))));
            }
            let id = vocab.push_merge((x, y));
            lookup.entry(vocab.symbols[id as usize].clone()).or_insert(id);
        }
        if special::COUNT + vocab.symbols.len() > v {
            return Err(Error::VocabTooSmall {
                target: v,
                minimum: special::COUNT + vocab.symbols.len(),
            });
        }
        Ok(vocab)
    }

    fn push_merge(&mut self, pair: Pair) -> u32 {
        let id = self.symbols.len() as u32;
        let mut s = self.symbols[pair.0 as usize].clone();
        s.extend_from_slice(&self.symbols[pair.1 as usize]);
        self.symbols.push(s);
        self.ranks.insert(pair, self.merges.len() as u32);
        self.merges.push(pair);
        id
    }

    /// Id table size, reserved ids included.
    pub fn size(&self) -> usize {
        self.v
    }

    /// Ids that encoding can emit, specials included.
    pub fn used(&self) -> usize {
        special::COUNT + self.symbols.len()
    }

    pub fn base(&self) -> &[u8] {
        &self.base
    }

    pub fn merge_count(&self) -> usize {
        self.merges.len()
    }

    /// Byte strings of merge `i`.
    pub fn merge(&self, i: usize) -> (&[u8], &[u8]) {
        let (a, b) = self.merges[i];
        (&self.symbols[a as usize], &self.symbols[b as usize])
    }

    /// Bytes of a non-special id; `None` for specials and reserved ids.
    pub fn symbol(&self, id: usize) -> Option<&[u8]> {
        id.checked_sub(special::COUNT)
            .and_then(|i| self.symbols.get(i))
            .map(|s| s.as_slice())
    }

    fn encode_word(&self, word: &[u8], out: &mut Vec<usize>) {
        // None marks a byte outside the base alphabet; it never merges
        let mut s: Vec<Option<u32>> = word.iter().map(|&b| self.byte_symbol[b as usize]).collect();
        let mut last: Option<u32> = None;
        loop {
            let next = s
                .windows(2)
                .filter_map(|w| match (w[0], w[1]) {
                    (Some(a), Some(b)) => self.ranks.get(&(a, b)).copied(),
                    _ => None,
                })
                .filter(|&r| last.is_none_or(|l| r > l))
                .min();
            let Some(r) = next else { break };
            let pair = self.merges[r as usize];
            let merged = (self.base.len() + r as usize) as u32;
            let mut t = Vec::with_capacity(s.len());
            let mut i = 0;
            while i < s.len() {
                if i + 1 < s.len() && s[i] == Some(pair.0) && s[i + 1] == Some(pair.1) {
                    t.push(Some(merged));
                    i += 2;
                } else {
                    t.push(s[i]);
                    i += 1;
                }
            }
            s = t;
            last = Some(r);
        }
        out.extend(s.into_iter().map(|x| x.map_or(special::UNK, |i| i as usize + special::COUNT)));
    }

    /// Merges are replayed in training order; bytes outside the base
    /// alphabet become `<UNK>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let mut out = Vec::new();
        for line in text.lines() {
            for w in pre_split(line) {
                self.encode_word(&w, &mut out);
            }
        }
        out
    }

    /// Concatenated symbol bytes; PAD is dropped and other specials are
    /// written by name.
    pub fn decode(&self, ids: &[usize]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            if id == special::PAD {
                continue;
            }
            match self.symbol(id) {
                Some(s) => bytes.extend_from_slice(s),
                None if special::is_special(id) => bytes.extend_from_slice(special::NAMES[id].as_bytes()),
                None => {}
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    /// Text form: a header line, `v`, the specials, the base bytes in hex,
    /// then one `merge <left> <right>` line per merge, symbols in hex.
    pub fn to_text(&self) -> String {
        let mut s = String::from("#tlmk-bpe 1\n");
        let _ = writeln!(s, "v {}", self.v);
        let _ = writeln!(s, "specials {}", special::NAMES.join(" "));
        let _ = writeln!(s, "base {}", self.base.iter().map(|b| format!("{b:02x}")).collect::<Vec<_>>().join(" "));
        for i in 0..self.merges.len() {
            let (a, b) = self.merge(i);
            let _ = writeln!(s, "merge {} {}", hex(a), hex(b));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let perr = |line, msg: &str| Error::Parse { line, msg: msg.into() };
        match lines.next() {
            Some((_, "#tlmk-bpe 1")) => {}
            _ => return Err(perr(1, "missing `#tlmk-bpe 1` header")),
        }
        let (mut v, mut base, mut specials_seen) = (None, None, false);
        let mut merges = Vec::new();
        for (n, line) in lines {
            let mut parts = line.split_whitespace();
            match parts.next() {
                None => continue,
                Some("v") => {
                    v = Some(parts.next().and_then(|x| x.parse::<usize>().ok()).ok_or_else(|| perr(n, "bad v"))?)
                }
                Some("specials") => {
                    if !parts.eq(special::NAMES.iter().copied()) {
                        return Err(perr(n, "specials must be <PAD> <UNK> <CLS> <SEP> <MASK>"));
                    }
                    specials_seen = true;
                }
                Some("base") => {
                    base = Some(
                        parts
                            .map(|h| unhex(h, n).and_then(|b| if b.len() == 1 { Ok(b[0]) } else { Err(perr(n, "base symbols are single bytes")) }))
                            .collect::<Result<Vec<u8>>>()?,
                    )
                }
                Some("merge") => {
                    let (Some(a), Some(b), None) = (parts.next(), parts.next(), parts.next()) else {
                        return Err(perr(n, "merge needs two symbols"));
                    };
                    merges.push((unhex(a, n)?, unhex(b, n)?));
                }
                Some(other) => return Err(perr(n, &format!("unknown entry `{other}`"))),
            }
        }
        if !specials_seen {
            return Err(perr(0, "missing specials line"));
        }
        let v = v.ok_or_else(|| perr(0, "missing v line"))?;
        let base = base.ok_or_else(|| perr(0, "missing base line"))?;
        Self::from_parts(v, base, merges)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn merged(v: &BpeVocab, i: usize) -> (String, String) {
        let (a, b) = v.merge(i);
        (String::from_utf8(a.to_vec()).unwrap(), String::from_utf8(b.to_vec()).unwrap())
    }

    #[test]
    fn first_merge_is_the_most_frequent_pair() {
        let v = train_bpe(["abab abab"], 64).unwrap();
        // (a,b) occurs 4 times, (b,a) twice
        assert_eq!(merged(&v, 0), ("a".into(), "b".into()));
    }

    #[test]
    fn single_character_corpus_doubles_up() {
        let v = train_bpe(["aaaa"], special::COUNT + 3).unwrap();
        assert_eq!(merged(&v, 0), ("a".into(), "a".into()));
        assert_eq!(merged(&v, 1), ("aa".into(), "aa".into()));
        assert_eq!(v.encode("aaaa").len(), 1);
    }

    #[test]
    fn minimal_size_means_no_merges() {
        let v = train_bpe(["abc cab"], special::COUNT + 4).unwrap();
        assert_eq!(v.merge_count(), 0);
        assert!(matches!(train_bpe(["abc cab"], special::COUNT + 3), Err(Error::VocabTooSmall { .. })));
        assert!(train_bpe(["   "], 100).is_err());
    }

    #[test]
    fn replay_reaches_single_id() {
        let v = BpeVocab::from_parts(
            special::COUNT + 4,
            b"ab".to_vec(),
            vec![(b"a".to_vec(), b"b".to_vec()), (b"ab".to_vec(), b"ab".to_vec())],
        )
        .unwrap();
        let ids = v.encode("abab");
        assert_eq!(ids, vec![special::COUNT + 3]);
        assert!(v.encode("").is_empty());
        assert_eq!(v.encode("abc"), vec![special::COUNT + 2, special::UNK]);
    }

    #[test]
    fn round_trip_and_file_format() {
        let corpus = ["the cat sat on the mat", "the dog sat", "a cat and a dog"];
        let v = train_bpe(corpus, 60).unwrap();
        assert_eq!(v.size(), 60);
        for line in corpus {
            let ids = v.encode(line);
            assert!(!ids.contains(&special::UNK));
            assert!(ids.iter().all(|&i| i < v.used()));
            assert_eq!(v.decode(&ids), line);
        }
        let back = BpeVocab::from_text(&v.to_text()).unwrap();
        assert_eq!(back, v);
        assert!(BpeVocab::from_text("v 10\n").is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = ["x y z xy yz zx xyz", "zz yy xx"];
        assert_eq!(train_bpe(corpus, 40).unwrap(), train_bpe(corpus, 40).unwrap());
    }
}
