//! Labeled text records, the TSV file format and the split cascade.
//!
//! One record per line: `label<TAB>text` or `label<TAB>text<TAB>text_b`
//! for sentence-pair tasks. Inside fields, `\t`, `\n` and `\\` stand for a
//! tab, a newline and a backslash. Blank lines and lines starting with `#`
//! are skipped.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Record {
    pub label: String,
    pub text: String,
    pub text_b: Option<String>,
}

impl Record {
    pub fn new(label: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            text: text.into(),
            text_b: None,
        }
    }
}

fn unescape(s: &str, line: usize) -> Result<String> {
    let mut out = String::with_capacity(s.len());
    let mut it = s.chars();
    while let Some(c) = it.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match it.next() {
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('\\') => out.push('\\'),
            other => {
                return Err(Error::Parse {
                    line,
                    msg: format!("bad escape `\\{}`", other.map_or(String::new(), String::from)),
                })
            }
        }
    }
    Ok(out)
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('\t', "\\t").replace('\n', "\\n")
}

pub fn parse_tsv(text: &str) -> Result<Vec<Record>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let (label, text, text_b) = match fields.as_slice() {
            [l, t] => (l, t, None),
            [l, t, b] => (l, t, Some(unescape(b, n)?)),
            _ => {
                return Err(Error::Parse {
                    line: n,
                    msg: format!("expected 2 or 3 tab-separated fields, found {}", fields.len()),
                })
            }
        };
        let label = unescape(label.trim(), n)?;
        if label.is_empty() {
            return Err(Error::Parse {
                line: n,
                msg: "empty label".into(),
            });
        }
        out.push(Record {
            label,
            text: unescape(text, n)?,
            text_b,
        });
    }
    Ok(out)
}

pub fn to_tsv(records: &[Record]) -> String {
    let mut s = String::new();
    for r in records {
        s.push_str(&escape(&r.label));
        s.push('\t');
        s.push_str(&escape(&r.text));
        if let Some(b) = &r.text_b {
            s.push('\t');
            s.push_str(&escape(b));
        }
        s.push('\n');
    }
    s
}

pub fn load_tsv(path: &Path) -> Result<Vec<Record>> {
    parse_tsv(&std::fs::read_to_string(path)?)
}

/// Sorted label names; numeric labels sort by value.
pub fn label_set(records: &[Record]) -> Vec<String> {
    let mut labels: Vec<String> = records.iter().map(|r| r.label.clone()).collect();
    labels.sort();
    labels.dedup();
    if labels.iter().all(|l| l.parse::<i64>().is_ok()) {
        labels.sort_by_key(|l| l.parse::<i64>().expect("checked numeric"));
    }
    labels
}

/// Splits as shipped with a dataset.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum OfficialSplits {
    None(Vec<Record>),
    Two(Vec<Record>, Vec<Record>),
    Three {
        train: Vec<Record>,
        val: Vec<Record>,
        test: Vec<Record>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<Record>,
    pub val: Vec<Record>,
    pub test: Vec<Record>,
}

/// One tenth, at least one record.
fn tenth(n: usize) -> usize {
    (n / 10).max(1)
}

fn withhold(mut records: Vec<Record>, n: usize, rng: &mut ChaCha8Rng) -> (Vec<Record>, Vec<Record>) {
    records.shuffle(rng);
    let held = records.split_off(records.len() - n);
    (records, held)
}

/// Three official splits pass through. With two, the larger is train, the
/// smaller is test and a tenth of train becomes val. With none, a tenth
/// goes to test and then a tenth of the rest to val.
pub fn split_dataset(splits: OfficialSplits, seed: u64) -> Result<Splits> {
    let total = match &splits {
        OfficialSplits::None(a) => a.len(),
        OfficialSplits::Two(a, b) => a.len() + b.len(),
        OfficialSplits::Three { train, val, test } => train.len() + val.len() + test.len(),
    };
    if total < 10 {
        return Err(Error::DatasetTooSmall(total));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(match splits {
        OfficialSplits::Three { train, val, test } => Splits { train, val, test },
        OfficialSplits::Two(a, b) => {
            let (big, small) = if a.len() >= b.len() { (a, b) } else { (b, a) };
            let n = tenth(big.len());
            let (train, val) = withhold(big, n, &mut rng);
            Splits { train, val, test: small }
        }
        OfficialSplits::None(all) => {
            let n = tenth(all.len());
            let (rest, test) = withhold(all, n, &mut rng);
            let m = tenth(rest.len());
            let (train, val) = withhold(rest, m, &mut rng);
            Splits { train, val, test }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recs(n: usize, tag: &str) -> Vec<Record> {
        (0..n).map(|i| Record::new((i % 3).to_string(), format!("{tag} {i}"))).collect()
    }

    #[test]
    fn cascade_arithmetic() {
        let s = split_dataset(OfficialSplits::None(recs(1000, "r")), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (810, 90, 100));
        let s = split_dataset(OfficialSplits::Two(recs(50, "b"), recs(100, "a")), 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (90, 10, 50));
        assert_eq!(s.test, recs(50, "b"));
        let three = OfficialSplits::Three {
            train: recs(8, "t"),
            val: recs(1, "v"),
            test: recs(2, "s"),
        };
        let s = split_dataset(three, 1).unwrap();
        assert_eq!((s.train, s.val, s.test), (recs(8, "t"), recs(1, "v"), recs(2, "s")));
        assert!(matches!(split_dataset(OfficialSplits::None(recs(9, "r")), 1), Err(Error::DatasetTooSmall(9))));
    }

    #[test]
    fn tsv_round_trip_with_escapes() {
        let mut r = vec![Record::new("pos", "tab\there\nnew \\ line"), Record::new("neg", "plain")];
        r[1].text_b = Some("second".into());
        let text = to_tsv(&r);
        assert_eq!(text.lines().count(), 2);
        assert_eq!(parse_tsv(&text).unwrap(), r);
        assert!(parse_tsv("only-one-field\n").is_err());
        assert!(matches!(parse_tsv("a\tb\\q\n"), Err(Error::Parse { line: 1, .. })));
        assert_eq!(parse_tsv("# comment\n\n1\tx\n").unwrap().len(), 1);
    }

    #[test]
    fn labels_sort_numerically() {
        let r = vec![Record::new("10", "a"), Record::new("9", "b"), Record::new("10", "c")];
        assert_eq!(label_set(&r), vec!["9", "10"]);
    }
}
