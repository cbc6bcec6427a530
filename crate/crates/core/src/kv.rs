//! Flat `key = value` text with `[section]` headers and `#` comments.
//!
//! ```text
//! # EmbBERT-Q
//! [model]
//! arch = embbert
//! d = 128
//! ```
//!
//! Keys before the first header belong to the unnamed section `""`. A key may
//! appear once per section; a section may appear once per document.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvDoc {
    pub sections: Vec<KvSection>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct KvSection {
    pub name: String,
    pub entries: Vec<KvEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KvEntry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

fn valid_name(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-' || c == '.')
}

impl KvDoc {
    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = KvDoc::default();
        let mut current = KvSection::default();
        let mut seen_sections = HashSet::new();
        let mut seen_keys = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            if let Some(rest) = content.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .map(str::trim)
                    .filter(|n| valid_name(n))
                    .ok_or_else(|| Error::Parse {
                        line,
                        msg: format!("bad section header `{content}`"),
                    })?;
                if !seen_sections.insert(name.to_string()) {
                    return Err(Error::Parse {
                        line,
                        msg: format!("section [{name}] repeated"),
                    });
                }
                let done = std::mem::replace(
                    &mut current,
                    KvSection {
                        name: name.to_string(),
                        entries: Vec::new(),
                    },
                );
                if !done.entries.is_empty() || !done.name.is_empty() {
                    doc.sections.push(done);
                }
                seen_keys.clear();
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| Error::Parse {
                line,
                msg: format!("expected `key = value`, got `{content}`"),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !valid_name(key) || value.is_empty() {
                return Err(Error::Parse {
                    line,
                    msg: format!("bad entry `{content}`"),
                });
            }
            if !seen_keys.insert(key.to_string()) {
                return Err(Error::Parse {
                    line,
                    msg: format!("key `{key}` repeated"),
                });
            }
            current.entries.push(KvEntry {
                key: key.to_string(),
                value: value.to_string(),
                line,
            });
        }
        if !current.entries.is_empty() || !current.name.is_empty() {
            doc.sections.push(current);
        }
        Ok(doc)
    }

    pub fn section(&self, name: &str) -> Option<&KvSection> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (i, s) in self.sections.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            if !s.name.is_empty() {
                let _ = writeln!(out, "[{}]", s.name);
            }
            for e in &s.entries {
                let _ = writeln!(out, "{} = {}", e.key, e.value);
            }
        }
        out
    }
}

impl KvSection {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, key: &str, value: impl ToString) {
        self.entries.push(KvEntry {
            key: key.to_string(),
            value: value.to_string(),
            line: 0,
        });
    }

    pub fn fields(&self) -> Fields<'_> {
        Fields {
            section: self,
            used: HashSet::new(),
        }
    }
}

/// Typed access to a section that rejects keys nobody asked for.
pub struct Fields<'a> {
    section: &'a KvSection,
    used: HashSet<&'a str>,
}

impl<'a> Fields<'a> {
    pub fn get<T: FromStr>(&mut self, key: &str) -> Result<Option<T>> {
        let Some(e) = self.section.entries.iter().find(|e| e.key == key) else {
            return Ok(None);
        };
        self.used.insert(&e.key);
        e.value.parse().map(Some).map_err(|_| Error::Parse {
            line: e.line,
            msg: format!("cannot parse `{}` for key `{key}`", e.value),
        })
    }

    pub fn require<T: FromStr>(&mut self, key: &str) -> Result<T> {
        self.get(key)?.ok_or_else(|| {
            Error::InvalidConfig(format!("[{}] is missing key `{key}`", self.section.name))
        })
    }

    pub fn finish(self) -> Result<()> {
        match self.section.entries.iter().find(|e| !self.used.contains(e.key.as_str())) {
            Some(e) => Err(Error::Parse {
                line: e.line,
                msg: format!("unknown key `{}` in [{}]", e.key, self.section.name),
            }),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_comments() {
        let doc = KvDoc::parse("seed = 7 # top\n\n[model]\narch = embbert\n d=128\n[train]\n").unwrap();
        assert_eq!(doc.sections.len(), 3);
        assert_eq!(doc.section("").unwrap().entries[0].value, "7");
        let mut f = doc.section("model").unwrap().fields();
        assert_eq!(f.require::<usize>("d").unwrap(), 128);
        assert!(f.finish().is_err(), "arch was never read");
        assert!(doc.section("train").unwrap().entries.is_empty());
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(matches!(KvDoc::parse("a = 1\na = 2"), Err(Error::Parse { line: 2, .. })));
        assert!(KvDoc::parse("[x]\n[x]").is_err());
        assert!(KvDoc::parse("novalue").is_err());
        assert!(KvDoc::parse("k =").is_err());
        assert!(KvDoc::parse("[bad").is_err());
    }

    #[test]
    fn text_round_trip() {
        let doc = KvDoc::parse("x = 1\n[a]\nk = v w\n[b]\nn = 2\n").unwrap();
        let again = KvDoc::parse(&doc.to_text()).unwrap();
        let strip = |d: &KvDoc| {
            d.sections
                .iter()
                .map(|s| (s.name.clone(), s.entries.iter().map(|e| (e.key.clone(), e.value.clone())).collect::<Vec<_>>()))
                .collect::<Vec<_>>()
        };
        assert_eq!(strip(&doc), strip(&again));
    }
}
