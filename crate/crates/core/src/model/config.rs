use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv::{KvDoc, KvSection};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    /// Nano embedder + efficient encoders.
    EmbBert,
    /// Standard embedder + attention/FF layers.
    BertStd,
    /// Nano embedder + attention/FF layers.
    BertNe,
    /// Standard embedder + efficient attention/FF layers.
    BertEa,
    /// Nano embedder + efficient attention/FF layers.
    BertNeEa,
    EmbedderOnly,
    /// Nano embedder + one depthwise convolution.
    EmbedderConv,
    /// Accounting only: standard embedder + MAMBA layers.
    Mamba,
}

impl Arch {
    pub const ALL: [Arch; 8] = [
        Arch::EmbBert,
        Arch::BertStd,
        Arch::BertNe,
        Arch::BertEa,
        Arch::BertNeEa,
        Arch::EmbedderOnly,
        Arch::EmbedderConv,
        Arch::Mamba,
    ];

    pub const EXECUTABLE: [Arch; 7] = [
        Arch::EmbBert,
        Arch::BertStd,
        Arch::BertNe,
        Arch::BertEa,
        Arch::BertNeEa,
        Arch::EmbedderOnly,
        Arch::EmbedderConv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arch::EmbBert => "embbert",
            Arch::BertStd => "bert_std",
            Arch::BertNe => "bert_ne",
            Arch::BertEa => "bert_ea",
            Arch::BertNeEa => "bert_ne_ea",
            Arch::EmbedderOnly => "embedder_only",
            Arch::EmbedderConv => "embedder_conv",
            Arch::Mamba => "mamba",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown arch `{s}`")))
    }

    pub fn is_executable(self) -> bool {
        self != Arch::Mamba
    }

    pub fn uses_nano_embedder(self) -> bool {
        matches!(
            self,
            Arch::EmbBert | Arch::BertNe | Arch::BertNeEa | Arch::EmbedderOnly | Arch::EmbedderConv
        )
    }

    pub fn is_embedder_only(self) -> bool {
        matches!(self, Arch::EmbedderOnly | Arch::EmbedderConv)
    }

    fn uses_kernel(self) -> bool {
        matches!(self, Arch::EmbBert | Arch::EmbedderConv | Arch::Mamba)
    }

    fn uses_heads(self) -> bool {
        matches!(self, Arch::BertStd | Arch::BertNe)
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Architectural parameters; the single source for building, analyzing and planning.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub v: usize,
    pub seq_len: usize,
    pub d: usize,
    pub r_d: Option<usize>,
    pub alpha: usize,
    pub k: Option<usize>,
    pub heads: usize,
    pub layers: usize,
    pub d_state: Option<usize>,
    pub rho: Option<usize>,
    /// Storage bytes per weight.
    pub p_w: u32,
    /// Storage bytes per activation.
    pub p_a: u32,
}

impl ModelConfig {
    pub fn embbert_q() -> Self {
        Self {
            arch: Arch::EmbBert,
            v: 8192,
            seq_len: 256,
            d: 128,
            r_d: Some(16),
            alpha: 1,
            k: Some(32),
            heads: 1,
            layers: 4,
            d_state: None,
            rho: None,
            p_w: 4,
            p_a: 4,
        }
    }

    pub fn bert_2mb() -> Self {
        Self {
            arch: Arch::BertStd,
            v: 2048,
            seq_len: 256,
            d: 80,
            r_d: None,
            alpha: 2,
            k: None,
            heads: 2,
            layers: 2,
            ..Self::embbert_q()
        }
    }

    pub fn bert_tiny() -> Self {
        Self {
            v: 32768,
            seq_len: 512,
            d: 128,
            ..Self::bert_2mb()
        }
    }

    pub fn embedder() -> Self {
        Self {
            arch: Arch::EmbedderOnly,
            v: 8192,
            seq_len: 256,
            d: 320,
            r_d: Some(32),
            alpha: 1,
            k: None,
            heads: 1,
            layers: 0,
            ..Self::embbert_q()
        }
    }

    pub fn embedder_conv() -> Self {
        Self {
            arch: Arch::EmbedderConv,
            k: Some(16),
            ..Self::embedder()
        }
    }

    /// `ρ = 4` is an assumption; the Δ-projection rank is not published.
    pub fn mamba_2mb() -> Self {
        Self {
            arch: Arch::Mamba,
            v: 2048,
            seq_len: 256,
            d: 64,
            r_d: None,
            alpha: 1,
            k: Some(4),
            heads: 1,
            layers: 5,
            d_state: Some(6),
            rho: Some(4),
            p_w: 4,
            p_a: 4,
        }
    }

    /// Named presets for the published table rows.
    pub fn presets() -> Vec<(&'static str, ModelConfig)> {
        vec![
            ("BERT-Tiny", Self::bert_tiny()),
            ("BERT(2MB)", Self::bert_2mb()),
            ("MAMBA(2MB)", Self::mamba_2mb()),
            ("Embedder", Self::embedder()),
            ("Embedder+conv", Self::embedder_conv()),
            ("EmbBERT-Q", Self::embbert_q()),
        ]
    }

    pub fn r_d(&self) -> Result<usize> {
        self.r_d.ok_or_else(|| Error::InvalidConfig(format!("{} needs r_d", self.arch)))
    }

    pub fn k(&self) -> Result<usize> {
        self.k.ok_or_else(|| Error::InvalidConfig(format!("{} needs k", self.arch)))
    }

    /// Checks every invariant and names the first one violated.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        let a = self.arch;
        for (name, val) in [("v", self.v), ("seq_len", self.seq_len), ("d", self.d), ("alpha", self.alpha), ("heads", self.heads)] {
            if val == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.p_w == 0 || self.p_a == 0 {
            return bad("p_w and p_a must be positive".into());
        }
        match (a.uses_nano_embedder(), self.r_d) {
            (true, None) => return bad(format!("{a} needs r_d")),
            (true, Some(r)) if r == 0 || r > self.d => {
                return bad(format!("r_d = {r} must be in 1..=d ({})", self.d))
            }
            (false, Some(_)) => return bad(format!("{a} has no reduced embedder; drop r_d")),
            _ => {}
        }
        match (a.uses_kernel(), self.k) {
            (true, None) => return bad(format!("{a} needs k")),
            (true, Some(0)) => return bad("k must be positive".into()),
            (false, Some(_)) => return bad(format!("{a} has no convolution; drop k")),
            _ => {}
        }
        if a.uses_heads() {
            if self.d % self.heads != 0 {
                return bad(format!("heads = {} must divide d = {}", self.heads, self.d));
            }
        } else if self.heads != 1 {
            return bad(format!("{a} is single-head; heads must be 1"));
        }
        if a.is_embedder_only() && self.layers != 0 {
            return bad(format!("{a} has no layer stack; layers must be 0"));
        }
        if a == Arch::Mamba {
            for (name, val) in [("d_state", self.d_state), ("rho", self.rho)] {
                match val {
                    None => return bad(format!("mamba needs {name}")),
                    Some(0) => return bad(format!("{name} must be positive")),
                    _ => {}
                }
            }
        } else if self.d_state.is_some() || self.rho.is_some() {
            return bad(format!("{a} takes no d_state/rho"));
        }
        Ok(())
    }

    pub fn to_section(&self, name: &str) -> KvSection {
        let mut s = KvSection::new(name);
        s.push("arch", self.arch);
        s.push("v", self.v);
        s.push("seq_len", self.seq_len);
        s.push("d", self.d);
        if let Some(r) = self.r_d {
            s.push("r_d", r);
        }
        s.push("alpha", self.alpha);
        if let Some(k) = self.k {
            s.push("k", k);
        }
        s.push("heads", self.heads);
        s.push("layers", self.layers);
        if let Some(x) = self.d_state {
            s.push("d_state", x);
        }
        if let Some(x) = self.rho {
            s.push("rho", x);
        }
        s.push("p_w", self.p_w);
        s.push("p_a", self.p_a);
        s
    }

    /// Parses and validates; unknown keys are rejected.
    pub fn from_section(s: &KvSection) -> Result<Self> {
        let mut f = s.fields();
        let arch = Arch::from_name(&f.require::<String>("arch")?)?;
        let cfg = Self {
            arch,
            v: f.require("v")?,
            seq_len: f.require("seq_len")?,
            d: f.require("d")?,
            r_d: f.get("r_d")?,
            alpha: f.get("alpha")?.unwrap_or(1),
            k: f.get("k")?,
            heads: f.get("heads")?.unwrap_or(1),
            layers: f.get("layers")?.unwrap_or(0),
            d_state: f.get("d_state")?,
            rho: f.get("rho")?,
            p_w: f.get("p_w")?.unwrap_or(4),
            p_a: f.get("p_a")?.unwrap_or(4),
        };
        f.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        KvDoc {
            sections: vec![self.to_section("model")],
        }
        .to_text()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let doc = KvDoc::parse(text)?;
        let s = doc
            .section("model")
            .ok_or_else(|| Error::InvalidConfig("missing [model] section".into()))?;
        Self::from_section(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for (_, c) in ModelConfig::presets() {
            c.validate().unwrap();
            assert_eq!(ModelConfig::from_text(&c.to_text()).unwrap(), c);
        }
    }

    #[test]
    fn violations_are_named() {
        let mut c = ModelConfig::embbert_q();
        c.r_d = Some(200);
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(m)) if m.contains("r_d")));
        let mut c = ModelConfig::bert_2mb();
        c.heads = 3;
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(m)) if m.contains("divide")));
        let mut c = ModelConfig::embedder();
        c.k = Some(3);
        assert!(c.validate().is_err());
        let mut c = ModelConfig::mamba_2mb();
        c.rho = None;
        assert!(c.validate().is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = ModelConfig::embbert_q().to_text() + "dropout = 0.1\n";
        assert!(matches!(ModelConfig::from_text(&text), Err(Error::Parse { .. })));
    }
}
