//! Closed-form weights, peak activations and operation counts per layer kind.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::profile::OpCounters;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LayerKind {
    StdEmbedder,
    NanoEmbedder,
    Norm,
    FeedForward,
    Attention,
    EffAttention,
    EffDiffSkip,
    /// One depthwise convolution over `d` channels, as in the embedder + conv model.
    DepthwiseConv,
    MambaMain,
    Ssm,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::StdEmbedder => "STD_EMBEDDER",
            LayerKind::NanoEmbedder => "NANO_EMBEDDER",
            LayerKind::Norm => "NORM",
            LayerKind::FeedForward => "FEED_FORWARD",
            LayerKind::Attention => "ATTENTION",
            LayerKind::EffAttention => "EFF_ATTENTION",
            LayerKind::EffDiffSkip => "EFF_DIFF_SKIP",
            LayerKind::DepthwiseConv => "DEPTHWISE_CONV",
            LayerKind::MambaMain => "MAMBA_MAIN",
            LayerKind::Ssm => "SSM",
        }
    }
}

impl std::fmt::Display for LayerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A layer kind plus whichever dimensions it needs. Unused fields are ignored.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub v: Option<u64>,
    pub len: Option<u64>,
    pub d: Option<u64>,
    pub r_d: Option<u64>,
    pub alpha: Option<u64>,
    pub heads: Option<u64>,
    pub k: Option<u64>,
    pub d_state: Option<u64>,
    /// Inner width `i`; defaults to `α·d` for the MAMBA kinds.
    pub inner: Option<u64>,
    pub rho: Option<u64>,
    /// EFF_DIFF_SKIP only: include the encoder's leading layer norm.
    pub fold_norm: bool,
}

macro_rules! setter {
    ($($f:ident),*) => {
        $(pub fn $f(mut self, value: u64) -> Self {
            self.$f = Some(value);
            self
        })*
    };
}

impl LayerSpec {
    pub fn new(kind: LayerKind) -> Self {
        Self {
            kind,
            v: None,
            len: None,
            d: None,
            r_d: None,
            alpha: None,
            heads: None,
            k: None,
            d_state: None,
            inner: None,
            rho: None,
            fold_norm: false,
        }
    }

    setter!(v, len, d, r_d, alpha, heads, k, d_state, inner, rho);

    pub fn folded_norm(mut self) -> Self {
        self.fold_norm = true;
        self
    }

    fn get(&self, value: Option<u64>, param: &'static str) -> Result<u64> {
        match value {
            Some(0) => Err(Error::InvalidArgument(format!("{} needs a positive {param}", self.kind))),
            Some(x) => Ok(x),
            None => Err(Error::MissingParameter {
                kind: self.kind.name(),
                param,
            }),
        }
    }

    fn inner_width(&self) -> Result<u64> {
        let d = self.get(self.d, "d")?;
        match (self.inner, self.alpha) {
            (Some(i), Some(a)) if i != a * d => Err(Error::InvalidArgument(format!(
                "{}: inner width {i} must equal α·d = {}",
                self.kind,
                a * d
            ))),
            (Some(i), _) => self.get(Some(i), "i"),
            (None, Some(a)) => Ok(self.get(Some(a), "alpha")? * d),
            (None, None) => Err(Error::MissingParameter {
                kind: self.kind.name(),
                param: "alpha",
            }),
        }
    }
}

/// Parameter count of one layer.
pub fn weights_count(s: &LayerSpec) -> Result<u64> {
    use LayerKind::*;
    let d = || s.get(s.d, "d");
    Ok(match s.kind {
        StdEmbedder => d()? * (s.get(s.v, "v")? + s.get(s.len, "len")? + 2),
        NanoEmbedder => {
            let d = d()?;
            s.get(s.r_d, "r_d")? * (s.get(s.v, "v")? + s.get(s.len, "len")? + 2 * d) + 2 * d
        }
        Norm => 2 * d()?,
        FeedForward => 2 * d()? * d()? * s.get(s.alpha, "alpha")?,
        Attention => {
            s.get(s.heads, "heads")?;
            4 * d()? * d()?
        }
        EffAttention => 2 * d()? * d()?,
        EffDiffSkip => {
            let (d, a, k) = (d()?, s.get(s.alpha, "alpha")?, s.get(s.k, "k")?);
            let norm = if s.fold_norm { 2 * d } else { 0 };
            2 * d * d + d * d * a + k * d * a + norm
        }
        DepthwiseConv => s.get(s.k, "k")? * d()?,
        MambaMain => {
            let (d, i) = (d()?, s.inner_width()?);
            let (ds, rho, c) = (s.get(s.d_state, "d_state")?, s.get(s.rho, "rho")?, s.get(s.k, "k")?);
            i * (3 * d + 3 * ds + 2 * rho + c + 1)
        }
        Ssm => {
            let i = s.inner_width()?;
            i * (3 * s.get(s.d_state, "d_state")? + 2 * s.get(s.rho, "rho")? + 1)
        }
    })
}

/// Largest number of activation elements live at once while the layer runs.
pub fn activations_peak(s: &LayerSpec) -> Result<u64> {
    use LayerKind::*;
    let d = || s.get(s.d, "d");
    let l = || s.get(s.len, "len");
    Ok(match s.kind {
        StdEmbedder => 2 * d()? * l()?,
        NanoEmbedder => (s.get(s.r_d, "r_d")? + 2 * d()?) * l()?,
        Norm => 2 * d()? * l()?,
        FeedForward => {
            let (d, l) = (d()?, l()?);
            2 * l * d + l * d * s.get(s.alpha, "alpha")?
        }
        Attention => {
            let (d, l) = (d()?, l()?);
            4 * d * l + l * l * s.get(s.heads, "heads")?
        }
        EffAttention => {
            let (d, l) = (d()?, l()?);
            2 * d * l + l * l
        }
        EffDiffSkip => {
            let (d, l, a) = (d()?, l()?, s.get(s.alpha, "alpha")?);
            s.get(s.k, "k")?;
            (2 * d * l + l * l).max(d * l * (2 + a))
        }
        DepthwiseConv => {
            s.get(s.k, "k")?;
            2 * d()? * l()?
        }
        MambaMain => {
            let (d, l, i) = (d()?, l()?, s.inner_width()?);
            let ds = s.get(s.d_state, "d_state")?;
            s.get(s.rho, "rho")?;
            s.get(s.k, "k")?;
            l * (d + 3 * i + 2 * i * ds + ds) + (i * ds).max(l * ds)
        }
        Ssm => {
            let (l, i) = (l()?, s.inner_width()?);
            let ds = s.get(s.d_state, "d_state")?;
            s.get(s.rho, "rho")?;
            2 * l * i * (ds + 1) + l * ds + i * ds
        }
    })
}

/// Memory accesses, summations and multiplications of one forward pass.
pub fn layer_complexity(s: &LayerSpec) -> Result<OpCounters> {
    use LayerKind::*;
    let d = || s.get(s.d, "d");
    let l = || s.get(s.len, "len");
    Ok(match s.kind {
        StdEmbedder => {
            let (d, l) = (d()?, l()?);
            OpCounters::new(l * (4 * d + 2) + 2 * d, 2 * l * d, 0)
        }
        NanoEmbedder => {
            let (d, l, r) = (d()?, l()?, s.get(s.r_d, "r_d")?);
            OpCounters::new(
                l * (4 * r * d + d + 2 * r + 2) + 2 * d,
                2 * l * d * (r + 1),
                2 * l * r * d,
            )
        }
        Norm => {
            let (d, l) = (d()?, l()?);
            OpCounters::new((l + 1) * d * 2, l * d, l * d)
        }
        FeedForward => {
            let (d, l, a) = (d()?, l()?, s.get(s.alpha, "alpha")?);
            let base = l * d * (d * a + 1);
            OpCounters::new(4 * base, 2 * base, 2 * base)
        }
        Attention => {
            let (d, l, h) = (d()?, l()?, s.get(s.heads, "heads")?);
            OpCounters::new(
                8 * l * d * d + 2 * l * l * h * (2 * d + 1),
                l * d * (4 * d + 1) + l * l * h * (2 * d + 1),
                4 * l * d * d + l * l * h * (2 * d + 3),
            )
        }
        EffAttention => {
            let (d, l) = (d()?, l()?);
            OpCounters::new(
                4 * l * d * d + 4 * l * l * d + 2 * l * l,
                2 * l * d * d + 2 * l * l * d + l * l + l * d,
                2 * l * d * d + 2 * l * l * d + 2 * l * l,
            )
        }
        EffDiffSkip => {
            let (d, l, a, k) = (d()?, l()?, s.get(s.alpha, "alpha")?, s.get(s.k, "k")?);
            let body = OpCounters::new(
                l * d * d * (4 + 2 * a) + l * l * (4 * d + 2) + l * d * k * a,
                l * d * d * (2 + a) + l * l * (2 * d + 1) + l * d * (a * k + 1),
                l * d * d * (2 + a) + l * l * (2 * d + 2) + l * d * a * k,
            );
            if s.fold_norm {
                body + OpCounters::new((l + 1) * d * 2, l * d, l * d)
            } else {
                body
            }
        }
        DepthwiseConv => {
            let n = l()? * d()? * s.get(s.k, "k")?;
            OpCounters::new(n, n, n)
        }
        MambaMain => {
            let (d, l, i, c) = (d()?, l()?, s.inner_width()?, s.get(s.k, "k")?);
            let ssm = layer_complexity(&LayerSpec { kind: Ssm, ..s.clone() })?;
            OpCounters::new(
                l * i * (6 * d + 9) + l * d + c,
                l * i * (3 * d + 2 + c) + l * d,
                l * i * (3 * d + c + 5),
            ) + ssm
        }
        Ssm => {
            let (l, i) = (l()?, s.inner_width()?);
            let (ds, rho) = (s.get(s.d_state, "d_state")?, s.get(s.rho, "rho")?);
            OpCounters::new(
                l * i * (18 * ds + 4 * rho + 8) + i,
                l * i * (4 * ds + 2 * rho + 2),
                l * i * (7 * ds + 2 * rho + 2),
            )
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use LayerKind::*;

    #[test]
    fn hand_evaluated_weight_counts() {
        let nano = LayerSpec::new(NanoEmbedder).v(8192).len(256).d(128).r_d(16);
        assert_eq!(weights_count(&nano).unwrap(), 139_520);
        let std = LayerSpec::new(StdEmbedder).v(32768).len(512).d(128);
        assert_eq!(weights_count(&std).unwrap(), 4_260_096);
        assert_eq!(weights_count(&LayerSpec::new(Norm).d(1)).unwrap(), 2);
        let skip = LayerSpec::new(EffDiffSkip).d(128).alpha(1).k(32);
        assert_eq!(weights_count(&skip).unwrap(), 2 * 16384 + 16384 + 4096);
        assert_eq!(weights_count(&skip.folded_norm()).unwrap(), 53_504);
    }

    #[test]
    fn published_activation_peaks() {
        let skip = LayerSpec::new(EffDiffSkip).d(128).len(256).alpha(1).k(32);
        assert_eq!(activations_peak(&skip).unwrap(), 131_072);
        let mamba = LayerSpec::new(MambaMain).d(64).alpha(1).d_state(6).len(256).rho(4).k(4);
        assert_eq!(activations_peak(&mamba).unwrap(), 265_216);
        let attn = LayerSpec::new(Attention).d(80).len(256).heads(2);
        assert_eq!(activations_peak(&attn).unwrap(), 212_992);
    }

    #[test]
    fn small_complexity_cases() {
        let e = LayerSpec::new(StdEmbedder).v(10).len(2).d(4);
        assert_eq!(layer_complexity(&e).unwrap(), OpCounters::new(44, 16, 0));
        let n = LayerSpec::new(Norm).len(3).d(5);
        assert_eq!(layer_complexity(&n).unwrap(), OpCounters::new(40, 15, 15));
        let f = LayerSpec::new(FeedForward).len(1).d(1).alpha(1);
        assert_eq!(layer_complexity(&f).unwrap(), OpCounters::new(8, 4, 4));
    }

    #[test]
    fn mamba_rows_by_hand() {
        // ℓ=2, d=1, i=1, d_s=1, ρ=1, c=1
        let s = LayerSpec::new(Ssm).len(2).d(1).inner(1).d_state(1).rho(1);
        assert_eq!(layer_complexity(&s).unwrap(), OpCounters::new(2 * 30 + 1, 16, 22));
        assert_eq!(weights_count(&s).unwrap(), 6);
        let m = LayerSpec { kind: MambaMain, ..s }.k(1);
        assert_eq!(
            layer_complexity(&m).unwrap(),
            OpCounters::new(2 * 15 + 2 + 1 + 61, 2 * 6 + 2 + 16, 2 * 9 + 22)
        );
        assert_eq!(weights_count(&m).unwrap(), 3 + 3 + 2 + 1 + 1);
    }

    #[test]
    fn missing_and_inconsistent_parameters() {
        let e = weights_count(&LayerSpec::new(NanoEmbedder).v(8).len(4).d(4)).unwrap_err();
        assert!(matches!(e, Error::MissingParameter { kind: "NANO_EMBEDDER", param: "r_d" }));
        assert!(matches!(
            activations_peak(&LayerSpec::new(Ssm).len(4).d(4).alpha(1).d_state(2)),
            Err(Error::MissingParameter { param: "rho", .. })
        ));
        let bad = LayerSpec::new(MambaMain).d(4).alpha(2).inner(4).d_state(1).rho(1).k(1).len(1);
        assert!(weights_count(&bad).is_err());
        assert!(weights_count(&LayerSpec::new(Norm).d(0)).is_err());
    }
}
