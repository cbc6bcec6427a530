//! Whole networks assembled from blocks according to a [`ModelConfig`].
//!
//! Parameter names are dotted paths, e.g. `layers.2.attn.w1` or
//! `embedder.token_proj`; they key checkpoints, trainable masks and the
//! optimizer state. Profiled forwards open one section per accounted layer,
//! using the same names as the analyzer's layer listing.

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Record, RecordPayload};
pub use config::{Arch, ModelConfig};

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::blocks::{
    self, efficient_attention, efficient_encoder, feed_forward, layer_norm, nano_embed, standard_attention,
    standard_embed, uniform, Binder, DepthwiseConvParams, DepthwiseConvVars, EfficientAttentionParams,
    EfficientAttentionVars, EncoderParams, EncoderVars, FeedForwardParams, FeedForwardVars, NanoEmbedderParams,
    NanoEmbedderVars, NormParams, NormVars, ParamVisit, StandardAttentionParams, StandardAttentionVars,
    StandardEmbedderParams, StandardEmbedderVars,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use crate::textpipe::special;

#[derive(Clone, Debug, PartialEq)]
pub enum Embedder {
    Nano(NanoEmbedderParams),
    Standard(StandardEmbedderParams),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Attention {
    Standard(StandardAttentionParams),
    /// Efficient attention with a residual add.
    Efficient(EfficientAttentionParams),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Efficient(EncoderParams),
    Bert {
        attn: Attention,
        norm1: NormParams,
        ff: FeedForwardParams,
        norm2: NormParams,
    },
}

/// Linear classification head, outside the memory accounting.
#[derive(Clone, Debug, PartialEq)]
pub struct Head {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Head {
    pub fn zeros(d: usize, classes: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[d, classes]),
            bias: Tensor::zeros(&[classes]),
        }
    }

    pub fn classes(&self) -> usize {
        self.bias.numel()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub embedder: Embedder,
    pub layers: Vec<Layer>,
    pub conv: Option<DepthwiseConvParams>,
    pub head: Option<Head>,
}

enum EmbedderVars {
    Nano(NanoEmbedderVars),
    Standard(StandardEmbedderVars),
}

enum AttentionVars {
    Standard(StandardAttentionVars),
    Efficient(EfficientAttentionVars),
}

enum LayerVars {
    Efficient(EncoderVars),
    Bert {
        attn: AttentionVars,
        norm1: NormVars,
        ff: FeedForwardVars,
        norm2: NormVars,
    },
}

/// A model's parameters placed into one graph.
pub struct ModelVars {
    embedder: EmbedderVars,
    layers: Vec<LayerVars>,
    conv: Option<DepthwiseConvVars>,
    head: Option<(Var, Var)>,
}

/// Seeded initialization; the head, if any, is attached separately.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    if !config.arch.is_executable() {
        return Err(Error::Unsupported(format!("{} is accounting-only", config.arch)));
    }
    let c = config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let embedder = if c.arch.uses_nano_embedder() {
        Embedder::Nano(NanoEmbedderParams::init(&mut rng, c.v, c.seq_len, c.d, c.r_d()?))
    } else {
        Embedder::Standard(StandardEmbedderParams::init(&mut rng, c.v, c.seq_len, c.d))
    };
    let mut layers = Vec::with_capacity(c.layers);
    for _ in 0..c.layers {
        layers.push(match c.arch {
            Arch::EmbBert => Layer::Efficient(EncoderParams::init(&mut rng, c.d, c.alpha, c.k()?)),
            Arch::BertStd | Arch::BertNe => Layer::Bert {
                attn: Attention::Standard(StandardAttentionParams::init(&mut rng, c.d, c.heads)?),
                norm1: NormParams::new(c.d),
                ff: FeedForwardParams::init(&mut rng, c.d, c.alpha),
                norm2: NormParams::new(c.d),
            },
            Arch::BertEa | Arch::BertNeEa => Layer::Bert {
                attn: Attention::Efficient(EfficientAttentionParams::init(&mut rng, c.d)),
                norm1: NormParams::new(c.d),
                ff: FeedForwardParams::init(&mut rng, c.d, c.alpha),
                norm2: NormParams::new(c.d),
            },
            Arch::EmbedderOnly | Arch::EmbedderConv | Arch::Mamba => unreachable!("validated: no layers"),
        });
    }
    let conv = match c.arch {
        Arch::EmbedderConv => Some(DepthwiseConvParams::init(&mut rng, c.d, c.k()?)),
        _ => None,
    };
    Ok(Model {
        config: config.clone(),
        embedder,
        layers,
        conv,
        head: None,
    })
}

fn visit_scoped<P: ParamVisit + ?Sized>(p: &P, scope: &str, f: &mut dyn FnMut(&str, &Tensor)) {
    p.visit(&mut |n, t| f(&format!("{scope}.{n}"), t));
}

fn visit_scoped_mut<P: ParamVisit + ?Sized>(p: &mut P, scope: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
    p.visit_mut(&mut |n, t| f(&format!("{scope}.{n}"), t));
}

impl ParamVisit for Embedder {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        match self {
            Embedder::Nano(p) => p.visit(f),
            Embedder::Standard(p) => p.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            Embedder::Nano(p) => p.visit_mut(f),
            Embedder::Standard(p) => p.visit_mut(f),
        }
    }
}

impl ParamVisit for Attention {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        match self {
            Attention::Standard(p) => p.visit(f),
            Attention::Efficient(p) => p.visit(f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            Attention::Standard(p) => p.visit_mut(f),
            Attention::Efficient(p) => p.visit_mut(f),
        }
    }
}

impl ParamVisit for Layer {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        match self {
            Layer::Efficient(p) => p.visit(f),
            Layer::Bert { attn, norm1, ff, norm2 } => {
                visit_scoped(attn, "attn", f);
                visit_scoped(norm1, "norm1", f);
                visit_scoped(ff, "ff", f);
                visit_scoped(norm2, "norm2", f);
            }
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            Layer::Efficient(p) => p.visit_mut(f),
            Layer::Bert { attn, norm1, ff, norm2 } => {
                visit_scoped_mut(attn, "attn", f);
                visit_scoped_mut(norm1, "norm1", f);
                visit_scoped_mut(ff, "ff", f);
                visit_scoped_mut(norm2, "norm2", f);
            }
        }
    }
}

impl ParamVisit for Head {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        f("weight", &self.weight);
        f("bias", &self.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f("weight", &mut self.weight);
        f("bias", &mut self.bias);
    }
}

impl ParamVisit for Model {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        visit_scoped(&self.embedder, "embedder", f);
        for (i, l) in self.layers.iter().enumerate() {
            visit_scoped(l, &format!("layers.{i}"), f);
        }
        if let Some(c) = &self.conv {
            visit_scoped(c, "conv", f);
        }
        if let Some(h) = &self.head {
            visit_scoped(h, "head", f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        visit_scoped_mut(&mut self.embedder, "embedder", f);
        for (i, l) in self.layers.iter_mut().enumerate() {
            visit_scoped_mut(l, &format!("layers.{i}"), f);
        }
        if let Some(c) = &mut self.conv {
            visit_scoped_mut(c, "conv", f);
        }
        if let Some(h) = &mut self.head {
            visit_scoped_mut(h, "head", f);
        }
    }
}

/// Names excluded from the weight accounting: the head and the λ vectors.
pub fn is_accounted(name: &str) -> bool {
    !(name.starts_with("head.") || name.contains(".lambdas."))
}

fn bind_scoped<T>(
    b: &mut Binder,
    scope: &str,
    f: impl FnOnce(&mut Binder) -> Result<T>,
) -> Result<T> {
    b.push_scope(scope);
    let r = f(b);
    b.pop_scope();
    r
}

impl Model {
    /// Seeded head; draws from its own stream so the body init is unaffected.
    pub fn attach_head(&mut self, classes: usize, seed: u64) -> Result<()> {
        if classes < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 classes, got {classes}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        self.head = Some(Head {
            weight: uniform(&mut rng, &[self.config.d, classes], blocks::init_bound(self.config.d)),
            bias: Tensor::zeros(&[classes]),
        });
        Ok(())
    }

    /// Single-output head for regression tasks.
    pub fn attach_regression_head(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        self.head = Some(Head {
            weight: uniform(&mut rng, &[self.config.d, 1], blocks::init_bound(self.config.d)),
            bias: Tensor::zeros(&[1]),
        });
    }

    /// Parameters under the weight accounting (head and λ vectors excluded).
    pub fn weight_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |name, t| {
            if is_accounted(name) {
                n += t.numel()
            }
        });
        n
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n.to_string(), t.clone())));
        out
    }

    pub fn tensor(&self, name: &str) -> Option<Tensor> {
        let mut found = None;
        self.visit(&mut |n, t| {
            if n == name {
                found = Some(t.clone())
            }
        });
        found
    }

    /// Replaces a tensor by name; the shape must match.
    pub fn set_tensor(&mut self, name: &str, value: Tensor) -> Result<()> {
        let mut value = Some(value);
        let mut err = None;
        self.visit_mut(&mut |n, t| {
            if n == name {
                let v = value.take().expect("names are unique");
                if v.shape() != t.shape() {
                    err = Some(Error::ShapeMismatch {
                        op: "set_tensor",
                        lhs: t.shape().to_vec(),
                        rhs: v.shape().to_vec(),
                    });
                } else {
                    *t = v;
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        match value {
            None => Ok(()),
            Some(_) => Err(Error::InvalidArgument(format!("model has no tensor `{name}`"))),
        }
    }

    /// Precomputes λ scalars in every efficient encoder.
    pub fn freeze_lambdas(&mut self) -> Result<()> {
        for l in &mut self.layers {
            if let Layer::Efficient(p) = l {
                p.freeze_lambdas()?;
            }
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph, b: &mut Binder) -> Result<ModelVars> {
        let embedder = bind_scoped(b, "embedder", |b| {
            Ok(match &self.embedder {
                Embedder::Nano(p) => EmbedderVars::Nano(p.bind(g, b)?),
                Embedder::Standard(p) => EmbedderVars::Standard(p.bind(g, b)?),
            })
        })?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            layers.push(bind_scoped(b, &format!("layers.{i}"), |b| {
                Ok(match l {
                    Layer::Efficient(p) => LayerVars::Efficient(p.bind(g, b)?),
                    Layer::Bert { attn, norm1, ff, norm2 } => LayerVars::Bert {
                        attn: bind_scoped(b, "attn", |b| {
                            Ok(match attn {
                                Attention::Standard(p) => AttentionVars::Standard(p.bind(g, b)?),
                                Attention::Efficient(p) => AttentionVars::Efficient(p.bind(g, b)?),
                            })
                        })?,
                        norm1: bind_scoped(b, "norm1", |b| norm1.bind(g, b))?,
                        ff: bind_scoped(b, "ff", |b| ff.bind(g, b))?,
                        norm2: bind_scoped(b, "norm2", |b| norm2.bind(g, b))?,
                    },
                })
            })?);
        }
        let conv = match &self.conv {
            Some(c) => Some(bind_scoped(b, "conv", |b| c.bind(g, b))?),
            None => None,
        };
        let head = match &self.head {
            Some(h) => Some(bind_scoped(b, "head", |b| {
                Ok((b.bind(g, "weight", &h.weight)?, b.bind(g, "bias", &h.bias)?))
            })?),
            None => None,
        };
        Ok(ModelVars {
            embedder,
            layers,
            conv,
            head,
        })
    }

    /// `[CLS] tokens… [PAD]…` padded to ℓ, with segment 0 for CLS and padding.
    pub fn prepare_input(&self, tokens: &[usize], segments: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
        let len = self.config.seq_len;
        if tokens.len() + 1 > len {
            return Err(Error::SequenceLength {
                expected: len - 1,
                found: tokens.len(),
            });
        }
        if !segments.is_empty() && segments.len() != tokens.len() {
            return Err(Error::LengthMismatch(tokens.len(), segments.len()));
        }
        let mut ids = Vec::with_capacity(len);
        ids.push(special::CLS);
        ids.extend_from_slice(tokens);
        ids.resize(len, special::PAD);
        let mut segs = vec![0; len];
        segs[1..=segments.len()].copy_from_slice(segments);
        Ok((ids, segs))
    }

    /// Hidden states `[ℓ × d]` for full-length `ids`. Each accounted layer
    /// runs inside a profiler section named as in the analyzer listing.
    pub fn encode(&self, g: &mut Graph, vars: &ModelVars, ids: &[usize], segments: &[usize]) -> Result<Var> {
        g.begin_section("embedder");
        let mut x = match &vars.embedder {
            EmbedderVars::Nano(p) => nano_embed(g, p, ids, segments)?,
            EmbedderVars::Standard(p) => standard_embed(g, p, ids, segments)?,
        };
        for (i, l) in vars.layers.iter().enumerate() {
            match l {
                LayerVars::Efficient(p) => {
                    g.begin_section(format!("layers.{i}"));
                    x = efficient_encoder(g, p, x)?;
                }
                LayerVars::Bert { attn, norm1, ff, norm2 } => {
                    g.begin_section(format!("layers.{i}.attn"));
                    x = match attn {
                        AttentionVars::Standard(p) => standard_attention(g, p, x)?,
                        AttentionVars::Efficient(p) => efficient_attention(g, p, x, true)?,
                    };
                    g.begin_section(format!("layers.{i}.norm1"));
                    x = layer_norm(g, norm1, x)?;
                    g.begin_section(format!("layers.{i}.ff"));
                    x = feed_forward(g, ff, x)?;
                    g.begin_section(format!("layers.{i}.norm2"));
                    x = layer_norm(g, norm2, x)?;
                }
            }
        }
        if let Some(c) = &vars.conv {
            g.begin_section("conv");
            x = DepthwiseConvParams::apply(g, c, x)?;
        }
        g.end_section();
        Ok(x)
    }

    /// CLS row for encoder archs, column max over positions for embedder archs.
    pub fn pool(&self, g: &mut Graph, hidden: Var) -> Result<Var> {
        if self.config.arch.is_embedder_only() {
            g.max_pool_rows(hidden)
        } else {
            g.select_row(hidden, 0)
        }
    }

    pub fn logits(&self, g: &mut Graph, vars: &ModelVars, pooled: Var) -> Result<Var> {
        let (w, b) = vars
            .head
            .ok_or_else(|| Error::InvalidArgument("model has no classification head".into()))?;
        let z = g.matmul(pooled, w)?;
        g.add_bias(z, b)
    }

    /// Token logits `[ℓ × v]` through the transposed embedding tables, so
    /// masked-token prediction needs no extra parameters.
    pub fn mlm_logits(&self, g: &mut Graph, vars: &ModelVars, hidden: Var) -> Result<Var> {
        match &vars.embedder {
            EmbedderVars::Nano(p) => {
                let reduced = g.matmul_t(hidden, p.token_proj, 1.0)?;
                g.matmul_t(reduced, p.token_table, 1.0)
            }
            EmbedderVars::Standard(p) => g.matmul_t(hidden, p.token_table, 1.0),
        }
    }

    /// Logits for one unpadded token sequence; a CLS token is prepended.
    pub fn forward_classify(&self, tokens: &[usize], segments: &[usize], num_classes: usize) -> Result<Tensor> {
        match &self.head {
            Some(h) if h.classes() == num_classes => {}
            Some(h) => {
                return Err(Error::InvalidArgument(format!(
                    "head has {} classes, asked for {num_classes}",
                    h.classes()
                )))
            }
            None => return Err(Error::InvalidArgument("model has no classification head".into())),
        }
        let (ids, segs) = self.prepare_input(tokens, segments)?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, &mut Binder::frozen())?;
        let h = self.encode(&mut g, &vars, &ids, &segs)?;
        let p = self.pool(&mut g, h)?;
        let z = self.logits(&mut g, &vars, p)?;
        Ok(g.value(z).clone().reshape(vec![num_classes])?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum MaskMode {
    All,
    /// Head, normalization parameters and λ vectors.
    Peft,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct TrainableMask {
    pub trainable: BTreeSet<String>,
    pub trainable_params: usize,
    pub total_params: usize,
}

impl TrainableMask {
    pub fn contains(&self, name: &str) -> bool {
        self.trainable.contains(name)
    }

    pub fn fraction(&self) -> f64 {
        self.trainable_params as f64 / self.total_params as f64
    }
}

fn peft_selects(name: &str) -> bool {
    name.starts_with("head.")
        || name.ends_with(".gamma")
        || name.ends_with(".beta")
        || name.contains(".lambdas.")
}

/// The fraction is over every stored parameter, head and λ vectors included.
pub fn trainable_mask(model: &Model, mode: MaskMode) -> TrainableMask {
    let mut mask = TrainableMask {
        trainable: BTreeSet::new(),
        trainable_params: 0,
        total_params: 0,
    };
    model.visit(&mut |name, t| {
        mask.total_params += t.numel();
        if mode == MaskMode::All || peft_selects(name) {
            mask.trainable.insert(name.to_string());
            mask.trainable_params += t.numel();
        }
    });
    mask
}


#[cfg(test)]
mod tests {
    use super::*;

    fn profile_peaks(model: &Model) -> Vec<crate::profile::SectionProfile> {
        let mut g = Graph::profiled();
        let vars = model.bind(&mut g, &mut Binder::frozen()).unwrap();
        let ids: Vec<usize> = (0..model.config.seq_len).map(|i| i % model.config.v).collect();
        let segs = vec![0; ids.len()];
        model.encode(&mut g, &vars, &ids, &segs).unwrap();
        g.take_profiler().unwrap().into_sections()
    }

    #[test]
    fn preset_weight_counts_match_table() {
        let cases = [
            (ModelConfig::embbert_q(), 353_536),
            (ModelConfig::bert_2mb(), 287_520),
            (ModelConfig::embedder(), 291_456),
            (ModelConfig::embedder_conv(), 296_576),
        ];
        for (c, want) in cases {
            let m = build_model(&c, 1).unwrap();
            assert_eq!(m.weight_count(), want, "{}", c.arch);
        }
    }

    #[test]
    fn mamba_is_not_buildable() {
        assert!(matches!(build_model(&ModelConfig::mamba_2mb(), 0), Err(Error::Unsupported(_))));
    }

    #[test]
    fn embbert_layer_peaks_equal_closed_form() {
        let m = build_model(&ModelConfig::embbert_q(), 3).unwrap();
        let secs = profile_peaks(&m);
        let names: Vec<_> = secs.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names, ["embedder", "layers.0", "layers.1", "layers.2", "layers.3"]);
        let (l, d) = (256u64, 128u64);
        // norm output, EA scores and the skip branch at the worst point
        let encoder_peak = secs[1..].iter().map(|s| s.peak_activations).max().unwrap();
        assert_eq!(encoder_peak, 131_072);
        assert_eq!(secs[0].peak_activations, 16 * l + 2 * d * l);
    }

    #[test]
    fn bert_attention_peak_is_212992() {
        let m = build_model(&ModelConfig::bert_2mb(), 3).unwrap();
        let secs = profile_peaks(&m);
        let peak = secs.iter().filter(|s| s.name != "embedder").map(|s| s.peak_activations).max();
        assert_eq!(peak, Some(212_992));
    }

    #[test]
    fn classify_prepends_cls_and_checks_lengths() {
        let mut c = ModelConfig::embbert_q();
        c.v = 64;
        c.seq_len = 16;
        c.d = 16;
        c.r_d = Some(4);
        c.k = Some(3);
        c.layers = 2;
        let mut m = build_model(&c, 9).unwrap();
        assert!(m.forward_classify(&[5, 6], &[], 2).is_err());
        m.attach_head(3, 9).unwrap();
        let z = m.forward_classify(&[5, 6, 7], &[], 3).unwrap();
        assert_eq!(z.shape(), &[3]);
        assert!(z.is_finite());
        assert!(m.forward_classify(&[5; 16], &[], 3).is_err());
        assert!(m.forward_classify(&[5; 15], &[], 3).is_ok());
        assert!(m.forward_classify(&[5], &[], 2).is_err());
        let (ids, segs) = m.prepare_input(&[7, 8], &[0, 1]).unwrap();
        assert_eq!(&ids[..4], &[special::CLS, 7, 8, special::PAD]);
        assert_eq!(&segs[..4], &[0, 0, 1, 0]);
        assert_eq!(m.forward_classify(&[5, 6, 7], &[], 3).unwrap(), z);
    }

    #[test]
    fn head_seed_does_not_disturb_body() {
        let c = ModelConfig::embedder_conv();
        let a = build_model(&c, 4).unwrap();
        let mut b = a.clone();
        b.attach_head(2, 77).unwrap();
        assert_eq!(a.embedder, b.embedder);
        assert_eq!(a.weight_count(), b.weight_count());
        assert_eq!(b.stored_count(), a.stored_count() + 320 * 2 + 2);
    }

    #[test]
    fn peft_mask_selects_head_norms_and_lambdas() {
        let mut m = build_model(&ModelConfig::embbert_q(), 0).unwrap();
        m.attach_head(2, 0).unwrap();
        let mask = trainable_mask(&m, MaskMode::Peft);
        assert!(mask.contains("head.weight"));
        assert!(mask.contains("layers.3.norm.gamma"));
        assert!(mask.contains("layers.0.lambdas.l4"));
        assert!(!mask.contains("layers.0.attn.w1"));
        // 4 layers × (2d norm + 4d λ) + head
        assert_eq!(mask.trainable_params, 4 * 6 * 128 + 128 * 2 + 2);
        let all = trainable_mask(&m, MaskMode::All);
        assert_eq!(all.trainable_params, m.stored_count());
        assert!(mask.fraction() < 0.02);
    }

    #[test]
    fn checkpoint_round_trip_keeps_bits_and_frozen_lambdas() {
        let mut c = ModelConfig::embbert_q();
        c.v = 100;
        c.seq_len = 12;
        c.d = 8;
        c.r_d = Some(2);
        c.k = Some(4);
        c.layers = 2;
        let mut m = build_model(&c, 5).unwrap();
        m.attach_head(4, 5).unwrap();
        m.layers[0] = match m.layers[0].clone() {
            Layer::Efficient(mut p) => {
                p.lambdas.l1.data_mut().fill(0.3);
                p.lambdas.l2.data_mut().fill(0.2);
                p.freeze_lambdas().unwrap();
                Layer::Efficient(p)
            }
            _ => unreachable!(),
        };
        let bytes = write_checkpoint(&m.config, &m.to_records()).unwrap();
        let (cfg, recs) = read_checkpoint(&bytes).unwrap();
        assert_eq!(cfg, c);
        let back = Model::from_tensors(
            &cfg,
            recs.into_iter()
                .map(|r| match r.payload {
                    RecordPayload::Fp32(t) => (r.name, t),
                    _ => unreachable!(),
                })
                .collect(),
        )
        .unwrap();
        assert_eq!(back, m);
        assert!(read_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_checkpoint(&bad).is_err());
    }
}
