//! Memory and compute accounting.
//!
//! Analytic reports compose the per-kind closed forms in [`formulas`] along
//! the layer listing of a config. Empirical reports run a profiled forward
//! pass and read the same quantities off live tensors and the activation
//! ledger. Both use identical layer names, so they can be diffed line by line.
//!
//! The output head is outside the accounting, and so are the λ vectors of
//! the efficient encoder.

mod formulas;

pub use formulas::{activations_peak, layer_complexity, weights_count, LayerKind, LayerSpec};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::blocks::{Binder, ParamVisit};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{is_accounted, Arch, Model, ModelConfig};
use crate::profile::OpCounters;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMemory {
    pub name: String,
    pub kind: LayerKind,
    pub weights: u64,
    pub activations: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub layers: Vec<LayerMemory>,
    pub w_total: u64,
    pub a_peak: u64,
    pub p_w: u32,
    pub p_a: u32,
    /// `w_total·p_w + a_peak·p_a`.
    pub bytes_total: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerComplexity {
    pub name: String,
    pub kind: LayerKind,
    pub counters: OpCounters,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub layers: Vec<LayerComplexity>,
    pub total: OpCounters,
}

/// Memory and complexity for one config, from either side.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub source: ReportSource,
    pub config: ModelConfig,
    pub memory: MemoryReport,
    pub complexity: ComplexityReport,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportSource {
    Analytic,
    Empirical,
}

/// Accounted layers of a config, in execution order, with the names used
/// for profiler sections.
pub fn model_layers(c: &ModelConfig) -> Result<Vec<(String, LayerSpec)>> {
    c.validate()?;
    let (v, len, d, a) = (c.v as u64, c.seq_len as u64, c.d as u64, c.alpha as u64);
    let mut out = Vec::new();
    let embedder = if c.arch.uses_nano_embedder() {
        LayerSpec::new(LayerKind::NanoEmbedder).r_d(c.r_d()? as u64)
    } else {
        LayerSpec::new(LayerKind::StdEmbedder)
    };
    out.push(("embedder".to_string(), embedder.v(v).len(len).d(d)));
    let base = |kind| LayerSpec::new(kind).len(len).d(d);
    for i in 0..c.layers {
        match c.arch {
            Arch::EmbBert => out.push((
                format!("layers.{i}"),
                base(LayerKind::EffDiffSkip).alpha(a).k(c.k()? as u64).folded_norm(),
            )),
            Arch::BertStd | Arch::BertNe | Arch::BertEa | Arch::BertNeEa => {
                let attn = match c.arch {
                    Arch::BertStd | Arch::BertNe => base(LayerKind::Attention).heads(c.heads as u64),
                    _ => base(LayerKind::EffAttention),
                };
                out.push((format!("layers.{i}.attn"), attn));
                out.push((format!("layers.{i}.norm1"), base(LayerKind::Norm)));
                out.push((format!("layers.{i}.ff"), base(LayerKind::FeedForward).alpha(a)));
                out.push((format!("layers.{i}.norm2"), base(LayerKind::Norm)));
            }
            Arch::Mamba => out.push((
                format!("layers.{i}"),
                base(LayerKind::MambaMain)
                    .alpha(a)
                    .k(c.k()? as u64)
                    .d_state(c.d_state.expect("validated") as u64)
                    .rho(c.rho.expect("validated") as u64),
            )),
            Arch::EmbedderOnly | Arch::EmbedderConv => unreachable!("validated: no layers"),
        }
    }
    if c.arch == Arch::EmbedderConv {
        out.push(("conv".to_string(), base(LayerKind::DepthwiseConv).k(c.k()? as u64)));
    }
    Ok(out)
}

fn memory_from_layers(c: &ModelConfig, layers: Vec<LayerMemory>) -> MemoryReport {
    let w_total = layers.iter().map(|l| l.weights).sum::<u64>();
    let a_peak = layers.iter().map(|l| l.activations).max().unwrap_or(0);
    MemoryReport {
        layers,
        w_total,
        a_peak,
        p_w: c.p_w,
        p_a: c.p_a,
        bytes_total: w_total * c.p_w as u64 + a_peak * c.p_a as u64,
    }
}

fn complexity_from_layers(layers: Vec<LayerComplexity>) -> ComplexityReport {
    let total = layers.iter().map(|l| l.counters).sum();
    ComplexityReport { layers, total }
}

/// `(W_emb + N·W_enc)·p_w + max(A_emb, A_enc)·p_a`, head excluded.
pub fn model_memory(c: &ModelConfig) -> Result<MemoryReport> {
    let layers = model_layers(c)?
        .into_iter()
        .map(|(name, s)| {
            Ok(LayerMemory {
                name,
                kind: s.kind,
                weights: weights_count(&s)?,
                activations: activations_peak(&s)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(memory_from_layers(c, layers))
}

pub fn model_complexity(c: &ModelConfig) -> Result<ComplexityReport> {
    let layers = model_layers(c)?
        .into_iter()
        .map(|(name, s)| {
            Ok(LayerComplexity {
                name,
                kind: s.kind,
                counters: layer_complexity(&s)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(complexity_from_layers(layers))
}

pub fn analyze(c: &ModelConfig) -> Result<AnalysisReport> {
    Ok(AnalysisReport {
        source: ReportSource::Analytic,
        config: c.clone(),
        memory: model_memory(c)?,
        complexity: model_complexity(c)?,
    })
}

/// Runs one profiled forward pass over `tokens`, padded to ℓ behind a
/// leading CLS. Counts depend only on shapes, so any valid input gives the
/// same report.
pub fn empirical_profile(model: &Model, tokens: &[usize]) -> Result<AnalysisReport> {
    let c = &model.config;
    let specs = model_layers(c)?;
    let (ids, segs) = model.prepare_input(tokens, &[])?;
    let mut g = Graph::profiled();
    let vars = model.bind(&mut g, &mut Binder::frozen())?;
    model.encode(&mut g, &vars, &ids, &segs)?;
    let sections = g.take_profiler().expect("profiled graph").into_sections();
    if sections.len() != specs.len() || sections.iter().zip(&specs).any(|(s, (n, _))| &s.name != n) {
        return Err(Error::ConfigMismatch(format!(
            "profiled sections {:?} do not follow the layer listing",
            sections.iter().map(|s| &s.name).collect::<Vec<_>>()
        )));
    }
    let mut weights: BTreeMap<&str, u64> = BTreeMap::new();
    model.visit(&mut |name, t| {
        if !is_accounted(name) {
            return;
        }
        // longest layer name that prefixes the tensor name
        let owner = specs
            .iter()
            .map(|(n, _)| n.as_str())
            .filter(|n| name.strip_prefix(n).is_some_and(|rest| rest.starts_with('.')))
            .max_by_key(|n| n.len());
        if let Some(o) = owner {
            *weights.entry(o).or_default() += t.numel() as u64;
        }
    });
    let mem_layers = specs
        .iter()
        .zip(&sections)
        .map(|((n, s), sec)| LayerMemory {
            name: n.clone(),
            kind: s.kind,
            weights: weights.get(n.as_str()).copied().unwrap_or(0),
            activations: sec.peak_activations,
        })
        .collect();
    let cx_layers = specs
        .iter()
        .zip(&sections)
        .map(|((n, s), sec)| LayerComplexity {
            name: n.clone(),
            kind: s.kind,
            counters: sec.counters,
        })
        .collect();
    Ok(AnalysisReport {
        source: ReportSource::Empirical,
        config: c.clone(),
        memory: memory_from_layers(c, mem_layers),
        complexity: complexity_from_layers(cx_layers),
    })
}

/// One disagreement between two reports.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct Divergence {
    pub layer: String,
    pub quantity: &'static str,
    pub left: u64,
    pub right: u64,
    /// `right − left`.
    pub delta: i128,
}

/// Per-layer signed deltas, `right − left`; empty means exact agreement.
pub fn compare_reports(left: &AnalysisReport, right: &AnalysisReport) -> Result<Vec<Divergence>> {
    if left.config != right.config {
        return Err(Error::ConfigMismatch(format!(
            "reports describe different configs ({} vs {})",
            left.config.arch, right.config.arch
        )));
    }
    let mut out = Vec::new();
    let mut push = |layer: &str, quantity, l: u64, r: u64| {
        if l != r {
            out.push(Divergence {
                layer: layer.to_string(),
                quantity,
                left: l,
                right: r,
                delta: r as i128 - l as i128,
            });
        }
    };
    let names: Vec<&str> = {
        let mut v: Vec<&str> = left.memory.layers.iter().map(|l| l.name.as_str()).collect();
        for l in &right.memory.layers {
            if !v.contains(&l.name.as_str()) {
                v.push(&l.name);
            }
        }
        v
    };
    let find_m = |r: &AnalysisReport, n: &str| r.memory.layers.iter().find(|l| l.name == n).cloned();
    let find_c = |r: &AnalysisReport, n: &str| r.complexity.layers.iter().find(|l| l.name == n).map(|l| l.counters);
    for n in names {
        let (lm, rm) = (find_m(left, n), find_m(right, n));
        let (lc, rc) = (find_c(left, n), find_c(right, n));
        let zero = |m: &Option<LayerMemory>| m.as_ref().map_or((0, 0), |m| (m.weights, m.activations));
        let (lw, la) = zero(&lm);
        let (rw, ra) = zero(&rm);
        if lm.is_some() != rm.is_some() {
            push(n, "present", lm.is_some() as u64, rm.is_some() as u64);
        }
        push(n, "weights", lw, rw);
        push(n, "activations", la, ra);
        let (lc, rc) = (lc.unwrap_or_default(), rc.unwrap_or_default());
        push(n, "memory_accesses", lc.memory_accesses, rc.memory_accesses);
        push(n, "summations", lc.summations, rc.summations);
        push(n, "multiplications", lc.multiplications, rc.multiplications);
    }
    push("total", "w_total", left.memory.w_total, right.memory.w_total);
    push("total", "a_peak", left.memory.a_peak, right.memory.a_peak);
    push("total", "bytes_total", left.memory.bytes_total, right.memory.bytes_total);
    Ok(out)
}

fn group(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

impl AnalysisReport {
    /// Fixed-width table, one line per layer, then the totals.
    pub fn to_text(&self) -> String {
        let c = &self.config;
        let m = &self.memory;
        let mut s = String::new();
        let src = match self.source {
            ReportSource::Analytic => "analytic",
            ReportSource::Empirical => "empirical",
        };
        let _ = writeln!(s, "# {src} report: arch {} v={} len={} d={} layers={}", c.arch, c.v, c.seq_len, c.d, c.layers);
        let _ = writeln!(
            s,
            "{:<16} {:<15} {:>12} {:>12} {:>16} {:>16} {:>16}",
            "layer", "kind", "weights", "activations", "mem_accesses", "summations", "multiplications"
        );
        for (lm, lc) in m.layers.iter().zip(&self.complexity.layers) {
            let _ = writeln!(
                s,
                "{:<16} {:<15} {:>12} {:>12} {:>16} {:>16} {:>16}",
                lm.name,
                lm.kind.name(),
                group(lm.weights),
                group(lm.activations),
                group(lc.counters.memory_accesses),
                group(lc.counters.summations),
                group(lc.counters.multiplications)
            );
        }
        let t = self.complexity.total;
        let _ = writeln!(
            s,
            "{:<16} {:<15} {:>12} {:>12} {:>16} {:>16} {:>16}",
            "total",
            "",
            group(m.w_total),
            group(m.a_peak),
            group(t.memory_accesses),
            group(t.summations),
            group(t.multiplications)
        );
        let _ = writeln!(s, "W_total {}", group(m.w_total));
        let _ = writeln!(s, "A_peak {}", group(m.a_peak));
        let _ = writeln!(
            s,
            "total bytes {} B (p_w={}, p_a={})",
            group(m.bytes_total),
            m.p_w,
            m.p_a
        );
        s
    }

    /// JSON document; field names follow the Rust structs.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub fn divergences_to_text(d: &[Divergence]) -> String {
    if d.is_empty() {
        return "no divergences\n".to_string();
    }
    let mut s = String::new();
    for x in d {
        let _ = writeln!(s, "{:<16} {:<16} {:>14} {:>14} {:>+14}", x.layer, x.quantity, x.left, x.right, x.delta);
    }
    s
}
