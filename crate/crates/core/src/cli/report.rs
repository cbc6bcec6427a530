//! Closed-form counts of the presets next to the published table values.

use std::fmt::Write as _;

use serde::Serialize;

use crate::analyzer::model_memory;
use crate::error::Result;
use crate::model::ModelConfig;

/// One row of the published table. Totals are in kB as printed there.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PublishedRow {
    pub name: &'static str,
    pub weights: u64,
    pub activations: u64,
    pub total_kb: u64,
}

pub fn published_rows() -> [PublishedRow; 6] {
    let row = |name, weights, activations, total_kb| PublishedRow {
        name,
        weights,
        activations,
        total_kb,
    };
    [
        row("BERT(2MB)", 289_000, 213_000, 2008),
        row("MAMBA(2MB)", 220_000, 265_000, 1941),
        row("Embedder", 293_000, 164_000, 1826),
        row("Embedder+conv", 298_000, 164_000, 1848),
        // the published total is for the quantized model
        row("EmbBERT-Q", 357_000, 131_000, 781),
        row("BERT-Tiny", 4_400_000, 786_000, 20746),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TableRow {
    pub name: String,
    pub config: ModelConfig,
    pub weights: u64,
    pub activations: u64,
    /// At the config's storage widths.
    pub total_bytes: u64,
    /// FP8 weights without outliers and FP16 activations.
    pub quantized_bytes: u64,
    pub published: PublishedRow,
    /// `(computed - published) / published`, in percent.
    pub weights_gap_pct: f64,
    pub activations_gap_pct: f64,
}

fn gap(computed: u64, published: u64) -> f64 {
    (computed as f64 - published as f64) / published as f64 * 100.0
}

pub fn table_report() -> Result<Vec<TableRow>> {
    let presets = ModelConfig::presets();
    published_rows()
        .into_iter()
        .map(|p| {
            let (_, config) = presets
                .iter()
                .find(|(n, _)| *n == p.name)
                .expect("every published row has a preset");
            let m = model_memory(config)?;
            Ok(TableRow {
                name: p.name.to_string(),
                config: config.clone(),
                weights: m.w_total,
                activations: m.a_peak,
                total_bytes: m.bytes_total,
                quantized_bytes: m.w_total + 2 * m.a_peak,
                published: p,
                weights_gap_pct: gap(m.w_total, p.weights),
                activations_gap_pct: gap(m.a_peak, p.activations),
            })
        })
        .collect()
}

pub fn rows_to_text(rows: &[TableRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<14} {:>10} {:>10} {:>7} {:>10} {:>10} {:>7} {:>11} {:>11} {:>9}",
        "model", "weights", "published", "gap%", "act_peak", "published", "gap%", "fp32_bytes", "fp8_bytes", "pub_kB"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<14} {:>10} {:>10} {:>7.2} {:>10} {:>10} {:>7.2} {:>11} {:>11} {:>9}",
            r.name,
            r.weights,
            r.published.weights,
            r.weights_gap_pct,
            r.activations,
            r.published.activations,
            r.activations_gap_pct,
            r.total_bytes,
            r.quantized_bytes,
            r.published.total_kb
        );
    }
    s
}
