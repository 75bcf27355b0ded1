use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::{HeadCorrelation, LayerCorrelation};
use crate::error::{Error, Result};

pub const MAC_MODEL: &str = "per layer: attention = H_q*pairs*(d_k+d_v); \
projection = n*d_model*(H_q*d_k + H_kv*d_k + H_kv*d_v) + n*H_q*d_v*d_model; \
mlp = 2*n*d_model*d_ff; plus unembed = n*d_model*vocab. \
Prefill: n = prompt length, pairs = allowed mask entries (dense below st_layer_index). \
Decode: n = 1, pairs = retained rows + 1.";

/// One (policy, pattern, budget) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMetrics {
    pub policy: String,
    pub pattern: String,
    pub budget: f64,
    pub prompt_len: usize,
    /// Layer-major, then KV head.
    pub retained_per_head: Vec<usize>,
    pub compression_ratio: f64,
    pub mask_density: f64,
    pub estimated_prefill_macs: u64,
    pub estimated_decode_macs_per_step: u64,
    /// Max absolute decode-logit difference against the full cache.
    pub output_divergence_vs_full: f64,
    pub salient_recall: Option<f64>,
    pub median_rho: Option<f64>,
    pub layer_correlations: Vec<LayerCorrelation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mac_model: String,
    pub cells: Vec<CellMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum ReportFormat {
    Json,
    Csv,
}

/// `%g`-style formatting with 6 significant digits.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent in {:e} output");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        format!("{}e{exp}", trim_zeros(mantissa))
    } else {
        trim_zeros(&format!("{x:.*}", (5 - exp) as usize)).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn sig6(x: f64) -> f64 {
    format_sig6(x).parse().expect("formatted float parses")
}

fn rounded(report: &MetricsReport) -> MetricsReport {
    let mut r = report.clone();
    for c in &mut r.cells {
        c.budget = sig6(c.budget);
        c.compression_ratio = sig6(c.compression_ratio);
        c.mask_density = sig6(c.mask_density);
        c.output_divergence_vs_full = sig6(c.output_divergence_vs_full);
        c.salient_recall = c.salient_recall.map(sig6);
        c.median_rho = c.median_rho.map(sig6);
        for layer in &mut c.layer_correlations {
            for h in &mut layer.heads {
                h.rho = sig6(h.rho);
                h.p_value = sig6(h.p_value);
            }
        }
    }
    r
}

pub const CSV_HEADER: [&str; 14] = [
    "policy",
    "pattern",
    "budget",
    "prompt_len",
    "retained_per_head",
    "compression_ratio",
    "mask_density",
    "estimated_prefill_macs",
    "estimated_decode_macs_per_step",
    "output_divergence_vs_full",
    "salient_recall",
    "median_rho",
    "rho",
    "p_value",
];

fn join<T>(xs: impl IntoIterator<Item = T>, f: impl Fn(T) -> String) -> String {
    xs.into_iter().map(f).collect::<Vec<_>>().join(";")
}

fn heads(c: &CellMetrics) -> impl Iterator<Item = &HeadCorrelation> {
    c.layer_correlations.iter().flat_map(|l| l.heads.iter())
}

/// Renders the report as pretty JSON or as CSV with one row per cell.
/// Lists inside CSV fields are `;`-separated, correlations in layer-major order.
pub fn render_report(report: &MetricsReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(&rounded(report))
                .map_err(|e| Error::Runtime(format!("serializing report: {e}")))?;
            s.push('\n');
            Ok(s)
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let csv_err = |e: csv::Error| Error::Runtime(format!("writing CSV: {e}"));
            w.write_record(CSV_HEADER).map_err(csv_err)?;
            let opt = |x: Option<f64>| x.map(format_sig6).unwrap_or_default();
            for c in &report.cells {
                w.write_record([
                    c.policy.clone(),
                    c.pattern.clone(),
                    format_sig6(c.budget),
                    c.prompt_len.to_string(),
                    join(&c.retained_per_head, |n| n.to_string()),
                    format_sig6(c.compression_ratio),
                    format_sig6(c.mask_density),
                    c.estimated_prefill_macs.to_string(),
                    c.estimated_decode_macs_per_step.to_string(),
                    format_sig6(c.output_divergence_vs_full),
                    opt(c.salient_recall),
                    opt(c.median_rho),
                    join(heads(c), |h| format_sig6(h.rho)),
                    join(heads(c), |h| format_sig6(h.p_value)),
                ])
                .map_err(csv_err)?;
            }
            let bytes = w
                .into_inner()
                .map_err(|e| Error::Runtime(format!("writing CSV: {e}")))?;
            String::from_utf8(bytes).map_err(|e| Error::Runtime(e.to_string()))
        }
    }
}

/// Writes the rendered report to `path`.
pub fn emit_report(report: &MetricsReport, format: ReportFormat, path: &Path) -> Result<()> {
    let text = render_report(report, format)?;
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}
