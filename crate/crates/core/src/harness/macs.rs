//! Deterministic multiply-accumulate counts standing in for latency.
//!
//! Per layer, with `n` query rows and `H_q`, `H_kv` heads:
//!
//! * projections: `n·d_model·(H_q·d_k + H_kv·d_k + H_kv·d_v) + n·H_q·d_v·d_model`
//! * attention: `H_q·pairs·(d_k + d_v)`, where `pairs` is the number of allowed
//!   (query, key) entries of the layer mask in prefill, or the number of
//!   attended cache rows in decode
//! * MLP: `2·n·d_model·d_ff`
//!
//! plus one unembedding of `n·d_model·vocab`.

use serde::{Deserialize, Serialize};

use crate::engine::ModelConfig;
use crate::error::Result;
use crate::masks::{build_mask, SparsityPattern, TokenLayout};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Prefill,
    Decode,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacEstimate {
    pub attention: u64,
    pub projection: u64,
    pub mlp: u64,
    pub unembed: u64,
}

impl MacEstimate {
    pub fn total(&self) -> u64 {
        self.attention + self.projection + self.mlp + self.unembed
    }

    fn add(&mut self, other: MacEstimate) {
        self.attention += other.attention;
        self.projection += other.projection;
        self.mlp += other.mlp;
        self.unembed += other.unembed;
    }
}

fn layer_macs(cfg: &ModelConfig, rows: u64, pairs: u64) -> MacEstimate {
    let (dm, dk, dv) = (cfg.d_model as u64, cfg.d_k as u64, cfg.d_v as u64);
    let (hq, hkv) = (cfg.num_q_heads as u64, cfg.num_kv_heads as u64);
    MacEstimate {
        attention: hq * pairs * (dk + dv),
        projection: rows * dm * (hq * dk + hkv * dk + hkv * dv) + rows * hq * dv * dm,
        mlp: 2 * rows * dm * cfg.d_ff() as u64,
        unembed: 0,
    }
}

fn unembed(cfg: &ModelConfig, rows: u64) -> MacEstimate {
    MacEstimate {
        unembed: rows * cfg.d_model as u64 * cfg.vocab_size as u64,
        ..Default::default()
    }
}

/// Cost of one forward phase with `pattern` applied at every layer.
///
/// `retained_count` is the number of cache rows each head attends per decode
/// step; it is ignored for prefill.
pub fn estimate_macs(
    layout: &TokenLayout,
    pattern: &SparsityPattern,
    cfg: &ModelConfig,
    phase: Phase,
    retained_count: usize,
) -> Result<MacEstimate> {
    match phase {
        Phase::Prefill => estimate_prefill_macs_layered(layout, pattern, 0, cfg),
        Phase::Decode => {
            let mut total = MacEstimate::default();
            for _ in 0..cfg.num_layers {
                total.add(layer_macs(cfg, 1, retained_count as u64));
            }
            total.add(unembed(cfg, 1));
            Ok(total)
        }
    }
}

/// Prefill cost with dense layers below `sparse_from` and `pattern` from it on.
pub fn estimate_prefill_macs_layered(
    layout: &TokenLayout,
    pattern: &SparsityPattern,
    sparse_from: usize,
    cfg: &ModelConfig,
) -> Result<MacEstimate> {
    let n = layout.total_len() as u64;
    let dense_pairs = n * (n + 1) / 2;
    let sparse_pairs = if sparse_from < cfg.num_layers {
        build_mask(layout, pattern)?.count_true() as u64
    } else {
        dense_pairs
    };
    let mut total = MacEstimate::default();
    for layer in 0..cfg.num_layers {
        let pairs = if layer >= sparse_from { sparse_pairs } else { dense_pairs };
        total.add(layer_macs(cfg, n, pairs));
    }
    total.add(unembed(cfg, n));
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::mask_density;

    fn cfg() -> ModelConfig {
        ModelConfig {
            num_layers: 3,
            d_model: 8,
            num_q_heads: 4,
            num_kv_heads: 2,
            d_k: 2,
            d_v: 3,
            vocab_size: 10,
            seed: 0,
        }
    }

    #[test]
    fn hand_counted_layer() {
        let layout = TokenLayout::uniform(0, 1, 2, 0).unwrap();
        let m = estimate_macs(&layout, &SparsityPattern::Dense, &cfg(), Phase::Prefill, 0).unwrap();
        // 3 pairs per head and layer.
        assert_eq!(m.attention, 3 * 4 * 3 * 5);
        assert_eq!(m.projection, 3 * (2 * 8 * (8 + 4 + 6) + 2 * 12 * 8));
        assert_eq!(m.mlp, 3 * 2 * 2 * 8 * 16);
        assert_eq!(m.unembed, 2 * 8 * 10);
    }

    #[test]
    fn attention_term_tracks_density() {
        let layout = TokenLayout::uniform(0, 4, 4, 0).unwrap();
        let dense = estimate_macs(&layout, &SparsityPattern::Dense, &cfg(), Phase::Prefill, 0).unwrap();
        assert_eq!(dense, estimate_macs(&layout, &SparsityPattern::Dense, &cfg(), Phase::Prefill, 0).unwrap());
        let pattern = SparsityPattern::Spatial;
        let sparse = estimate_macs(&layout, &pattern, &cfg(), Phase::Prefill, 0).unwrap();
        let density = mask_density(&build_mask(&layout, &pattern).unwrap()).unwrap();
        assert!((sparse.attention as f64 / dense.attention as f64 - density).abs() < 1e-15);
        assert_eq!(sparse.projection, dense.projection);
    }

    #[test]
    fn decode_scales_with_retained_rows() {
        let layout = TokenLayout::uniform(0, 4, 5, 0).unwrap();
        let full = estimate_macs(&layout, &SparsityPattern::Dense, &cfg(), Phase::Decode, 20).unwrap();
        let fifth = estimate_macs(&layout, &SparsityPattern::Dense, &cfg(), Phase::Decode, 4).unwrap();
        assert_eq!(fifth.attention * 5, full.attention);
        assert_eq!(fifth.mlp, full.mlp);
    }

    #[test]
    fn layered_prefill_mixes_dense_and_sparse() {
        let layout = TokenLayout::uniform(0, 4, 4, 0).unwrap();
        let p = SparsityPattern::Temporal;
        let all_dense = estimate_prefill_macs_layered(&layout, &p, 3, &cfg()).unwrap();
        let all_sparse = estimate_prefill_macs_layered(&layout, &p, 0, &cfg()).unwrap();
        let mixed = estimate_prefill_macs_layered(&layout, &p, 1, &cfg()).unwrap();
        assert_eq!(3 * mixed.attention, all_dense.attention + 2 * all_sparse.attention);
    }
}
