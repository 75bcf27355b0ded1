//! Instrumented forward pass and the cross-layer rank-agreement check.
//!
//! This path materializes attention weights at every layer and exists only
//! for analysis; prefill and decode never call into it.

use serde::{Deserialize, Serialize};

use crate::attention::{masked, AttnInputs};
use crate::cache::{accumulate_recent_attention, budget_to_wh, score_high, score_low};
use crate::error::{Error, Result};
use crate::masks::{build_mask, BoolMatrix};
use crate::numerics::{Matrix, SplitMix64};
use crate::stats::{permutation_pvalue, spearman_rho};

use super::model::{rms_norm, Model};
use super::session::Session;

/// Attention weights (per query head) and values (per KV head) of one layer.
#[derive(Debug, Clone)]
pub struct InstrumentedLayer {
    pub weights: Vec<Matrix>,
    pub values: Vec<Matrix>,
}

/// Forward pass with the session's mask wiring, keeping every layer's
/// attention weights. Returns the per-layer traces and the final logits.
pub fn instrumented_forward(
    model: &Model,
    session: &Session,
    embeddings: &Matrix,
) -> Result<(Vec<InstrumentedLayer>, Matrix)> {
    model.check_embeddings(embeddings)?;
    let cfg = *model.config();
    let l = session.layout().total_len();
    if embeddings.rows() != l {
        return Err(Error::shape(
            "instrumented_forward",
            format!("{} rows for {l} tokens", embeddings.rows()),
        ));
    }
    let causal = BoolMatrix::causal(l, l);
    let sparse = build_mask(session.layout(), session.pattern())?;

    let mut x = embeddings.clone();
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for layer in 0..cfg.num_layers {
        let mask = if layer >= session.policy().st_layer_index {
            &sparse
        } else {
            &causal
        };
        let proj = model.project(layer, &rms_norm(&x))?;
        let keys: Vec<Matrix> = (0..cfg.num_kv_heads).map(|g| model.k_head(&proj, g)).collect();
        let values: Vec<Matrix> = (0..cfg.num_kv_heads).map(|g| model.v_head(&proj, g)).collect();
        let mut outputs = Vec::with_capacity(cfg.num_q_heads);
        let mut weights = Vec::with_capacity(cfg.num_q_heads);
        for h in 0..cfg.num_q_heads {
            let g = cfg.kv_head_of(h);
            let q = model.q_head(&proj, h);
            let attn = masked(&AttnInputs::new(&q, &keys[g], &values[g])?, mask)?;
            outputs.push(attn.out);
            weights.push(attn.weights);
        }
        x = model.finish_block(layer, &x, &outputs)?;
        layers.push(InstrumentedLayer { weights, values });
    }
    let logits = model.logits(&x)?;
    Ok((layers, logits))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidationOptions {
    /// Layer whose attention sums feed the estimate; defaults to the
    /// session's CLIE layer.
    pub analysis_layer: Option<usize>,
    /// Layers to compare; defaults to every layer above the analysis layer.
    pub layers: Option<Vec<usize>>,
    pub n_perm: usize,
    pub seed: u64,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        Self {
            analysis_layer: None,
            layers: None,
            n_perm: 999,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadCorrelation {
    pub kv_head: usize,
    pub rho: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCorrelation {
    pub layer: usize,
    pub heads: Vec<HeadCorrelation>,
}

/// Rank agreement between the cross-layer estimate (analysis-layer sums ×
/// this layer's value norms) and this layer's own score (its own sums × its
/// value norms), per KV head.
pub fn validate_cross_layer(
    model: &Model,
    session: &Session,
    embeddings: &Matrix,
    opts: &ValidationOptions,
) -> Result<Vec<LayerCorrelation>> {
    let cfg = *model.config();
    let analysis = opts
        .analysis_layer
        .unwrap_or(session.policy().clie_layer_index);
    if analysis >= cfg.num_layers {
        return Err(Error::config(format!("analysis layer {analysis} out of range")));
    }
    let layers: Vec<usize> = match &opts.layers {
        Some(ls) => ls.clone(),
        None => (analysis + 1..cfg.num_layers).collect(),
    };
    if let Some(bad) = layers.iter().find(|&&l| l >= cfg.num_layers) {
        return Err(Error::config(format!("layer {bad} out of range")));
    }

    let l = session.layout().total_len();
    let w = budget_to_wh(session.policy().budget_fraction, l, session.policy().recent_window)?.w;
    if l <= w {
        return Err(Error::config(format!(
            "sequence of {l} tokens has no non-recent segment for window {w}"
        )));
    }

    let (trace, _) = instrumented_forward(model, session, embeddings)?;
    let sums = |layer: usize| -> Result<Vec<Vec<f64>>> {
        let mut out = vec![vec![0.0; l - w]; cfg.num_kv_heads];
        for (h, a) in trace[layer].weights.iter().enumerate() {
            let c = accumulate_recent_attention(a, w)?;
            for (o, v) in out[cfg.kv_head_of(h)].iter_mut().zip(c) {
                *o += v;
            }
        }
        let group = cfg.group_size() as f64;
        out.iter_mut().flatten().for_each(|v| *v /= group);
        Ok(out)
    };
    let low = sums(analysis)?;

    let mut report = Vec::with_capacity(layers.len());
    for layer in layers {
        let own = sums(layer)?;
        let mut heads = Vec::with_capacity(cfg.num_kv_heads);
        for g in 0..cfg.num_kv_heads {
            let values = &trace[layer].values[g];
            let estimate = score_high(&low[g], values)?;
            let truth = score_low(&own[g], values)?;
            let rho = spearman_rho(&estimate, &truth)?;
            let stream = (layer * cfg.num_kv_heads + g) as u64;
            let p_value = permutation_pvalue(
                &estimate,
                &truth,
                opts.n_perm,
                SplitMix64::derive(opts.seed, stream).next_u64(),
            )?;
            heads.push(HeadCorrelation {
                kv_head: g,
                rho,
                p_value,
            });
        }
        report.push(LayerCorrelation { layer, heads });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cache::{PolicyConfig, PolicyKind};
    use crate::engine::ModelConfig;
    use crate::masks::{SparsityPattern, TokenLayout};
    use crate::numerics::seeded_gaussian;

    fn setup(budget: f64) -> (Model, Session, Matrix) {
        let cfg = ModelConfig {
            num_layers: 4,
            d_model: 8,
            num_q_heads: 4,
            num_kv_heads: 2,
            d_k: 2,
            d_v: 4,
            vocab_size: 5,
            seed: 21,
        };
        let policy = PolicyConfig {
            kind: PolicyKind::PureKv,
            budget_fraction: budget,
            recent_window: 4,
            sink_len: 1,
            clie_layer_index: 1,
            st_layer_index: 3,
        };
        let layout = TokenLayout::uniform(1, 3, 4, 1).unwrap();
        let session = Session::new(&cfg, layout, policy, SparsityPattern::Spatial).unwrap();
        (Model::new(cfg).unwrap(), session, seeded_gaussian(14, 8, 4))
    }

    #[test]
    fn self_comparison_is_perfect() {
        let (model, session, x) = setup(0.5);
        let opts = ValidationOptions {
            layers: Some(vec![1]),
            n_perm: 199,
            ..Default::default()
        };
        let r = validate_cross_layer(&model, &session, &x, &opts).unwrap();
        for h in &r[0].heads {
            assert_eq!(h.rho, 1.0);
            assert!(h.p_value < 0.05);
        }
    }

    #[test]
    fn default_layers_are_above_analysis() {
        let (model, session, x) = setup(0.5);
        let opts = ValidationOptions {
            n_perm: 100,
            ..Default::default()
        };
        let r = validate_cross_layer(&model, &session, &x, &opts).unwrap();
        assert_eq!(r.iter().map(|l| l.layer).collect::<Vec<_>>(), vec![2, 3]);
        assert!(r.iter().all(|l| l.heads.len() == 2));
        assert_eq!(r, validate_cross_layer(&model, &session, &x, &opts).unwrap());
    }

    #[test]
    fn matches_production_prefill() {
        let (model, mut session, x) = setup(0.5);
        let (_, logits) = instrumented_forward(&model, &session, &x).unwrap();
        let prod = model.prefill(&mut session, &x).unwrap();
        assert!(prod.max_abs_diff(&logits) < 1e-9);
    }

    #[test]
    fn window_covering_prompt_is_rejected() {
        let (model, session, x) = setup(0.2);
        let mut p = *session.policy();
        p.recent_window = 100;
        p.budget_fraction = 1.0;
        let s = Session::new(model.config(), session.layout().clone(), p, SparsityPattern::Spatial).unwrap();
        assert!(validate_cross_layer(&model, &s, &x, &ValidationOptions::default()).is_err());
    }
}
