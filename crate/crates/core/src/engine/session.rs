use crate::attention::{dense_causal, masked, streaming_masked, AttnInputs, DEFAULT_TILE_SIZE};
use crate::cache::{
    accumulate_recent_attention, baseline_h2o_score, baseline_streaming, budget_to_wh,
    score_high, score_low, select_retained, BudgetSplit, ImportanceState, KvCacheLayer, KvHead,
    PolicyConfig, PolicyKind,
};
use crate::error::{Error, Result};
use crate::masks::{build_mask, BoolMatrix, SparsityPattern, TokenLayout};
use crate::numerics::Matrix;

use super::model::{rms_norm, Model, ModelConfig};

/// How a layer's attention was evaluated during prefill.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionRoute {
    /// Weights were formed and reduced to importance sums.
    Materialized { sparse: bool },
    /// Online softmax; no weights ever existed.
    Streaming { sparse: bool },
}

impl AttentionRoute {
    pub fn is_streaming(&self) -> bool {
        matches!(self, AttentionRoute::Streaming { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionPhase {
    Fresh,
    Prefilled,
    Compressed,
}

/// Mutable per-request state: cache, importance sums and bookkeeping.
#[derive(Debug, Clone)]
pub struct Session {
    layout: TokenLayout,
    policy: PolicyConfig,
    pattern: SparsityPattern,
    tile_size: usize,
    model: ModelConfig,
    phase: SessionPhase,
    cache: Vec<KvCacheLayer>,
    /// Recent-window sums of the CLIE layer, reused by every layer above it.
    importance: Option<ImportanceState>,
    /// Each layer below the CLIE layer keeps its own sums for its own scoring.
    lower_layer_sums: Vec<Vec<Vec<f64>>>,
    /// Accumulated attention per layer, only under the H2O-style policy.
    h2o_scores: Vec<Vec<Vec<f64>>>,
    routes: Vec<AttentionRoute>,
    split: Option<BudgetSplit>,
    retained: Vec<Vec<Vec<usize>>>,
    prompt_len: usize,
    next_position: usize,
    step_count: usize,
}

impl Session {
    pub fn new(
        model: &ModelConfig,
        layout: TokenLayout,
        policy: PolicyConfig,
        pattern: SparsityPattern,
    ) -> Result<Self> {
        model.validate()?;
        policy.validate_for_depth(model.num_layers)?;
        pattern.validate()?;
        Ok(Self {
            layout,
            policy,
            pattern,
            tile_size: DEFAULT_TILE_SIZE,
            model: *model,
            phase: SessionPhase::Fresh,
            cache: Vec::new(),
            importance: None,
            lower_layer_sums: Vec::new(),
            h2o_scores: Vec::new(),
            routes: Vec::new(),
            split: None,
            retained: Vec::new(),
            prompt_len: 0,
            next_position: 0,
            step_count: 0,
        })
    }

    pub fn with_tile_size(mut self, tile_size: usize) -> Result<Self> {
        if tile_size == 0 {
            return Err(Error::config("tile size must be >= 1"));
        }
        self.tile_size = tile_size;
        Ok(self)
    }

    pub fn layout(&self) -> &TokenLayout {
        &self.layout
    }

    pub fn policy(&self) -> &PolicyConfig {
        &self.policy
    }

    pub fn pattern(&self) -> &SparsityPattern {
        &self.pattern
    }

    pub fn tile_size(&self) -> usize {
        self.tile_size
    }

    pub fn phase(&self) -> SessionPhase {
        self.phase
    }

    pub fn cache(&self) -> &[KvCacheLayer] {
        &self.cache
    }

    pub fn importance(&self) -> Option<&ImportanceState> {
        self.importance.as_ref()
    }

    pub fn routes(&self) -> &[AttentionRoute] {
        &self.routes
    }

    pub fn budget_split(&self) -> Option<BudgetSplit> {
        self.split
    }

    /// Retained positions per layer and KV head after compression.
    pub fn retained(&self) -> &[Vec<Vec<usize>>] {
        &self.retained
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn step_count(&self) -> usize {
        self.step_count
    }

    fn materializes(&self, layer: usize) -> bool {
        layer <= self.policy.clie_layer_index || self.policy.kind == PolicyKind::H2oLike
    }

    fn is_sparse(&self, layer: usize) -> bool {
        layer >= self.policy.st_layer_index
    }

    /// Scores every layer and KV head, selects retained rows and evicts the rest.
    pub fn apply_compression(&mut self) -> Result<()> {
        if self.phase != SessionPhase::Prefilled {
            return Err(Error::Runtime(format!(
                "compression needs a freshly prefilled session, phase is {:?}",
                self.phase
            )));
        }
        let l = self.prompt_len;
        let split = self.split.expect("split is set by prefill");
        let keep = split.keep();
        let clie = self.policy.clie_layer_index;

        let mut retained = Vec::with_capacity(self.cache.len());
        for (layer, cache) in self.cache.iter().enumerate() {
            let mut per_head = Vec::with_capacity(cache.heads.len());
            for (g, head) in cache.heads.iter().enumerate() {
                let kept = if keep >= l || self.policy.kind == PolicyKind::Full {
                    (0..l).collect()
                } else {
                    match self.policy.kind {
                        PolicyKind::PureKv => {
                            let state = self.importance.as_ref().ok_or_else(|| {
                                Error::Runtime("no cross-layer importance recorded".into())
                            })?;
                            let scores = if layer < clie {
                                score_low(&self.lower_layer_sums[layer][g], &head.values)?
                            } else if layer == clie {
                                score_low(&state.c_low[g], &head.values)?
                            } else {
                                score_high(&state.c_low[g], &head.values)?
                            };
                            select_retained(&scores, split.w, split.h, l)?
                        }
                        PolicyKind::H2oLike => {
                            let scores = &self.h2o_scores[layer][g][..l - split.w];
                            select_retained(scores, split.w, split.h, l)?
                        }
                        PolicyKind::StreamingLike => {
                            let sink = self.policy.sink_len.min(keep);
                            baseline_streaming(l, sink, keep - sink)
                        }
                        PolicyKind::Full => unreachable!(),
                    }
                };
                per_head.push(kept);
            }
            retained.push(per_head);
        }

        self.cache = self
            .cache
            .iter()
            .zip(&retained)
            .map(|(c, r)| c.evict(r))
            .collect::<Result<_>>()?;
        self.retained = retained;
        self.phase = SessionPhase::Compressed;
        Ok(())
    }
}

impl Model {
    /// Runs the prompt through every layer, filling the cache and recording
    /// the importance sums the session's policy needs. Returns logits for
    /// every prompt position.
    pub fn prefill(&self, session: &mut Session, embeddings: &Matrix) -> Result<Matrix> {
        if session.phase != SessionPhase::Fresh {
            return Err(Error::Runtime("session already prefilled".into()));
        }
        if session.model != *self.config() {
            return Err(Error::config("session was created for a different model"));
        }
        self.check_embeddings(embeddings)?;
        let l = session.layout.total_len();
        if embeddings.rows() != l {
            return Err(Error::shape(
                "prefill",
                format!("{} embedding rows for a layout of {l} tokens", embeddings.rows()),
            ));
        }
        if l == 0 {
            return Err(Error::config("empty prompt"));
        }

        let cfg = *self.config();
        let split = budget_to_wh(session.policy.budget_fraction, l, session.policy.recent_window)?;
        let sparse_mask = if session.policy.st_layer_index < cfg.num_layers {
            Some(build_mask(&session.layout, &session.pattern)?)
        } else {
            None
        };
        let causal = BoolMatrix::causal(l, l);
        let group = cfg.group_size() as f64;

        let mut x = embeddings.clone();
        let mut cache = Vec::with_capacity(cfg.num_layers);
        let mut routes = Vec::with_capacity(cfg.num_layers);
        let mut lower_sums = Vec::new();
        let mut h2o_scores = Vec::new();
        let mut importance = None;

        for layer in 0..cfg.num_layers {
            let proj = self.project(layer, &rms_norm(&x))?;
            let sparse = session.is_sparse(layer);
            let mask = match (&sparse_mask, sparse) {
                (Some(m), true) => m,
                _ => &causal,
            };
            let keys: Vec<Matrix> = (0..cfg.num_kv_heads).map(|g| self.k_head(&proj, g)).collect();
            let values: Vec<Matrix> = (0..cfg.num_kv_heads).map(|g| self.v_head(&proj, g)).collect();

            let mut outputs = Vec::with_capacity(cfg.num_q_heads);
            if session.materializes(layer) {
                routes.push(AttentionRoute::Materialized { sparse });
                let mut sums = vec![Vec::new(); cfg.num_kv_heads];
                for h in 0..cfg.num_q_heads {
                    let g = cfg.kv_head_of(h);
                    let q = self.q_head(&proj, h);
                    let inputs = AttnInputs::new(&q, &keys[g], &values[g])?;
                    let attn = if sparse {
                        masked(&inputs, mask)?
                    } else {
                        dense_causal(&inputs)?
                    };
                    let reduced = match session.policy.kind {
                        PolicyKind::PureKv if split.w < l => {
                            Some(accumulate_recent_attention(&attn.weights, split.w)?)
                        }
                        PolicyKind::H2oLike => Some(baseline_h2o_score(&attn.weights)?),
                        _ => None,
                    };
                    if let Some(r) = reduced {
                        add_into(&mut sums[g], &r);
                    }
                    outputs.push(attn.out);
                }
                for s in &mut sums {
                    s.iter_mut().for_each(|v| *v /= group);
                }
                match session.policy.kind {
                    PolicyKind::H2oLike => h2o_scores.push(sums),
                    PolicyKind::PureKv if layer < session.policy.clie_layer_index => {
                        lower_sums.push(sums)
                    }
                    PolicyKind::PureKv => {
                        importance = Some(ImportanceState {
                            c_low: sums,
                            split,
                            seq_len: l,
                        })
                    }
                    _ => {}
                }
            } else {
                routes.push(AttentionRoute::Streaming { sparse });
                for h in 0..cfg.num_q_heads {
                    let g = cfg.kv_head_of(h);
                    let q = self.q_head(&proj, h);
                    let inputs = AttnInputs::new(&q, &keys[g], &values[g])?;
                    outputs.push(streaming_masked(&inputs, mask, session.tile_size)?);
                }
            }

            let heads = keys
                .into_iter()
                .zip(values)
                .map(|(k, v)| KvHead::new(k, v, (0..l).collect()))
                .collect::<Result<_>>()?;
            cache.push(KvCacheLayer { heads });
            x = self.finish_block(layer, &x, &outputs)?;
        }

        session.cache = cache;
        session.routes = routes;
        session.lower_layer_sums = lower_sums;
        session.h2o_scores = h2o_scores;
        session.importance = importance;
        session.split = Some(split);
        session.prompt_len = l;
        session.next_position = l;
        session.phase = SessionPhase::Prefilled;
        self.logits(&x)
    }

    /// One autoregressive step: appends the token's keys and values, then
    /// attends over whatever the cache retains, streaming at every layer.
    pub fn decode_step(&self, session: &mut Session, embedding: &[f64]) -> Result<Vec<f64>> {
        let ready = session.phase == SessionPhase::Compressed
            || (session.phase == SessionPhase::Prefilled && session.policy.kind == PolicyKind::Full);
        if !ready {
            return Err(Error::Runtime(format!(
                "decode needs a compressed session (or the full policy), phase is {:?}",
                session.phase
            )));
        }
        let cfg = *self.config();
        let mut x = Matrix::from_vec(1, embedding.len(), embedding.to_vec())?;
        self.check_embeddings(&x)?;
        let position = session.next_position;

        for layer in 0..cfg.num_layers {
            let proj = self.project(layer, &rms_norm(&x))?;
            let cache = &mut session.cache[layer];
            for (g, head) in cache.heads.iter_mut().enumerate() {
                head.append(
                    self.k_head(&proj, g).row(0),
                    self.v_head(&proj, g).row(0),
                    position,
                )?;
            }
            let mut outputs = Vec::with_capacity(cfg.num_q_heads);
            for h in 0..cfg.num_q_heads {
                let head = &cache.heads[cfg.kv_head_of(h)];
                let q = self.q_head(&proj, h);
                let inputs = AttnInputs::new(&q, &head.keys, &head.values)?;
                let mask = BoolMatrix::causal(1, head.len());
                outputs.push(streaming_masked(&inputs, &mask, session.tile_size)?);
            }
            x = self.finish_block(layer, &x, &outputs)?;
        }

        session.next_position += 1;
        session.step_count += 1;
        Ok(self.logits(&x)?.row(0).to_vec())
    }
}

fn add_into(acc: &mut Vec<f64>, v: &[f64]) {
    if acc.is_empty() {
        acc.extend_from_slice(v);
    } else {
        acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_gaussian;

    fn config() -> ModelConfig {
        ModelConfig {
            num_layers: 4,
            d_model: 8,
            num_q_heads: 4,
            num_kv_heads: 2,
            d_k: 2,
            d_v: 2,
            vocab_size: 5,
            seed: 3,
        }
    }

    fn policy(kind: PolicyKind, budget: f64) -> PolicyConfig {
        PolicyConfig {
            kind,
            budget_fraction: budget,
            recent_window: 4,
            sink_len: 2,
            clie_layer_index: 1,
            st_layer_index: 2,
        }
    }

    fn prefilled(kind: PolicyKind, budget: f64) -> (Model, Session) {
        let model = Model::new(config()).unwrap();
        let layout = TokenLayout::uniform(2, 4, 4, 2).unwrap();
        let mut s = Session::new(&config(), layout, policy(kind, budget), SparsityPattern::SpatialTemporal).unwrap();
        let x = seeded_gaussian(20, 8, 77);
        model.prefill(&mut s, &x).unwrap();
        (model, s)
    }

    #[test]
    fn routes_follow_layer_indices() {
        let (_, s) = prefilled(PolicyKind::PureKv, 0.5);
        assert_eq!(
            s.routes(),
            &[
                AttentionRoute::Materialized { sparse: false },
                AttentionRoute::Materialized { sparse: false },
                AttentionRoute::Streaming { sparse: true },
                AttentionRoute::Streaming { sparse: true },
            ]
        );
        let st = s.importance().unwrap();
        assert_eq!(st.c_low.len(), 2);
        assert_eq!(st.c_low[0].len(), 20 - 4);
        assert!(st.c_low.iter().flatten().all(|&c| c >= 0.0));
    }

    #[test]
    fn compression_hits_budget() {
        for kind in [PolicyKind::PureKv, PolicyKind::H2oLike, PolicyKind::StreamingLike] {
            let (_, mut s) = prefilled(kind, 0.35);
            s.apply_compression().unwrap();
            for layer in s.cache() {
                assert_eq!(layer.rows_per_head(), vec![7, 7], "{kind:?}");
            }
            for per_head in s.retained() {
                for kept in per_head {
                    assert!((16..20).all(|p| kept.contains(&p)) || kind == PolicyKind::StreamingLike);
                }
            }
        }
    }

    #[test]
    fn streaming_policy_keeps_sinks_and_tail() {
        let (_, mut s) = prefilled(PolicyKind::StreamingLike, 0.25);
        s.apply_compression().unwrap();
        assert_eq!(s.retained()[0][0], vec![0, 1, 17, 18, 19]);
    }

    #[test]
    fn full_budget_is_noop() {
        let (_, mut s) = prefilled(PolicyKind::PureKv, 1.0);
        let before = s.cache().to_vec();
        s.apply_compression().unwrap();
        assert_eq!(s.cache(), &before[..]);
    }

    #[test]
    fn decode_grows_cache() {
        let (model, mut s) = prefilled(PolicyKind::PureKv, 0.2);
        assert!(model.decode_step(&mut s, &[0.0; 8]).is_err());
        s.apply_compression().unwrap();
        assert!(s.apply_compression().is_err());
        let emb = seeded_gaussian(10, 8, 5);
        for r in emb.row_iter() {
            model.decode_step(&mut s, r).unwrap();
        }
        for layer in s.cache() {
            assert_eq!(layer.rows_per_head(), vec![14, 14]);
            for h in &layer.heads {
                assert_eq!(&h.positions[4..], &(20..30).collect::<Vec<_>>()[..]);
            }
        }
        assert_eq!(s.step_count(), 10);
    }

    #[test]
    fn rejects_bad_setup() {
        let model = Model::new(config()).unwrap();
        let layout = TokenLayout::uniform(0, 2, 2, 0).unwrap();
        let mut p = policy(PolicyKind::PureKv, 0.5);
        p.st_layer_index = 1;
        assert!(Session::new(&config(), layout.clone(), p, SparsityPattern::Dense).is_err());
        let mut s = Session::new(&config(), layout, policy(PolicyKind::PureKv, 0.5), SparsityPattern::Dense).unwrap();
        assert!(model.prefill(&mut s, &seeded_gaussian(3, 8, 1)).is_err());
        let mut s2 = s.clone();
        assert!(s2.apply_compression().is_err());
        model.prefill(&mut s, &seeded_gaussian(4, 8, 1)).unwrap();
        assert!(model.prefill(&mut s, &seeded_gaussian(4, 8, 1)).is_err());
    }
}
