//! KV-cache storage, importance scoring and budgeted eviction.
//!
//! Scoring follows the recent-window scheme: the last `w` queries' attention
//! is summed onto the older `l - w` keys, weighted by each key's value-row
//! norm, and the top `h` of those survive alongside the recent window. Higher
//! layers reuse a lower layer's attention sums with their own value norms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{l2_norm_rows, Matrix};

/// Cached keys and values of one KV head, tagged with original positions.
#[derive(Debug, Clone, PartialEq)]
pub struct KvHead {
    pub keys: Matrix,
    pub values: Matrix,
    pub positions: Vec<usize>,
}

impl KvHead {
    pub fn new(keys: Matrix, values: Matrix, positions: Vec<usize>) -> Result<Self> {
        if keys.rows() != values.rows() || keys.rows() != positions.len() {
            return Err(Error::shape(
                "KvHead::new",
                format!(
                    "{} keys, {} values, {} positions",
                    keys.rows(),
                    values.rows(),
                    positions.len()
                ),
            ));
        }
        if positions.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::config("cache positions must be strictly increasing"));
        }
        Ok(Self {
            keys,
            values,
            positions,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn append(&mut self, key: &[f64], value: &[f64], position: usize) -> Result<()> {
        if self.positions.last().is_some_and(|&p| p >= position) {
            return Err(Error::config(format!(
                "appended position {position} is not after {:?}",
                self.positions.last()
            )));
        }
        self.keys.push_row(key)?;
        self.values.push_row(value)?;
        self.positions.push(position);
        Ok(())
    }

    /// Keeps only rows whose original position is in `retained`.
    pub fn evict(&self, retained: &[usize]) -> Result<KvHead> {
        let mut rows = Vec::with_capacity(retained.len());
        let mut sorted = retained.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        for pos in sorted {
            let row = self
                .positions
                .binary_search(&pos)
                .map_err(|_| Error::config(format!("position {pos} is not in the cache")))?;
            rows.push(row);
        }
        Ok(KvHead {
            keys: self.keys.select_rows(&rows),
            values: self.values.select_rows(&rows),
            positions: rows.iter().map(|&r| self.positions[r]).collect(),
        })
    }
}

/// One transformer layer's cache: one [`KvHead`] per KV head.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCacheLayer {
    pub heads: Vec<KvHead>,
}

impl KvCacheLayer {
    /// Applies per-head retained position sets.
    pub fn evict(&self, retained: &[Vec<usize>]) -> Result<KvCacheLayer> {
        if retained.len() != self.heads.len() {
            return Err(Error::shape(
                "KvCacheLayer::evict",
                format!("{} sets for {} heads", retained.len(), self.heads.len()),
            ));
        }
        let heads = self
            .heads
            .iter()
            .zip(retained)
            .map(|(h, r)| h.evict(r))
            .collect::<Result<_>>()?;
        Ok(KvCacheLayer { heads })
    }

    pub fn rows_per_head(&self) -> Vec<usize> {
        self.heads.iter().map(KvHead::len).collect()
    }
}

/// Recent-window attention sums for the layer whose attention is reused.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceState {
    /// Per KV head, one entry per non-recent position.
    pub c_low: Vec<Vec<f64>>,
    pub split: BudgetSplit,
    pub seq_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    PureKv,
    H2oLike,
    StreamingLike,
    Full,
}

impl PolicyKind {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyKind::PureKv => "pure_kv",
            PolicyKind::H2oLike => "h2o_like",
            PolicyKind::StreamingLike => "streaming_like",
            PolicyKind::Full => "full",
        }
    }
}

/// Eviction policy and layer wiring.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    pub budget_fraction: f64,
    pub recent_window: usize,
    pub sink_len: usize,
    /// Layer whose attention sums are reused by every layer above it.
    pub clie_layer_index: usize,
    /// First layer running the sparse attention pattern.
    pub st_layer_index: usize,
}

pub const DEFAULT_CLIE_LAYER_INDEX: usize = 2;

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.budget_fraction > 0.0 && self.budget_fraction <= 1.0) {
            return Err(Error::config(format!(
                "budget_fraction must be in (0, 1], got {}",
                self.budget_fraction
            )));
        }
        if self.recent_window < 1 {
            return Err(Error::config("recent_window must be >= 1"));
        }
        if self.st_layer_index <= self.clie_layer_index {
            return Err(Error::config(format!(
                "st_layer_index ({}) must be greater than clie_layer_index ({})",
                self.st_layer_index, self.clie_layer_index
            )));
        }
        Ok(())
    }

    /// Additionally checks the layer indices against a model depth.
    /// `st_layer_index == num_layers` means no sparse layers.
    pub fn validate_for_depth(&self, num_layers: usize) -> Result<()> {
        self.validate()?;
        if self.clie_layer_index >= num_layers {
            return Err(Error::config(format!(
                "clie_layer_index {} out of range for {num_layers} layers",
                self.clie_layer_index
            )));
        }
        if self.st_layer_index > num_layers {
            return Err(Error::config(format!(
                "st_layer_index {} exceeds {num_layers} layers",
                self.st_layer_index
            )));
        }
        Ok(())
    }
}

/// Sum of the last `w` rows of `A` over the first `l - w` columns.
pub fn accumulate_recent_attention(a: &Matrix, w: usize) -> Result<Vec<f64>> {
    let l = a.rows();
    if a.cols() != l {
        return Err(Error::shape(
            "accumulate_recent_attention",
            format!("attention must be square, got {:?}", a.shape()),
        ));
    }
    if w == 0 || w >= l {
        return Err(Error::config(format!(
            "recent window {w} leaves no non-recent segment in {l} tokens"
        )));
    }
    let mut c = vec![0.0; l - w];
    for i in l - w..l {
        for (cj, &aij) in c.iter_mut().zip(a.row(i)) {
            *cj += aij;
        }
    }
    Ok(c)
}

/// Attention sums weighted by the L2 norm of the matching value rows.
pub fn score_low(c: &[f64], values: &Matrix) -> Result<Vec<f64>> {
    weight_by_value_norm(c, values, "score_low")
}

/// Cross-layer estimate: a lower layer's sums weighted by this layer's value norms.
pub fn score_high(c_low: &[f64], values_high: &Matrix) -> Result<Vec<f64>> {
    weight_by_value_norm(c_low, values_high, "score_high")
}

fn weight_by_value_norm(c: &[f64], values: &Matrix, op: &'static str) -> Result<Vec<f64>> {
    if values.rows() < c.len() {
        return Err(Error::shape(
            op,
            format!("{} scores but only {} value rows", c.len(), values.rows()),
        ));
    }
    if c.is_empty() {
        return Ok(Vec::new());
    }
    let norms = l2_norm_rows(&values.select_rows(&(0..c.len()).collect::<Vec<_>>()))?;
    Ok(c.iter().zip(norms).map(|(c, n)| c * n).collect())
}

/// Recent window plus the `h` best-scoring older positions, ascending.
///
/// Ties go to the smaller index.
pub fn select_retained(scores: &[f64], w: usize, h: usize, l: usize) -> Result<Vec<usize>> {
    let older = l.saturating_sub(w);
    if scores.len() != older {
        return Err(Error::shape(
            "select_retained",
            format!("{} scores for {older} non-recent positions", scores.len()),
        ));
    }
    if h > older {
        return Err(Error::config(format!(
            "cannot keep {h} of {older} non-recent positions"
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Runtime("NaN importance score".into()));
    }
    let mut order: Vec<usize> = (0..older).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order.into_iter().take(h).collect();
    kept.sort_unstable();
    kept.extend(older..l);
    Ok(kept)
}

/// Column sums of a full attention matrix (accumulated attention received).
pub fn baseline_h2o_score(a: &Matrix) -> Result<Vec<f64>> {
    if a.rows() != a.cols() {
        return Err(Error::shape("baseline_h2o_score", "attention must be square"));
    }
    let mut score = vec![0.0; a.cols()];
    for row in a.row_iter() {
        for (s, &x) in score.iter_mut().zip(row) {
            *s += x;
        }
    }
    Ok(score)
}

/// First `sink` positions plus the last `window`, clamped to `0..l`.
pub fn baseline_streaming(l: usize, sink: usize, window: usize) -> Vec<usize> {
    if sink + window >= l {
        return (0..l).collect();
    }
    (0..sink).chain(l - window..l).collect()
}

/// Recent-window length and number of extra retained rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetSplit {
    pub w: usize,
    pub h: usize,
}

impl BudgetSplit {
    pub fn keep(&self) -> usize {
        self.w + self.h
    }
}

/// `ceil(budget * l)`, treating products within 1e-9 of an integer as exact
/// so that e.g. `0.05 * 200` keeps 10 rows rather than 11.
pub fn keep_count(budget_fraction: f64, l: usize) -> usize {
    let x = budget_fraction * l as f64;
    let nearest = x.round();
    let n = if (x - nearest).abs() < 1e-9 { nearest } else { x.ceil() };
    (n as usize).min(l)
}

pub fn budget_to_wh(budget_fraction: f64, l: usize, w_config: usize) -> Result<BudgetSplit> {
    if !(budget_fraction > 0.0 && budget_fraction <= 1.0) {
        return Err(Error::config(format!(
            "budget_fraction must be in (0, 1], got {budget_fraction}"
        )));
    }
    let keep = keep_count(budget_fraction, l);
    let w = w_config.min(keep);
    Ok(BudgetSplit { w, h: keep - w })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::seeded_gaussian;
    use proptest::prelude::*;

    fn uniform_causal(l: usize) -> Matrix {
        Matrix::from_fn(l, l, |i, j| if j <= i { 1.0 / (i + 1) as f64 } else { 0.0 })
    }

    #[test]
    fn recent_attention_sums() {
        let a = Matrix::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.5, 0.5, 0.0],
            vec![0.2, 0.3, 0.5],
        ])
        .unwrap();
        assert_eq!(accumulate_recent_attention(&a, 1).unwrap(), vec![0.2, 0.3]);
        assert_eq!(accumulate_recent_attention(&a, 2).unwrap().len(), 1);
        assert!(accumulate_recent_attention(&a, 3).is_err());

        let c = accumulate_recent_attention(&uniform_causal(4), 2).unwrap();
        for x in c {
            assert!((x - 7.0 / 12.0).abs() < 1e-15);
        }
    }

    #[test]
    fn value_norm_weighting() {
        let v = Matrix::from_rows(&[vec![0.0, 2.0], vec![9.0, 9.0]]).unwrap();
        assert_eq!(score_low(&[0.5], &v).unwrap(), vec![1.0]);
        assert_eq!(
            score_low(&[0.3, 0.9], &Matrix::zeros(2, 3)).unwrap(),
            vec![0.0, 0.0]
        );
        let v = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
        let s = score_low(&[0.4; 3], &v).unwrap();
        let argmax = (0..3).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap();
        assert_eq!(argmax, 2);
        assert!(score_low(&[1.0, 1.0], &Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn cross_layer_reduces_to_own_layer() {
        let v = seeded_gaussian(6, 4, 5);
        let c: Vec<f64> = (0..6).map(|i| 0.1 * i as f64).collect();
        assert_eq!(score_high(&c, &v).unwrap(), score_low(&c, &v).unwrap());
        assert!(score_high(&[0.0; 6], &v).unwrap().iter().all(|&s| s == 0.0));

        let norms = l2_norm_rows(&v).unwrap();
        let expected: Vec<f64> = c.iter().zip(&norms).map(|(c, n)| c * n).collect();
        assert_eq!(score_high(&c, &v).unwrap(), expected);
    }

    #[test]
    fn selection_examples() {
        assert_eq!(select_retained(&[3.0, 1.0, 2.0], 1, 2, 4).unwrap(), vec![0, 2, 3]);
        assert_eq!(select_retained(&[3.0, 1.0, 2.0], 1, 3, 4).unwrap(), vec![0, 1, 2, 3]);
        assert_eq!(select_retained(&[1.0, 1.0], 1, 1, 3).unwrap(), vec![0, 2]);
        assert!(select_retained(&[1.0, 1.0], 1, 3, 3).is_err());
        assert!(select_retained(&[1.0], 1, 0, 3).is_err());
    }

    #[test]
    fn eviction() {
        let keys = seeded_gaussian(5, 3, 1);
        let values = seeded_gaussian(5, 2, 2);
        let head = KvHead::new(keys.clone(), values, (0..5).collect()).unwrap();
        assert_eq!(head.evict(&[0, 1, 2, 3, 4]).unwrap(), head);
        assert_eq!(head.evict(&[3, 4]).unwrap().len(), 2);
        let kept = head.evict(&[0, 2]).unwrap();
        assert_eq!(kept.keys.row(0), keys.row(0));
        assert_eq!(kept.keys.row(1), keys.row(2));
        assert_eq!(kept.positions, vec![0, 2]);
        assert!(head.evict(&[7]).is_err());
        // Positions are matched by value, not row index.
        let again = kept.evict(&[2]).unwrap();
        assert_eq!(again.keys.row(0), keys.row(2));
    }

    #[test]
    fn h2o_scores() {
        assert_eq!(baseline_h2o_score(&uniform_causal(1)).unwrap(), vec![1.0]);
        let s = baseline_h2o_score(&uniform_causal(3)).unwrap();
        let expected = [1.0 + 0.5 + 1.0 / 3.0, 0.5 + 1.0 / 3.0, 1.0 / 3.0];
        for (a, b) in s.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(s.windows(2).all(|p| p[0] >= p[1]));
    }

    #[test]
    fn streaming_sets() {
        assert_eq!(baseline_streaming(10, 2, 3), vec![0, 1, 7, 8, 9]);
        assert_eq!(baseline_streaming(6, 0, 6), (0..6).collect::<Vec<_>>());
        assert_eq!(baseline_streaming(3, 2, 2), vec![0, 1, 2]);
    }

    #[test]
    fn budget_split() {
        assert_eq!(budget_to_wh(0.2, 100, 8).unwrap(), BudgetSplit { w: 8, h: 12 });
        assert_eq!(budget_to_wh(1.0, 37, 8).unwrap().keep(), 37);
        let s = budget_to_wh(0.2, 1000, 16).unwrap();
        assert_eq!(1000.0 / s.keep() as f64, 5.0);
        assert_eq!(keep_count(0.05, 200), 10);
        assert_eq!(keep_count(0.35, 100), 35);
        assert_eq!(keep_count(0.35, 40), 14);
        assert_eq!(keep_count(0.1, 37), 4);
        assert!(budget_to_wh(0.0, 10, 2).is_err());
        assert!(budget_to_wh(1.5, 10, 2).is_err());
    }

    #[test]
    fn policy_layer_order() {
        let mut p = PolicyConfig {
            kind: PolicyKind::PureKv,
            budget_fraction: 0.2,
            recent_window: 4,
            sink_len: 2,
            clie_layer_index: 2,
            st_layer_index: 4,
        };
        assert!(p.validate_for_depth(8).is_ok());
        p.st_layer_index = 2;
        assert!(p.validate().unwrap_err().is_config());
        p.st_layer_index = 9;
        assert!(p.validate_for_depth(8).is_err());
    }

    proptest! {
        #[test]
        fn selection_keeps_recent_window(
            scores in prop::collection::vec(0.0f64..5.0, 0..30),
            w in 1usize..10,
            h_frac in 0.0f64..=1.0,
        ) {
            let l = scores.len() + w;
            let h = ((scores.len() as f64) * h_frac).floor() as usize;
            let kept = select_retained(&scores, w, h, l).unwrap();
            prop_assert_eq!(kept.len(), w + h);
            prop_assert!(kept.windows(2).all(|p| p[0] < p[1]));
            for pos in l - w..l {
                prop_assert!(kept.contains(&pos));
            }
        }

        #[test]
        fn value_scaling_preserves_order(seed in 0u64..1000, c in 0.01f64..100.0) {
            let v = seeded_gaussian(12, 3, seed);
            let attn: Vec<f64> = seeded_gaussian(1, 12, seed + 7).as_slice().iter().map(|x| x.abs()).collect();
            let base = score_low(&attn, &v).unwrap();
            let scaled = score_low(&attn, &v.scale(c)).unwrap();
            for (b, s) in base.iter().zip(&scaled) {
                prop_assert!((s - c * b).abs() <= 1e-9 * (1.0 + s.abs()));
            }
            prop_assert_eq!(
                select_retained(&base, 0, 5, 12).unwrap(),
                select_retained(&scaled, 0, 5, 12).unwrap()
            );
        }

        #[test]
        fn eviction_keeps_order(seed in 0u64..1000, mask in prop::collection::vec(any::<bool>(), 10)) {
            let head = KvHead::new(seeded_gaussian(10, 2, seed), seeded_gaussian(10, 2, seed + 1), (0..10).map(|i| 3 * i).collect()).unwrap();
            let keep: Vec<usize> = mask.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| 3 * i).collect();
            let out = head.evict(&keep).unwrap();
            prop_assert_eq!(&out.positions, &keep);
            prop_assert_eq!(out.keys.rows(), keep.len());
        }
    }
}
