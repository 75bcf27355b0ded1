//! Independent reference implementations used as test oracles. Nothing here
//! calls the crate's attention, cache or engine code paths; only the weight
//! matrices and the mask builder are shared.
#![allow(dead_code)]

use purekv::engine::{Model, ModelConfig};
use purekv::masks::BoolMatrix;
use purekv::numerics::Matrix;

pub fn config(seed: u64) -> ModelConfig {
    ModelConfig {
        num_layers: 8,
        d_model: 16,
        num_q_heads: 8,
        num_kv_heads: 2,
        d_k: 2,
        d_v: 3,
        vocab_size: 12,
        seed,
    }
}

fn mm(a: &Matrix, b: &Matrix) -> Matrix {
    Matrix::from_fn(a.rows(), b.cols(), |i, j| {
        (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum()
    })
}

fn rms(x: &Matrix) -> Matrix {
    Matrix::from_fn(x.rows(), x.cols(), |i, j| {
        let ms: f64 = x.row(i).iter().map(|v| v * v).sum::<f64>() / x.cols() as f64;
        x.get(i, j) / (ms + 1e-6).sqrt()
    })
}

/// Naive masked attention: scores, max-subtracted exponentials, weighted sum.
pub fn naive_attention(q: &Matrix, k: &Matrix, v: &Matrix, allowed: impl Fn(usize, usize) -> bool) -> (Matrix, Matrix) {
    let d = q.cols() as f64;
    let mut weights = Matrix::zeros(q.rows(), k.rows());
    for i in 0..q.rows() {
        let scores: Vec<Option<f64>> = (0..k.rows())
            .map(|j| {
                allowed(i, j).then(|| (0..q.cols()).map(|t| q.get(i, t) * k.get(j, t)).sum::<f64>() / d.sqrt())
            })
            .collect();
        let m = scores.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().flatten().map(|s| (s - m).exp()).sum();
        for (j, s) in scores.iter().enumerate() {
            if let Some(s) = s {
                weights.set(i, j, (s - m).exp() / z);
            }
        }
    }
    let out = mm(&weights, v);
    (out, weights)
}

/// Full forward pass over `x`, with per-layer masks chosen by `mask_for`.
/// Returns logits for every row.
pub fn reference_forward(model: &Model, x: &Matrix, mask_for: impl Fn(usize) -> BoolMatrix) -> Matrix {
    let cfg = *model.config();
    let group = cfg.num_q_heads / cfg.num_kv_heads;
    let mut x = x.clone();
    for (layer, w) in model.layers().iter().enumerate() {
        let mask = mask_for(layer);
        let h = rms(&x);
        let (q, k, v) = (mm(&h, &w.wq), mm(&h, &w.wk), mm(&h, &w.wv));
        let mut concat = Matrix::zeros(x.rows(), cfg.num_q_heads * cfg.d_v);
        for head in 0..cfg.num_q_heads {
            let g = head / group;
            let qh = q.col_block(head * cfg.d_k, cfg.d_k);
            let kh = k.col_block(g * cfg.d_k, cfg.d_k);
            let vh = v.col_block(g * cfg.d_v, cfg.d_v);
            let (out, _) = naive_attention(&qh, &kh, &vh, |i, j| mask.get(i, j));
            for i in 0..x.rows() {
                for c in 0..cfg.d_v {
                    concat.set(i, head * cfg.d_v + c, out.get(i, c));
                }
            }
        }
        let attn = mm(&concat, &w.wo);
        x = Matrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) + attn.get(i, j));
        let hidden = mm(&rms(&x), &w.w_up);
        let hidden = Matrix::from_fn(hidden.rows(), hidden.cols(), |i, j| hidden.get(i, j).max(0.0));
        let mlp = mm(&hidden, &w.w_down);
        x = Matrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) + mlp.get(i, j));
    }
    mm(&rms(&x), model.unembed())
}

/// Dense causal reference over a whole sequence.
pub fn dense_reference(model: &Model, x: &Matrix) -> Matrix {
    let n = x.rows();
    reference_forward(model, x, |_| BoolMatrix::causal(n, n))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Recent-window sums recomputed from scratch, averaged over the query heads
/// of each KV group.
pub fn brute_force_sums(weights: &[Matrix], num_kv_heads: usize, w: usize) -> Vec<Vec<f64>> {
    let group = weights.len() / num_kv_heads;
    let l = weights[0].rows();
    (0..num_kv_heads)
        .map(|g| {
            (0..l - w)
                .map(|j| {
                    let mut total = 0.0;
                    for a in &weights[g * group..(g + 1) * group] {
                        for i in l - w..l {
                            total += a.get(i, j);
                        }
                    }
                    total / group as f64
                })
                .collect()
        })
        .collect()
}

/// Exhaustive top-`h` selection: sort all (score, index) pairs with the
/// smaller index winning ties, then append the recent window.
pub fn brute_force_select(scores: &[f64], w: usize, h: usize, l: usize) -> Vec<usize> {
    let mut pairs: Vec<(f64, usize)> = scores.iter().cloned().zip(0..).collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut kept: Vec<usize> = pairs[..h].iter().map(|p| p.1).collect();
    kept.extend(l - w..l);
    kept.sort_unstable();
    kept
}

pub fn l2(row: &[f64]) -> f64 {
    row.iter().map(|x| x * x).sum::<f64>().sqrt()
}
