//! Scaled dot-product attention in three forms.
//!
//! [`dense_causal`] and [`masked`] materialize the attention weight matrix and
//! return it. [`streaming_masked`] walks keys tile by tile with an online
//! softmax and only ever returns the output; callers that must not depend on
//! attention weights use that one.

use crate::error::{Error, Result};
use crate::masks::BoolMatrix;
use crate::numerics::{matmul, row_softmax, Matrix};

pub const DEFAULT_TILE_SIZE: usize = 16;

/// Query, key and value blocks for one attention head.
#[derive(Debug, Clone, Copy)]
pub struct AttnInputs<'a> {
    pub q: &'a Matrix,
    pub k: &'a Matrix,
    pub v: &'a Matrix,
    pub d_k: usize,
}

impl<'a> AttnInputs<'a> {
    pub fn new(q: &'a Matrix, k: &'a Matrix, v: &'a Matrix) -> Result<Self> {
        let inputs = Self { q, k, v, d_k: q.cols() };
        inputs.validate()?;
        Ok(inputs)
    }

    fn validate(&self) -> Result<()> {
        if self.q.cols() != self.d_k || self.k.cols() != self.d_k {
            return Err(Error::shape(
                "attention",
                format!(
                    "d_k={} but Q has {} and K has {} columns",
                    self.d_k,
                    self.q.cols(),
                    self.k.cols()
                ),
            ));
        }
        if self.k.rows() != self.v.rows() {
            return Err(Error::shape(
                "attention",
                format!("{} keys but {} values", self.k.rows(), self.v.rows()),
            ));
        }
        if self.k.rows() == 0 {
            return Err(Error::shape("attention", "no keys"));
        }
        Ok(())
    }

    fn scale(&self) -> f64 {
        1.0 / (self.d_k as f64).sqrt()
    }

    fn check_mask(&self, mask: &BoolMatrix) -> Result<()> {
        self.validate()?;
        if mask.shape() != (self.q.rows(), self.k.rows()) {
            return Err(Error::shape(
                "attention",
                format!(
                    "mask {:?} for {} queries and {} keys",
                    mask.shape(),
                    self.q.rows(),
                    self.k.rows()
                ),
            ));
        }
        Ok(())
    }
}

/// Attention output together with the row-stochastic weight matrix.
#[derive(Debug, Clone)]
pub struct MaterializedAttention {
    pub out: Matrix,
    pub weights: Matrix,
}

fn logits(inputs: &AttnInputs<'_>) -> Result<Matrix> {
    Ok(matmul(inputs.q, &inputs.k.transpose())?.scale(inputs.scale()))
}

/// Causal attention with the query block aligned to the last keys, so a
/// single decode query sees the whole cache.
pub fn dense_causal(inputs: &AttnInputs<'_>) -> Result<MaterializedAttention> {
    inputs.validate()?;
    if inputs.q.rows() > inputs.k.rows() {
        return Err(Error::shape(
            "dense_causal",
            format!("{} queries exceed {} keys", inputs.q.rows(), inputs.k.rows()),
        ));
    }
    masked(inputs, &BoolMatrix::causal(inputs.q.rows(), inputs.k.rows()))
}

/// Attention restricted to `mask`; masked weights are exactly zero.
pub fn masked(inputs: &AttnInputs<'_>, mask: &BoolMatrix) -> Result<MaterializedAttention> {
    inputs.check_mask(mask)?;
    let weights = row_softmax(&logits(inputs)?, Some(mask))?;
    let out = matmul(&weights, inputs.v)?;
    Ok(MaterializedAttention { out, weights })
}

/// Masked attention by online softmax over key tiles of `tile_size`.
///
/// Per query row it keeps a running max, running normalizer and running
/// weighted sum of values; scores exist only for the current tile.
pub fn streaming_masked(
    inputs: &AttnInputs<'_>,
    mask: &BoolMatrix,
    tile_size: usize,
) -> Result<Matrix> {
    inputs.check_mask(mask)?;
    if tile_size == 0 {
        return Err(Error::config("tile size must be >= 1"));
    }
    let (l_q, l_k) = (inputs.q.rows(), inputs.k.rows());
    let d_v = inputs.v.cols();
    let scale = inputs.scale();
    let mut out = Matrix::zeros(l_q, d_v);
    let mut tile_scores = vec![f64::NEG_INFINITY; tile_size];

    for i in 0..l_q {
        let q = inputs.q.row(i);
        let mut running_max = f64::NEG_INFINITY;
        let mut normalizer = 0.0;
        let mut acc = vec![0.0; d_v];

        for start in (0..l_k).step_by(tile_size) {
            let end = (start + tile_size).min(l_k);
            let mut tile_max = f64::NEG_INFINITY;
            for (slot, j) in tile_scores.iter_mut().zip(start..end) {
                *slot = if mask.get(i, j) {
                    let s = dot(q, inputs.k.row(j)) * scale;
                    tile_max = tile_max.max(s);
                    s
                } else {
                    f64::NEG_INFINITY
                };
            }
            if tile_max == f64::NEG_INFINITY {
                continue;
            }
            let new_max = running_max.max(tile_max);
            if running_max != f64::NEG_INFINITY && new_max > running_max {
                let correction = (running_max - new_max).exp();
                normalizer *= correction;
                acc.iter_mut().for_each(|a| *a *= correction);
            }
            running_max = new_max;
            for (&s, j) in tile_scores.iter().zip(start..end) {
                if s == f64::NEG_INFINITY {
                    continue;
                }
                let p = (s - running_max).exp();
                normalizer += p;
                for (a, &v) in acc.iter_mut().zip(inputs.v.row(j)) {
                    *a += p * v;
                }
            }
        }

        if normalizer == 0.0 {
            return Err(Error::FullyMaskedRow { row: i });
        }
        for (o, a) in out.row_mut(i).iter_mut().zip(&acc) {
            *o = a / normalizer;
        }
    }
    Ok(out)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
