use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul, seeded_gaussian, Matrix, SplitMix64};

/// Feed-forward width as a multiple of `d_model`.
pub const D_FF_MULTIPLIER: usize = 2;

const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub d_model: usize,
    pub num_q_heads: usize,
    pub num_kv_heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("d_model", self.d_model),
            ("num_q_heads", self.num_q_heads),
            ("num_kv_heads", self.num_kv_heads),
            ("d_k", self.d_k),
            ("d_v", self.d_v),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be >= 1")));
        }
        if !self.num_q_heads.is_multiple_of(self.num_kv_heads) {
            return Err(Error::config(format!(
                "num_q_heads ({}) must be divisible by num_kv_heads ({})",
                self.num_q_heads, self.num_kv_heads
            )));
        }
        if self.d_model != self.num_q_heads * self.d_k {
            return Err(Error::config(format!(
                "d_model ({}) must equal num_q_heads * d_k ({})",
                self.d_model,
                self.num_q_heads * self.d_k
            )));
        }
        Ok(())
    }

    /// Query heads sharing each KV head.
    pub fn group_size(&self) -> usize {
        self.num_q_heads / self.num_kv_heads
    }

    pub fn kv_head_of(&self, q_head: usize) -> usize {
        q_head / self.group_size()
    }

    pub fn d_ff(&self) -> usize {
        D_FF_MULTIPLIER * self.d_model
    }
}

/// Projection weights of one pre-norm block.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

/// Immutable seeded model. Blocks are
/// `x += attn(rms(x)) · Wo; x += relu(rms(x) · W_up) · W_down`,
/// followed by a final RMS norm and the unembedding.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    layers: Vec<LayerWeights>,
    unembed: Matrix,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let scale = 1.0 / (config.d_model as f64).sqrt();
        let mut stream = 0u64;
        let mut draw = |rows: usize, cols: usize| {
            let seed = SplitMix64::derive(config.seed, stream).next_u64();
            stream += 1;
            seeded_gaussian(rows, cols, seed).scale(scale)
        };
        let (dm, hq, hkv) = (config.d_model, config.num_q_heads, config.num_kv_heads);
        let layers = (0..config.num_layers)
            .map(|_| LayerWeights {
                wq: draw(dm, hq * config.d_k),
                wk: draw(dm, hkv * config.d_k),
                wv: draw(dm, hkv * config.d_v),
                wo: draw(hq * config.d_v, dm),
                w_up: draw(dm, config.d_ff()),
                w_down: draw(config.d_ff(), dm),
            })
            .collect();
        let unembed = draw(dm, config.vocab_size);
        Ok(Self {
            config,
            layers,
            unembed,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    pub fn unembed(&self) -> &Matrix {
        &self.unembed
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    pub(crate) fn check_embeddings(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.config.d_model {
            return Err(Error::shape(
                "embeddings",
                format!("{} columns, model width {}", x.cols(), self.config.d_model),
            ));
        }
        Ok(())
    }

    /// Q, K, V projections of the normalized residual stream.
    pub(crate) fn project(&self, layer: usize, normed: &Matrix) -> Result<Projections> {
        let w = &self.layers[layer];
        Ok(Projections {
            q: matmul(normed, &w.wq)?,
            k: matmul(normed, &w.wk)?,
            v: matmul(normed, &w.wv)?,
        })
    }

    pub(crate) fn q_head(&self, p: &Projections, head: usize) -> Matrix {
        p.q.col_block(head * self.config.d_k, self.config.d_k)
    }

    pub(crate) fn k_head(&self, p: &Projections, kv_head: usize) -> Matrix {
        p.k.col_block(kv_head * self.config.d_k, self.config.d_k)
    }

    pub(crate) fn v_head(&self, p: &Projections, kv_head: usize) -> Matrix {
        p.v.col_block(kv_head * self.config.d_v, self.config.d_v)
    }

    /// Adds the output projection of concatenated head outputs and the MLP
    /// to the residual stream.
    pub(crate) fn finish_block(
        &self,
        layer: usize,
        residual: &Matrix,
        head_outputs: &[Matrix],
    ) -> Result<Matrix> {
        let w = &self.layers[layer];
        let rows = residual.rows();
        let d_v = self.config.d_v;
        let concat = Matrix::from_fn(rows, head_outputs.len() * d_v, |i, j| {
            head_outputs[j / d_v].get(i, j % d_v)
        });
        let x = residual.add(&matmul(&concat, &w.wo)?)?;
        let mut hidden = matmul(&rms_norm(&x), &w.w_up)?;
        for r in 0..hidden.rows() {
            hidden.row_mut(r).iter_mut().for_each(|h| *h = h.max(0.0));
        }
        x.add(&matmul(&hidden, &w.w_down)?)
    }

    pub(crate) fn logits(&self, residual: &Matrix) -> Result<Matrix> {
        matmul(&rms_norm(residual), &self.unembed)
    }
}

pub(crate) struct Projections {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

/// Row-wise RMS normalization without a learned gain.
pub fn rms_norm(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    let d = x.cols() as f64;
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / d;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        row.iter_mut().for_each(|v| *v *= inv);
    }
    out
}
