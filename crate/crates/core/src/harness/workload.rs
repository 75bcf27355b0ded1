use crate::error::{Error, Result};
use crate::masks::TokenLayout;
use crate::numerics::{seeded_gaussian, Matrix, SplitMix64};

/// Synthetic prompt with planted salient video tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub layout: TokenLayout,
    pub num_salient: usize,
    /// `1.0` plants nothing distinctive.
    pub salient_gain: f64,
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_salient > self.layout.video_len() {
            return Err(Error::config(format!(
                "num_salient {} exceeds {} video tokens",
                self.num_salient,
                self.layout.video_len()
            )));
        }
        if !self.salient_gain.is_finite() || self.salient_gain < 1.0 {
            return Err(Error::config("salient_gain must be a finite value >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub embeddings: Matrix,
    /// Sorted sequence positions of the planted tokens.
    pub salient_positions: Vec<usize>,
}

// Streams derived from the workload seed.
const BACKGROUND_STREAM: u64 = 0;
const DIRECTION_STREAM: u64 = 1;
const PLACEMENT_STREAM: u64 = 2;
const DECODE_STREAM: u64 = 3;

fn stream_seed(seed: u64, stream: u64) -> u64 {
    SplitMix64::derive(seed, stream).next_u64()
}

/// Gaussian background rows; each salient row additionally gets
/// `(gain - 1) * sqrt(d_model) * u` for one shared unit direction `u`.
pub fn generate_workload(spec: &WorkloadSpec, d_model: usize) -> Result<Workload> {
    spec.validate()?;
    let l = spec.layout.total_len();
    let mut embeddings = seeded_gaussian(l, d_model, stream_seed(spec.seed, BACKGROUND_STREAM));

    let mut video: Vec<usize> = spec.layout.video_range().collect();
    SplitMix64::new(stream_seed(spec.seed, PLACEMENT_STREAM)).shuffle(&mut video);
    let mut salient: Vec<usize> = video.into_iter().take(spec.num_salient).collect();
    salient.sort_unstable();

    if !salient.is_empty() && spec.salient_gain > 1.0 {
        let dir = seeded_gaussian(1, d_model, stream_seed(spec.seed, DIRECTION_STREAM));
        let norm = dir.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
        let amp = (spec.salient_gain - 1.0) * (d_model as f64).sqrt() / norm;
        for &pos in &salient {
            for (e, u) in embeddings.row_mut(pos).iter_mut().zip(dir.as_slice()) {
                *e += amp * u;
            }
        }
    }
    Ok(Workload {
        embeddings,
        salient_positions: salient,
    })
}

/// Embedding rows fed to decode steps.
pub fn decode_inputs(seed: u64, steps: usize, d_model: usize) -> Matrix {
    seeded_gaussian(steps, d_model, stream_seed(seed, DECODE_STREAM))
}

/// Fraction of planted positions present in `retained`.
pub fn salient_recall(retained: &[usize], salient: &[usize]) -> Result<f64> {
    if salient.is_empty() {
        return Err(Error::Runtime("salient recall is undefined without salient tokens".into()));
    }
    let hits = salient.iter().filter(|s| retained.contains(s)).count();
    Ok(hits as f64 / salient.len() as f64)
}
