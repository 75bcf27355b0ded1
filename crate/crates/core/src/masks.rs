//! Token layouts for video prompts and the boolean sparsity masks built on them.
//!
//! A prompt is `text prefix | frame 0 | frame 1 | ... | text suffix`, each
//! frame being a run of patch tokens. Text tokens attend causally to
//! everything and every token may attend to the text prefix; the sparsity
//! pattern only restricts video-to-video links. Self-links are always kept.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a flat token sequence splits into text and video frames.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenLayout {
    text_prefix_len: usize,
    frame_sizes: Vec<usize>,
    text_suffix_len: usize,
    // Start offset of each frame, plus the end of the video block.
    frame_starts: Vec<usize>,
}

/// What occupies a given sequence position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    Prefix,
    Video { frame: usize, patch: usize },
    Suffix,
}

impl TokenLayout {
    /// `num_frames` frames of `patches_per_frame` tokens each.
    pub fn uniform(
        text_prefix_len: usize,
        num_frames: usize,
        patches_per_frame: usize,
        text_suffix_len: usize,
    ) -> Result<Self> {
        if num_frames > 0 && patches_per_frame == 0 {
            return Err(Error::config("patches_per_frame must be >= 1 when frames exist"));
        }
        Self::with_frames(
            text_prefix_len,
            vec![patches_per_frame; num_frames],
            text_suffix_len,
        )
    }

    /// Frames with individual patch counts. Temporal patterns reject these
    /// unless all counts agree.
    pub fn with_frames(
        text_prefix_len: usize,
        frame_sizes: Vec<usize>,
        text_suffix_len: usize,
    ) -> Result<Self> {
        if frame_sizes.contains(&0) {
            return Err(Error::config("every frame needs at least one patch"));
        }
        let mut frame_starts = Vec::with_capacity(frame_sizes.len() + 1);
        let mut at = text_prefix_len;
        for &p in &frame_sizes {
            frame_starts.push(at);
            at += p;
        }
        frame_starts.push(at);
        Ok(Self {
            text_prefix_len,
            frame_sizes,
            text_suffix_len,
            frame_starts,
        })
    }

    pub fn text_prefix_len(&self) -> usize {
        self.text_prefix_len
    }

    pub fn text_suffix_len(&self) -> usize {
        self.text_suffix_len
    }

    pub fn num_frames(&self) -> usize {
        self.frame_sizes.len()
    }

    pub fn frame_sizes(&self) -> &[usize] {
        &self.frame_sizes
    }

    /// Common patch count, or `None` for ragged layouts.
    pub fn patches_per_frame(&self) -> Option<usize> {
        let first = *self.frame_sizes.first()?;
        self.frame_sizes
            .iter()
            .all(|&p| p == first)
            .then_some(first)
    }

    pub fn video_len(&self) -> usize {
        self.frame_sizes.iter().sum()
    }

    pub fn total_len(&self) -> usize {
        self.text_prefix_len + self.video_len() + self.text_suffix_len
    }

    pub fn video_range(&self) -> std::ops::Range<usize> {
        self.text_prefix_len..self.text_prefix_len + self.video_len()
    }

    pub fn slot(&self, pos: usize) -> Slot {
        let video = self.video_range();
        if pos < video.start {
            Slot::Prefix
        } else if pos >= video.end {
            Slot::Suffix
        } else {
            // partition_point gives the first start > pos.
            let frame = self.frame_starts.partition_point(|&s| s <= pos) - 1;
            Slot::Video {
                frame,
                patch: pos - self.frame_starts[frame],
            }
        }
    }

    pub fn frame_of(&self, pos: usize) -> Option<usize> {
        match self.slot(pos) {
            Slot::Video { frame, .. } => Some(frame),
            _ => None,
        }
    }

    pub fn patch_of(&self, pos: usize) -> Option<usize> {
        match self.slot(pos) {
            Slot::Video { patch, .. } => Some(patch),
            _ => None,
        }
    }

    /// Sequence positions of `frame`.
    pub fn frame_positions(&self, frame: usize) -> std::ops::Range<usize> {
        self.frame_starts[frame]..self.frame_starts[frame + 1]
    }
}

/// Declarative attention-sparsity pattern over video tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SparsityPattern {
    Dense,
    Local { window: usize },
    Atrous { stride: usize },
    Spatial,
    Temporal,
    SpatialTemporal,
}

impl SparsityPattern {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SparsityPattern::Local { window } if window < 1 => {
                Err(Error::config("local window must be >= 1"))
            }
            SparsityPattern::Atrous { stride } if stride < 2 => {
                Err(Error::config("atrous stride must be >= 2"))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> String {
        match self {
            SparsityPattern::Dense => "dense".into(),
            SparsityPattern::Local { window } => format!("local:{window}"),
            SparsityPattern::Atrous { stride } => format!("atrous:{stride}"),
            SparsityPattern::Spatial => "spatial".into(),
            SparsityPattern::Temporal => "temporal".into(),
            SparsityPattern::SpatialTemporal => "spatial_temporal".into(),
        }
    }

    fn needs_uniform_frames(&self) -> bool {
        matches!(
            self,
            SparsityPattern::Temporal | SparsityPattern::SpatialTemporal
        )
    }
}

impl fmt::Display for SparsityPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Parsed pattern name whose local/atrous parameter may still be open.
///
/// `local` and `atrous` without a `:N` suffix take their defaults (one frame
/// and 2) once the layout is known.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatternSpec {
    Fixed(SparsityPattern),
    LocalDefault,
    AtrousDefault,
}

pub const DEFAULT_ATROUS_STRIDE: usize = 2;

impl PatternSpec {
    pub fn resolve(self, layout: &TokenLayout) -> SparsityPattern {
        match self {
            PatternSpec::Fixed(p) => p,
            PatternSpec::LocalDefault => SparsityPattern::Local {
                window: layout
                    .frame_sizes()
                    .iter()
                    .copied()
                    .max()
                    .unwrap_or(1),
            },
            PatternSpec::AtrousDefault => SparsityPattern::Atrous {
                stride: DEFAULT_ATROUS_STRIDE,
            },
        }
    }
}

impl FromStr for PatternSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        let arg = arg
            .map(|a| {
                a.parse::<usize>()
                    .map_err(|_| Error::config(format!("bad pattern parameter in `{s}`")))
            })
            .transpose()?;
        let spec = match (name, arg) {
            ("dense", None) => PatternSpec::Fixed(SparsityPattern::Dense),
            ("spatial", None) => PatternSpec::Fixed(SparsityPattern::Spatial),
            ("temporal", None) => PatternSpec::Fixed(SparsityPattern::Temporal),
            ("spatial_temporal", None) => PatternSpec::Fixed(SparsityPattern::SpatialTemporal),
            ("local", None) => PatternSpec::LocalDefault,
            ("local", Some(window)) => PatternSpec::Fixed(SparsityPattern::Local { window }),
            ("atrous", None) => PatternSpec::AtrousDefault,
            ("atrous", Some(stride)) => PatternSpec::Fixed(SparsityPattern::Atrous { stride }),
            _ => return Err(Error::config(format!("unknown sparsity pattern `{s}`"))),
        };
        if let PatternSpec::Fixed(p) = spec {
            p.validate()?;
        }
        Ok(spec)
    }
}

/// Row-major boolean matrix; `true` means attention is allowed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoolMatrix {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl BoolMatrix {
    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                bits.push(f(i, j));
            }
        }
        Self { rows, cols, bits }
    }

    /// Lower-triangular mask of an `l_q × l_k` block whose last query row
    /// lines up with the last key (`l_q <= l_k`).
    pub fn causal(l_q: usize, l_k: usize) -> Self {
        let offset = l_k.saturating_sub(l_q);
        Self::from_fn(l_q, l_k, |i, j| j <= i + offset)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.bits[r * self.cols..(r + 1) * self.cols]
    }

    pub fn count_true(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn or(&self, other: &BoolMatrix) -> Result<BoolMatrix> {
        if self.shape() != other.shape() {
            return Err(Error::shape("BoolMatrix::or", "shape mismatch"));
        }
        Ok(BoolMatrix {
            rows: self.rows,
            cols: self.cols,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect(),
        })
    }

    /// Rows of `0`/`1` characters separated by newlines, with a trailing newline.
    pub fn to_text_grid(&self) -> String {
        let mut s = String::with_capacity(self.rows * (self.cols + 1));
        for r in 0..self.rows {
            s.extend(self.row(r).iter().map(|&b| if b { '1' } else { '0' }));
            s.push('\n');
        }
        s
    }

    pub fn from_text_grid(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        let cols = lines.first().map_or(0, |l| l.trim().len());
        let mut bits = Vec::with_capacity(lines.len() * cols);
        for (i, line) in lines.iter().enumerate() {
            let line = line.trim();
            if line.len() != cols {
                return Err(Error::shape("from_text_grid", format!("line {i} width")));
            }
            for ch in line.chars() {
                bits.push(match ch {
                    '1' => true,
                    '0' => false,
                    other => {
                        return Err(Error::config(format!("unexpected `{other}` in mask grid")))
                    }
                });
            }
        }
        Ok(Self {
            rows: lines.len(),
            cols,
            bits,
        })
    }
}

/// Whether query `q` may attend to key `k` under `pattern`.
///
/// Exposed for per-pair queries; `build_mask` is the bulk form.
pub fn allowed(layout: &TokenLayout, pattern: &SparsityPattern, q: usize, k: usize) -> bool {
    if k > q {
        return false;
    }
    if k == q {
        return true;
    }
    let (q_frame, q_patch) = match layout.slot(q) {
        Slot::Video { frame, patch } => (frame, patch),
        // Text queries see their whole causal past.
        _ => return true,
    };
    let (k_frame, k_patch) = match layout.slot(k) {
        Slot::Video { frame, patch } => (frame, patch),
        Slot::Prefix => return true,
        // k < q with q in video means k cannot be suffix.
        Slot::Suffix => unreachable!("suffix key before a video query"),
    };
    let spatial = || k_frame == 0 || k_frame == q_frame;
    let temporal = || k_frame == 0 || (k_frame + 1 == q_frame && k_patch == q_patch);
    match *pattern {
        SparsityPattern::Dense => true,
        SparsityPattern::Local { window } => q - k < window,
        SparsityPattern::Atrous { stride } => (q - k).is_multiple_of(stride),
        SparsityPattern::Spatial => spatial(),
        SparsityPattern::Temporal => temporal(),
        SparsityPattern::SpatialTemporal => spatial() || temporal(),
    }
}

/// Materializes `pattern` over `layout` as a causal boolean mask.
pub fn build_mask(layout: &TokenLayout, pattern: &SparsityPattern) -> Result<BoolMatrix> {
    pattern.validate()?;
    if pattern.needs_uniform_frames() && layout.num_frames() > 0 && layout.patches_per_frame().is_none() {
        return Err(Error::config(format!(
            "{pattern} sparsity needs equal patches per frame, got {:?}",
            layout.frame_sizes()
        )));
    }
    let n = layout.total_len();
    Ok(BoolMatrix::from_fn(n, n, |q, k| allowed(layout, pattern, q, k)))
}

/// Allowed pairs over the full causal pair count `n(n+1)/2`.
pub fn mask_density(mask: &BoolMatrix) -> Result<f64> {
    let n = mask.rows();
    if n == 0 {
        return Err(Error::shape("mask_density", "empty mask"));
    }
    Ok(mask.count_true() as f64 / (n * (n + 1) / 2) as f64)
}
