//! Desk-scale transformer inference with cross-layer KV-cache compression.
//!
//! Pipeline: a toy grouped-query transformer prefills a video-shaped prompt,
//! the lower layers' attention identifies important cache rows, higher layers
//! reuse that signal weighted by their own value norms, and the cache is
//! evicted to a budget before decoding. Higher layers run only through a
//! streaming attention routine that never forms an attention matrix.

pub mod attention;
pub mod cache;
pub mod engine;
pub mod error;
pub mod harness;
pub mod masks;
pub mod numerics;
pub mod stats;

pub use error::{Error, Result};
