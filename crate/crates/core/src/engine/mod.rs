//! Toy grouped-query transformer with a compressible KV cache.
//!
//! Layer wiring for a session with CLIE layer `c` and sparse-start layer `s`
//! (`c < s`):
//!
//! * layers `0..=c` attend densely and materialize attention weights, which
//!   are reduced to recent-window sums on the spot;
//! * layers `c+1..` run only through [`streaming_masked`](crate::attention::streaming_masked);
//! * layers `s..` additionally use the session's sparsity pattern.

mod model;
mod session;
mod validate;

pub use model::{LayerWeights, Model, ModelConfig, D_FF_MULTIPLIER};
pub use session::{AttentionRoute, Session, SessionPhase};
pub use validate::{
    instrumented_forward, validate_cross_layer, HeadCorrelation, InstrumentedLayer,
    LayerCorrelation, ValidationOptions,
};
