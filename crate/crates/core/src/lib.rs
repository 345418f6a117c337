//! Fixed-memory attention with three tiers of memory: a linear attention
//! hidden state, an exact sliding window, and a sparse cache of pairs the
//! hidden state recalls badly.
//!
//! Module map:
//!
//! * [`numerics`]: vectors, matrices, singular values, seeded sampling.
//! * [`attention`]: softmax oracle, exponential feature map, linear state,
//!   feature-map distillation.
//! * [`scoring`]: self-recall and query-based eviction scores.
//! * [`cache`]: the per-token decoding state machine.
//! * [`chunkwise`]: chunked prefill with a two-chunk exact lookback.
//! * [`analysis`]: Gram-matrix rank study and memory-collision matrices.
//! * [`harness`]: synthetic needle-in-a-haystack recall experiments and the
//!   suite runner.

pub mod analysis;
pub mod attention;
pub mod cache;
pub mod chunkwise;
mod error;
pub mod harness;
pub mod numerics;
pub mod scoring;

pub use attention::{AttentionConfig, FeatureMapParams, KVPair, LinearState};
pub use cache::{CacheConfig, LoLAState, StateSnapshot};
pub use chunkwise::{prefill, ChunkConfig, PrefillState};
pub use error::{Error, Result};
pub use numerics::{Matrix, SeededRng, Vector};
pub use scoring::Scorer;
