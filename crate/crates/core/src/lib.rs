//! Span representation probing.
//!
//! Six span pooling methods over precomputed multi-layer token embeddings,
//! edge-probing classifiers trained on top of them, dataset builders for
//! detection tasks, and the scoring/analysis used to compare methods.
//!
//! Numeric code is generic over [`Scalar`] (`f32`/`f64`); the aliases below
//! fix the precision used by training and checks.

pub mod builders;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod mix;
pub mod nn;
pub mod optim;
pub mod probe;
pub mod scalar;
pub mod span;
pub mod store;
pub mod trainer;

pub use data::{Arity, ProbingExample, ProbingTarget, SpanIndex, TaskKind, TaskSpec};
pub use error::{Error, Result, StoreError};
pub use mix::{MixMode, MixParams};
pub use probe::{Probe, ProbeConfig, ProbeParams};
pub use scalar::Scalar;
pub use span::{CoherentSplit, SpanKind, SpanMethod};
pub use store::{EmbeddingStore, LayeredEmbeddings};

/// Double-precision probe used for training and gradient checks.
pub type Probe64 = Probe<f64>;
/// Single-precision probe for inference.
pub type Probe32 = Probe<f32>;
pub type ProbeParams64 = ProbeParams<f64>;
pub type SpanMethod64 = SpanMethod<f64>;
pub type MixParams64 = MixParams<f64>;
