//! Class-prototype memory for classification, with a small deterministic
//! training stack around it.
//!
//! The centerpiece is [`memory::CategoricalMemory`]: a `C x D` matrix whose
//! row `i` is an exponential-moving-average prototype of class `i`'s
//! features. A query feature retrieves a softmax-weighted combination of
//! prototypes (cosine similarity at a fixed temperature), and the retrieved
//! response is added to the feature before classification. The crate also
//! provides:
//!
//! - [`numerics`]: dense row-major `f64` linear algebra, a seedable
//!   stream-splitting RNG, and stable softmax/cosine primitives;
//! - [`network`]: an MLP feature extractor plus linear classifier, with
//!   analytic backprop through the memory read path, SGD with momentum, and
//!   a step learning-rate schedule;
//! - [`data`]: a synthetic dataset generator with a controllable
//!   inter-class-similarity dial, plus CSV ingestion;
//! - [`experiments`]: deterministic training/evaluation loops, the ablation
//!   suite over read modes, attention-distribution statistics, and metrics
//!   persistence.

mod bytes;
pub mod data;
pub mod error;
pub mod experiments;
pub mod memory;
pub mod network;
pub mod numerics;

/// Version stamped into every persisted JSON document (configs, metrics,
/// reports, metadata sidecars).
pub const SCHEMA_VERSION: u32 = 1;

pub use error::{Error, Result};
pub use memory::{CategoricalMemory, PredictorParams, ReadMode, ReadResult, Similarity};
pub use network::{MlpModel, ReadModeSpec, TrainConfig};
pub use numerics::{Matrix, Rng};
