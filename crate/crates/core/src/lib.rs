//! Sample-aware adaptive structured pruning for small decoder-only transformers.
//!
//! The crate is organised bottom-up:
//!
//! - [`model`]: a pre-norm decoder-only language model in `f64` with exact
//!   reverse-mode gradients (batch and per-sample) and a binary checkpoint format.
//! - [`groups`]: coupled prunable structures (attention heads, MLP channels).
//! - [`importance`]: Taylor-expansion importance at vector and element
//!   granularity with an empirical-Fisher second-order term, mixed and aggregated
//!   per group.
//! - [`pruner`]: ratio-constrained pruning plans and structural removal.
//! - [`data`]: corpus ingestion, word-level vocabulary, calibration pools and
//!   perplexity.
//! - [`tpe`] and [`search`]: tree-structured Parzen estimator search over
//!   calibration subsets and importance metrics.
//! - [`recovery`]: low-rank adapters for post-pruning fine-tuning.

pub mod container;
pub mod data;
pub mod error;
pub mod fingerprint;
pub mod groups;
pub mod importance;
pub mod model;
pub mod optim;
pub mod pruner;
pub mod recovery;
pub mod search;
pub mod tpe;
pub mod train;

pub use data::{CalibrationSet, Corpus, EvalSet, Vocabulary};
pub use error::{Error, Result};
pub use groups::{GroupKind, StructureGroup};
pub use importance::{Aggregation, ImportanceReport, MetricConfig};
pub use model::{GradientStore, ModelConfig, TransformerLM};
pub use pruner::PruningPlan;
pub use search::{SearchHistory, SolutionSpace, Trial};
