//! Dense-retrieval experimentation engine built around vector pseudo
//! relevance feedback (VPRF).
//!
//! The pipeline is: load query and passage embeddings ([`store`]), build an
//! exact cosine [`index::FlatIndex`], refine each query vector from its top-κ
//! first-stage passages ([`vprf`]), re-retrieve, then score runs with
//! nDCG/Recall ([`eval`]) and aggregate whole hyperparameter sweeps
//! ([`sweep`], [`report`]).

pub mod eval;
pub mod index;
pub mod report;
pub mod store;
pub mod sweep;
pub mod vprf;

mod fsutil;

pub use eval::{MetricReport, Qrels, RankedRun};
pub use fsutil::write_atomic;
pub use index::{FlatIndex, IndexOptions, ScoredHit};
pub use store::{CorpusKind, EmbeddingCorpus, EmbeddingRecord, Format};
pub use sweep::{Config, SweepResult};
pub use vprf::{Feedback, FeedbackSet, GridSpec, GridVariant, Method, VprfParams};
