//! Aspect-aware collaborative filtering.
//!
//! The crate turns a review corpus into one interaction graph per semantic
//! aspect (using a two-prompt LLM chain), then learns user/item embeddings by
//! light graph convolution on every aspect graph, concatenating the per-aspect
//! representations for scoring.
//!
//! Pipeline, in module order:
//!
//! 1. [`corpus`]: load reviews, assign dense ids, split per user.
//! 2. [`aspects`]: aspect discovery, consolidation, per-review annotation.
//! 3. [`graphs`]: normalized bipartite graphs and the propagation operator.
//! 4. [`model`]: embeddings, forward pass, scoring, interpretability.
//! 5. [`trainer`]: BPR objective, manual backward pass, Adam, early stopping.
//! 6. [`eval`]: Recall@K / NDCG@K, per-aspect contribution, aspect sweeps.
//!
//! [`synthetic`] generates planted-aspect corpora for end-to-end checks.

pub mod aspects;
pub mod corpus;
pub mod eval;
pub mod graphs;
pub mod model;
pub mod synthetic;
pub mod trainer;

pub mod util;

pub use aspects::{AspectAnnotation, AspectVocabulary, LlmBackend, ParseStatus};
pub use corpus::{IdMaps, InteractionRecord, SplitSpec};
pub use eval::{MetricReport, RankingResult};
pub use graphs::{AspectInteractionStore, NormalizedAspectGraph};
pub use model::{EmbeddingTable, ForwardCache, ModelConfig};
pub use trainer::{TrainConfig, Triplet};

/// A `(user_index, item_index)` interaction.
pub type Pair = (usize, usize);
