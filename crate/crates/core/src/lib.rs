//! Question-conditioned retrieval over knowledge graphs.
//!
//! The engine loads a triple store, augments it with inverse facts, and runs
//! attention-weighted message passing outward from a question's topic
//! entities. Frontier growth is kept tractable by expanding hop by hop and
//! pruning high-degree `(entity, relation)` groups toward already-reached
//! entities only. On top of the propagation sit three retrieval interfaces
//! (ranked candidate entities, attention-ranked facts, shortest-path
//! connections), a trainer with exact manual backpropagation and Adam, and a
//! reasoning loop in which an LLM answers, reflects, rewrites, and focuses
//! until it confirms an answer.
//!
//! Modules:
//! - [`kg`]: triple store, inverse augmentation, grouped adjacency, questions
//! - [`embed`]: embedding providers and relation-description generation
//! - [`model`]: learnable parameters and the checkpoint format
//! - [`propagation`]: frontier expansion and message passing
//! - [`train`]: loss, gradients, Adam, the training loop
//! - [`retrieve`]: node/edge/path retrieval over a finished propagation
//! - [`llm`]: scripted and remote chat clients
//! - [`pipeline`]: verbalization and the iterative reasoning loop
//! - [`eval`]: metrics, evaluation driver, propagation-range benchmark

pub mod embed;
pub mod eval;
pub mod kg;
pub mod linalg;
pub mod llm;
pub mod model;
pub mod pipeline;
pub mod propagation;
pub mod retrieve;
pub mod train;

pub use embed::{EmbeddingProvider, HashEmbedder, PrecomputedProvider, RelationDescriptionTable};
pub use kg::{EntityId, KnowledgeGraph, QuestionInstance, RelationId, Triple};
pub use model::{Dims, ModelParams};
pub use pipeline::{run_pipeline, PipelineConfig, Retriever, Session, TemplateTable};
pub use propagation::{propagate, score_entities, RetrievalSubgraph, LAMBDA_UNLIMITED};
pub use retrieve::{build_bundle, RetrievalBundle, RetrievalLimits};
pub use train::{train, TrainConfig};
