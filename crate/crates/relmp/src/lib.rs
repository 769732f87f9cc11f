//! Relational message passing for knowledge-graph relation prediction.
//!
//! Given a head/tail entity pair, the model scores every relation type by
//! combining two views of the pair's neighborhood, built purely from relation
//! types (no entity embeddings, so unseen entities are handled natively):
//!
//! - **relational context**: alternate edge-to-node / node-to-edge message
//!   passing aggregates the relation types within K hops of both endpoints
//!   ([`context`]);
//! - **relational paths**: loop-free relation sequences connecting the pair,
//!   pooled with attention against the context representation ([`paths`],
//!   [`model`]).
//!
//! Training is a self-contained gradient engine: hand-structured reverse-mode
//! passes over the fixed pipeline with Adam updates ([`params`], [`train`]).
//! [`analysis`] adds explainability export and exact validators for the
//! per-iteration cost counts of the three message-passing schemes.

pub mod analysis;
pub mod checkpoint;
pub mod context;
pub mod error;
pub mod eval;
pub mod graph;
pub mod model;
pub mod params;
pub mod paths;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{
    load_dataset, make_inductive_split, Dataset, DegreeStats, Dictionary, EdgeId, EntityId,
    InductiveSplit, KnowledgeGraph, RelationId, Triple,
};
pub use model::{Model, ModelConfig, PathData};
pub use params::{AdamConfig, AggregatorKind, LossReport, ParameterStore, PathAggKind, PathReprKind};
pub use paths::{build_vocabulary, enumerate_paths, PathVocabulary, RelationalPath};
pub use train::{train, TrainConfig, TrainInputs, TrainOutput};
