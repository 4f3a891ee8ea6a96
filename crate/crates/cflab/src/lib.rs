//! Laboratory for counterfactual multi-hop reasoning experiments on synthetic
//! knowledge graphs, with small from-scratch transformers and a prompt-based
//! harness for probing production chat models.

pub mod checkpoint;
pub mod corpus;
pub mod eval;
pub mod kg;
pub mod model;
pub mod trainer;

pub use corpus::{CfKind, CfMode, CounterfactualExample, TokenSequence, Vocabulary};
pub use kg::{AtomicFact, Entity, InferredFact, KnowledgeGraph, Relation};
pub use model::{ModelConfig, ModelState, OptimSettings};
