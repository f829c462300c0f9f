//! Question answering over semi-structured knowledge bases.
//!
//! The pipeline extracts relational triplets from a question with an LLM,
//! propagates them over a typed knowledge graph to prefilter answer
//! candidates, ranks the survivors by embedding similarity of their attached
//! documents, and lets an LLM rerank the top of the list. Every answer carries
//! a JSON trace of the evidence used at each step.

pub mod eval;
pub mod filter;
pub mod fsutil;
pub mod llm;
pub mod pipeline;
pub mod rerank;
pub mod skb;
pub mod triplet;
pub mod vss;

mod error;

pub use error::Error;
pub use skb::{Direction, NodeId, SemiStructuredKb, TypeMode};
