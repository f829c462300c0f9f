use thiserror::Error;

use crate::eval::EvalError;
use crate::filter::FilterError;
use crate::llm::GatewayError;
use crate::rerank::RerankError;
use crate::skb::SkbError;
use crate::triplet::{EmptyQueryError, ExtractionFormatError};
use crate::vss::VssError;

/// Crate-level error; the message names the module that failed.
#[derive(Debug, Error)]
pub enum Error {
    #[error("skb_store: {0}")]
    Skb(#[from] SkbError),
    #[error("triplet_model: {0}")]
    Extraction(#[from] ExtractionFormatError),
    #[error("triplet_model: {0}")]
    EmptyQuery(#[from] EmptyQueryError),
    #[error("llm_gateway: {0}")]
    Gateway(#[from] GatewayError),
    #[error("candidate_filter: {0}")]
    Filter(#[from] FilterError),
    #[error("vector_search: {0}")]
    Vss(#[from] VssError),
    #[error("reranker: {0}")]
    Rerank(#[from] RerankError),
    #[error("eval_harness: {0}")]
    Eval(#[from] EvalError),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}
