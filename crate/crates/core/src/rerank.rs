//! LLM reranking of the similarity-ranked candidates.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::{ChatRequest, Gateway, GatewayError};
use crate::skb::{NodeId, SemiStructuredKb, SkbError};
use crate::vss::{ScoredNode, VssRanking};

pub const RERANK_PROMPT_VERSION: &str = "rerank-prompt v1";
pub const RERANK_TAG: &str = "rerank";
pub const TRUNCATION_MARKER: &str = "…[truncated]";
/// Background budget in characters (roughly 1k tokens).
pub const DEFAULT_BACKGROUND_BUDGET: usize = 4000;

pub const RERANK_SYSTEM: &str = "You judge how well a candidate entity from a knowledge base answers a question. \
Reply with a single decimal number between 0 and 1 (1 = certainly an answer, 0 = certainly not) and nothing else.";

#[derive(Debug, Error)]
pub enum RerankError {
    #[error("{given} candidates exceed k_max = {k_max}")]
    TooManyCandidates { given: usize, k_max: usize },
    #[error("every scoring request failed; last error: {0}")]
    Unavailable(GatewayError),
    #[error(transparent)]
    Replay(GatewayError),
    #[error(transparent)]
    Skb(#[from] SkbError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    Filtered,
    Additional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RerankEntry {
    pub node: NodeId,
    pub block: Block,
    pub vss_score: f64,
    /// `None` when the reply was unusable; ordered as 0.0.
    pub llm_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
}

impl RerankEntry {
    fn unscored(s: &ScoredNode, block: Block) -> Self {
        RerankEntry {
            node: s.node.clone(),
            block,
            vss_score: s.score,
            llm_score: None,
            rationale: None,
        }
    }

    fn order_score(&self) -> f64 {
        self.llm_score.unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedAnswers {
    pub query: String,
    pub entries: Vec<RerankEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace_ref: Option<String>,
}

impl RankedAnswers {
    pub fn ids(&self) -> Vec<NodeId> {
        self.entries.iter().map(|e| e.node.clone()).collect()
    }

    /// Similarity order without LLM scores.
    pub fn vss_order(query: &str, ranking: &VssRanking) -> Self {
        let entries = ranking
            .filtered
            .iter()
            .map(|s| RerankEntry::unscored(s, Block::Filtered))
            .chain(
                ranking
                    .additional
                    .iter()
                    .map(|s| RerankEntry::unscored(s, Block::Additional)),
            )
            .collect();
        RankedAnswers {
            query: query.to_owned(),
            entries,
            trace_ref: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RerankConfig {
    pub strict_blocks: bool,
    pub background_budget: usize,
}

impl Default for RerankConfig {
    fn default() -> Self {
        RerankConfig {
            strict_blocks: true,
            background_budget: DEFAULT_BACKGROUND_BUDGET,
        }
    }
}

pub fn build_rerank_prompt(
    query: &str,
    name: &str,
    background: &str,
    budget_chars: usize,
) -> String {
    let background = match background.char_indices().nth(budget_chars) {
        Some((cut, _)) => format!("{}{TRUNCATION_MARKER}", &background[..cut]),
        None => background.to_owned(),
    };
    format!(
        "Question: {query}\nCandidate: {name}\nBackground:\n{background}\n\n\
         How well does the candidate answer the question? Answer with a single decimal number in [0,1]."
    )
}

/// Accepts a bare decimal in [0, 1], surrounding whitespace allowed.
pub fn parse_score(reply: &str) -> Option<f64> {
    let s = reply.trim();
    let (int, frac) = s.split_once('.').unwrap_or((s, ""));
    let digits = |p: &str| p.bytes().all(|b| b.is_ascii_digit());
    if (int.is_empty() && frac.is_empty()) || !digits(int) || !digits(frac) {
        return None;
    }
    let v: f64 = s.parse().ok()?;
    (0.0..=1.0).contains(&v).then_some(v)
}

/// Sort by block (when `strict_blocks`), then LLM score, VSS score and node id.
pub fn order_entries(entries: &mut [RerankEntry], strict_blocks: bool) {
    entries.sort_by(|a, b| {
        let block = if strict_blocks {
            (a.block == Block::Additional).cmp(&(b.block == Block::Additional))
        } else {
            Ordering::Equal
        };
        block
            .then_with(|| b.order_score().total_cmp(&a.order_score()))
            .then_with(|| b.vss_score.total_cmp(&a.vss_score))
            .then_with(|| a.node.cmp(&b.node))
    });
}

pub fn rerank(
    gateway: &Gateway,
    skb: &SemiStructuredKb,
    query: &str,
    ranking: &VssRanking,
    k_max: usize,
    config: &RerankConfig,
) -> Result<RankedAnswers, RerankError> {
    let given = ranking.filtered.len() + ranking.additional.len();
    if given > k_max {
        return Err(RerankError::TooManyCandidates { given, k_max });
    }
    let mut answers = RankedAnswers::vss_order(query, ranking);
    let mut last_failure = None;
    let mut failures = 0;
    for entry in &mut answers.entries {
        let name = skb.node(&entry.node)?.name().to_owned();
        let background = skb.document_of(&entry.node)?;
        let prompt = build_rerank_prompt(query, &name, &background, config.background_budget);
        match gateway.complete(&ChatRequest::new(RERANK_TAG, RERANK_SYSTEM, prompt)) {
            Ok(reply) => {
                entry.llm_score = parse_score(&reply);
                if entry.llm_score.is_none() {
                    entry.rationale = Some(format!("unparseable reply: {}", reply.trim()));
                }
            }
            Err(e @ GatewayError::ReplayMiss { .. }) => return Err(RerankError::Replay(e)),
            Err(e) => {
                log::warn!("rerank of {} failed: {e}", entry.node);
                entry.rationale = Some(format!("gateway error: {e}"));
                failures += 1;
                last_failure = Some(e);
            }
        }
    }
    if let Some(e) = last_failure {
        if failures == answers.entries.len() {
            return Err(RerankError::Unavailable(e));
        }
    }
    order_entries(&mut answers.entries, config.strict_blocks);
    Ok(answers)
}
