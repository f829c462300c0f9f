//! End-to-end answering: extraction, prefiltering, similarity ranking and
//! reranking, with a fallback to similarity + reranking over the whole
//! candidate pool whenever prefiltering cannot produce candidates.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::filter::{self, FilterError, FilterTrace, GroundedTerm, GroundedTriplet};
use crate::llm::{ChatRequest, Gateway, GatewayError};
use crate::rerank::{
    self, RankedAnswers, RerankConfig, RerankEntry, RerankError, RERANK_PROMPT_VERSION,
};
use crate::skb::{NodeId, SemiStructuredKb, TypeMode};
use crate::triplet::{self, ExtractionFormatError, ParseNote, TripletSet, GRAMMAR_VERSION};
use crate::vss::{self, Embedder, EmbeddingIndex, VssRanking, HASHED_TAG};
use crate::Error;

pub const TRACE_VERSION: &str = "trace v1";
pub const EXTRACTION_TAG: &str = "extraction";
pub const DEFAULT_K_MAX: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub k_max: usize,
    pub edge_type_mode_out: TypeMode,
    pub edge_type_mode_in: TypeMode,
    pub ground_top_m: usize,
    /// When false every query takes the similarity + rerank path.
    pub prefilter: bool,
    /// Corrective re-asks after an unparseable extraction reply.
    pub extraction_retries: u32,
    pub strict_blocks: bool,
    /// Characters of background text per rerank prompt.
    pub background_budget: usize,
    pub embedder: String,
    /// Model name for the live provider; `None` defers to the environment.
    pub llm_model: Option<String>,
    /// Record wall-clock timings in traces. Disable for byte-stable traces.
    pub timings: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            k_max: DEFAULT_K_MAX,
            edge_type_mode_out: TypeMode::Relaxed,
            edge_type_mode_in: TypeMode::Strict,
            ground_top_m: 1,
            prefilter: true,
            extraction_retries: 1,
            strict_blocks: true,
            background_budget: rerank::DEFAULT_BACKGROUND_BUDGET,
            embedder: HASHED_TAG.to_owned(),
            llm_model: None,
            timings: true,
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, Error> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, Error> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.k_max == 0 {
            return Err(Error::Config("k_max must be at least 1".into()));
        }
        if self.ground_top_m == 0 {
            return Err(Error::Config("ground_top_m must be at least 1".into()));
        }
        if self.background_budget == 0 {
            return Err(Error::Config("background_budget must be at least 1".into()));
        }
        Ok(())
    }

    fn rerank_config(&self) -> RerankConfig {
        RerankConfig {
            strict_blocks: self.strict_blocks,
            background_budget: self.background_budget,
        }
    }
}

/// Why a query skipped the prefilter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    PrefilterDisabled,
    /// The extraction reply stayed unparseable after the corrective retry.
    ExtractionFailed,
    /// The extraction request itself failed.
    ExtractionUnavailable,
    EmptyPreparation,
    UnconstrainedTarget,
    /// Propagation left the target with no candidates.
    EmptyFilter,
    FilterFailed,
}

impl Fallback {
    pub fn as_str(self) -> &'static str {
        match self {
            Fallback::PrefilterDisabled => "prefilter_disabled",
            Fallback::ExtractionFailed => "extraction_failed",
            Fallback::ExtractionUnavailable => "extraction_unavailable",
            Fallback::EmptyPreparation => "empty_preparation",
            Fallback::UnconstrainedTarget => "unconstrained_target",
            Fallback::EmptyFilter => "empty_filter",
            Fallback::FilterFailed => "filter_failed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionAttempt {
    pub response: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Milliseconds spent per step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepTimings {
    pub extraction_ms: f64,
    pub prefilter_ms: f64,
    pub vss_ms: f64,
    pub rerank_ms: f64,
}

/// Evidence for one answered query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerTrace {
    pub version: String,
    pub grammar: String,
    pub rerank_prompt: String,
    pub query: String,
    pub config: PipelineConfig,
    pub extraction: Vec<ExtractionAttempt>,
    pub triplets: Option<TripletSet>,
    pub parse_notes: Vec<ParseNote>,
    pub grounded: Vec<GroundedTriplet>,
    pub filter: Option<FilterTrace>,
    /// Prefilter survivors, sorted by id; `None` on the fallback path.
    pub filtered: Option<Vec<NodeId>>,
    pub fallback: Option<Fallback>,
    pub fallback_detail: Option<String>,
    pub vss: VssRanking,
    pub rerank: Vec<RerankEntry>,
    pub rerank_unavailable: Option<String>,
    pub timings: Option<StepTimings>,
}

impl AnswerTrace {
    fn new(query: &str, config: &PipelineConfig) -> Self {
        AnswerTrace {
            version: TRACE_VERSION.into(),
            grammar: GRAMMAR_VERSION.into(),
            rerank_prompt: RERANK_PROMPT_VERSION.into(),
            query: query.to_owned(),
            config: config.clone(),
            extraction: Vec::new(),
            triplets: None,
            parse_notes: Vec::new(),
            grounded: Vec::new(),
            filter: None,
            filtered: None,
            fallback: None,
            fallback_detail: None,
            vss: VssRanking::default(),
            rerank: Vec::new(),
            rerank_unavailable: None,
            timings: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("trace serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, Error> {
        let trace: AnswerTrace =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("trace: {e}")))?;
        if trace.version != TRACE_VERSION {
            return Err(Error::Config(format!(
                "unsupported trace version `{}`",
                trace.version
            )));
        }
        Ok(trace)
    }

    fn fall_back(&mut self, reason: Fallback, detail: impl Into<String>) {
        self.fallback = Some(reason);
        self.fallback_detail = Some(detail.into());
    }
}

enum Prefilter {
    Candidates(BTreeSet<NodeId>),
    Fallback(Fallback, String),
}

/// Shared, read-only resources for answering queries.
pub struct Pipeline<'a> {
    pub skb: &'a SemiStructuredKb,
    pub index: &'a EmbeddingIndex,
    pub embedder: &'a dyn Embedder,
    pub gateway: &'a Gateway,
    pub config: &'a PipelineConfig,
}

impl Pipeline<'_> {
    pub fn answer(&self, query: &str) -> Result<(RankedAnswers, AnswerTrace), Error> {
        self.config.validate()?;
        let mut trace = AnswerTrace::new(query, self.config);
        let mut timings = StepTimings::default();
        let pool = self.skb.candidate_pool();

        let started = Instant::now();
        let filtered = if self.config.prefilter {
            match self.prefilter(query, &mut trace, &mut timings)? {
                Prefilter::Candidates(c) => {
                    trace.filtered = Some(c.iter().cloned().collect());
                    c
                }
                Prefilter::Fallback(reason, detail) => {
                    log::info!("query falls back ({}): {detail}", reason.as_str());
                    trace.fall_back(reason, detail);
                    BTreeSet::new()
                }
            }
        } else {
            trace.fall_back(
                Fallback::PrefilterDisabled,
                "prefiltering disabled by configuration",
            );
            BTreeSet::new()
        };
        timings.prefilter_ms = ms(started) - timings.extraction_ms;

        let started = Instant::now();
        let ranking = vss::vss_rank(
            self.index,
            self.embedder,
            query,
            &filtered,
            &pool,
            self.config.k_max,
        )?;
        timings.vss_ms = ms(started);

        let started = Instant::now();
        let answers = self.rerank_or_vss(query, &ranking, &mut trace)?;
        timings.rerank_ms = ms(started);

        trace.vss = ranking;
        trace.rerank = answers.entries.clone();
        if self.config.timings {
            trace.timings = Some(timings);
        }
        Ok((answers, trace))
    }

    /// Similarity ranking over the whole pool followed by reranking.
    pub fn vss_then_rerank(&self, query: &str) -> Result<RankedAnswers, Error> {
        let pool = self.skb.candidate_pool();
        let ranking = vss::vss_rank(
            self.index,
            self.embedder,
            query,
            &BTreeSet::new(),
            &pool,
            self.config.k_max,
        )?;
        let mut scratch = AnswerTrace::new(query, self.config);
        self.rerank_or_vss(query, &ranking, &mut scratch)
    }

    fn rerank_or_vss(
        &self,
        query: &str,
        ranking: &VssRanking,
        trace: &mut AnswerTrace,
    ) -> Result<RankedAnswers, Error> {
        let cfg = self.config.rerank_config();
        match rerank::rerank(
            self.gateway,
            self.skb,
            query,
            ranking,
            self.config.k_max,
            &cfg,
        ) {
            Ok(a) => Ok(a),
            Err(RerankError::Unavailable(e)) => {
                log::warn!("reranker unavailable, keeping similarity order: {e}");
                trace.rerank_unavailable = Some(e.to_string());
                Ok(RankedAnswers::vss_order(query, ranking))
            }
            Err(e) => Err(e.into()),
        }
    }

    fn prefilter(
        &self,
        query: &str,
        trace: &mut AnswerTrace,
        timings: &mut StepTimings,
    ) -> Result<Prefilter, Error> {
        let started = Instant::now();
        let extracted = self.extract(query, trace);
        timings.extraction_ms = ms(started);
        let ts = match extracted? {
            Ok(ts) => ts,
            Err(fallback) => return Ok(fallback),
        };
        let (grounded, grounding) =
            filter::ground_triplets(self.skb, &ts, self.config.ground_top_m);
        trace.triplets = Some(ts.clone());
        trace.grounded = grounded.clone();
        if grounded.is_empty() {
            let detail = FilterError::EmptyPreparation {
                dropped: grounding.dropped.len(),
            }
            .to_string();
            trace.filter = Some(grounding);
            return Ok(Prefilter::Fallback(Fallback::EmptyPreparation, detail));
        }
        let result = filter::substitute(
            self.skb,
            &grounded,
            ts.target(),
            self.config.edge_type_mode_out,
            self.config.edge_type_mode_in,
        );
        match result {
            Ok((candidates, propagation)) => {
                trace.filter = Some(grounding.merge(propagation));
                if candidates.is_empty() {
                    let detail = format!(
                        "no candidate for ?{} satisfies the triplets",
                        ts.target().name
                    );
                    return Ok(Prefilter::Fallback(Fallback::EmptyFilter, detail));
                }
                Ok(Prefilter::Candidates(candidates))
            }
            Err(e) => {
                trace.filter = Some(grounding);
                let reason = match e {
                    FilterError::UnconstrainedTarget(_) => Fallback::UnconstrainedTarget,
                    _ => Fallback::FilterFailed,
                };
                Ok(Prefilter::Fallback(reason, e.to_string()))
            }
        }
    }

    /// Outer error: must propagate. Inner error: fall back.
    fn extract(
        &self,
        query: &str,
        trace: &mut AnswerTrace,
    ) -> Result<Result<TripletSet, Prefilter>, Error> {
        let schema = self.skb.schema();
        let base = triplet::build_extraction_prompt(query, schema)?;
        let mut prompt = base.clone();
        let mut last: Option<ExtractionFormatError> = None;
        for _ in 0..=self.config.extraction_retries {
            let req = ChatRequest::new(EXTRACTION_TAG, triplet::EXTRACTION_SYSTEM, prompt.clone());
            let reply = match self.gateway.complete(&req) {
                Ok(r) => r,
                Err(e @ GatewayError::ReplayMiss { .. }) => return Err(e.into()),
                Err(e) => {
                    return Ok(Err(Prefilter::Fallback(
                        Fallback::ExtractionUnavailable,
                        e.to_string(),
                    )));
                }
            };
            match triplet::parse_triplet_response_with_notes(&reply, schema) {
                Ok((ts, notes)) => {
                    trace.extraction.push(ExtractionAttempt {
                        response: reply,
                        error: None,
                    });
                    trace.parse_notes = notes;
                    return Ok(Ok(ts));
                }
                Err(e) => {
                    trace.extraction.push(ExtractionAttempt {
                        response: reply,
                        error: Some(e.to_string()),
                    });
                    prompt = format!("{base}{}", triplet::corrective_suffix(&e));
                    last = Some(e);
                }
            }
        }
        let detail = last.map(|e| e.to_string()).unwrap_or_default();
        Ok(Err(Prefilter::Fallback(Fallback::ExtractionFailed, detail)))
    }
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1000.0
}

/// Plain-language rendering of a trace. Node names are looked up in `skb`
/// when given, otherwise ids are shown.
pub fn render_summary(trace: &AnswerTrace, skb: Option<&SemiStructuredKb>) -> String {
    let name = |id: &NodeId| -> String {
        match skb.and_then(|s| s.node(id).ok()) {
            Some(n) => format!("{} ({id})", n.name()),
            None => id.to_string(),
        }
    };
    let mut out = String::new();
    let _ = writeln!(out, "Question: {}", trace.query);

    if let Some(ts) = &trace.triplets {
        let _ = writeln!(
            out,
            "Extracted constraints (answer is ?{}):",
            ts.target().name
        );
        for t in ts.triplets() {
            let _ = writeln!(out, "  {t}");
        }
    }
    for note in &trace.parse_notes {
        match note {
            ParseNote::EdgeRepaired { from, to, .. } => {
                let _ = writeln!(out, "  note: edge label `{from}` read as `{to}`");
            }
            ParseNote::EdgeRejected { label, .. } => {
                let _ = writeln!(out, "  note: unknown edge label `{label}` ignored");
            }
        }
    }
    if let Some(ft) = &trace.filter {
        for g in &ft.grounding {
            if g.chosen.is_empty() {
                let _ = writeln!(out, "  \"{}\" matches no entity", g.surface);
            } else {
                let chosen: Vec<String> = g.chosen.iter().map(&name).collect();
                let _ = writeln!(out, "  \"{}\" refers to {}", g.surface, chosen.join(", "));
            }
        }
        let evidence: BTreeSet<String> = ft
            .support
            .iter()
            .flatten()
            .map(|e| format!("  {} --{}--> {}", name(&e.head), e.edge_type, name(&e.tail)))
            .collect();
        if !evidence.is_empty() {
            let _ = writeln!(out, "Matching graph edges:");
            for line in evidence {
                let _ = writeln!(out, "{line}");
            }
        }
        let _ = writeln!(
            out,
            "Propagation: {} sweep(s), {} domain update(s)",
            ft.sweeps,
            ft.steps.len()
        );
    }
    if let Some(f) = &trace.filtered {
        let names: Vec<String> = f.iter().map(&name).collect();
        let _ = writeln!(
            out,
            "Prefilter kept {} candidate(s): {}",
            f.len(),
            names.join(", ")
        );
    }
    if let Some(reason) = trace.fallback {
        let _ = writeln!(
            out,
            "Prefilter skipped ({}): {}; ranked the whole candidate pool instead",
            reason.as_str(),
            trace.fallback_detail.as_deref().unwrap_or("")
        );
    }
    if let Some(e) = &trace.rerank_unavailable {
        let _ = writeln!(out, "Reranker unavailable ({e}); similarity order kept");
    }
    let _ = writeln!(out, "Answers:");
    for (i, e) in trace.rerank.iter().enumerate() {
        let llm = e
            .llm_score
            .map_or("unscored".to_owned(), |s| format!("{s:.2}"));
        let block = match e.block {
            rerank::Block::Filtered => "filtered",
            rerank::Block::Additional => "additional",
        };
        let _ = writeln!(
            out,
            "  {:>2}. {}  [{block}] llm={llm} vss={:.3}",
            i + 1,
            name(&e.node),
            e.vss_score
        );
    }
    if let Some(t) = &trace.timings {
        let _ = writeln!(
            out,
            "Timings (ms): extraction {:.1}, prefilter {:.1}, vss {:.1}, rerank {:.1}",
            t.extraction_ms, t.prefilter_ms, t.vss_ms, t.rerank_ms
        );
    }
    out
}

/// Nodes mentioned anywhere in a trace, for reference checks.
pub fn trace_node_ids(trace: &AnswerTrace) -> BTreeSet<NodeId> {
    let mut ids = BTreeSet::new();
    if let Some(ft) = &trace.filter {
        for g in &ft.grounding {
            ids.extend(g.matches.iter().map(|m| m.node.clone()));
            ids.extend(g.chosen.iter().cloned());
        }
        for e in ft.support.iter().flatten() {
            ids.insert(e.head.clone());
            ids.insert(e.tail.clone());
        }
    }
    for g in &trace.grounded {
        for term in [&g.head, &g.tail] {
            if let GroundedTerm::Nodes(n) = term {
                ids.extend(n.iter().cloned());
            }
        }
    }
    ids.extend(trace.filtered.iter().flatten().cloned());
    ids.extend(
        trace
            .vss
            .filtered
            .iter()
            .chain(&trace.vss.additional)
            .map(|s| s.node.clone()),
    );
    ids.extend(trace.rerank.iter().map(|e| e.node.clone()));
    ids
}

/// VSS score and block per answered node, as recorded in the trace.
pub fn trace_scores(trace: &AnswerTrace) -> BTreeMap<NodeId, (f64, rerank::Block)> {
    trace
        .rerank
        .iter()
        .map(|e| (e.node.clone(), (e.vss_score, e.block)))
        .collect()
}
