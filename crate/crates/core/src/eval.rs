//! QA datasets, retrieval metrics and batch evaluation.
//!
//! Datasets are JSON Lines of `{"id", "query", "answer_ids", "split"}`.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::io::BufRead;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fsutil;
use crate::pipeline::Pipeline;
use crate::skb::{NodeId, SemiStructuredKb};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("dataset line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("duplicate record id `{0}`")]
    DuplicateId(String),
    #[error("record `{0}` has no gold answers")]
    EmptyGold(String),
    #[error("record `{id}`: gold node `{node}` is not in the knowledge base")]
    UnknownGold { id: String, node: NodeId },
    #[error("record `{id}`: gold node `{node}` is not a candidate")]
    NotCandidate { id: String, node: NodeId },
    #[error("subsample fraction must be in (0, 1], got {0}")]
    BadFraction(f64),
    #[error("parallelism must be at least 1")]
    BadParallelism,
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("report: {0}")]
    Report(String),
}

fn default_split() -> String {
    "default".to_owned()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QaRecord {
    pub id: String,
    pub query: String,
    pub answer_ids: BTreeSet<NodeId>,
    #[serde(default = "default_split")]
    pub split: String,
}

/// Parse and validate a dataset against `skb`.
pub fn load_dataset(
    reader: impl BufRead,
    skb: &SemiStructuredKb,
) -> Result<Vec<QaRecord>, EvalError> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| EvalError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: QaRecord = serde_json::from_str(&line).map_err(|e| EvalError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?;
        if !seen.insert(rec.id.clone()) {
            return Err(EvalError::DuplicateId(rec.id));
        }
        if rec.answer_ids.is_empty() {
            return Err(EvalError::EmptyGold(rec.id));
        }
        for node in &rec.answer_ids {
            match skb.node(node) {
                Err(_) => {
                    return Err(EvalError::UnknownGold {
                        id: rec.id.clone(),
                        node: node.clone(),
                    })
                }
                Ok(n) if !n.is_candidate => {
                    return Err(EvalError::NotCandidate {
                        id: rec.id.clone(),
                        node: node.clone(),
                    })
                }
                Ok(_) => {}
            }
        }
        out.push(rec);
    }
    if out.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    Ok(out)
}

pub fn load_dataset_file(
    path: impl AsRef<Path>,
    skb: &SemiStructuredKb,
) -> Result<Vec<QaRecord>, EvalError> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|source| EvalError::Io {
        path: path.to_owned(),
        source,
    })?;
    load_dataset(std::io::BufReader::new(f), skb)
}

/// Keep `ceil(fraction * n)` records of every split, chosen by a seeded hash
/// of the record id so the selection is reproducible.
pub fn subsample(
    dataset: &[QaRecord],
    fraction: f64,
    seed: u64,
) -> Result<Vec<QaRecord>, EvalError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(EvalError::BadFraction(fraction));
    }
    let mut by_split: BTreeMap<&str, Vec<&QaRecord>> = BTreeMap::new();
    for r in dataset {
        by_split.entry(&r.split).or_default().push(r);
    }
    let mut keep = HashSet::new();
    for records in by_split.values_mut() {
        let n = (fraction * records.len() as f64).ceil() as usize;
        records.sort_by_cached_key(|r| {
            let mut h = Sha256::new();
            h.update(seed.to_le_bytes());
            h.update(r.id.as_bytes());
            h.finalize()
        });
        keep.extend(records.iter().take(n).map(|r| r.id.as_str()));
    }
    Ok(dataset
        .iter()
        .filter(|r| keep.contains(r.id.as_str()))
        .cloned()
        .collect())
}

/// 1.0 if any of the top `k` is gold. Panics if `k == 0`.
pub fn hit_at_k(ranked: &[NodeId], gold: &BTreeSet<NodeId>, k: usize) -> f64 {
    assert!(k >= 1, "k must be at least 1");
    if ranked.iter().take(k).any(|n| gold.contains(n)) {
        1.0
    } else {
        0.0
    }
}

/// Gold items in the top `k`, divided by `min(|gold|, k)`. Panics if `k == 0`.
pub fn recall_at_k(ranked: &[NodeId], gold: &BTreeSet<NodeId>, k: usize) -> f64 {
    assert!(k >= 1, "k must be at least 1");
    if gold.is_empty() {
        return 0.0;
    }
    let found: BTreeSet<&NodeId> = ranked
        .iter()
        .take(k)
        .filter(|n| gold.contains(*n))
        .collect();
    found.len() as f64 / gold.len().min(k) as f64
}

/// Reciprocal rank of the first gold item; 0 when none appears.
pub fn mrr(ranked: &[NodeId], gold: &BTreeSet<NodeId>) -> f64 {
    ranked
        .iter()
        .position(|n| gold.contains(n))
        .map_or(0.0, |i| 1.0 / (i + 1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryRow {
    pub id: String,
    pub split: String,
    pub hit_at_1: f64,
    pub hit_at_5: f64,
    pub recall_at_20: f64,
    pub mrr: f64,
    pub ranked: Vec<NodeId>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fallback: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl QueryRow {
    pub fn scored(record: &QaRecord, ranked: Vec<NodeId>, fallback: Option<String>) -> Self {
        let gold = &record.answer_ids;
        QueryRow {
            id: record.id.clone(),
            split: record.split.clone(),
            hit_at_1: hit_at_k(&ranked, gold, 1),
            hit_at_5: hit_at_k(&ranked, gold, 5),
            recall_at_20: recall_at_k(&ranked, gold, 20),
            mrr: mrr(&ranked, gold),
            ranked,
            fallback,
            error: None,
        }
    }

    pub fn failed(record: &QaRecord, error: String) -> Self {
        QueryRow {
            id: record.id.clone(),
            split: record.split.clone(),
            hit_at_1: 0.0,
            hit_at_5: 0.0,
            recall_at_20: 0.0,
            mrr: 0.0,
            ranked: Vec::new(),
            fallback: None,
            error: Some(error),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub queries: usize,
    pub hit_at_1: f64,
    pub hit_at_5: f64,
    pub recall_at_20: f64,
    pub mrr: f64,
}

impl MetricSummary {
    fn mean<'a>(rows: impl Iterator<Item = &'a QueryRow>) -> Self {
        let mut s = MetricSummary::default();
        for r in rows {
            s.queries += 1;
            s.hit_at_1 += r.hit_at_1;
            s.hit_at_5 += r.hit_at_5;
            s.recall_at_20 += r.recall_at_20;
            s.mrr += r.mrr;
        }
        if s.queries > 0 {
            let n = s.queries as f64;
            s.hit_at_1 /= n;
            s.hit_at_5 /= n;
            s.recall_at_20 /= n;
            s.mrr /= n;
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub overall: MetricSummary,
    pub splits: BTreeMap<String, MetricSummary>,
    pub failures: usize,
    pub rows: Vec<QueryRow>,
}

impl MetricReport {
    /// Aggregate rows (sorted by id first).
    pub fn from_rows(mut rows: Vec<QueryRow>) -> Self {
        rows.sort_by(|a, b| a.id.cmp(&b.id));
        let splits: BTreeSet<&str> = rows.iter().map(|r| r.split.as_str()).collect();
        let splits = splits
            .into_iter()
            .map(|s| {
                (
                    s.to_owned(),
                    MetricSummary::mean(rows.iter().filter(|r| r.split == s)),
                )
            })
            .collect();
        MetricReport {
            overall: MetricSummary::mean(rows.iter()),
            splits,
            failures: rows.iter().filter(|r| r.error.is_some()).count(),
            rows,
        }
    }

    /// One line per split plus `overall`.
    pub fn to_csv(&self) -> Result<String, EvalError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let err = |e: csv::Error| EvalError::Report(e.to_string());
        w.write_record(["split", "queries", "hit@1", "hit@5", "recall@20", "mrr"])
            .map_err(err)?;
        let lines = self
            .splits
            .iter()
            .map(|(k, v)| (k.as_str(), v))
            .chain([("overall", &self.overall)]);
        for (name, s) in lines {
            w.write_record([
                name.to_owned(),
                s.queries.to_string(),
                format!("{:.4}", s.hit_at_1),
                format!("{:.4}", s.hit_at_5),
                format!("{:.4}", s.recall_at_20),
                format!("{:.4}", s.mrr),
            ])
            .map_err(err)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| EvalError::Report(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| EvalError::Report(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        write(path.as_ref(), self.to_csv()?.as_bytes())
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        write(path.as_ref(), self.to_json().as_bytes())
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), EvalError> {
    fsutil::write_atomic(path, bytes).map_err(|source| EvalError::Io {
        path: path.to_owned(),
        source,
    })
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub parallel: usize,
    /// Write `<id>.json` traces here when set.
    pub traces_dir: Option<PathBuf>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            parallel: 1,
            traces_dir: None,
        }
    }
}

/// File name for a record's trace; characters outside `[A-Za-z0-9._-]` become `_`.
pub fn trace_file_name(id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "._-".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{safe}.json")
}

/// Answer every record and aggregate. A failing query scores zero and is noted.
pub fn evaluate(
    pipeline: &Pipeline,
    dataset: &[QaRecord],
    opts: &EvalOptions,
) -> Result<MetricReport, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    if opts.parallel == 0 {
        return Err(EvalError::BadParallelism);
    }
    if let Some(dir) = &opts.traces_dir {
        std::fs::create_dir_all(dir).map_err(|source| EvalError::Io {
            path: dir.clone(),
            source,
        })?;
    }
    let run = |record: &QaRecord| -> Result<QueryRow, EvalError> {
        match pipeline.answer(&record.query) {
            Ok((answers, trace)) => {
                if let Some(dir) = &opts.traces_dir {
                    write(
                        &dir.join(trace_file_name(&record.id)),
                        trace.to_json().as_bytes(),
                    )?;
                }
                let fallback = trace.fallback.map(|f| f.as_str().to_owned());
                Ok(QueryRow::scored(record, answers.ids(), fallback))
            }
            Err(e) => {
                log::warn!("query {} failed: {e}", record.id);
                Ok(QueryRow::failed(record, e.to_string()))
            }
        }
    };
    let rows = if opts.parallel == 1 {
        dataset.iter().map(run).collect::<Result<Vec<_>, _>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.parallel)
            .build()
            .map_err(|e| EvalError::Report(e.to_string()))?;
        pool.install(|| dataset.par_iter().map(run).collect::<Result<Vec<_>, _>>())?
    };
    Ok(MetricReport::from_rows(rows))
}
