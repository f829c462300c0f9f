//! Vector similarity search over node documents.
//!
//! Candidates are ranked by cosine similarity between the query embedding and
//! the embedding of each node's document (see [`SemiStructuredKb::document_of`]).
//! Embeddings are cached in an [`EmbeddingIndex`] keyed by node, embedder tag
//! and a hash of the embedded text, persisted as JSON Lines:
//!
//! ```text
//! {"format":"skbf-embeddings","version":1,"embedder_tag":"hashed-bow-256","dim":256}
//! {"node_id":"n1","embedder_tag":"hashed-bow-256","content_hash":"…","vector":[…]}
//! ```

use std::collections::{BTreeSet, HashMap};
use std::io::BufRead;
use std::path::Path;
use std::thread;
use std::time::Duration;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fsutil;
use crate::llm::ProviderError;
use crate::skb::{NodeId, SemiStructuredKb, SkbError};

pub const HASHED_DIM: usize = 256;
pub const HASHED_TAG: &str = "hashed-bow-256";
const CACHE_FORMAT: &str = "skbf-embeddings";
const CACHE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum VssError {
    #[error("cannot embed empty text")]
    EmptyText,
    #[error("embedding has non-finite entries")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("cosine similarity undefined for a zero vector")]
    SimilarityUndefined,
    #[error("no embedding indexed for node `{0}`")]
    IndexMiss(NodeId),
    #[error("index built with embedder `{index}` but queried with `{embedder}`")]
    EmbedderMismatch { index: String, embedder: String },
    #[error("unknown embedder `{0}` (expected `hashed-bow-256` or `http:<model>`)")]
    UnknownEmbedder(String),
    #[error("k_max must be at least 1")]
    InvalidKMax,
    #[error("embedding provider failed after {attempts} attempts: {message}")]
    Embed { attempts: u32, message: String },
    #[error("embedding cache: {0}")]
    Cache(String),
    #[error(transparent)]
    Skb(#[from] SkbError),
}

/// Dense embedding with finite entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    pub fn new(values: Vec<f64>) -> Result<Self, VssError> {
        if values.iter().any(|x| !x.is_finite()) {
            return Err(VssError::NonFinite);
        }
        Ok(EmbeddingVector(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

pub trait Embedder: Send + Sync {
    /// Identifies the model; cache entries from other embedders are ignored.
    fn tag(&self) -> &str;
    fn embed(&self, text: &str) -> Result<EmbeddingVector, VssError>;
}

pub fn embed(embedder: &dyn Embedder, text: &str) -> Result<EmbeddingVector, VssError> {
    if text.trim().is_empty() {
        return Err(VssError::EmptyText);
    }
    embedder.embed(text)
}

/// Deterministic offline embedder: lowercase tokens split on non-alphanumerics,
/// FNV-1a hashed into 256 buckets, counted, then L2-normalized.
#[derive(Debug, Clone, Copy, Default)]
pub struct HashedEmbedder;

impl HashedEmbedder {
    pub fn bucket(token: &str) -> usize {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in token.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        (h % HASHED_DIM as u64) as usize
    }
}

impl Embedder for HashedEmbedder {
    fn tag(&self) -> &str {
        HASHED_TAG
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, VssError> {
        let mut v = vec![0.0; HASHED_DIM];
        let lowered = text.to_lowercase();
        for token in lowered
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
        {
            v[Self::bucket(token)] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(VssError::EmptyText);
        }
        v.iter_mut().for_each(|x| *x /= norm);
        EmbeddingVector::new(v)
    }
}

/// Generic embeddings endpoint: `POST {base}/embeddings` with
/// `{"model", "input"}`, reply in `data[0].embedding`.
pub struct HttpEmbedder {
    agent: ureq::Agent,
    base_url: String,
    api_key: Option<String>,
    model: String,
    tag: String,
    max_retries: u32,
    base_delay: Duration,
}

impl HttpEmbedder {
    pub fn new(
        base_url: impl Into<String>,
        api_key: Option<String>,
        model: impl Into<String>,
    ) -> Self {
        let model = model.into();
        HttpEmbedder {
            agent: crate::llm::http_agent(),
            base_url: base_url.into().trim_end_matches('/').to_owned(),
            api_key,
            tag: format!("http:{model}"),
            model,
            max_retries: 2,
            base_delay: Duration::from_millis(250),
        }
    }

    pub fn with_retry_delay(mut self, base_delay: Duration) -> Self {
        self.base_delay = base_delay;
        self
    }

    fn request(&self, text: &str) -> Result<EmbeddingVector, ProviderError> {
        let url = format!("{}/embeddings", self.base_url);
        let body = json!({ "model": self.model, "input": text });
        let reply = crate::llm::post_json(&self.agent, &url, self.api_key.as_deref(), &body)?;
        let values = reply
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| ProviderError::Rejected("response has no data[0].embedding".into()))?
            .iter()
            .map(|x| {
                x.as_f64()
                    .ok_or_else(|| ProviderError::Rejected("non-numeric embedding".into()))
            })
            .collect::<Result<Vec<f64>, _>>()?;
        EmbeddingVector::new(values).map_err(|e| ProviderError::Rejected(e.to_string()))
    }
}

impl Embedder for HttpEmbedder {
    fn tag(&self) -> &str {
        &self.tag
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, VssError> {
        let mut attempt = 0;
        loop {
            match self.request(text) {
                Ok(v) => return Ok(v),
                Err(ProviderError::Rejected(message)) => {
                    return Err(VssError::Embed {
                        attempts: attempt + 1,
                        message,
                    })
                }
                Err(ProviderError::Transport(message)) => {
                    if attempt >= self.max_retries {
                        return Err(VssError::Embed {
                            attempts: attempt + 1,
                            message,
                        });
                    }
                    thread::sleep(self.base_delay.saturating_mul(1 << attempt));
                    attempt += 1;
                }
            }
        }
    }
}

pub const ENV_EMBED_BASE_URL: &str = "SKBF_EMBED_BASE_URL";
pub const ENV_EMBED_API_KEY: &str = "SKBF_EMBED_API_KEY";
const DEFAULT_EMBED_BASE_URL: &str = "https://api.openai.com/v1";

/// Embedder for a configured tag: the hashed embedder, or `http:<model>` using
/// `SKBF_EMBED_BASE_URL` and `SKBF_EMBED_API_KEY` looked up through `var`.
pub fn embedder_from_tag(
    tag: &str,
    var: impl Fn(&str) -> Option<String>,
) -> Result<Box<dyn Embedder>, VssError> {
    if tag == HASHED_TAG {
        return Ok(Box::new(HashedEmbedder));
    }
    match tag.strip_prefix("http:") {
        Some(model) if !model.is_empty() => {
            let base = var(ENV_EMBED_BASE_URL).unwrap_or_else(|| DEFAULT_EMBED_BASE_URL.into());
            Ok(Box::new(HttpEmbedder::new(
                base,
                var(ENV_EMBED_API_KEY),
                model,
            )))
        }
        _ => Err(VssError::UnknownEmbedder(tag.to_owned())),
    }
}

/// Cosine of the angle between `a` and `b`, clamped to [-1, 1].
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, VssError> {
    if a.dim() != b.dim() {
        return Err(VssError::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(VssError::SimilarityUndefined);
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

fn content_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheHeader {
    format: String,
    version: u32,
    embedder_tag: String,
    dim: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheRecord {
    node_id: NodeId,
    embedder_tag: String,
    content_hash: String,
    vector: EmbeddingVector,
}

/// Node embeddings produced by one embedder.
#[derive(Debug, Clone)]
pub struct EmbeddingIndex {
    tag: String,
    dim: Option<usize>,
    entries: HashMap<NodeId, (String, EmbeddingVector)>,
}

impl EmbeddingIndex {
    pub fn new(tag: impl Into<String>) -> Self {
        EmbeddingIndex {
            tag: tag.into(),
            dim: None,
            entries: HashMap::new(),
        }
    }

    /// Index over precomputed vectors (content hashes left blank).
    pub fn from_vectors(
        tag: impl Into<String>,
        vectors: impl IntoIterator<Item = (NodeId, EmbeddingVector)>,
    ) -> Result<Self, VssError> {
        let mut index = Self::new(tag);
        for (id, v) in vectors {
            index.insert(id, String::new(), v)?;
        }
        Ok(index)
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn dim(&self) -> Option<usize> {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, node: &NodeId) -> Option<&EmbeddingVector> {
        self.entries.get(node).map(|(_, v)| v)
    }

    fn insert(&mut self, node: NodeId, hash: String, v: EmbeddingVector) -> Result<(), VssError> {
        match self.dim {
            Some(d) if d != v.dim() => {
                return Err(VssError::DimensionMismatch {
                    expected: d,
                    got: v.dim(),
                })
            }
            _ => self.dim = Some(v.dim()),
        }
        self.entries.insert(node, (hash, v));
        Ok(())
    }

    /// Embed the documents of `nodes`, reusing entries whose text is unchanged.
    /// Returns the number of newly embedded nodes.
    pub fn extend<'a>(
        &mut self,
        skb: &SemiStructuredKb,
        embedder: &dyn Embedder,
        nodes: impl IntoIterator<Item = &'a NodeId>,
    ) -> Result<usize, VssError> {
        if embedder.tag() != self.tag {
            return Err(VssError::EmbedderMismatch {
                index: self.tag.clone(),
                embedder: embedder.tag().to_owned(),
            });
        }
        let mut todo = Vec::new();
        for id in nodes {
            let text = skb.document_of(id)?;
            let hash = content_hash(&text);
            if self.entries.get(id).is_some_and(|(h, _)| *h == hash) {
                continue;
            }
            todo.push((id.clone(), hash, text));
        }
        let embedded: Vec<(NodeId, String, EmbeddingVector)> = todo
            .into_par_iter()
            .map(|(id, hash, text)| embed(embedder, &text).map(|v| (id, hash, v)))
            .collect::<Result<_, _>>()?;
        let added = embedded.len();
        let mut embedded = embedded;
        embedded.sort_by(|a, b| a.0.cmp(&b.0));
        for (id, hash, v) in embedded {
            self.insert(id, hash, v)?;
        }
        Ok(added)
    }

    /// Index every candidate node of `skb`.
    pub fn build(skb: &SemiStructuredKb, embedder: &dyn Embedder) -> Result<Self, VssError> {
        let mut index = Self::new(embedder.tag());
        let pool = skb.candidate_pool();
        index.extend(skb, embedder, &pool)?;
        Ok(index)
    }

    pub fn from_reader(reader: impl BufRead) -> Result<Self, VssError> {
        let mut lines = reader.lines().enumerate();
        let cache_err =
            |line: usize, e: &dyn std::fmt::Display| VssError::Cache(format!("line {line}: {e}"));
        let header: CacheHeader = match lines.next() {
            Some((_, Ok(l))) => serde_json::from_str(&l).map_err(|e| cache_err(1, &e))?,
            Some((_, Err(e))) => return Err(cache_err(1, &e)),
            None => return Err(VssError::Cache("empty file".into())),
        };
        if header.format != CACHE_FORMAT || header.version != CACHE_VERSION {
            return Err(VssError::Cache(format!(
                "unsupported format {} v{}",
                header.format, header.version
            )));
        }
        let mut index = Self::new(header.embedder_tag);
        for (i, line) in lines {
            let line = line.map_err(|e| cache_err(i + 1, &e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: CacheRecord = serde_json::from_str(&line).map_err(|e| cache_err(i + 1, &e))?;
            if rec.embedder_tag != index.tag {
                continue;
            }
            if rec.vector.dim() != header.dim {
                return Err(cache_err(i + 1, &"vector dimension differs from header"));
            }
            index.insert(rec.node_id, rec.content_hash, rec.vector)?;
        }
        Ok(index)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, VssError> {
        let path = path.as_ref();
        let f = std::fs::File::open(path)
            .map_err(|e| VssError::Cache(format!("{}: {e}", path.display())))?;
        Self::from_reader(std::io::BufReader::new(f))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), VssError> {
        let header = CacheHeader {
            format: CACHE_FORMAT.into(),
            version: CACHE_VERSION,
            embedder_tag: self.tag.clone(),
            dim: self.dim.unwrap_or(0),
        };
        let mut out = serde_json::to_string(&header).expect("header serializes");
        out.push('\n');
        let mut ids: Vec<&NodeId> = self.entries.keys().collect();
        ids.sort();
        for id in ids {
            let (hash, vector) = &self.entries[id];
            let rec = CacheRecord {
                node_id: id.clone(),
                embedder_tag: self.tag.clone(),
                content_hash: hash.clone(),
                vector: vector.clone(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        let path = path.as_ref();
        fsutil::write_atomic(path, out.as_bytes())
            .map_err(|e| VssError::Cache(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredNode {
    pub node: NodeId,
    pub score: f64,
}

/// Output of the similarity step: the (truncated) filtered block and the
/// padding drawn from the rest of the pool.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VssRanking {
    pub filtered: Vec<ScoredNode>,
    pub additional: Vec<ScoredNode>,
}

fn score_all<'a>(
    index: &EmbeddingIndex,
    query: &EmbeddingVector,
    nodes: impl Iterator<Item = &'a NodeId>,
) -> Result<Vec<ScoredNode>, VssError> {
    let mut scored = nodes
        .map(|id| {
            let v = index
                .get(id)
                .ok_or_else(|| VssError::IndexMiss(id.clone()))?;
            Ok(ScoredNode {
                node: id.clone(),
                score: cosine_similarity(query, v)?,
            })
        })
        .collect::<Result<Vec<_>, VssError>>()?;
    scored.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.node.cmp(&b.node))
    });
    Ok(scored)
}

/// Rank `filtered` by similarity to `query` (keeping at most `k_max`), then pad
/// with the most similar pool members outside `filtered` up to `k_max` total.
pub fn rank_by_vector(
    index: &EmbeddingIndex,
    query: &EmbeddingVector,
    filtered: &BTreeSet<NodeId>,
    pool: &BTreeSet<NodeId>,
    k_max: usize,
) -> Result<VssRanking, VssError> {
    if k_max == 0 {
        return Err(VssError::InvalidKMax);
    }
    let mut kept = score_all(index, query, filtered.iter())?;
    kept.truncate(k_max);
    let room = k_max - kept.len();
    let additional = if room > 0 {
        let mut rest = score_all(
            index,
            query,
            pool.iter().filter(|id| !filtered.contains(*id)),
        )?;
        rest.truncate(room);
        rest
    } else {
        Vec::new()
    };
    Ok(VssRanking {
        filtered: kept,
        additional,
    })
}

pub fn vss_rank(
    index: &EmbeddingIndex,
    embedder: &dyn Embedder,
    query: &str,
    filtered: &BTreeSet<NodeId>,
    pool: &BTreeSet<NodeId>,
    k_max: usize,
) -> Result<VssRanking, VssError> {
    if embedder.tag() != index.tag() {
        return Err(VssError::EmbedderMismatch {
            index: index.tag().to_owned(),
            embedder: embedder.tag().to_owned(),
        });
    }
    let q = embed(embedder, query)?;
    rank_by_vector(index, &q, filtered, pool, k_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skb::tests::desk;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(x.to_vec()).unwrap()
    }

    fn ids(list: &[&str]) -> BTreeSet<NodeId> {
        list.iter().map(|s| NodeId::from(*s)).collect()
    }

    #[test]
    fn hashed_embedder_examples() {
        let e = HashedEmbedder;
        let g = embed(&e, "graph graph").unwrap();
        let nonzero: Vec<f64> = g.as_slice().iter().copied().filter(|x| *x != 0.0).collect();
        assert_eq!(nonzero, vec![1.0]);
        assert_eq!(g.as_slice()[HashedEmbedder::bucket("graph")], 1.0);

        assert_eq!(
            embed(&e, "Same text").unwrap(),
            embed(&e, "Same text").unwrap()
        );

        let (a, b) = (
            HashedEmbedder::bucket("alpha"),
            HashedEmbedder::bucket("beta"),
        );
        assert_ne!(a, b, "fixture tokens must not collide");
        let ab = embed(&e, "alpha beta").unwrap();
        let expected = 1.0 / 2f64.sqrt();
        assert!((ab.as_slice()[a] - expected).abs() < 1e-15);
        assert!((ab.as_slice()[b] - expected).abs() < 1e-15);
        assert_eq!(ab.as_slice().iter().filter(|x| **x != 0.0).count(), 2);

        assert!(matches!(embed(&e, "   "), Err(VssError::EmptyText)));
        assert!(matches!(embed(&e, "?!"), Err(VssError::EmptyText)));
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(
            cosine_similarity(&v(&[1.0, 0.0]), &v(&[1.0, 0.0])).unwrap(),
            1.0
        );
        assert_eq!(
            cosine_similarity(&v(&[1.0, 0.0]), &v(&[0.0, 1.0])).unwrap(),
            0.0
        );
        let s = cosine_similarity(&v(&[1.0, 1.0]), &v(&[1.0, 0.0])).unwrap();
        assert!((s - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(matches!(
            cosine_similarity(&v(&[0.0, 0.0]), &v(&[1.0, 0.0])),
            Err(VssError::SimilarityUndefined)
        ));
        assert!(matches!(
            cosine_similarity(&v(&[1.0]), &v(&[1.0, 0.0])),
            Err(VssError::DimensionMismatch { .. })
        ));
        assert!(EmbeddingVector::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn ranks_filtered_then_pads_from_pool() {
        let skb = desk();
        let index = EmbeddingIndex::build(&skb, &HashedEmbedder).unwrap();
        let query = "Which papers did Alice Smith write?";
        let pool = skb.candidate_pool();
        let r = vss_rank(&index, &HashedEmbedder, query, &ids(&["n1"]), &pool, 3).unwrap();
        assert_eq!(
            r.filtered
                .iter()
                .map(|s| s.node.as_str())
                .collect::<Vec<_>>(),
            vec!["n1"]
        );
        assert_eq!(r.additional.len(), 2);

        // Oracle: score every other candidate directly and take the top two.
        let q = HashedEmbedder.embed(query).unwrap();
        let mut expected: Vec<(f64, NodeId)> = pool
            .iter()
            .filter(|id| id.as_str() != "n1")
            .map(|id| {
                let d = HashedEmbedder.embed(&skb.document_of(id).unwrap()).unwrap();
                (cosine_similarity(&q, &d).unwrap(), id.clone())
            })
            .collect();
        expected.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let got: Vec<&NodeId> = r.additional.iter().map(|s| &s.node).collect();
        assert_eq!(
            got,
            expected
                .iter()
                .take(2)
                .map(|(_, id)| id)
                .collect::<Vec<_>>()
        );
    }

    #[test]
    fn truncation_and_pure_fallback() {
        let nodes: Vec<(NodeId, EmbeddingVector)> = (0..30)
            .map(|i| (NodeId::new(format!("c{i:02}")), v(&[1.0, i as f64 / 10.0])))
            .collect();
        let index = EmbeddingIndex::from_vectors("t", nodes.clone()).unwrap();
        let pool: BTreeSet<NodeId> = nodes.iter().map(|(id, _)| id.clone()).collect();
        let filtered: BTreeSet<NodeId> = pool.iter().take(25).cloned().collect();
        let q = v(&[1.0, 0.0]);
        let r = rank_by_vector(&index, &q, &filtered, &pool, 20).unwrap();
        assert_eq!((r.filtered.len(), r.additional.len()), (20, 0));
        let r = rank_by_vector(&index, &q, &BTreeSet::new(), &pool, 20).unwrap();
        assert_eq!((r.filtered.len(), r.additional.len()), (0, 20));
        assert_eq!(r.additional[0].node, NodeId::from("c00"));
        assert!(matches!(
            rank_by_vector(&index, &q, &ids(&["zz"]), &pool, 20),
            Err(VssError::IndexMiss(_))
        ));
        assert!(matches!(
            rank_by_vector(&index, &q, &filtered, &pool, 0),
            Err(VssError::InvalidKMax)
        ));
    }

    #[test]
    fn ties_break_by_node_id() {
        let index = EmbeddingIndex::from_vectors(
            "t",
            ["b", "a", "c"]
                .iter()
                .map(|s| (NodeId::from(*s), v(&[1.0, 1.0]))),
        )
        .unwrap();
        let pool = ids(&["a", "b", "c"]);
        let r = rank_by_vector(&index, &v(&[1.0, 0.0]), &BTreeSet::new(), &pool, 3).unwrap();
        assert_eq!(
            r.additional
                .iter()
                .map(|s| s.node.as_str())
                .collect::<Vec<_>>(),
            vec!["a", "b", "c"]
        );
    }

    #[test]
    fn cache_round_trip_and_lazy_rebuild() {
        let skb = desk();
        let index = EmbeddingIndex::build(&skb, &HashedEmbedder).unwrap();
        assert_eq!(index.len(), 5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.jsonl");
        index.save(&path).unwrap();
        let mut back = EmbeddingIndex::load(&path).unwrap();
        assert_eq!(back.dim(), Some(HASHED_DIM));
        for n in skb.nodes() {
            assert_eq!(back.get(&n.id), index.get(&n.id));
        }
        // Nothing changed, so nothing is re-embedded.
        assert_eq!(
            back.extend(&skb, &HashedEmbedder, &skb.candidate_pool())
                .unwrap(),
            0
        );

        struct Other;
        impl Embedder for Other {
            fn tag(&self) -> &str {
                "other"
            }
            fn embed(&self, _: &str) -> Result<EmbeddingVector, VssError> {
                unreachable!()
            }
        }
        assert!(matches!(
            back.extend(&skb, &Other, &skb.candidate_pool()),
            Err(VssError::EmbedderMismatch { .. })
        ));
    }

    #[test]
    fn http_embedder_contract_and_retries() {
        let (addr, server) = crate::llm::http::tests::serve(vec![
            (500, "{}".into()),
            (200, r#"{"data":[{"embedding":[0.6,0.8]}]}"#.into()),
        ]);
        let e = HttpEmbedder::new(addr, None, "m").with_retry_delay(Duration::ZERO);
        assert_eq!(e.embed("hello").unwrap(), v(&[0.6, 0.8]));
        assert_eq!(e.tag(), "http:m");
        let bodies = server.join().unwrap();
        assert_eq!(bodies.len(), 2);
        let sent: Value = serde_json::from_str(&bodies[1]).unwrap();
        assert_eq!(sent["input"], "hello");
        assert_eq!(sent["model"], "m");
    }

    #[test]
    fn embedder_selection() {
        let none = |_: &str| None;
        assert_eq!(
            embedder_from_tag(HASHED_TAG, none).unwrap().tag(),
            HASHED_TAG
        );
        assert_eq!(
            embedder_from_tag("http:text-embed", none).unwrap().tag(),
            "http:text-embed"
        );
        assert!(matches!(
            embedder_from_tag("word2vec", none),
            Err(VssError::UnknownEmbedder(_))
        ));
    }

    proptest! {
        #[test]
        fn cosine_bounds_and_self_similarity(
            a in prop::collection::vec(-1e3f64..1e3, 1..16),
            b in prop::collection::vec(-1e3f64..1e3, 1..16),
        ) {
            let n = a.len().min(b.len());
            let (a, b) = (v(&a[..n]), v(&b[..n]));
            if let Ok(s) = cosine_similarity(&a, &b) {
                prop_assert!((-1.0..=1.0).contains(&s));
                prop_assert_eq!(s, cosine_similarity(&b, &a).unwrap());
            }
            if let Ok(s) = cosine_similarity(&a, &a) {
                prop_assert!((s - 1.0).abs() <= 1e-9);
            }
        }
    }
}
