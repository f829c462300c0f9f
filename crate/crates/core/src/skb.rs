//! In-memory semi-structured knowledge base.
//!
//! A knowledge base is a typed directed graph whose nodes carry alias lists and
//! optional text documents. It is loaded once from two JSON Lines files and is
//! immutable afterwards; every accessor takes `&self` so a loaded store can be
//! shared across threads without locking.
//!
//! Node file records: `{"id", "type", "aliases": [..], "document": str|null, "is_candidate": bool}`.
//! Edge file records: `{"head", "type", "tail", "weight"?: f64, "undirected"?: bool}`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::fsutil;

/// File name of the node records inside a store directory.
pub const NODES_FILE: &str = "nodes.jsonl";
/// File name of the edge records inside a store directory.
pub const EDGES_FILE: &str = "edges.jsonl";
/// File name of the schema summary written by `ingest`.
pub const SCHEMA_FILE: &str = "schema.json";

/// Maximum number of relational pairs in a synthesized node summary.
pub const SUMMARY_MAX_NEIGHBORS: usize = 50;

#[derive(Debug, Error)]
pub enum SkbError {
    #[error("{file} line {line}: {message}")]
    Malformed {
        file: &'static str,
        line: usize,
        message: String,
    },
    #[error("edges line {line}: unknown node `{id}`")]
    DanglingEndpoint { line: usize, id: String },
    #[error("nodes line {line}: duplicate node id `{id}`")]
    DuplicateNode { line: usize, id: String },
    #[error("node file contains no nodes")]
    NoNodes,
    #[error("unknown node `{0}`")]
    UnknownNode(NodeId),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Stable node identifier, unique within one knowledge base.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Self {
        NodeId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::borrow::Borrow<str> for NodeId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        NodeId(s.to_owned())
    }
}

/// Dense position of a node inside the store's vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub(crate) struct NodeIdx(pub(crate) u32);

impl NodeIdx {
    fn at(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Node {
    pub id: NodeId,
    pub node_type: String,
    /// Surface names; the first entry is the canonical name.
    pub aliases: Vec<String>,
    pub document: Option<String>,
    pub is_candidate: bool,
}

impl Node {
    pub fn name(&self) -> &str {
        &self.aliases[0]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Edge {
    pub head: NodeId,
    pub edge_type: String,
    pub tail: NodeId,
    /// Kept for completeness; no ranking or filtering step reads it.
    pub weight: Option<f64>,
}

/// Node and edge type vocabularies of a loaded store.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub node_types: BTreeSet<String>,
    pub edge_types: BTreeSet<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Nodes `n` with an edge `n -> v`.
    Incoming,
    /// Nodes `n` with an edge `v -> n`.
    Outgoing,
}

/// Whether neighbor lookups honor the requested edge type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TypeMode {
    Strict,
    /// Ignore the edge type and return every neighbor in the given direction.
    Relaxed,
}

impl FromStr for TypeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "strict" => Ok(TypeMode::Strict),
            "relaxed" => Ok(TypeMode::Relaxed),
            other => Err(format!(
                "unknown edge type mode `{other}` (expected strict|relaxed)"
            )),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct NodeRecord {
    id: String,
    #[serde(rename = "type")]
    node_type: String,
    aliases: Vec<String>,
    #[serde(default)]
    document: Option<String>,
    is_candidate: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct EdgeRecord {
    head: String,
    #[serde(rename = "type")]
    edge_type: String,
    tail: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight: Option<f64>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    undirected: bool,
}

/// Edge-type filter resolved against the interned edge labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum EdgeMatch {
    Any,
    Only(u32),
    Never,
}

impl EdgeMatch {
    pub(crate) fn accepts(self, edge_type: u32) -> bool {
        match self {
            EdgeMatch::Any => true,
            EdgeMatch::Only(t) => t == edge_type,
            EdgeMatch::Never => false,
        }
    }
}

/// Canonical form used for alias lookup: NFC, lowercase, surrounding
/// punctuation stripped, internal whitespace collapsed to single spaces.
pub fn normalize_alias(surface: &str) -> String {
    let composed: String = surface.nfc().collect::<String>().to_lowercase();
    let trimmed = composed.trim_matches(|c: char| c.is_whitespace() || is_edge_punctuation(c));
    trimmed.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn is_edge_punctuation(c: char) -> bool {
    matches!(
        c,
        '"' | '\''
            | '`'
            | '.'
            | ','
            | ';'
            | ':'
            | '!'
            | '?'
            | '('
            | ')'
            | '['
            | ']'
            | '{'
            | '}'
            | '<'
            | '>'
            | '\u{201C}'
            | '\u{201D}'
            | '\u{2018}'
            | '\u{2019}'
            | '\u{00AB}'
            | '\u{00BB}'
    )
}

#[derive(Debug)]
pub struct SemiStructuredKb {
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    index: HashMap<NodeId, NodeIdx>,
    schema: Schema,
    edge_type_ids: HashMap<String, u32>,
    edge_type_names: Vec<String>,
    node_type_ids: HashMap<String, u32>,
    node_type_of: Vec<u32>,
    out_adj: Vec<Vec<(u32, NodeIdx)>>,
    in_adj: Vec<Vec<(u32, NodeIdx)>>,
    candidates_by_type: Vec<Vec<NodeIdx>>,
    alias_exact: HashMap<String, Vec<NodeIdx>>,
    /// Normalized aliases bucketed by character count, for bounded fuzzy scans.
    alias_by_len: BTreeMap<usize, Vec<(String, NodeIdx)>>,
}

impl SemiStructuredKb {
    /// Parse node and edge JSON Lines streams into an indexed store.
    pub fn load<N: BufRead, E: BufRead>(node_source: N, edge_source: E) -> Result<Self, SkbError> {
        let mut nodes = Vec::new();
        let mut index = HashMap::new();
        for (line_no, line) in numbered_lines(node_source, "nodes") {
            let line = line?;
            let rec: NodeRecord = serde_json::from_str(&line).map_err(|e| SkbError::Malformed {
                file: "nodes",
                line: line_no,
                message: e.to_string(),
            })?;
            let malformed = |message: &str| SkbError::Malformed {
                file: "nodes",
                line: line_no,
                message: message.to_owned(),
            };
            if rec.id.trim().is_empty() {
                return Err(malformed("empty node id"));
            }
            if rec.node_type.trim().is_empty() {
                return Err(malformed("empty node type"));
            }
            if rec.aliases.is_empty() || rec.aliases.iter().any(|a| a.trim().is_empty()) {
                return Err(malformed(
                    "aliases must be a non-empty list of non-empty strings",
                ));
            }
            let id = NodeId(rec.id);
            if index.contains_key(&id) {
                return Err(SkbError::DuplicateNode {
                    line: line_no,
                    id: id.0,
                });
            }
            index.insert(id.clone(), NodeIdx(nodes.len() as u32));
            nodes.push(Node {
                id,
                node_type: rec.node_type,
                aliases: rec.aliases,
                document: rec.document,
                is_candidate: rec.is_candidate,
            });
        }
        if nodes.is_empty() {
            return Err(SkbError::NoNodes);
        }

        let mut edges = Vec::new();
        for (line_no, line) in numbered_lines(edge_source, "edges") {
            let line = line?;
            let rec: EdgeRecord = serde_json::from_str(&line).map_err(|e| SkbError::Malformed {
                file: "edges",
                line: line_no,
                message: e.to_string(),
            })?;
            if rec.edge_type.trim().is_empty() {
                return Err(SkbError::Malformed {
                    file: "edges",
                    line: line_no,
                    message: "empty edge type".into(),
                });
            }
            for endpoint in [&rec.head, &rec.tail] {
                if !index.contains_key(endpoint.as_str()) {
                    return Err(SkbError::DanglingEndpoint {
                        line: line_no,
                        id: endpoint.clone(),
                    });
                }
            }
            let (head, tail) = (NodeId(rec.head), NodeId(rec.tail));
            if rec.undirected && head != tail {
                edges.push(Edge {
                    head: tail.clone(),
                    edge_type: rec.edge_type.clone(),
                    tail: head.clone(),
                    weight: rec.weight,
                });
            }
            edges.push(Edge {
                head,
                edge_type: rec.edge_type,
                tail,
                weight: rec.weight,
            });
        }

        Ok(Self::build(nodes, edges, index))
    }

    /// Load `nodes.jsonl` and `edges.jsonl` from a store directory.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self, SkbError> {
        let dir = dir.as_ref();
        let open = |name: &str| {
            let path = dir.join(name);
            File::open(&path)
                .map(BufReader::new)
                .map_err(|source| SkbError::Io {
                    path: path.display().to_string(),
                    source,
                })
        };
        Self::load(open(NODES_FILE)?, open(EDGES_FILE)?)
    }

    /// Write the store back out as a loadable directory (plus a schema summary).
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<(), SkbError> {
        let dir = dir.as_ref();
        let io_err = |path: &Path, source| SkbError::Io {
            path: path.display().to_string(),
            source,
        };
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;

        let mut nodes = String::new();
        for n in &self.nodes {
            let rec = NodeRecord {
                id: n.id.0.clone(),
                node_type: n.node_type.clone(),
                aliases: n.aliases.clone(),
                document: n.document.clone(),
                is_candidate: n.is_candidate,
            };
            nodes.push_str(&serde_json::to_string(&rec).expect("node record serializes"));
            nodes.push('\n');
        }
        let mut edges = String::new();
        for e in &self.edges {
            let rec = EdgeRecord {
                head: e.head.0.clone(),
                edge_type: e.edge_type.clone(),
                tail: e.tail.0.clone(),
                weight: e.weight,
                undirected: false,
            };
            edges.push_str(&serde_json::to_string(&rec).expect("edge record serializes"));
            edges.push('\n');
        }
        let schema = serde_json::to_string_pretty(&self.schema).expect("schema serializes");
        for (name, body) in [
            (NODES_FILE, nodes),
            (EDGES_FILE, edges),
            (SCHEMA_FILE, schema),
        ] {
            let path = dir.join(name);
            fsutil::write_atomic(&path, body.as_bytes()).map_err(|e| io_err(&path, e))?;
        }
        Ok(())
    }

    fn build(nodes: Vec<Node>, edges: Vec<Edge>, index: HashMap<NodeId, NodeIdx>) -> Self {
        let mut schema = Schema::default();
        for n in &nodes {
            schema.node_types.insert(n.node_type.clone());
        }
        for e in &edges {
            schema.edge_types.insert(e.edge_type.clone());
        }
        let node_type_ids: HashMap<String, u32> = schema
            .node_types
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        let edge_type_ids: HashMap<String, u32> = schema
            .edge_types
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();

        let schema_edge_names: Vec<String> = schema.edge_types.iter().cloned().collect();
        let node_type_of: Vec<u32> = nodes.iter().map(|n| node_type_ids[&n.node_type]).collect();
        let mut candidates_by_type = vec![Vec::new(); node_type_ids.len()];
        for (i, n) in nodes.iter().enumerate() {
            if n.is_candidate {
                candidates_by_type[node_type_of[i] as usize].push(NodeIdx(i as u32));
            }
        }

        let mut out_adj = vec![Vec::new(); nodes.len()];
        let mut in_adj = vec![Vec::new(); nodes.len()];
        for e in &edges {
            let (h, t, ty) = (index[&e.head], index[&e.tail], edge_type_ids[&e.edge_type]);
            out_adj[h.at()].push((ty, t));
            in_adj[t.at()].push((ty, h));
        }
        for adj in out_adj.iter_mut().chain(in_adj.iter_mut()) {
            adj.sort_unstable();
            adj.dedup();
        }

        let mut alias_exact: HashMap<String, Vec<NodeIdx>> = HashMap::new();
        let mut alias_by_len: BTreeMap<usize, Vec<(String, NodeIdx)>> = BTreeMap::new();
        for (i, n) in nodes.iter().enumerate() {
            let idx = NodeIdx(i as u32);
            for alias in &n.aliases {
                let norm = normalize_alias(alias);
                if norm.is_empty() {
                    continue;
                }
                let hits = alias_exact.entry(norm.clone()).or_default();
                if hits.last() != Some(&idx) {
                    hits.push(idx);
                }
                alias_by_len
                    .entry(norm.chars().count())
                    .or_default()
                    .push((norm, idx));
            }
        }

        SemiStructuredKb {
            nodes,
            edges,
            index,
            schema,
            edge_type_ids,
            edge_type_names: schema_edge_names,
            node_type_ids,
            node_type_of,
            out_adj,
            in_adj,
            candidates_by_type,
            alias_exact,
            alias_by_len,
        }
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.iter()
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node(&self, id: &NodeId) -> Result<&Node, SkbError> {
        self.idx(id)
            .map(|i| &self.nodes[i.at()])
            .ok_or_else(|| SkbError::UnknownNode(id.clone()))
    }

    pub fn contains(&self, id: &NodeId) -> bool {
        self.index.contains_key(id)
    }

    /// Every node flagged as an answer candidate, in id order.
    pub fn candidate_pool(&self) -> BTreeSet<NodeId> {
        self.nodes
            .iter()
            .filter(|n| n.is_candidate)
            .map(|n| n.id.clone())
            .collect()
    }

    /// Neighbors of `v` over edges of type `edge_type` in `direction`.
    /// In strict mode an undeclared edge type yields the empty set.
    pub fn neighbors(
        &self,
        v: &NodeId,
        edge_type: &str,
        direction: Direction,
        mode: TypeMode,
    ) -> Result<BTreeSet<NodeId>, SkbError> {
        let idx = self
            .idx(v)
            .ok_or_else(|| SkbError::UnknownNode(v.clone()))?;
        let m = self.edge_match(edge_type, mode);
        Ok(self
            .neighbor_indices(idx, m, direction)
            .map(|n| self.nodes[n.at()].id.clone())
            .collect())
    }

    /// Candidate nodes of the given node type. Unknown types yield the empty set.
    pub fn candidates_of_type(&self, node_type: &str) -> BTreeSet<NodeId> {
        self.candidate_indices(node_type)
            .iter()
            .map(|i| self.nodes[i.at()].id.clone())
            .collect()
    }

    /// The node's document, or its canonical name followed by a one-hop
    /// relational summary when no (non-empty) document is attached.
    pub fn document_of(&self, v: &NodeId) -> Result<String, SkbError> {
        let idx = self
            .idx(v)
            .ok_or_else(|| SkbError::UnknownNode(v.clone()))?;
        let node = &self.nodes[idx.at()];
        match node.document.as_deref() {
            Some(doc) if !doc.trim().is_empty() => Ok(doc.to_owned()),
            _ => Ok(self.relational_summary(idx)),
        }
    }

    fn relational_summary(&self, idx: NodeIdx) -> String {
        let edge_label = |ty: u32| self.edge_label(ty);
        let mut pairs: BTreeSet<String> = BTreeSet::new();
        for &(ty, n) in &self.out_adj[idx.at()] {
            pairs.insert(format!("{}: {}", edge_label(ty), self.nodes[n.at()].name()));
        }
        for &(ty, n) in &self.in_adj[idx.at()] {
            pairs.insert(format!(
                "{} (incoming): {}",
                edge_label(ty),
                self.nodes[n.at()].name()
            ));
        }
        let name = self.nodes[idx.at()].name();
        let mut out = format!("{name}.");
        for pair in pairs.iter().take(SUMMARY_MAX_NEIGHBORS) {
            out.push(' ');
            out.push_str(pair);
            out.push('.');
        }
        out
    }

    pub(crate) fn idx(&self, id: &NodeId) -> Option<NodeIdx> {
        self.index.get(id).copied()
    }

    pub(crate) fn id_of(&self, idx: NodeIdx) -> &NodeId {
        &self.nodes[idx.at()].id
    }

    pub(crate) fn edge_match(&self, edge_type: &str, mode: TypeMode) -> EdgeMatch {
        match mode {
            TypeMode::Relaxed => EdgeMatch::Any,
            TypeMode::Strict => self
                .edge_type_ids
                .get(edge_type)
                .map_or(EdgeMatch::Never, |&t| EdgeMatch::Only(t)),
        }
    }

    pub(crate) fn edge_label(&self, ty: u32) -> &str {
        &self.edge_type_names[ty as usize]
    }

    pub(crate) fn neighbor_indices(
        &self,
        v: NodeIdx,
        m: EdgeMatch,
        direction: Direction,
    ) -> impl Iterator<Item = NodeIdx> + '_ {
        let adj = match direction {
            Direction::Outgoing => &self.out_adj[v.at()],
            Direction::Incoming => &self.in_adj[v.at()],
        };
        let mut prev = None;
        adj.iter()
            .filter(move |(ty, _)| m.accepts(*ty))
            .filter_map(move |&(_, n)| {
                // Adjacency is sorted by (type, node); relaxed lookups can repeat a node.
                if m == EdgeMatch::Any {
                    if prev == Some(n) {
                        return None;
                    }
                    prev = Some(n);
                }
                Some(n)
            })
    }

    /// Typed outgoing edges of `v`, as `(edge type id, tail)`.
    pub(crate) fn out_edges(&self, v: NodeIdx) -> &[(u32, NodeIdx)] {
        &self.out_adj[v.at()]
    }

    pub(crate) fn in_edges(&self, v: NodeIdx) -> &[(u32, NodeIdx)] {
        &self.in_adj[v.at()]
    }

    pub(crate) fn node_type_id(&self, node_type: &str) -> Option<u32> {
        self.node_type_ids.get(node_type).copied()
    }

    pub(crate) fn candidate_indices(&self, node_type: &str) -> &[NodeIdx] {
        self.node_type_id(node_type)
            .map_or(&[][..], |t| &self.candidates_by_type[t as usize])
    }

    pub(crate) fn candidates_of_type_id(&self, ty: u32) -> &[NodeIdx] {
        &self.candidates_by_type[ty as usize]
    }

    /// Whether `idx` is a candidate of the interned node type `ty`.
    pub(crate) fn is_candidate_of(&self, idx: NodeIdx, ty: u32) -> bool {
        self.node_type_of[idx.at()] == ty && self.nodes[idx.at()].is_candidate
    }

    pub(crate) fn exact_alias(&self, normalized: &str) -> &[NodeIdx] {
        self.alias_exact
            .get(normalized)
            .map_or(&[][..], Vec::as_slice)
    }

    pub(crate) fn aliases_with_len(
        &self,
        range: std::ops::RangeInclusive<usize>,
    ) -> impl Iterator<Item = &(String, NodeIdx)> {
        self.alias_by_len.range(range).flat_map(|(_, v)| v.iter())
    }
}

fn numbered_lines<R: BufRead>(
    source: R,
    file: &'static str,
) -> impl Iterator<Item = (usize, Result<String, SkbError>)> {
    source
        .lines()
        .enumerate()
        .map(move |(i, line)| {
            let line_no = i + 1;
            let line = line.map_err(|e| SkbError::Malformed {
                file,
                line: line_no,
                message: e.to_string(),
            });
            (line_no, line)
        })
        .filter(|(_, l)| l.as_ref().map_or(true, |s| !s.trim().is_empty()))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) const DESK_NODES: &str = include_str!("../../../fixtures/desk/nodes.jsonl");
    pub(crate) const DESK_EDGES: &str = include_str!("../../../fixtures/desk/edges.jsonl");

    pub(crate) fn desk() -> SemiStructuredKb {
        SemiStructuredKb::load(DESK_NODES.as_bytes(), DESK_EDGES.as_bytes()).unwrap()
    }

    fn ids(list: &[&str]) -> BTreeSet<NodeId> {
        list.iter().map(|s| NodeId::from(*s)).collect()
    }

    #[test]
    fn desk_counts_match_fixture_records() {
        let skb = desk();
        let node_lines = DESK_NODES.lines().filter(|l| !l.trim().is_empty()).count();
        let edge_lines = DESK_EDGES.lines().filter(|l| !l.trim().is_empty()).count();
        assert_eq!((node_lines, edge_lines), (5, 4));
        assert_eq!(skb.node_count(), 5);
        assert_eq!(skb.edge_count(), 4);
        assert_eq!(
            skb.schema().edge_types,
            ["in_field", "writes"]
                .iter()
                .map(|s| s.to_string())
                .collect()
        );
    }

    #[test]
    fn single_node_no_edges() {
        let nodes = r#"{"id":"a","type":"t","aliases":["A"],"document":null,"is_candidate":true}"#;
        let skb = SemiStructuredKb::load(nodes.as_bytes(), "".as_bytes()).unwrap();
        assert_eq!((skb.node_count(), skb.edge_count()), (1, 0));
        assert!(skb.schema().edge_types.is_empty());
    }

    #[test]
    fn dangling_endpoint_names_missing_id() {
        let edges =
            format!("{DESK_EDGES}\n{{\"head\":\"n1\",\"type\":\"writes\",\"tail\":\"n99\"}}\n");
        let err = SemiStructuredKb::load(DESK_NODES.as_bytes(), edges.as_bytes()).unwrap_err();
        assert!(matches!(&err, SkbError::DanglingEndpoint { id, .. } if id == "n99"));
        assert!(err.to_string().contains("n99"));
    }

    #[test]
    fn duplicate_and_malformed_records_rejected() {
        let dup = format!("{DESK_NODES}{}\n", DESK_NODES.lines().next().unwrap());
        let err = SemiStructuredKb::load(dup.as_bytes(), "".as_bytes()).unwrap_err();
        assert!(
            matches!(err, SkbError::DuplicateNode { line: 6, .. }),
            "{err}"
        );

        let bad =
            "{\"id\":\"a\",\"type\":\"t\",\"aliases\":[\"A\"],\"is_candidate\":true}\n{not json}\n";
        let err = SemiStructuredKb::load(bad.as_bytes(), "".as_bytes()).unwrap_err();
        assert!(
            matches!(
                err,
                SkbError::Malformed {
                    file: "nodes",
                    line: 2,
                    ..
                }
            ),
            "{err}"
        );

        let no_alias = r#"{"id":"a","type":"t","aliases":[],"is_candidate":true}"#;
        assert!(SemiStructuredKb::load(no_alias.as_bytes(), "".as_bytes()).is_err());
        assert!(matches!(
            SemiStructuredKb::load("".as_bytes(), "".as_bytes()),
            Err(SkbError::NoNodes)
        ));
    }

    #[test]
    fn neighbors_on_desk() {
        let skb = desk();
        let n = |v: &str, e: &str, d| {
            skb.neighbors(&NodeId::from(v), e, d, TypeMode::Strict)
                .unwrap()
        };
        assert_eq!(n("n5", "in_field", Direction::Incoming), ids(&["n1", "n4"]));
        assert_eq!(n("n2", "writes", Direction::Outgoing), ids(&["n1"]));
        assert_eq!(n("n1", "writes", Direction::Outgoing), ids(&[]));
        assert_eq!(n("n1", "no_such_edge", Direction::Outgoing), ids(&[]));
        let relaxed = skb
            .neighbors(
                &NodeId::from("n1"),
                "writes",
                Direction::Outgoing,
                TypeMode::Relaxed,
            )
            .unwrap();
        assert_eq!(relaxed, ids(&["n5"]));
        assert!(matches!(
            skb.neighbors(
                &NodeId::from("zz"),
                "writes",
                Direction::Outgoing,
                TypeMode::Strict
            ),
            Err(SkbError::UnknownNode(_))
        ));
    }

    #[test]
    fn candidates_by_type() {
        let skb = desk();
        assert_eq!(skb.candidates_of_type("paper"), ids(&["n1", "n4"]));
        assert!(skb.candidates_of_type("building").is_empty());

        let nodes = concat!(
            r#"{"id":"a","type":"t","aliases":["A"],"is_candidate":true}"#,
            "\n",
            r#"{"id":"b","type":"t","aliases":["B"],"is_candidate":false}"#,
            "\n",
            r#"{"id":"c","type":"u","aliases":["C"],"is_candidate":true}"#,
        );
        let skb = SemiStructuredKb::load(nodes.as_bytes(), "".as_bytes()).unwrap();
        assert_eq!(skb.candidates_of_type("t"), ids(&["a"]));
        assert_eq!(skb.candidate_pool(), ids(&["a", "c"]));
    }

    #[test]
    fn documents_and_summaries() {
        let skb = desk();
        let n1 = skb.document_of(&NodeId::from("n1")).unwrap();
        assert!(n1.starts_with("We introduce"), "{n1}");
        assert_eq!(
            skb.document_of(&NodeId::from("n2")).unwrap(),
            "Alice Smith. writes: Attention Basics."
        );
        assert_eq!(
            skb.document_of(&NodeId::from("n5")).unwrap(),
            "machine learning. in_field (incoming): Attention Basics. in_field (incoming): Graph Reasoning at Scale."
        );
        assert!(skb.document_of(&NodeId::from("n42")).is_err());
    }

    #[test]
    fn undirected_edges_expand_to_both_directions() {
        let nodes = concat!(
            r#"{"id":"a","type":"t","aliases":["A"],"is_candidate":true}"#,
            "\n",
            r#"{"id":"b","type":"t","aliases":["B"],"is_candidate":true}"#,
        );
        let edges = r#"{"head":"a","type":"near","tail":"b","weight":0.5,"undirected":true}"#;
        let skb = SemiStructuredKb::load(nodes.as_bytes(), edges.as_bytes()).unwrap();
        assert_eq!(skb.edge_count(), 2);
        let out_b = skb
            .neighbors(
                &NodeId::from("b"),
                "near",
                Direction::Outgoing,
                TypeMode::Strict,
            )
            .unwrap();
        assert_eq!(out_b, ids(&["a"]));
        assert!(skb.edges().iter().all(|e| e.weight == Some(0.5)));
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_alias("  Alice   Smith. "), "alice smith");
        assert_eq!(normalize_alias("\"Machine\tLearning\""), "machine learning");
        // NFD input composes to the same key as NFC input.
        assert_eq!(normalize_alias("Cafe\u{301}"), normalize_alias("Caf\u{e9}"));
        assert_eq!(normalize_alias("..."), "");
    }

    #[test]
    fn write_dir_round_trips() {
        let skb = desk();
        let dir = tempfile::tempdir().unwrap();
        skb.write_dir(dir.path()).unwrap();
        let back = SemiStructuredKb::load_dir(dir.path()).unwrap();
        assert_eq!(
            back.nodes().collect::<Vec<_>>(),
            skb.nodes().collect::<Vec<_>>()
        );
        assert_eq!(back.edges(), skb.edges());
        assert_eq!(back.schema(), skb.schema());
    }
}
