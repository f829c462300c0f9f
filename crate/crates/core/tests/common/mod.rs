//! Random graphs and patterns plus a brute-force join used as a reference
//! for constraint propagation.

#![allow(dead_code)]

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use skbf::filter::{GroundedTerm, GroundedTriplet};
use skbf::triplet::Variable;
use skbf::{NodeId, SemiStructuredKb, TypeMode};

pub const NODE_TYPES: [&str; 3] = ["a", "b", "c"];
pub const EDGE_TYPES: [&str; 3] = ["r", "s", "t"];

#[derive(Debug, Clone)]
pub struct RawGraph {
    pub nodes: Vec<(String, &'static str, bool)>,
    pub edges: Vec<(String, &'static str, String)>,
}

impl RawGraph {
    pub fn random(rng: &mut ChaCha8Rng, max_nodes: usize, max_edges: usize) -> Self {
        let n = rng.gen_range(1..=max_nodes);
        let nodes = (0..n)
            .map(|i| {
                let ty = *NODE_TYPES.choose(rng).unwrap();
                (format!("v{i:02}"), ty, rng.gen_bool(0.85))
            })
            .collect::<Vec<_>>();
        let m = rng.gen_range(0..=max_edges);
        let edges = (0..m)
            .map(|_| {
                let h = nodes.choose(rng).unwrap().0.clone();
                let t = nodes.choose(rng).unwrap().0.clone();
                (h, *EDGE_TYPES.choose(rng).unwrap(), t)
            })
            .collect();
        RawGraph { nodes, edges }
    }

    pub fn to_skb(&self) -> SemiStructuredKb {
        let nodes: String = self
            .nodes
            .iter()
            .map(|(id, ty, cand)| {
                json!({"id": id, "type": ty, "aliases": [format!("name {id}")], "document": null, "is_candidate": cand})
                    .to_string()
                    + "\n"
            })
            .collect();
        let edges: String = self
            .edges
            .iter()
            .map(|(h, e, t)| json!({"head": h, "type": e, "tail": t}).to_string() + "\n")
            .collect();
        SemiStructuredKb::load(nodes.as_bytes(), edges.as_bytes()).expect("generated graph loads")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PTerm {
    Const(String),
    Var(usize),
}

#[derive(Debug, Clone)]
pub struct Pattern {
    pub var_types: Vec<&'static str>,
    pub triplets: Vec<(PTerm, &'static str, PTerm)>,
    pub target: usize,
}

impl Pattern {
    /// A tree over the variables plus constant leaves; no two triplets link
    /// the same pair of variables.
    pub fn random_acyclic(rng: &mut ChaCha8Rng, g: &RawGraph, max_vars: usize) -> Self {
        let k = rng.gen_range(1..=max_vars);
        let var_types: Vec<&str> = (0..k).map(|_| *NODE_TYPES.choose(rng).unwrap()).collect();
        let mut triplets = Vec::new();
        for i in 1..k {
            let j = rng.gen_range(0..i);
            let e = random_edge_label(rng);
            if rng.gen_bool(0.5) {
                triplets.push((PTerm::Var(i), e, PTerm::Var(j)));
            } else {
                triplets.push((PTerm::Var(j), e, PTerm::Var(i)));
            }
        }
        let consts = if k == 1 {
            rng.gen_range(1..=2)
        } else {
            rng.gen_range(0..=2)
        };
        for _ in 0..consts {
            let v = rng.gen_range(0..k);
            let c = PTerm::Const(g.nodes.choose(rng).unwrap().0.clone());
            let e = random_edge_label(rng);
            if rng.gen_bool(0.5) {
                triplets.push((c, e, PTerm::Var(v)));
            } else {
                triplets.push((PTerm::Var(v), e, c));
            }
        }
        triplets.shuffle(rng);
        Pattern {
            var_types,
            triplets,
            target: rng.gen_range(0..k),
        }
    }

    /// An acyclic pattern with one or two extra variable-variable triplets,
    /// which close cycles (or parallel constraints) over its variables.
    pub fn random_cyclic(rng: &mut ChaCha8Rng, g: &RawGraph, max_vars: usize) -> Self {
        let mut p = Self::random_acyclic(rng, g, max_vars.max(2));
        while p.var_types.len() < 2 {
            p = Self::random_acyclic(rng, g, max_vars.max(2));
        }
        let k = p.var_types.len();
        for _ in 0..rng.gen_range(1..=2) {
            let a = rng.gen_range(0..k);
            let mut b = rng.gen_range(0..k);
            while b == a {
                b = rng.gen_range(0..k);
            }
            p.triplets
                .push((PTerm::Var(a), random_edge_label(rng), PTerm::Var(b)));
        }
        p
    }

    pub fn var(&self, i: usize) -> Variable {
        Variable::new(format!("x{i}"), self.var_types[i])
    }

    pub fn grounded(&self) -> Vec<GroundedTriplet> {
        let term = |t: &PTerm| match t {
            PTerm::Const(id) => GroundedTerm::Nodes(vec![NodeId::new(id.clone())]),
            PTerm::Var(i) => GroundedTerm::Var(self.var(*i)),
        };
        self.triplets
            .iter()
            .map(|(h, e, t)| GroundedTriplet::new(term(h), e, term(t)))
            .collect()
    }
}

/// Mostly declared labels, occasionally one the graph has never seen.
fn random_edge_label(rng: &mut ChaCha8Rng) -> &'static str {
    if rng.gen_bool(0.05) {
        "u"
    } else {
        EDGE_TYPES.choose(rng).unwrap()
    }
}

/// Reference evaluation by exhaustive backtracking over variable assignments,
/// reading only the raw node and edge lists.
pub struct Oracle<'g> {
    g: &'g RawGraph,
    typed: HashSet<(&'g str, &'g str, &'g str)>,
    untyped: HashSet<(&'g str, &'g str)>,
}

impl<'g> Oracle<'g> {
    pub fn new(g: &'g RawGraph) -> Self {
        Oracle {
            g,
            typed: g
                .edges
                .iter()
                .map(|(h, e, t)| (h.as_str(), *e, t.as_str()))
                .collect(),
            untyped: g
                .edges
                .iter()
                .map(|(h, _, t)| (h.as_str(), t.as_str()))
                .collect(),
        }
    }

    fn holds(&self, h: &str, e: &str, t: &str, mode: TypeMode) -> bool {
        match mode {
            TypeMode::Strict => self.typed.contains(&(h, e, t)),
            TypeMode::Relaxed => self.untyped.contains(&(h, t)),
        }
    }

    fn domain(&self, ty: &str) -> Vec<&'g str> {
        self.g
            .nodes
            .iter()
            .filter(|(_, t, cand)| *t == ty && *cand)
            .map(|(id, _, _)| id.as_str())
            .collect()
    }

    /// Target values that extend to a full satisfying assignment.
    pub fn join(&self, p: &Pattern, mode: TypeMode) -> BTreeSet<NodeId> {
        let domains: Vec<Vec<&str>> = p.var_types.iter().map(|t| self.domain(t)).collect();
        let mut out = BTreeSet::new();
        for &v in &domains[p.target] {
            let mut assign: Vec<Option<&str>> = vec![None; p.var_types.len()];
            assign[p.target] = Some(v);
            if self.extend(p, mode, &domains, &mut assign, 0) {
                out.insert(NodeId::from(v));
            }
        }
        out
    }

    fn extend<'a>(
        &self,
        p: &Pattern,
        mode: TypeMode,
        domains: &[Vec<&'a str>],
        assign: &mut Vec<Option<&'a str>>,
        next: usize,
    ) -> bool {
        if !self.consistent(p, mode, assign) {
            return false;
        }
        let Some(i) = (next..assign.len()).find(|&i| assign[i].is_none()) else {
            return true;
        };
        for &v in &domains[i] {
            assign[i] = Some(v);
            if self.extend(p, mode, domains, assign, i + 1) {
                assign[i] = None;
                return true;
            }
        }
        assign[i] = None;
        false
    }

    /// Every triplet whose terms are all bound is satisfied.
    fn consistent(&self, p: &Pattern, mode: TypeMode, assign: &[Option<&str>]) -> bool {
        let value = |t: &PTerm| -> Option<String> {
            match t {
                PTerm::Const(c) => Some(c.clone()),
                PTerm::Var(i) => assign[*i].map(str::to_owned),
            }
        };
        p.triplets
            .iter()
            .all(|(h, e, t)| match (value(h), value(t)) {
                (Some(h), Some(t)) => self.holds(&h, e, &t, mode),
                _ => true,
            })
    }
}

pub fn fixtures() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn desk() -> SemiStructuredKb {
    SemiStructuredKb::load_dir(fixtures().join("desk")).expect("desk fixture loads")
}
