//! Candidate prefiltering: ground triplet constants against node aliases, then
//! shrink each variable's candidate domain by propagating the triplets over
//! the graph until nothing changes.
//!
//! Propagation is arc consistency over binary constraints. It is exact (equal
//! to projecting the full join onto the target) for connected tree-shaped
//! patterns and an over-approximation for cyclic ones.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::skb::{
    normalize_alias, Direction, EdgeMatch, NodeId, NodeIdx, SemiStructuredKb, TypeMode,
};
use crate::triplet::{Term, TripletSet, Variable};

/// Minimum alias similarity for a constant to ground to a node.
pub const ALIAS_MATCH_THRESHOLD: f64 = 0.9;

/// Safety cap on propagation sweeps; reaching it indicates a bug.
pub const SWEEP_CAP: usize = 1000;

/// Supporting edges kept per triplet in the trace.
pub const SUPPORT_EDGES_PER_TRIPLET: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FilterError {
    #[error("no usable triplet after preparation ({dropped} dropped)")]
    EmptyPreparation { dropped: usize },
    #[error("target variable ?{0} is not constrained by any prepared triplet")]
    UnconstrainedTarget(String),
    #[error("propagation did not converge within {0} sweeps")]
    SweepCapExceeded(usize),
    #[error("grounded triplet references unknown node `{0}`")]
    UnknownNode(NodeId),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    /// Type handling for outgoing-neighbor lookups.
    pub mode_out: TypeMode,
    /// Type handling for incoming-neighbor lookups.
    pub mode_in: TypeMode,
    /// How many best alias matches a constant expands to.
    pub ground_top_m: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            mode_out: TypeMode::Relaxed,
            mode_in: TypeMode::Strict,
            ground_top_m: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundedTerm {
    /// A constant resolved to one or more nodes (one unless `ground_top_m > 1`).
    Nodes(Vec<NodeId>),
    Var(Variable),
}

impl GroundedTerm {
    pub fn node(id: &str) -> Self {
        GroundedTerm::Nodes(vec![NodeId::from(id)])
    }

    pub fn var(name: &str, var_type: &str) -> Self {
        GroundedTerm::Var(Variable::new(name, var_type))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GroundedTriplet {
    pub head: GroundedTerm,
    pub edge_type: String,
    pub tail: GroundedTerm,
}

impl GroundedTriplet {
    pub fn new(head: GroundedTerm, edge_type: &str, tail: GroundedTerm) -> Self {
        GroundedTriplet {
            head,
            edge_type: edge_type.to_owned(),
            tail,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AliasMatch {
    pub node: NodeId,
    pub name: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingDecision {
    /// Position of the triplet in the extracted set.
    pub triplet: usize,
    pub surface: String,
    pub matches: Vec<AliasMatch>,
    pub chosen: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum DropReason {
    ConstantConstant,
    UnmatchedConstant { surface: String },
    SameVariable { name: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedTriplet {
    pub triplet: usize,
    #[serde(flatten)]
    pub reason: DropReason,
}

/// One domain update: `variable` went from `before` to `after` candidates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStep {
    pub sweep: usize,
    /// Position in the grounded triplet list.
    pub triplet: usize,
    pub variable: String,
    pub before: usize,
    pub after: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportEdge {
    pub head: NodeId,
    pub edge_type: String,
    pub tail: NodeId,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FilterTrace {
    pub grounding: Vec<GroundingDecision>,
    pub dropped: Vec<DroppedTriplet>,
    pub steps: Vec<FilterStep>,
    pub sweeps: usize,
    /// Variables materialized from their full candidate set at a fixpoint.
    pub materialized: Vec<String>,
    /// Final domain size per variable (`None` when never constrained).
    pub final_sizes: BTreeMap<String, Option<usize>>,
    /// Graph edges consistent with the final domains, per grounded triplet.
    pub support: Vec<Vec<SupportEdge>>,
    pub stopped_on_empty_target: bool,
}

impl FilterTrace {
    /// Append the propagation part of `other` to this (grounding) trace.
    pub fn merge(mut self, other: FilterTrace) -> FilterTrace {
        self.grounding.extend(other.grounding);
        self.dropped.extend(other.dropped);
        self.steps.extend(other.steps);
        self.sweeps += other.sweeps;
        self.materialized.extend(other.materialized);
        self.final_sizes.extend(other.final_sizes);
        self.support.extend(other.support);
        self.stopped_on_empty_target |= other.stopped_on_empty_target;
        self
    }
}

/// Nodes whose aliases match `surface`, best first. Exact normalized matches
/// score 1.0, otherwise `1 - levenshtein / max_len` over normalized strings;
/// only scores of at least [`ALIAS_MATCH_THRESHOLD`] are returned.
pub fn match_alias(skb: &SemiStructuredKb, surface: &str) -> Vec<(NodeId, f64)> {
    let norm = normalize_alias(surface);
    if norm.is_empty() {
        return Vec::new();
    }
    let mut best: HashMap<NodeIdx, f64> = HashMap::new();
    for &idx in skb.exact_alias(&norm) {
        best.insert(idx, 1.0);
    }
    // sim >= 0.9  <=>  10 * distance <= max_len, which bounds the length gap.
    let len = norm.chars().count();
    let shortest = (9 * len).div_ceil(10);
    let longest = 10 * len / 9;
    for (alias, idx) in skb.aliases_with_len(shortest..=longest) {
        if *alias == norm {
            continue;
        }
        let max_len = len.max(alias.chars().count());
        let dist = strsim::levenshtein(&norm, alias);
        if dist * 10 <= max_len {
            let score = 1.0 - dist as f64 / max_len as f64;
            let slot = best.entry(*idx).or_insert(score);
            *slot = slot.max(score);
        }
    }
    let mut out: Vec<(NodeId, f64)> = best
        .into_iter()
        .map(|(idx, s)| (skb.id_of(idx).clone(), s))
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

/// Drop constant-constant and self-loop triplets, ground constants to their
/// best alias match, and drop triplets whose constant matches nothing.
pub fn prepare_triplets(
    skb: &SemiStructuredKb,
    ts: &TripletSet,
    ground_top_m: usize,
) -> Result<(Vec<GroundedTriplet>, FilterTrace), FilterError> {
    let (grounded, trace) = ground_triplets(skb, ts, ground_top_m);
    if grounded.is_empty() {
        return Err(FilterError::EmptyPreparation {
            dropped: trace.dropped.len(),
        });
    }
    Ok((grounded, trace))
}

/// [`prepare_triplets`] without the emptiness check, so the trace survives.
pub fn ground_triplets(
    skb: &SemiStructuredKb,
    ts: &TripletSet,
    ground_top_m: usize,
) -> (Vec<GroundedTriplet>, FilterTrace) {
    let mut trace = FilterTrace::default();
    let mut grounded = Vec::new();
    let ground = |i: usize, surface: &str, trace: &mut FilterTrace| -> Option<GroundedTerm> {
        let matches = match_alias(skb, surface);
        let chosen: Vec<NodeId> = matches
            .iter()
            .take(ground_top_m.max(1))
            .map(|(id, _)| id.clone())
            .collect();
        trace.grounding.push(GroundingDecision {
            triplet: i,
            surface: surface.to_owned(),
            matches: matches
                .iter()
                .map(|(id, score)| AliasMatch {
                    node: id.clone(),
                    name: skb
                        .node(id)
                        .map(|n| n.name().to_owned())
                        .unwrap_or_default(),
                    score: *score,
                })
                .collect(),
            chosen: chosen.clone(),
        });
        if chosen.is_empty() {
            trace.dropped.push(DroppedTriplet {
                triplet: i,
                reason: DropReason::UnmatchedConstant {
                    surface: surface.to_owned(),
                },
            });
            None
        } else {
            Some(GroundedTerm::Nodes(chosen))
        }
    };

    for (i, t) in ts.triplets().iter().enumerate() {
        let (head, tail) = match (&t.head, &t.tail) {
            (Term::Constant(_), Term::Constant(_)) => {
                trace.dropped.push(DroppedTriplet {
                    triplet: i,
                    reason: DropReason::ConstantConstant,
                });
                continue;
            }
            (Term::Constant(c), Term::Variable(v)) => match ground(i, c, &mut trace) {
                Some(g) => (g, GroundedTerm::Var(v.clone())),
                None => continue,
            },
            (Term::Variable(v), Term::Constant(c)) => match ground(i, c, &mut trace) {
                Some(g) => (GroundedTerm::Var(v.clone()), g),
                None => continue,
            },
            (Term::Variable(a), Term::Variable(b)) => {
                if a.name == b.name {
                    trace.dropped.push(DroppedTriplet {
                        triplet: i,
                        reason: DropReason::SameVariable {
                            name: a.name.clone(),
                        },
                    });
                    continue;
                }
                (GroundedTerm::Var(a.clone()), GroundedTerm::Var(b.clone()))
            }
        };
        grounded.push(GroundedTriplet {
            head,
            edge_type: t.edge_type.clone(),
            tail,
        });
    }
    (grounded, trace)
}

/// A variable's candidate set during propagation.
#[derive(Debug, Clone)]
enum Dom {
    /// All candidates of the interned node type.
    Free(u32),
    Set(BTreeSet<NodeIdx>),
}

enum Side {
    Nodes(Vec<NodeIdx>),
    Var(usize),
}

struct Prepared {
    head: Side,
    tail: Side,
    out_match: EdgeMatch,
    in_match: EdgeMatch,
}

struct Propagator<'a> {
    skb: &'a SemiStructuredKb,
    names: Vec<String>,
    doms: Vec<Dom>,
    steps: Vec<FilterStep>,
    sweep: usize,
}

impl Propagator<'_> {
    fn size(&self, v: usize) -> usize {
        match &self.doms[v] {
            Dom::Free(ty) => self.skb.candidates_of_type_id(*ty).len(),
            Dom::Set(s) => s.len(),
        }
    }

    fn contains(&self, v: usize, n: NodeIdx) -> bool {
        match &self.doms[v] {
            Dom::Free(ty) => self.skb.is_candidate_of(n, *ty),
            Dom::Set(s) => s.contains(&n),
        }
    }

    /// Intersect variable `v` with `allowed`; returns whether the domain changed.
    fn restrict(&mut self, triplet: usize, v: usize, allowed: BTreeSet<NodeIdx>) -> bool {
        let before = self.size(v);
        let next: BTreeSet<NodeIdx> = match &self.doms[v] {
            Dom::Free(ty) => allowed
                .into_iter()
                .filter(|&n| self.skb.is_candidate_of(n, *ty))
                .collect(),
            Dom::Set(s) => s.intersection(&allowed).copied().collect(),
        };
        let after = next.len();
        let changed = matches!(self.doms[v], Dom::Free(_)) || after != before;
        if changed {
            self.steps.push(FilterStep {
                sweep: self.sweep,
                triplet,
                variable: self.names[v].clone(),
                before,
                after,
            });
        }
        self.doms[v] = Dom::Set(next);
        changed
    }

    fn neighbors_of_all<'n>(
        &self,
        nodes: impl Iterator<Item = &'n NodeIdx>,
        m: EdgeMatch,
        dir: Direction,
    ) -> BTreeSet<NodeIdx> {
        nodes
            .flat_map(|&n| self.skb.neighbor_indices(n, m, dir))
            .collect()
    }

    /// Heads in `heads` having an edge accepted by `m` into the domain of `tail`.
    fn heads_with_support(
        &self,
        heads: &BTreeSet<NodeIdx>,
        m: EdgeMatch,
        tail: usize,
    ) -> BTreeSet<NodeIdx> {
        heads
            .iter()
            .copied()
            .filter(|&h| {
                self.skb
                    .out_edges(h)
                    .iter()
                    .any(|&(ty, n)| m.accepts(ty) && self.contains(tail, n))
            })
            .collect()
    }

    /// Apply one triplet. Returns (changed, deferred).
    fn apply(&mut self, i: usize, t: &Prepared) -> (bool, bool) {
        match (&t.head, &t.tail) {
            (Side::Nodes(hs), Side::Var(v)) => {
                let n = self.neighbors_of_all(hs.iter(), t.out_match, Direction::Outgoing);
                (self.restrict(i, *v, n), false)
            }
            (Side::Var(v), Side::Nodes(ts)) => {
                let n = self.neighbors_of_all(ts.iter(), t.in_match, Direction::Incoming);
                (self.restrict(i, *v, n), false)
            }
            (Side::Var(h), Side::Var(tl)) => {
                let (h, tl) = (*h, *tl);
                let allowed_heads = match (&self.doms[h], &self.doms[tl]) {
                    (Dom::Free(_), Dom::Free(_)) => return (false, true),
                    (_, Dom::Set(tails)) => {
                        self.neighbors_of_all(tails.iter(), t.in_match, Direction::Incoming)
                    }
                    (Dom::Set(heads), Dom::Free(_)) => {
                        self.heads_with_support(heads, t.in_match, tl)
                    }
                };
                let mut changed = self.restrict(i, h, allowed_heads);
                let allowed_tails = match &self.doms[h] {
                    Dom::Set(heads) => {
                        self.neighbors_of_all(heads.iter(), t.out_match, Direction::Outgoing)
                    }
                    Dom::Free(_) => unreachable!("head domain is explicit after its update"),
                };
                changed |= self.restrict(i, tl, allowed_tails);
                (changed, false)
            }
            (Side::Nodes(_), Side::Nodes(_)) => (false, false),
        }
    }
}

/// Propagate grounded triplets to a fixpoint and return the target's domain.
pub fn substitute(
    skb: &SemiStructuredKb,
    grounded: &[GroundedTriplet],
    target: &Variable,
    mode_out: TypeMode,
    mode_in: TypeMode,
) -> Result<(BTreeSet<NodeId>, FilterTrace), FilterError> {
    let mut var_index: BTreeMap<String, usize> = BTreeMap::new();
    let mut names = Vec::new();
    let mut doms = Vec::new();
    let mut side = |term: &GroundedTerm| -> Result<Side, FilterError> {
        match term {
            GroundedTerm::Nodes(ids) => ids
                .iter()
                .map(|id| {
                    skb.idx(id)
                        .ok_or_else(|| FilterError::UnknownNode(id.clone()))
                })
                .collect::<Result<Vec<_>, _>>()
                .map(Side::Nodes),
            GroundedTerm::Var(v) => {
                let next = names.len();
                let i = *var_index.entry(v.name.clone()).or_insert(next);
                if i == next {
                    names.push(v.name.clone());
                    doms.push(match skb.node_type_id(&v.var_type) {
                        Some(ty) => Dom::Free(ty),
                        None => Dom::Set(BTreeSet::new()),
                    });
                }
                Ok(Side::Var(i))
            }
        }
    };
    let mut prepared = Vec::with_capacity(grounded.len());
    for g in grounded {
        prepared.push(Prepared {
            head: side(&g.head)?,
            tail: side(&g.tail)?,
            out_match: skb.edge_match(&g.edge_type, mode_out),
            in_match: skb.edge_match(&g.edge_type, mode_in),
        });
    }
    let target_ix = *var_index
        .get(&target.name)
        .ok_or_else(|| FilterError::UnconstrainedTarget(target.name.clone()))?;

    let mut p = Propagator {
        skb,
        names,
        doms,
        steps: Vec::new(),
        sweep: 0,
    };
    let mut materialized = Vec::new();
    let mut stopped_on_empty_target = false;
    'sweeps: loop {
        p.sweep += 1;
        if p.sweep > SWEEP_CAP {
            return Err(FilterError::SweepCapExceeded(SWEEP_CAP));
        }
        let mut changed = false;
        let mut deferred = false;
        for (i, t) in prepared.iter().enumerate() {
            let (c, d) = p.apply(i, t);
            changed |= c;
            deferred |= d;
            if matches!(&p.doms[target_ix], Dom::Set(s) if s.is_empty()) {
                stopped_on_empty_target = true;
                break 'sweeps;
            }
        }
        if changed {
            continue;
        }
        if !deferred {
            break;
        }
        // Fixpoint with variable pairs still jointly unconstrained: materialize them once.
        for t in &prepared {
            if let (Side::Var(h), Side::Var(tl)) = (&t.head, &t.tail) {
                for &v in [h, tl] {
                    if let Dom::Free(ty) = p.doms[v] {
                        let all = p.skb.candidates_of_type_id(ty).iter().copied().collect();
                        p.doms[v] = Dom::Set(all);
                        materialized.push(p.names[v].clone());
                    }
                }
            }
        }
    }

    let support = prepared.iter().map(|t| support_edges(&p, t)).collect();
    let final_sizes = p
        .names
        .iter()
        .enumerate()
        .map(|(i, n)| {
            let size = match &p.doms[i] {
                Dom::Free(_) => None,
                Dom::Set(s) => Some(s.len()),
            };
            (n.clone(), size)
        })
        .collect();
    let result = match &p.doms[target_ix] {
        Dom::Set(s) => s.iter().map(|&i| skb.id_of(i).clone()).collect(),
        Dom::Free(_) => return Err(FilterError::UnconstrainedTarget(target.name.clone())),
    };
    let trace = FilterTrace {
        steps: p.steps,
        sweeps: p.sweep,
        materialized,
        final_sizes,
        support,
        stopped_on_empty_target,
        ..FilterTrace::default()
    };
    Ok((result, trace))
}

fn support_edges(p: &Propagator<'_>, t: &Prepared) -> Vec<SupportEdge> {
    let m = match (&t.head, &t.tail) {
        (Side::Var(_), Side::Nodes(_)) => t.in_match,
        _ => t.out_match,
    };
    let head_members: Option<Vec<NodeIdx>> = match &t.head {
        Side::Nodes(ns) => Some(ns.clone()),
        Side::Var(v) => match &p.doms[*v] {
            Dom::Set(s) => Some(s.iter().copied().collect()),
            Dom::Free(_) => None,
        },
    };
    let tail_ok = |n: NodeIdx| match &t.tail {
        Side::Nodes(ns) => ns.contains(&n),
        Side::Var(v) => p.contains(*v, n),
    };
    let mut out = Vec::new();
    if let Some(heads) = head_members {
        'outer: for h in heads {
            for &(ty, n) in p.skb.out_edges(h) {
                if m.accepts(ty) && tail_ok(n) {
                    out.push(SupportEdge {
                        head: p.skb.id_of(h).clone(),
                        edge_type: p.skb.edge_label(ty).to_owned(),
                        tail: p.skb.id_of(n).clone(),
                    });
                    if out.len() >= SUPPORT_EDGES_PER_TRIPLET {
                        break 'outer;
                    }
                }
            }
        }
    } else if let Side::Var(tv) = &t.tail {
        if let Dom::Set(tails) = &p.doms[*tv] {
            let Side::Var(hv) = &t.head else {
                unreachable!()
            };
            'outer2: for &n in tails {
                for &(ty, h) in p.skb.in_edges(n) {
                    if m.accepts(ty) && p.contains(*hv, h) {
                        out.push(SupportEdge {
                            head: p.skb.id_of(h).clone(),
                            edge_type: p.skb.edge_label(ty).to_owned(),
                            tail: p.skb.id_of(n).clone(),
                        });
                        if out.len() >= SUPPORT_EDGES_PER_TRIPLET {
                            break 'outer2;
                        }
                    }
                }
            }
        }
    }
    out
}
