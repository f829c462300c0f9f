//! Triplet pattern language (`triplet-grammar v1`).
//!
//! An LLM formalizes a question as one triplet per line, followed by a line
//! naming the variable that answers the question:
//!
//! ```text
//! ("Alice Smith", writes, ?p:paper)
//! (?p:paper, in_field, "machine learning")
//! TARGET ?p
//! ```
//!
//! Variables are written `?name:node_type`, constants as double-quoted strings
//! (`\"`, `\\`, `\n` and `\t` escapes). Lines that do not match the grammar are
//! ignored, so prose or code fences around the triplets are tolerated.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::skb::Schema;

pub const GRAMMAR_VERSION: &str = "triplet-grammar v1";

/// Minimum normalized edit similarity for repairing an undeclared edge label.
pub const EDGE_REPAIR_THRESHOLD: f64 = 0.8;

pub const EXTRACTION_SYSTEM: &str =
    "You translate questions into relational triplets over a typed knowledge graph.";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExtractionFormatError {
    #[error("no parsable triplet line")]
    NoTriplets,
    #[error("no triplet with a declared edge type (rejected: {})", .0.join(", "))]
    NoValidTriplets(Vec<String>),
    #[error("no TARGET line")]
    MissingTarget,
    #[error("target variable ?{0} does not occur in any triplet")]
    TargetNotInTriplets(String),
    #[error("variable ?{var} has undeclared node type `{node_type}`")]
    UnknownNodeType { var: String, node_type: String },
    #[error("variable ?{var} declared with conflicting types `{first}` and `{second}`")]
    ConflictingVariableType {
        var: String,
        first: String,
        second: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("query is empty")]
pub struct EmptyQueryError;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub var_type: String,
}

impl Variable {
    pub fn new(name: impl Into<String>, var_type: impl Into<String>) -> Self {
        Variable {
            name: name.into(),
            var_type: var_type.into(),
        }
    }
}

impl fmt::Display for Variable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "?{}:{}", self.name, self.var_type)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Constant(String),
    Variable(Variable),
}

impl Term {
    pub fn constant(surface: impl Into<String>) -> Self {
        Term::Constant(surface.into())
    }

    pub fn var(name: impl Into<String>, var_type: impl Into<String>) -> Self {
        Term::Variable(Variable::new(name, var_type))
    }

    pub fn as_variable(&self) -> Option<&Variable> {
        match self {
            Term::Variable(v) => Some(v),
            Term::Constant(_) => None,
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Variable(v) => v.fmt(f),
            Term::Constant(s) => {
                f.write_str("\"")?;
                for c in s.chars() {
                    match c {
                        '"' => f.write_str("\\\"")?,
                        '\\' => f.write_str("\\\\")?,
                        '\n' => f.write_str("\\n")?,
                        '\t' => f.write_str("\\t")?,
                        '\r' => f.write_str("\\r")?,
                        c => write!(f, "{c}")?,
                    }
                }
                f.write_str("\"")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub head: Term,
    pub edge_type: String,
    pub tail: Term,
}

impl Triplet {
    pub fn new(head: Term, edge_type: impl Into<String>, tail: Term) -> Self {
        Triplet {
            head,
            edge_type: edge_type.into(),
            tail,
        }
    }

    fn mentions(&self, name: &str) -> bool {
        [&self.head, &self.tail]
            .into_iter()
            .any(|t| t.as_variable().is_some_and(|v| v.name == name))
    }
}

impl fmt::Display for Triplet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.head, self.edge_type, self.tail)
    }
}

/// Non-empty list of triplets plus the variable that answers the question.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletSet {
    triplets: Vec<Triplet>,
    target: Variable,
}

impl TripletSet {
    /// Checks that the set is non-empty, variable types are consistent and the
    /// target occurs in some triplet.
    pub fn new(triplets: Vec<Triplet>, target: Variable) -> Result<Self, ExtractionFormatError> {
        if triplets.is_empty() {
            return Err(ExtractionFormatError::NoTriplets);
        }
        let mut types: BTreeMap<&str, &str> = BTreeMap::new();
        for v in triplets
            .iter()
            .flat_map(|t| [&t.head, &t.tail])
            .filter_map(Term::as_variable)
            .chain(std::iter::once(&target))
        {
            match types.get(v.name.as_str()) {
                Some(&first) if first != v.var_type => {
                    return Err(ExtractionFormatError::ConflictingVariableType {
                        var: v.name.clone(),
                        first: first.to_owned(),
                        second: v.var_type.clone(),
                    })
                }
                _ => {
                    types.insert(&v.name, &v.var_type);
                }
            }
        }
        if !triplets.iter().any(|t| t.mentions(&target.name)) {
            return Err(ExtractionFormatError::TargetNotInTriplets(target.name));
        }
        Ok(TripletSet { triplets, target })
    }

    pub fn triplets(&self) -> &[Triplet] {
        &self.triplets
    }

    pub fn target(&self) -> &Variable {
        &self.target
    }
}

impl fmt::Display for TripletSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.triplets {
            writeln!(f, "{t}")?;
        }
        write!(f, "TARGET ?{}", self.target.name)
    }
}

/// What happened to a triplet line's edge label during parsing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParseNote {
    EdgeRepaired {
        line: usize,
        from: String,
        to: String,
        similarity: f64,
    },
    EdgeRejected {
        line: usize,
        label: String,
    },
}

pub fn build_extraction_prompt(query: &str, schema: &Schema) -> Result<String, EmptyQueryError> {
    if query.trim().is_empty() {
        return Err(EmptyQueryError);
    }
    let join = |set: &std::collections::BTreeSet<String>| {
        set.iter()
            .map(String::as_str)
            .collect::<Vec<_>>()
            .join(", ")
    };
    Ok(format!(
        "Formalize the question below as relational triplets over a knowledge graph.\n\
         \n\
         Node types: {node_types}\n\
         Edge types: {edge_types}\n\
         \n\
         Grammar ({GRAMMAR_VERSION}):\n\
         - One triplet per line: (<term>, <edge_type>, <term>)\n\
         - A term is a variable ?name:node_type (an unknown entity of that node type) \
         or a double-quoted constant naming a specific entity, e.g. \"Alice Smith\"\n\
         - <edge_type> is one of the edge types above; the edge points from the first term to the second\n\
         - Reuse a variable name to refer to the same unknown entity\n\
         - The last line is TARGET ?name, marking the variable whose values answer the question\n\
         Reply with the triplets and the TARGET line only.\n\
         \n\
         Question: {query}\n",
        node_types = join(&schema.node_types),
        edge_types = join(&schema.edge_types),
    ))
}

/// Suffix appended to the extraction prompt when the first reply was unusable.
pub fn corrective_suffix(err: &ExtractionFormatError) -> String {
    format!(
        "\nYour previous reply could not be parsed ({err}). \
         Answer again using only the grammar above.\n"
    )
}

pub fn parse_triplet_response(
    raw: &str,
    schema: &Schema,
) -> Result<TripletSet, ExtractionFormatError> {
    parse_triplet_response_with_notes(raw, schema).map(|(set, _)| set)
}

/// Like [`parse_triplet_response`], also reporting edge-label repairs and rejections.
pub fn parse_triplet_response_with_notes(
    raw: &str,
    schema: &Schema,
) -> Result<(TripletSet, Vec<ParseNote>), ExtractionFormatError> {
    let mut notes = Vec::new();
    let mut triplets = Vec::new();
    let mut saw_triplet_line = false;
    let mut target: Option<(String, Option<String>)> = None;

    for (i, line) in raw.lines().enumerate() {
        let line_no = i + 1;
        let line = strip_list_marker(line.trim());
        if let Some(rest) = strip_target_keyword(line) {
            if let Some(t) = parse_target(rest) {
                target = Some(t);
            }
            continue;
        }
        let Some((head, label, tail)) = parse_triplet_line(line) else {
            continue;
        };
        saw_triplet_line = true;
        let edge_type = match resolve_edge_type(&label, schema) {
            EdgeResolution::Declared(e) => e,
            EdgeResolution::Repaired { to, similarity } => {
                notes.push(ParseNote::EdgeRepaired {
                    line: line_no,
                    from: label,
                    to: to.clone(),
                    similarity,
                });
                to
            }
            EdgeResolution::Rejected => {
                notes.push(ParseNote::EdgeRejected {
                    line: line_no,
                    label,
                });
                continue;
            }
        };
        let head = resolve_term(head, schema)?;
        let tail = resolve_term(tail, schema)?;
        triplets.push(Triplet {
            head,
            edge_type,
            tail,
        });
    }

    if triplets.is_empty() {
        if !saw_triplet_line {
            return Err(ExtractionFormatError::NoTriplets);
        }
        let rejected = notes
            .iter()
            .filter_map(|n| match n {
                ParseNote::EdgeRejected { label, .. } => Some(label.clone()),
                ParseNote::EdgeRepaired { .. } => None,
            })
            .collect();
        return Err(ExtractionFormatError::NoValidTriplets(rejected));
    }
    let (name, declared_type) = target.ok_or(ExtractionFormatError::MissingTarget)?;
    let used_type = triplets
        .iter()
        .flat_map(|t| [&t.head, &t.tail])
        .filter_map(Term::as_variable)
        .find(|v| v.name == name)
        .map(|v| v.var_type.clone())
        .ok_or_else(|| ExtractionFormatError::TargetNotInTriplets(name.clone()))?;
    let var_type = match declared_type {
        Some(t) => resolve_node_type(&name, &t, schema)?,
        None => used_type,
    };
    let set = TripletSet::new(triplets, Variable { name, var_type })?;
    Ok((set, notes))
}

enum EdgeResolution {
    Declared(String),
    Repaired { to: String, similarity: f64 },
    Rejected,
}

fn resolve_edge_type(label: &str, schema: &Schema) -> EdgeResolution {
    if schema.edge_types.contains(label) {
        return EdgeResolution::Declared(label.to_owned());
    }
    let lowered = label.to_lowercase();
    let mut best: Option<(&String, f64)> = None;
    for declared in &schema.edge_types {
        let sim = strsim::normalized_levenshtein(&lowered, &declared.to_lowercase());
        // Iteration is lexicographic, so strict `>` keeps the smallest label on ties.
        if best.is_none_or(|(_, s)| sim > s) {
            best = Some((declared, sim));
        }
    }
    match best {
        Some((to, similarity)) if similarity >= EDGE_REPAIR_THRESHOLD => EdgeResolution::Repaired {
            to: to.clone(),
            similarity,
        },
        _ => EdgeResolution::Rejected,
    }
}

fn resolve_node_type(
    var: &str,
    node_type: &str,
    schema: &Schema,
) -> Result<String, ExtractionFormatError> {
    if schema.node_types.contains(node_type) {
        return Ok(node_type.to_owned());
    }
    schema
        .node_types
        .iter()
        .find(|t| t.eq_ignore_ascii_case(node_type))
        .cloned()
        .ok_or_else(|| ExtractionFormatError::UnknownNodeType {
            var: var.to_owned(),
            node_type: node_type.to_owned(),
        })
}

fn resolve_term(term: Term, schema: &Schema) -> Result<Term, ExtractionFormatError> {
    match term {
        Term::Variable(v) => {
            let var_type = resolve_node_type(&v.name, &v.var_type, schema)?;
            Ok(Term::Variable(Variable {
                name: v.name,
                var_type,
            }))
        }
        c => Ok(c),
    }
}

fn strip_list_marker(line: &str) -> &str {
    for marker in ["- ", "* ", "\u{2022} "] {
        if let Some(rest) = line.strip_prefix(marker) {
            return rest.trim_start();
        }
    }
    let digits = line.bytes().take_while(u8::is_ascii_digit).count();
    if digits > 0 {
        let rest = &line[digits..];
        if let Some(rest) = rest.strip_prefix(". ").or_else(|| rest.strip_prefix(") ")) {
            return rest.trim_start();
        }
    }
    line
}

fn strip_target_keyword(line: &str) -> Option<&str> {
    let head = line.get(..6)?;
    if !head.eq_ignore_ascii_case("target") {
        return None;
    }
    let rest = &line[6..];
    let rest = rest.strip_prefix(':').unwrap_or(rest);
    if rest.starts_with(|c: char| c.is_whitespace()) || rest.starts_with('?') {
        Some(rest.trim())
    } else {
        None
    }
}

fn parse_target(rest: &str) -> Option<(String, Option<String>)> {
    let body = rest.strip_prefix('?')?;
    match body.split_once(':') {
        Some((name, ty)) => {
            let ty = ty.trim();
            (is_var_name(name) && is_label(ty)).then(|| (name.to_owned(), Some(ty.to_owned())))
        }
        None => is_var_name(body).then(|| (body.to_owned(), None)),
    }
}

fn parse_triplet_line(line: &str) -> Option<(Term, String, Term)> {
    let inner = line.strip_prefix('(')?.strip_suffix(')')?;
    let parts = split_top_level(inner)?;
    let [head, edge, tail] = <[&str; 3]>::try_from(parts).ok()?;
    let edge = edge.trim();
    if !is_label(edge) || edge.starts_with('?') {
        return None;
    }
    Some((
        parse_term(head.trim())?,
        edge.to_owned(),
        parse_term(tail.trim())?,
    ))
}

/// Split on commas outside double-quoted strings. `None` on an unterminated quote.
fn split_top_level(s: &str) -> Option<Vec<&str>> {
    let mut parts = Vec::new();
    let mut start = 0;
    let mut in_quotes = false;
    let mut escaped = false;
    for (i, c) in s.char_indices() {
        if in_quotes {
            match (escaped, c) {
                (true, _) => escaped = false,
                (false, '\\') => escaped = true,
                (false, '"') => in_quotes = false,
                _ => {}
            }
        } else if c == '"' {
            in_quotes = true;
        } else if c == ',' {
            parts.push(&s[start..i]);
            start = i + 1;
        }
    }
    if in_quotes {
        return None;
    }
    parts.push(&s[start..]);
    Some(parts)
}

fn parse_term(s: &str) -> Option<Term> {
    if let Some(body) = s.strip_prefix('?') {
        let (name, ty) = body.split_once(':')?;
        let ty = ty.trim();
        return (is_var_name(name) && is_label(ty)).then(|| Term::var(name, ty));
    }
    let body = s.strip_prefix('"')?;
    let mut out = String::new();
    let mut chars = body.chars();
    loop {
        match chars.next()? {
            '"' => break,
            '\\' => match chars.next()? {
                'n' => out.push('\n'),
                't' => out.push('\t'),
                'r' => out.push('\r'),
                c @ ('"' | '\\') => out.push(c),
                c => {
                    out.push('\\');
                    out.push(c);
                }
            },
            c => out.push(c),
        }
    }
    if chars.next().is_some() || out.trim().is_empty() {
        return None;
    }
    Some(Term::Constant(out))
}

fn is_var_name(s: &str) -> bool {
    let mut chars = s.chars();
    chars
        .next()
        .is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Type labels: non-empty, no surrounding whitespace, none of the grammar's delimiters.
fn is_label(s: &str) -> bool {
    !s.is_empty()
        && s.trim() == s
        && !s.contains(|c: char| matches!(c, ',' | '(' | ')' | '"') || c.is_control())
}
