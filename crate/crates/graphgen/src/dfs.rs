//! DFS-code serialization of graphs and its token form for the sequence
//! model.
//!
//! A graph becomes an ordered list of 5-tuple edges
//! `(t_u, t_v, l_u, l_e, l_v)` where timestamps are depth-first discovery
//! times. Forward edges (`t_u < t_v`) introduce the next unused timestamp;
//! backward edges (`t_u > t_v`) close cycles back to an ancestor. Graphs
//! here are unlabeled, so every label slot holds the single constant symbol;
//! the 5-slot layout is kept so labeled graphs would not reshape the model.
//!
//! The traversal policy is fixed so encoding is deterministic: start at the
//! highest-degree node (ties by smallest id), visit unvisited neighbors in
//! (descending degree, ascending id) order, and emit a node's backward edges
//! in ascending `t_v` order immediately upon arrival, before its forward
//! edges.

use crate::graph::Graph;
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

/// Number of token slots per edge step.
pub const SLOTS: usize = 5;

/// The single node/edge label symbol used for unlabeled graphs.
pub const UNLABELED: usize = 0;

/// Label vocabulary size excluding the end symbol.
pub const LABEL_VOCAB: usize = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("graph is not encodable: {0}")]
    NotEncodable(String),
    #[error("invalid code at position {position}: {reason}")]
    InvalidCode { position: usize, reason: String },
    #[error("empty code: end-of-sequence before any edge")]
    EmptyCode,
    #[error("timestamp {timestamp} exceeds capacity max_nodes={max_nodes}")]
    Capacity { timestamp: usize, max_nodes: usize },
}

/// One DFS edge: discovery timestamps plus label symbols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DfsEdge {
    pub t_u: usize,
    pub t_v: usize,
    pub l_u: usize,
    pub l_e: usize,
    pub l_v: usize,
}

impl DfsEdge {
    pub fn unlabeled(t_u: usize, t_v: usize) -> Self {
        DfsEdge { t_u, t_v, l_u: UNLABELED, l_e: UNLABELED, l_v: UNLABELED }
    }

    pub fn is_forward(&self) -> bool {
        self.t_u < self.t_v
    }
}

/// An ordered list of DFS edges describing a connected graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DfsCode {
    edges: Vec<DfsEdge>,
}

impl DfsCode {
    /// Wraps an edge list after validating the DFS-code invariants.
    pub fn new(edges: Vec<DfsEdge>) -> Result<Self, CodecError> {
        validate_edges(&edges)?;
        Ok(DfsCode { edges })
    }

    pub fn edges(&self) -> &[DfsEdge] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    /// Largest timestamp in the code plus one.
    pub fn node_count(&self) -> usize {
        self.edges.iter().map(|e| e.t_u.max(e.t_v) + 1).max().unwrap_or(0)
    }

    /// Parses the one-edge-per-line text form produced by `Display`.
    pub fn parse_text(text: &str) -> Result<Self, CodecError> {
        let mut edges = Vec::new();
        for (i, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
            let fields: Vec<usize> = line
                .split_whitespace()
                .map(|f| f.parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|e| CodecError::InvalidCode {
                    position: i,
                    reason: format!("unparsable edge line {line:?}: {e}"),
                })?;
            if fields.len() != SLOTS {
                return Err(CodecError::InvalidCode {
                    position: i,
                    reason: format!("expected {SLOTS} fields, got {}", fields.len()),
                });
            }
            edges.push(DfsEdge {
                t_u: fields[0],
                t_v: fields[1],
                l_u: fields[2],
                l_e: fields[3],
                l_v: fields[4],
            });
        }
        DfsCode::new(edges)
    }
}

/// Debug text form: one edge per line, "t_u t_v l_u l_e l_v".
impl fmt::Display for DfsCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.edges.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{} {} {} {} {}", e.t_u, e.t_v, e.l_u, e.l_e, e.l_v)?;
        }
        Ok(())
    }
}

/// Validates the DFS-code invariants by simulating the traversal stack.
fn validate_edges(edges: &[DfsEdge]) -> Result<(), CodecError> {
    if edges.is_empty() {
        return Err(CodecError::EmptyCode);
    }
    let first = &edges[0];
    if (first.t_u, first.t_v) != (0, 1) {
        return Err(CodecError::InvalidCode {
            position: 0,
            reason: format!("first edge must be (0, 1), got ({}, {})", first.t_u, first.t_v),
        });
    }
    // rightmost DFS path; backward edges always anchor at the current position
    let mut stack = vec![0usize, 1];
    let mut max_seen = 1usize;
    let mut seen_pairs = vec![(0usize, 1usize)];
    for (position, e) in edges.iter().enumerate().skip(1) {
        if e.t_u == e.t_v {
            return Err(CodecError::InvalidCode {
                position,
                reason: format!("self-loop on timestamp {}", e.t_u),
            });
        }
        if e.is_forward() {
            if e.t_v != max_seen + 1 {
                return Err(CodecError::InvalidCode {
                    position,
                    reason: format!(
                        "forward edge must introduce timestamp {}, got {}",
                        max_seen + 1,
                        e.t_v
                    ),
                });
            }
            // backtrack to the anchor; it must lie on the rightmost path
            while let Some(&top) = stack.last() {
                if top == e.t_u {
                    break;
                }
                stack.pop();
            }
            if stack.is_empty() {
                return Err(CodecError::InvalidCode {
                    position,
                    reason: format!("forward edge anchored at unreachable timestamp {}", e.t_u),
                });
            }
            stack.push(e.t_v);
            max_seen = e.t_v;
        } else {
            let &current = stack.last().expect("stack never empties on backward edges");
            if e.t_u != current {
                return Err(CodecError::InvalidCode {
                    position,
                    reason: format!(
                        "backward edge from {} but current position is {}",
                        e.t_u, current
                    ),
                });
            }
            if e.t_v > max_seen {
                return Err(CodecError::InvalidCode {
                    position,
                    reason: format!("backward edge references unseen timestamp {}", e.t_v),
                });
            }
        }
        let pair = (e.t_u.min(e.t_v), e.t_u.max(e.t_v));
        if seen_pairs.contains(&pair) {
            return Err(CodecError::InvalidCode {
                position,
                reason: format!("duplicate edge ({}, {})", pair.0, pair.1),
            });
        }
        seen_pairs.push(pair);
    }
    Ok(())
}

/// Encodes a connected graph as a DFS code under the fixed traversal policy.
pub fn encode(g: &Graph) -> Result<DfsCode, CodecError> {
    if g.edge_count() == 0 {
        return Err(CodecError::NotEncodable("graph has no edges".to_string()));
    }
    if !g.is_connected() {
        return Err(CodecError::NotEncodable("graph is disconnected".to_string()));
    }
    let adj = g.adjacency();
    let deg = g.degrees();
    let start = (0..g.node_count())
        .max_by(|&a, &b| deg[a].cmp(&deg[b]).then(b.cmp(&a)))
        .expect("non-empty graph");

    let n = g.node_count();
    let mut time = vec![usize::MAX; n];
    let mut next_t = 0usize;
    let mut used = std::collections::HashSet::with_capacity(g.edge_count());
    let mut edges = Vec::with_capacity(g.edge_count());

    // neighbor visit order: descending degree, ascending id
    let visit_order = |u: usize| -> Vec<usize> {
        let mut nbrs = adj[u].clone();
        nbrs.sort_by(|&a, &b| deg[b].cmp(&deg[a]).then(a.cmp(&b)));
        nbrs
    };

    // on arrival: assign timestamp, emit pending backward edges in ascending t_v
    let arrive = |u: usize,
                  time: &mut Vec<usize>,
                  next_t: &mut usize,
                  used: &mut std::collections::HashSet<(usize, usize)>,
                  edges: &mut Vec<DfsEdge>| {
        time[u] = *next_t;
        *next_t += 1;
        let mut back: Vec<usize> = adj[u]
            .iter()
            .copied()
            .filter(|&w| {
                time[w] != usize::MAX && !used.contains(&(u.min(w), u.max(w)))
            })
            .collect();
        back.sort_by_key(|&w| time[w]);
        for w in back {
            used.insert((u.min(w), u.max(w)));
            edges.push(DfsEdge::unlabeled(time[u], time[w]));
        }
    };

    arrive(start, &mut time, &mut next_t, &mut used, &mut edges);
    let mut stack: Vec<(usize, Vec<usize>, usize)> = vec![(start, visit_order(start), 0)];
    while let Some((u, order, idx)) = stack.last_mut() {
        let u = *u;
        let mut advanced = false;
        while *idx < order.len() {
            let w = order[*idx];
            *idx += 1;
            if time[w] == usize::MAX {
                used.insert((u.min(w), u.max(w)));
                edges.push(DfsEdge::unlabeled(time[u], next_t));
                arrive(w, &mut time, &mut next_t, &mut used, &mut edges);
                stack.push((w, visit_order(w), 0));
                advanced = true;
                break;
            }
        }
        if !advanced {
            stack.pop();
        }
    }

    debug_assert_eq!(edges.len(), g.edge_count());
    DfsCode::new(edges)
}

/// Rebuilds the graph named by a DFS code: nodes are the distinct
/// timestamps, edges the (t_u, t_v) pairs.
pub fn decode(code: &DfsCode) -> Result<Graph, CodecError> {
    // DfsCode construction already validated the invariants
    let pairs = code.edges().iter().map(|e| (e.t_u, e.t_v));
    Graph::new(code.node_count(), pairs).map_err(|e| CodecError::InvalidCode {
        position: 0,
        reason: e.to_string(),
    })
}

/// Tokenized DFS code: per-step slot indices plus one terminal
/// end-of-sequence step.
///
/// Timestamp slots index into a vocabulary of size `max_nodes + 1`
/// (timestamps `0..max_nodes`, then the end symbol). Label slots index into
/// the label vocabulary plus its end symbol.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    steps: Vec<[usize; SLOTS]>,
    max_nodes: usize,
}

impl TokenSequence {
    /// Builds a sequence from raw steps; the caller vouches slot indices are
    /// within their vocabularies.
    pub fn from_steps(steps: Vec<[usize; SLOTS]>, max_nodes: usize) -> Self {
        TokenSequence { steps, max_nodes }
    }

    /// Steps including the terminal step (when present).
    pub fn steps(&self) -> &[[usize; SLOTS]] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn max_nodes(&self) -> usize {
        self.max_nodes
    }

    /// Per-slot vocabulary sizes (including each slot's end symbol).
    pub fn vocab_sizes(max_nodes: usize) -> [usize; SLOTS] {
        let ts = max_nodes + 1;
        let lab = LABEL_VOCAB + 1;
        [ts, ts, lab, lab, lab]
    }

    /// The end symbol index for a slot.
    pub fn end_symbol(max_nodes: usize, slot: usize) -> usize {
        Self::vocab_sizes(max_nodes)[slot] - 1
    }

    /// The terminal step (every slot at its end symbol).
    pub fn end_step(max_nodes: usize) -> [usize; SLOTS] {
        let mut step = [0; SLOTS];
        for (slot, s) in step.iter_mut().enumerate() {
            *s = Self::end_symbol(max_nodes, slot);
        }
        step
    }
}

/// Maps a DFS code to its token form, appending the terminal step.
pub fn to_tokens(code: &DfsCode, max_nodes: usize) -> Result<TokenSequence, CodecError> {
    let mut steps = Vec::with_capacity(code.len() + 1);
    for e in code.edges() {
        for t in [e.t_u, e.t_v] {
            if t >= max_nodes {
                return Err(CodecError::Capacity { timestamp: t, max_nodes });
            }
        }
        steps.push([e.t_u, e.t_v, e.l_u, e.l_e, e.l_v]);
    }
    steps.push(TokenSequence::end_step(max_nodes));
    Ok(TokenSequence::from_steps(steps, max_nodes))
}

/// Truncates at the first end-of-sequence step, maps indices back to DFS
/// edges and validates the code. This is the rejection path for model
/// output.
pub fn from_tokens(seq: &TokenSequence) -> Result<DfsCode, CodecError> {
    let max_nodes = seq.max_nodes();
    let ts_end = TokenSequence::end_symbol(max_nodes, 0);
    let lab_end = TokenSequence::end_symbol(max_nodes, 2);
    let mut edges = Vec::new();
    for (position, step) in seq.steps().iter().enumerate() {
        if step[0] == ts_end {
            // terminal step; everything after is ignored
            return DfsCode::new(edges);
        }
        if step[1] == ts_end {
            return Err(CodecError::InvalidCode {
                position,
                reason: "end symbol in t_v slot of a non-terminal step".to_string(),
            });
        }
        for (slot, &tok) in step.iter().enumerate().skip(2) {
            if tok >= lab_end {
                return Err(CodecError::InvalidCode {
                    position,
                    reason: format!("end or out-of-vocabulary symbol in label slot {slot}"),
                });
            }
        }
        edges.push(DfsEdge {
            t_u: step[0],
            t_v: step[1],
            l_u: step[2],
            l_e: step[3],
            l_v: step[4],
        });
    }
    // no explicit terminal step; treat sequence end as termination
    DfsCode::new(edges)
}
