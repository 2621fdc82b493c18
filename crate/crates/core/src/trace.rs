//! Exported per-turn record of a reasoning path, consumed by visualization
//! clients.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::graph::IntentGraph;
use crate::reasoner::{action_space, Inference, Trajectory};

pub const TRACE_SCHEMA: &str = "trace/1";
/// Actions listed per step, most probable first.
pub const TOP_K: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceNode {
    pub id: String,
    /// `root`, `key`, `feature` or `query`.
    pub kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature_kind: Option<String>,
    pub is_key: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEdge {
    pub source: String,
    pub target: String,
    /// `None` for STAY.
    pub relation: Option<String>,
    pub is_stay: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionProb {
    pub target: String,
    pub relation: Option<String>,
    pub is_stay: bool,
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    /// Probability of the action taken.
    pub taken: f64,
    /// At most [`TOP_K`] actions, by descending probability.
    pub top: Vec<ActionProb>,
}

/// Sampled candidates grouped by terminal node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateSummary {
    pub terminal: String,
    pub terminal_kind: String,
    pub count: usize,
    /// Best path score among the grouped candidates.
    pub best_score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathTrace {
    pub schema: String,
    pub turn: usize,
    pub nodes: Vec<TraceNode>,
    pub edges: Vec<TraceEdge>,
    pub steps: Vec<TraceStep>,
    pub terminal_kind: String,
    /// Whether this path is the one the response was built from.
    pub chosen: bool,
    pub score: f64,
    pub response: String,
    #[serde(default)]
    pub candidates: Vec<CandidateSummary>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TraceError {
    #[error("unsupported trace schema {0:?}")]
    Schema(String),
    #[error("{nodes} nodes for {edges} edges")]
    Length { nodes: usize, edges: usize },
    #[error("trace does not start at the root")]
    NotRooted,
    #[error("unknown {0}")]
    Unknown(String),
    #[error("hop {0} is not an edge of the graph")]
    NotAnEdge(usize),
    #[error("probability {0} outside [0, 1]")]
    Probability(f64),
}

fn node(g: &IntentGraph, e: crate::graph::EntityId) -> TraceNode {
    let kind = g.kind(e);
    TraceNode {
        id: g.entity_key(e).to_string(),
        kind: kind.label().to_string(),
        feature_kind: kind.feature_kind().map(str::to_string),
        is_key: kind.is_key(),
    }
}

impl PathTrace {
    /// Trace of one trajectory without candidate summary.
    pub fn from_trajectory(g: &IntentGraph, t: &Trajectory, turn: usize, chosen: bool, response: &str) -> Self {
        let nodes = t.entities.iter().map(|e| node(g, *e)).collect();
        let mut edges = Vec::with_capacity(t.len());
        let mut steps = Vec::with_capacity(t.len());
        for (i, a) in t.actions.iter().enumerate() {
            let source = t.entities[i];
            edges.push(TraceEdge {
                source: g.entity_key(source).to_string(),
                target: g.entity_key(a.target).to_string(),
                relation: a.relation.map(|r| g.relation_key(r).to_string()),
                is_stay: a.is_stay(),
            });
            let probs = &t.step_probs[i];
            let space = action_space(g, source).unwrap_or_default();
            let mut order: Vec<usize> = (0..probs.len().min(space.len())).collect();
            order.sort_by(|&x, &y| probs[y].total_cmp(&probs[x]).then(x.cmp(&y)));
            let top = order
                .into_iter()
                .take(TOP_K)
                .map(|j| ActionProb {
                    target: g.entity_key(space[j].target).to_string(),
                    relation: space[j].relation.map(|r| g.relation_key(r).to_string()),
                    is_stay: space[j].is_stay(),
                    prob: probs[j],
                })
                .collect();
            steps.push(TraceStep {
                taken: probs[t.action_indices[i]],
                top,
            });
        }
        PathTrace {
            schema: TRACE_SCHEMA.into(),
            turn,
            nodes,
            edges,
            steps,
            terminal_kind: g.kind(t.terminal()).label().to_string(),
            chosen,
            score: t.score(),
            response: response.to_string(),
            candidates: Vec::new(),
        }
    }

    /// Trace of the chosen trajectory of `inf`, with its candidates grouped by
    /// terminal in first-seen order.
    pub fn from_inference(g: &IntentGraph, inf: &Inference, turn: usize, response: &str) -> Self {
        let mut trace = Self::from_trajectory(g, inf.best(), turn, true, response);
        let mut groups: BTreeMap<usize, CandidateSummary> = BTreeMap::new();
        let mut first_seen: Vec<crate::graph::EntityId> = Vec::new();
        for c in &inf.candidates {
            let e = c.terminal();
            let entry = groups.entry(e.index()).or_insert_with(|| {
                first_seen.push(e);
                CandidateSummary {
                    terminal: g.entity_key(e).to_string(),
                    terminal_kind: g.kind(e).label().to_string(),
                    count: 0,
                    best_score: f64::NEG_INFINITY,
                }
            });
            entry.count += 1;
            entry.best_score = entry.best_score.max(c.score());
        }
        trace.candidates = first_seen
            .into_iter()
            .map(|e| groups.remove(&e.index()).expect("grouped"))
            .collect();
        trace
    }

    pub fn terminal(&self) -> &str {
        &self.nodes.last().expect("nonempty").id
    }

    /// Checks the schema tag, `nodes = edges + 1`, that the walk starts at the
    /// root of `g`, that each hop is an edge of `g` or a STAY, and that every
    /// probability lies in `[0, 1]`.
    pub fn validate(&self, g: &IntentGraph) -> Result<(), TraceError> {
        if self.schema != TRACE_SCHEMA {
            return Err(TraceError::Schema(self.schema.clone()));
        }
        if self.nodes.len() != self.edges.len() + 1 || self.steps.len() != self.edges.len() {
            return Err(TraceError::Length {
                nodes: self.nodes.len(),
                edges: self.edges.len(),
            });
        }
        if self.nodes[0].id != g.entity_key(g.root()) {
            return Err(TraceError::NotRooted);
        }
        let entity = |id: &str| g.entity(id).ok_or_else(|| TraceError::Unknown(format!("entity {id}")));
        for (i, e) in self.edges.iter().enumerate() {
            let (s, o) = (entity(&e.source)?, entity(&e.target)?);
            if e.source != self.nodes[i].id || e.target != self.nodes[i + 1].id {
                return Err(TraceError::NotAnEdge(i));
            }
            let ok = match (&e.relation, e.is_stay) {
                (None, true) => s == o && !g.kind(s).is_query(),
                (Some(r), false) => {
                    let r = g.relation(r).ok_or_else(|| TraceError::Unknown(format!("relation {r}")))?;
                    g.has_edge(s, r, o)
                }
                _ => false,
            };
            if !ok {
                return Err(TraceError::NotAnEdge(i));
            }
        }
        for p in self.steps.iter().flat_map(|s| std::iter::once(s.taken).chain(s.top.iter().map(|a| a.prob))) {
            if !(0.0..=1.0).contains(&p) {
                return Err(TraceError::Probability(p));
            }
        }
        Ok(())
    }
}
