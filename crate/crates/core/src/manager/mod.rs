//! Turn-level dialogue orchestration: run the encoder and reasoner on each
//! user turn, pick and fill a response template from the terminal node, and
//! track the confirmation state machine of a session.
//!
//! ```text
//! collecting ──query terminal──▶ awaiting_confirmation(q)
//!     ▲                              │ yes ──▶ handed_off
//!     └──── no (reprompt) ───────────┤ other text ──▶ new collecting turn
//!                                    └ no × max_rejections ──▶ closed
//! ```

mod templates;

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{split_words, EncoderError, Vocabulary};
use crate::graph::{EntityId, IntentGraph};
use crate::model::{Model, ModelError};
use crate::reasoner::Trajectory;
use crate::trace::PathTrace;
use crate::training::derive_seed;

pub use templates::{fill_template, slots_of, ResponseTemplate, TemplateKind, TemplateSet};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ManagerError {
    #[error("session is closed")]
    SessionClosed,
    #[error("utterance has no tokens")]
    EmptyUtterance,
    #[error("template {template} needs slot {{{slot}}}")]
    MissingSlot { template: String, slot: String },
    #[error("invalid templates: {0}")]
    Template(String),
    #[error("inference failed: {0}")]
    Inference(String),
}

impl From<ModelError> for ManagerError {
    fn from(e: ModelError) -> Self {
        ManagerError::Inference(e.to_string())
    }
}

/// Words that answer a confirmation; matched against the first word of the
/// reply.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Lexicon {
    pub affirm: Vec<String>,
    pub negate: Vec<String>,
}

impl Default for Lexicon {
    fn default() -> Self {
        let words = |w: &[&str]| w.iter().map(|s| s.to_string()).collect();
        Self {
            affirm: words(&["yes", "yeah", "correct"]),
            negate: words(&["no", "nope", "wrong"]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ManagerConfig {
    /// Path horizon (T).
    pub horizon: usize,
    /// Sampled candidates per turn (K).
    pub k: usize,
    /// Global seed of the per-session random streams.
    pub seed: u64,
    /// Rejected confirmations before the session closes.
    pub max_rejections: usize,
    pub lexicon: Lexicon,
}

impl Default for ManagerConfig {
    fn default() -> Self {
        Self {
            horizon: 5,
            k: 20,
            seed: 0,
            max_rejections: 3,
            lexicon: Lexicon::default(),
        }
    }
}

/// Frozen state shared by every session.
#[derive(Clone, Debug)]
pub struct Engine {
    pub graph: IntentGraph,
    pub model: Model,
    pub vocab: Vocabulary,
    pub templates: TemplateSet,
    pub config: ManagerConfig,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum Phase {
    Collecting,
    AwaitingConfirmation { query: String },
    HandedOff,
    Closed,
}

impl Phase {
    pub fn is_open(&self) -> bool {
        matches!(self, Phase::Collecting | Phase::AwaitingConfirmation { .. })
    }

    pub fn label(&self) -> &'static str {
        match self {
            Phase::Collecting => "collecting",
            Phase::AwaitingConfirmation { .. } => "awaiting_confirmation",
            Phase::HandedOff => "handed_off",
            Phase::Closed => "closed",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exchange {
    pub user: String,
    pub response: String,
    pub template: TemplateKind,
    pub phase: Phase,
}

#[derive(Clone, Debug)]
pub struct TurnOutcome {
    pub response: String,
    pub template: TemplateKind,
    /// Chosen path of this turn, or of the last reasoning turn for replies to
    /// a confirmation.
    pub trajectory: Trajectory,
    /// `root`, `key`, `feature` or `query`.
    pub terminal_kind: String,
    pub phase: Phase,
    pub trace: PathTrace,
}

#[derive(Clone, Debug)]
pub struct Session {
    pub id: String,
    pub history: Vec<Exchange>,
    /// One per user turn.
    pub traces: Vec<PathTrace>,
    pub phase: Phase,
    /// Token ids of the turns fed to the encoder.
    context: Vec<Vec<usize>>,
    last_path: Option<Trajectory>,
    rejections: usize,
}

/// FNV-1a over the bytes of `s`.
fn stable_hash(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3))
}

impl Session {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            history: Vec::new(),
            traces: Vec::new(),
            phase: Phase::Collecting,
            context: Vec::new(),
            last_path: None,
            rejections: 0,
        }
    }

    pub fn turns(&self) -> usize {
        self.history.len()
    }

    /// Handles one user utterance according to the current phase.
    pub fn handle(&mut self, engine: &Engine, text: &str) -> Result<TurnOutcome, ManagerError> {
        match &self.phase {
            Phase::Collecting => self.respond(engine, text),
            Phase::AwaitingConfirmation { .. } => self.confirm(engine, text),
            Phase::HandedOff | Phase::Closed => Err(ManagerError::SessionClosed),
        }
    }

    /// A reasoning turn: encode the dialogue so far, infer a path and answer
    /// from its terminal.
    pub fn respond(&mut self, engine: &Engine, text: &str) -> Result<TurnOutcome, ManagerError> {
        if !self.phase.is_open() {
            return Err(ManagerError::SessionClosed);
        }
        let tokens = engine.vocab.tokenize(text).map_err(|e| match e {
            EncoderError::EmptyUtterance => ManagerError::EmptyUtterance,
            other => ManagerError::Inference(other.to_string()),
        })?;
        let g = &engine.graph;
        let turn = self.turns();
        let mut turns = self.context.clone();
        turns.push(tokens);
        let ctx = engine.model.contexts(&turns)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(engine.config.seed, stable_hash(&self.id), turn as u64));
        let inf = engine
            .model
            .infer(g, ctx.last().expect("one context per turn"), engine.config.horizon, engine.config.k, &mut rng)?;
        let path = inf.best().clone();
        let terminal = path.terminal();

        let (kind, preferred, slots, phase) = if let Some(meta) = g.query_meta(terminal) {
            let slots = BTreeMap::from([("query_text".to_string(), meta.text.clone())]);
            let phase = Phase::AwaitingConfirmation {
                query: g.entity_key(terminal).to_string(),
            };
            (TemplateKind::ConfirmQuery, Some(meta.template_id.as_str()), slots, phase)
        } else if let Some(missing) = g.kind(terminal).is_key().then(|| missing_kind(g, &path)).flatten() {
            let slots = BTreeMap::from([("key_kind".to_string(), missing)]);
            (TemplateKind::ElicitKey, None, slots, Phase::Collecting)
        } else {
            (TemplateKind::Fallback, None, BTreeMap::new(), Phase::Collecting)
        };
        let response = fill_template(engine.templates.select(kind, preferred), &slots)?;

        self.context = turns;
        self.phase = phase;
        let trace = PathTrace::from_inference(g, &inf, turn, &response);
        self.last_path = Some(path.clone());
        Ok(self.record(text, response, kind, path, trace))
    }

    /// A reply while awaiting confirmation. Affirmation hands off, negation
    /// reprompts for the deepest key kind of the rejected query (or closes the
    /// session after `max_rejections`), anything else is a new reasoning turn.
    pub fn confirm(&mut self, engine: &Engine, text: &str) -> Result<TurnOutcome, ManagerError> {
        let query = match &self.phase {
            Phase::AwaitingConfirmation { query } => query.clone(),
            Phase::Collecting => return self.respond(engine, text),
            Phase::HandedOff | Phase::Closed => return Err(ManagerError::SessionClosed),
        };
        let words = split_words(text);
        let first = words.first().ok_or(ManagerError::EmptyUtterance)?;
        let lex = &engine.config.lexicon;
        let g = &engine.graph;
        let q = g.entity(&query).expect("awaited query is in the graph");
        let meta = g.query_meta(q).expect("awaited entity is a query");

        let (kind, slots, phase) = if lex.affirm.contains(first) {
            let slots = BTreeMap::from([("query_text".to_string(), meta.text.clone())]);
            (TemplateKind::Handoff, slots, Phase::HandedOff)
        } else if lex.negate.contains(first) {
            self.rejections += 1;
            if self.rejections >= engine.config.max_rejections {
                (TemplateKind::Fallback, BTreeMap::new(), Phase::Closed)
            } else {
                let deepest = deepest_kind(g, &meta.key_nodes);
                match deepest {
                    Some(k) => (
                        TemplateKind::ElicitKey,
                        BTreeMap::from([("key_kind".to_string(), k)]),
                        Phase::Collecting,
                    ),
                    None => (TemplateKind::Fallback, BTreeMap::new(), Phase::Collecting),
                }
            }
        } else {
            self.phase = Phase::Collecting;
            return self.respond(engine, text);
        };
        let response = fill_template(engine.templates.select(kind, None), &slots)?;
        self.phase = phase;
        let path = self.last_path.clone().expect("confirmation follows a reasoning turn");
        let mut trace = self.traces.last().expect("confirmation follows a reasoning turn").clone();
        trace.turn = self.turns();
        trace.response = response.clone();
        Ok(self.record(text, response, kind, path, trace))
    }

    fn record(
        &mut self,
        user: &str,
        response: String,
        template: TemplateKind,
        trajectory: Trajectory,
        trace: PathTrace,
    ) -> TurnOutcome {
        self.history.push(Exchange {
            user: user.to_string(),
            response: response.clone(),
            template,
            phase: self.phase.clone(),
        });
        self.traces.push(trace.clone());
        TurnOutcome {
            response,
            template,
            terminal_kind: trace.terminal_kind.clone(),
            trajectory,
            phase: self.phase.clone(),
            trace,
        }
    }
}

/// First kind in the graph's kind order that some query consistent with the
/// visited key nodes requires and the path has not visited.
pub fn missing_kind(g: &IntentGraph, path: &Trajectory) -> Option<String> {
    let visited: BTreeSet<EntityId> = path.entities.iter().copied().filter(|e| g.kind(*e).is_key()).collect();
    let have: BTreeSet<&str> = visited.iter().filter_map(|e| g.kind(*e).feature_kind()).collect();
    let required: BTreeSet<&str> = g
        .queries()
        .filter(|(_, m)| visited.is_subset(&m.key_nodes))
        .flat_map(|(_, m)| m.key_nodes.iter().filter_map(|e| g.kind(*e).feature_kind()))
        .collect();
    g.kind_order()
        .iter()
        .find(|k| required.contains(k.as_str()) && !have.contains(k.as_str()))
        .cloned()
}

/// Kind of `keys` that comes last in the graph's kind order.
fn deepest_kind(g: &IntentGraph, keys: &BTreeSet<EntityId>) -> Option<String> {
    let kinds: BTreeSet<&str> = keys.iter().filter_map(|e| g.kind(*e).feature_kind()).collect();
    g.kind_order().iter().rev().find(|k| kinds.contains(k.as_str())).cloned()
}
