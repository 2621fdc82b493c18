//! Path reasoning over the intent graph: the action space, the history LSTM,
//! the policy network, and rollout/search over a shared prefix tree.
//!
//! The policy scores actions as
//!
//! ```text
//! logits = A_t · W2 · relu(W1 · [h_t ; e_t ; c_i])
//! ```
//!
//! where each row of `A_t` is `[relation ; target entity]`. Every non-query
//! node also offers a virtual STAY action with its own relation embedding.

mod search;
mod tree;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{EntityId, GraphError, IntentGraph, RelationId};
use crate::numeric::params::{init_embedding, init_weight};
use crate::numeric::{LstmCell, LstmState, NumericError, ParamId, ParamStore, Tape, Tensor, Var};

pub use search::{
    exhaustive_best_path, greedy_path, infer_path, rollout, select_best, tier_of, ExhaustiveResult, Inference,
    Trajectory, MAX_EXHAUSTIVE_PATHS,
};
pub use tree::{NodeId, PathTree};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ReasonerError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error("no actions available at a query node")]
    TerminalState,
    #[error("{0} paths exceed the exhaustive search limit")]
    TooLarge(usize),
    #[error("invalid search setting: {0}")]
    InvalidSetting(String),
    #[error("policy sized for {policy_entities} entities / {policy_relations} relations, graph has {graph_entities} / {graph_relations}")]
    GraphMismatch {
        policy_entities: usize,
        policy_relations: usize,
        graph_entities: usize,
        graph_relations: usize,
    },
}

/// One move of the walker. `relation == None` is the virtual STAY self-loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Action {
    pub relation: Option<RelationId>,
    pub target: EntityId,
}

impl Action {
    pub fn stay(at: EntityId) -> Self {
        Action {
            relation: None,
            target: at,
        }
    }

    pub fn is_stay(&self) -> bool {
        self.relation.is_none()
    }
}

/// Out-edges of `e` in adjacency order followed by STAY; empty at query nodes.
pub fn action_space(g: &IntentGraph, e: EntityId) -> Result<Vec<Action>, ReasonerError> {
    let edges = g.out_edges(e)?;
    if g.kind(e).is_query() {
        return Ok(Vec::new());
    }
    let mut actions: Vec<Action> = edges
        .iter()
        .map(|&(r, t)| Action {
            relation: Some(r),
            target: t,
        })
        .collect();
    actions.push(Action::stay(e));
    Ok(actions)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub d_e: usize,
    pub d_r: usize,
    pub d_hist: usize,
    pub d_mlp: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            d_e: 32,
            d_r: 32,
            d_hist: 64,
            d_mlp: 64,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Policy {
    pub config: PolicyConfig,
    pub n_entities: usize,
    pub n_relations: usize,
    pub d_ctx: usize,
    /// `[n_entities, d_e]`.
    pub ent_emb: ParamId,
    /// `[n_relations + 1, d_r]`; the last row is STAY.
    pub rel_emb: ParamId,
    /// Action embedding fed to the LSTM before the first hop.
    pub start: ParamId,
    pub lstm: LstmCell,
    /// `[d_mlp, d_hist + d_e + d_ctx]`.
    pub w1: ParamId,
    /// `[d_r + d_e, d_mlp]`.
    pub w2: ParamId,
}

impl Policy {
    /// Registers `pol.*` parameters sized for `graph`.
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        graph: &IntentGraph,
        d_ctx: usize,
        config: PolicyConfig,
        rng: &mut R,
    ) -> Result<Self, ReasonerError> {
        let PolicyConfig { d_e, d_r, d_hist, d_mlp } = config;
        let d_a = d_r + d_e;
        let (n_entities, n_relations) = (graph.len(), graph.num_relations());
        let ent_emb = store.add("pol.ent_emb", init_embedding(rng, n_entities, d_e))?;
        let rel_emb = store.add("pol.rel_emb", init_embedding(rng, n_relations + 1, d_r))?;
        let start = {
            let t = init_embedding(rng, 1, d_a);
            store.add("pol.start", Tensor::vector(t.into_data()))?
        };
        let lstm = LstmCell::register(store, "pol.lstm", d_a, d_hist, rng)?;
        let w1 = store.add("pol.w1", init_weight(rng, d_mlp, d_hist + d_e + d_ctx))?;
        let w2 = store.add("pol.w2", init_weight(rng, d_a, d_mlp))?;
        Ok(Self {
            config,
            n_entities,
            n_relations,
            d_ctx,
            ent_emb,
            rel_emb,
            start,
            lstm,
            w1,
            w2,
        })
    }

    pub fn check_graph(&self, g: &IntentGraph) -> Result<(), ReasonerError> {
        if g.len() != self.n_entities || g.num_relations() != self.n_relations {
            return Err(ReasonerError::GraphMismatch {
                policy_entities: self.n_entities,
                policy_relations: self.n_relations,
                graph_entities: g.len(),
                graph_relations: g.num_relations(),
            });
        }
        Ok(())
    }

    fn relation_row(&self, a: &Action) -> usize {
        a.relation.map_or(self.n_relations, RelationId::index)
    }

    /// `A_t`: one `[relation ; target]` row per action.
    pub fn action_matrix(&self, tape: &mut Tape, actions: &[Action]) -> Result<Var, ReasonerError> {
        if actions.is_empty() {
            return Err(ReasonerError::TerminalState);
        }
        let rel = tape.param(self.rel_emb)?;
        let ent = tape.param(self.ent_emb)?;
        let r_idx: Vec<usize> = actions.iter().map(|a| self.relation_row(a)).collect();
        let e_idx: Vec<usize> = actions.iter().map(|a| a.target.index()).collect();
        let r = tape.gather_rows(rel, &r_idx)?;
        let e = tape.gather_rows(ent, &e_idx)?;
        Ok(tape.concat_cols(&[r, e])?)
    }

    /// `h_1 = LSTM(0, START)`.
    pub fn start_state(&self, tape: &mut Tape) -> Result<LstmState, ReasonerError> {
        let zero = self.lstm.zero_state(tape);
        let start = tape.param(self.start)?;
        Ok(self.lstm.step(tape, start, zero)?)
    }

    /// One history step with input `a_prev_emb` (a row of `A_t`).
    pub fn encode_history(
        &self,
        tape: &mut Tape,
        state: LstmState,
        a_prev_emb: Var,
    ) -> Result<LstmState, ReasonerError> {
        Ok(self.lstm.step(tape, a_prev_emb, state)?)
    }

    /// Log-probabilities over the rows of `a_mat`.
    pub fn log_distribution(
        &self,
        tape: &mut Tape,
        h: Var,
        entity: EntityId,
        ctx: Var,
        a_mat: Var,
    ) -> Result<Var, ReasonerError> {
        let ent = tape.param(self.ent_emb)?;
        let e = tape.row(ent, entity.index())?;
        let x = tape.concat(&[h, e, ctx])?;
        let w1 = tape.param(self.w1)?;
        let w2 = tape.param(self.w2)?;
        let hidden = tape.matvec(w1, x)?;
        let hidden = tape.relu(hidden);
        let query = tape.matvec(w2, hidden)?;
        let logits = tape.matvec(a_mat, query)?;
        Ok(tape.log_softmax(logits)?)
    }

    /// Action probabilities at `entity` given history `h` and context `ctx`.
    pub fn policy_distribution(
        &self,
        tape: &mut Tape,
        g: &IntentGraph,
        entity: EntityId,
        h: Var,
        ctx: Var,
    ) -> Result<(Vec<Action>, Vec<f64>), ReasonerError> {
        let actions = action_space(g, entity)?;
        let a_mat = self.action_matrix(tape, &actions)?;
        let logp = self.log_distribution(tape, h, entity, ctx, a_mat)?;
        let probs = tape.value(logp).data().iter().map(|l| l.exp()).collect();
        Ok((actions, probs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{synthesize_graph, GeneratorSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn fixture(seed: u64) -> (IntentGraph, ParamStore, Policy) {
        let g = synthesize_graph(&GeneratorSpec::new(3, 3, 6, 1), seed).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = Policy::register(&mut store, &g, 8, PolicyConfig::default(), &mut rng).unwrap();
        (g, store, p)
    }

    fn ctx(tape: &mut Tape, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        tape.constant(Tensor::vector((0..8).map(|_| rng.random_range(-1.0..1.0)).collect()))
    }

    #[test]
    fn action_space_counts() {
        let (g, _, _) = fixture(1);
        let (q, _) = g.queries().next().unwrap();
        assert!(action_space(&g, q).unwrap().is_empty());
        for e in g.entities().filter(|e| !g.kind(*e).is_query()) {
            let a = action_space(&g, e).unwrap();
            assert_eq!(a.len(), g.out_edges(e).unwrap().len() + 1);
            assert!(a.last().unwrap().is_stay());
        }
    }

    #[test]
    fn action_rows_are_table_lookups() {
        let (g, store, p) = fixture(2);
        let mut tape = Tape::new(&store);
        let actions = action_space(&g, g.root()).unwrap();
        let m = p.action_matrix(&mut tape, &actions).unwrap();
        let m = tape.value(m).clone();
        let (rel, ent) = (store.value(p.rel_emb), store.value(p.ent_emb));
        for (i, a) in actions.iter().enumerate() {
            let r = a.relation.map_or(g.num_relations(), |r| r.index());
            let mut expect = rel.row(r).to_vec();
            expect.extend_from_slice(ent.row(a.target.index()));
            assert_eq!(m.row(i), expect.as_slice());
        }
    }

    #[test]
    fn history_is_bounded_and_action_sensitive() {
        let (g, store, p) = fixture(3);
        let mut tape = Tape::new(&store);
        let h1 = p.start_state(&mut tape).unwrap();
        let again = p.start_state(&mut tape).unwrap();
        assert_eq!(tape.value(h1.h), tape.value(again.h));
        let actions = action_space(&g, g.root()).unwrap();
        let m = p.action_matrix(&mut tape, &actions).unwrap();
        let (r0, r1) = (tape.row(m, 0).unwrap(), tape.row(m, 1).unwrap());
        let a = p.encode_history(&mut tape, h1, r0).unwrap();
        let b = p.encode_history(&mut tape, h1, r1).unwrap();
        assert_ne!(tape.value(a.h), tape.value(b.h));
        assert!(tape.value(a.h).max_abs() < 1.0);
    }

    #[test]
    fn zero_mlp_gives_uniform() {
        let (g, mut store, p) = fixture(4);
        for w in [p.w1, p.w2] {
            let shape = store.value(w).shape().to_vec();
            store.set_value(w, Tensor::zeros(&shape)).unwrap();
        }
        let mut tape = Tape::new(&store);
        let h = p.start_state(&mut tape).unwrap().h;
        let c = ctx(&mut tape, 0);
        let (actions, probs) = p.policy_distribution(&mut tape, &g, g.root(), h, c).unwrap();
        for pr in &probs {
            assert!((pr - 1.0 / actions.len() as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn distribution_sums_to_one_and_depends_on_context() {
        let (g, store, p) = fixture(5);
        let mut tape = Tape::new(&store);
        let h = p.start_state(&mut tape).unwrap().h;
        let (c1, c2) = (ctx(&mut tape, 1), ctx(&mut tape, 2));
        let (_, a) = p.policy_distribution(&mut tape, &g, g.root(), h, c1).unwrap();
        let (_, b) = p.policy_distribution(&mut tape, &g, g.root(), h, c2).unwrap();
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_ne!(a, b);
    }

    #[test]
    fn equal_logit_shift_leaves_distribution_unchanged() {
        // Adding u to every row of A_t shifts every logit by u·v.
        let (g, store, p) = fixture(6);
        let mut tape = Tape::new(&store);
        let h = p.start_state(&mut tape).unwrap().h;
        let c = ctx(&mut tape, 3);
        let actions = action_space(&g, g.root()).unwrap();
        let m = p.action_matrix(&mut tape, &actions).unwrap();
        let base = p.log_distribution(&mut tape, h, g.root(), c, m).unwrap();
        let (n, d) = tape.value(m).dims2().unwrap();
        let shift: Vec<f64> = (0..d).map(|j| (j as f64 * 0.37).sin()).collect();
        let mut shifted = tape.value(m).clone();
        for i in 0..n {
            for j in 0..d {
                shifted.data_mut()[i * d + j] += shift[j];
            }
        }
        let sm = tape.constant(shifted);
        let moved = p.log_distribution(&mut tape, h, g.root(), c, sm).unwrap();
        for (a, b) in tape.value(base).data().iter().zip(tape.value(moved).data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn terminal_state_has_no_distribution() {
        let (g, store, p) = fixture(7);
        let mut tape = Tape::new(&store);
        let h = p.start_state(&mut tape).unwrap().h;
        let c = ctx(&mut tape, 0);
        let (q, _) = g.queries().next().unwrap();
        assert!(matches!(
            p.policy_distribution(&mut tape, &g, q, h, c),
            Err(ReasonerError::TerminalState)
        ));
    }
}
