use std::cmp::Ordering;
use std::collections::HashMap;

use rand::Rng;

use crate::graph::{EntityId, IntentGraph};
use crate::numeric::Tape;

use super::tree::{NodeId, PathTree};
use super::{action_space, Action, ReasonerError};

/// Guard on the number of complete episodes [`exhaustive_best_path`] scores.
pub const MAX_EXHAUSTIVE_PATHS: usize = 100_000;

/// One episode: `entities[0]` is the root and `entities[t + 1]` is reached by
/// `actions[t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub entities: Vec<EntityId>,
    pub actions: Vec<Action>,
    pub action_indices: Vec<usize>,
    pub log_probs: Vec<f64>,
    /// Full action distribution at each step.
    pub step_probs: Vec<Vec<f64>>,
    /// Tree nodes along the walk, aligned with `entities`.
    pub nodes: Vec<NodeId>,
}

impl Trajectory {
    pub fn terminal(&self) -> EntityId {
        *self.entities.last().expect("trajectory starts at the root")
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Sum of step log-probabilities in path order.
    pub fn score(&self) -> f64 {
        self.log_probs.iter().fold(0.0, |acc, l| acc + l)
    }
}

impl PathTree<'_> {
    /// Materializes the walk from the root to `n`.
    pub fn trajectory(&mut self, tape: &mut Tape, n: NodeId) -> Result<Trajectory, ReasonerError> {
        let steps = self.steps_to(n);
        let mut t = Trajectory {
            entities: vec![self.entity(self.root())],
            actions: Vec::with_capacity(steps.len()),
            action_indices: Vec::with_capacity(steps.len()),
            log_probs: Vec::with_capacity(steps.len()),
            step_probs: Vec::with_capacity(steps.len()),
            nodes: vec![self.root()],
        };
        for (p, a) in steps {
            let lp = self.log_probs(tape, p)?;
            t.log_probs.push(lp[a]);
            t.step_probs.push(lp.iter().map(|l| l.exp()).collect());
            let action = self.actions(p)[a];
            t.actions.push(action);
            t.action_indices.push(a);
            let c = self.child(tape, p, a)?;
            t.entities.push(self.entity(c));
            t.nodes.push(c);
        }
        Ok(t)
    }

    /// Walks from the root until a query node or `horizon` steps, sampling
    /// when `rng` is given and taking the first most likely action otherwise.
    pub fn walk<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        horizon: usize,
        mut rng: Option<&mut R>,
    ) -> Result<NodeId, ReasonerError> {
        let mut n = self.root();
        for _ in 0..horizon {
            if self.is_terminal(n) {
                break;
            }
            let lp = self.log_probs(tape, n)?;
            let a = match rng.as_deref_mut() {
                Some(r) => sample_index(lp, r.random::<f64>()),
                None => argmax(lp),
            };
            n = self.child(tape, n, a)?;
        }
        Ok(n)
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw from `exp(log_probs)` with `u` in `[0, 1)`.
fn sample_index(log_probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, l) in log_probs.iter().enumerate() {
        let p = l.exp();
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return i;
        }
    }
    last
}

fn check_horizon(horizon: usize) -> Result<(), ReasonerError> {
    if horizon == 0 {
        return Err(ReasonerError::InvalidSetting("horizon must be at least 1".into()));
    }
    Ok(())
}

pub fn rollout<R: Rng + ?Sized>(
    tree: &mut PathTree,
    tape: &mut Tape,
    horizon: usize,
    rng: &mut R,
) -> Result<Trajectory, ReasonerError> {
    check_horizon(horizon)?;
    let leaf = tree.walk(tape, horizon, Some(rng))?;
    tree.trajectory(tape, leaf)
}

pub fn greedy_path(tree: &mut PathTree, tape: &mut Tape, horizon: usize) -> Result<Trajectory, ReasonerError> {
    check_horizon(horizon)?;
    let leaf = tree.walk::<rand_chacha::ChaCha8Rng>(tape, horizon, None)?;
    tree.trajectory(tape, leaf)
}

/// 0 for query nodes, 1 for key nodes, 2 otherwise.
pub fn tier_of(g: &IntentGraph, e: EntityId) -> usize {
    let kind = g.kind(e);
    if kind.is_query() {
        0
    } else if kind.is_key() {
        1
    } else {
        2
    }
}

fn path_keys<'a>(g: &'a IntentGraph, t: &'a Trajectory) -> impl Iterator<Item = &'a str> + 'a {
    t.entities.iter().map(move |e| g.entity_key(*e))
}

/// Total order used to pick among candidates: better first.
fn compare(g: &IntentGraph, a: &Trajectory, b: &Trajectory) -> Ordering {
    tier_of(g, a.terminal())
        .cmp(&tier_of(g, b.terminal()))
        .then_with(|| b.score().total_cmp(&a.score()))
        .then_with(|| g.entity_key(a.terminal()).cmp(g.entity_key(b.terminal())))
        .then_with(|| path_keys(g, a).cmp(path_keys(g, b)))
        .then_with(|| a.action_indices.cmp(&b.action_indices))
}

/// Index of the preferred candidate: query-terminal first, then
/// key-terminal, then any; highest score within a tier; ties by terminal id,
/// then by the entity ids along the path.
pub fn select_best(g: &IntentGraph, candidates: &[Trajectory]) -> Option<usize> {
    (0..candidates.len()).min_by(|&i, &j| compare(g, &candidates[i], &candidates[j]).then(i.cmp(&j)))
}

#[derive(Clone, Debug)]
pub struct Inference {
    /// `K` sampled rollouts followed by the greedy walk.
    pub candidates: Vec<Trajectory>,
    pub chosen: usize,
}

impl Inference {
    pub fn best(&self) -> &Trajectory {
        &self.candidates[self.chosen]
    }

    pub fn greedy(&self) -> &Trajectory {
        self.candidates.last().expect("greedy candidate present")
    }
}

pub fn infer_path<R: Rng + ?Sized>(
    tree: &mut PathTree,
    tape: &mut Tape,
    horizon: usize,
    k: usize,
    rng: &mut R,
) -> Result<Inference, ReasonerError> {
    if k == 0 {
        return Err(ReasonerError::InvalidSetting("K must be at least 1".into()));
    }
    let mut candidates = Vec::with_capacity(k + 1);
    for _ in 0..k {
        candidates.push(rollout(tree, tape, horizon, rng)?);
    }
    candidates.push(greedy_path(tree, tape, horizon)?);
    let chosen = select_best(tree.graph(), &candidates).expect("nonempty");
    Ok(Inference { candidates, chosen })
}

#[derive(Clone, Debug)]
pub struct ExhaustiveResult {
    pub best: Trajectory,
    /// Number of complete episodes scored.
    pub paths: usize,
    /// Highest score over every episode regardless of terminal kind.
    pub max_score: f64,
    /// Highest score per terminal tier (see [`tier_of`]).
    pub tier_best: [Option<f64>; 3],
}

/// Complete episodes of at most `horizon` steps from `e`, saturating.
fn count_episodes(
    g: &IntentGraph,
    e: EntityId,
    remaining: usize,
    memo: &mut HashMap<(EntityId, usize), usize>,
) -> Result<usize, ReasonerError> {
    if remaining == 0 || g.kind(e).is_query() {
        return Ok(1);
    }
    if let Some(&c) = memo.get(&(e, remaining)) {
        return Ok(c);
    }
    let mut total = 0usize;
    for a in action_space(g, e)? {
        total = total.saturating_add(count_episodes(g, a.target, remaining - 1, memo)?);
    }
    memo.insert((e, remaining), total);
    Ok(total)
}

/// Scores every complete episode and applies the [`select_best`] rule.
pub fn exhaustive_best_path(
    tree: &mut PathTree,
    tape: &mut Tape,
    horizon: usize,
) -> Result<ExhaustiveResult, ReasonerError> {
    check_horizon(horizon)?;
    let g = tree.graph();
    let total = count_episodes(g, g.root(), horizon, &mut HashMap::new())?;
    if total > MAX_EXHAUSTIVE_PATHS {
        return Err(ReasonerError::TooLarge(total));
    }
    let mut leaves = Vec::with_capacity(total);
    let mut stack = vec![tree.root()];
    while let Some(n) = stack.pop() {
        if tree.is_terminal(n) || tree.depth(n) == horizon {
            leaves.push(n);
            continue;
        }
        let arity = tree.actions(n).len();
        for a in (0..arity).rev() {
            stack.push(tree.child(tape, n, a)?);
        }
    }
    let mut tier_best = [None::<f64>; 3];
    let mut max_score = f64::NEG_INFINITY;
    for &n in &leaves {
        let s = tree.score(n);
        let slot = &mut tier_best[tier_of(g, tree.entity(n))];
        *slot = Some(slot.map_or(s, |b| b.max(s)));
        max_score = max_score.max(s);
    }
    let top_tier = (0..3).find(|&t| tier_best[t].is_some()).expect("at least one episode");
    let top = tier_best[top_tier].expect("present");
    let mut tied = Vec::new();
    for &n in &leaves {
        if tier_of(g, tree.entity(n)) == top_tier && tree.score(n) == top {
            tied.push(tree.trajectory(tape, n)?);
        }
    }
    let i = select_best(g, &tied).expect("nonempty");
    Ok(ExhaustiveResult {
        best: tied.swap_remove(i),
        paths: leaves.len(),
        max_score,
        tier_best,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GraphDraft, NodeKind, QueryDraft};
    use crate::numeric::{ParamStore, Tensor};
    use crate::reasoner::{Policy, PolicyConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn chain_graph() -> IntentGraph {
        let nodes = vec![
            ("root".to_string(), NodeKind::Root),
            ("k1".into(), NodeKind::key("a")),
            ("f1".into(), NodeKind::key("b")),
            ("q1".into(), NodeKind::Query),
        ];
        let t = |s: &str, r: &str, o: &str| (s.to_string(), r.to_string(), o.to_string());
        IntentGraph::build(GraphDraft {
            nodes,
            triples: vec![t("root", "start", "k1"), t("k1", "to", "f1"), t("f1", "end", "q1")],
            root: "root".into(),
            start_kind: "a".into(),
            queries: vec![QueryDraft {
                id: "q1".into(),
                text: "q".into(),
                key_nodes: vec!["k1".into(), "f1".into()],
                template_id: "confirm_query".into(),
            }],
        })
        .unwrap()
    }

    fn policy(g: &IntentGraph, seed: u64) -> (ParamStore, Policy) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = Policy::register(&mut store, g, 4, PolicyConfig::default(), &mut rng).unwrap();
        (store, p)
    }

    /// Makes STAY far less likely than any real edge: with nonnegative
    /// `W1` the hidden layer is nonnegative, `W2` routes its sum to action
    /// dimension 0, and relation rows carry +50 there (STAY -50).
    fn suppress_stay(store: &mut ParamStore, p: &Policy) {
        let shape = store.value(p.w2).shape().to_vec();
        let mut w2 = Tensor::zeros(&shape);
        w2.data_mut()[..shape[1]].iter_mut().for_each(|v| *v = 1.0);
        store.set_value(p.w2, w2).unwrap();
        let mut w1 = store.value(p.w1).clone();
        w1.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.01);
        store.set_value(p.w1, w1).unwrap();
        let mut rel = store.value(p.rel_emb).clone();
        let d_r = p.config.d_r;
        for r in 0..=p.n_relations {
            rel.data_mut()[r * d_r] = if r == p.n_relations { -50.0 } else { 50.0 };
        }
        store.set_value(p.rel_emb, rel).unwrap();
    }

    fn ctx(tape: &mut Tape) -> crate::numeric::Var {
        tape.constant(Tensor::vector(vec![0.5, 0.25, -0.5, 1.0]))
    }

    #[test]
    fn chain_is_forced_without_stay() {
        let g = chain_graph();
        let (mut store, p) = policy(&g, 1);
        suppress_stay(&mut store, &p);
        let mut tape = Tape::new(&store);
        let c = ctx(&mut tape);
        let mut tree = PathTree::new(&mut tape, &g, &p, c).unwrap();
        let path = greedy_path(&mut tree, &mut tape, 5).unwrap();
        let keys: Vec<&str> = path.entities.iter().map(|e| g.entity_key(*e)).collect();
        assert_eq!(keys, ["root", "k1", "f1", "q1"]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let t = rollout(&mut tree, &mut tape, 3, &mut rng).unwrap();
            assert_eq!(t.entities, path.entities);
        }
        let inf = infer_path(&mut tree, &mut tape, 5, 7, &mut rng).unwrap();
        assert_eq!(inf.candidates.len(), 8);
        assert_eq!(inf.best().entities, path.entities);
        let ex = exhaustive_best_path(&mut tree, &mut tape, 5).unwrap();
        assert_eq!(ex.best.entities, path.entities);
    }

    #[test]
    fn rollouts_are_legal_and_bounded() {
        let g = crate::graph::synthesize_graph(&crate::graph::GeneratorSpec::new(3, 3, 8, 2), 4).unwrap();
        let (store, p) = policy(&g, 2);
        let mut tape = Tape::new(&store);
        let c = ctx(&mut tape);
        let mut tree = PathTree::new(&mut tape, &g, &p, c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..300 {
            let t = rollout(&mut tree, &mut tape, 4, &mut rng).unwrap();
            assert!(t.entities.len() <= 5);
            assert_eq!(t.entities.len(), t.actions.len() + 1);
            assert!(t.log_probs.iter().all(|l| *l <= 0.0));
            for (i, a) in t.actions.iter().enumerate() {
                let (from, to) = (t.entities[i], t.entities[i + 1]);
                assert!(!g.kind(from).is_query());
                match a.relation {
                    None => assert_eq!(from, to),
                    Some(r) => assert!(g.has_edge(from, r, to)),
                }
            }
            assert!(g.kind(t.terminal()).is_query() || t.len() == 4);
        }
    }

    #[test]
    fn sampled_frequencies_match_policy() {
        let g = crate::graph::synthesize_graph(&crate::graph::GeneratorSpec::new(2, 4, 6, 1), 3).unwrap();
        let (store, p) = policy(&g, 3);
        let mut tape = Tape::new(&store);
        let c = ctx(&mut tape);
        let mut tree = PathTree::new(&mut tape, &g, &p, c).unwrap();
        let probs: Vec<f64> = tree.log_probs(&mut tape, 0).unwrap().iter().map(|l| l.exp()).collect();
        let mut counts = vec![0usize; probs.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        for _ in 0..n {
            let t = rollout(&mut tree, &mut tape, 1, &mut rng).unwrap();
            counts[t.action_indices[0]] += 1;
        }
        for (c, p) in counts.iter().zip(&probs) {
            assert!((*c as f64 / n as f64 - p).abs() < 0.02);
        }
    }

    #[test]
    fn same_seed_same_rollouts() {
        let g = crate::graph::synthesize_graph(&crate::graph::GeneratorSpec::new(3, 3, 8, 2), 5).unwrap();
        let (store, p) = policy(&g, 5);
        let run = || {
            let mut tape = Tape::new(&store);
            let c = ctx(&mut tape);
            let mut tree = PathTree::new(&mut tape, &g, &p, c).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(21);
            infer_path(&mut tree, &mut tape, 4, 10, &mut rng).unwrap().candidates
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn exhaustive_prefers_likely_branch() {
        // Two length-1 episodes of a one-step horizon; the likelier first hop wins.
        let g = crate::graph::synthesize_graph(&crate::graph::GeneratorSpec::new(1, 2, 2, 0), 0).unwrap();
        let (store, p) = policy(&g, 6);
        let mut tape = Tape::new(&store);
        let c = ctx(&mut tape);
        let mut tree = PathTree::new(&mut tape, &g, &p, c).unwrap();
        let lp = tree.log_probs(&mut tape, 0).unwrap().to_vec();
        let ex = exhaustive_best_path(&mut tree, &mut tape, 1).unwrap();
        assert_eq!(ex.paths, 3);
        let key_actions: Vec<usize> = (0..lp.len() - 1).collect();
        let best = key_actions.iter().copied().max_by(|a, b| lp[*a].total_cmp(&lp[*b])).unwrap();
        assert_eq!(ex.best.action_indices, [best]);
    }

    #[test]
    fn key_terminal_selected_when_no_query_reached() {
        let g = chain_graph();
        let (store, p) = policy(&g, 7);
        let mut tape = Tape::new(&store);
        let c = ctx(&mut tape);
        let mut tree = PathTree::new(&mut tape, &g, &p, c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inf = infer_path(&mut tree, &mut tape, 1, 20, &mut rng).unwrap();
        let best = inf.best();
        assert_eq!(g.entity_key(best.terminal()), "k1");
        assert!(inf.candidates.iter().any(|t| t.terminal() == g.root()));
    }

    #[test]
    fn exhaustive_guard() {
        let g = crate::graph::synthesize_graph(&crate::graph::GeneratorSpec::new(4, 8, 200, 4), 1).unwrap();
        let (store, p) = policy(&g, 8);
        let mut tape = Tape::new(&store);
        let c = ctx(&mut tape);
        let mut tree = PathTree::new(&mut tape, &g, &p, c).unwrap();
        assert!(matches!(
            exhaustive_best_path(&mut tree, &mut tape, 8),
            Err(ReasonerError::TooLarge(_))
        ));
    }

    #[test]
    fn selection_tiebreak_is_lexicographic() {
        let g = chain_graph();
        let e = |k: &str| g.entity(k).unwrap();
        let mk = |ents: Vec<EntityId>| Trajectory {
            actions: vec![Action::stay(ents[0]); ents.len() - 1],
            action_indices: vec![0; ents.len() - 1],
            log_probs: vec![-1.0; ents.len() - 1],
            step_probs: vec![],
            nodes: vec![],
            entities: ents,
        };
        let a = mk(vec![e("root"), e("k1"), e("f1")]);
        let b = mk(vec![e("root"), e("k1"), e("k1")]);
        assert_eq!(select_best(&g, &[b.clone(), a.clone()]), Some(1));
        assert_eq!(select_best(&g, &[a, b]), Some(0));
    }
}
