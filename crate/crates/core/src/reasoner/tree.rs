use crate::graph::{EntityId, IntentGraph};
use crate::numeric::{LstmState, Tape, Var};

use super::{action_space, Action, Policy, ReasonerError};

pub type NodeId = usize;

struct Expansion {
    a_mat: Var,
    logp: Var,
    log_probs: Vec<f64>,
    children: Vec<Option<NodeId>>,
}

struct TreeNode {
    entity: EntityId,
    parent: Option<(NodeId, usize)>,
    depth: usize,
    /// Sum of log-probabilities from the root, accumulated in path order.
    score: f64,
    state: LstmState,
    actions: Vec<Action>,
    expansion: Option<Expansion>,
}

/// Walks of one turn that share a prefix share its history and policy
/// computation. Node 0 is the root; every node is reached by exactly one
/// action sequence.
pub struct PathTree<'g> {
    graph: &'g IntentGraph,
    policy: &'g Policy,
    ctx: Var,
    nodes: Vec<TreeNode>,
}

impl<'g> PathTree<'g> {
    /// `ctx` must be a `[d_ctx]` node on `tape`.
    pub fn new(
        tape: &mut Tape,
        graph: &'g IntentGraph,
        policy: &'g Policy,
        ctx: Var,
    ) -> Result<Self, ReasonerError> {
        policy.check_graph(graph)?;
        let d = tape.value(ctx).numel();
        if d != policy.d_ctx || tape.value(ctx).rank() != 1 {
            return Err(crate::numeric::NumericError::ShapeMismatch {
                op: "path_tree",
                left: vec![policy.d_ctx],
                right: tape.value(ctx).shape().to_vec(),
            }
            .into());
        }
        let state = policy.start_state(tape)?;
        let root = graph.root();
        Ok(Self {
            graph,
            policy,
            ctx,
            nodes: vec![TreeNode {
                entity: root,
                parent: None,
                depth: 0,
                score: 0.0,
                state,
                actions: action_space(graph, root)?,
                expansion: None,
            }],
        })
    }

    pub fn graph(&self) -> &'g IntentGraph {
        self.graph
    }

    pub fn root(&self) -> NodeId {
        0
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn entity(&self, n: NodeId) -> EntityId {
        self.nodes[n].entity
    }

    pub fn depth(&self, n: NodeId) -> usize {
        self.nodes[n].depth
    }

    pub fn score(&self, n: NodeId) -> f64 {
        self.nodes[n].score
    }

    pub fn parent(&self, n: NodeId) -> Option<(NodeId, usize)> {
        self.nodes[n].parent
    }

    pub fn actions(&self, n: NodeId) -> &[Action] {
        &self.nodes[n].actions
    }

    pub fn is_terminal(&self, n: NodeId) -> bool {
        self.nodes[n].actions.is_empty()
    }

    /// Log-probabilities of the actions at `n`, computing them on first use.
    pub fn log_probs(&mut self, tape: &mut Tape, n: NodeId) -> Result<&[f64], ReasonerError> {
        self.expand(tape, n)?;
        Ok(&self.nodes[n].expansion.as_ref().expect("expanded").log_probs)
    }

    /// The tape node holding the log-probability vector at `n`, if expanded.
    pub fn log_prob_var(&self, n: NodeId) -> Option<Var> {
        self.nodes[n].expansion.as_ref().map(|e| e.logp)
    }

    fn expand(&mut self, tape: &mut Tape, n: NodeId) -> Result<(), ReasonerError> {
        if self.nodes[n].expansion.is_some() {
            return Ok(());
        }
        let node = &self.nodes[n];
        let a_mat = self.policy.action_matrix(tape, &node.actions)?;
        let logp = self
            .policy
            .log_distribution(tape, node.state.h, node.entity, self.ctx, a_mat)?;
        let log_probs = tape.value(logp).data().to_vec();
        let children = vec![None; log_probs.len()];
        self.nodes[n].expansion = Some(Expansion {
            a_mat,
            logp,
            log_probs,
            children,
        });
        Ok(())
    }

    /// The node reached from `n` by its `action`-th action.
    pub fn child(&mut self, tape: &mut Tape, n: NodeId, action: usize) -> Result<NodeId, ReasonerError> {
        self.expand(tape, n)?;
        let exp = self.nodes[n].expansion.as_ref().expect("expanded");
        if action >= exp.children.len() {
            return Err(crate::numeric::NumericError::IndexOutOfRange {
                index: action,
                len: exp.children.len(),
            }
            .into());
        }
        if let Some(c) = exp.children[action] {
            return Ok(c);
        }
        let (a_mat, lp) = (exp.a_mat, exp.log_probs[action]);
        let node = &self.nodes[n];
        let (state, depth, score) = (node.state, node.depth + 1, node.score + lp);
        let target = node.actions[action].target;
        let a_emb = tape.row(a_mat, action)?;
        let state = self.policy.encode_history(tape, state, a_emb)?;
        let id = self.nodes.len();
        self.nodes.push(TreeNode {
            entity: target,
            parent: Some((n, action)),
            depth,
            score,
            state,
            actions: action_space(self.graph, target)?,
            expansion: None,
        });
        self.nodes[n].expansion.as_mut().expect("expanded").children[action] = Some(id);
        Ok(id)
    }

    /// `(parent node, action index)` pairs from the root to `n`.
    pub fn steps_to(&self, n: NodeId) -> Vec<(NodeId, usize)> {
        let mut steps = Vec::with_capacity(self.nodes[n].depth);
        let mut cur = n;
        while let Some((p, a)) = self.nodes[cur].parent {
            steps.push((p, a));
            cur = p;
        }
        steps.reverse();
        steps
    }
}
