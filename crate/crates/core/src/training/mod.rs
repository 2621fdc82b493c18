//! REINFORCE training with reward-to-go and key-node shaping, evaluation,
//! and synthetic dialogue data.
//!
//! Each dialogue turn is an independent episode conditioned on its context
//! embedding. For a batch, the surrogate loss is
//!
//! ```text
//! L = −(1 / S) Σ_turns Σ_rollouts Σ_t (G_t − b) · log π(a_t | s_t)
//! ```
//!
//! where `S` counts every step in the batch and `b` is the configured
//! [`Baseline`]. Rollouts of one turn share a prefix
//! tree, so coefficients are summed per `(tree node, action)` before the
//! backward pass.

mod data;
mod rewards;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderError;
use crate::graph::{EntityId, IntentGraph};
use crate::model::{Model, ModelConfig, ModelError};
use crate::numeric::{Gradients, NumericError, Optimizer, OptimizerConfig, ParamStore, Tape, Var};
use crate::reasoner::{NodeId, PathTree, ReasonerError};

pub use data::{
    build_vocabulary, feature_tokens, load_jsonl, prepare_all, save_jsonl, synthesize_dialogues, DialogueSample,
    PreparedSample, DEFAULT_FILLERS,
};
pub use rewards::{compute_rewards, rewards_with, shaping_set, RewardConfig, Rewards};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("graph has no query nodes")]
    NoQueries,
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Reasoner(#[from] ReasonerError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Graph(#[from] crate::graph::GraphError),
}

/// Value subtracted from `G_t` in the policy-gradient coefficients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    #[default]
    None,
    /// Exponential moving average of the mean rollout return over batches.
    MovingAverage,
    /// Mean `G_t` at the same step over the other rollouts of the same turn,
    /// zero past their ends.
    LeaveOneOut,
    /// Mean return-to-go of the other rollouts that acted from the same
    /// tree node.
    PerNode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Rollouts per turn during training (N).
    pub rollouts: usize,
    /// Path horizon (T).
    pub horizon: usize,
    /// Sampled candidates per turn at evaluation (K).
    pub eval_k: usize,
    pub reward: RewardConfig,
    pub baseline: Baseline,
    /// Decay of [`Baseline::MovingAverage`].
    pub baseline_decay: f64,
    /// Weight of the policy entropy at every visited state, added to the
    /// maximized objective during the first epoch.
    pub entropy_weight: f64,
    /// Entropy weight reached after `entropy_anneal_epochs`; earlier epochs
    /// interpolate linearly.
    pub entropy_final_weight: f64,
    /// Epochs over which the entropy weight anneals; 0 anneals over all epochs.
    pub entropy_anneal_epochs: usize,
    /// Share of the dataset held out for best-checkpoint selection.
    pub valid_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            optimizer: OptimizerConfig::default(),
            epochs: 30,
            batch_size: 16,
            rollouts: 20,
            horizon: 5,
            eval_k: 20,
            reward: RewardConfig::default(),
            baseline: Baseline::None,
            baseline_decay: 0.9,
            entropy_weight: 0.3,
            entropy_final_weight: 0.0,
            entropy_anneal_epochs: 20,
            valid_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Entropy weight used during `epoch` (1-based).
    pub fn entropy_at(&self, epoch: usize) -> f64 {
        let span = match self.entropy_anneal_epochs {
            0 => self.epochs,
            n => n,
        };
        if span <= 1 {
            return if epoch <= 1 { self.entropy_weight } else { self.entropy_final_weight };
        }
        let f = (epoch.clamp(1, span) - 1) as f64 / (span - 1) as f64;
        self.entropy_weight + f * (self.entropy_final_weight - self.entropy_weight)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [
            ("batch_size", self.batch_size),
            ("rollouts", self.rollouts),
            ("horizon", self.horizon),
            ("eval_k", self.eval_k),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(TrainError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if !(self.entropy_weight >= 0.0 && self.entropy_final_weight >= 0.0) {
            return Err(TrainError::InvalidConfig("entropy_weight must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.valid_fraction) {
            return Err(TrainError::InvalidConfig("valid_fraction must lie in [0, 1)".into()));
        }
        if self.reward.terminal_reward <= self.reward.miss_reward || self.reward.key_bonus < 0.0 {
            return Err(TrainError::InvalidConfig(
                "rewards need terminal > miss and a nonnegative key bonus".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Share of dialogues whose last turn ends at the target query.
    pub final_accuracy: f64,
    /// Share of intermediate turns ending at a key node of the target query.
    pub intermediate_accuracy: f64,
    /// Mean return of the chosen path per turn.
    pub mean_return: f64,
    pub samples: usize,
    pub intermediate_turns: usize,
    /// Mean training loss per epoch.
    pub loss_trace: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub mean_return: f64,
    pub valid: Option<EvalReport>,
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    /// Validation report of the retained model, with the full loss trace.
    pub report: EvalReport,
    pub epochs: Vec<EpochStats>,
    /// Epoch (1-based) of the retained parameters; 0 means initialization.
    pub best_epoch: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub mean_return: f64,
    pub steps: usize,
    pub rollouts: usize,
}

/// SplitMix64 finalizer over a combination of stream coordinates.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Rollouts for one turn with their per-step coefficients, replayable on a
/// fresh tape.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenTurn {
    pub turn: usize,
    /// `(action indices, coefficient per step)` for each rollout.
    pub paths: Vec<(Vec<usize>, Vec<f64>)>,
}

struct SampleOutcome {
    grads: Option<Gradients>,
    objective: f64,
    steps: usize,
    return_sum: f64,
    rollouts: usize,
}

/// Per-node surrogate weights: a coefficient per action and the number of
/// rollout steps taken from the node.
#[derive(Default)]
struct NodeTerms {
    coefs: BTreeMap<NodeId, (Vec<f64>, usize)>,
}

impl NodeTerms {
    fn add(&mut self, tree: &PathTree, node: NodeId, action: usize, value: f64) {
        let arity = tree.actions(node).len();
        let (c, visits) = self.coefs.entry(node).or_insert_with(|| (vec![0.0; arity], 0));
        c[action] += value;
        *visits += 1;
    }

    /// Appends `(log π, coefficients, visits)` of every listed node.
    fn collect(self, tree: &PathTree, out: &mut Vec<(Var, Vec<f64>, usize)>) {
        for (node, (c, visits)) in self.coefs {
            out.push((tree.log_prob_var(node).expect("visited nodes are expanded"), c, visits));
        }
    }
}

/// `Σ coef · log π + β Σ visits · H(π)` over the collected nodes.
fn surrogate_objective(
    tape: &mut Tape,
    terms: &[(Var, Vec<f64>, usize)],
    entropy_weight: f64,
) -> Result<Option<Var>, NumericError> {
    let (mut vars, mut coefs) = (Vec::new(), Vec::new());
    for (v, c, _) in terms {
        if c.iter().any(|x| *x != 0.0) {
            vars.push(*v);
            coefs.extend_from_slice(c);
        }
    }
    let mut objective = None;
    if !vars.is_empty() {
        let all = tape.concat(&vars)?;
        let c = tape.constant(crate::numeric::Tensor::vector(coefs));
        objective = Some(tape.dot(all, c)?);
    }
    if entropy_weight > 0.0 && !terms.is_empty() {
        let mut probs = Vec::with_capacity(terms.len());
        let mut weights = Vec::new();
        for (v, c, visits) in terms {
            probs.push(tape.softmax(*v)?);
            weights.extend(std::iter::repeat_n(-entropy_weight * *visits as f64, c.len()));
        }
        let logp: Vec<Var> = terms.iter().map(|(v, _, _)| *v).collect();
        let p = tape.concat(&probs)?;
        let l = tape.concat(&logp)?;
        let plogp = tape.hadamard(p, l)?;
        let w = tape.constant(crate::numeric::Tensor::vector(weights));
        let h = tape.dot(plogp, w)?;
        objective = Some(match objective {
            Some(o) => tape.add(o, h)?,
            None => h,
        });
    }
    Ok(objective)
}

/// Per-step coefficients `G_t − b_t` for the rollouts of one turn;
/// `nodes[r][t]` is the tree node rollout `r` acted from at step `t` and
/// `moving` is the current moving-average value.
pub fn advantages(to_go: &[Vec<f64>], nodes: &[Vec<NodeId>], kind: Baseline, moving: f64) -> Vec<Vec<f64>> {
    match kind {
        Baseline::PerNode => {
            let mut sums: BTreeMap<NodeId, (f64, usize)> = BTreeMap::new();
            for (g, ns) in to_go.iter().zip(nodes) {
                for (x, n) in g.iter().zip(ns) {
                    let e = sums.entry(*n).or_default();
                    e.0 += x;
                    e.1 += 1;
                }
            }
            to_go
                .iter()
                .zip(nodes)
                .map(|(g, ns)| {
                    g.iter()
                        .zip(ns)
                        .map(|(x, n)| {
                            let (sum, count) = sums[n];
                            if count < 2 { *x } else { x - (sum - x) / (count - 1) as f64 }
                        })
                        .collect()
                })
                .collect()
        }
        Baseline::None => to_go.to_vec(),
        Baseline::MovingAverage => to_go.iter().map(|g| g.iter().map(|x| x - moving).collect()).collect(),
        Baseline::LeaveOneOut => {
            let n = to_go.len();
            if n < 2 {
                return to_go.to_vec();
            }
            let len = to_go.iter().map(Vec::len).max().unwrap_or(0);
            let mut sums = vec![0.0; len];
            for g in to_go {
                for (s, x) in sums.iter_mut().zip(g) {
                    *s += x;
                }
            }
            let others = (n - 1) as f64;
            to_go
                .iter()
                .map(|g| g.iter().enumerate().map(|(t, x)| x - (sums[t] - x) / others).collect())
                .collect()
        }
    }
}

fn sample_outcome(
    model: &Model,
    graph: &IntentGraph,
    sample: &PreparedSample,
    cfg: &TrainConfig,
    baseline: f64,
    seed: u64,
) -> Result<SampleOutcome, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tape = Tape::new(&model.store);
    let ctx = model.encoder.encode_context(&mut tape, &sample.turns)?;
    let mut terms = Vec::new();
    let (mut steps, mut return_sum) = (0, 0.0);
    for (i, &target) in sample.targets.iter().enumerate() {
        let c = tape.row(ctx, i)?;
        let mut tree = PathTree::new(&mut tape, graph, &model.policy, c)?;
        let shaping = shaping_set(graph, target)?;
        let mut walks = Vec::with_capacity(cfg.rollouts);
        for _ in 0..cfg.rollouts {
            let leaf = tree.walk(&mut tape, cfg.horizon, Some(&mut rng))?;
            let traj = tree.trajectory(&mut tape, leaf)?;
            let r = rewards_with(&traj, target, &shaping, &cfg.reward)?;
            steps += traj.len();
            return_sum += r.total;
            walks.push((traj, r.to_go));
        }
        let to_go: Vec<Vec<f64>> = walks.iter().map(|(_, g)| g.clone()).collect();
        let nodes: Vec<Vec<NodeId>> = walks.iter().map(|(t, _)| t.nodes.clone()).collect();
        let coefs = advantages(&to_go, &nodes, cfg.baseline, baseline);
        let mut node_terms = NodeTerms::default();
        for ((traj, _), c) in walks.iter().zip(&coefs) {
            for (t, &a) in traj.action_indices.iter().enumerate() {
                node_terms.add(&tree, traj.nodes[t], a, c[t]);
            }
        }
        node_terms.collect(&tree, &mut terms);
    }
    let rollouts = sample.targets.len() * cfg.rollouts;
    let Some(objective) = surrogate_objective(&mut tape, &terms, cfg.entropy_weight)? else {
        return Ok(SampleOutcome {
            grads: None,
            objective: 0.0,
            steps,
            return_sum,
            rollouts,
        });
    };
    let value = tape.value(objective).item();
    let loss = tape.scale(objective, -1.0);
    let grads = tape.backward(loss)?;
    Ok(SampleOutcome {
        grads: Some(grads),
        objective: value,
        steps,
        return_sum,
        rollouts,
    })
}

/// Surrogate loss of frozen rollouts rebuilt on `tape`: `−Σ coef · log π`
/// divided by the number of recorded steps, the per-sample form of the
/// training loss.
pub fn frozen_surrogate(
    tape: &mut Tape,
    model: &Model,
    graph: &IntentGraph,
    sample: &PreparedSample,
    frozen: &[FrozenTurn],
    entropy_weight: f64,
) -> Result<Var, TrainError> {
    let ctx = model.encoder.encode_context(tape, &sample.turns)?;
    let mut terms = Vec::new();
    let mut steps = 0;
    for f in frozen {
        let c = tape.row(ctx, f.turn)?;
        let mut tree = PathTree::new(tape, graph, &model.policy, c)?;
        let mut node_terms = NodeTerms::default();
        for (actions, cs) in &f.paths {
            let mut node = tree.root();
            steps += actions.len();
            for (&a, &coef) in actions.iter().zip(cs) {
                tree.log_probs(tape, node)?;
                node_terms.add(&tree, node, a, coef);
                node = tree.child(tape, node, a)?;
            }
        }
        node_terms.collect(&tree, &mut terms);
    }
    let obj = match surrogate_objective(tape, &terms, entropy_weight)? {
        Some(o) => o,
        None => tape.constant(crate::numeric::Tensor::scalar(0.0)),
    };
    Ok(tape.scale(obj, -1.0 / steps.max(1) as f64))
}

/// Samples rollouts for `sample` and freezes them with their coefficients.
pub fn freeze_rollouts(
    model: &Model,
    graph: &IntentGraph,
    sample: &PreparedSample,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<FrozenTurn>, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let contexts = model.contexts(&sample.turns)?;
    let mut out = Vec::new();
    for (i, (&target, ctx)) in sample.targets.iter().zip(&contexts).enumerate() {
        let mut tape = Tape::new(&model.store);
        let c = tape.constant(ctx.clone());
        let mut tree = PathTree::new(&mut tape, graph, &model.policy, c)?;
        let mut walks = Vec::new();
        for _ in 0..cfg.rollouts {
            let leaf = tree.walk(&mut tape, cfg.horizon, Some(&mut rng))?;
            let traj = tree.trajectory(&mut tape, leaf)?;
            let r = compute_rewards(&traj, target, graph, &cfg.reward)?;
            walks.push((traj.action_indices, traj.nodes, r.to_go));
        }
        let to_go: Vec<Vec<f64>> = walks.iter().map(|(_, _, g)| g.clone()).collect();
        let nodes: Vec<Vec<NodeId>> = walks.iter().map(|(_, n, _)| n.clone()).collect();
        let coefs = advantages(&to_go, &nodes, cfg.baseline, 0.0);
        let paths = walks.into_iter().zip(coefs).map(|((a, _, _), c)| (a, c)).collect();
        out.push(FrozenTurn { turn: i, paths });
    }
    Ok(out)
}

/// One policy-gradient update over `batch`; `seeds[j]` drives sample `j`.
pub fn reinforce_step(
    model: &mut Model,
    optimizer: &mut Optimizer,
    graph: &IntentGraph,
    batch: &[PreparedSample],
    seeds: &[u64],
    cfg: &TrainConfig,
    baseline: &mut Option<f64>,
) -> Result<StepStats, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    assert_eq!(batch.len(), seeds.len(), "one seed per sample");
    let b = baseline.unwrap_or(0.0);
    let frozen: &Model = model;
    let outcomes = batch
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(s, &seed)| sample_outcome(frozen, graph, s, cfg, b, seed))
        .collect::<Result<Vec<_>, _>>()?;

    let mut grads = Gradients::for_store(&model.store);
    let (mut steps, mut objective, mut return_sum, mut rollouts) = (0, 0.0, 0.0, 0);
    for o in &outcomes {
        if let Some(g) = &o.grads {
            grads.merge(g);
        }
        steps += o.steps;
        objective += o.objective;
        return_sum += o.return_sum;
        rollouts += o.rollouts;
    }
    let norm = 1.0 / steps.max(1) as f64;
    grads.scale(norm);
    model.store.accumulate(&grads);
    optimizer.step(&mut model.store);

    let mean_return = return_sum / rollouts.max(1) as f64;
    if cfg.baseline == Baseline::MovingAverage {
        *baseline = Some(match *baseline {
            Some(prev) => cfg.baseline_decay * prev + (1.0 - cfg.baseline_decay) * mean_return,
            None => mean_return,
        });
    }
    Ok(StepStats {
        loss: -objective * norm,
        mean_return,
        steps,
        rollouts,
    })
}

/// Seeded split of `n` indices into `(train, valid)`.
pub fn split_indices(n: usize, valid_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5911, 0)));
    let n_valid = ((n as f64) * valid_fraction).round() as usize;
    let n_valid = if n_valid >= n { n.saturating_sub(1) } else { n_valid };
    let valid = idx.split_off(n - n_valid);
    (idx, valid)
}

/// Ranks validation reports by summed final and intermediate accuracy, then
/// by mean return.
fn better(a: &EvalReport, b: &EvalReport) -> bool {
    let key = |r: &EvalReport| (r.final_accuracy + r.intermediate_accuracy, r.mean_return);
    key(a) > key(b)
}

/// Trains a fresh model on `dataset`, keeping the parameters that score best
/// on the validation share.
pub fn train(
    graph: &IntentGraph,
    vocab_size: usize,
    dataset: &[PreparedSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut model = Model::new(graph, vocab_size, cfg.model, cfg.seed)?;
    let (train_idx, valid_idx) = split_indices(dataset.len(), cfg.valid_fraction, cfg.seed);
    let valid: Vec<PreparedSample> = valid_idx.iter().map(|&i| dataset[i].clone()).collect();
    let eval_seed = derive_seed(cfg.seed, 0xE7A1, 0);
    let evaluate_valid = |m: &Model| -> Result<Option<EvalReport>, TrainError> {
        if valid.is_empty() {
            return Ok(None);
        }
        evaluate(m, graph, &valid, cfg.horizon, cfg.eval_k, &cfg.reward, eval_seed).map(Some)
    };

    let mut optimizer = Optimizer::new(cfg.optimizer);
    let mut baseline = None;
    let mut best_store: Option<ParamStore> = None;
    let mut best_report = evaluate_valid(&model)?;
    let mut best_epoch = 0;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut order = train_idx.clone();
    for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x5EED, epoch as u64));
        order.shuffle(&mut shuffle_rng);
        let epoch_cfg = TrainConfig {
            entropy_weight: cfg.entropy_at(epoch),
            ..cfg.clone()
        };
        let (mut loss_sum, mut return_sum, mut batches) = (0.0, 0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<PreparedSample> = chunk.iter().map(|&i| dataset[i].clone()).collect();
            let seeds: Vec<u64> = chunk
                .iter()
                .map(|&i| derive_seed(cfg.seed, epoch as u64, i as u64))
                .collect();
            let stats = reinforce_step(&mut model, &mut optimizer, graph, &batch, &seeds, &epoch_cfg, &mut baseline)?;
            loss_sum += stats.loss;
            return_sum += stats.mean_return;
            batches += 1;
        }
        let valid_report = evaluate_valid(&model)?;
        let improved = match (&valid_report, &best_report) {
            (Some(v), Some(b)) => better(v, b),
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            best_store = Some(model.store.clone());
            best_report = valid_report.clone();
            best_epoch = epoch;
        }
        let stats = EpochStats {
            epoch,
            loss: loss_sum / batches.max(1) as f64,
            mean_return: return_sum / batches.max(1) as f64,
            valid: valid_report,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&stats);
        epochs.push(stats);
    }
    if let Some(store) = best_store {
        model.store = store;
    } else if cfg.epochs > 0 {
        model = Model::new(graph, vocab_size, cfg.model, cfg.seed)?;
    }
    let mut report = best_report.unwrap_or_default();
    report.loss_trace = epochs.iter().map(|e| e.loss).collect();
    Ok(TrainOutcome {
        model,
        report,
        epochs,
        best_epoch,
    })
}

struct SampleEval {
    final_hit: bool,
    intermediate: usize,
    intermediate_hits: usize,
    return_sum: f64,
    turns: usize,
}

fn evaluate_sample(
    model: &Model,
    graph: &IntentGraph,
    sample: &PreparedSample,
    horizon: usize,
    k: usize,
    reward: &RewardConfig,
    seed: u64,
) -> Result<SampleEval, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let contexts = model.contexts(&sample.turns)?;
    let keys = graph.key_nodes_of(sample.query)?;
    let mut out = SampleEval {
        final_hit: false,
        intermediate: 0,
        intermediate_hits: 0,
        return_sum: 0.0,
        turns: contexts.len(),
    };
    for (i, (ctx, &target)) in contexts.iter().zip(&sample.targets).enumerate() {
        let inf = model.infer(graph, ctx, horizon, k, &mut rng)?;
        let best = inf.best();
        out.return_sum += compute_rewards(best, target, graph, reward)?.total;
        let end: EntityId = best.terminal();
        if i + 1 == contexts.len() {
            out.final_hit = end == sample.query;
        } else {
            out.intermediate += 1;
            out.intermediate_hits += usize::from(keys.contains(&end));
        }
    }
    Ok(out)
}

/// Accuracy of the chosen inference path per turn; sample `j` uses the rng
/// stream `derive_seed(seed, j, 0)`.
pub fn evaluate(
    model: &Model,
    graph: &IntentGraph,
    dataset: &[PreparedSample],
    horizon: usize,
    k: usize,
    reward: &RewardConfig,
    seed: u64,
) -> Result<EvalReport, TrainError> {
    let results = dataset
        .par_iter()
        .enumerate()
        .map(|(j, s)| evaluate_sample(model, graph, s, horizon, k, reward, derive_seed(seed, j as u64, 0)))
        .collect::<Result<Vec<_>, _>>()?;
    let n = results.len();
    let finals = results.iter().filter(|r| r.final_hit).count();
    let inter: usize = results.iter().map(|r| r.intermediate).sum();
    let inter_hits: usize = results.iter().map(|r| r.intermediate_hits).sum();
    let turns: usize = results.iter().map(|r| r.turns).sum();
    let ret: f64 = results.iter().map(|r| r.return_sum).sum();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(EvalReport {
        final_accuracy: ratio(finals, n),
        intermediate_accuracy: ratio(inter_hits, inter),
        mean_return: if turns == 0 { 0.0 } else { ret / turns as f64 },
        samples: n,
        intermediate_turns: inter,
        loss_trace: Vec::new(),
    })
}
