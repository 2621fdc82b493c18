use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::graph::{EntityId, GraphError, IntentGraph};
use crate::reasoner::Trajectory;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub terminal_reward: f64,
    pub miss_reward: f64,
    /// Bonus for the first visit to each key node of the target's queries.
    pub key_bonus: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            terminal_reward: 1.0,
            miss_reward: 0.0,
            key_bonus: 0.2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rewards {
    /// Reward received on arrival at step `t`.
    pub per_step: Vec<f64>,
    /// `G_t`: rewards from step `t` to the end.
    pub to_go: Vec<f64>,
    /// Terminal reward plus `key_bonus × shaped visits`.
    pub total: f64,
    pub hit: bool,
    pub shaped_visits: usize,
}

/// Key nodes whose first visit earns the bonus when walking toward `target`:
/// the query's own key nodes, or for a key-node target the key nodes that can
/// precede it, i.e. those of its containing queries whose kind is not later
/// than the target's in the kind order. Empty for other targets.
pub fn shaping_set(g: &IntentGraph, target: EntityId) -> Result<BTreeSet<EntityId>, GraphError> {
    if target.index() >= g.len() {
        return Err(GraphError::UnknownEntity(format!("#{}", target.index())));
    }
    let kind = g.kind(target);
    if kind.is_query() {
        return Ok(g.key_nodes_of(target)?.clone());
    }
    if !kind.is_key() {
        return Ok(BTreeSet::new());
    }
    let rank = |e: EntityId| {
        let k = g.kind(e).feature_kind().expect("key nodes are features");
        g.kind_order().iter().position(|o| o == k).unwrap_or(usize::MAX)
    };
    let limit = rank(target);
    Ok(g.queries()
        .filter(|(_, m)| m.key_nodes.contains(&target))
        .flat_map(|(_, m)| m.key_nodes.iter().copied())
        .filter(|&e| rank(e) <= limit)
        .collect())
}

pub fn compute_rewards(
    traj: &Trajectory,
    target: EntityId,
    g: &IntentGraph,
    cfg: &RewardConfig,
) -> Result<Rewards, GraphError> {
    let shaping = shaping_set(g, target)?;
    rewards_with(traj, target, &shaping, cfg)
}

/// [`compute_rewards`] with a precomputed [`shaping_set`].
pub fn rewards_with(
    traj: &Trajectory,
    target: EntityId,
    shaping: &BTreeSet<EntityId>,
    cfg: &RewardConfig,
) -> Result<Rewards, GraphError> {
    let steps = traj.len();
    let mut per_step = vec![0.0; steps];
    let mut seen = BTreeSet::new();
    for (t, e) in traj.entities.iter().skip(1).enumerate() {
        if shaping.contains(e) && seen.insert(*e) {
            per_step[t] += cfg.key_bonus;
        }
    }
    let hit = traj.terminal() == target;
    let terminal = if hit { cfg.terminal_reward } else { cfg.miss_reward };
    if let Some(last) = per_step.last_mut() {
        *last += terminal;
    }
    let mut to_go = vec![0.0; steps];
    let mut acc = 0.0;
    for t in (0..steps).rev() {
        acc += per_step[t];
        to_go[t] = acc;
    }
    Ok(Rewards {
        per_step,
        to_go,
        total: terminal + cfg.key_bonus * seen.len() as f64,
        hit,
        shaped_visits: seen.len(),
    })
}
