use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{split_words, Vocabulary};
use crate::graph::{EntityId, IntentGraph};

use super::TrainError;

pub const DEFAULT_FILLERS: &[&str] = &[
    "i", "want", "to", "know", "about", "my", "please", "help", "me", "with", "question", "hello", "can",
    "you", "tell", "need",
];

/// One dialogue as stored on disk: tokens per turn and entity ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueSample {
    pub turns: Vec<Vec<String>>,
    pub turn_targets: Vec<String>,
    pub query: String,
}

/// A sample resolved against a graph and vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PreparedSample {
    pub turns: Vec<Vec<usize>>,
    pub targets: Vec<EntityId>,
    pub query: EntityId,
}

impl DialogueSample {
    pub fn prepare(&self, g: &IntentGraph, vocab: &Vocabulary) -> Result<PreparedSample, TrainError> {
        let bad = |m: String| TrainError::InvalidSample(m);
        if self.turns.is_empty() || self.turns.len() != self.turn_targets.len() {
            return Err(bad(format!(
                "{} turns but {} targets",
                self.turns.len(),
                self.turn_targets.len()
            )));
        }
        let lookup = |id: &str| g.entity(id).ok_or_else(|| bad(format!("unknown entity {id}")));
        let query = lookup(&self.query)?;
        if !g.kind(query).is_query() {
            return Err(bad(format!("{} is not a query", self.query)));
        }
        let targets = self
            .turn_targets
            .iter()
            .map(|t| lookup(t))
            .collect::<Result<Vec<_>, _>>()?;
        if *targets.last().expect("nonempty") != query {
            return Err(bad("final turn target differs from query".into()));
        }
        let turns = self
            .turns
            .iter()
            .map(|t| vocab.encode_words(t).map_err(|_| bad("empty turn".into())))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(PreparedSample { turns, targets, query })
    }
}

pub fn prepare_all(
    samples: &[DialogueSample],
    g: &IntentGraph,
    vocab: &Vocabulary,
) -> Result<Vec<PreparedSample>, TrainError> {
    samples.iter().map(|s| s.prepare(g, vocab)).collect()
}

/// Tokens naming a feature node: its id split into words.
pub fn feature_tokens(g: &IntentGraph, e: EntityId) -> Vec<String> {
    split_words(g.entity_key(e))
}

/// Vocabulary over every feature-name token of `g`, the fillers, and the
/// tokens of `samples`, in sorted order.
pub fn build_vocabulary(g: &IntentGraph, samples: &[DialogueSample], fillers: &[&str]) -> Vocabulary {
    let mut tokens = BTreeSet::new();
    for e in g.entities() {
        if g.kind(e).feature_kind().is_some() {
            tokens.extend(feature_tokens(g, e));
        }
    }
    tokens.extend(fillers.iter().map(|f| f.to_string()));
    for s in samples {
        for t in &s.turns {
            tokens.extend(t.iter().cloned());
        }
    }
    Vocabulary::from_tokens(tokens)
}

/// Synthetic dialogues that reveal a query's key features over several turns.
///
/// Each sample picks a query uniformly, shuffles its key nodes, and splits
/// them into `t` nonempty groups (`t` drawn from `turns_range`, capped at the
/// number of key nodes). Turn `i` names the features of group `i` among one to
/// four filler words. Intermediate turns target the revealed key node that is
/// deepest in the graph's kind order; the final turn targets the query.
pub fn synthesize_dialogues(
    g: &IntentGraph,
    count: usize,
    turns_range: (usize, usize),
    seed: u64,
) -> Result<Vec<DialogueSample>, TrainError> {
    let (lo, hi) = turns_range;
    if lo == 0 || lo > hi {
        return Err(TrainError::InvalidConfig(format!("invalid turns range {lo}..={hi}")));
    }
    let queries: Vec<EntityId> = g.queries().map(|(q, _)| q).collect();
    if queries.is_empty() {
        return Err(TrainError::NoQueries);
    }
    let kind_rank = |e: EntityId| {
        let kind = g.kind(e).feature_kind().expect("key nodes are features");
        g.kind_order().iter().position(|k| k == kind).unwrap_or(usize::MAX)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let q = *queries.choose(&mut rng).expect("nonempty");
        let mut keys: Vec<EntityId> = g.key_nodes_of(q).expect("query").iter().copied().collect();
        keys.shuffle(&mut rng);
        let turns = rng.random_range(lo..=hi).min(keys.len());
        let mut cuts: Vec<usize> = rand::seq::index::sample(&mut rng, keys.len() - 1, turns - 1)
            .into_iter()
            .map(|c| c + 1)
            .collect();
        cuts.sort_unstable();
        cuts.push(keys.len());

        let mut sample = DialogueSample {
            turns: Vec::with_capacity(turns),
            turn_targets: Vec::with_capacity(turns),
            query: g.entity_key(q).to_string(),
        };
        let mut start = 0;
        let mut deepest: Option<EntityId> = None;
        for (i, &end) in cuts.iter().enumerate() {
            let mut words = Vec::new();
            for &k in &keys[start..end] {
                words.extend(feature_tokens(g, k));
                if deepest.is_none_or(|d| kind_rank(k) > kind_rank(d)) {
                    deepest = Some(k);
                }
            }
            for _ in 0..rng.random_range(1..=4) {
                words.push(DEFAULT_FILLERS.choose(&mut rng).expect("nonempty").to_string());
            }
            words.shuffle(&mut rng);
            sample.turns.push(words);
            let target = if i + 1 == cuts.len() { q } else { deepest.expect("revealed") };
            sample.turn_targets.push(g.entity_key(target).to_string());
            start = end;
        }
        out.push(sample);
    }
    Ok(out)
}

pub fn save_jsonl(path: impl AsRef<Path>, samples: &[DialogueSample]) -> Result<(), TrainError> {
    let path = path.as_ref();
    let io = |e: std::io::Error| TrainError::Io(format!("{}: {e}", path.display()));
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(io)?);
    for s in samples {
        let line = serde_json::to_string(s).expect("sample serializes");
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Vec<DialogueSample>, TrainError> {
    let path = path.as_ref();
    let io = |e: std::io::Error| TrainError::Io(format!("{}: {e}", path.display()));
    let r = std::io::BufReader::new(std::fs::File::open(path).map_err(io)?);
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| {
            TrainError::InvalidSample(format!("{}:{}: {e}", path.display(), n + 1))
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{synthesize_graph, GeneratorSpec};
    use proptest::prelude::*;

    fn graph() -> IntentGraph {
        synthesize_graph(&GeneratorSpec::new(3, 4, 20, 2), 7).unwrap()
    }

    #[test]
    fn single_turn_range() {
        let g = graph();
        for s in synthesize_dialogues(&g, 50, (1, 1), 3).unwrap() {
            assert_eq!(s.turns.len(), 1);
            assert_eq!(s.turn_targets, [s.query.clone()]);
        }
    }

    #[test]
    fn targets_follow_the_contract() {
        let g = graph();
        let samples = synthesize_dialogues(&g, 300, (1, 3), 4).unwrap();
        let mut multi = 0;
        for s in &samples {
            let q = g.entity(&s.query).unwrap();
            let keys = g.key_nodes_of(q).unwrap();
            assert_eq!(s.turn_targets.last(), Some(&s.query));
            for t in &s.turn_targets[..s.turn_targets.len() - 1] {
                assert!(keys.contains(&g.entity(t).unwrap()));
                multi += 1;
            }
        }
        assert!(multi > 0);
    }

    #[test]
    fn vocabulary_is_features_and_fillers() {
        let g = graph();
        let samples = synthesize_dialogues(&g, 200, (1, 3), 5).unwrap();
        let mut allowed: BTreeSet<String> = DEFAULT_FILLERS.iter().map(|s| s.to_string()).collect();
        for e in g.entities() {
            if g.kind(e).feature_kind().is_some() {
                allowed.extend(feature_tokens(&g, e));
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        save_jsonl(&path, &samples).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            for turn in v["turns"].as_array().unwrap() {
                for tok in turn.as_array().unwrap() {
                    assert!(allowed.contains(tok.as_str().unwrap()));
                }
            }
        }
        assert_eq!(load_jsonl(&path).unwrap(), samples);
    }

    #[test]
    fn no_queries_is_an_error() {
        let g = synthesize_graph(&GeneratorSpec::new(2, 2, 0, 0), 1).unwrap();
        assert!(matches!(synthesize_dialogues(&g, 5, (1, 3), 0), Err(TrainError::NoQueries)));
    }

    #[test]
    fn prepare_validates() {
        let g = graph();
        let vocab = build_vocabulary(&g, &[], DEFAULT_FILLERS);
        let mut s = synthesize_dialogues(&g, 1, (1, 1), 0).unwrap().remove(0);
        assert!(s.prepare(&g, &vocab).is_ok());
        s.turn_targets[0] = "alpha0".into();
        assert!(s.prepare(&g, &vocab).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn deterministic_per_seed(seed in any::<u64>()) {
            let g = graph();
            prop_assert_eq!(
                synthesize_dialogues(&g, 20, (1, 3), seed).unwrap(),
                synthesize_dialogues(&g, 20, (1, 3), seed).unwrap()
            );
        }
    }
}
