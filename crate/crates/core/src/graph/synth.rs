use std::collections::HashSet;

use rand::seq::{index, IndexedRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GraphDraft, GraphError, IntentGraph, NodeKind, QueryDraft};

const DEFAULT_KIND_NAMES: [&str; 8] = [
    "alpha", "beta", "gamma", "delta", "epsilon", "zeta", "eta", "theta",
];

/// Parameters of the layered synthetic graph.
///
/// Kind names must be nonempty lowercase ASCII letters so that every feature
/// id (`{kind}{j}`, distractors `{kind}{j}x`) is a single token.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub kinds: Vec<String>,
    pub features_per_kind: usize,
    pub queries: usize,
    pub distractors_per_kind: usize,
    #[serde(default)]
    pub extra_edges: usize,
}

impl GeneratorSpec {
    pub fn new(kinds: usize, features_per_kind: usize, queries: usize, distractors_per_kind: usize) -> Self {
        let kinds = (0..kinds)
            .map(|i| match DEFAULT_KIND_NAMES.get(i) {
                Some(name) => name.to_string(),
                None => format!("kind{}", letters(i)),
            })
            .collect();
        Self {
            kinds,
            features_per_kind,
            queries,
            distractors_per_kind,
            extra_edges: 0,
        }
    }

    fn validate(&self) -> Result<(), GraphError> {
        let bad = |m: String| Err(GraphError::InvalidSpec(m));
        if self.kinds.is_empty() {
            return bad("at least one kind is required".into());
        }
        let mut seen = HashSet::new();
        for k in &self.kinds {
            if k.is_empty() || !k.bytes().all(|b| b.is_ascii_lowercase()) {
                return bad(format!("kind {k:?} must be lowercase ASCII letters"));
            }
            if !seen.insert(k) {
                return bad(format!("duplicate kind {k:?}"));
            }
        }
        if self.features_per_kind == 0 {
            return bad("features_per_kind must be positive".into());
        }
        if self.queries > self.capacity() {
            return bad(format!(
                "{} queries exceed the {} distinct feature chains",
                self.queries,
                self.capacity()
            ));
        }
        Ok(())
    }

    /// Number of distinct key chains, saturating.
    fn capacity(&self) -> usize {
        (0..self.kinds.len()).fold(1usize, |acc, _| acc.saturating_mul(self.features_per_kind))
    }
}

/// Base-26 letter suffix for kinds beyond the named defaults.
fn letters(mut i: usize) -> String {
    let mut out = Vec::new();
    loop {
        out.push(b'a' + (i % 26) as u8);
        i /= 26;
        if i == 0 {
            break;
        }
    }
    out.reverse();
    String::from_utf8(out).expect("ascii")
}

fn feature_id(kind: &str, j: usize) -> String {
    format!("{kind}{j}")
}

fn distractor_id(kind: &str, j: usize) -> String {
    format!("{kind}{j}x")
}

fn query_id(j: usize) -> String {
    format!("q_{j:03}")
}

pub fn synthesize_graph(spec: &GeneratorSpec, seed: u64) -> Result<IntentGraph, GraphError> {
    synthesize_graph_with_chains(spec, seed).map(|(g, _)| g)
}

/// Like [`synthesize_graph`], also returning each query's generated key chain
/// as `(query id, [feature ids in kind order])`.
pub fn synthesize_graph_with_chains(
    spec: &GeneratorSpec,
    seed: u64,
) -> Result<(IntentGraph, Vec<(String, Vec<String>)>), GraphError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kinds = &spec.kinds;
    let f = spec.features_per_kind;

    let mut nodes = vec![("root".to_string(), NodeKind::Root)];
    let mut triples = Vec::new();
    for kind in kinds {
        for j in 0..f {
            nodes.push((feature_id(kind, j), NodeKind::key(kind.as_str())));
        }
        for j in 0..spec.distractors_per_kind {
            nodes.push((distractor_id(kind, j), NodeKind::feature(kind.as_str())));
        }
    }
    for j in 0..f {
        triples.push(("root".into(), "start".into(), feature_id(&kinds[0], j)));
    }

    let tuples = sample_tuples(&mut rng, f, kinds.len(), spec.queries);
    let mut chains = Vec::with_capacity(tuples.len());
    let mut queries = Vec::with_capacity(tuples.len());
    for (qi, tuple) in tuples.iter().enumerate() {
        let chain: Vec<String> = tuple
            .iter()
            .zip(kinds)
            .map(|(&j, kind)| feature_id(kind, j))
            .collect();
        for i in 1..chain.len() {
            triples.push((chain[i - 1].clone(), format!("to_{}", kinds[i]), chain[i].clone()));
        }
        let qid = query_id(qi);
        triples.push((chain[chain.len() - 1].clone(), "resolves".into(), qid.clone()));
        nodes.push((qid.clone(), NodeKind::Query));
        queries.push(QueryDraft {
            id: qid.clone(),
            text: format!("query about {}", chain.join(" ")),
            key_nodes: chain.clone(),
            template_id: "confirm_query".into(),
        });
        chains.push((qid, chain));
    }

    for (i, kind) in kinds.iter().enumerate() {
        let parent_kind = if i == 0 { kind } else { &kinds[i - 1] };
        for j in 0..spec.distractors_per_kind {
            let d = distractor_id(kind, j);
            let parent = feature_id(parent_kind, rng.random_range(0..f));
            triples.push((parent, "mentions".into(), d.clone()));
            if let Some(next) = kinds.get(i + 1) {
                let target = feature_id(next, rng.random_range(0..f));
                triples.push((d, format!("to_{next}"), target));
            }
        }
    }

    if kinds.len() > 1 {
        let layers: Vec<usize> = (1..kinds.len()).collect();
        for _ in 0..spec.extra_edges {
            let i = *layers.choose(&mut rng).expect("nonempty");
            triples.push((
                feature_id(&kinds[i - 1], rng.random_range(0..f)),
                format!("to_{}", kinds[i]),
                feature_id(&kinds[i], rng.random_range(0..f)),
            ));
        }
    }

    let graph = IntentGraph::build(GraphDraft {
        nodes,
        triples,
        root: "root".into(),
        start_kind: kinds[0].clone(),
        queries,
    })?;
    Ok((graph, chains))
}

/// `count` distinct tuples in `[0, f)^k`.
fn sample_tuples(rng: &mut ChaCha8Rng, f: usize, k: usize, count: usize) -> Vec<Vec<usize>> {
    let decode = |mut code: usize| {
        let mut t = vec![0; k];
        for slot in t.iter_mut().rev() {
            *slot = code % f;
            code /= f;
        }
        t
    };
    let total = (0..k).try_fold(1usize, |acc, _| acc.checked_mul(f));
    match total {
        Some(total) if total <= 1 << 24 => index::sample(rng, total, count)
            .into_iter()
            .map(decode)
            .collect(),
        _ => {
            let mut seen = HashSet::new();
            let mut out = Vec::with_capacity(count);
            while out.len() < count {
                let t: Vec<usize> = (0..k).map(|_| rng.random_range(0..f)).collect();
                if seen.insert(t.clone()) {
                    out.push(t);
                }
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn counts_match_generator_settings() {
        let g = synthesize_graph(&GeneratorSpec::new(3, 4, 20, 0), 1).unwrap();
        assert_eq!(g.num_queries(), 20);
        for (q, meta) in g.queries() {
            assert_eq!(meta.key_nodes.len(), 3);
            assert!(g.out_edges(q).unwrap().is_empty());
        }
        assert_eq!(g.num_features(), 12);
        assert_eq!(g.kind_order(), &["alpha", "beta", "gamma"]);
    }

    #[test]
    fn chains_are_edges_and_meta() {
        let spec = GeneratorSpec::new(3, 4, 20, 2);
        let (g, chains) = synthesize_graph_with_chains(&spec, 5).unwrap();
        for (q, chain) in &chains {
            let qid = g.entity(q).unwrap();
            let mut path = vec![g.root()];
            path.extend(chain.iter().map(|c| g.entity(c).unwrap()));
            path.push(qid);
            for w in path.windows(2) {
                assert!(g.out_edges(w[0]).unwrap().iter().any(|(_, t)| *t == w[1]));
            }
            let meta: Vec<&str> = g.key_nodes_of(qid).unwrap().iter().map(|e| g.entity_key(*e)).collect();
            let mut expect: Vec<&str> = chain.iter().map(String::as_str).collect();
            expect.sort();
            assert_eq!(meta, expect);
        }
    }

    #[test]
    fn deterministic_serialization() {
        let mut spec = GeneratorSpec::new(3, 4, 20, 2);
        spec.extra_edges = 5;
        let a = synthesize_graph(&spec, 9).unwrap().to_json();
        let b = synthesize_graph(&spec, 9).unwrap().to_json();
        assert_eq!(a, b);
        let c = synthesize_graph(&spec, 10).unwrap().to_json();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_queries() {
        let g = synthesize_graph(&GeneratorSpec::new(2, 3, 0, 0), 0).unwrap();
        assert_eq!(g.num_queries(), 0);
        assert_eq!(g.num_features(), 6);
    }

    #[test]
    fn invalid_specs() {
        for spec in [
            GeneratorSpec::new(0, 3, 0, 0),
            GeneratorSpec::new(2, 0, 0, 0),
            GeneratorSpec::new(2, 2, 5, 0),
            GeneratorSpec {
                kinds: vec!["a".into(), "a".into()],
                ..GeneratorSpec::new(2, 2, 1, 0)
            },
            GeneratorSpec {
                kinds: vec!["a1".into()],
                ..GeneratorSpec::new(1, 2, 1, 0)
            },
        ] {
            assert!(matches!(synthesize_graph(&spec, 0), Err(GraphError::InvalidSpec(_))));
        }
    }

    #[test]
    fn many_kinds_get_distinct_names() {
        let spec = GeneratorSpec::new(30, 1, 1, 1);
        let g = synthesize_graph(&spec, 2).unwrap();
        assert_eq!(g.kind_order().len(), 30);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn generated_graphs_validate_and_round_trip(
            kinds in 1usize..5, f in 1usize..5, d in 0usize..3, extra in 0usize..6,
            qfrac in 0.0f64..=1.0, seed in any::<u64>(),
        ) {
            let cap = f.pow(kinds as u32);
            let mut spec = GeneratorSpec::new(kinds, f, (qfrac * cap as f64) as usize, d);
            spec.extra_edges = extra;
            let g = synthesize_graph(&spec, seed).unwrap();
            prop_assert_eq!(g.num_queries(), spec.queries);
            for (q, _) in g.queries() {
                prop_assert!(g.out_edges(q).unwrap().is_empty());
            }
            let back = IntentGraph::from_json(&g.to_json()).unwrap();
            prop_assert_eq!(back, g);
        }
    }
}
