//! The typed intent graph: a single root, feature nodes (some of them key
//! nodes), and query nodes with out-degree zero.
//!
//! Graphs are validated once at [`IntentGraph::build`] and immutable after.
//! Entity and relation indices are assigned in sorted order of their string
//! ids, and adjacency lists are sorted by `(relation, target)`, so action
//! indices are reproducible across loads.

mod io;
mod synth;

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

pub use io::{GraphFile, NodeEntry, QueryEntry, FORMAT_TAG};
pub use synth::{synthesize_graph, synthesize_graph_with_chains, GeneratorSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EntityId(pub(crate) u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RelationId(pub(crate) u32);

impl EntityId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl RelationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum NodeKind {
    Root,
    Feature { feature_kind: String, is_key: bool },
    Query,
}

impl NodeKind {
    pub fn key(kind: impl Into<String>) -> Self {
        NodeKind::Feature {
            feature_kind: kind.into(),
            is_key: true,
        }
    }

    pub fn feature(kind: impl Into<String>) -> Self {
        NodeKind::Feature {
            feature_kind: kind.into(),
            is_key: false,
        }
    }

    pub fn is_key(&self) -> bool {
        matches!(self, NodeKind::Feature { is_key: true, .. })
    }

    pub fn is_query(&self) -> bool {
        matches!(self, NodeKind::Query)
    }

    pub fn feature_kind(&self) -> Option<&str> {
        match self {
            NodeKind::Feature { feature_kind, .. } => Some(feature_kind),
            _ => None,
        }
    }

    /// Coarse label used in exports: `root`, `key`, `feature` or `query`.
    pub fn label(&self) -> &'static str {
        match self {
            NodeKind::Root => "root",
            NodeKind::Feature { is_key: true, .. } => "key",
            NodeKind::Feature { .. } => "feature",
            NodeKind::Query => "query",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Triple {
    pub subject: EntityId,
    pub relation: RelationId,
    pub object: EntityId,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QueryMeta {
    pub text: String,
    pub key_nodes: BTreeSet<EntityId>,
    pub template_id: String,
}

/// Unvalidated graph description handed to [`IntentGraph::build`].
#[derive(Clone, Debug, Default)]
pub struct GraphDraft {
    pub nodes: Vec<(String, NodeKind)>,
    pub triples: Vec<(String, String, String)>,
    pub root: String,
    pub start_kind: String,
    pub queries: Vec<QueryDraft>,
}

#[derive(Clone, Debug)]
pub struct QueryDraft {
    pub id: String,
    pub text: String,
    pub key_nodes: Vec<String>,
    pub template_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GraphError {
    #[error("query node {query} has an out-edge to {target}")]
    QueryOutEdge { query: String, target: String },
    #[error("root edge targets {target}, which is not a key node of kind {start_kind}")]
    BadRootEdge { target: String, start_kind: String },
    #[error("root has an in-edge from {source_node}")]
    RootInEdge { source_node: String },
    #[error("triple ({subject}, {relation}, {object}) references unknown entity {missing}")]
    DanglingEndpoint {
        subject: String,
        relation: String,
        object: String,
        missing: String,
    },
    #[error("more than one root node: {0:?}")]
    DuplicateRoot(Vec<String>),
    #[error("root {0} is not declared as the root node")]
    MissingRoot(String),
    #[error("duplicate entity id {0}")]
    DuplicateEntity(String),
    #[error("query node {0} has no query metadata")]
    MissingQueryMeta(String),
    #[error("invalid query metadata for {id}: {reason}")]
    InvalidQueryMeta { id: String, reason: String },
    #[error("unknown entity {0}")]
    UnknownEntity(String),
    #[error("{0} is not a query node")]
    NotAQuery(String),
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("i/o error: {0}")]
    Io(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntentGraph {
    entity_keys: Vec<String>,
    entity_index: HashMap<String, EntityId>,
    kinds: Vec<NodeKind>,
    relation_keys: Vec<String>,
    relation_index: HashMap<String, RelationId>,
    triples: Vec<Triple>,
    adjacency: Vec<Vec<(RelationId, EntityId)>>,
    in_degree: Vec<usize>,
    root: EntityId,
    start_kind: String,
    query_meta: BTreeMap<EntityId, QueryMeta>,
    kind_order: Vec<String>,
}

impl IntentGraph {
    pub fn build(draft: GraphDraft) -> Result<Self, GraphError> {
        let GraphDraft {
            nodes,
            triples,
            root,
            start_kind,
            queries,
        } = draft;

        let mut nodes = nodes;
        nodes.sort_by(|a, b| a.0.cmp(&b.0));
        for w in nodes.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(GraphError::DuplicateEntity(w[0].0.clone()));
            }
        }
        let roots: Vec<String> = nodes
            .iter()
            .filter(|(_, k)| *k == NodeKind::Root)
            .map(|(id, _)| id.clone())
            .collect();
        if roots.len() > 1 {
            return Err(GraphError::DuplicateRoot(roots));
        }
        if roots.first() != Some(&root) {
            return Err(GraphError::MissingRoot(root));
        }

        let entity_keys: Vec<String> = nodes.iter().map(|(id, _)| id.clone()).collect();
        let kinds: Vec<NodeKind> = nodes.into_iter().map(|(_, k)| k).collect();
        let entity_index: HashMap<String, EntityId> = entity_keys
            .iter()
            .enumerate()
            .map(|(i, k)| (k.clone(), EntityId(i as u32)))
            .collect();
        let root_id = entity_index[&root];

        let relation_keys: Vec<String> = triples
            .iter()
            .map(|(_, r, _)| r.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let relation_index: HashMap<String, RelationId> = relation_keys
            .iter()
            .enumerate()
            .map(|(i, k)| (k.clone(), RelationId(i as u32)))
            .collect();

        let mut triple_set = BTreeSet::new();
        for (s, r, o) in &triples {
            let lookup = |id: &String| {
                entity_index
                    .get(id)
                    .copied()
                    .ok_or_else(|| GraphError::DanglingEndpoint {
                        subject: s.clone(),
                        relation: r.clone(),
                        object: o.clone(),
                        missing: id.clone(),
                    })
            };
            let (sid, oid) = (lookup(s)?, lookup(o)?);
            if kinds[sid.index()].is_query() {
                return Err(GraphError::QueryOutEdge {
                    query: s.clone(),
                    target: o.clone(),
                });
            }
            if oid == root_id {
                return Err(GraphError::RootInEdge { source_node: s.clone() });
            }
            if sid == root_id {
                let ok = matches!(&kinds[oid.index()],
                    NodeKind::Feature { feature_kind, is_key: true } if *feature_kind == start_kind);
                if !ok {
                    return Err(GraphError::BadRootEdge {
                        target: o.clone(),
                        start_kind: start_kind.clone(),
                    });
                }
            }
            triple_set.insert(Triple {
                subject: sid,
                relation: relation_index[r],
                object: oid,
            });
        }
        let triples: Vec<Triple> = triple_set.into_iter().collect();

        let mut adjacency = vec![Vec::new(); entity_keys.len()];
        let mut in_degree = vec![0; entity_keys.len()];
        for t in &triples {
            adjacency[t.subject.index()].push((t.relation, t.object));
            in_degree[t.object.index()] += 1;
        }
        for list in &mut adjacency {
            list.sort();
        }

        let mut query_meta = BTreeMap::new();
        for q in queries {
            let invalid = |reason: &str| GraphError::InvalidQueryMeta {
                id: q.id.clone(),
                reason: reason.to_string(),
            };
            let qid = *entity_index.get(&q.id).ok_or_else(|| invalid("unknown entity"))?;
            if !kinds[qid.index()].is_query() {
                return Err(invalid("not a query node"));
            }
            if q.key_nodes.is_empty() {
                return Err(invalid("key_nodes is empty"));
            }
            let mut keys = BTreeSet::new();
            for k in &q.key_nodes {
                let kid = *entity_index
                    .get(k)
                    .ok_or_else(|| invalid(&format!("unknown key node {k}")))?;
                if !kinds[kid.index()].is_key() {
                    return Err(invalid(&format!("{k} is not a key node")));
                }
                keys.insert(kid);
            }
            if query_meta
                .insert(
                    qid,
                    QueryMeta {
                        text: q.text,
                        key_nodes: keys,
                        template_id: q.template_id,
                    },
                )
                .is_some()
            {
                return Err(invalid("duplicate metadata"));
            }
        }
        for (i, k) in kinds.iter().enumerate() {
            if k.is_query() && !query_meta.contains_key(&EntityId(i as u32)) {
                return Err(GraphError::MissingQueryMeta(entity_keys[i].clone()));
            }
        }

        let mut g = IntentGraph {
            entity_keys,
            entity_index,
            kinds,
            relation_keys,
            relation_index,
            triples,
            adjacency,
            in_degree,
            root: root_id,
            start_kind,
            query_meta,
            kind_order: Vec::new(),
        };
        g.kind_order = g.compute_kind_order();
        Ok(g)
    }

    /// Start kind first, then other feature kinds by their shallowest
    /// distance from the root, ties and unreachable kinds by name.
    fn compute_kind_order(&self) -> Vec<String> {
        let mut depth = vec![usize::MAX; self.len()];
        let mut queue = VecDeque::from([self.root]);
        depth[self.root.index()] = 0;
        while let Some(e) = queue.pop_front() {
            for &(_, t) in &self.adjacency[e.index()] {
                if depth[t.index()] == usize::MAX {
                    depth[t.index()] = depth[e.index()] + 1;
                    queue.push_back(t);
                }
            }
        }
        let mut best: BTreeMap<&str, usize> = BTreeMap::new();
        for (i, k) in self.kinds.iter().enumerate() {
            if let Some(fk) = k.feature_kind() {
                let d = best.entry(fk).or_insert(usize::MAX);
                *d = (*d).min(depth[i]);
            }
        }
        let mut rest: Vec<(usize, &str)> = best
            .into_iter()
            .filter(|(k, _)| *k != self.start_kind)
            .map(|(k, d)| (d, k))
            .collect();
        rest.sort();
        std::iter::once(self.start_kind.clone())
            .chain(rest.into_iter().map(|(_, k)| k.to_string()))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.entity_keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entity_keys.is_empty()
    }

    pub fn num_relations(&self) -> usize {
        self.relation_keys.len()
    }

    pub fn root(&self) -> EntityId {
        self.root
    }

    pub fn start_kind(&self) -> &str {
        &self.start_kind
    }

    pub fn entity(&self, key: &str) -> Option<EntityId> {
        self.entity_index.get(key).copied()
    }

    pub fn relation(&self, key: &str) -> Option<RelationId> {
        self.relation_index.get(key).copied()
    }

    pub fn entity_key(&self, e: EntityId) -> &str {
        &self.entity_keys[e.index()]
    }

    pub fn relation_key(&self, r: RelationId) -> &str {
        &self.relation_keys[r.index()]
    }

    pub fn kind(&self, e: EntityId) -> &NodeKind {
        &self.kinds[e.index()]
    }

    pub fn entities(&self) -> impl Iterator<Item = EntityId> + '_ {
        (0..self.entity_keys.len() as u32).map(EntityId)
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn in_degree(&self, e: EntityId) -> usize {
        self.in_degree[e.index()]
    }

    fn check(&self, e: EntityId) -> Result<(), GraphError> {
        if e.index() < self.len() {
            Ok(())
        } else {
            Err(GraphError::UnknownEntity(format!("#{}", e.0)))
        }
    }

    /// Out-edges of `e` sorted by `(relation, target)`; empty for query nodes.
    pub fn out_edges(&self, e: EntityId) -> Result<&[(RelationId, EntityId)], GraphError> {
        self.check(e)?;
        Ok(&self.adjacency[e.index()])
    }

    pub fn out_edges_by_key(&self, key: &str) -> Result<&[(RelationId, EntityId)], GraphError> {
        let e = self
            .entity(key)
            .ok_or_else(|| GraphError::UnknownEntity(key.to_string()))?;
        self.out_edges(e)
    }

    pub fn key_nodes_of(&self, q: EntityId) -> Result<&BTreeSet<EntityId>, GraphError> {
        self.check(q)?;
        self.query_meta
            .get(&q)
            .map(|m| &m.key_nodes)
            .ok_or_else(|| GraphError::NotAQuery(self.entity_key(q).to_string()))
    }

    pub fn query_meta(&self, q: EntityId) -> Option<&QueryMeta> {
        self.query_meta.get(&q)
    }

    pub fn queries(&self) -> impl Iterator<Item = (EntityId, &QueryMeta)> + '_ {
        self.query_meta.iter().map(|(k, v)| (*k, v))
    }

    pub fn num_queries(&self) -> usize {
        self.query_meta.len()
    }

    pub fn num_features(&self) -> usize {
        self.kinds
            .iter()
            .filter(|k| matches!(k, NodeKind::Feature { .. }))
            .count()
    }

    /// Feature kinds, start kind first.
    pub fn kind_order(&self) -> &[String] {
        &self.kind_order
    }

    pub fn has_edge(&self, s: EntityId, r: RelationId, o: EntityId) -> bool {
        self.adjacency
            .get(s.index())
            .is_some_and(|l| l.binary_search(&(r, o)).is_ok())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn n(id: &str, k: NodeKind) -> (String, NodeKind) {
        (id.to_string(), k)
    }

    fn t(s: &str, r: &str, o: &str) -> (String, String, String) {
        (s.into(), r.into(), o.into())
    }

    fn base() -> GraphDraft {
        GraphDraft {
            nodes: vec![
                n("root", NodeKind::Root),
                n("k_card", NodeKind::key("product")),
                n("k_limit", NodeKind::key("aspect")),
                n("k_up", NodeKind::key("demand")),
                n("f_misc", NodeKind::feature("aspect")),
                n("q1", NodeKind::Query),
            ],
            triples: vec![
                t("root", "start", "k_card"),
                t("k_card", "has", "k_limit"),
                t("k_card", "has", "f_misc"),
                t("k_limit", "has", "k_up"),
                t("k_up", "resolves", "q1"),
            ],
            root: "root".into(),
            start_kind: "product".into(),
            queries: vec![QueryDraft {
                id: "q1".into(),
                text: "how to increase the limit".into(),
                key_nodes: vec!["k_card".into(), "k_limit".into(), "k_up".into()],
                template_id: "confirm".into(),
            }],
        }
    }

    #[test]
    fn builds_valid_graph() {
        let g = IntentGraph::build(base()).unwrap();
        assert_eq!(g.num_queries(), 1);
        assert_eq!(g.num_features(), 4);
        assert_eq!(g.kind_order(), &["product", "aspect", "demand"]);
        let q = g.entity("q1").unwrap();
        assert!(g.out_edges(q).unwrap().is_empty());
        let keys: Vec<&str> = g.key_nodes_of(q).unwrap().iter().map(|e| g.entity_key(*e)).collect();
        assert_eq!(keys, ["k_card", "k_limit", "k_up"]);
        for e in g.key_nodes_of(q).unwrap() {
            assert!(g.kind(*e).is_key());
        }
    }

    #[test]
    fn query_out_edge_rejected() {
        let mut d = base();
        d.triples.push(t("q1", "r", "f_misc"));
        assert!(matches!(IntentGraph::build(d), Err(GraphError::QueryOutEdge { .. })));
    }

    #[test]
    fn bad_root_edge_rejected() {
        let mut d = base();
        d.triples.push(t("root", "start", "k_limit"));
        assert!(matches!(IntentGraph::build(d), Err(GraphError::BadRootEdge { .. })));
        let mut d = base();
        d.nodes.push(n("f_card2", NodeKind::feature("product")));
        d.triples.push(t("root", "start", "f_card2"));
        assert!(matches!(IntentGraph::build(d), Err(GraphError::BadRootEdge { .. })));
    }

    #[test]
    fn root_in_edge_rejected() {
        let mut d = base();
        d.triples.push(t("k_card", "back", "root"));
        assert!(matches!(IntentGraph::build(d), Err(GraphError::RootInEdge { .. })));
    }

    #[test]
    fn other_build_errors() {
        let mut d = base();
        d.triples.push(t("k_card", "has", "nowhere"));
        assert!(matches!(IntentGraph::build(d), Err(GraphError::DanglingEndpoint { .. })));

        let mut d = base();
        d.nodes.push(n("root2", NodeKind::Root));
        assert!(matches!(IntentGraph::build(d), Err(GraphError::DuplicateRoot(_))));

        let mut d = base();
        d.queries.clear();
        assert!(matches!(IntentGraph::build(d), Err(GraphError::MissingQueryMeta(_))));

        let mut d = base();
        d.queries[0].key_nodes = vec!["f_misc".into()];
        assert!(matches!(IntentGraph::build(d), Err(GraphError::InvalidQueryMeta { .. })));
    }

    #[test]
    fn degenerate_root_only() {
        let g = IntentGraph::build(GraphDraft {
            nodes: vec![n("root", NodeKind::Root)],
            root: "root".into(),
            start_kind: "product".into(),
            ..Default::default()
        })
        .unwrap();
        assert_eq!((g.num_queries(), g.num_features()), (0, 0));
        assert!(g.out_edges(g.root()).unwrap().is_empty());
    }

    #[test]
    fn out_edges_exact_and_sorted() {
        let mut d = base();
        d.nodes.push(n("q2", NodeKind::Query));
        d.triples.push(t("k_limit", "direct", "q2"));
        d.queries.push(QueryDraft {
            id: "q2".into(),
            text: "limit".into(),
            key_nodes: vec!["k_limit".into()],
            template_id: "confirm".into(),
        });
        let g = IntentGraph::build(d).unwrap();
        let edges: Vec<(&str, &str)> = g
            .out_edges_by_key("k_limit")
            .unwrap()
            .iter()
            .map(|(r, e)| (g.relation_key(*r), g.entity_key(*e)))
            .collect();
        assert_eq!(edges, [("direct", "q2"), ("has", "k_up")]);
        assert!(matches!(
            g.out_edges_by_key("nope"),
            Err(GraphError::UnknownEntity(_))
        ));
        assert!(matches!(
            g.key_nodes_of(g.entity("k_up").unwrap()),
            Err(GraphError::NotAQuery(_))
        ));
    }
}
