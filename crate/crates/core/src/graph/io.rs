use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GraphDraft, GraphError, IntentGraph, NodeKind, QueryDraft};

pub const FORMAT_TAG: &str = "intent-graph/1";

// Fields are declared in lexicographic order so that serialization is sorted
// regardless of the serde_json map implementation.

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphFile {
    pub format: String,
    pub nodes: Vec<NodeEntry>,
    pub queries: Vec<QueryEntry>,
    pub root: String,
    pub start_kind: String,
    pub triples: Vec<[String; 3]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_kind: Option<String>,
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub is_key: Option<bool>,
    pub kind: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryEntry {
    pub id: String,
    pub key_nodes: Vec<String>,
    pub template_id: String,
    pub text: String,
}

impl GraphFile {
    pub fn into_draft(self) -> Result<GraphDraft, GraphError> {
        if self.format != FORMAT_TAG {
            return Err(GraphError::Parse(format!(
                "unsupported format {:?}, expected {FORMAT_TAG:?}",
                self.format
            )));
        }
        let mut nodes = Vec::with_capacity(self.nodes.len());
        for n in self.nodes {
            let kind = match (n.kind.as_str(), n.feature_kind) {
                ("root", None) => NodeKind::Root,
                ("query", None) => NodeKind::Query,
                ("feature", Some(fk)) => NodeKind::Feature {
                    feature_kind: fk,
                    is_key: n.is_key.unwrap_or(false),
                },
                ("feature", None) => {
                    return Err(GraphError::Parse(format!("feature {} lacks feature_kind", n.id)))
                }
                (other, _) => {
                    return Err(GraphError::Parse(format!("node {} has invalid kind {other:?}", n.id)))
                }
            };
            if n.is_key.is_some() && !matches!(kind, NodeKind::Feature { .. }) {
                return Err(GraphError::Parse(format!("non-feature node {} has is_key", n.id)));
            }
            nodes.push((n.id, kind));
        }
        Ok(GraphDraft {
            nodes,
            triples: self
                .triples
                .into_iter()
                .map(|[s, r, o]| (s, r, o))
                .collect(),
            root: self.root,
            start_kind: self.start_kind,
            queries: self
                .queries
                .into_iter()
                .map(|q| QueryDraft {
                    id: q.id,
                    text: q.text,
                    key_nodes: q.key_nodes,
                    template_id: q.template_id,
                })
                .collect(),
        })
    }
}

impl IntentGraph {
    pub fn to_file(&self) -> GraphFile {
        let nodes = self
            .entities()
            .map(|e| {
                let id = self.entity_key(e).to_string();
                match self.kind(e) {
                    NodeKind::Root => NodeEntry {
                        feature_kind: None,
                        id,
                        is_key: None,
                        kind: "root".into(),
                    },
                    NodeKind::Query => NodeEntry {
                        feature_kind: None,
                        id,
                        is_key: None,
                        kind: "query".into(),
                    },
                    NodeKind::Feature {
                        feature_kind,
                        is_key,
                    } => NodeEntry {
                        feature_kind: Some(feature_kind.clone()),
                        id,
                        is_key: Some(*is_key),
                        kind: "feature".into(),
                    },
                }
            })
            .collect();
        let triples = self
            .triples()
            .iter()
            .map(|t| {
                [
                    self.entity_key(t.subject).to_string(),
                    self.relation_key(t.relation).to_string(),
                    self.entity_key(t.object).to_string(),
                ]
            })
            .collect();
        let queries = self
            .queries()
            .map(|(q, m)| QueryEntry {
                id: self.entity_key(q).to_string(),
                key_nodes: m
                    .key_nodes
                    .iter()
                    .map(|k| self.entity_key(*k).to_string())
                    .collect(),
                template_id: m.template_id.clone(),
                text: m.text.clone(),
            })
            .collect();
        GraphFile {
            format: FORMAT_TAG.into(),
            nodes,
            queries,
            root: self.entity_key(self.root()).to_string(),
            start_kind: self.start_kind().to_string(),
            triples,
        }
    }

    pub fn from_file(file: GraphFile) -> Result<Self, GraphError> {
        IntentGraph::build(file.into_draft()?)
    }

    /// Pretty-printed JSON with a trailing newline; deterministic for a graph.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(&self.to_file()).expect("graph serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self, GraphError> {
        let file: GraphFile =
            serde_json::from_str(text).map_err(|e| GraphError::Parse(e.to_string()))?;
        Self::from_file(file)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, GraphError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| GraphError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), GraphError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json())
            .map_err(|e| GraphError::Io(format!("{}: {e}", path.display())))
    }
}
