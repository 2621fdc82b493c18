//! Loading, persisting and digesting the frozen engine state served by the
//! gateway.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use intentdial_core::encoder::Vocabulary;
use intentdial_core::graph::IntentGraph;
use intentdial_core::manager::{Engine, ManagerConfig, TemplateSet};
use intentdial_core::model::{Model, ModelError};
use intentdial_core::numeric::checkpoint::sidecar_path;

pub const GRAPH_FILE: &str = "graph.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const VOCAB_FILE: &str = "vocab.json";
pub const TEMPLATES_FILE: &str = "templates.json";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, thiserror::Error)]
pub enum SnapshotError {
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("cannot parse {path}: {reason}")]
    ParseError { path: PathBuf, reason: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn parse_error(path: &Path, reason: impl ToString) -> SnapshotError {
    SnapshotError::ParseError {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Input files of a snapshot. `config` is optional; without it the manager
/// defaults apply.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotPaths {
    pub graph: PathBuf,
    pub checkpoint: PathBuf,
    pub vocab: PathBuf,
    pub templates: PathBuf,
    pub config: Option<PathBuf>,
}

impl SnapshotPaths {
    /// Standard file names inside `dir`; the config is used when present.
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        let config = dir.join(CONFIG_FILE);
        Self {
            graph: dir.join(GRAPH_FILE),
            checkpoint: dir.join(CHECKPOINT_FILE),
            vocab: dir.join(VOCAB_FILE),
            templates: dir.join(TEMPLATES_FILE),
            config: config.exists().then_some(config),
        }
    }

    pub fn with_config(mut self, config: Option<PathBuf>) -> Self {
        if config.is_some() {
            self.config = config;
        }
        self
    }
}

/// Immutable engine state plus the digest of the files it came from.
#[derive(Debug)]
pub struct EngineSnapshot {
    pub engine: Engine,
    /// Hex SHA-256 over every input file.
    pub digest: String,
    pub paths: SnapshotPaths,
}

fn read(path: &Path) -> Result<Vec<u8>, SnapshotError> {
    std::fs::read(path).map_err(|source| SnapshotError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn text(path: &Path, bytes: &[u8]) -> Result<String, SnapshotError> {
    String::from_utf8(bytes.to_vec()).map_err(|e| parse_error(path, e))
}

/// SHA-256 over `(label, length, bytes)` of each part, so moving bytes between
/// files changes the digest.
pub fn digest_parts(parts: &[(&str, &[u8])]) -> String {
    let mut h = Sha256::new();
    for (label, bytes) in parts {
        h.update(label.as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(bytes);
    }
    hex::encode(h.finalize())
}

impl EngineSnapshot {
    pub fn load(paths: &SnapshotPaths) -> Result<Self, SnapshotError> {
        let graph_bytes = read(&paths.graph)?;
        let graph = IntentGraph::from_json(&text(&paths.graph, &graph_bytes)?).map_err(|e| parse_error(&paths.graph, e))?;
        let vocab_bytes = read(&paths.vocab)?;
        let vocab = Vocabulary::from_json(&text(&paths.vocab, &vocab_bytes)?).map_err(|e| parse_error(&paths.vocab, e))?;
        let templates_bytes = read(&paths.templates)?;
        let templates = TemplateSet::from_json(&text(&paths.templates, &templates_bytes)?)
            .map_err(|e| parse_error(&paths.templates, e))?;
        let config_bytes = match &paths.config {
            Some(p) => read(p)?,
            None => Vec::new(),
        };
        let config: ManagerConfig = match &paths.config {
            Some(p) => serde_json::from_slice(&config_bytes).map_err(|e| parse_error(p, e))?,
            None => ManagerConfig::default(),
        };
        let ckpt_bytes = read(&paths.checkpoint)?;
        let side = sidecar_path(&paths.checkpoint);
        let side_bytes = read(&side)?;
        let (model, _) = Model::load(&paths.checkpoint, &graph, vocab.len()).map_err(|e| match e {
            ModelError::Incompatible(m) => SnapshotError::IncompatibleCheckpoint(m),
            other => parse_error(&paths.checkpoint, other),
        })?;
        let digest = digest_parts(&[
            ("graph", &graph_bytes),
            ("checkpoint", &ckpt_bytes),
            ("sidecar", &side_bytes),
            ("vocab", &vocab_bytes),
            ("templates", &templates_bytes),
            ("config", &config_bytes),
        ]);
        Ok(Self {
            engine: Engine {
                graph,
                model,
                vocab,
                templates,
                config,
            },
            digest,
            paths: paths.clone(),
        })
    }

    /// Writes the engine under the standard names in `dir` and returns the
    /// paths, config included.
    pub fn persist(engine: &Engine, dir: impl AsRef<Path>) -> Result<SnapshotPaths, SnapshotError> {
        let dir = dir.as_ref();
        let io = |path: PathBuf| move |source| SnapshotError::Io { path, source };
        std::fs::create_dir_all(dir).map_err(io(dir.to_path_buf()))?;
        let paths = SnapshotPaths {
            graph: dir.join(GRAPH_FILE),
            checkpoint: dir.join(CHECKPOINT_FILE),
            vocab: dir.join(VOCAB_FILE),
            templates: dir.join(TEMPLATES_FILE),
            config: Some(dir.join(CONFIG_FILE)),
        };
        engine.graph.save(&paths.graph).map_err(|e| parse_error(&paths.graph, e))?;
        engine
            .model
            .save(&paths.checkpoint, serde_json::Value::Null)
            .map_err(|e| parse_error(&paths.checkpoint, e))?;
        engine.vocab.save(&paths.vocab).map_err(|e| parse_error(&paths.vocab, e))?;
        engine.templates.save(&paths.templates).map_err(|e| parse_error(&paths.templates, e))?;
        let config = paths.config.clone().expect("set above");
        let mut json = serde_json::to_string_pretty(&engine.config).expect("config serializes");
        json.push('\n');
        std::fs::write(&config, json).map_err(io(config.clone()))?;
        Ok(paths)
    }
}
