//! The trainable model: dialogue encoder and policy sharing one parameter
//! store, plus checkpoint persistence.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{DialogueEncoder, EncoderConfig, EncoderError};
use crate::graph::IntentGraph;
use crate::numeric::checkpoint::{self, CheckpointError};
use crate::numeric::{ParamStore, Tape, Tensor};
use crate::reasoner::{infer_path, Inference, PathTree, Policy, PolicyConfig, ReasonerError};

pub const SIDECAR_FORMAT: &str = "intentdial-model/1";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub policy: PolicyConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub format: String,
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub n_entities: usize,
    pub n_relations: usize,
    /// Free-form metadata such as the training configuration.
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Reasoner(#[from] ReasonerError),
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: DialogueEncoder,
    pub policy: Policy,
    /// Seed the parameters were initialized from.
    pub seed: u64,
}

impl Model {
    /// Fresh parameters for `graph` and a vocabulary of `vocab_size` tokens.
    pub fn new(graph: &IntentGraph, vocab_size: usize, config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = DialogueEncoder::register(&mut store, vocab_size, config.encoder, &mut rng)?;
        let policy = Policy::register(&mut store, graph, config.encoder.d_ctx, config.policy, &mut rng)?;
        Ok(Self {
            config,
            store,
            encoder,
            policy,
            seed,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.encoder.vocab_size
    }

    pub fn sidecar(&self, extra: serde_json::Value) -> ModelSidecar {
        ModelSidecar {
            format: SIDECAR_FORMAT.into(),
            config: self.config,
            vocab_size: self.vocab_size(),
            n_entities: self.policy.n_entities,
            n_relations: self.policy.n_relations,
            extra,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>, extra: serde_json::Value) -> Result<(), ModelError> {
        let side = serde_json::to_value(self.sidecar(extra)).map_err(CheckpointError::from)?;
        checkpoint::save(path.as_ref(), &self.store, self.seed, &side)?;
        Ok(())
    }

    /// Loads a checkpoint, requiring its tables to match `graph` and `vocab_size`.
    pub fn load(
        path: impl AsRef<Path>,
        graph: &IntentGraph,
        vocab_size: usize,
    ) -> Result<(Self, ModelSidecar), ModelError> {
        let (header, loaded, side) = checkpoint::load(path.as_ref())?;
        let side: ModelSidecar = serde_json::from_value(side).map_err(CheckpointError::from)?;
        if side.format != SIDECAR_FORMAT {
            return Err(ModelError::Incompatible(format!("sidecar format {:?}", side.format)));
        }
        let checks = [
            ("entity table", side.n_entities, graph.len()),
            ("relation table", side.n_relations, graph.num_relations()),
            ("vocabulary", side.vocab_size, vocab_size),
        ];
        for (what, ckpt, expected) in checks {
            if ckpt != expected {
                return Err(ModelError::Incompatible(format!(
                    "{what} has {ckpt} rows in the checkpoint but {expected} in the loaded inputs"
                )));
            }
        }
        let mut model = Model::new(graph, vocab_size, side.config, header.seed)?;
        checkpoint::restore_into(&mut model.store, &loaded)?;
        Ok((model, side))
    }

    /// Context embeddings `c_1..c_I` of a tokenized dialogue.
    pub fn contexts(&self, turns: &[Vec<usize>]) -> Result<Vec<Tensor>, ModelError> {
        Ok(self.encoder.contexts(&self.store, turns)?)
    }

    /// `K` sampled walks plus the greedy walk for one context embedding.
    pub fn infer<R: Rng + ?Sized>(
        &self,
        graph: &IntentGraph,
        ctx: &Tensor,
        horizon: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Inference, ModelError> {
        let mut tape = Tape::new(&self.store);
        let c = tape.constant(ctx.clone());
        let mut tree = PathTree::new(&mut tape, graph, &self.policy, c)?;
        Ok(infer_path(&mut tree, &mut tape, horizon, k, rng)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{synthesize_graph, GeneratorSpec};

    #[test]
    fn save_load_round_trip() {
        let g = synthesize_graph(&GeneratorSpec::new(2, 3, 4, 1), 1).unwrap();
        let m = Model::new(&g, 9, ModelConfig::default(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path, serde_json::json!({"note": 1})).unwrap();
        let (back, side) = Model::load(&path, &g, 9).unwrap();
        assert_eq!(side.extra["note"], 1);
        assert_eq!(back.seed, 5);
        for ((_, a), (_, b)) in m.store.iter().zip(back.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn mismatched_graph_rejected() {
        let g = synthesize_graph(&GeneratorSpec::new(2, 3, 4, 1), 1).unwrap();
        let other = synthesize_graph(&GeneratorSpec::new(2, 3, 5, 1), 1).unwrap();
        let m = Model::new(&g, 9, ModelConfig::default(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path, serde_json::Value::Null).unwrap();
        assert!(matches!(Model::load(&path, &other, 9), Err(ModelError::Incompatible(_))));
        assert!(matches!(Model::load(&path, &g, 10), Err(ModelError::Incompatible(_))));
    }

    #[test]
    fn same_seed_same_parameters() {
        let g = synthesize_graph(&GeneratorSpec::new(2, 3, 4, 1), 1).unwrap();
        let a = Model::new(&g, 9, ModelConfig::default(), 5).unwrap();
        let b = Model::new(&g, 9, ModelConfig::default(), 5).unwrap();
        assert!(a.store.iter().zip(b.store.iter()).all(|((_, x), (_, y))| x.value == y.value));
    }
}
