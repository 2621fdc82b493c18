//! Three-layer dialogue encoder: token embeddings, a bidirectional GRU per
//! utterance, and causally masked self-attention across turns.
//!
//! Turn `i` attends to turns `0..=i` only, so `c_i` depends on nothing said
//! after turn `i`.

mod vocab;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::numeric::params::init_embedding;
use crate::numeric::{causal_mask, GruCell, NumericError, ParamId, ParamStore, SelfAttention, Tape, Tensor, Var};

pub use vocab::{split_words, Vocabulary, PAD, PAD_TOKEN, UNK, UNK_TOKEN};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EncoderError {
    #[error("utterance has no tokens")]
    EmptyUtterance,
    #[error("dialogue has no turns")]
    EmptyDialogue,
    #[error("token id {id} outside vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },
    #[error("vocabulary: {0}")]
    Vocabulary(String),
    #[error(transparent)]
    Numeric(#[from] NumericError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_tok: usize,
    pub d_gru: usize,
    pub d_ctx: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_tok: 32,
            d_gru: 16,
            d_ctx: 32,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DialogueEncoder {
    pub config: EncoderConfig,
    pub vocab_size: usize,
    pub tok_emb: ParamId,
    pub fwd: GruCell,
    pub bwd: GruCell,
    pub att: SelfAttention,
}

impl DialogueEncoder {
    /// Registers `enc.*` parameters in `store`.
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        vocab_size: usize,
        config: EncoderConfig,
        rng: &mut R,
    ) -> Result<Self, EncoderError> {
        let EncoderConfig { d_tok, d_gru, d_ctx } = config;
        let tok_emb = store.add("enc.tok_emb", init_embedding(rng, vocab_size, d_tok))?;
        let fwd = GruCell::register(store, "enc.fwd", d_tok, d_gru, rng)?;
        let bwd = GruCell::register(store, "enc.bwd", d_tok, d_gru, rng)?;
        let att = SelfAttention::register(store, "enc.att", 2 * d_gru, d_ctx, rng)?;
        Ok(Self {
            config,
            vocab_size,
            tok_emb,
            fwd,
            bwd,
            att,
        })
    }

    pub fn sentence_dim(&self) -> usize {
        2 * self.config.d_gru
    }

    /// `[h_fwd_final ; h_bwd_final]` of the utterance, length `2·d_gru`.
    pub fn encode_sentence(&self, tape: &mut Tape, tokens: &[usize]) -> Result<Var, EncoderError> {
        if tokens.is_empty() {
            return Err(EncoderError::EmptyUtterance);
        }
        if let Some(&id) = tokens.iter().find(|&&id| id >= self.vocab_size) {
            return Err(EncoderError::TokenOutOfRange {
                id,
                size: self.vocab_size,
            });
        }
        let table = tape.param(self.tok_emb)?;
        let embedded = tokens
            .iter()
            .map(|&id| tape.row(table, id))
            .collect::<Result<Vec<_>, _>>()?;
        let zero = Tensor::zeros(&[self.config.d_gru]);
        let mut hf = tape.constant(zero.clone());
        for &x in &embedded {
            hf = self.fwd.step(tape, x, hf)?;
        }
        let mut hb = tape.constant(zero);
        for &x in embedded.iter().rev() {
            hb = self.bwd.step(tape, x, hb)?;
        }
        Ok(tape.concat(&[hf, hb])?)
    }

    /// Context matrix `[I, d_ctx]`; row `i` is `c_i`.
    pub fn encode_context(&self, tape: &mut Tape, turns: &[Vec<usize>]) -> Result<Var, EncoderError> {
        if turns.is_empty() {
            return Err(EncoderError::EmptyDialogue);
        }
        let sentences = turns
            .iter()
            .map(|t| self.encode_sentence(tape, t))
            .collect::<Result<Vec<_>, _>>()?;
        let u = tape.stack(&sentences)?;
        Ok(self.att.forward(tape, u, &causal_mask(turns.len()))?)
    }

    /// Forward-only context embeddings, one per turn.
    pub fn contexts(&self, store: &ParamStore, turns: &[Vec<usize>]) -> Result<Vec<Tensor>, EncoderError> {
        let mut tape = Tape::new(store);
        let ctx = self.encode_context(&mut tape, turns)?;
        let m = tape.value(ctx);
        Ok((0..turns.len())
            .map(|i| Tensor::vector(m.row(i).to_vec()))
            .collect())
    }
}
