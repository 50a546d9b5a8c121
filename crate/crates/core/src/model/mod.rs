//! LSTM encoder/decoder components: the forward/backward seq2seq pair with
//! a shared encoder, the monologue language model and the relevance
//! discriminator.

mod discriminator;
mod lm;
mod lstm;
mod seq2seq;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use discriminator::Discriminator;
pub use lm::LanguageModel;
pub use lstm::{Decoder, DecoderState, Encoder, LayerState, LstmStack};
pub use seq2seq::{Direction, Seq2SeqPair};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const NUM_SPECIALS: usize = 4;

/// Architecture hyper-parameters. The published setup is embed 300 /
/// hidden 500 / 2 layers; the defaults here are desk scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    /// Longest source accepted and longest generated sequence (EOS included).
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: NUM_SPECIALS,
            embed_dim: 32,
            hidden_dim: 64,
            num_layers: 2,
            max_len: 50,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.embed_dim == 0 || self.hidden_dim == 0 || self.num_layers == 0 {
            return Err(Error::config("model dimensions must be at least 1"));
        }
        if self.max_len < 2 {
            return Err(Error::config("max_len must leave room for BOS/EOS (>= 2)"));
        }
        Ok(())
    }
}

pub(crate) fn check_ids(seq: &[u32], vocab: usize, what: &str) -> Result<()> {
    if seq.is_empty() {
        return Err(Error::invalid(format!("{what} is empty")));
    }
    if let Some(&bad) = seq.iter().find(|&&t| t as usize >= vocab) {
        return Err(Error::invalid(format!(
            "{what}: token id {bad} outside vocabulary of {vocab}"
        )));
    }
    Ok(())
}

/// The checkpoint `meta` block shared by every model kind.
pub(crate) fn checkpoint_meta(kind: &str, config: &ModelConfig, vocab_hash: Option<&str>) -> serde_json::Value {
    serde_json::json!({
        "kind": kind,
        "config": config,
        "vocab_hash": vocab_hash,
        "specials": {"pad": PAD, "bos": BOS, "eos": EOS, "unk": UNK},
    })
}

pub(crate) fn config_from_meta(meta: &serde_json::Value, kind: &str) -> Result<ModelConfig> {
    let found = meta.get("kind").and_then(|k| k.as_str()).unwrap_or("");
    if found != kind {
        return Err(Error::invalid(format!("checkpoint holds a {found:?}, expected {kind:?}")));
    }
    let cfg: ModelConfig = serde_json::from_value(meta.get("config").cloned().unwrap_or_default())?;
    cfg.validate()?;
    Ok(cfg)
}
