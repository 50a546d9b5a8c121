use std::path::Path;

use rand::Rng;

use super::lstm::{Decoder, DecoderState};
use super::{check_ids, checkpoint_meta, config_from_meta, ModelConfig};
use crate::numcore::checkpoint::Checkpoint;
use crate::numcore::{init_uniform, ParamId, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

/// Unconditional LSTM language model over the monologue corpus; supplies the
/// `L_t(w)` term of weighted-average fusion.
#[derive(Clone)]
pub struct LanguageModel {
    config: ModelConfig,
    store: ParamStore,
    decoder: Decoder,
}

impl LanguageModel {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let embedding = store.add(
            "lm.embedding",
            init_uniform(&[config.vocab_size, config.embed_dim], 0.1, rng),
        );
        let decoder = Decoder::new(
            &mut store,
            "lm",
            embedding,
            config.vocab_size,
            config.embed_dim,
            0,
            config.hidden_dim,
            config.num_layers,
            rng,
        );
        Ok(LanguageModel {
            config,
            store,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn decoder(&self) -> &Decoder {
        &self.decoder
    }

    pub fn all_params(&self) -> Vec<ParamId> {
        self.store.ids().collect()
    }

    pub fn start_state(&self) -> DecoderState {
        let h = self.config.hidden_dim;
        DecoderState {
            layers: vec![(vec![0.0; h], vec![0.0; h]); self.config.num_layers],
            context: Vec::new(),
        }
    }

    pub fn nll_tape(&self, tape: &mut Tape<'_>, batch: &[&[u32]]) -> Result<(Var, usize)> {
        if batch.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        for u in batch {
            check_ids(u, self.config.vocab_size, "utterance")?;
        }
        let zero = tape.input(Tensor::zeros(&[batch.len(), self.config.hidden_dim]))?;
        let init = vec![(zero, zero); self.config.num_layers];
        self.decoder.nll_tape(tape, init, None, batch, true)
    }

    /// Mean NLL per token (EOS included) of one utterance.
    pub fn lm_nll(&self, utterance: &[u32]) -> Result<f64> {
        let mut tape = Tape::new(&self.store);
        let (loss, _) = self.nll_tape(&mut tape, &[utterance])?;
        Ok(tape.value(loss).item())
    }

    pub fn step_logits_batch(&self, states: &[&DecoderState], prevs: &[u32]) -> Result<Vec<(Vec<f64>, DecoderState)>> {
        self.decoder.step(&self.store, states, prevs)
    }

    pub fn score_batch(&self, utterances: &[&[u32]], append_eos: bool) -> Result<Vec<(f64, usize)>> {
        let init = vec![self.start_state(); utterances.len()];
        self.decoder.score(&self.store, init, utterances, append_eos)
    }

    pub fn checkpoint(&self, vocab_hash: Option<&str>) -> Checkpoint {
        Checkpoint::from_store(&self.store, checkpoint_meta("language_model", &self.config, vocab_hash))
    }

    pub fn save(&self, path: &Path, vocab_hash: Option<&str>) -> Result<()> {
        self.checkpoint(vocab_hash).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let config = config_from_meta(&ck.meta, "language_model")?;
        let mut lm = LanguageModel::new(config, &mut crate::rng::stream(0, "load-skeleton"))?;
        ck.restore_into(&mut lm.store)?;
        Ok(lm)
    }
}
