use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::lstm::{Decoder, DecoderState, Encoder};
use super::{checkpoint_meta, config_from_meta, ModelConfig};
use crate::numcore::checkpoint::Checkpoint;
use crate::numcore::{ParamId, ParamStore, Tape, Var};
use crate::{Error, Result};

/// Which half of the pair: forward maps context → response (`P_f`), backward
/// maps response → context (`P_b`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    pub fn opposite(self) -> Direction {
        match self {
            Direction::Forward => Direction::Backward,
            Direction::Backward => Direction::Forward,
        }
    }

    fn index(self) -> usize {
        match self {
            Direction::Forward => 0,
            Direction::Backward => 1,
        }
    }
}

/// Forward and backward seq2seq models over one shared encoder (and its
/// embedding table). The decoders are separate and never share parameters.
///
/// There is no attention: each decoder starts from the encoder's final state
/// and receives the final top-layer encoder output alongside every input
/// embedding.
#[derive(Clone)]
pub struct Seq2SeqPair {
    config: ModelConfig,
    store: ParamStore,
    encoder: Encoder,
    decoders: [Decoder; 2],
}

impl Seq2SeqPair {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let c = &config;
        let encoder = Encoder::new(
            &mut store,
            "encoder",
            c.vocab_size,
            c.embed_dim,
            c.hidden_dim,
            c.num_layers,
            c.max_len,
            rng,
        );
        let mut make = |prefix: &str, store: &mut ParamStore| {
            Decoder::new(
                store,
                prefix,
                encoder.embedding,
                c.vocab_size,
                c.embed_dim,
                c.hidden_dim,
                c.hidden_dim,
                c.num_layers,
                rng,
            )
        };
        let decoder_f = make("decoder_f", &mut store);
        let decoder_b = make("decoder_b", &mut store);
        Ok(Seq2SeqPair {
            config,
            store,
            encoder,
            decoders: [decoder_f, decoder_b],
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

    pub fn decoder(&self, dir: Direction) -> &Decoder {
        &self.decoders[dir.index()]
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn encoder_params(&self) -> Vec<ParamId> {
        self.encoder.param_ids()
    }

    pub fn decoder_params(&self, dir: Direction) -> Vec<ParamId> {
        self.decoder(dir).param_ids()
    }

    /// Everything a loss in direction `dir` can reach: the shared encoder
    /// plus that direction's decoder.
    pub fn direction_params(&self, dir: Direction) -> Vec<ParamId> {
        let mut ids = self.encoder_params();
        ids.extend(self.decoder_params(dir));
        ids
    }

    pub fn all_params(&self) -> Vec<ParamId> {
        self.store.ids().collect()
    }

    /// Mean teacher-forced NLL per target token (EOS included) over a batch of
    /// `(source, target)` pairs, recorded on `tape`.
    pub fn nll_tape(&self, tape: &mut Tape<'_>, dir: Direction, batch: &[(&[u32], &[u32])]) -> Result<(Var, usize)> {
        if batch.iter().any(|(_, t)| t.is_empty()) {
            return Err(Error::invalid("target is empty"));
        }
        let srcs: Vec<&[u32]> = batch.iter().map(|(s, _)| *s).collect();
        let tgts: Vec<&[u32]> = batch.iter().map(|(_, t)| *t).collect();
        let init = self.encoder.encode_tape(tape, &srcs)?;
        let context = init.last().unwrap().0;
        self.decoder(dir).nll_tape(tape, init, Some(context), &tgts, true)
    }

    /// Teacher-forced NLL of one pair, mean per target token.
    pub fn sequence_nll(&self, dir: Direction, src: &[u32], tgt: &[u32]) -> Result<f64> {
        self.batch_nll(dir, &[(src, tgt)])
    }

    /// Token-weighted mean NLL over a batch (tape path).
    pub fn batch_nll(&self, dir: Direction, batch: &[(&[u32], &[u32])]) -> Result<f64> {
        let mut tape = Tape::new(&self.store);
        let (loss, _) = self.nll_tape(&mut tape, dir, batch)?;
        Ok(tape.value(loss).item())
    }

    /// Autoencoding loss: reconstruct `utterance` with the forward decoder.
    pub fn autoencode_nll(&self, utterance: &[u32]) -> Result<f64> {
        self.sequence_nll(Direction::Forward, utterance, utterance)
    }

    /// Decoder seed state from the shared encoder.
    pub fn encode(&self, src: &[u32]) -> Result<DecoderState> {
        Ok(self.encode_batch(&[src])?.pop().unwrap())
    }

    pub fn encode_batch(&self, srcs: &[&[u32]]) -> Result<Vec<DecoderState>> {
        let states = self.encoder.encode(&self.store, srcs)?;
        let context = states.last().unwrap().h.clone();
        Ok(DecoderState::split_batch(&states, Some(&context)))
    }

    pub fn step_logits(&self, dir: Direction, state: &DecoderState, prev: u32) -> Result<(Vec<f64>, DecoderState)> {
        Ok(self.step_logits_batch(dir, &[state], &[prev])?.pop().unwrap())
    }

    pub fn step_logits_batch(
        &self,
        dir: Direction,
        states: &[&DecoderState],
        prevs: &[u32],
    ) -> Result<Vec<(Vec<f64>, DecoderState)>> {
        self.decoder(dir).step(&self.store, states, prevs)
    }

    /// `(log P(tokens | src), len)` per pair along the tape-free path. With
    /// `append_eos`, an EOS is scored after each token list.
    pub fn score_batch(
        &self,
        dir: Direction,
        pairs: &[(&[u32], &[u32])],
        append_eos: bool,
    ) -> Result<Vec<(f64, usize)>> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        let srcs: Vec<&[u32]> = pairs.iter().map(|(s, _)| *s).collect();
        let tgts: Vec<&[u32]> = pairs.iter().map(|(_, t)| *t).collect();
        let init = self.encode_batch(&srcs)?;
        self.decoder(dir).score(&self.store, init, &tgts, append_eos)
    }

    pub fn save(&self, path: &Path, vocab_hash: Option<&str>) -> Result<()> {
        self.checkpoint(vocab_hash).save(path)
    }

    pub fn checkpoint(&self, vocab_hash: Option<&str>) -> Checkpoint {
        Checkpoint::from_store(&self.store, checkpoint_meta("seq2seq_pair", &self.config, vocab_hash))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config = config_from_meta(&ck.meta, "seq2seq_pair")?;
        let mut pair = Seq2SeqPair::new(config, &mut crate::rng::stream(0, "load-skeleton"))?;
        ck.restore_into(&mut pair.store)?;
        Ok(pair)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EOS;
    use crate::numcore::{gradcheck, init_uniform, kernels, Adam};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(seed: u64) -> Seq2SeqPair {
        let cfg = ModelConfig {
            vocab_size: 9,
            embed_dim: 4,
            hidden_dim: 5,
            num_layers: 2,
            max_len: 8,
        };
        Seq2SeqPair::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn zero_output(pair: &mut Seq2SeqPair, dir: Direction) {
        let d = pair.decoder(dir);
        let (w, b) = (d.out_w, d.out_b);
        pair.store_mut().get_mut(w).value.fill(0.0);
        pair.store_mut().get_mut(b).value.fill(0.0);
    }

    #[test]
    fn single_token_encoding_is_one_lstm_step() {
        let pair = tiny(1);
        let state = pair.encode(&[5]).unwrap();
        let store = pair.store();
        let emb = kernels::embedding_rows(store.value(pair.encoder().embedding), &[5]).unwrap();
        let stepped = pair.encoder().lstm.step(store, &emb, &pair.encoder().lstm.zero_state(1), None).unwrap();
        for (l, s) in stepped.iter().enumerate() {
            assert_eq!(state.layers[l].0, s.h.row(0));
            assert_eq!(state.layers[l].1, s.c.row(0));
        }
        assert_eq!(state.context, stepped[1].h.row(0));
    }

    #[test]
    fn encoding_is_deterministic_and_order_sensitive() {
        let pair = tiny(2);
        let a = pair.encode(&[4, 5, 6]).unwrap();
        let b = pair.encode(&[4, 5, 6]).unwrap();
        let bits = |s: &DecoderState| s.context.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        let c = pair.encode(&[6, 5, 4]).unwrap();
        assert_ne!(a.context, c.context);
    }

    #[test]
    fn rejects_out_of_vocab_and_empty() {
        let pair = tiny(3);
        assert!(matches!(pair.encode(&[9]), Err(Error::InvalidInput(_))));
        assert!(matches!(pair.encode(&[]), Err(Error::InvalidInput(_))));
        assert!(matches!(
            pair.sequence_nll(Direction::Forward, &[4], &[]),
            Err(Error::InvalidInput(_))
        ));
        assert!(pair.encode(&[4; 9]).is_err());
    }

    #[test]
    fn uniform_output_gives_ln_v() {
        let mut pair = tiny(4);
        zero_output(&mut pair, Direction::Forward);
        let state = pair.encode(&[4, 7]).unwrap();
        let (logits, _) = pair.step_logits(Direction::Forward, &state, 1).unwrap();
        let mut p = logits.clone();
        kernels::softmax_in_place(&mut p);
        assert!(p.iter().all(|&v| (v - 1.0 / 9.0).abs() < 1e-15));
        let nll = pair.sequence_nll(Direction::Forward, &[4, 7], &[5, 6, 8]).unwrap();
        assert!((nll - 9f64.ln()).abs() < 1e-12);
        let ae = pair.autoencode_nll(&[5, 6]).unwrap();
        assert!((ae - 9f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn next_token_distributions_sum_to_one() {
        let pair = tiny(5);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let len = rng.random_range(1..=8);
            let src: Vec<u32> = (0..len).map(|_| rng.random_range(0..9)).collect();
            let mut state = pair.encode(&src).unwrap();
            for h in state.layers.iter_mut() {
                h.0.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
            }
            let (logits, _) = pair.step_logits(Direction::Backward, &state, rng.random_range(0..9)).unwrap();
            let mut p = logits;
            kernels::softmax_in_place(&mut p);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn nll_decomposes_into_step_cross_entropies() {
        let pair = tiny(6);
        let (src, tgt) = (vec![4u32, 5, 6], vec![7u32, 8]);
        let mut state = pair.encode(&src).unwrap();
        let mut prev = crate::model::BOS;
        let mut terms = Vec::new();
        for &y in tgt.iter().chain([EOS].iter()) {
            let (logits, next) = pair.step_logits(Direction::Forward, &state, prev).unwrap();
            terms.push(kernels::log_sum_exp(&logits) - logits[y as usize]);
            state = next;
            prev = y;
        }
        let mean = terms.iter().sum::<f64>() / terms.len() as f64;
        let nll = pair.sequence_nll(Direction::Forward, &src, &tgt).unwrap();
        assert!((nll - mean).abs() < 1e-12);
        let scored = pair.score_batch(Direction::Forward, &[(&src, &tgt)], true).unwrap();
        assert!((-scored[0].0 / 3.0 - nll).abs() < 1e-12);
        assert!(nll >= 0.0);
    }

    #[test]
    fn batch_loss_is_token_weighted_mean() {
        let pair = tiny(7);
        let a: (&[u32], &[u32]) = (&[4, 5], &[6]);
        let b: (&[u32], &[u32]) = (&[7, 8, 4, 5], &[6, 7, 8, 4]);
        let la = pair.sequence_nll(Direction::Forward, a.0, a.1).unwrap();
        let lb = pair.sequence_nll(Direction::Forward, b.0, b.1).unwrap();
        let joint = pair.batch_nll(Direction::Forward, &[a, b]).unwrap();
        assert!((joint - (2.0 * la + 5.0 * lb) / 7.0).abs() < 1e-12);
    }

    #[test]
    fn full_loss_matches_finite_differences() {
        for seed in 0..10u64 {
            let mut pair = tiny(100 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ids = pair.all_params();
            for &id in &ids {
                let shape = pair.store().value(id).shape().to_vec();
                let v = init_uniform(&shape, 0.5, &mut rng);
                pair.store_mut().set_value(id, v).unwrap();
            }
            let batch: Vec<(Vec<u32>, Vec<u32>)> = vec![(vec![4, 5, 6], vec![7, 8]), (vec![3], vec![4, 5, 6])];
            let skeleton = pair.clone();
            let checks = gradcheck::check(pair.store_mut(), &ids, 1e-5, |tape| {
                let b: Vec<(&[u32], &[u32])> = batch.iter().map(|(s, t)| (&s[..], &t[..])).collect();
                let (f, _) = skeleton.nll_tape(tape, Direction::Forward, &b)?;
                let (g, _) = skeleton.nll_tape(tape, Direction::Backward, &b)?;
                tape.add(f, g)
            })
            .unwrap();
            for c in checks {
                assert!(c.rel_error < 1e-4, "seed {seed} {}: {}", c.name, c.rel_error);
            }
        }
    }

    #[test]
    fn backward_step_leaves_forward_decoder_bitwise() {
        let mut pair = tiny(8);
        let fwd = pair.decoder_params(Direction::Forward);
        let enc = pair.encoder_params();
        let bwd = pair.decoder_params(Direction::Backward);
        let (f0, e0, b0) = (pair.store().value_bits(&fwd), pair.store().value_bits(&enc), pair.store().value_bits(&bwd));
        let grads = {
            let mut tape = Tape::new(pair.store());
            let (loss, _) = pair.nll_tape(&mut tape, Direction::Backward, &[(&[4, 5], &[6, 7])]).unwrap();
            tape.backward(loss).unwrap()
        };
        pair.store_mut().accumulate(&grads);
        let group = pair.direction_params(Direction::Backward);
        Adam::new(0.01).step(pair.store_mut(), &group).unwrap();
        assert_eq!(pair.store().value_bits(&fwd), f0);
        assert_ne!(pair.store().value_bits(&enc), e0);
        assert_ne!(pair.store().value_bits(&bwd), b0);
        assert!(grads.get(fwd[0]).is_none());
    }

    #[test]
    fn overfits_one_pair() {
        let cfg = ModelConfig {
            vocab_size: 12,
            embed_dim: 16,
            hidden_dim: 32,
            num_layers: 2,
            max_len: 8,
        };
        let mut pair = Seq2SeqPair::new(cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let (src, tgt) = (vec![4u32, 9, 5], vec![7u32, 10, 11, 6]);
        let group = pair.direction_params(Direction::Forward);
        let adam = Adam::new(0.01);
        for _ in 0..500 {
            let grads = {
                let mut tape = Tape::new(pair.store());
                let (loss, _) = pair.nll_tape(&mut tape, Direction::Forward, &[(&src, &tgt)]).unwrap();
                tape.backward(loss).unwrap()
            };
            pair.store_mut().accumulate(&grads);
            crate::numcore::clip_global_norm(pair.store_mut(), &group, 5.0);
            adam.step(pair.store_mut(), &group).unwrap();
        }
        assert!(pair.sequence_nll(Direction::Forward, &src, &tgt).unwrap() < 0.05);
    }

    #[test]
    fn checkpoint_round_trip() {
        let pair = tiny(10);
        let ck = pair.checkpoint(Some("abc"));
        let bytes = ck.to_bytes().unwrap();
        let loaded = Seq2SeqPair::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(loaded.checkpoint(Some("abc")).to_bytes().unwrap(), bytes);
        assert_eq!(loaded.config(), pair.config());
    }
}
