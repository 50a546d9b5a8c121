//! Decoding strategies over any [`StepModel`]: beam search, diverse (Hamming
//! penalty) beam search, nucleus sampling, seq2seq/LM weighted fusion and MMI
//! reranking.
//!
//! Scores are raw sums of token log-probabilities with no length
//! normalization, so every returned `logprob` can be recomputed by
//! teacher-forced scoring.

mod beam;
mod fusion;
mod mmi;
mod nucleus;

use serde::{Deserialize, Serialize};

use crate::model::{DecoderState, Direction, LanguageModel, Seq2SeqPair, BOS, PAD};
use crate::numcore::kernels;
use crate::{Error, Result};

pub use beam::{beam_search, diverse_beam_search};
pub use fusion::{fused_decode, Fused};
pub use mmi::{mmi_rerank, mmi_select, MmiCandidate, MmiResult};
pub use nucleus::{ancestral_sample, nucleus_sample, nucleus_support, sample_support};

/// One step of an autoregressive model, batched over independent states.
pub trait StepModel {
    type State: Clone;

    fn vocab_size(&self) -> usize;

    fn init_state(&self, src: &[u32]) -> Result<Self::State>;

    /// Next-token log-probabilities (length `vocab_size`) and successor state
    /// for each `(state, previous token)`.
    fn step_log_probs(&self, states: &[&Self::State], prevs: &[u32]) -> Result<Vec<(Vec<f64>, Self::State)>>;

    /// Tokens that may never be emitted.
    fn banned(&self) -> &[u32] {
        &[PAD, BOS]
    }
}

/// A partial or complete decoded sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis<S> {
    /// Generated tokens, including the terminal EOS when present.
    pub tokens: Vec<u32>,
    /// Σ log P of `tokens` under the decoding distribution.
    pub logprob: f64,
    pub state: S,
    pub finished: bool,
}

impl<S> Hypothesis<S> {
    /// Tokens without a trailing EOS.
    pub fn content(&self) -> &[u32] {
        match self.tokens.split_last() {
            Some((&crate::model::EOS, rest)) => rest,
            _ => &self.tokens,
        }
    }

    pub fn ends_with_eos(&self) -> bool {
        self.tokens.last() == Some(&crate::model::EOS)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Beam,
    Diverse,
    Nucleus,
    Fused,
    Mmi,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub beam_size: usize,
    pub max_len: usize,
    pub nucleus_p: f64,
    pub num_groups: usize,
    pub diversity_strength: f64,
    /// Weight of the seq2seq distribution in the fused mixture.
    pub fusion_alpha: f64,
    pub mmi_lambda: f64,
    pub mmi_candidates: usize,
    pub rng_seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            strategy: Strategy::Beam,
            beam_size: 5,
            max_len: 50,
            nucleus_p: 0.9,
            num_groups: 5,
            diversity_strength: 0.3,
            fusion_alpha: 0.5,
            mmi_lambda: 0.5,
            mmi_candidates: 200,
            rng_seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::config(m.to_string()));
        if self.beam_size < 1 {
            return fail("beam_size must be >= 1");
        }
        if self.max_len < 1 {
            return fail("max_len must be >= 1");
        }
        if !(self.nucleus_p > 0.0 && self.nucleus_p <= 1.0) {
            return fail("nucleus_p must lie in (0, 1]");
        }
        if self.num_groups < 1 || self.num_groups > self.beam_size {
            return fail("num_groups must lie in [1, beam_size]");
        }
        if !(0.0..=1.0).contains(&self.fusion_alpha) {
            return fail("fusion_alpha must lie in [0, 1]");
        }
        if !(self.mmi_lambda >= 0.0) || !(self.diversity_strength >= 0.0) {
            return fail("mmi_lambda and diversity_strength must be >= 0");
        }
        if self.mmi_candidates < 1 {
            return fail("mmi_candidates must be >= 1");
        }
        Ok(())
    }
}

/// One direction of a seq2seq pair seen as a step model.
#[derive(Clone, Copy)]
pub struct DirectedModel<'a> {
    pub pair: &'a Seq2SeqPair,
    pub dir: Direction,
}

impl<'a> DirectedModel<'a> {
    pub fn new(pair: &'a Seq2SeqPair, dir: Direction) -> Self {
        DirectedModel { pair, dir }
    }
}

fn to_log_probs<S>(out: Vec<(Vec<f64>, S)>) -> Vec<(Vec<f64>, S)> {
    out.into_iter()
        .map(|(logits, s)| (kernels::log_softmax(&logits), s))
        .collect()
}

impl StepModel for DirectedModel<'_> {
    type State = DecoderState;

    fn vocab_size(&self) -> usize {
        self.pair.config().vocab_size
    }

    fn init_state(&self, src: &[u32]) -> Result<DecoderState> {
        self.pair.encode(src)
    }

    fn step_log_probs(&self, states: &[&DecoderState], prevs: &[u32]) -> Result<Vec<(Vec<f64>, DecoderState)>> {
        Ok(to_log_probs(self.pair.step_logits_batch(self.dir, states, prevs)?))
    }
}

/// The language model as a step model; the source is ignored.
#[derive(Clone, Copy)]
pub struct LmModel<'a>(pub &'a LanguageModel);

impl StepModel for LmModel<'_> {
    type State = DecoderState;

    fn vocab_size(&self) -> usize {
        self.0.config().vocab_size
    }

    fn init_state(&self, _src: &[u32]) -> Result<DecoderState> {
        Ok(self.0.start_state())
    }

    fn step_log_probs(&self, states: &[&DecoderState], prevs: &[u32]) -> Result<Vec<(Vec<f64>, DecoderState)>> {
        Ok(to_log_probs(self.0.step_logits_batch(states, prevs)?))
    }
}

/// Lifts the default PAD/BOS ban, searching the whole vocabulary.
pub struct Unrestricted<M>(pub M);

impl<M: StepModel> StepModel for Unrestricted<M> {
    type State = M::State;

    fn vocab_size(&self) -> usize {
        self.0.vocab_size()
    }

    fn init_state(&self, src: &[u32]) -> Result<M::State> {
        self.0.init_state(src)
    }

    fn step_log_probs(&self, states: &[&M::State], prevs: &[u32]) -> Result<Vec<(Vec<f64>, M::State)>> {
        self.0.step_log_probs(states, prevs)
    }

    fn banned(&self) -> &[u32] {
        &[]
    }
}

/// Masks EOS at the first step so every decode has at least one token.
pub struct NonEmpty<M>(pub M);

impl<M: StepModel> StepModel for NonEmpty<M> {
    /// Inner state and whether the next step is the first.
    type State = (M::State, bool);

    fn vocab_size(&self) -> usize {
        self.0.vocab_size()
    }

    fn init_state(&self, src: &[u32]) -> Result<Self::State> {
        Ok((self.0.init_state(src)?, true))
    }

    fn step_log_probs(&self, states: &[&Self::State], prevs: &[u32]) -> Result<Vec<(Vec<f64>, Self::State)>> {
        let inner: Vec<&M::State> = states.iter().map(|s| &s.0).collect();
        Ok(self
            .0
            .step_log_probs(&inner, prevs)?
            .into_iter()
            .zip(states)
            .map(|((mut lp, next), s)| {
                if s.1 {
                    lp[crate::model::EOS as usize] = f64::NEG_INFINITY;
                }
                (lp, (next, false))
            })
            .collect())
    }

    fn banned(&self) -> &[u32] {
        self.0.banned()
    }
}

/// Re-scores an explicit token list under `model`'s step distribution.
pub fn score_tokens<M: StepModel>(model: &M, src: &[u32], tokens: &[u32]) -> Result<f64> {
    let mut state = model.init_state(src)?;
    let mut prev = BOS;
    let mut total = 0.0;
    for &t in tokens {
        let (lp, next) = model.step_log_probs(&[&state], &[prev])?.pop().unwrap();
        total += lp[t as usize];
        state = next;
        prev = t;
    }
    Ok(total)
}


#[cfg(test)]
mod tests {
    use super::test_models::TableModel;
    use super::*;
    use crate::model::{ModelConfig, EOS};
    use crate::rng;

    fn random_pair(seed: u64, vocab: usize, scale: f64) -> Seq2SeqPair {
        let cfg = ModelConfig {
            vocab_size: vocab,
            embed_dim: 4,
            hidden_dim: 6,
            num_layers: 1,
            max_len: 10,
        };
        let mut pair = Seq2SeqPair::new(cfg, &mut rng::stream(seed, "pair")).unwrap();
        for id in pair.all_params() {
            pair.store_mut().get_mut(id).value.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        pair
    }

    fn random_lm(seed: u64, vocab: usize, scale: f64) -> LanguageModel {
        let cfg = ModelConfig {
            vocab_size: vocab,
            embed_dim: 4,
            hidden_dim: 6,
            num_layers: 1,
            max_len: 10,
        };
        let mut lm = LanguageModel::new(cfg, &mut rng::stream(seed, "lm")).unwrap();
        for id in lm.all_params() {
            lm.store_mut().get_mut(id).value.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        lm
    }

    fn greedy<M: StepModel>(m: &M, src: &[u32], max_len: usize) -> (Vec<u32>, f64) {
        let banned = m.banned().to_vec();
        let mut state = m.init_state(src).unwrap();
        let (mut toks, mut total) = (Vec::new(), 0.0);
        loop {
            let prev = toks.last().copied().unwrap_or(BOS);
            let (lp, next) = m.step_log_probs(&[&state], &[prev]).unwrap().pop().unwrap();
            let w = (0..lp.len())
                .filter(|w| !banned.contains(&(*w as u32)))
                .fold(None, |best: Option<usize>, w| match best {
                    Some(b) if lp[b] >= lp[w] => Some(b),
                    _ => Some(w),
                })
                .unwrap();
            toks.push(w as u32);
            total += lp[w];
            state = next;
            if w as u32 == EOS || toks.len() == max_len {
                return (toks, total);
            }
        }
    }

    fn cfg(beam: usize, max_len: usize) -> DecodeConfig {
        DecodeConfig {
            beam_size: beam,
            max_len,
            ..DecodeConfig::default()
        }
    }

    fn well_formed(tokens: &[u32], max_len: usize) {
        assert!(!tokens.is_empty() && tokens.len() <= max_len);
        assert!(!tokens.contains(&PAD) && !tokens.contains(&BOS));
        let eos = tokens.iter().filter(|&&t| t == EOS).count();
        assert!(eos == 0 || (eos == 1 && *tokens.last().unwrap() == EOS));
        assert!(eos == 1 || tokens.len() == max_len);
    }

    #[test]
    fn default_config_is_valid() {
        DecodeConfig::default().validate().unwrap();
        let bad = DecodeConfig {
            nucleus_p: 0.0,
            ..DecodeConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn beam_of_one_is_greedy() {
        for seed in 0..10 {
            let pair = random_pair(seed, 9, 15.0);
            let m = DirectedModel::new(&pair, Direction::Forward);
            let out = beam_search(&m, &[4, 5, 6], &cfg(1, 6)).unwrap();
            let (toks, lp) = greedy(&m, &[4, 5, 6], 6);
            assert_eq!(out[0].tokens, toks);
            assert_eq!(out[0].logprob, lp);
        }
    }

    fn enumerate_best<M: StepModel>(m: &M, src: &[u32], vocab: usize, len: usize) -> (Vec<u32>, f64) {
        let mut best: Option<(Vec<u32>, f64)> = None;
        let total = vocab.pow(len as u32);
        for code in 0..total {
            let mut c = code;
            let mut seq = Vec::new();
            for _ in 0..len {
                let t = (c % vocab) as u32;
                c /= vocab;
                seq.push(t);
                if t == EOS {
                    break;
                }
            }
            let s = score_tokens(m, src, &seq).unwrap();
            if best.as_ref().is_none_or(|b| s > b.1) {
                best = Some((seq, s));
            }
        }
        best.unwrap()
    }

    #[test]
    fn wide_beam_matches_exhaustive_enumeration() {
        for seed in 0..25 {
            let pair = random_pair(seed, 4, 20.0);
            let m = Unrestricted(DirectedModel::new(&pair, Direction::Forward));
            let out = beam_search(&m, &[2, 3, 1], &cfg(64, 3)).unwrap();
            let (seq, s) = enumerate_best(&m, &[2, 3, 1], 4, 3);
            assert!((out[0].logprob - s).abs() < 1e-12, "seed {seed}");
            assert_eq!(out[0].tokens, seq, "seed {seed}");
        }
    }

    #[test]
    fn hypotheses_rescore_along_both_paths() {
        for seed in 0..5 {
            let pair = random_pair(seed, 11, 8.0);
            for dir in [Direction::Forward, Direction::Backward] {
                let m = DirectedModel::new(&pair, dir);
                let src = [4u32, 9, 10, 5];
                let out = beam_search(&m, &src, &cfg(4, 7)).unwrap();
                assert!(out.windows(2).all(|w| w[0].logprob >= w[1].logprob));
                for h in &out {
                    well_formed(&h.tokens, 7);
                    assert!(h.finished && h.logprob <= 0.0);
                    let eos = h.ends_with_eos();
                    let (lp, n) = pair.score_batch(dir, &[(&src, h.content())], eos).unwrap()[0];
                    assert_eq!(n, h.tokens.len());
                    assert!((lp - h.logprob).abs() < 1e-9 * n as f64);
                    if eos && !h.content().is_empty() {
                        let nll = pair.sequence_nll(dir, &src, h.content()).unwrap();
                        assert!((nll * n as f64 + h.logprob).abs() < 1e-9 * n as f64);
                    }
                }
            }
        }
    }

    #[test]
    fn peaked_model_scores_near_zero() {
        let m = TableModel::peaked(8, &[(5, 0.9995)]);
        let out = beam_search(&m, &[4], &cfg(3, 12)).unwrap();
        assert_eq!(out[0].tokens, vec![5; 12]);
        assert!(out[0].logprob > -0.01 * 12.0);
    }

    #[test]
    fn non_empty_masks_only_the_first_eos() {
        let m = TableModel::peaked(8, &[(EOS, 0.9), (5, 0.05)]);
        assert_eq!(beam_search(&m, &[4], &cfg(3, 6)).unwrap()[0].tokens, vec![EOS]);
        let h = beam_search(&NonEmpty(m), &[4], &cfg(3, 6)).unwrap().remove(0);
        assert_eq!(h.tokens, vec![5, EOS]);
        assert!((h.logprob - (0.05f64.ln() + 0.9f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn single_group_and_zero_penalty_reduce_to_beam() {
        for seed in 0..6 {
            let pair = random_pair(seed, 10, 10.0);
            let m = DirectedModel::new(&pair, Direction::Forward);
            let plain = beam_search(&m, &[4, 7], &cfg(4, 6)).unwrap();
            let one = DecodeConfig {
                num_groups: 1,
                ..cfg(4, 6)
            };
            let g = diverse_beam_search(&m, &[4, 7], &one).unwrap();
            assert_eq!(g.len(), 1);
            assert_eq!(g[0], plain);

            let zero = DecodeConfig {
                num_groups: 2,
                diversity_strength: 0.0,
                ..cfg(4, 6)
            };
            let g = diverse_beam_search(&m, &[4, 7], &zero).unwrap();
            assert_eq!(g[0][0].tokens, g[1][0].tokens);
            let narrow = beam_search(&m, &[4, 7], &cfg(2, 6)).unwrap();
            assert_eq!(g[0], narrow);
        }
    }

    #[test]
    fn diverse_hypotheses_rescore() {
        let pair = random_pair(3, 12, 6.0);
        let m = DirectedModel::new(&pair, Direction::Forward);
        let c = DecodeConfig {
            beam_size: 6,
            num_groups: 3,
            diversity_strength: 2.0,
            max_len: 6,
            ..DecodeConfig::default()
        };
        for group in diverse_beam_search(&m, &[5, 6], &c).unwrap() {
            for h in group {
                well_formed(&h.tokens, 6);
                let s = score_tokens(&m, &[5, 6], &h.tokens).unwrap();
                assert!((s - h.logprob).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn fusion_endpoints_match_components() {
        for seed in 0..20 {
            let pair = random_pair(seed, 9, 5.0);
            let lm = random_lm(seed + 100, 9, 5.0);
            let s2s = DirectedModel::new(&pair, Direction::Forward);
            let lmm = LmModel(&lm);
            let src = [4u32, 6, 8];
            for (alpha, check_s2s) in [(1.0, true), (0.0, false)] {
                let f = Fused::new(s2s, lmm, alpha).unwrap();
                let mut fs = f.init_state(&src).unwrap();
                let mut ss = s2s.init_state(&src).unwrap();
                let mut ls = lmm.init_state(&src).unwrap();
                for &prev in &[BOS, 5, 7, 4] {
                    let (fl, fnext) = f.step_log_probs(&[&fs], &[prev]).unwrap().pop().unwrap();
                    let (sl, snext) = s2s.step_log_probs(&[&ss], &[prev]).unwrap().pop().unwrap();
                    let (ll, lnext) = lmm.step_log_probs(&[&ls], &[prev]).unwrap().pop().unwrap();
                    let target = if check_s2s { &sl } else { &ll };
                    for (a, b) in fl.iter().zip(target) {
                        assert!((a.exp() - b.exp()).abs() < 1e-12);
                    }
                    fs = fnext;
                    ss = snext;
                    ls = lnext;
                }
            }
            let c = DecodeConfig {
                fusion_alpha: 1.0,
                ..cfg(3, 6)
            };
            let fused = fused_decode(s2s, lmm, &src, &c).unwrap();
            let plain = beam_search(&s2s, &src, &c).unwrap();
            assert_eq!(fused.tokens, plain[0].tokens);
        }
    }

    #[test]
    fn fusion_at_zero_ignores_source() {
        let pair = random_pair(1, 9, 5.0);
        let lm = random_lm(2, 9, 5.0);
        let c = DecodeConfig {
            fusion_alpha: 0.0,
            ..cfg(3, 6)
        };
        let a = fused_decode(DirectedModel::new(&pair, Direction::Forward), LmModel(&lm), &[4, 5], &c).unwrap();
        let b = fused_decode(DirectedModel::new(&pair, Direction::Forward), LmModel(&lm), &[8, 7, 6], &c).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.logprob, b.logprob);
    }

    #[test]
    fn fusion_rejects_vocab_mismatch() {
        let pair = random_pair(1, 9, 1.0);
        let lm = random_lm(2, 10, 1.0);
        let r = Fused::new(DirectedModel::new(&pair, Direction::Forward), LmModel(&lm), 0.5);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn nucleus_frequencies_over_many_draws() {
        let dist = [(4u32, 0.5), (5, 0.3), (6, 0.15), (7, 0.05)];
        let m = TableModel::first_step(8, &dist);
        let mut r = rng::stream(7, "nucleus");
        for (p, expect) in [(0.9, [0.5 / 0.95, 0.3 / 0.95, 0.15 / 0.95, 0.0]), (1.0, [0.5, 0.3, 0.15, 0.05])] {
            let c = DecodeConfig {
                nucleus_p: p,
                max_len: 1,
                ..DecodeConfig::default()
            };
            let mut counts = [0usize; 4];
            let n = 100_000;
            for _ in 0..n {
                let h = nucleus_sample(&m, &[4], &c, &mut r).unwrap();
                counts[(h.tokens[0] - 4) as usize] += 1;
                assert_eq!(h.logprob, dist[(h.tokens[0] - 4) as usize].1.ln());
            }
            for k in 0..4 {
                assert!((counts[k] as f64 / n as f64 - expect[k]).abs() < 0.01, "p={p} k={k}");
            }
        }
    }

    #[test]
    fn samples_are_well_formed_and_rescore() {
        let pair = random_pair(4, 10, 4.0);
        let m = DirectedModel::new(&pair, Direction::Forward);
        let mut r = rng::stream(3, "s");
        let c = DecodeConfig {
            nucleus_p: 0.8,
            max_len: 8,
            ..DecodeConfig::default()
        };
        for _ in 0..40 {
            let h = nucleus_sample(&m, &[4, 5], &c, &mut r).unwrap();
            well_formed(&h.tokens, 8);
            assert!((score_tokens(&m, &[4, 5], &h.tokens).unwrap() - h.logprob).abs() < 1e-9);
        }
    }

    #[test]
    fn mmi_degenerate_cases() {
        let fwd = random_pair(5, 10, 4.0);
        let bwd = random_pair(6, 10, 4.0);
        let src = [4u32, 8, 9];
        let base = DecodeConfig {
            max_len: 6,
            mmi_candidates: 30,
            ..DecodeConfig::default()
        };

        let zero = DecodeConfig { mmi_lambda: 0.0, ..base.clone() };
        let res = mmi_rerank(&fwd, &bwd, &src, &zero, &mut rng::stream(1, "m")).unwrap();
        let top = res.candidates.iter().map(|c| c.forward_logprob).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(res.best().forward_logprob, top);

        let res = mmi_rerank(&fwd, &bwd, &src, &base, &mut rng::stream(1, "m")).unwrap();
        for (i, a) in res.candidates.iter().enumerate() {
            assert!(res.candidates[i + 1..].iter().all(|b| b.hyp.tokens != a.hyp.tokens));
            if !a.hyp.content().is_empty() {
                let (b, _) = bwd.score_batch(Direction::Backward, &[(a.hyp.content(), &src)], true).unwrap()[0];
                assert!((a.backward_logprob - b).abs() < 1e-12);
                assert!((a.score - (a.forward_logprob + 0.5 * b)).abs() < 1e-12);
            }
        }
        assert!(res.candidates.iter().all(|c| c.score <= res.best().score));

        let one = DecodeConfig { mmi_candidates: 1, mmi_lambda: 3.0, ..base };
        let res = mmi_rerank(&fwd, &bwd, &src, &one, &mut rng::stream(2, "m")).unwrap();
        let sample = ancestral_sample(&DirectedModel::new(&fwd, Direction::Forward), &src, 6, &mut rng::stream(2, "m")).unwrap();
        assert_eq!(res.candidates.len(), 1);
        assert_eq!(res.best().hyp.tokens, sample.tokens);
    }
}
