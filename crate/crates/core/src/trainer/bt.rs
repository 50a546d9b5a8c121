use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{mean_nll, require, train_direction, PhaseReport, TrainConfig};
use crate::corpus::{MonoCorpus, PairedCorpus};
use crate::decode::{beam_search, DecodeConfig, DirectedModel, NonEmpty};
use crate::model::{Direction, Seq2SeqPair};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BtConfig {
    pub iterations: usize,
    pub pseudo_beam_size: usize,
    /// Optimization settings for every backward and forward phase;
    /// `max_steps` caps each phase.
    pub phase: TrainConfig,
}

impl Default for BtConfig {
    fn default() -> Self {
        BtConfig {
            iterations: 4,
            pseudo_beam_size: 5,
            phase: TrainConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    BackwardPhase,
    ForwardPhase,
}

/// A decoded source paired with a verbatim real target.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoPair {
    pub source: Vec<u32>,
    pub target: Vec<u32>,
    pub origin: Origin,
}

/// Per-iteration validation perplexities; entry 0 is taken right after
/// initialization.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub fwd_ppl: Vec<f64>,
    pub bwd_ppl: Vec<f64>,
}

impl IterationTrace {
    pub fn len(&self) -> usize {
        self.fwd_ppl.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fwd_ppl.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,fwd_ppl,bwd_ppl\n");
        for (i, (f, b)) in self.fwd_ppl.iter().zip(&self.bwd_ppl).enumerate() {
            writeln!(s, "{i},{f},{b}").unwrap();
        }
        s
    }
}

#[derive(Clone, Debug, Default)]
pub struct BtOutcome {
    pub trace: IterationTrace,
    /// `(backward phase, forward phase)` reports per completed iteration.
    pub phases: Vec<(PhaseReport, PhaseReport)>,
    pub stopped_early: bool,
}

/// Beam-decodes a non-empty source for every target with the `generator`
/// direction.
pub fn make_pseudo_pairs(
    pair: &Seq2SeqPair,
    generator: Direction,
    targets: &[Vec<u32>],
    beam_size: usize,
    origin: Origin,
) -> Result<Vec<PseudoPair>> {
    let model = NonEmpty(DirectedModel::new(pair, generator));
    let cfg = DecodeConfig {
        beam_size,
        max_len: pair.config().max_len,
        ..DecodeConfig::default()
    };
    let mut out = Vec::with_capacity(targets.len());
    for t in targets {
        let best = beam_search(&model, t, &cfg)?.swap_remove(0);
        out.push(PseudoPair {
            source: best.content().to_vec(),
            target: t.clone(),
            origin,
        });
    }
    Ok(out)
}

fn as_pairs(p: &[PseudoPair]) -> Vec<(Vec<u32>, Vec<u32>)> {
    p.iter().map(|x| (x.source.clone(), x.target.clone())).collect()
}

/// Trains `trained` on pseudo pairs whose sources come from the opposite,
/// frozen direction, then checks the frozen decoder is bitwise unchanged.
fn phase(
    pair: &mut Seq2SeqPair,
    trained: Direction,
    targets: &[Vec<u32>],
    valid_targets: &[Vec<u32>],
    cfg: &BtConfig,
    origin: Origin,
    stream: &str,
) -> Result<(PhaseReport, Vec<PseudoPair>)> {
    let frozen_dir = trained.opposite();
    let frozen = pair.decoder_params(frozen_dir);
    let before = pair.store().value_bits(&frozen);
    let train = make_pseudo_pairs(pair, frozen_dir, targets, cfg.pseudo_beam_size, origin)?;
    let valid = make_pseudo_pairs(pair, frozen_dir, valid_targets, cfg.pseudo_beam_size, origin)?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::invalid("no pseudo pairs to train or validate on"));
    }
    let report = train_direction(pair, trained, &as_pairs(&train), &as_pairs(&valid), &cfg.phase, stream)?;
    if pair.store().value_bits(&frozen) != before {
        return Err(Error::Invariant(format!("frozen {frozen_dir:?} decoder changed during phase")));
    }
    Ok((report, train))
}

/// Trains P_f on `(b(T), T)` for monologue utterances `T`, with `b` the
/// frozen backward model's beam decode.
pub fn backward_phase(
    pair: &mut Seq2SeqPair,
    mono: &MonoCorpus,
    mono_valid: &MonoCorpus,
    cfg: &BtConfig,
    iteration: usize,
) -> Result<(PhaseReport, Vec<PseudoPair>)> {
    require(!mono.is_empty(), "monologue corpus")?;
    require(!mono_valid.is_empty(), "monologue validation corpus")?;
    let max_len = pair.config().max_len;
    phase(
        pair,
        Direction::Forward,
        &mono.truncated(max_len).utterances,
        &mono_valid.truncated(max_len).utterances,
        cfg,
        Origin::BackwardPhase,
        &format!("shuffle.bt.backward.{iteration}"),
    )
}

/// Trains P_b on `(f(X), X)` for contexts `X` of `D`; responses are unused.
pub fn forward_phase(
    pair: &mut Seq2SeqPair,
    paired: &PairedCorpus,
    paired_valid: &PairedCorpus,
    cfg: &BtConfig,
    iteration: usize,
) -> Result<(PhaseReport, Vec<PseudoPair>)> {
    require(!paired.is_empty(), "paired corpus")?;
    require(!paired_valid.is_empty(), "paired validation corpus")?;
    let max_len = pair.config().max_len;
    phase(
        pair,
        Direction::Backward,
        &paired.truncated(max_len).contexts(),
        &paired_valid.truncated(max_len).contexts(),
        cfg,
        Origin::ForwardPhase,
        &format!("shuffle.bt.forward.{iteration}"),
    )
}

/// `(forward ppl on (b(T_v), T_v), backward ppl on (f(X_v), X_v))` with fresh
/// pseudo sources from the current model.
pub fn measure(pair: &Seq2SeqPair, mono_valid: &MonoCorpus, paired_valid: &PairedCorpus, beam: usize) -> Result<(f64, f64)> {
    let max_len = pair.config().max_len;
    let f = make_pseudo_pairs(pair, Direction::Backward, &mono_valid.truncated(max_len).utterances, beam, Origin::BackwardPhase)?;
    let b = make_pseudo_pairs(pair, Direction::Forward, &paired_valid.truncated(max_len).contexts(), beam, Origin::ForwardPhase)?;
    if f.is_empty() || b.is_empty() {
        return Err(Error::invalid("no pseudo pairs to train or validate on"));
    }
    Ok((
        mean_nll(pair, Direction::Forward, &as_pairs(&f))?.exp(),
        mean_nll(pair, Direction::Backward, &as_pairs(&b))?.exp(),
    ))
}

/// Alternates backward and forward phases. `on_iteration(k, pair, trace)`
/// runs after the trace entry for iteration `k` (0 = before any phase) is
/// recorded. Stops early once forward perplexity has risen twice in a row.
pub fn run_bt(
    pair: &mut Seq2SeqPair,
    paired: &PairedCorpus,
    paired_valid: &PairedCorpus,
    mono: &MonoCorpus,
    mono_valid: &MonoCorpus,
    cfg: &BtConfig,
    mut on_iteration: impl FnMut(usize, &Seq2SeqPair, &IterationTrace) -> Result<()>,
) -> Result<BtOutcome> {
    cfg.phase.validate()?;
    if cfg.pseudo_beam_size == 0 {
        return Err(Error::config("pseudo_beam_size must be >= 1"));
    }
    let mut out = BtOutcome::default();
    let (f, b) = measure(pair, mono_valid, paired_valid, cfg.pseudo_beam_size)?;
    out.trace.fwd_ppl.push(f);
    out.trace.bwd_ppl.push(b);
    on_iteration(0, pair, &out.trace)?;
    for k in 1..=cfg.iterations {
        let (bw, _) = backward_phase(pair, mono, mono_valid, cfg, k)?;
        let (fw, _) = forward_phase(pair, paired, paired_valid, cfg, k)?;
        out.phases.push((bw, fw));
        let (f, b) = measure(pair, mono_valid, paired_valid, cfg.pseudo_beam_size)?;
        out.trace.fwd_ppl.push(f);
        out.trace.bwd_ppl.push(b);
        on_iteration(k, pair, &out.trace)?;
        let p = &out.trace.fwd_ppl;
        if k >= 2 && p[k] > p[k - 1] && p[k - 1] > p[k - 2] {
            out.stopped_early = true;
            break;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng;

    fn pair(seed: u64, scale: f64) -> Seq2SeqPair {
        let cfg = ModelConfig {
            vocab_size: 9,
            embed_dim: 4,
            hidden_dim: 6,
            num_layers: 1,
            max_len: 5,
        };
        let mut p = Seq2SeqPair::new(cfg, &mut rng::stream(seed, "init")).unwrap();
        for id in p.all_params() {
            p.store_mut().get_mut(id).value.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        p
    }

    fn data() -> (PairedCorpus, MonoCorpus) {
        (
            PairedCorpus {
                pairs: vec![(vec![4, 5], vec![6, 7]), (vec![5, 6, 7], vec![8]), (vec![8, 4], vec![4, 4, 5])],
            },
            MonoCorpus {
                utterances: vec![vec![7, 8, 4], vec![5], vec![6, 6, 4, 8]],
            },
        )
    }

    fn cfg(steps: usize, iterations: usize) -> BtConfig {
        BtConfig {
            iterations,
            pseudo_beam_size: 3,
            phase: TrainConfig {
                max_steps: steps,
                eval_every: 4,
                batch_size: 2,
                ..TrainConfig::default()
            },
        }
    }

    #[test]
    fn zero_step_phases_change_nothing() {
        let (d, t) = data();
        let mut p = pair(1, 5.0);
        let all = p.all_params();
        let before = p.store().value_bits(&all);
        backward_phase(&mut p, &t, &t, &cfg(0, 1), 1).unwrap();
        forward_phase(&mut p, &d, &d, &cfg(0, 1), 1).unwrap();
        assert_eq!(p.store().value_bits(&all), before);
    }

    #[test]
    fn forward_phase_pairs_are_decoded_contexts() {
        let (d, _) = data();
        let mut p = pair(2, 5.0);
        let snapshot = p.clone();
        let (_, pseudo) = forward_phase(&mut p, &d, &d, &cfg(3, 1), 1).unwrap();
        let model = NonEmpty(DirectedModel::new(&snapshot, Direction::Forward));
        let dc = DecodeConfig {
            beam_size: 3,
            max_len: 5,
            ..DecodeConfig::default()
        };
        let mut expected = Vec::new();
        for (x, _) in &d.pairs {
            let h = beam_search(&model, x, &dc).unwrap().swap_remove(0);
            assert!(!h.content().is_empty());
            expected.push((h.content().to_vec(), x.clone()));
        }
        let got: Vec<(Vec<u32>, Vec<u32>)> = pseudo.iter().map(|q| (q.source.clone(), q.target.clone())).collect();
        assert_eq!(got, expected);
        assert!(pseudo.iter().all(|q| q.origin == Origin::ForwardPhase && d.pairs.iter().any(|(x, _)| *x == q.target)));
    }

    fn enumerate_argmax(p: &Seq2SeqPair, src: &[u32], max_len: usize) -> Vec<u32> {
        let allowed: Vec<u32> = (2..9).collect();
        let mut best = (Vec::new(), f64::NEG_INFINITY);
        let mut stack: Vec<Vec<u32>> = (3..9).map(|t| vec![t]).collect();
        while let Some(seq) = stack.pop() {
            let done = *seq.last().unwrap() == crate::model::EOS || seq.len() == max_len;
            if done {
                let s = crate::decode::score_tokens(&DirectedModel::new(p, Direction::Backward), src, &seq).unwrap();
                if s > best.1 {
                    best = (seq, s);
                }
            } else {
                for &t in &allowed {
                    let mut n = seq.clone();
                    n.push(t);
                    stack.push(n);
                }
            }
        }
        let mut s = best.0;
        if s.last() == Some(&crate::model::EOS) {
            s.pop();
        }
        s
    }

    #[test]
    fn peaked_backward_model_pseudo_source_is_exhaustive_argmax() {
        for seed in 0..5 {
            let p = pair(seed, 40.0);
            let t = vec![6u32, 7, 8];
            let pseudo = make_pseudo_pairs(&p, Direction::Backward, std::slice::from_ref(&t), 5, Origin::BackwardPhase).unwrap();
            assert_eq!(pseudo[0].source, enumerate_argmax(&p, &t, 5), "seed {seed}");
            assert_eq!(pseudo[0].target, t);
        }
    }

    #[test]
    fn zero_iterations_only_measure() {
        let (d, t) = data();
        let mut p = pair(3, 5.0);
        let before = p.store().value_bits(&p.all_params());
        let mut calls = Vec::new();
        let out = run_bt(&mut p, &d, &d, &t, &t, &cfg(5, 0), |k, _, _| {
            calls.push(k);
            Ok(())
        })
        .unwrap();
        assert_eq!(out.trace.len(), 1);
        assert_eq!(calls, vec![0]);
        assert_eq!(p.store().value_bits(&p.all_params()), before);
        assert_eq!(out.trace.to_csv().lines().count(), 2);
        let (f, b) = measure(&p, &t, &d, 3).unwrap();
        assert_eq!((out.trace.fwd_ppl[0], out.trace.bwd_ppl[0]), (f, b));
    }

    #[test]
    fn runs_are_bit_reproducible() {
        let (d, t) = data();
        let run = || {
            let mut p = pair(4, 5.0);
            let out = run_bt(&mut p, &d, &d, &t, &t, &cfg(6, 2), |_, _, _| Ok(())).unwrap();
            (p.checkpoint(None).to_bytes().unwrap(), out.trace.to_csv())
        };
        assert_eq!(run(), run());
    }
}
