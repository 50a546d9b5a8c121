//! Training regimes: joint initialization, iterative back translation,
//! multi-task training, and helpers for the language model and the
//! discriminator.

mod bt;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{MonoCorpus, PairedCorpus};
use crate::model::{Direction, Discriminator, LanguageModel, Seq2SeqPair};
use crate::numcore::{backward, clip_global_norm, Adam, ParamId, ParamStore, Tape, Tensor, Var};
use crate::rng::{self, StreamRng};
use crate::{Error, Result};

pub use bt::{
    backward_phase, forward_phase, make_pseudo_pairs, measure, run_bt, BtConfig, BtOutcome, IterationTrace, Origin,
    PseudoPair,
};

/// Optimization settings shared by every phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    pub patience: usize,
    /// Minimum relative validation improvement that resets patience.
    pub conv_eps: f64,
    pub clip_norm: f64,
    /// Stop as soon as validation loss reaches this value.
    pub target_valid_loss: Option<f64>,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.01,
            batch_size: 16,
            max_steps: 2000,
            eval_every: 200,
            patience: 3,
            conv_eps: 1e-3,
            clip_norm: 5.0,
            target_valid_loss: None,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::config("learning_rate >= 0, batch_size >= 1 and eval_every >= 1 required"));
        }
        if !(self.conv_eps > 0.0) || !(self.clip_norm > 0.0) {
            return Err(Error::config("conv_eps and clip_norm must be > 0"));
        }
        if self.patience == 0 {
            return Err(Error::config("patience must be >= 1"));
        }
        Ok(())
    }
}

/// Anything owning a parameter store.
pub trait HasParams {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
}

macro_rules! has_params {
    ($($t:ty),*) => {$(
        impl HasParams for $t {
            fn params(&self) -> &ParamStore {
                self.store()
            }
            fn params_mut(&mut self) -> &mut ParamStore {
                self.store_mut()
            }
        }
    )*};
}
has_params!(Seq2SeqPair, LanguageModel, Discriminator);

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub steps: usize,
    /// `(step, validation loss)`; the first entry is taken before training.
    pub evals: Vec<(usize, f64)>,
    pub best_valid: f64,
    pub stopped_early: bool,
}

/// Endless shuffled pass over `0..n`, reshuffled every epoch.
pub struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    rng: StreamRng,
}

impl EpochSampler {
    pub fn new(n: usize, rng: StreamRng) -> Self {
        EpochSampler {
            order: (0..n).collect(),
            pos: n,
            rng,
        }
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size.min(self.order.len()) {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn snapshot(store: &ParamStore, group: &[ParamId]) -> Vec<Tensor> {
    group.iter().map(|&id| store.value(id).clone()).collect()
}

fn restore(store: &mut ParamStore, group: &[ParamId], values: Vec<Tensor>) -> Result<()> {
    for (&id, v) in group.iter().zip(values) {
        store.set_value(id, v)?;
    }
    Ok(())
}

/// Generic optimization loop: Adam with fresh moments on `group`, global-norm
/// clipping, patience-based early stopping on `valid`, and restoration of the
/// best validated parameters at the end.
pub fn run_phase<M, B>(
    model: &mut M,
    group: &[ParamId],
    cfg: &TrainConfig,
    mut next_batch: impl FnMut() -> B,
    loss: impl Fn(&M, &mut Tape<'_>, &B) -> Result<Var>,
    valid: impl Fn(&M) -> Result<f64>,
) -> Result<PhaseReport>
where
    M: HasParams,
{
    cfg.validate()?;
    let adam = Adam::new(cfg.learning_rate);
    model.params_mut().reset_optimizer_state(group);
    let all: Vec<ParamId> = model.params().ids().collect();
    model.params_mut().zero_grad(&all);

    let mut best = valid(model)?;
    let mut best_values = snapshot(model.params(), group);
    let mut report = PhaseReport {
        evals: vec![(0, best)],
        best_valid: best,
        ..PhaseReport::default()
    };
    let reached = |v: f64| cfg.target_valid_loss.is_some_and(|t| v <= t);
    if reached(best) {
        return Ok(report);
    }
    let mut bad = 0;
    while report.steps < cfg.max_steps {
        let batch = next_batch();
        let grads = {
            let mut tape = Tape::new(model.params());
            let l = loss(model, &mut tape, &batch)?;
            backward(&tape, l)?
        };
        let store = model.params_mut();
        store.accumulate(&grads);
        clip_global_norm(store, group, cfg.clip_norm);
        adam.step(store, group)?;
        store.zero_grad(&all);
        report.steps += 1;

        if report.steps.is_multiple_of(cfg.eval_every) || report.steps == cfg.max_steps {
            let v = valid(model)?;
            report.evals.push((report.steps, v));
            if v < best * (1.0 - cfg.conv_eps) {
                bad = 0;
            } else {
                bad += 1;
            }
            if v < best {
                best = v;
                best_values = snapshot(model.params(), group);
            }
            if reached(v) {
                break;
            }
            if bad >= cfg.patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    report.best_valid = best;
    restore(model.params_mut(), group, best_values)?;
    Ok(report)
}

/// Token-weighted mean NLL (EOS included) along the tape-free path.
pub fn mean_nll(pair: &Seq2SeqPair, dir: Direction, pairs: &[(Vec<u32>, Vec<u32>)]) -> Result<f64> {
    Ok(crate::evalsuite::perplexity(pair, dir, pairs)?.ln())
}

fn pick<'a>(pairs: &'a [(Vec<u32>, Vec<u32>)], idx: &[usize]) -> Vec<(&'a [u32], &'a [u32])> {
    idx.iter().map(|&i| (&pairs[i].0[..], &pairs[i].1[..])).collect()
}

fn require(nonempty: bool, what: &str) -> Result<()> {
    if nonempty {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what} is empty")))
    }
}

fn prepared(corpus: &PairedCorpus, max_len: usize) -> Vec<(Vec<u32>, Vec<u32>)> {
    corpus.truncated(max_len).pairs
}

/// Joint forward + backward NLL over all parameters, validated on the joint
/// held-out loss.
pub fn init_train(pair: &mut Seq2SeqPair, train: &PairedCorpus, valid: &PairedCorpus, cfg: &TrainConfig) -> Result<PhaseReport> {
    require(!train.is_empty(), "paired training corpus")?;
    require(!valid.is_empty(), "paired validation corpus")?;
    let vocab = pair.config().vocab_size;
    train.validate(vocab)?;
    valid.validate(vocab)?;
    let max_len = pair.config().max_len;
    let tr = prepared(train, max_len);
    let va = prepared(valid, max_len);
    let group = pair.all_params();
    let mut sampler = EpochSampler::new(tr.len(), rng::stream(cfg.rng_seed, "shuffle.init"));
    run_phase(
        pair,
        &group,
        cfg,
        || sampler.next_batch(cfg.batch_size),
        |p, tape, idx| {
            let batch = pick(&tr, idx);
            let (f, _) = p.nll_tape(tape, Direction::Forward, &batch)?;
            let rev: Vec<(&[u32], &[u32])> = batch.iter().map(|&(x, y)| (y, x)).collect();
            let (b, _) = p.nll_tape(tape, Direction::Backward, &rev)?;
            tape.add(f, b)
        },
        |p| joint_valid(p, &va),
    )
}

fn reversed(pairs: &[(Vec<u32>, Vec<u32>)]) -> Vec<(Vec<u32>, Vec<u32>)> {
    pairs.iter().map(|(x, y)| (y.clone(), x.clone())).collect()
}

fn joint_valid(pair: &Seq2SeqPair, va: &[(Vec<u32>, Vec<u32>)]) -> Result<f64> {
    Ok(mean_nll(pair, Direction::Forward, va)? + mean_nll(pair, Direction::Backward, &reversed(va))?)
}

/// Trains one direction on `(source, target)` pairs; only the shared encoder
/// and that direction's decoder move.
pub fn train_direction(
    pair: &mut Seq2SeqPair,
    dir: Direction,
    train: &[(Vec<u32>, Vec<u32>)],
    valid: &[(Vec<u32>, Vec<u32>)],
    cfg: &TrainConfig,
    stream: &str,
) -> Result<PhaseReport> {
    require(!train.is_empty(), "training pairs")?;
    require(!valid.is_empty(), "validation pairs")?;
    let group = pair.direction_params(dir);
    let mut sampler = EpochSampler::new(train.len(), rng::stream(cfg.rng_seed, stream));
    run_phase(
        pair,
        &group,
        cfg,
        || sampler.next_batch(cfg.batch_size),
        |p, tape, idx| Ok(p.nll_tape(tape, dir, &pick(train, idx))?.0),
        |p| mean_nll(p, dir, valid),
    )
}

/// Forward-direction training on `D` alone.
pub fn forward_train(pair: &mut Seq2SeqPair, train: &PairedCorpus, valid: &PairedCorpus, cfg: &TrainConfig) -> Result<PhaseReport> {
    let max_len = pair.config().max_len;
    train_direction(pair, Direction::Forward, &prepared(train, max_len), &prepared(valid, max_len), cfg, "shuffle.multitask.pairs")
}

enum MixedBatch {
    Pairs(Vec<usize>),
    Autoencode(Vec<usize>),
}

/// Interleaves forward seq2seq batches from `D` with autoencoding batches
/// from `D_T` through the same forward decoder. `mixing_ratio` is the
/// probability that a batch is an autoencoding batch.
pub fn multitask_train(
    pair: &mut Seq2SeqPair,
    train: &PairedCorpus,
    valid: &PairedCorpus,
    mono: &MonoCorpus,
    mixing_ratio: f64,
    cfg: &TrainConfig,
) -> Result<PhaseReport> {
    if !(mixing_ratio > 0.0 && mixing_ratio < 1.0) {
        return Err(Error::config("mixing_ratio must lie in (0, 1)"));
    }
    require(!train.is_empty(), "paired training corpus")?;
    require(!valid.is_empty(), "paired validation corpus")?;
    require(!mono.is_empty(), "monologue corpus")?;
    let max_len = pair.config().max_len;
    let tr = prepared(train, max_len);
    let va = prepared(valid, max_len);
    let mo = mono.truncated(max_len).utterances;
    let group = pair.direction_params(Direction::Forward);
    let mut pairs = EpochSampler::new(tr.len(), rng::stream(cfg.rng_seed, "shuffle.multitask.pairs"));
    let mut monos = EpochSampler::new(mo.len(), rng::stream(cfg.rng_seed, "shuffle.multitask.mono"));
    let mut coin = rng::stream(cfg.rng_seed, "multitask.coin");
    run_phase(
        pair,
        &group,
        cfg,
        || {
            if coin.random::<f64>() < mixing_ratio {
                MixedBatch::Autoencode(monos.next_batch(cfg.batch_size))
            } else {
                MixedBatch::Pairs(pairs.next_batch(cfg.batch_size))
            }
        },
        |p, tape, b| {
            let batch = match b {
                MixedBatch::Pairs(idx) => pick(&tr, idx),
                MixedBatch::Autoencode(idx) => idx.iter().map(|&i| (&mo[i][..], &mo[i][..])).collect(),
            };
            Ok(p.nll_tape(tape, Direction::Forward, &batch)?.0)
        },
        |p| mean_nll(p, Direction::Forward, &va),
    )
}

pub fn train_lm(lm: &mut LanguageModel, train: &[Vec<u32>], valid: &[Vec<u32>], cfg: &TrainConfig) -> Result<PhaseReport> {
    require(!train.is_empty(), "language model training set")?;
    require(!valid.is_empty(), "language model validation set")?;
    let max_len = lm.config().max_len;
    let cut = |v: &[Vec<u32>]| -> Vec<Vec<u32>> { v.iter().map(|u| u[..u.len().min(max_len)].to_vec()).collect() };
    let (tr, va) = (cut(train), cut(valid));
    let group = lm.all_params();
    let mut sampler = EpochSampler::new(tr.len(), rng::stream(cfg.rng_seed, "shuffle.lm"));
    run_phase(
        lm,
        &group,
        cfg,
        || sampler.next_batch(cfg.batch_size),
        |m, tape, idx| {
            let batch: Vec<&[u32]> = idx.iter().map(|&i| &tr[i][..]).collect();
            Ok(m.nll_tape(tape, &batch)?.0)
        },
        |m| Ok(crate::evalsuite::lm_perplexity(m, &va)?.ln()),
    )
}

/// A response from another pair that differs from pair `i`'s, drawn
/// uniformly; `None` when every response is identical.
fn negative_for<'a>(pairs: &'a [(Vec<u32>, Vec<u32>)], i: usize, rng: &mut impl Rng) -> Option<&'a [u32]> {
    let own = &pairs[i].1;
    if pairs.iter().all(|p| p.1 == *own) {
        return None;
    }
    loop {
        let j = rng.random_range(0..pairs.len());
        if pairs[j].1 != *own {
            return Some(&pairs[j].1);
        }
    }
}

/// Gold pairs, each followed by one mismatched response for its context.
pub fn with_negatives(pairs: &[(Vec<u32>, Vec<u32>)], rng: &mut impl Rng) -> Vec<(Vec<u32>, Vec<u32>, bool)> {
    labelled(pairs, 0..pairs.len(), rng)
}

fn labelled(
    pairs: &[(Vec<u32>, Vec<u32>)],
    idx: impl IntoIterator<Item = usize>,
    rng: &mut impl Rng,
) -> Vec<(Vec<u32>, Vec<u32>, bool)> {
    let mut out = Vec::new();
    for i in idx {
        let (c, r) = &pairs[i];
        out.push((c.clone(), r.clone(), true));
        if let Some(n) = negative_for(pairs, i, rng) {
            out.push((c.clone(), n.to_vec(), false));
        }
    }
    out
}

fn bce(disc: &Discriminator, data: &[(Vec<u32>, Vec<u32>, bool)]) -> Result<f64> {
    let mut total = 0.0;
    for chunk in data.chunks(64) {
        let pairs: Vec<(&[u32], &[u32])> = chunk.iter().map(|(c, r, _)| (&c[..], &r[..])).collect();
        for (z, (_, _, y)) in disc.logit_batch(&pairs)?.into_iter().zip(chunk) {
            // −log σ(±z), computed stably.
            let m = if *y { -z } else { z };
            total += m.max(0.0) + (-m.abs()).exp().ln_1p();
        }
    }
    Ok(total / data.len() as f64)
}

pub fn train_discriminator(
    disc: &mut Discriminator,
    train: &PairedCorpus,
    valid: &PairedCorpus,
    cfg: &TrainConfig,
) -> Result<PhaseReport> {
    require(!train.is_empty(), "discriminator training corpus")?;
    require(!valid.is_empty(), "discriminator validation corpus")?;
    let max_len = disc.config().max_len;
    let tr = prepared(train, max_len);
    let va = with_negatives(&prepared(valid, max_len), &mut rng::stream(cfg.rng_seed, "disc.valid.negatives"));
    let group = disc.all_params();
    let mut sampler = EpochSampler::new(tr.len(), rng::stream(cfg.rng_seed, "shuffle.disc"));
    let mut neg = rng::stream(cfg.rng_seed, "disc.negatives");
    run_phase(
        disc,
        &group,
        cfg,
        || labelled(&tr, sampler.next_batch(cfg.batch_size), &mut neg),
        |d, tape, batch| {
            let pairs: Vec<(&[u32], &[u32])> = batch.iter().map(|(c, r, _)| (&c[..], &r[..])).collect();
            let labels: Vec<bool> = batch.iter().map(|b| b.2).collect();
            d.bce_tape(tape, &pairs, &labels)
        },
        |d| bce(d, &va),
    )
}
