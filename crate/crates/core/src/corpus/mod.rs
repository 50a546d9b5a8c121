//! Text ingestion: tokenization, filtering, vocabulary, batching, file
//! formats, a synthetic corpus generator and the retrieval baseline.

pub mod io;
mod prepare;
mod retrieval;
mod synth;
mod vocab;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{NUM_SPECIALS, PAD};
use crate::{Error, Result};

pub use prepare::{prepare, PrepareConfig, PreparedData};
pub use retrieval::{retrieve_respond, RetrievalHit, RetrievalIndex};
pub use synth::{synth_generate, SynthCorpus, SynthSpec};
pub use vocab::{Vocab, SPECIAL_TOKENS};

/// CJK Unified Ideographs and Extension A.
pub fn is_cjk(c: char) -> bool {
    matches!(c as u32, 0x4E00..=0x9FFF | 0x3400..=0x4DBF)
}

/// Each CJK character is its own token; everything else splits on
/// whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for c in text.chars() {
        if is_cjk(c) || c.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if is_cjk(c) {
                out.push(c.to_string());
            }
        } else {
            cur.push(c);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub fn tokenize_bytes(bytes: &[u8]) -> Result<Vec<String>> {
    let s = std::str::from_utf8(bytes).map_err(|e| Error::invalid(format!("invalid UTF-8: {e}")))?;
    Ok(tokenize(s))
}

fn single_cjk(t: &str) -> bool {
    let mut cs = t.chars();
    matches!((cs.next(), cs.next()), (Some(c), None) if is_cjk(c))
}

/// Inverse of [`tokenize`] up to whitespace: adjacent CJK tokens are joined
/// directly, all other boundaries get one space.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        let t = t.as_ref();
        if i > 0 && !(single_cjk(t) && single_cjk(tokens[i - 1].as_ref())) {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Context/response id sequences.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairedCorpus {
    pub pairs: Vec<(Vec<u32>, Vec<u32>)>,
}

/// Unpaired utterances.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MonoCorpus {
    pub utterances: Vec<Vec<u32>>,
}

fn check_seq(seq: &[u32], vocab: usize, what: &str) -> Result<()> {
    if seq.is_empty() {
        return Err(Error::invalid(format!("empty {what}")));
    }
    if let Some(&bad) = seq.iter().find(|&&t| t as usize >= vocab || t == PAD) {
        return Err(Error::invalid(format!("{what} contains invalid id {bad}")));
    }
    Ok(())
}

impl PairedCorpus {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        for (c, r) in &self.pairs {
            check_seq(c, vocab_size, "context")?;
            check_seq(r, vocab_size, "response")?;
        }
        Ok(())
    }

    pub fn contexts(&self) -> Vec<Vec<u32>> {
        self.pairs.iter().map(|p| p.0.clone()).collect()
    }

    pub fn responses(&self) -> Vec<Vec<u32>> {
        self.pairs.iter().map(|p| p.1.clone()).collect()
    }

    pub fn as_refs(&self) -> Vec<(&[u32], &[u32])> {
        self.pairs.iter().map(|(a, b)| (&a[..], &b[..])).collect()
    }

    pub fn truncated(&self, max_len: usize) -> Self {
        PairedCorpus {
            pairs: self
                .pairs
                .iter()
                .map(|(a, b)| (truncate(a, max_len).to_vec(), truncate(b, max_len).to_vec()))
                .collect(),
        }
    }
}

impl MonoCorpus {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        self.utterances.iter().try_for_each(|u| check_seq(u, vocab_size, "utterance"))
    }

    pub fn truncated(&self, max_len: usize) -> Self {
        MonoCorpus {
            utterances: self.utterances.iter().map(|u| truncate(u, max_len).to_vec()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub min_tokens: usize,
    pub max_tokens: usize,
    pub blocklist: Vec<String>,
    /// Items with metadata must have strictly more likes; items without any
    /// metadata pass.
    pub min_likes: Option<u64>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            min_tokens: 10,
            max_tokens: 30,
            blocklist: Vec::new(),
            min_likes: Some(10),
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_tokens == 0 || self.min_tokens > self.max_tokens {
            return Err(Error::config("filter requires 0 < min_tokens <= max_tokens"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    TooShort,
    TooLong,
    Blocklist,
    Likes,
}

/// An utterance with optional popularity metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub tokens: Vec<String>,
    pub likes: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FilterOutcome {
    pub kept: Vec<Item>,
    pub rejected: Vec<(usize, RejectReason)>,
}

impl FilterOutcome {
    pub fn counts(&self) -> BTreeMap<RejectReason, usize> {
        let mut m = BTreeMap::new();
        for &(_, r) in &self.rejected {
            *m.entry(r).or_insert(0) += 1;
        }
        m
    }
}

fn fold(token: &str) -> String {
    if token.chars().any(is_cjk) {
        token.to_string()
    } else {
        token.to_lowercase()
    }
}

fn contains_phrase(hay: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && hay.len() >= needle.len() && hay.windows(needle.len()).any(|w| w == needle)
}

pub fn filter_corpus(items: &[Item], cfg: &FilterConfig) -> Result<FilterOutcome> {
    cfg.validate()?;
    let phrases: Vec<Vec<String>> = cfg
        .blocklist
        .iter()
        .map(|p| tokenize(p).iter().map(|t| fold(t)).collect::<Vec<_>>())
        .filter(|p| !p.is_empty())
        .collect();
    let mut out = FilterOutcome::default();
    for (i, item) in items.iter().enumerate() {
        let n = item.tokens.len();
        let folded: Vec<String> = item.tokens.iter().map(|t| fold(t)).collect();
        let reason = if n < cfg.min_tokens {
            Some(RejectReason::TooShort)
        } else if n > cfg.max_tokens {
            Some(RejectReason::TooLong)
        } else if phrases.iter().any(|p| contains_phrase(&folded, p)) {
            Some(RejectReason::Blocklist)
        } else if matches!((cfg.min_likes, item.likes), (Some(min), Some(l)) if l <= min) {
            Some(RejectReason::Likes)
        } else {
            None
        };
        match reason {
            Some(r) => out.rejected.push((i, r)),
            None => out.kept.push(item.clone()),
        }
    }
    Ok(out)
}

pub fn truncate(seq: &[u32], max_len: usize) -> &[u32] {
    &seq[..seq.len().min(max_len)]
}

/// Right-padded id matrix with a 0/1 mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<Vec<u32>>,
    pub mask: Vec<Vec<f64>>,
    pub lengths: Vec<usize>,
}

pub fn truncate_and_batch(seqs: &[Vec<u32>], max_len: usize, batch_size: usize) -> Result<Vec<Batch>> {
    if batch_size == 0 || max_len == 0 {
        return Err(Error::invalid("batch_size and max_len must be >= 1"));
    }
    Ok(seqs
        .chunks(batch_size)
        .map(|chunk| {
            let cut: Vec<&[u32]> = chunk.iter().map(|s| truncate(s, max_len)).collect();
            let width = cut.iter().map(|s| s.len()).max().unwrap_or(0);
            let mut ids = Vec::with_capacity(cut.len());
            let mut mask = Vec::with_capacity(cut.len());
            for s in &cut {
                let mut row = s.to_vec();
                row.resize(width, PAD);
                ids.push(row);
                let mut m = vec![1.0; s.len()];
                m.resize(width, 0.0);
                mask.push(m);
            }
            Batch {
                ids,
                mask,
                lengths: cut.iter().map(|s| s.len()).collect(),
            }
        })
        .collect())
}

/// Deterministic train/valid/test split of a list by shuffled position.
pub fn split_three<T: Clone>(items: &[T], valid: usize, test: usize, rng: &mut impl rand::Rng) -> Result<[Vec<T>; 3]> {
    use rand::seq::SliceRandom;
    if valid + test >= items.len() && !items.is_empty() {
        return Err(Error::config(format!(
            "cannot hold out {valid}+{test} of {} items",
            items.len()
        )));
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(rng);
    let pick = |r: std::ops::Range<usize>| -> Vec<T> {
        let mut idx: Vec<usize> = order[r].to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| items[i].clone()).collect()
    };
    let n = items.len();
    Ok([
        pick(valid + test..n),
        pick(0..valid.min(n)),
        pick(valid.min(n)..(valid + test).min(n)),
    ])
}

/// First id that is not a special token.
pub const FIRST_REGULAR_ID: u32 = NUM_SPECIALS as u32;
