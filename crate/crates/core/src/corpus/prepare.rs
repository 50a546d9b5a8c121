use serde::{Deserialize, Serialize};

use super::{filter_corpus, split_three, tokenize, FilterConfig, FilterOutcome, Item, MonoCorpus, PairedCorpus, Vocab};
use crate::{rng, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrepareConfig {
    pub min_count: u64,
    pub max_len: usize,
    pub valid_pairs: usize,
    pub test_pairs: usize,
    pub valid_mono: usize,
    /// Applied to the monologue corpus only.
    pub mono_filter: Option<FilterConfig>,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        PrepareConfig {
            min_count: 5,
            max_len: 50,
            valid_pairs: 50,
            test_pairs: 100,
            valid_mono: 50,
            mono_filter: None,
        }
    }
}

/// Id-encoded splits sharing one vocabulary.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub vocab: Vocab,
    pub train: PairedCorpus,
    pub valid: PairedCorpus,
    pub test: PairedCorpus,
    pub mono: MonoCorpus,
    pub mono_valid: MonoCorpus,
    pub filter: Option<FilterOutcome>,
}

/// Tokenizes, optionally filters the monologues, builds the vocabulary over
/// the training portions, splits, encodes and truncates.
pub fn prepare(pairs: &[(String, String)], mono: &[Item], cfg: &PrepareConfig, seed: u64) -> Result<PreparedData> {
    if cfg.max_len == 0 {
        return Err(Error::config("max_len must be >= 1"));
    }
    let tok_pairs: Vec<(Vec<String>, Vec<String>)> = pairs.iter().map(|(c, r)| (tokenize(c), tokenize(r))).collect();
    let (mono_items, filter) = match &cfg.mono_filter {
        Some(f) => {
            let out = filter_corpus(mono, f)?;
            (out.kept.clone(), Some(out))
        }
        None => (mono.to_vec(), None),
    };
    let mono_tok: Vec<Vec<String>> = mono_items.into_iter().map(|i| i.tokens).collect();

    let [tr, va, te] = split_three(&tok_pairs, cfg.valid_pairs, cfg.test_pairs, &mut rng::stream(seed, "split.pairs"))?;
    let [mtr, mva, _] = split_three(&mono_tok, cfg.valid_mono, 0, &mut rng::stream(seed, "split.mono"))?;

    let seqs = tr
        .iter()
        .flat_map(|(c, r)| [&c[..], &r[..]])
        .chain(mtr.iter().map(|m| &m[..]));
    let vocab = Vocab::build(seqs, cfg.min_count);
    let enc = |s: &[String]| {
        let ids = vocab.encode(s);
        ids[..ids.len().min(cfg.max_len)].to_vec()
    };
    let paired = |v: &[(Vec<String>, Vec<String>)]| PairedCorpus {
        pairs: v.iter().map(|(c, r)| (enc(c), enc(r))).collect(),
    };
    let monos = |v: &[Vec<String>]| MonoCorpus {
        utterances: v.iter().map(|m| enc(m)).collect(),
    };
    Ok(PreparedData {
        train: paired(&tr),
        valid: paired(&va),
        test: paired(&te),
        mono: monos(&mtr),
        mono_valid: monos(&mva),
        vocab,
        filter,
    })
}
