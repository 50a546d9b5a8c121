//! Automatic metrics: Dist-n, n-gram entropy, corpus BLEU-2, adversarial
//! success rate and perplexity, plus a versioned report format.

mod report;

use std::collections::HashMap;
use std::hash::Hash;

use crate::model::{Direction, Discriminator, LanguageModel, Seq2SeqPair};
use crate::{Error, Result};

pub use report::{config_fingerprint, MetricsReport, CSV_HEADER, SCHEMA_VERSION};

/// Counts of every length-`n` window across a corpus.
#[derive(Clone, Debug)]
pub struct NGramTable<T> {
    n: usize,
    counts: HashMap<Vec<T>, usize>,
    total: usize,
}

impl<T: Hash + Eq + Clone> NGramTable<T> {
    pub fn from_corpus<S: AsRef<[T]>>(responses: &[S], n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("n-gram order must be >= 1"));
        }
        let mut table = NGramTable {
            n,
            counts: HashMap::new(),
            total: 0,
        };
        for r in responses {
            table.add(r.as_ref());
        }
        Ok(table)
    }

    pub fn add(&mut self, seq: &[T]) {
        if seq.len() < self.n {
            return;
        }
        for w in seq.windows(self.n) {
            *self.counts.entry(w.to_vec()).or_insert(0) += 1;
            self.total += 1;
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn distinct(&self) -> usize {
        self.counts.len()
    }

    pub fn count(&self, gram: &[T]) -> usize {
        self.counts.get(gram).copied().unwrap_or(0)
    }

    /// Counts sorted ascending, so float reductions over them are
    /// independent of hash order.
    fn sorted_counts(&self) -> Vec<usize> {
        let mut c: Vec<usize> = self.counts.values().copied().collect();
        c.sort_unstable();
        c
    }

    fn require_nonempty(&self) -> Result<()> {
        if self.total == 0 {
            return Err(Error::UndefinedMetric(format!("no {}-grams in corpus", self.n)));
        }
        Ok(())
    }
}

/// Distinct n-grams over total n-grams, pooled across all responses.
pub fn dist_n<T: Hash + Eq + Clone, S: AsRef<[T]>>(responses: &[S], n: usize) -> Result<f64> {
    let t = NGramTable::from_corpus(responses, n)?;
    t.require_nonempty()?;
    Ok(t.distinct() as f64 / t.total() as f64)
}

/// Entropy (nats) of the empirical n-gram distribution.
pub fn ent_n<T: Hash + Eq + Clone, S: AsRef<[T]>>(responses: &[S], n: usize) -> Result<f64> {
    let t = NGramTable::from_corpus(responses, n)?;
    t.require_nonempty()?;
    let total = t.total() as f64;
    let h: f64 = t
        .sorted_counts()
        .into_iter()
        .map(|c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum();
    Ok(h.max(0.0))
}

/// Corpus-level BLEU over 1- and 2-grams, uniform weights, one reference per
/// hypothesis, standard brevity penalty, no smoothing.
pub fn bleu2<T: Hash + Eq + Clone, S: AsRef<[T]>>(hypotheses: &[S], references: &[S]) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(Error::invalid("bleu2 needs at least one hypothesis"));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::invalid(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut matched = [0usize; 2];
    let mut totals = [0usize; 2];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (h, r) in hypotheses.iter().zip(references) {
        let (h, r) = (h.as_ref(), r.as_ref());
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=2 {
            let ht = NGramTable::from_corpus(&[h], n)?;
            let rt = NGramTable::from_corpus(&[r], n)?;
            totals[n - 1] += ht.total();
            matched[n - 1] += ht.counts.iter().map(|(g, &c)| c.min(rt.count(g))).sum::<usize>();
        }
    }
    if matched.contains(&0) {
        return Ok(0.0);
    }
    let log_p: f64 = (0..2).map(|i| (matched[i] as f64 / totals[i] as f64).ln()).sum::<f64>() / 2.0;
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(bp * log_p.exp())
}

/// Fraction of pairs the discriminator scores strictly above 0.5.
pub fn adver_score(disc: &Discriminator, contexts: &[Vec<u32>], responses: &[Vec<u32>]) -> Result<f64> {
    if contexts.is_empty() || contexts.len() != responses.len() {
        return Err(Error::invalid("adver_score needs equally many non-zero contexts and responses"));
    }
    let pairs: Vec<(&[u32], &[u32])> = contexts.iter().zip(responses).map(|(c, r)| (&c[..], &r[..])).collect();
    let mut fooled = 0usize;
    for chunk in pairs.chunks(64) {
        fooled += disc.score_batch(chunk)?.into_iter().filter(|&s| s > 0.5).count();
    }
    Ok(fooled as f64 / pairs.len() as f64)
}

fn ppl_from(scores: impl IntoIterator<Item = (f64, usize)>) -> Result<f64> {
    let (mut lp, mut n) = (0.0, 0usize);
    for (l, k) in scores {
        lp += l;
        n += k;
    }
    if n == 0 {
        return Err(Error::invalid("perplexity over zero target tokens"));
    }
    Ok((-lp / n as f64).exp())
}

/// `exp` of the token-weighted mean NLL of targets (EOS included) given
/// sources, along `dir`.
pub fn perplexity(pair: &Seq2SeqPair, dir: Direction, pairs: &[(Vec<u32>, Vec<u32>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::invalid("perplexity over an empty set"));
    }
    let mut all = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(64) {
        let refs: Vec<(&[u32], &[u32])> = chunk.iter().map(|(s, t)| (&s[..], &t[..])).collect();
        all.extend(pair.score_batch(dir, &refs, true)?);
    }
    ppl_from(all)
}

pub fn lm_perplexity(lm: &LanguageModel, utterances: &[Vec<u32>]) -> Result<f64> {
    if utterances.is_empty() {
        return Err(Error::invalid("perplexity over an empty set"));
    }
    let mut all = Vec::with_capacity(utterances.len());
    for chunk in utterances.chunks(64) {
        let refs: Vec<&[u32]> = chunk.iter().map(|u| &u[..]).collect();
        all.extend(lm.score_batch(&refs, true)?);
    }
    ppl_from(all)
}
