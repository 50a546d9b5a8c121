use crate::model::{Direction, Seq2SeqPair};
use crate::numcore::Tensor;
use crate::{Error, Result};

/// Candidate utterances with unit-normalized mean-embedding vectors.
#[derive(Clone, Debug)]
pub struct RetrievalIndex {
    candidates: Vec<Vec<u32>>,
    vectors: Vec<Vec<f64>>,
    dim: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalHit {
    pub index: usize,
    /// log P_b(context | candidate), EOS included.
    pub score: f64,
}

fn mean_embedding(table: &Tensor, seq: &[u32]) -> Vec<f64> {
    let dim = table.cols();
    let mut v = vec![0.0; dim];
    for &t in seq {
        for (a, b) in v.iter_mut().zip(table.row(t as usize)) {
            *a += b;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

impl RetrievalIndex {
    /// Candidates longer than the model's `max_len` are truncated.
    pub fn build(model: &Seq2SeqPair, candidates: &[Vec<u32>]) -> Result<Self> {
        let max_len = model.config().max_len;
        let candidates: Vec<Vec<u32>> = candidates.iter().map(|c| c[..c.len().min(max_len)].to_vec()).collect();
        let refs: Vec<&[u32]> = candidates.iter().map(|c| &c[..]).collect();
        if !refs.is_empty() {
            model.encoder().validate(&refs)?;
        }
        let table = model.store().value(model.encoder().embedding);
        let vectors = candidates.iter().map(|c| mean_embedding(table, c)).collect();
        Ok(RetrievalIndex {
            candidates,
            vectors,
            dim: table.cols(),
        })
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn candidate(&self, i: usize) -> &[u32] {
        &self.candidates[i]
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i]
    }

    /// Indices of the `k` most cosine-similar candidates, best first, ties to
    /// the lower index.
    pub fn prefilter(&self, query: &[f64], k: usize) -> Vec<usize> {
        let sims: Vec<f64> = self
            .vectors
            .iter()
            .map(|v| v.iter().zip(query).map(|(a, b)| a * b).sum())
            .collect();
        let mut order: Vec<usize> = (0..sims.len()).collect();
        order.sort_by(|&a, &b| sims[b].total_cmp(&sims[a]).then(a.cmp(&b)));
        order.truncate(k);
        order
    }

    pub fn query_vector(&self, model: &Seq2SeqPair, context: &[u32]) -> Vec<f64> {
        mean_embedding(model.store().value(model.encoder().embedding), context)
    }
}

/// Cosine prefilter to `k` candidates, then the candidate maximizing the
/// backward score of `context`; ties go to the lower candidate index.
pub fn retrieve_respond(index: &RetrievalIndex, model: &Seq2SeqPair, context: &[u32], k: usize) -> Result<RetrievalHit> {
    if index.is_empty() {
        return Err(Error::invalid("retrieval index is empty"));
    }
    if k == 0 {
        return Err(Error::invalid("prefilter size must be >= 1"));
    }
    model.encoder().validate(&[context])?;
    let mut shortlist = index.prefilter(&index.query_vector(model, context), k);
    shortlist.sort_unstable();
    let mut best: Option<RetrievalHit> = None;
    for chunk in shortlist.chunks(64) {
        let pairs: Vec<(&[u32], &[u32])> = chunk.iter().map(|&i| (index.candidate(i), context)).collect();
        for (&i, (score, _)) in chunk.iter().zip(model.score_batch(Direction::Backward, &pairs, true)?) {
            if best.as_ref().is_none_or(|b| score > b.score) {
                best = Some(RetrievalHit { index: i, score });
            }
        }
    }
    Ok(best.unwrap())
}
