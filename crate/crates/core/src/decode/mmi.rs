use rand::Rng;

use super::{ancestral_sample, DecodeConfig, DirectedModel, Hypothesis};
use crate::model::{DecoderState, Direction, Seq2SeqPair};
use crate::Result;

#[derive(Clone, Debug)]
pub struct MmiCandidate {
    pub hyp: Hypothesis<DecoderState>,
    /// log P_f(Y | X), including the terminal EOS when sampled.
    pub forward_logprob: f64,
    /// log P_b(X | Y) with Y stripped of EOS; −∞ for an empty Y.
    pub backward_logprob: f64,
    pub score: f64,
}

#[derive(Clone, Debug)]
pub struct MmiResult {
    pub candidates: Vec<MmiCandidate>,
    pub best: usize,
}

impl MmiResult {
    pub fn best(&self) -> &MmiCandidate {
        &self.candidates[self.best]
    }
}

fn combined(f: f64, b: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        f
    } else {
        f + lambda * b
    }
}

/// Index of the highest `f + λ·b`, earliest on ties; `None` when empty.
pub fn mmi_select(scores: &[(f64, f64)], lambda: f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &(f, b)) in scores.iter().enumerate() {
        let s = combined(f, b, lambda);
        if best.is_none_or(|(_, bs)| s > bs) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

/// Samples `mmi_candidates` responses from the forward direction of
/// `forward`, drops duplicates, and reranks by forward plus weighted backward
/// log-probability from the backward direction of `backward`.
pub fn mmi_rerank<R: Rng + ?Sized>(
    forward: &Seq2SeqPair,
    backward: &Seq2SeqPair,
    src: &[u32],
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<MmiResult> {
    let model = DirectedModel::new(forward, Direction::Forward);
    let mut hyps: Vec<Hypothesis<DecoderState>> = Vec::new();
    for _ in 0..cfg.mmi_candidates {
        let h = ancestral_sample(&model, src, cfg.max_len, rng)?;
        if !hyps.iter().any(|o| o.tokens == h.tokens) {
            hyps.push(h);
        }
    }
    let scored: Vec<(usize, &[u32])> = hyps
        .iter()
        .enumerate()
        .filter(|(_, h)| !h.content().is_empty())
        .map(|(i, h)| (i, h.content()))
        .collect();
    let mut back = vec![f64::NEG_INFINITY; hyps.len()];
    if cfg.mmi_lambda != 0.0 && !scored.is_empty() {
        let pairs: Vec<(&[u32], &[u32])> = scored.iter().map(|&(_, y)| (y, src)).collect();
        let out = backward.score_batch(Direction::Backward, &pairs, true)?;
        for (&(i, _), (lp, _)) in scored.iter().zip(out) {
            back[i] = lp;
        }
    }
    let candidates: Vec<MmiCandidate> = hyps
        .into_iter()
        .zip(back)
        .map(|(hyp, b)| MmiCandidate {
            forward_logprob: hyp.logprob,
            backward_logprob: b,
            score: combined(hyp.logprob, b, cfg.mmi_lambda),
            hyp,
        })
        .collect();
    let pairs: Vec<(f64, f64)> = candidates.iter().map(|c| (c.forward_logprob, c.backward_logprob)).collect();
    let best = mmi_select(&pairs, cfg.mmi_lambda).expect("at least one candidate");
    Ok(MmiResult { candidates, best })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_arithmetic() {
        assert_eq!(mmi_select(&[(-1.0, -5.0), (-1.5, -2.0)], 0.5), Some(1));
        assert_eq!(mmi_select(&[(-1.0, -5.0), (-1.5, -2.0)], 0.0), Some(0));
        assert_eq!(mmi_select(&[(-3.0, f64::NEG_INFINITY)], 0.5), Some(0));
        assert_eq!(mmi_select(&[], 0.5), None);
    }

    #[test]
    fn zero_lambda_ignores_backward() {
        let v = [(-2.0, f64::NEG_INFINITY), (-1.0, f64::NEG_INFINITY), (-3.0, 0.0)];
        assert_eq!(mmi_select(&v, 0.0), Some(1));
    }
}
