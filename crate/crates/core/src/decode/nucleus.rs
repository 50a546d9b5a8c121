use rand::Rng;

use super::{DecodeConfig, Hypothesis, StepModel};
use crate::model::{BOS, EOS};
use crate::{Error, Result};

/// Smallest probability-sorted prefix with mass ≥ `p`, renormalized.
/// Sorted by probability descending, equal probabilities by lower id.
/// Zero-probability entries are never included.
pub fn nucleus_support(probs: &[f64], p: f64) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..probs.len()).filter(|&i| probs[i] > 0.0).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let total: f64 = order.iter().map(|&i| probs[i]).sum();
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for i in order {
        kept.push(i);
        mass += probs[i];
        if p < 1.0 && mass >= p * total {
            break;
        }
    }
    kept.into_iter().map(|i| (i, probs[i] / mass)).collect()
}

/// Draws one index from a normalized support.
pub fn sample_support<R: Rng + ?Sized>(support: &[(usize, f64)], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for &(i, q) in support {
        acc += q;
        if u < acc {
            return i;
        }
    }
    support.last().map(|&(i, _)| i).expect("empty support")
}

/// Samples one sequence token by token from the dynamic nucleus. The
/// reported `logprob` is under the unrestricted model distribution.
pub fn nucleus_sample<M: StepModel, R: Rng + ?Sized>(
    model: &M,
    src: &[u32],
    cfg: &DecodeConfig,
    rng: &mut R,
) -> Result<Hypothesis<M::State>> {
    sample_with(model, src, cfg.max_len, cfg.nucleus_p, rng)
}

/// Temperature-1 sampling from the full (PAD/BOS-masked) distribution.
pub fn ancestral_sample<M: StepModel, R: Rng + ?Sized>(
    model: &M,
    src: &[u32],
    max_len: usize,
    rng: &mut R,
) -> Result<Hypothesis<M::State>> {
    sample_with(model, src, max_len, 1.0, rng)
}

fn sample_with<M: StepModel, R: Rng + ?Sized>(
    model: &M,
    src: &[u32],
    max_len: usize,
    p: f64,
    rng: &mut R,
) -> Result<Hypothesis<M::State>> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::config("nucleus_p must lie in (0, 1]"));
    }
    if max_len == 0 {
        return Err(Error::config("max_len must be >= 1"));
    }
    let banned = model.banned().to_vec();
    let mut hyp = Hypothesis {
        tokens: Vec::new(),
        logprob: 0.0,
        state: model.init_state(src)?,
        finished: false,
    };
    while !hyp.finished {
        let prev = hyp.tokens.last().copied().unwrap_or(BOS);
        let (lp, next) = model.step_log_probs(&[&hyp.state], &[prev])?.pop().unwrap();
        let mut probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
        for &b in &banned {
            if let Some(q) = probs.get_mut(b as usize) {
                *q = 0.0;
            }
        }
        if probs.iter().all(|&q| q <= 0.0) {
            return Err(Error::invalid("no token has positive probability"));
        }
        let w = sample_support(&nucleus_support(&probs, p), rng);
        hyp.tokens.push(w as u32);
        hyp.logprob += lp[w];
        hyp.state = next;
        hyp.finished = w as u32 == EOS || hyp.tokens.len() >= max_len;
    }
    Ok(hyp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;

    #[test]
    fn worked_support() {
        let s = nucleus_support(&[0.5, 0.3, 0.15, 0.05], 0.9);
        let ids: Vec<usize> = s.iter().map(|x| x.0).collect();
        assert_eq!(ids, vec![0, 1, 2]);
        assert!((s[0].1 - 0.5 / 0.95).abs() < 1e-12);
        assert!((s[2].1 - 0.15 / 0.95).abs() < 1e-12);
    }

    #[test]
    fn ties_prefer_lower_id() {
        let s = nucleus_support(&[0.25, 0.25, 0.25, 0.25], 0.5);
        assert_eq!(s.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn tiny_p_is_greedy() {
        let probs = [0.1, 0.6, 0.3];
        let s = nucleus_support(&probs, 0.05);
        assert_eq!(s, vec![(1, 1.0)]);
        let mut r = rng::stream(1, "t");
        for _ in 0..50 {
            assert_eq!(sample_support(&s, &mut r), 1);
        }
    }

    #[test]
    fn full_p_keeps_everything() {
        let probs = [0.1, 0.6, 0.0, 0.3];
        let s = nucleus_support(&probs, 1.0);
        assert_eq!(s.len(), 3);
        assert!((s.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn supports_nest(raw in proptest::collection::vec(0.0f64..1.0, 2..12), p1 in 0.01f64..1.0, p2 in 0.01f64..1.0) {
            prop_assume!(raw.iter().sum::<f64>() > 1e-6);
            let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
            let a: Vec<usize> = nucleus_support(&raw, lo).iter().map(|x| x.0).collect();
            let b: Vec<usize> = nucleus_support(&raw, hi).iter().map(|x| x.0).collect();
            prop_assert!(a.iter().all(|i| b.contains(i)));
            let mass: f64 = nucleus_support(&raw, hi).iter().map(|x| x.1).sum();
            prop_assert!((mass - 1.0).abs() < 1e-9);
        }
    }
}
