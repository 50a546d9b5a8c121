use super::{beam_search, DecodeConfig, DirectedModel, Hypothesis, LmModel, StepModel};
use crate::model::DecoderState;
use crate::numcore::kernels::log_add_exp;
use crate::{Error, Result};

/// Probability-space mixture `α·P_s2s + (1 − α)·P_lm`, computed in log space.
pub struct Fused<'a> {
    s2s: DirectedModel<'a>,
    lm: LmModel<'a>,
    alpha: f64,
}

impl<'a> Fused<'a> {
    pub fn new(s2s: DirectedModel<'a>, lm: LmModel<'a>, alpha: f64) -> Result<Self> {
        if s2s.vocab_size() != lm.vocab_size() {
            return Err(Error::config(format!(
                "vocabulary mismatch: seq2seq {} vs language model {}",
                s2s.vocab_size(),
                lm.vocab_size()
            )));
        }
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::config("fusion_alpha must lie in [0, 1]"));
        }
        Ok(Fused { s2s, lm, alpha })
    }
}

/// `ln(w·e^a + (1−w)·e^b)` that returns `a` or `b` verbatim at the endpoints.
pub(crate) fn mix_log(alpha: f64, a: f64, b: f64) -> f64 {
    if alpha >= 1.0 {
        a
    } else if alpha <= 0.0 {
        b
    } else {
        log_add_exp(alpha.ln() + a, (1.0 - alpha).ln() + b)
    }
}

impl StepModel for Fused<'_> {
    type State = (DecoderState, DecoderState);

    fn vocab_size(&self) -> usize {
        self.s2s.vocab_size()
    }

    fn init_state(&self, src: &[u32]) -> Result<Self::State> {
        Ok((self.s2s.init_state(src)?, self.lm.init_state(src)?))
    }

    fn step_log_probs(&self, states: &[&Self::State], prevs: &[u32]) -> Result<Vec<(Vec<f64>, Self::State)>> {
        let s: Vec<&DecoderState> = states.iter().map(|st| &st.0).collect();
        let l: Vec<&DecoderState> = states.iter().map(|st| &st.1).collect();
        let a = self.s2s.step_log_probs(&s, prevs)?;
        let b = self.lm.step_log_probs(&l, prevs)?;
        Ok(a.into_iter()
            .zip(b)
            .map(|((la, sa), (lb, sb))| {
                let mixed = la.iter().zip(&lb).map(|(&x, &y)| mix_log(self.alpha, x, y)).collect();
                (mixed, (sa, sb))
            })
            .collect())
    }
}

/// Beam search under the fused distribution; returns the top hypothesis.
pub fn fused_decode(
    s2s: DirectedModel<'_>,
    lm: LmModel<'_>,
    src: &[u32],
    cfg: &DecodeConfig,
) -> Result<Hypothesis<(DecoderState, DecoderState)>> {
    let fused = Fused::new(s2s, lm, cfg.fusion_alpha)?;
    Ok(beam_search(&fused, src, cfg)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arithmetic_mean_at_half() {
        let p = mix_log(0.5, 0.8f64.ln(), 0.2f64.ln()).exp();
        assert!((p - 0.5).abs() < 1e-12);
    }

    #[test]
    fn endpoints_are_exact() {
        assert_eq!(mix_log(1.0, -0.3, -7.0), -0.3);
        assert_eq!(mix_log(0.0, -0.3, -7.0), -7.0);
        assert_eq!(mix_log(0.5, f64::NEG_INFINITY, f64::NEG_INFINITY), f64::NEG_INFINITY);
    }
}
