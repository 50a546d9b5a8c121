use std::cmp::Ordering;

use super::{DecodeConfig, Hypothesis, StepModel};
use crate::model::{BOS, EOS};
use crate::{Error, Result};

struct Group<S> {
    width: usize,
    open: Vec<Hypothesis<S>>,
    finished: Vec<Hypothesis<S>>,
    done: bool,
}

impl<S> Group<S> {
    /// No open hypothesis can still beat the worst kept finished one, since
    /// every extension adds a non-positive log-probability.
    fn update_done(&mut self) {
        self.done = match self.open.first() {
            None => true,
            Some(best_open) => {
                self.finished.len() >= self.width
                    && best_open.logprob <= self.finished[self.width - 1].logprob
            }
        };
    }
}

struct Candidate {
    select: f64,
    logprob: f64,
    parent: usize,
    token: u32,
}

fn desc(a: f64, b: f64) -> Ordering {
    b.total_cmp(&a)
}

/// Group-wise beam search. Group `g` ranks extensions by
/// `logprob − diversity · (times the token was chosen at this step by groups
/// before g)`; the penalty never enters the stored log-probability.
fn search_groups<M: StepModel>(
    model: &M,
    src: &[u32],
    num_groups: usize,
    width: usize,
    max_len: usize,
    diversity: f64,
) -> Result<Vec<Vec<Hypothesis<M::State>>>> {
    let vocab = model.vocab_size();
    let mut allowed = vec![true; vocab];
    for &b in model.banned() {
        if let Some(a) = allowed.get_mut(b as usize) {
            *a = false;
        }
    }
    let init = model.init_state(src)?;
    let mut groups: Vec<Group<M::State>> = (0..num_groups)
        .map(|_| Group {
            width,
            open: vec![Hypothesis {
                tokens: Vec::new(),
                logprob: 0.0,
                state: init.clone(),
                finished: false,
            }],
            finished: Vec::new(),
            done: false,
        })
        .collect();

    for _ in 0..max_len {
        if groups.iter().all(|g| g.done) {
            break;
        }
        // Model expansions do not depend on the penalty, so all groups are
        // stepped in one batch.
        let mut owners = Vec::new();
        let mut states = Vec::new();
        let mut prevs = Vec::new();
        for (gi, g) in groups.iter().enumerate() {
            if g.done {
                continue;
            }
            for (hi, h) in g.open.iter().enumerate() {
                owners.push((gi, hi));
                states.push(&h.state);
                prevs.push(h.tokens.last().copied().unwrap_or(BOS));
            }
        }
        let mut expansions = model.step_log_probs(&states, &prevs)?.into_iter();
        let mut per_group: Vec<Vec<(Vec<f64>, M::State)>> = (0..groups.len()).map(|_| Vec::new()).collect();
        for &(gi, _) in &owners {
            per_group[gi].push(expansions.next().unwrap());
        }

        let mut emitted = vec![0usize; vocab];
        for (gi, group) in groups.iter_mut().enumerate() {
            if group.done {
                continue;
            }
            let exp = std::mem::take(&mut per_group[gi]);
            let mut cands = Vec::with_capacity(exp.len() * vocab);
            for (parent, (lp, _)) in exp.iter().enumerate() {
                let base = group.open[parent].logprob;
                for (w, &l) in lp.iter().enumerate() {
                    if !allowed[w] || l == f64::NEG_INFINITY {
                        continue;
                    }
                    let logprob = base + l;
                    cands.push(Candidate {
                        select: logprob - diversity * emitted[w] as f64,
                        logprob,
                        parent,
                        token: w as u32,
                    });
                }
            }
            cands.sort_by(|a, b| {
                desc(a.select, b.select)
                    .then(a.parent.cmp(&b.parent))
                    .then(a.token.cmp(&b.token))
            });
            let mut open = Vec::with_capacity(group.width);
            for c in cands {
                if open.len() == group.width {
                    break;
                }
                let parent = &group.open[c.parent];
                let mut tokens = parent.tokens.clone();
                tokens.push(c.token);
                let finished = c.token == EOS || tokens.len() >= max_len;
                emitted[c.token as usize] += 1;
                let hyp = Hypothesis {
                    tokens,
                    logprob: c.logprob,
                    state: exp[c.parent].1.clone(),
                    finished,
                };
                if finished {
                    group.finished.push(hyp);
                } else {
                    open.push(hyp);
                }
            }
            group.open = open;
            group.finished.sort_by(|a, b| desc(a.logprob, b.logprob));
            group.finished.truncate(group.width);
            group.update_done();
        }
    }
    let out: Vec<Vec<Hypothesis<M::State>>> = groups.into_iter().map(|g| g.finished).collect();
    if out.iter().any(|g| g.is_empty()) {
        return Err(Error::invalid("no hypothesis finished: every token is banned"));
    }
    Ok(out)
}

/// Top-`beam_size` finished hypotheses, best first.
pub fn beam_search<M: StepModel>(model: &M, src: &[u32], cfg: &DecodeConfig) -> Result<Vec<Hypothesis<M::State>>> {
    if cfg.beam_size < 1 {
        return Err(Error::config("beam_size must be >= 1"));
    }
    Ok(search_groups(model, src, 1, cfg.beam_size, cfg.max_len, 0.0)?.pop().unwrap())
}

/// `num_groups` groups of `beam_size / num_groups` beams each, group order
/// preserved.
pub fn diverse_beam_search<M: StepModel>(
    model: &M,
    src: &[u32],
    cfg: &DecodeConfig,
) -> Result<Vec<Vec<Hypothesis<M::State>>>> {
    let (b, g) = (cfg.beam_size, cfg.num_groups);
    if g == 0 || b == 0 || b % g != 0 {
        return Err(Error::config(format!("num_groups {g} must divide beam_size {b}")));
    }
    search_groups(model, src, g, b / g, cfg.max_len, cfg.diversity_strength)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decode::test_models::TableModel;

    fn cfg(beam: usize, max_len: usize) -> DecodeConfig {
        DecodeConfig {
            beam_size: beam,
            max_len,
            ..DecodeConfig::default()
        }
    }

    #[test]
    fn prefers_early_eos_when_it_scores_higher() {
        // EOS has probability 0.6 at the first step; any longer path is worse.
        let m = TableModel::peaked(6, &[(EOS, 0.6)]);
        let out = beam_search(&m, &[4], &cfg(3, 5)).unwrap();
        assert_eq!(out[0].tokens, vec![EOS]);
        assert!(out.windows(2).all(|w| w[0].logprob >= w[1].logprob));
    }

    #[test]
    fn groups_must_divide_beam() {
        let m = TableModel::peaked(6, &[(EOS, 0.6)]);
        let c = DecodeConfig {
            beam_size: 5,
            num_groups: 2,
            ..cfg(5, 4)
        };
        assert!(matches!(diverse_beam_search(&m, &[4], &c), Err(Error::Config(_))));
    }

    #[test]
    fn hamming_penalty_pushes_second_group_off_the_top_token() {
        // First step: token 4 has log p = ln 0.5, token 5 has ln 0.4 (gap
        // ≈ 0.223 < λ = 0.3).
        let m = TableModel::first_step(7, &[(4, 0.5), (5, 0.4), (EOS, 0.1)]);
        let c = DecodeConfig {
            beam_size: 2,
            num_groups: 2,
            diversity_strength: 0.3,
            ..cfg(2, 3)
        };
        let groups = diverse_beam_search(&m, &[4], &c).unwrap();
        assert_eq!(groups[0][0].tokens[0], 4);
        assert_eq!(groups[1][0].tokens[0], 5);
        // Stored scores are untouched by the penalty.
        assert!((groups[1][0].logprob - 0.4f64.ln()).abs() < 1e-12);
        assert_eq!(groups[1][0].tokens, vec![5, EOS]);
    }
}
