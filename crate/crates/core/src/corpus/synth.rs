use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::evalsuite::ent_n;
use crate::{rng, Error, Result};

const QUESTIONS: [&str; 4] = ["what", "how", "why", "where"];
/// Response opener tied to each question word.
const OPENERS: [&str; 4] = ["well", "so", "because", "there"];
const NOUNS: [&str; 24] = [
    "cat", "dog", "tea", "rain", "book", "song", "city", "river", "bread", "game", "car", "tree", "moon", "shop",
    "film", "park", "boat", "lamp", "coat", "road", "bird", "cake", "door", "star",
];
const GENERIC: [(&str, f64); 3] = [("i do not know", 0.5), ("that is so nice", 0.3), ("i am not sure", 0.2)];
const PAIR_ADJ: [&str; 2] = ["good", "fine"];
const INTERJECTIONS: [&str; 4] = ["oh", "yes", "hey", "look"];
const DETS: [&str; 5] = ["the", "a", "my", "every", "this"];
const ADJS: [&str; 10] = ["red", "old", "quiet", "bright", "small", "wild", "warm", "lost", "green", "heavy"];
const VERBS: [&str; 8] = ["sits", "waits", "shines", "falls", "hides", "runs", "sleeps", "turns"];
const PREPS: [&str; 6] = ["near", "under", "beside", "behind", "above", "past"];

/// Parameters of the synthetic dialogue/monologue generator.
///
/// Contexts ask about two nouns. Paired responses are mostly one of a few
/// generic replies; the rest mention both nouns in a fixed frame. The
/// monologue corpus uses the same nouns in a much richer grammar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_pairs: usize,
    pub num_mono: usize,
    pub num_nouns: usize,
    /// Probability that a paired response is generic.
    pub generic_rate: f64,
    /// Required Ent-4 excess (nats) of the monologues over paired responses.
    pub min_gap: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_pairs: 600,
            num_mono: 600,
            num_nouns: 16,
            generic_rate: 0.75,
            min_gap: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub pairs: Vec<(String, String)>,
    pub mono: Vec<String>,
    /// Measured Ent-4 gap, when both sides are non-empty.
    pub ent4_gap: Option<f64>,
}

fn two_nouns(r: &mut impl Rng, k: usize) -> (usize, usize) {
    let a = r.random_range(0..k);
    let mut b = r.random_range(0..k - 1);
    if b >= a {
        b += 1;
    }
    (a, b)
}

fn pick<'a>(r: &mut impl Rng, xs: &[&'a str]) -> &'a str {
    xs.choose(r).unwrap()
}

pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<SynthCorpus> {
    if spec.num_nouns < 2 || spec.num_nouns > NOUNS.len() {
        return Err(Error::config(format!("num_nouns must lie in [2, {}]", NOUNS.len())));
    }
    if !(0.0..=1.0).contains(&spec.generic_rate) {
        return Err(Error::config("generic_rate must lie in [0, 1]"));
    }
    let k = spec.num_nouns;
    let mut r = rng::stream(seed, "synth.pairs");
    let mut pairs = Vec::with_capacity(spec.num_pairs);
    for _ in 0..spec.num_pairs {
        let q = r.random_range(0..QUESTIONS.len());
        let (a, b) = two_nouns(&mut r, k);
        let context = format!("{} about {} and {}", QUESTIONS[q], NOUNS[a], NOUNS[b]);
        let response = if r.random::<f64>() < spec.generic_rate {
            GENERIC.choose_weighted(&mut r, |g| g.1).unwrap().0.to_string()
        } else {
            format!(
                "{} the {} {} is with the {}",
                OPENERS[q],
                pick(&mut r, &PAIR_ADJ),
                NOUNS[a],
                NOUNS[b]
            )
        };
        pairs.push((context, response));
    }
    let mut r = rng::stream(seed, "synth.mono");
    let mono: Vec<String> = (0..spec.num_mono)
        .map(|_| {
            let (a, b) = two_nouns(&mut r, k);
            format!(
                "{} {} {} {} {} {} {} {}",
                pick(&mut r, &INTERJECTIONS),
                pick(&mut r, &DETS),
                pick(&mut r, &ADJS),
                NOUNS[a],
                pick(&mut r, &VERBS),
                pick(&mut r, &PREPS),
                pick(&mut r, &DETS),
                NOUNS[b]
            )
        })
        .collect();

    let ent4_gap = if pairs.is_empty() || mono.is_empty() {
        None
    } else {
        let split = |s: &str| s.split(' ').map(String::from).collect::<Vec<_>>();
        let responses: Vec<Vec<String>> = pairs.iter().map(|p| split(&p.1)).collect();
        let monos: Vec<Vec<String>> = mono.iter().map(|m| split(m)).collect();
        let gap = ent_n(&monos, 4)? - ent_n(&responses, 4)?;
        if gap < spec.min_gap {
            return Err(Error::config(format!(
                "Ent-4 gap {gap:.3} nats is below the required {:.3}",
                spec.min_gap
            )));
        }
        Some(gap)
    };
    Ok(SynthCorpus { pairs, mono, ent4_gap })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let spec = SynthSpec::default();
        let a = synth_generate(&spec, 3).unwrap();
        assert_eq!(a, synth_generate(&spec, 3).unwrap());
        assert_ne!(a.pairs, synth_generate(&spec, 4).unwrap().pairs);
    }

    #[test]
    fn default_gap_exceeds_one_nat() {
        let c = synth_generate(&SynthSpec::default(), 0).unwrap();
        assert!(c.ent4_gap.unwrap() >= 1.0);
        assert_eq!(c.pairs.len(), 600);
        assert_eq!(c.mono.len(), 600);
    }

    #[test]
    fn empty_request_gives_empty_corpora() {
        let spec = SynthSpec {
            num_pairs: 0,
            num_mono: 0,
            ..SynthSpec::default()
        };
        let c = synth_generate(&spec, 0).unwrap();
        assert!(c.pairs.is_empty() && c.mono.is_empty() && c.ent4_gap.is_none());
    }

    #[test]
    fn unreachable_gap_is_a_config_error() {
        let spec = SynthSpec {
            min_gap: 40.0,
            ..SynthSpec::default()
        };
        assert!(matches!(synth_generate(&spec, 0), Err(Error::Config(_))));
    }

    #[test]
    fn topical_responses_echo_context_nouns() {
        let spec = SynthSpec {
            generic_rate: 0.0,
            num_mono: 0,
            ..SynthSpec::default()
        };
        for (c, r) in synth_generate(&spec, 1).unwrap().pairs {
            let cw: Vec<&str> = c.split(' ').collect();
            let rw: Vec<&str> = r.split(' ').collect();
            assert_eq!((rw[3], rw[7]), (cw[2], cw[4]));
        }
    }
}
