//! Finite-difference checks of every tape primitive and of the composed
//! model losses, over randomized parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::model::{Direction, Discriminator, LanguageModel, ModelConfig, Seq2SeqPair};
use crate::numcore::{gradcheck, init_uniform, ParamId, ParamStore, Tape, Tensor, Var};
use crate::Result;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct CaseResult {
    pub case: String,
    pub param: String,
    pub rel_error: f64,
}

type Graph = fn(&mut Tape<'_>, &[ParamId]) -> Result<Var>;

fn primitive_graphs() -> Vec<(&'static str, Graph)> {
    vec![
        ("matmul", |t, p| {
            let (a, b) = (t.param(p[0])?, t.param(p[1])?);
            let m = t.matmul(a, b)?;
            let s = t.tanh(m)?;
            t.sum(s)
        }),
        ("add_sub_mul", |t, p| {
            let (a, c) = (t.param(p[0])?, t.param(p[2])?);
            let x = t.add(a, c)?;
            let y = t.sub(x, c)?;
            let z = t.mul(y, x)?;
            t.sum(z)
        }),
        ("add_row_scale", |t, p| {
            let (a, b) = (t.param(p[0])?, t.param(p[3])?);
            let x = t.add_row(a, b)?;
            let x = t.scale(x, -1.7)?;
            let m = t.mul(x, x)?;
            t.sum(m)
        }),
        ("sigmoid_tanh", |t, p| {
            let a = t.param(p[0])?;
            let s = t.sigmoid(a)?;
            let h = t.tanh(s)?;
            let m = t.mul(h, s)?;
            t.sum(m)
        }),
        ("concat_slice", |t, p| {
            let (a, c) = (t.param(p[0])?, t.param(p[2])?);
            let cc = t.concat_cols(&[a, c])?;
            let rr = t.concat_rows(&[cc, cc])?;
            let sl = t.slice_cols(rr, 1, 5)?;
            let q = t.mul(sl, sl)?;
            let w = t.tanh(q)?;
            t.sum(w)
        }),
        ("softmax", |t, p| {
            let a = t.param(p[0])?;
            let s = t.softmax(a)?;
            let w = t.input(Tensor::matrix(2, 3, vec![0.3, -1.0, 2.0, 0.5, 0.1, -0.4])?)?;
            let m = t.mul(s, w)?;
            t.sum(m)
        }),
        ("softmax_xent", |t, p| {
            let a = t.param(p[0])?;
            t.softmax_xent(a, &[2, 0], &[0.7, 0.3])
        }),
        ("embedding", |t, p| {
            let table = t.param(p[4])?;
            let e = t.embedding(table, &[1, 3, 1])?;
            let s = t.tanh(e)?;
            let m = t.mul(s, e)?;
            t.sum(m)
        }),
        ("row_blend", |t, p| {
            let (a, c) = (t.param(p[0])?, t.param(p[2])?);
            let b = t.row_blend(a, c, &[1.0, 0.0])?;
            let m = t.mul(b, a)?;
            t.sum(m)
        }),
    ]
}

fn collect(case: &str, checks: Vec<gradcheck::ParamCheck>, out: &mut Vec<CaseResult>) {
    out.extend(checks.into_iter().map(|c| CaseResult {
        case: case.to_string(),
        param: c.name,
        rel_error: c.rel_error,
    }));
}

fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<()> {
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let shape = store.value(id).shape().to_vec();
        store.set_value(id, init_uniform(&shape, 0.5, rng))?;
    }
    Ok(())
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 9,
        embed_dim: 4,
        hidden_dim: 5,
        num_layers: 2,
        max_len: 8,
    }
}

/// Every check for one seed.
pub fn run(seed: u64) -> Result<Vec<CaseResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let mut store = ParamStore::new();
    let ids = vec![
        store.add("a", init_uniform(&[2, 3], 0.5, &mut rng)),
        store.add("b", init_uniform(&[3, 4], 0.5, &mut rng)),
        store.add("c", init_uniform(&[2, 3], 0.5, &mut rng)),
        store.add("bias", init_uniform(&[1, 3], 0.5, &mut rng)),
        store.add("table", init_uniform(&[5, 2], 0.5, &mut rng)),
    ];
    for (name, f) in primitive_graphs() {
        collect(name, gradcheck::check(&mut store, &ids, STEP, |t| f(t, &ids))?, &mut out);
    }

    let batch: Vec<(Vec<u32>, Vec<u32>)> = vec![(vec![4, 5, 6], vec![7, 8]), (vec![3], vec![4, 5, 6])];
    let refs = || -> Vec<(&[u32], &[u32])> { batch.iter().map(|(s, t)| (&s[..], &t[..])).collect() };

    let mut pair = Seq2SeqPair::new(tiny_config(), &mut rng)?;
    randomize(pair.store_mut(), &mut rng)?;
    let skeleton = pair.clone();
    let ids = pair.all_params();
    let checks = gradcheck::check(pair.store_mut(), &ids, STEP, |tape| {
        let (f, _) = skeleton.nll_tape(tape, Direction::Forward, &refs())?;
        let (b, _) = skeleton.nll_tape(tape, Direction::Backward, &refs())?;
        tape.add(f, b)
    })?;
    collect("seq2seq_joint", checks, &mut out);

    let mut lm = LanguageModel::new(tiny_config(), &mut rng)?;
    randomize(lm.store_mut(), &mut rng)?;
    let skeleton = lm.clone();
    let ids = lm.all_params();
    let utts: Vec<&[u32]> = vec![&[4, 5, 6], &[7]];
    let checks = gradcheck::check(lm.store_mut(), &ids, STEP, |tape| Ok(skeleton.nll_tape(tape, &utts)?.0))?;
    collect("language_model", checks, &mut out);

    let mut disc = Discriminator::new(tiny_config(), &mut rng)?;
    randomize(disc.store_mut(), &mut rng)?;
    let skeleton = disc.clone();
    let ids = disc.all_params();
    let checks = gradcheck::check(disc.store_mut(), &ids, STEP, |tape| skeleton.bce_tape(tape, &refs(), &[true, false]))?;
    collect("discriminator", checks, &mut out);
    Ok(out)
}

pub fn worst(results: &[CaseResult]) -> Option<&CaseResult> {
    results.iter().max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_cases_pass_over_ten_seeds() {
        for seed in 0..10 {
            let r = run(seed).unwrap();
            assert!(r.len() > 40);
            let w = worst(&r).unwrap();
            assert!(w.rel_error < TOLERANCE, "seed {seed}: {w:?}");
        }
    }
}
