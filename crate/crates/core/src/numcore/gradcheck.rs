//! Central finite-difference gradient checking.

use super::{ParamId, ParamStore, Tape, Var};
use crate::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    /// `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`; zero when both
    /// vanish.
    pub rel_error: f64,
    pub analytic_norm: f64,
}

/// Compares tape gradients of `loss_fn` against central differences with
/// step `h` for every entry of every parameter in `ids`.
pub fn check<F>(store: &mut ParamStore, ids: &[ParamId], h: f64, loss_fn: F) -> Result<Vec<ParamCheck>>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let loss = loss_fn(&mut tape)?;
        tape.backward(loss)?
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(store);
        let loss = loss_fn(&mut tape)?;
        Ok(tape.value(loss).item())
    };
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        let n = store.get(id).value.len();
        let mut numeric = vec![0.0; n];
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + h;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - h;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * h);
        }
        let zeros = vec![0.0; n];
        let a = analytic.get(id).map_or(&zeros[..], |t| t.data());
        let diff: f64 = a.iter().zip(&numeric).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let an: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
        let denom = an.max(nn);
        out.push(ParamCheck {
            name: store.get(id).name.clone(),
            rel_error: if denom == 0.0 { 0.0 } else { diff / denom },
            analytic_norm: an,
        });
    }
    Ok(out)
}
