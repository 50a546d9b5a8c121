use super::param::{ParamId, ParamStore};
use crate::{Error, Result};

/// Bias-corrected Adam.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One update over `group`, then zeroes its gradients.
    ///
    /// A non-finite gradient anywhere in the group aborts the whole step and
    /// leaves every value, moment and gradient as it was.
    pub fn step(&self, store: &mut ParamStore, group: &[ParamId]) -> Result<()> {
        let Some(&first) = group.first() else {
            return Ok(());
        };
        let t = store.get(first).step_count;
        for &id in group {
            let p = store.get(id);
            if p.step_count != t {
                return Err(Error::invalid(format!(
                    "{}: step count {} differs from group step count {t}",
                    p.name, p.step_count
                )));
            }
            if !p.grad.all_finite() {
                return Err(Error::Numeric(format!("non-finite gradient in {}", p.name)));
            }
        }
        let t = (t + 1) as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for &id in group {
            let p = store.get_mut(id);
            let m = p.adam_m.data_mut();
            let v = p.adam_v.data_mut();
            let g = p.grad.data_mut();
            let w = p.value.data_mut();
            for i in 0..w.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.eps);
                g[i] = 0.0;
            }
            p.step_count += 1;
        }
        Ok(())
    }
}

pub fn global_norm(store: &ParamStore, group: &[ParamId]) -> f64 {
    group
        .iter()
        .map(|&id| store.get(id).grad.sq_norm())
        .sum::<f64>()
        .sqrt()
}

/// Rescales the group's gradients so their joint L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(store: &mut ParamStore, group: &[ParamId], max_norm: f64) -> f64 {
    let norm = global_norm(store, group);
    if norm > max_norm {
        let k = max_norm / norm;
        for &id in group {
            store
                .get_mut(id)
                .grad
                .data_mut()
                .iter_mut()
                .for_each(|g| *g *= k);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;
    use proptest::prelude::*;

    fn store_with(values: &[f64], grads: &[f64]) -> (ParamStore, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let id = s.add("p", Tensor::new(vec![values.len()], values.to_vec()).unwrap());
        s.get_mut(id).grad = Tensor::new(vec![grads.len()], grads.to_vec()).unwrap();
        (s, vec![id])
    }

    /// Closed form of the first bias-corrected step: m̂ = g, v̂ = g².
    fn first_step_oracle(lr: f64, g: f64, eps: f64) -> f64 {
        -lr * g / (g.abs() + eps)
    }

    #[test]
    fn first_step_is_minus_lr_times_sign() {
        let (mut s, g) = store_with(&[0.0], &[1.0]);
        Adam::new(0.15).step(&mut s, &g).unwrap();
        let delta = s.value(g[0]).item();
        assert!((delta - first_step_oracle(0.15, 1.0, 1e-8)).abs() < 1e-15);
        assert!((delta + 0.15).abs() < 1e-6);
        assert_eq!(s.get(g[0]).grad.item(), 0.0);
        assert_eq!(s.get(g[0]).step_count, 1);
    }

    #[test]
    fn zero_gradient_leaves_value_but_counts_step() {
        let (mut s, g) = store_with(&[0.3, -0.2], &[0.0, 0.0]);
        Adam::new(0.15).step(&mut s, &g).unwrap();
        assert_eq!(s.value(g[0]).data(), &[0.3, -0.2]);
        assert_eq!(s.get(g[0]).step_count, 1);
    }

    #[test]
    fn second_identical_step_is_not_larger() {
        // Oracle: replay the moment recursion by hand for g = 1 twice.
        let (b1, b2, lr, eps) = (0.9f64, 0.999f64, 0.15, 1e-8);
        let (m1, v1) = (1.0 - b1, 1.0 - b2);
        let d1 = lr * (m1 / (1.0 - b1)) / ((v1 / (1.0 - b2)).sqrt() + eps);
        let (m2, v2) = (b1 * m1 + (1.0 - b1), b2 * v1 + (1.0 - b2));
        let d2 = lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);

        let (mut s, g) = store_with(&[0.0], &[1.0]);
        let adam = Adam::new(lr);
        adam.step(&mut s, &g).unwrap();
        let after1 = s.value(g[0]).item();
        s.get_mut(g[0]).grad.fill(1.0);
        adam.step(&mut s, &g).unwrap();
        let after2 = s.value(g[0]).item();
        let (step1, step2) = (after1.abs(), (after2 - after1).abs());
        assert!((step1 - d1).abs() < 1e-12);
        assert!((step2 - d2).abs() < 1e-12);
        assert!(step2 <= step1 + 1e-9);
    }

    #[test]
    fn non_finite_gradient_skips_group() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::ones(&[2]));
        let b = s.add("b", Tensor::ones(&[1]));
        s.get_mut(a).grad.fill(0.5);
        s.get_mut(b).grad = Tensor::new(vec![1], vec![f64::NAN]).unwrap();
        let err = Adam::new(0.1).step(&mut s, &[a, b]).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(s.value(a).data(), &[1.0, 1.0]);
        assert_eq!(s.get(a).step_count, 0);
        assert_eq!(s.get(a).grad.data(), &[0.5, 0.5]);
    }

    #[test]
    fn mismatched_step_counts_rejected() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::ones(&[1]));
        let b = s.add("b", Tensor::ones(&[1]));
        s.get_mut(b).step_count = 3;
        assert!(Adam::new(0.1).step(&mut s, &[a, b]).is_err());
    }

    #[test]
    fn clip_examples() {
        // norm 10 → halved
        let (mut s, g) = store_with(&[0.0, 0.0], &[6.0, 8.0]);
        assert_eq!(clip_global_norm(&mut s, &g, 5.0), 10.0);
        assert_eq!(s.get(g[0]).grad.data(), &[3.0, 4.0]);
        // norm exactly 5 → unchanged
        assert_eq!(clip_global_norm(&mut s, &g, 5.0), 5.0);
        assert_eq!(s.get(g[0]).grad.data(), &[3.0, 4.0]);
        // norm 3 → unchanged
        let (mut s, g) = store_with(&[0.0], &[3.0]);
        clip_global_norm(&mut s, &g, 5.0);
        assert_eq!(s.get(g[0]).grad.data(), &[3.0]);
        // empty group is a no-op
        assert_eq!(clip_global_norm(&mut s, &[], 5.0), 0.0);
    }

    proptest! {
        #[test]
        fn clipping_is_idempotent_and_bounded(
            grads in prop::collection::vec(-50.0f64..50.0, 1..12),
            max_norm in 0.1f64..20.0,
        ) {
            let zeros = vec![0.0; grads.len()];
            let (mut s, g) = store_with(&zeros, &grads);
            clip_global_norm(&mut s, &g, max_norm);
            let once = s.get(g[0]).grad.clone();
            prop_assert!(global_norm(&s, &g) <= max_norm + 1e-9);
            clip_global_norm(&mut s, &g, max_norm);
            let twice = &s.get(g[0]).grad;
            for (a, b) in once.data().iter().zip(twice.data()) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }

        #[test]
        fn zero_learning_rate_never_moves(
            values in prop::collection::vec(-1.0f64..1.0, 1..8),
            scale in -100.0f64..100.0,
        ) {
            let grads: Vec<f64> = values.iter().map(|v| v * scale).collect();
            let (mut s, g) = store_with(&values, &grads);
            Adam::new(0.0).step(&mut s, &g).unwrap();
            prop_assert_eq!(s.value(g[0]).data(), &values[..]);
        }
    }
}
