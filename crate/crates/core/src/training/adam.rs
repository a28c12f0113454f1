use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor2};

/// Adam with bias-corrected moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor2>,
    v: Vec<Tensor2>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = |s: &ParamStore| {
            s.ids()
                .map(|id| {
                    let (r, c) = s.value(id).shape();
                    Tensor2::zeros(r, c)
                })
                .collect::<Vec<_>>()
        };
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(store),
            v: zeros(store),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients held in `store`. Non-finite
    /// gradients abort the step before anything is modified.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        if let Some(id) = store.ids().find(|&id| !store.grad(id).is_finite()) {
            return Err(Error::NonFinite(format!("gradient of `{}`; optimizer step aborted", store.name(id))));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let grad = store.grad(id).data.clone();
            let (m, v) = (&mut self.m[k].data, &mut self.v[k].data);
            let value = &mut store.value_mut(id).data;
            for i in 0..grad.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                value[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{init_params, ParamSpec};

    fn store() -> ParamStore {
        init_params(&[ParamSpec::weight("w", 4, 4)], 5)
    }

    fn set_grad_to_2w(s: &mut ParamStore) {
        let id = s.id("w").unwrap();
        let g = s.value(id).scale(2.0);
        *s.grad_mut(id) = g;
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store();
        let id = s.id("w").unwrap();
        s.grad_mut(id).data.iter_mut().enumerate().for_each(|(i, g)| *g = if i % 2 == 0 { 0.5 } else { -0.02 });
        let before = s.value(id).clone();
        let mut adam = Adam::new(&s);
        adam.step(&mut s, 1e-3).unwrap();
        for (i, (a, b)) in before.data.iter().zip(&s.value(id).data).enumerate() {
            let expected = if i % 2 == 0 { -1e-3 } else { 1e-3 };
            assert!(((b - a) - expected).abs() < 1e-6, "{i}: {}", b - a);
        }
    }

    #[test]
    fn zero_gradients_leave_params() {
        let mut s = store();
        let before = s.clone();
        let mut adam = Adam::new(&s);
        adam.step(&mut s, 0.1).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let mut s = store();
        let mut adam = Adam::new(&s);
        for _ in 0..500 {
            set_grad_to_2w(&mut s);
            adam.step(&mut s, 1e-2).unwrap();
        }
        let norm = s.value(s.id("w").unwrap()).data.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm < 1e-3, "{norm}");
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut s = store();
        let id = s.id("w").unwrap();
        s.grad_mut(id).data[3] = f64::NAN;
        let before = s.clone();
        let mut adam = Adam::new(&s);
        assert!(matches!(adam.step(&mut s, 0.1), Err(Error::NonFinite(_))));
        assert_eq!(s.value(id), before.value(id));
        assert_eq!(adam.steps_taken(), 0);
    }
}
