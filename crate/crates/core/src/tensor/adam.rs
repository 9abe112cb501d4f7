use super::{ParamSet, Scalar};
use crate::{Error, Result};

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    /// Moment buffers sized for `params`; betas 0.9/0.999, epsilon 1e-8.
    pub fn new(params: &ParamSet<T>, learning_rate: f64) -> Self {
        let zeros = |n| vec![T::zero(); n];
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: params.iter().map(|(_, t)| zeros(t.numel())).collect(),
            v: params.iter().map(|(_, t)| zeros(t.numel())).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update using each tensor's `grad`; tensors without a
    /// gradient are treated as having a zero gradient.
    pub fn apply(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        let tensors = params.tensors_mut();
        if tensors.len() != self.m.len() {
            return Err(Error::dim("adam_step", &[tensors.len()], &[self.m.len()]));
        }
        for (t, m) in tensors.iter().zip(&self.m) {
            if t.numel() != m.len() || t.grad.as_ref().is_some_and(|g| g.len() != m.len()) {
                return Err(Error::dim("adam_step", t.shape(), &[m.len()]));
            }
        }
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let lr = T::lit(self.learning_rate / c1);
        let (b1t, b2t) = (T::lit(b1), T::lit(b2));
        let (one_b1, one_b2) = (T::lit(1.0 - b1), T::lit(1.0 - b2));
        let inv_c2 = T::lit(1.0 / c2);
        let eps = T::lit(self.epsilon);
        for ((t, m), v) in tensors.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(grad) = t.grad.take() else {
                // Zero gradient still decays the moments.
                for (mi, vi) in m.iter_mut().zip(v.iter_mut()) {
                    *mi *= b1t;
                    *vi *= b2t;
                }
                let data = t.data_mut();
                for ((p, mi), vi) in data.iter_mut().zip(m.iter()).zip(v.iter()) {
                    *p -= lr * *mi / ((*vi * inv_c2).sqrt() + eps);
                }
                continue;
            };
            let data = t.data_mut();
            for (((p, &g), mi), vi) in data.iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1t * *mi + one_b1 * g;
                *vi = b2t * *vi + one_b2 * g * g;
                *p -= lr * *mi / ((*vi * inv_c2).sqrt() + eps);
            }
            t.grad = Some(grad);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Init, Tensor};

    fn single(w: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.add_tensor("w", Tensor::from_f64(&[1], &[w]).unwrap());
        p
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = ParamSet::<f64>::new();
        let mut rng = rand::rng();
        let id = p.add("w", &[3, 4], Init::XavierUniform { fan_in: 4, fan_out: 3 }, &mut rng);
        let before = p.get(id).clone();
        let mut adam = AdamState::new(&p, 1e-3);
        for _ in 0..5 {
            p.get_mut(id).grad = Some(vec![0.0; 12]);
            adam.apply(&mut p).unwrap();
        }
        assert_eq!(p.get(id).data(), before.data());
        assert_eq!(adam.step_count(), 5);
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_gradient() {
        for g in [-3.0, 1e-3, 250.0] {
            let mut p = single(1.0);
            let id = p.find("w").unwrap();
            let mut adam = AdamState::new(&p, 0.01);
            p.get_mut(id).grad = Some(vec![g]);
            adam.apply(&mut p).unwrap();
            let delta = p.get(id).data()[0] - 1.0;
            assert!((delta + 0.01 * f64::signum(g)).abs() < 1e-6, "g={g} delta={delta}");
        }
    }

    #[test]
    fn converges_on_shifted_quadratic() {
        let mut p = single(0.0);
        let id = p.find("w").unwrap();
        let mut adam = AdamState::new(&p, 0.1);
        for _ in 0..200 {
            let w = p.get(id).data()[0];
            p.get_mut(id).grad = Some(vec![2.0 * (w - 3.0)]);
            adam.apply(&mut p).unwrap();
        }
        let w = p.get(id).data()[0];
        assert!((w - 3.0).abs() < 0.1, "w = {w}");
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mut p = single(0.0);
        let mut adam = AdamState::new(&p, 0.1);
        let id = p.find("w").unwrap();
        p.get_mut(id).grad = Some(vec![1.0, 2.0]);
        assert!(matches!(adam.apply(&mut p), Err(Error::Dimension { .. })));
    }
}
