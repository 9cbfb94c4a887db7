use serde::{Deserialize, Serialize};

use super::{Parameterized, Scalar};

/// Adam optimizer hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-7,
        }
    }
}

/// First and second moment estimates, one flat buffer per parameter tensor
/// in visit order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn for_model<T: Scalar, M: Parameterized<T>>(model: &M) -> Self {
        let sizes: Vec<usize> = model.params().iter().map(|(_, p)| p.len()).collect();
        AdamState {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

impl Adam {
    /// One update using the gradients currently accumulated in `model`,
    /// scaled by `grad_scale` (e.g. 1/batch size).
    pub fn step<T: Scalar, M: Parameterized<T>>(&self, model: &mut M, state: &mut AdamState, lr: f64, grad_scale: f64) {
        state.step += 1;
        let t = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (_, p)) in model.params_mut().into_iter().enumerate() {
            let m = &mut state.m[i];
            let v = &mut state.v[i];
            for (j, (w, g)) in p.value.iter_mut().zip(p.grad.iter()).enumerate() {
                let g = g.to_f64_lossless() * grad_scale;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                let upd = lr * mhat / (vhat.sqrt() + self.eps);
                *w = T::from_f64_lossy(w.to_f64_lossless() - upd);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{join, Param};

    struct Quad {
        w: Param<f64>,
    }

    impl Parameterized<f64> for Quad {
        fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<f64>)>) {
            out.push((join(prefix, "w"), &self.w));
        }
        fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<f64>)>) {
            out.push((join(prefix, "w"), &mut self.w));
        }
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut q = Quad { w: Param::filled(&[2], 1.0) };
        q.w.grad[[0]] = 3.0;
        q.w.grad[[1]] = -0.01;
        let mut st = AdamState::for_model(&q);
        Adam::default().step(&mut q, &mut st, 0.1, 1.0);
        assert!((q.w.value[[0]] - 0.9).abs() < 1e-6);
        assert!((q.w.value[[1]] - 1.1).abs() < 1e-4);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut q = Quad { w: Param::filled(&[1], 5.0) };
        let mut st = AdamState::for_model(&q);
        for _ in 0..2000 {
            q.zero_grad();
            let w = q.w.value[[0]];
            q.w.grad[[0]] = 2.0 * (w - 2.0);
            Adam::default().step(&mut q, &mut st, 0.05, 1.0);
        }
        assert!((q.w.value[[0]] - 2.0).abs() < 1e-2);
    }
}
