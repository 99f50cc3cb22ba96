//! Adaptive-moment optimizers over a [`ParamStore`].

use crate::params::{GradBuffer, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Adam, optionally with decoupled weight decay (AdamW).
#[derive(Debug, Clone)]
pub struct Adam<S> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Matrix<S>>,
    v: Vec<Matrix<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(store: &ParamStore<S>, lr: f64) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, _, p)| Matrix::zeros(p.rows(), p.cols()))
                .collect::<Vec<_>>()
        };
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn adamw(store: &ParamStore<S>, lr: f64, weight_decay: f64) -> Self {
        Self {
            weight_decay,
            ..Self::new(store, lr)
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &GradBuffer<S>) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (S::from_f64_lossy(self.beta1), S::from_f64_lossy(self.beta2));
        let (one_b1, one_b2) = (S::one() - b1, S::one() - b2);
        let step = S::from_f64_lossy(self.lr / c1);
        let inv_c2 = S::from_f64_lossy(1.0 / c2);
        let eps = S::from_f64_lossy(self.eps);
        let decay = S::from_f64_lossy(1.0 - self.lr * self.weight_decay);
        for (((p, g), m), v) in store
            .values_mut()
            .zip(grads.iter())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let (p, g, m, v) = (p.as_mut_slice(), g.as_slice(), m.as_mut_slice(), v.as_mut_slice());
            for i in 0..p.len() {
                m[i] = b1 * m[i] + one_b1 * g[i];
                v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                if self.weight_decay != 0.0 {
                    p[i] *= decay;
                }
                p[i] -= step * m[i] / ((v[i] * inv_c2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Matrix::row_vector(&[1.0, -2.0]));
        let mut g = GradBuffer::zeros_like(&store);
        g.accumulate(id, &Matrix::row_vector(&[3.0, -0.5]));
        let mut opt = Adam::new(&store, 0.1);
        opt.step(&mut store, &g);
        let x = store.get(id);
        assert!((x[(0, 0)] - 0.9).abs() < 1e-6);
        assert!((x[(0, 1)] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Matrix::scalar(2.0));
        let g = GradBuffer::zeros_like(&store);
        let mut opt = Adam::adamw(&store, 0.1, 0.5);
        opt.step(&mut store, &g);
        assert!((store.get(id)[(0, 0)] - 1.9).abs() < 1e-12);
    }
}
