use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::numerics::Tensor;

/// Adam with bias-corrected first and second moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { beta1, beta2, eps, t: 0, m: zeros(), v: zeros() }
    }

    /// Applies one update with learning rate `lr` given per-parameter gradients.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || grads.iter().zip(params.tensors()).any(|(g, p)| g.len() != p.numel()) {
            return Err(Error::Config("gradient layout does not match the parameters".into()));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params.tensors_mut().iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: &[f64]) -> ParamStore {
        let mut s = ParamStore::default();
        s.add("w", Tensor::from_vec(values.to_vec()));
        s
    }

    #[test]
    fn first_step_moves_by_learning_rate_against_the_sign() {
        let mut p = store(&[1.0, -2.0, 0.5]);
        let mut adam = Adam::new(&p, 0.9, 0.98, 1e-9);
        adam.step(&mut p, &[vec![0.3, -4.0, 0.0]], 0.01).unwrap();
        let w = p.tensors()[0].data();
        assert!((w[0] - 0.99).abs() < 1e-8);
        assert!((w[1] - -1.99).abs() < 1e-8);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = store(&[3.0, -1.0]);
        let mut adam = Adam::new(&p, 0.9, 0.98, 1e-9);
        for _ in 0..2000 {
            let g: Vec<f64> = p.tensors()[0].data().iter().map(|x| 2.0 * x).collect();
            adam.step(&mut p, &[g], 0.01).unwrap();
        }
        assert!(p.tensors()[0].data().iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn mismatched_gradients_are_rejected() {
        let mut p = store(&[1.0]);
        let mut adam = Adam::new(&p, 0.9, 0.98, 1e-9);
        assert!(adam.step(&mut p, &[vec![1.0, 2.0]], 0.1).is_err());
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![vec![3.0], vec![4.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
        let mut small = vec![vec![0.1]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small, vec![vec![0.1]]);
    }
}
