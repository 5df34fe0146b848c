//! Adam with bias correction.

use crate::error::{contract, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(1e-3)
    }
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update over `params`, in order. The parameter list must be the
    /// same (same order, same shapes) on every call. Parameters without a
    /// gradient are treated as having a zero gradient. Gradients are
    /// cleared afterwards.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(contract(
                "adam_step",
                format!("state tracks {} parameters, got {}", self.m.len(), params.len()),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            if m.len() != p.numel() {
                return Err(contract("adam_step", "moment buffer does not match parameter"));
            }
            if let Some(g) = p.grad.take() {
                for (((w, gi), mi), vi) in p.data.iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                    *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                    let mhat = *mi / c1;
                    let vhat = *vi / c2;
                    *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
                }
            } else {
                // Zero gradient: moments decay, parameter still moves by
                // whatever momentum remains.
                for ((w, mi), vi) in p.data.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mi *= self.beta1;
                    *vi *= self.beta2;
                    let mhat = *mi / c1;
                    let vhat = *vi / c2;
                    *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
                }
            }
        }
        Ok(())
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let mut p = Tensor::from_vec(vec![0.5]);
        p.grad = Some(vec![1.0]);
        let mut adam = AdamState::new(0.001);
        adam.step(&mut [&mut p]).unwrap();
        let expected = 0.5 - 0.001 * 1.0 / (1.0 + 1e-8);
        assert!((p.data[0] - expected).abs() < 1e-15);
        assert!(p.grad.is_none());
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::from_vec(vec![1.0, -2.0]);
        let mut adam = AdamState::new(0.001);
        for _ in 0..5 {
            p.grad = Some(vec![0.0, 0.0]);
            adam.step(&mut [&mut p]).unwrap();
        }
        assert_eq!(p.data, vec![1.0, -2.0]);
        assert_eq!(adam.step, 5);
    }

    #[test]
    fn equal_gradients_equal_updates() {
        let mut a = Tensor::from_vec(vec![0.3]);
        let mut b = Tensor::from_vec(vec![-0.7]);
        let mut adam = AdamState::new(0.01);
        for k in 0..4 {
            let g = 0.2 + k as f64;
            a.grad = Some(vec![g]);
            b.grad = Some(vec![g]);
            adam.step(&mut [&mut a, &mut b]).unwrap();
        }
        assert!(((a.data[0] - 0.3) - (b.data[0] + 0.7)).abs() < 1e-15);
    }

    #[test]
    fn moment_buffers_track_shapes() {
        let mut a = Tensor::zeros(&[2, 3]);
        let mut b = Tensor::zeros(&[4]);
        let mut adam = AdamState::default();
        adam.step(&mut [&mut a, &mut b]).unwrap();
        let (m, v) = adam.moments();
        assert_eq!(m[0].len(), 6);
        assert_eq!(v[1].len(), 4);
        assert!(adam.step(&mut [&mut a]).is_err());
    }
}
