//! Adam with bias-corrected moment estimates.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam { lr, beta1, beta2, eps, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    pub(crate) fn restore(&mut self, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<()> {
        if m.len() != v.len() {
            return Err(Error::contract("adam moment lists differ in length"));
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update of every tensor in `params` from the matching gradient.
    pub fn step<'a>(&mut self, params: impl ExactSizeIterator<Item = &'a mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::contract(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in params.zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.shape() != g.shape() || m.shape() != g.shape() {
                return Err(Error::contract("gradient shape does not match its parameter"));
            }
            for (((pv, &gv), mv), vv) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let m_hat = *mv / c1;
                let v_hat = *vv / c2;
                *pv -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_unit_gradient_moves_by_lr() {
        let mut theta = Tensor::scalar(1.0);
        let g = [Tensor::scalar(1.0)];
        let mut adam = Adam::new(0.1, 0.9, 0.999, 1e-8);
        adam.step(std::iter::once(&mut theta), &g).unwrap();
        assert!((theta.data()[0] - 0.9).abs() < 1e-6);
        adam.step(std::iter::once(&mut theta), &g).unwrap();
        assert!((theta.data()[0] - 0.8).abs() < 1e-6);
        assert_eq!(adam.steps(), 2);
    }

    #[test]
    fn hand_computed_varying_gradients() {
        // g = 2 then g = −1, lr 0.01.
        let mut theta = Tensor::scalar(0.5);
        let mut adam = Adam::new(0.01, 0.9, 0.999, 1e-8);
        adam.step(std::iter::once(&mut theta), &[Tensor::scalar(2.0)]).unwrap();
        let after1 = 0.5 - 0.01 * 2.0 / (2.0 + 1e-8);
        assert!((theta.data()[0] - after1).abs() < 1e-15);
        adam.step(std::iter::once(&mut theta), &[Tensor::scalar(-1.0)]).unwrap();
        let m = 0.9 * 0.2 + 0.1 * -1.0;
        let v = 0.999 * (0.001 * 4.0) + 0.001 * 1.0;
        let m_hat = m / (1.0 - 0.81);
        let v_hat = v / (1.0 - 0.999f64 * 0.999);
        let after2 = after1 - 0.01 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((theta.data()[0] - after2).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let mut theta = Tensor::new(vec![3], vec![0.1, -2.0, 5.0]).unwrap();
        let before = theta.clone();
        let mut adam = Adam::new(0.0, 0.9, 0.999, 1e-8);
        adam.step(std::iter::once(&mut theta), &[Tensor::new(vec![3], vec![1.0, 2.0, -3.0]).unwrap()]).unwrap();
        assert_eq!(theta, before);
    }

    #[test]
    fn mismatched_gradient_count_is_rejected() {
        let mut theta = Tensor::scalar(1.0);
        let mut adam = Adam::new(0.1, 0.9, 0.999, 1e-8);
        assert!(adam.step(std::iter::once(&mut theta), &[]).is_err());
    }
}
