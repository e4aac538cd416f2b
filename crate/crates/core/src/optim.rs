//! Adam with bias correction.

use crate::autodiff::{Param, Tensor, TensorError};
use crate::Real;

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
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

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of `params` (in a fixed order) from matching `grads`.
    pub fn step(&mut self, params: Vec<&mut Param<T>>, grads: &[Tensor<T>]) -> Result<(), TensorError> {
        if params.len() != grads.len() {
            return Err(TensorError::Contract(format!(
                "adam: {} parameters but {} gradients",
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
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let c1 = T::lit(1.0 - self.beta1.powi(t));
        let c2 = T::lit(1.0 - self.beta2.powi(t));
        let lr = T::lit(self.lr);
        let eps = T::lit(self.eps);
        let one = T::one();
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.m[i].shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adam",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let w = Param::make_mut(p).data_mut();
            for j in 0..w.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + (one - b1) * gj;
                v[j] = b2 * v[j] + (one - b2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                w[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Param::new(Tensor::vector(vec![1.0, -2.0]));
        let mut opt = Adam::<f64>::new(0.1);
        opt.step(vec![&mut p], &[Tensor::vector(vec![3.0, -0.5])]).unwrap();
        assert!((p.data()[0] - 0.9).abs() < 1e-8);
        assert!((p.data()[1] + 1.9).abs() < 1e-8);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = Param::new(Tensor::vector(vec![5.0]));
        let mut opt = Adam::<f64>::new(0.05);
        for _ in 0..2000 {
            let g = Tensor::vector(vec![2.0 * (p.data()[0] - 1.5)]);
            opt.step(vec![&mut p], &[g]).unwrap();
        }
        assert!((p.data()[0] - 1.5).abs() < 1e-3);
    }
}
