use super::Parameterized;
use crate::autodiff::{BatchNormMode, BatchStats, Param, Result, Tensor, Var};
use crate::Real;

/// Batch normalization with learned affine output and running statistics.
#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub momentum: T,
    pub eps: T,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Param::new(Tensor::ones(&[dim])),
            beta: Param::new(Tensor::zeros(&[dim])),
            running_mean: Tensor::zeros(&[dim]),
            running_var: Tensor::ones(&[dim]),
            momentum: T::lit(0.1),
            eps: T::lit(1e-5),
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn mode(&self, train: bool) -> BatchNormMode<T> {
        if train {
            BatchNormMode::Train { eps: self.eps }
        } else {
            BatchNormMode::Eval {
                running_mean: self.running_mean.clone(),
                running_var: self.running_var.clone(),
                eps: self.eps,
            }
        }
    }

    pub fn forward_bound<'g>(
        &self,
        vars: &[Var<'g, T>],
        x: Var<'g, T>,
        train: bool,
    ) -> Result<(Var<'g, T>, Option<BatchStats<T>>)> {
        x.batch_norm(vars[0], vars[1], &self.mode(train))
    }

    /// `running = (1 - momentum) running + momentum batch`.
    pub fn update_running(&mut self, stats: &BatchStats<T>) {
        let m = self.momentum;
        let keep = T::one() - m;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(stats.mean.data()) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(stats.var.data()) {
            *r = keep * *r + m * b;
        }
    }
}

impl<T: Real> Parameterized<T> for BatchNorm<T> {
    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        vec![("gamma".into(), &self.gamma), ("beta".into(), &self.beta)]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.gamma, &mut self.beta]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::mnf::bind;

    #[test]
    fn running_update_uses_momentum() {
        let mut bn = BatchNorm::<f64>::new(2);
        let g = Graph::new();
        let vars = bind(&g, &bn.params(), false);
        let x = g.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 6.0]]).unwrap());
        let (_, stats) = bn.forward_bound(&vars, x, true).unwrap();
        bn.update_running(&stats.unwrap());
        assert!((bn.running_mean.data()[0] - 0.2).abs() < 1e-15);
        assert!((bn.running_mean.data()[1] - 0.4).abs() < 1e-15);
        // unbiased var of [1,3] is 2, of [2,6] is 8
        assert!((bn.running_var.data()[0] - (0.9 + 0.2)).abs() < 1e-15);
        assert!((bn.running_var.data()[1] - (0.9 + 0.8)).abs() < 1e-15);
    }
}
