use rand::Rng;

use super::{bind, lecun_uniform, Parameterized};
use crate::autodiff::{Graph, Param, Result, Tensor, Var};
use crate::Real;

/// Ordinary affine layer `x W + b`.
#[derive(Debug, Clone)]
pub struct DenseLayer<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> DenseLayer<T> {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        Self {
            weight: Param::new(lecun_uniform(in_dim, out_dim, rng)),
            bias: Param::new(Tensor::zeros(&[out_dim])),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward_bound<'g>(&self, vars: &[Var<'g, T>], x: Var<'g, T>) -> Result<Var<'g, T>> {
        x.matmul(vars[0])?.add(vars[1])
    }

    pub fn forward<'g>(&self, g: &'g Graph<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let vars = bind(g, &self.params(), false);
        self.forward_bound(&vars, x)
    }
}

impl<T: Real> Parameterized<T> for DenseLayer<T> {
    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![&mut self.weight, &mut self.bias]
    }
}
