//! Bayesian dense layers with a multiplicative-normalizing-flow posterior, plus
//! the deterministic building blocks they are stacked with.

mod batchnorm;
mod dense;
mod flow;
mod layer;

pub use batchnorm::BatchNorm;
pub use dense::DenseLayer;
pub use flow::{CouplingFlow, CouplingNet, CouplingStep};
pub use layer::{KlParts, LayerNoise, MnfConfig, MnfDenseLayer, SampleContext};

use rand::Rng;

use crate::autodiff::{Graph, Param, Tensor, Var};
use crate::Real;

/// A module owning trainable tensors in a fixed, documented order.
pub trait Parameterized<T: Real> {
    /// Parameters with stable names, in binding order.
    fn named_params(&self) -> Vec<(String, &Param<T>)>;

    /// Same order as [`Parameterized::named_params`].
    fn params_mut(&mut self) -> Vec<&mut Param<T>>;

    fn params(&self) -> Vec<&Param<T>> {
        self.named_params().into_iter().map(|(_, p)| p).collect()
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// Binds parameters into `g`, tracked unless `frozen`.
pub fn bind<'g, T: Real>(g: &'g Graph<T>, params: &[&Param<T>], frozen: bool) -> Vec<Var<'g, T>> {
    params
        .iter()
        .map(|p| if frozen { g.frozen(p) } else { g.param(p) })
        .collect()
}

/// `U(-bound, bound)` entries.
pub fn uniform_tensor<T: Real, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..=bound)))
}

/// Fan-in scaled uniform init, `U(±sqrt(3 / fan_in))`.
pub fn lecun_uniform<T: Real, R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    uniform_tensor(&[fan_in, fan_out], (3.0 / fan_in as f64).sqrt(), rng)
}
