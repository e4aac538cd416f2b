//! Affine coupling flow on a single row vector.
//!
//! Step `k` keeps the coordinates selected by its binary mask `m` and
//! transforms the rest:
//!
//! ```text
//! z' = m*z + (1-m)*(z*exp(s(m*z)) + t(m*z)),   log|det| = sum((1-m)*s)
//! ```
//!
//! `s` and `t` are single-hidden-layer tanh networks. Masks alternate between
//! steps, and the output layers start at zero so a fresh flow is the identity.

use rand::Rng;

use super::{bind, uniform_tensor, Parameterized};
use crate::autodiff::{matmul, Graph, Param, Result, Tensor, TensorError, Var};
use crate::Real;

/// `tanh(x W1 + b1) W2 + b2`.
#[derive(Debug, Clone)]
pub struct CouplingNet<T> {
    pub w1: Param<T>,
    pub b1: Param<T>,
    pub w2: Param<T>,
    pub b2: Param<T>,
}

impl<T: Real> CouplingNet<T> {
    fn new<R: Rng + ?Sized>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        let bound = (3.0 / dim as f64).sqrt();
        Self {
            w1: Param::new(uniform_tensor(&[dim, hidden], bound, rng)),
            b1: Param::new(Tensor::zeros(&[hidden])),
            w2: Param::new(Tensor::zeros(&[hidden, dim])),
            b2: Param::new(Tensor::zeros(&[dim])),
        }
    }

    fn eval(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = add_row(&matmul(x, false, &self.w1, false)?, &self.b1).map(|v| v.tanh());
        Ok(add_row(&matmul(&h, false, &self.w2, false)?, &self.b2))
    }
}

fn add_row<T: Real>(a: &Tensor<T>, row: &Tensor<T>) -> Tensor<T> {
    let n = row.len();
    let mut out = a.clone();
    for r in out.data_mut().chunks_mut(n) {
        for (v, &b) in r.iter_mut().zip(row.data()) {
            *v += b;
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct CouplingStep<T> {
    mask: Tensor<T>,
    pub scale: CouplingNet<T>,
    pub shift: CouplingNet<T>,
}

impl<T: Real> CouplingStep<T> {
    pub fn mask(&self) -> &Tensor<T> {
        &self.mask
    }
}

#[derive(Debug, Clone)]
pub struct CouplingFlow<T> {
    dim: usize,
    hidden: usize,
    steps: Vec<CouplingStep<T>>,
}

/// Bound parameters of one step.
struct StepVars<'g, T> {
    s: [Var<'g, T>; 4],
    t: [Var<'g, T>; 4],
}

impl<T: Real> CouplingFlow<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, num_steps: usize, hidden: usize, rng: &mut R) -> Self {
        let steps = (0..num_steps)
            .map(|k| CouplingStep {
                mask: Tensor::from_fn(&[1, dim], |i| {
                    if (i + k) % 2 == 0 {
                        T::one()
                    } else {
                        T::zero()
                    }
                }),
                scale: CouplingNet::new(dim, hidden, rng),
                shift: CouplingNet::new(dim, hidden, rng),
            })
            .collect();
        Self { dim, hidden, steps }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn steps(&self) -> &[CouplingStep<T>] {
        &self.steps
    }

    fn check_dim(&self, shape: &[usize]) -> Result<()> {
        if shape != [1, self.dim] {
            return Err(TensorError::Contract(format!(
                "flow of dimension {} applied to shape {:?}",
                self.dim, shape
            )));
        }
        Ok(())
    }

    /// Flows a `1 x dim` row through every step on the graph, given this
    /// flow's parameters bound in [`Parameterized::params`] order. Returns
    /// `(z_T, log_det)` with `log_det` a scalar node.
    pub fn forward_bound<'g>(
        &self,
        g: &'g Graph<T>,
        vars: &[Var<'g, T>],
        z0: Var<'g, T>,
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        self.check_dim(&z0.shape())?;
        if vars.len() != 8 * self.steps.len() {
            return Err(TensorError::Contract("flow parameter count mismatch".into()));
        }
        let net = |v: &[Var<'g, T>; 4], x: Var<'g, T>| -> Result<Var<'g, T>> {
            x.matmul(v[0])?.add(v[1])?.tanh()?.matmul(v[2])?.add(v[3])
        };
        let mut z = z0;
        let mut log_det = g.scalar(T::zero());
        for (k, step) in self.steps.iter().enumerate() {
            let sv = StepVars {
                s: std::array::from_fn(|i| vars[8 * k + i]),
                t: std::array::from_fn(|i| vars[8 * k + 4 + i]),
            };
            let m = g.constant(step.mask.clone());
            let inv = g.constant(step.mask.map(|v| T::one() - v));
            let kept = z.mul(m)?;
            let s = net(&sv.s, kept)?;
            let t = net(&sv.t, kept)?;
            let moved = z.mul(s.exp()?)?.add(t)?.mul(inv)?;
            z = kept.add(moved)?;
            log_det = log_det.add(s.mul(inv)?.sum()?)?;
        }
        Ok((z, log_det))
    }

    /// Graph forward with this flow's parameters bound as trainable leaves.
    pub fn forward<'g>(&self, g: &'g Graph<T>, z0: Var<'g, T>) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let vars = bind(g, &self.params(), false);
        self.forward_bound(g, &vars, z0)
    }

    /// Value-level forward of a `1 x dim` row.
    pub fn apply(&self, z0: &Tensor<T>) -> Result<(Tensor<T>, T)> {
        self.check_dim(z0.shape())?;
        let mut z = z0.clone();
        let mut log_det = T::zero();
        for step in &self.steps {
            let kept = masked(&z, &step.mask);
            let s = step.scale.eval(&kept)?;
            let t = step.shift.eval(&kept)?;
            for i in 0..self.dim {
                let m = step.mask.data()[i];
                if m == T::zero() {
                    let si = s.data()[i];
                    z.data_mut()[i] = z.data()[i] * si.exp() + t.data()[i];
                    log_det += si;
                }
            }
        }
        Ok((z, log_det))
    }

    /// Exact inverse of [`CouplingFlow::apply`]; the log-det is that of the
    /// inverse map.
    pub fn inverse(&self, z_t: &Tensor<T>) -> Result<(Tensor<T>, T)> {
        self.check_dim(z_t.shape())?;
        let mut z = z_t.clone();
        let mut log_det = T::zero();
        for step in self.steps.iter().rev() {
            let kept = masked(&z, &step.mask);
            let s = step.scale.eval(&kept)?;
            let t = step.shift.eval(&kept)?;
            for i in 0..self.dim {
                if step.mask.data()[i] == T::zero() {
                    let si = s.data()[i];
                    z.data_mut()[i] = (z.data()[i] - t.data()[i]) * (-si).exp();
                    log_det -= si;
                }
            }
        }
        Ok((z, log_det))
    }
}

fn masked<T: Real>(z: &Tensor<T>, mask: &Tensor<T>) -> Tensor<T> {
    let mut out = z.clone();
    for (v, &m) in out.data_mut().iter_mut().zip(mask.data()) {
        *v *= m;
    }
    out
}

impl<T: Real> Parameterized<T> for CouplingFlow<T> {
    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = Vec::with_capacity(8 * self.steps.len());
        for (k, st) in self.steps.iter().enumerate() {
            for (net, tag) in [(&st.scale, "s"), (&st.shift, "t")] {
                out.push((format!("step{k}.{tag}.w1"), &net.w1));
                out.push((format!("step{k}.{tag}.b1"), &net.b1));
                out.push((format!("step{k}.{tag}.w2"), &net.w2));
                out.push((format!("step{k}.{tag}.b2"), &net.b2));
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = Vec::with_capacity(8 * self.steps.len());
        for st in &mut self.steps {
            for net in [&mut st.scale, &mut st.shift] {
                out.push(&mut net.w1);
                out.push(&mut net.b1);
                out.push(&mut net.w2);
                out.push(&mut net.b2);
            }
        }
        out
    }
}
