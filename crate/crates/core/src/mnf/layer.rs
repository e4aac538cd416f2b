//! Dense layer with a multiplicative-normalizing-flow weight posterior.
//!
//! `q(W) = ∫ q(W | z) q(z) dz` with `q(W_ij | z) = N(z_i M_ij, exp(L_ij))`
//! and `z = f_q(z0)`, `z0 ~ N(μ_z, exp(λ_z))`. The forward pass never draws
//! `W`: pre-activations are sampled directly from their Gaussian marginal.
//! The KL penalty is a one-sample estimate built from three pieces, see
//! [`KlParts`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::flow::CouplingFlow;
use super::{bind, lecun_uniform, uniform_tensor, Parameterized};
use crate::autodiff::{Graph, Param, Result, Tensor, TensorError, Var};
use crate::rng::standard_normal;
use crate::Real;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MnfConfig {
    pub flow_steps: usize,
    pub flow_hidden: usize,
    pub init_log_var: f64,
    /// Pins `z = 1` and drops the auxiliary terms: a mean-field Gaussian layer.
    pub degenerate: bool,
}

impl Default for MnfConfig {
    fn default() -> Self {
        Self {
            flow_steps: 2,
            flow_hidden: 50,
            init_log_var: -9.0,
            degenerate: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MnfDenseLayer<T> {
    in_dim: usize,
    out_dim: usize,
    pub mean_w: Param<T>,
    pub log_var_w: Param<T>,
    pub mean_b: Param<T>,
    pub log_var_b: Param<T>,
    pub qz_mean: Param<T>,
    pub qz_log_var: Param<T>,
    /// Weight projection of the auxiliary model `r(z | W)`.
    pub aux_c: Param<T>,
    pub aux_b1: Param<T>,
    pub aux_b2: Param<T>,
    pub q_flow: CouplingFlow<T>,
    pub r_flow: CouplingFlow<T>,
    degenerate: bool,
    generation: u64,
}

/// Noise consumed by one forward pass and its KL estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNoise<T> {
    /// `1 x in`, drives `z0`.
    pub z: Tensor<T>,
    /// `in x out`, drives the weight sample used by `r(z | W)`.
    pub w: Tensor<T>,
    /// `batch x out`, drives the pre-activations.
    pub out: Tensor<T>,
}

impl<T: Real> LayerNoise<T> {
    pub fn draw<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, batch: usize, rng: &mut R) -> Self {
        Self {
            z: standard_normal(rng, &[1, in_dim]),
            w: standard_normal(rng, &[in_dim, out_dim]),
            out: standard_normal(rng, &[batch, out_dim]),
        }
    }

    /// All-zero noise: `z0` at its mean and pre-activations at their means.
    pub fn zeros(in_dim: usize, out_dim: usize, batch: usize) -> Self {
        Self {
            z: Tensor::zeros(&[1, in_dim]),
            w: Tensor::zeros(&[in_dim, out_dim]),
            out: Tensor::zeros(&[batch, out_dim]),
        }
    }
}

/// State of one forward pass needed by [`MnfDenseLayer::kl_term`].
#[derive(Debug, Clone)]
pub struct SampleContext<'g, T> {
    vars: Vec<Var<'g, T>>,
    z_t: Var<'g, T>,
    log_det_q: Var<'g, T>,
    noise_z: Tensor<T>,
    noise_w: Tensor<T>,
    generation: u64,
}

impl<'g, T: Real> SampleContext<'g, T> {
    /// The flowed multiplicative variable `z_T` (`1 x in`).
    pub fn z(&self) -> Var<'g, T> {
        self.z_t
    }

    pub fn log_det_q(&self) -> Var<'g, T> {
        self.log_det_q
    }
}

/// Pieces of the KL penalty, each a scalar node.
#[derive(Debug, Clone, Copy)]
pub struct KlParts<'g, T> {
    /// Closed-form `KL(q(W | z) || N(0, 1))` over weights and biases.
    pub gaussian: Var<'g, T>,
    /// `log r(z_T | W)` including the r-flow log-det.
    pub log_r: Var<'g, T>,
    /// `log q(z_T) = log q(z0) - log|det|` of the q-flow.
    pub log_q: Var<'g, T>,
    /// `gaussian - log_r + log_q`.
    pub total: Var<'g, T>,
}

// indices into the bound parameter list
const MEAN_W: usize = 0;
const LOG_VAR_W: usize = 1;
const MEAN_B: usize = 2;
const LOG_VAR_B: usize = 3;
const QZ_MEAN: usize = 4;
const QZ_LOG_VAR: usize = 5;
const AUX_C: usize = 6;
const AUX_B1: usize = 7;
const AUX_B2: usize = 8;
const FLOWS: usize = 9;

impl<T: Real> MnfDenseLayer<T> {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, out_dim: usize, cfg: &MnfConfig, rng: &mut R) -> Self {
        let lv = T::lit(cfg.init_log_var);
        Self {
            in_dim,
            out_dim,
            mean_w: Param::new(lecun_uniform(in_dim, out_dim, rng)),
            log_var_w: Param::new(Tensor::full(&[in_dim, out_dim], lv)),
            mean_b: Param::new(Tensor::zeros(&[out_dim])),
            log_var_b: Param::new(Tensor::full(&[out_dim], lv)),
            qz_mean: Param::new(Tensor::ones(&[in_dim])),
            qz_log_var: Param::new(Tensor::full(&[in_dim], lv)),
            aux_c: Param::new(uniform_tensor(&[in_dim], (3.0 / in_dim as f64).sqrt(), rng)),
            aux_b1: Param::new(uniform_tensor(&[out_dim], (3.0 / out_dim as f64).sqrt(), rng)),
            aux_b2: Param::new(uniform_tensor(&[out_dim], (3.0 / out_dim as f64).sqrt(), rng)),
            q_flow: CouplingFlow::new(in_dim, cfg.flow_steps, cfg.flow_hidden, rng),
            r_flow: CouplingFlow::new(in_dim, cfg.flow_steps, cfg.flow_hidden, rng),
            degenerate: cfg.degenerate,
            generation: 0,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }

    pub fn set_degenerate(&mut self, on: bool) {
        self.degenerate = on;
        self.generation += 1;
    }

    /// Bumped whenever parameters may have changed.
    pub fn generation(&self) -> u64 {
        self.generation
    }

    /// Sets every log-variance to `value`.
    pub fn set_log_vars(&mut self, value: f64) {
        let value = T::lit(value);
        for p in [&mut self.log_var_w, &mut self.log_var_b, &mut self.qz_log_var] {
            Param::make_mut(p).data_mut().fill(value);
        }
        self.generation += 1;
    }

    pub fn draw_noise<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> LayerNoise<T> {
        LayerNoise::draw(self.in_dim, self.out_dim, batch, rng)
    }

    fn check_noise(&self, noise: &LayerNoise<T>, batch: usize) -> Result<()> {
        let ok = noise.z.shape() == [1, self.in_dim]
            && noise.w.shape() == [self.in_dim, self.out_dim]
            && noise.out.shape() == [batch, self.out_dim];
        if ok {
            Ok(())
        } else {
            Err(TensorError::Contract(format!(
                "noise shapes {:?}/{:?}/{:?} do not fit a {}x{} layer at batch {}",
                noise.z.shape(),
                noise.w.shape(),
                noise.out.shape(),
                self.in_dim,
                self.out_dim,
                batch
            )))
        }
    }

    fn sample_z<'g>(
        &self,
        g: &'g Graph<T>,
        vars: &[Var<'g, T>],
        eps: &Tensor<T>,
    ) -> Result<(Var<'g, T>, Var<'g, T>)> {
        if self.degenerate {
            return Ok((g.constant(Tensor::ones(&[1, self.in_dim])), g.scalar(T::zero())));
        }
        let row = [1, self.in_dim];
        let mean = vars[QZ_MEAN].reshape(&row)?;
        let std = vars[QZ_LOG_VAR].mul_scalar(T::lit(0.5))?.exp()?.reshape(&row)?;
        let z0 = g.gaussian_sample(mean, std, eps.clone())?;
        let nq = self.q_flow.params().len();
        self.q_flow
            .forward_bound(g, &vars[FLOWS..FLOWS + nq], z0)
    }

    /// Local-reparameterization forward pass with this layer's parameters
    /// bound in [`Parameterized::named_params`] order.
    ///
    /// `out = (x ⊙ z) M + b + sqrt(x² exp(L) + exp(L_b)) ⊙ ε`.
    pub fn forward_bound<'g>(
        &self,
        g: &'g Graph<T>,
        vars: &[Var<'g, T>],
        x: Var<'g, T>,
        noise: &LayerNoise<T>,
    ) -> Result<(Var<'g, T>, SampleContext<'g, T>)> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(TensorError::ShapeMismatch {
                op: "mnf_dense",
                lhs: shape,
                rhs: vec![self.in_dim, self.out_dim],
            });
        }
        self.check_noise(noise, shape[0])?;
        let (z_t, log_det_q) = self.sample_z(g, vars, &noise.z)?;
        let mean = x.mul(z_t)?.matmul(vars[MEAN_W])?.add(vars[MEAN_B])?;
        let var = x
            .square()?
            .matmul(vars[LOG_VAR_W].exp()?)?
            .add(vars[LOG_VAR_B].exp()?)?;
        let out = g.gaussian_sample(mean, var.sqrt()?, noise.out.clone())?;
        let ctx = SampleContext {
            vars: vars.to_vec(),
            z_t,
            log_det_q,
            noise_z: noise.z.clone(),
            noise_w: noise.w.clone(),
            generation: self.generation,
        };
        Ok((out, ctx))
    }

    /// Binds parameters as trainable leaves and runs [`forward_bound`](Self::forward_bound).
    pub fn forward<'g>(
        &self,
        g: &'g Graph<T>,
        x: Var<'g, T>,
        noise: &LayerNoise<T>,
    ) -> Result<(Var<'g, T>, SampleContext<'g, T>)> {
        let vars = bind(g, &self.params(), false);
        self.forward_bound(g, &vars, x, noise)
    }

    /// One-sample estimate of the KL penalty for the `z_T` of `ctx`.
    pub fn kl_parts<'g>(&self, ctx: &SampleContext<'g, T>) -> Result<KlParts<'g, T>> {
        if ctx.generation != self.generation {
            return Err(TensorError::Contract(
                "sample context is stale: parameters changed since the forward pass".into(),
            ));
        }
        let g = ctx.z_t.graph();
        let v = &ctx.vars;
        let half = T::lit(0.5);
        let z_col = ctx.z_t.reshape(&[self.in_dim, 1])?;
        let scaled_mean = z_col.mul(v[MEAN_W])?;

        let gauss_kl = |mean: Var<'g, T>, log_var: Var<'g, T>| -> Result<Var<'g, T>> {
            log_var
                .exp()?
                .add(mean.square()?)?
                .sub(log_var)?
                .add_scalar(-T::one())?
                .sum()?
                .mul_scalar(half)
        };
        let gaussian = gauss_kl(scaled_mean, v[LOG_VAR_W])?.add(gauss_kl(v[MEAN_B], v[LOG_VAR_B])?)?;

        if self.degenerate {
            let zero = g.scalar(T::zero());
            return Ok(KlParts {
                gaussian,
                log_r: zero,
                log_q: zero,
                total: gaussian,
            });
        }

        // log r(z_T | W) with one materialized weight sample
        let std_w = v[LOG_VAR_W].mul_scalar(half)?.exp()?;
        let w = g.gaussian_sample(scaled_mean, std_w, ctx.noise_w.clone())?;
        let xi = v[AUX_C].reshape(&[1, self.in_dim])?.matmul(w)?.tanh()?;
        let r_mean = xi.mul(v[AUX_B1])?.sum()?;
        let r_log_var = xi.mul(v[AUX_B2])?.sum()?;
        let nq = self.q_flow.params().len();
        let nr = self.r_flow.params().len();
        let (z_r, log_det_r) =
            self.r_flow
                .forward_bound(g, &v[FLOWS + nq..FLOWS + nq + nr], ctx.z_t)?;
        let n = T::lit(self.in_dim as f64);
        let quad = z_r
            .sub(r_mean)?
            .square()?
            .sum()?
            .mul(r_log_var.neg()?.exp()?)?;
        let log_r = quad
            .add(r_log_var.mul_scalar(n)?)?
            .add_scalar(n * T::lit(LN_2PI))?
            .mul_scalar(-half)?
            .add(log_det_r)?;

        // log q(z0) with z0 = μ + σ ε is -½ Σ (ln 2π + λ + ε²)
        let eps_sq: T = ctx.noise_z.data().iter().map(|&e| e * e).sum();
        let log_q = v[QZ_LOG_VAR]
            .sum()?
            .add_scalar(n * T::lit(LN_2PI) + eps_sq)?
            .mul_scalar(-half)?
            .sub(ctx.log_det_q)?;

        let total = gaussian.sub(log_r)?.add(log_q)?;
        Ok(KlParts {
            gaussian,
            log_r,
            log_q,
            total,
        })
    }

    pub fn kl_term<'g>(&self, ctx: &SampleContext<'g, T>) -> Result<Var<'g, T>> {
        Ok(self.kl_parts(ctx)?.total)
    }

    /// Deterministic `x M + b` (value level), ignoring `z`.
    pub fn mean_forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut out = crate::autodiff::matmul(x, false, &self.mean_w, false)?;
        let n = self.out_dim;
        for r in out.data_mut().chunks_mut(n) {
            for (o, &b) in r.iter_mut().zip(self.mean_b.data()) {
                *o += b;
            }
        }
        Ok(out)
    }
}

impl<T: Real> Parameterized<T> for MnfDenseLayer<T> {
    fn named_params(&self) -> Vec<(String, &Param<T>)> {
        let mut out: Vec<(String, &Param<T>)> = vec![
            ("mean_w".into(), &self.mean_w),
            ("log_var_w".into(), &self.log_var_w),
            ("mean_b".into(), &self.mean_b),
            ("log_var_b".into(), &self.log_var_b),
            ("qz_mean".into(), &self.qz_mean),
            ("qz_log_var".into(), &self.qz_log_var),
            ("aux_c".into(), &self.aux_c),
            ("aux_b1".into(), &self.aux_b1),
            ("aux_b2".into(), &self.aux_b2),
        ];
        for (n, p) in self.q_flow.named_params() {
            out.push((format!("q_flow.{n}"), p));
        }
        for (n, p) in self.r_flow.named_params() {
            out.push((format!("r_flow.{n}"), p));
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.generation += 1;
        let mut out = vec![
            &mut self.mean_w,
            &mut self.log_var_w,
            &mut self.mean_b,
            &mut self.log_var_b,
            &mut self.qz_mean,
            &mut self.qz_log_var,
            &mut self.aux_c,
            &mut self.aux_b1,
            &mut self.aux_b2,
        ];
        out.extend(self.q_flow.params_mut());
        out.extend(self.r_flow.params_mut());
        out
    }
}
