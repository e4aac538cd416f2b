//! Training losses: heteroskedastic Gaussian regression, the `Q² = s x y`
//! consistency penalty and their weighted total.

use std::f64::consts::LN_10;

use super::scaler::TargetScaler;
use crate::autodiff::{Result, Tensor, TensorError, Var};
use crate::Real;

/// Floor applied to non-positive physical predictions by [`physics_loss_values`].
pub const PHYS_EPS: f64 = 1e-12;

/// `mean_batch Σ_j ½ (exp(-s_j) (v_j - v̂_j)² + s_j)`.
pub fn regression_loss<'g, T: Real>(v_hat: Var<'g, T>, s: Var<'g, T>, v: Var<'g, T>) -> Result<Var<'g, T>> {
    let shape = v_hat.shape();
    if shape.len() != 2 || s.shape() != shape || v.shape() != shape {
        return Err(TensorError::ShapeMismatch {
            op: "regression_loss",
            lhs: shape,
            rhs: s.shape(),
        });
    }
    let n = T::lit(shape[0] as f64);
    s.neg()?
        .exp()?
        .mul(v.sub(v_hat)?.square()?)?
        .add(s)?
        .sum()?
        .mul_scalar(T::lit(0.5) / n)
}

/// Plain mean squared error, for networks without a variance head.
pub fn mse_loss<'g, T: Real>(v_hat: Var<'g, T>, v: Var<'g, T>) -> Result<Var<'g, T>> {
    let shape = v_hat.shape();
    if shape.len() != 2 || v.shape() != shape {
        return Err(TensorError::ShapeMismatch {
            op: "mse_loss",
            lhs: shape,
            rhs: v.shape(),
        });
    }
    let n = T::lit(shape[0] as f64);
    v.sub(v_hat)?.square()?.sum()?.mul_scalar(T::lit(0.5) / n)
}

/// Squared natural-log residual of `Q̂² = s x̂ ŷ`, averaged over the batch.
///
/// `v_hat` is in scaled space of a `log10` target scaler; `ln_s` holds
/// `ln s` per event (`batch x 1`).
pub fn physics_loss<'g, T: Real>(
    v_hat: Var<'g, T>,
    scaler: &TargetScaler,
    ln_s: &Tensor<T>,
) -> Result<Var<'g, T>> {
    let g = v_hat.graph();
    let b = v_hat.shape()[0];
    if ln_s.shape() != [b, 1] {
        return Err(TensorError::ShapeMismatch {
            op: "physics_loss",
            lhs: v_hat.shape(),
            rhs: ln_s.shape().to_vec(),
        });
    }
    // ln Q² - ln x - ln y in terms of scaled outputs: Σ_j c_j (lo_j + (v_j + 1) h_j)
    let sign = [-1.0, 1.0, -1.0];
    let coef = Tensor::from_fn(&[3, 1], |j| T::lit(LN_10 * sign[j] * scaler.half_span(j)));
    let offset: f64 = (0..3)
        .map(|j| LN_10 * sign[j] * (scaler.lo[j] + scaler.half_span(j)))
        .sum();
    let resid = v_hat
        .matmul(g.constant(coef))?
        .add_scalar(T::lit(offset))?
        .sub(g.constant(ln_s.clone()))?;
    resid.square()?.mean()
}

/// Value-level physics loss on physical predictions `(x, Q², y)`.
/// Non-positive predictions are floored at [`PHYS_EPS`] and counted.
pub fn physics_loss_values(pred: &[[f64; 3]], s: &[f64]) -> (f64, usize) {
    let mut incidents = 0;
    let mut floor = |v: f64| {
        if v > 0.0 {
            v
        } else {
            incidents += 1;
            PHYS_EPS
        }
    };
    let mut total = 0.0;
    for (p, &s) in pred.iter().zip(s) {
        let (x, q2, y) = (floor(p[0]), floor(p[1]), floor(p[2]));
        let r = q2.ln() - s.ln() - x.ln() - y.ln();
        total += r * r;
    }
    let n = pred.len().max(1) as f64;
    (total / n, incidents)
}

/// Loss weights and the KL normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    /// Minibatches per epoch; the KL is divided by this.
    pub batches_per_epoch: usize,
}

impl LossWeights {
    pub fn scalar(&self, reg: f64, phys: f64, kl: f64) -> f64 {
        total_loss(reg, phys, kl / self.batches_per_epoch.max(1) as f64, self.alpha, self.beta)
    }
}

/// `reg + α phys + β kl_normalized`.
pub fn total_loss(reg: f64, phys: f64, kl_normalized: f64, alpha: f64, beta: f64) -> f64 {
    reg + alpha * phys + beta * kl_normalized
}

/// Graph version of [`total_loss`], normalizing the KL by `w.batches_per_epoch`.
pub fn total_loss_graph<'g, T: Real>(
    reg: Var<'g, T>,
    phys: Option<Var<'g, T>>,
    kl: Option<Var<'g, T>>,
    w: &LossWeights,
) -> Result<Var<'g, T>> {
    let mut total = reg;
    if let Some(p) = phys {
        if w.alpha != 0.0 {
            total = total.add(p.mul_scalar(T::lit(w.alpha))?)?;
        }
    }
    if let Some(k) = kl {
        if w.beta != 0.0 {
            let scale = w.beta / w.batches_per_epoch.max(1) as f64;
            total = total.add(k.mul_scalar(T::lit(scale))?)?;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Graph;
    use crate::model::scaler::TargetTransform;

    #[test]
    fn regression_examples() {
        let g = Graph::<f64>::new();
        let v = g.constant(Tensor::from_rows(&[[0.1, 0.2, 0.3]]).unwrap());
        let s = g.constant(Tensor::zeros(&[1, 3]));
        assert_eq!(regression_loss(v, s, v).unwrap().item(), 0.0);

        let vh = g.constant(Tensor::from_rows(&[[1.0]]).unwrap());
        let vt = g.constant(Tensor::from_rows(&[[0.0]]).unwrap());
        let s0 = g.constant(Tensor::from_rows(&[[0.0]]).unwrap());
        assert_eq!(regression_loss(vh, s0, vt).unwrap().item(), 0.5);
    }

    #[test]
    fn physics_examples() {
        let s = 101_568.0;
        let (l, n) = physics_loss_values(&[[0.02, s * 0.02 * 0.5, 0.5]], &[s]);
        assert!(l < 1e-28 && n == 0);
        let (l, _) = physics_loss_values(&[[0.04, s * 0.02 * 0.5, 0.5]], &[s]);
        assert!((l - 2f64.ln().powi(2)).abs() < 1e-12);
        assert!((l - 0.4805).abs() < 1e-4);
        let (l, n) = physics_loss_values(&[[-1.0, 1.0, 0.5]], &[s]);
        assert!(l.is_finite() && n == 1);
    }

    #[test]
    fn graph_physics_matches_values() {
        let s: f64 = 101_568.0;
        let truth = [[1e-3, 300.0, 0.05], [0.3, 2e4, 0.7], [0.01, 900.0, 0.2]];
        let scaler = TargetScaler::fit(&truth, TargetTransform::Log10);
        let preds = [[2e-3, 500.0, 0.1], [0.05, 4e3, 0.6]];
        let scaled: Vec<[f64; 3]> = preds.iter().map(|p| scaler.scale_triplet(p)).collect();
        let g = Graph::new();
        let vh = g.constant(Tensor::from_rows(&scaled).unwrap());
        let ln_s = Tensor::full(&[2, 1], s.ln());
        let graph = physics_loss(vh, &scaler, &ln_s).unwrap().item();
        let (values, _) = physics_loss_values(&preds, &[s, s]);
        assert!((graph - values).abs() < 1e-12);
    }

    #[test]
    fn total_examples() {
        assert!((total_loss(1.0, 2.0, 3.0, 1.0, 0.01) - 3.03).abs() < 1e-15);
        assert_eq!(total_loss(1.5, 2.0, 3.0, 0.0, 0.0), 1.5);
    }
}
