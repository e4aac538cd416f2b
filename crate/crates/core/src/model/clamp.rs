use crate::autodiff::{Result, Var};
use crate::Real;

/// Smooth two-sided clamp of the log-variance head.
///
/// `c(s) = hi - sp(hi - (lo + sp(s - lo)))` with `sp(d) = softplus(k d) / k`.
/// Strictly increasing, approaches `lo` and `hi` asymptotically and has slope
/// close to 1 well inside the band.
///
/// The backward pass uses `max(slope, grad_floor)`, so an output pushed deep
/// into a bound still feels the loss and can return.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceClamp {
    pub lo: f64,
    pub hi: f64,
    pub sharpness: f64,
    pub grad_floor: f64,
}

/// Slope below which an element counts as clamped.
pub const ACTIVE_SLOPE: f64 = 0.99;

impl Default for VarianceClamp {
    fn default() -> Self {
        Self {
            lo: (1e-6f64).ln(),
            hi: 4f64.ln(),
            sharpness: 4.0,
            grad_floor: 0.5,
        }
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl VarianceClamp {
    pub fn apply<'g, T: Real>(&self, s: Var<'g, T>) -> Result<Var<'g, T>> {
        s.pointwise("variance_clamp", |v| {
            let v = v.as_f64();
            (T::lit(self.value(v)), T::lit(self.slope(v).max(self.grad_floor)))
        })
    }

    pub fn value(&self, s: f64) -> f64 {
        let k = self.sharpness;
        let lower = self.lo + softplus(k * (s - self.lo)) / k;
        self.hi - softplus(k * (self.hi - lower)) / k
    }

    pub fn slope(&self, s: f64) -> f64 {
        let k = self.sharpness;
        let lower = self.lo + softplus(k * (s - self.lo)) / k;
        sigmoid(k * (s - self.lo)) * sigmoid(k * (self.hi - lower))
    }

    pub fn is_active(&self, s: f64) -> bool {
        self.slope(s) < ACTIVE_SLOPE
    }

    /// Share of raw log-variances where the clamp bites.
    pub fn active_fraction<T: Real>(&self, raw: &[T]) -> f64 {
        if raw.is_empty() {
            return 0.0;
        }
        let n = raw.iter().filter(|v| self.is_active(v.as_f64())).count();
        n as f64 / raw.len() as f64
    }
}
