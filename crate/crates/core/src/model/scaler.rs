//! Min-max scalers onto `[-1, 1]` for inputs and targets.

use std::f64::consts::LN_10;

use serde::{Deserialize, Serialize};

/// Input values are clipped to this magnitude after scaling.
pub const INPUT_CLIP: f64 = 1.5;

/// Per-feature affine map from training extrema onto `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureScaler {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl FeatureScaler {
    /// Fits on row-major `rows x dim` data.
    pub fn fit(data: &[f64], dim: usize) -> Self {
        let mut min = vec![f64::INFINITY; dim];
        let mut max = vec![f64::NEG_INFINITY; dim];
        for row in data.chunks(dim) {
            for j in 0..dim {
                min[j] = min[j].min(row[j]);
                max[j] = max[j].max(row[j]);
            }
        }
        Self { min, max }
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    /// Constant features map to 0.
    pub fn scale(&self, j: usize, v: f64) -> f64 {
        let span = self.max[j] - self.min[j];
        if span > 0.0 {
            (2.0 * (v - self.min[j]) / span - 1.0).clamp(-INPUT_CLIP, INPUT_CLIP)
        } else {
            0.0
        }
    }

    pub fn transform(&self, data: &[f64]) -> Vec<f64> {
        let dim = self.dim();
        data.chunks(dim)
            .flat_map(|row| row.iter().enumerate().map(|(j, &v)| self.scale(j, v)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TargetTransform {
    /// Regress `log10` of the physical value.
    Log10,
    Identity,
}

/// Maps physical targets to scaled space: optional `log10`, then min-max onto
/// `[-1, 1]` from the training extrema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetScaler {
    pub transform: TargetTransform,
    /// Extrema in transformed space.
    pub lo: [f64; 3],
    pub hi: [f64; 3],
}

impl TargetScaler {
    pub fn fit(targets: &[[f64; 3]], transform: TargetTransform) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for t in targets {
            for j in 0..3 {
                let v = Self::pre(transform, t[j]);
                lo[j] = lo[j].min(v);
                hi[j] = hi[j].max(v);
            }
        }
        for j in 0..3 {
            if !(hi[j] > lo[j]) {
                // degenerate target: give it a unit span around the value
                lo[j] -= 0.5;
                hi[j] += 0.5;
            }
        }
        Self { transform, lo, hi }
    }

    fn pre(transform: TargetTransform, v: f64) -> f64 {
        match transform {
            TargetTransform::Log10 => v.log10(),
            TargetTransform::Identity => v,
        }
    }

    fn post(&self, v: f64) -> f64 {
        match self.transform {
            TargetTransform::Log10 => 10f64.powf(v),
            TargetTransform::Identity => v,
        }
    }

    /// `d(transformed)/d(scaled)` per component.
    pub fn half_span(&self, j: usize) -> f64 {
        0.5 * (self.hi[j] - self.lo[j])
    }

    /// Scaled value to transformed space (`log10` or identity).
    pub fn to_transformed(&self, j: usize, v: f64) -> f64 {
        self.lo[j] + (v + 1.0) * self.half_span(j)
    }

    pub fn scale(&self, j: usize, phys: f64) -> f64 {
        (Self::pre(self.transform, phys) - self.lo[j]) / self.half_span(j) - 1.0
    }

    pub fn unscale(&self, j: usize, v: f64) -> f64 {
        self.post(self.to_transformed(j, v))
    }

    pub fn scale_triplet(&self, t: &[f64; 3]) -> [f64; 3] {
        std::array::from_fn(|j| self.scale(j, t[j]))
    }

    pub fn unscale_triplet(&self, v: &[f64; 3]) -> [f64; 3] {
        std::array::from_fn(|j| self.unscale(j, v[j]))
    }

    /// `d(physical)/d(scaled)` at scaled value `v`, for delta-method transport
    /// of a scaled-space standard deviation.
    pub fn jacobian(&self, j: usize, v: f64) -> f64 {
        self.unscale_with_jacobian(j, v).1
    }

    /// `(unscale(j, v), jacobian(j, v))` with one exponentiation.
    pub fn unscale_with_jacobian(&self, j: usize, v: f64) -> (f64, f64) {
        let phys = self.unscale(j, v);
        let jac = match self.transform {
            TargetTransform::Log10 => LN_10 * phys * self.half_span(j),
            TargetTransform::Identity => self.half_span(j),
        };
        (phys, jac)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_scaler_maps_extrema() {
        let data = [0.0, 5.0, 2.0, 5.0, 4.0, 5.0];
        let s = FeatureScaler::fit(&data, 2);
        assert_eq!(s.transform(&data), vec![-1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(s.scale(0, 100.0), INPUT_CLIP);
    }

    #[test]
    fn target_roundtrip() {
        let t = [[1e-3, 250.0, 0.02], [0.4, 3e4, 0.75], [0.01, 1000.0, 0.3]];
        let s = TargetScaler::fit(&t, TargetTransform::Log10);
        for row in &t {
            let v = s.scale_triplet(row);
            assert!(v.iter().all(|x| (-1.0 - 1e-12..=1.0 + 1e-12).contains(x)));
            let back = s.unscale_triplet(&v);
            for j in 0..3 {
                assert!((back[j] / row[j] - 1.0).abs() < 1e-12);
            }
        }
        assert!((s.scale(0, 1e-3) + 1.0).abs() < 1e-15);
    }

    #[test]
    fn jacobian_matches_difference() {
        let t = [[1e-3, 250.0, 0.02], [0.4, 3e4, 0.75]];
        let s = TargetScaler::fit(&t, TargetTransform::Log10);
        let h = 1e-6;
        for j in 0..3 {
            let v = 0.13;
            let num = (s.unscale(j, v + h) - s.unscale(j, v - h)) / (2.0 * h);
            assert!((s.jacobian(j, v) / num - 1.0).abs() < 1e-8);
        }
    }
}
