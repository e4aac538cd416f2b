use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::config::KeyValues;
use crate::dataset::Dataset;
use crate::model::{FeatureScaler, TargetScaler, TargetTransform};
use crate::rng::stream;
use crate::Real;

/// Supervised rows in physical units plus the per-event Mandelstam `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub dim: usize,
    /// Row-major `len x dim`.
    pub features: Vec<f64>,
    pub targets: Vec<[f64; 3]>,
    pub mandelstam: Vec<f64>,
    pub transform: TargetTransform,
    /// Configuration that produced the rows, echoed into checkpoints.
    pub provenance: KeyValues,
}

impl TrainingData {
    pub fn new(
        dim: usize,
        features: Vec<f64>,
        targets: Vec<[f64; 3]>,
        mandelstam: Vec<f64>,
        transform: TargetTransform,
    ) -> Result<Self, String> {
        let n = targets.len();
        if dim == 0 || features.len() != n * dim || mandelstam.len() != n {
            return Err(format!(
                "inconsistent training data: {} features for {n} rows of width {dim}, {} s values",
                features.len(),
                mandelstam.len()
            ));
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(format!("non-finite feature in row {}", i / dim));
        }
        let positive = transform == TargetTransform::Identity || targets.iter().flatten().all(|&v| v > 0.0);
        if !positive || targets.iter().flatten().any(|v| !v.is_finite()) {
            return Err("targets must be finite (and positive for log10 regression)".into());
        }
        if mandelstam.iter().any(|&s| !(s > 0.0)) {
            return Err("Mandelstam s must be positive".into());
        }
        Ok(Self {
            dim,
            features,
            targets,
            mandelstam,
            transform,
            provenance: KeyValues::new(),
        })
    }

    /// Usable events of a generated dataset, regressing `log10 (x, Q², y)`.
    pub fn from_dataset(ds: &Dataset) -> Result<Self, String> {
        let events: Vec<_> = ds.events.iter().filter(|e| e.usable()).collect();
        let s = ds.config.beam.s();
        let features = events.iter().flat_map(|e| e.features.to_array()).collect();
        let targets = events.iter().map(|e| e.truth.as_array()).collect();
        let mut data = Self::new(
            crate::kinematics::NUM_FEATURES,
            features,
            targets,
            vec![s; events.len()],
            TargetTransform::Log10,
        )?;
        data.provenance = ds.config.to_kv();
        Ok(data)
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    /// The rows at `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            dim: self.dim,
            features: idx.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
            targets: idx.iter().map(|&i| self.targets[i]).collect(),
            mandelstam: idx.iter().map(|&i| self.mandelstam[i]).collect(),
            transform: self.transform,
            provenance: self.provenance.clone(),
        }
    }
}

/// Row indices of the train, validation and test partitions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Random partition of `0..n` with the given fractions.
    pub fn new(n: usize, fractions: [f64; 3], seed: u64) -> Self {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut stream(seed, "split", 0));
        let n_train = ((n as f64 * fractions[0]).round() as usize).min(n);
        let n_val = ((n as f64 * fractions[1]).round() as usize).min(n - n_train);
        let test = idx.split_off(n_train + n_val);
        let val = idx.split_off(n_train);
        Self { train: idx, val, test }
    }
}

/// One minibatch in scaled space.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub x: Tensor<T>,
    pub v: Tensor<T>,
    /// `ln s` per row, `len x 1`.
    pub ln_s: Tensor<T>,
}

impl<T: Real> Batch<T> {
    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Training data pushed through fitted scalers.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub feature_scaler: FeatureScaler,
    pub target_scaler: TargetScaler,
    dim: usize,
    x: Vec<f64>,
    v: Vec<[f64; 3]>,
    ln_s: Vec<f64>,
}

impl Prepared {
    /// Fits both scalers on the rows in `train` only, then scales every row.
    pub fn fit(data: &TrainingData, train: &[usize]) -> Self {
        let sub = data.subset(train);
        let fs = FeatureScaler::fit(&sub.features, data.dim);
        let ts = TargetScaler::fit(&sub.targets, data.transform);
        Self::with_scalers(data, fs, ts)
    }

    pub fn with_scalers(data: &TrainingData, feature_scaler: FeatureScaler, target_scaler: TargetScaler) -> Self {
        Self {
            x: feature_scaler.transform(&data.features),
            v: data.targets.iter().map(|t| target_scaler.scale_triplet(t)).collect(),
            ln_s: data.mandelstam.iter().map(|s| s.ln()).collect(),
            dim: data.dim,
            feature_scaler,
            target_scaler,
        }
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }

    pub fn batch<T: Real>(&self, idx: &[usize]) -> Batch<T> {
        let d = self.dim;
        let x = idx.iter().flat_map(|&i| self.x[i * d..(i + 1) * d].iter().map(|&v| T::lit(v)));
        let v = idx.iter().flat_map(|&i| self.v[i].map(T::lit));
        let b = idx.len();
        Batch {
            x: Tensor::new(vec![b, d], x.collect()).expect("batch shape"),
            v: Tensor::new(vec![b, 3], v.collect()).expect("batch shape"),
            ln_s: Tensor::new(vec![b, 1], idx.iter().map(|&i| T::lit(self.ln_s[i])).collect()).expect("batch shape"),
        }
    }
}
