//! Posterior sampling: per-event predictions with aleatoric and epistemic
//! uncertainties in physical units.

mod records;
mod sampler;

use rayon::prelude::*;
use thiserror::Error;

pub use records::{read_records, write_records, RecordError, RecordHeader, RECORD_MAGIC, RECORD_VERSION};
pub use sampler::{DenseView, Sampleable, Sampler};

use crate::checkpoint::Checkpoint;
use crate::dataset::Dataset;
use crate::kinematics::{BeamConfig, Method};
use crate::rng::stream;
use crate::Real;

#[derive(Debug, Error, PartialEq)]
pub enum InferenceError {
    #[error("invalid inference configuration: {0}")]
    Config(String),
    #[error("feature rows of width {got}, model expects {expected}")]
    Width { got: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceConfig {
    /// Stochastic forward passes per event.
    pub n_samples: usize,
    /// Events per forward pass; they share the multiplicative noise draw.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            n_samples: 10_000,
            batch_size: 100,
            seed: 0,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<(), InferenceError> {
        if self.n_samples < 2 {
            return Err(InferenceError::Config(format!(
                "n_samples = {} but at least 2 are needed for a spread",
                self.n_samples
            )));
        }
        if self.batch_size == 0 {
            return Err(InferenceError::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Posterior summary of one event, in physical units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Posterior {
    pub pred: [f64; 3],
    pub sigma_ale: [f64; 3],
    pub sigma_epi: [f64; 3],
    pub sigma_tot: [f64; 3],
}

/// One analysed event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictionRecord {
    pub event: u64,
    pub truth: [f64; 3],
    pub pred: [f64; 3],
    pub sigma_ale: [f64; 3],
    pub sigma_epi: [f64; 3],
    pub sigma_tot: [f64; 3],
    /// Classical reconstructions in [`Method::ALL`] order; NaN when the method failed.
    pub methods: [[f64; 3]; 3],
    pub flags: u8,
}

impl PredictionRecord {
    pub fn method_ok(&self, m: usize) -> bool {
        self.flags & Method::ALL[m].flag_bit() == 0 && self.methods[m].iter().all(|v| v.is_finite())
    }

    pub fn all_methods_ok(&self) -> bool {
        (0..3).all(|m| self.method_ok(m))
    }
}

/// Running mean and squared deviation (Welford).
#[derive(Debug, Clone, Copy, Default)]
struct Welford {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, v: f64) {
        self.n += 1.0;
        let d = v - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (v - self.mean);
    }

    fn std(&self) -> f64 {
        if self.n > 1.0 {
            (self.m2 / (self.n - 1.0)).max(0.0).sqrt()
        } else {
            0.0
        }
    }
}

/// Samples the posterior predictive for every row of `features`
/// (row-major, physical units).
///
/// Per event: the prediction is the mean of the unscaled samples, `σ_epi`
/// their standard deviation and `σ_ale` the mean of the per-sample aleatoric
/// width, transported from scaled log-space with the target map's Jacobian.
/// Deterministic networks take one pass and report `σ_epi = 0`.
pub fn sample_posterior<T: Real, L: Sampleable<T>>(
    model: &Checkpoint<T, L>,
    features: &[f64],
    cfg: &InferenceConfig,
) -> Result<Vec<Posterior>, InferenceError> {
    cfg.validate()?;
    let sampler = Sampler::new(&model.network);
    let dim = sampler.input_dim();
    if model.feature_scaler.dim() != dim || features.len() % dim != 0 {
        return Err(InferenceError::Width {
            got: model.feature_scaler.dim(),
            expected: dim,
        });
    }
    let scaled: Vec<T> = model.feature_scaler.transform(features).into_iter().map(T::lit).collect();
    let ts = &model.target_scaler;
    let passes = if sampler.stochastic() { cfg.n_samples } else { 1 };
    let chunks: Vec<(usize, &[T])> = scaled.chunks(cfg.batch_size * dim).enumerate().collect();
    let out: Vec<Vec<Posterior>> = chunks
        .par_iter()
        .map(|&(b, x)| {
            let rows = x.len() / dim;
            let mut rng = stream(cfg.seed, "sampling", b as u64);
            let mut pred = vec![[Welford::default(); 3]; rows];
            let mut ale = vec![[0.0f64; 3]; rows];
            for _ in 0..passes {
                let (v, s) = sampler.pass(x, rows, &mut rng);
                for r in 0..rows {
                    for j in 0..3 {
                        let (phys, jac) = ts.unscale_with_jacobian(j, v[r * 3 + j].as_f64());
                        pred[r][j].push(phys);
                        if !s.is_empty() {
                            ale[r][j] += jac * (0.5 * s[r * 3 + j].as_f64()).exp();
                        }
                    }
                }
            }
            (0..rows)
                .map(|r| {
                    let p = pred[r];
                    let sigma_ale = ale[r].map(|a| a / passes as f64);
                    let sigma_epi = [p[0].std(), p[1].std(), p[2].std()];
                    Posterior {
                        pred: [p[0].mean, p[1].mean, p[2].mean],
                        sigma_ale,
                        sigma_epi,
                        sigma_tot: std::array::from_fn(|j| sigma_ale[j].hypot(sigma_epi[j])),
                    }
                })
                .collect()
        })
        .collect();
    Ok(out.into_iter().flatten().collect())
}

/// Classical reconstructions of one feature row.
pub fn classical_triplets(f: &crate::kinematics::FeatureVector<f64>, beam: &BeamConfig<f64>) -> [[f64; 3]; 3] {
    Method::ALL.map(|m| m.reconstruct(f, beam).map_or([f64::NAN; 3], |t| t.as_array()))
}

/// Runs [`sample_posterior`] on the usable events of `ds` at `indices` and
/// attaches truth and classical reconstructions.
pub fn predict_dataset<T: Real, L: Sampleable<T>>(
    model: &Checkpoint<T, L>,
    ds: &Dataset,
    indices: &[usize],
    cfg: &InferenceConfig,
) -> Result<Vec<PredictionRecord>, InferenceError> {
    let features: Vec<f64> = indices.iter().flat_map(|&i| ds.events[i].features.to_array()).collect();
    let post = sample_posterior(model, &features, cfg)?;
    Ok(indices
        .iter()
        .zip(post)
        .map(|(&i, p)| {
            let ev = &ds.events[i];
            PredictionRecord {
                event: i as u64,
                truth: ev.truth.as_array(),
                pred: p.pred,
                sigma_ale: p.sigma_ale,
                sigma_epi: p.sigma_epi,
                sigma_tot: p.sigma_tot,
                methods: classical_triplets(&ev.features, &ds.config.beam),
                flags: ev.flags,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn welford_matches_two_pass() {
        let xs = [1.0, 4.0, 2.5, -3.0, 7.25];
        let mut w = Welford::default();
        xs.iter().for_each(|&v| w.push(v));
        let m = xs.iter().sum::<f64>() / 5.0;
        let var = xs.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 4.0;
        assert!((w.mean - m).abs() < 1e-15);
        assert!((w.std() - var.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn needs_two_samples() {
        let cfg = InferenceConfig {
            n_samples: 1,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
