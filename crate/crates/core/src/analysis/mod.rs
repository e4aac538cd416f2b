//! Binned resolutions and ratios, closure tests and uncertainty cuts on
//! prediction records.
//!
//! Ratios are `R = pred / truth`. Uncertainties enter in ratio units
//! (`σ / truth`) wherever they are compared with the spread of `R`.

mod binned;
mod closure;
mod cuts;
mod report;

use thiserror::Error;

pub use binned::{binned_analysis, binned_rms, BinStat, BinnedTable, Source};
pub use closure::{
    closure_aleatoric, closure_epistemic, spearman, ClosureCell, ClosureRow, ClosureTable, EpistemicBin,
    EpistemicReport, Gate, GATE_MAX_BIAS, GATE_MAX_KURTOSIS, GATE_MAX_SKEW, GATE_MIN_COUNT,
};
pub use cuts::{parse_thresholds, uncertainty_cut, CutOutcome, RejectedBin, DEFAULT_LADDER};
pub use report::{analyze, emit_report, AnalysisConfig, Report};

/// Default `y` bin edges.
pub const DEFAULT_Y_EDGES: [f64; 6] = [0.01, 0.05, 0.1, 0.2, 0.5, 0.8];

/// Observable names in triplet order.
pub const OBSERVABLES: [&str; 3] = ["x", "Q2", "y"];

#[derive(Debug, Error, PartialEq)]
pub enum AnalysisError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("{path}: {reason}")]
    Io { path: String, reason: String },
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

/// Contiguous bins in truth `y`; `[lo, hi)` except the last, which is closed.
#[derive(Debug, Clone, PartialEq)]
pub struct YBins {
    edges: Vec<f64>,
}

impl Default for YBins {
    fn default() -> Self {
        Self {
            edges: DEFAULT_Y_EDGES.to_vec(),
        }
    }
}

impl YBins {
    pub fn new(edges: Vec<f64>) -> Result<Self> {
        if edges.len() < 2 || edges.iter().any(|e| !e.is_finite()) || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(AnalysisError::Contract(format!(
                "bin edges {edges:?} must be at least two finite, strictly increasing values"
            )));
        }
        Ok(Self { edges })
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bounds(&self, b: usize) -> (f64, f64) {
        (self.edges[b], self.edges[b + 1])
    }

    pub fn locate(&self, y: f64) -> Option<usize> {
        let last = *self.edges.last()?;
        if !(y >= self.edges[0] && y <= last) {
            return None;
        }
        if y == last {
            return Some(self.len() - 1);
        }
        Some(self.edges.partition_point(|&e| e <= y) - 1)
    }

    /// Record indices per bin, in record order.
    pub fn assign<I: IntoIterator<Item = f64>>(&self, ys: I) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.len()];
        for (i, y) in ys.into_iter().enumerate() {
            if let Some(b) = self.locate(y) {
                out[b].push(i);
            }
        }
        out
    }
}

/// Pairwise summation; the order is fixed by the input order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    if xs.len() <= 16 {
        return xs.iter().sum();
    }
    let (a, b) = xs.split_at(xs.len() / 2);
    pairwise_sum(a) + pairwise_sum(b)
}

/// Inverse-variance weighted mean and its uncertainty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedMean {
    pub mean: f64,
    pub sigma: f64,
    pub n: usize,
}

impl WeightedMean {
    /// Per-event spread implied by the weighted uncertainty, `σ_w √N`.
    pub fn event_level(&self) -> f64 {
        self.sigma * (self.n as f64).sqrt()
    }
}

pub fn weighted_average(values: &[f64], sigmas: &[f64]) -> Result<WeightedMean> {
    if values.is_empty() || values.len() != sigmas.len() {
        return Err(AnalysisError::Contract(format!(
            "weighted average of {} values with {} sigmas",
            values.len(),
            sigmas.len()
        )));
    }
    if let Some(s) = sigmas.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
        return Err(AnalysisError::Domain(format!("uncertainty {s} is not positive and finite")));
    }
    let w: Vec<f64> = sigmas.iter().map(|s| 1.0 / (s * s)).collect();
    let wv: Vec<f64> = values.iter().zip(&w).map(|(v, w)| v * w).collect();
    let sw = pairwise_sum(&w);
    Ok(WeightedMean {
        mean: pairwise_sum(&wv) / sw,
        sigma: sw.sqrt().recip(),
        n: values.len(),
    })
}

pub fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| pairwise_sum(xs) / xs.len() as f64)
}

/// Standard deviation about the mean (population convention).
pub fn rms(xs: &[f64]) -> Option<f64> {
    let m = mean(xs)?;
    let d: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
    Some((pairwise_sum(&d) / xs.len() as f64).sqrt())
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Skewness and excess kurtosis (population moments); `None` for fewer
/// than three points or zero spread.
pub fn shape(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.len() < 3 {
        return None;
    }
    let m = mean(xs)?;
    let n = xs.len() as f64;
    let moment = |k: i32| pairwise_sum(&xs.iter().map(|x| (x - m).powi(k)).collect::<Vec<_>>()) / n;
    let var = moment(2);
    if !(var > 0.0) {
        return None;
    }
    Some((moment(3) / var.powf(1.5), moment(4) / (var * var) - 3.0))
}

#[cfg(test)]
pub(crate) fn test_record(event: u64, truth: [f64; 3], pred: [f64; 3], sigma: f64) -> crate::inference::PredictionRecord {
    crate::inference::PredictionRecord {
        event,
        truth,
        pred,
        sigma_ale: [sigma; 3],
        sigma_epi: [0.0; 3],
        sigma_tot: [sigma; 3],
        methods: [pred; 3],
        flags: 0,
    }
}
