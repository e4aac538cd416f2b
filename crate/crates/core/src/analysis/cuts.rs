use super::{AnalysisError, Result, YBins};
use crate::inference::PredictionRecord;

/// Relative-uncertainty thresholds from loose to tight.
pub const DEFAULT_LADDER: [f64; 4] = [0.5, 0.2, 0.1, 0.05];

/// Parses a comma-separated threshold list such as `0.5,0.2,0.1`; `inf` is
/// accepted.
pub fn parse_thresholds(text: &str) -> Result<Vec<f64>> {
    let vals = text
        .split(',')
        .map(|t| {
            let v: f64 = t
                .trim()
                .parse()
                .map_err(|_| AnalysisError::Contract(format!("threshold `{}` is not a number", t.trim())))?;
            if !(v > 0.0) {
                return Err(AnalysisError::Domain(format!("threshold {v} must be positive")));
            }
            Ok(v)
        })
        .collect::<Result<Vec<_>>>()?;
    if vals.is_empty() {
        return Err(AnalysisError::Contract("empty threshold list".into()));
    }
    Ok(vals)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RejectedBin {
    pub lo: f64,
    pub hi: f64,
    pub total: usize,
    pub rejected: usize,
}

impl RejectedBin {
    pub fn fraction(&self) -> Option<f64> {
        (self.total > 0).then(|| self.rejected as f64 / self.total as f64)
    }
}

/// Result of one cut; indices refer to the input records.
#[derive(Debug, Clone, PartialEq)]
pub struct CutOutcome {
    pub thresholds: [f64; 3],
    pub kept: Vec<usize>,
    pub rejected: Vec<usize>,
    /// Rejected because a predicted component is zero.
    pub zero_prediction: Vec<usize>,
    pub bins: Vec<RejectedBin>,
}

/// Rejects an event when `σ_tot / |pred|` exceeds the threshold for any
/// observable.
pub fn uncertainty_cut(records: &[PredictionRecord], thresholds: [f64; 3], bins: &YBins) -> Result<CutOutcome> {
    if let Some(t) = thresholds.iter().find(|t| !(**t > 0.0)) {
        return Err(AnalysisError::Domain(format!("threshold {t} must be positive")));
    }
    let mut out = CutOutcome {
        thresholds,
        kept: Vec::new(),
        rejected: Vec::new(),
        zero_prediction: Vec::new(),
        bins: (0..bins.len())
            .map(|b| {
                let (lo, hi) = bins.bounds(b);
                RejectedBin {
                    lo,
                    hi,
                    total: 0,
                    rejected: 0,
                }
            })
            .collect(),
    };
    for (i, r) in records.iter().enumerate() {
        let zero = r.pred.iter().any(|p| *p == 0.0);
        let reject = zero || (0..3).any(|j| r.sigma_tot[j] / r.pred[j].abs() > thresholds[j]);
        if zero {
            out.zero_prediction.push(i);
        }
        if reject {
            out.rejected.push(i);
        } else {
            out.kept.push(i);
        }
        if let Some(b) = bins.locate(r.truth[2]) {
            out.bins[b].total += 1;
            out.bins[b].rejected += reject as usize;
        }
    }
    Ok(out)
}
