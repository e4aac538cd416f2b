use super::binned::Source;
use super::{mean, median, pairwise_sum, rms, shape, weighted_average, AnalysisError, Result, YBins};
use crate::inference::PredictionRecord;
use crate::kinematics::Method;

/// A bin enters the aleatoric closure only if the baseline's ratio
/// distribution there has at least this many events,
pub const GATE_MIN_COUNT: usize = 200;
/// a bias `|mean(R) - 1|` of at most this many RMS,
pub const GATE_MAX_BIAS: f64 = 0.25;
/// `|skewness|` at most this,
pub const GATE_MAX_SKEW: f64 = 0.5;
/// and `|excess kurtosis|` at most this.
pub const GATE_MAX_KURTOSIS: f64 = 1.5;

/// Centering and normality diagnostics of the baseline ratio in one bin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gate {
    pub count: usize,
    /// `|mean(R) - 1| / RMS(R)`.
    pub bias: Option<f64>,
    pub skewness: Option<f64>,
    pub excess_kurtosis: Option<f64>,
    pub eligible: bool,
}

impl Gate {
    fn of(ratios: &[f64]) -> Self {
        let bias = match (mean(ratios), rms(ratios)) {
            (Some(m), Some(s)) if s > 0.0 => Some((m - 1.0).abs() / s),
            _ => None,
        };
        let sh = shape(ratios);
        let eligible = ratios.len() >= GATE_MIN_COUNT
            && bias.is_some_and(|b| b <= GATE_MAX_BIAS)
            && sh.is_some_and(|(s, k)| s.abs() <= GATE_MAX_SKEW && k.abs() <= GATE_MAX_KURTOSIS);
        Self {
            count: ratios.len(),
            bias,
            skewness: sh.map(|s| s.0),
            excess_kurtosis: sh.map(|s| s.1),
            eligible,
        }
    }
}

/// One observable in one bin of the aleatoric comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosureCell {
    pub rms_da: Option<f64>,
    pub rms_el: Option<f64>,
    pub rms_dnn: Option<f64>,
    /// Mean of `σ_ale / truth`.
    pub sigma_ale: Option<f64>,
    /// Mean of `σ_epi / truth`.
    pub sigma_epi: Option<f64>,
    /// Events with every classical method available.
    pub n_methods: usize,
    pub gate: Gate,
}

impl ClosureCell {
    /// `mean σ_ale / RMS_DNN`.
    pub fn agreement(&self) -> Option<f64> {
        match (self.sigma_ale, self.rms_dnn) {
            (Some(s), Some(r)) if r > 0.0 => Some(s / r),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosureRow {
    pub lo: f64,
    pub hi: f64,
    pub cells: [ClosureCell; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosureTable {
    pub rows: Vec<ClosureRow>,
}

impl ClosureTable {
    /// Column names: the bin, then four per observable.
    pub fn header() -> Vec<String> {
        let mut h = vec!["y_bin".to_string()];
        for o in super::OBSERVABLES {
            for c in ["rms_da", "rms_el", "rms_dnn", "sigma"] {
                h.push(format!("{c}_{o}"));
            }
        }
        h
    }

    /// Per observable: eligible bins and whether each of them has
    /// `|agreement - 1| <= tol`.
    pub fn verdict(&self, tol: f64) -> [(usize, bool); 3] {
        std::array::from_fn(|j| {
            let cells: Vec<&ClosureCell> = self.rows.iter().map(|r| &r.cells[j]).filter(|c| c.gate.eligible).collect();
            let ok = cells.iter().all(|c| c.agreement().is_some_and(|a| (a - 1.0).abs() <= tol));
            (cells.len(), !cells.is_empty() && ok)
        })
    }
}

fn same_events(a: &[PredictionRecord], b: &[PredictionRecord]) -> Result<()> {
    if a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.event != y.event) {
        return Err(AnalysisError::Contract(format!(
            "record sets differ: {} vs {} events or a different event order",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

fn method_rms(records: &[PredictionRecord], idx: &[usize], m: Method, j: usize) -> Option<f64> {
    let src = Source::Method(m);
    let r: Vec<f64> = idx
        .iter()
        .filter_map(|&i| src.triplet(&records[i]).map(|t| t[j] / records[i].truth[j]))
        .collect();
    rms(&r)
}

/// Mean aleatoric uncertainty of the network against the ratio RMS of the
/// baseline and of the electron and double-angle methods, per `y` bin.
///
/// The method columns use only events where all classical methods succeed;
/// the network columns use every event. Rows run from high to low `y`.
pub fn closure_aleatoric(eluq: &[PredictionRecord], dnn: &[PredictionRecord], bins: &YBins) -> Result<ClosureTable> {
    same_events(eluq, dnn)?;
    if eluq.is_empty() {
        return Err(AnalysisError::Contract("no records to analyse".into()));
    }
    let members = bins.assign(eluq.iter().map(|r| r.truth[2]));
    let mut rows = Vec::with_capacity(bins.len());
    for (b, idx) in members.iter().enumerate().rev() {
        let (lo, hi) = bins.bounds(b);
        let all_ok: Vec<usize> = idx.iter().copied().filter(|&i| eluq[i].all_methods_ok()).collect();
        let cells = std::array::from_fn(|j| {
            let dnn_r: Vec<f64> = idx.iter().map(|&i| dnn[i].pred[j] / dnn[i].truth[j]).collect();
            let rel = |f: fn(&PredictionRecord) -> [f64; 3]| {
                mean(&idx.iter().map(|&i| f(&eluq[i])[j] / eluq[i].truth[j].abs()).collect::<Vec<_>>())
            };
            ClosureCell {
                rms_da: method_rms(eluq, &all_ok, Method::DoubleAngle, j),
                rms_el: method_rms(eluq, &all_ok, Method::Electron, j),
                rms_dnn: rms(&dnn_r),
                sigma_ale: rel(|r| r.sigma_ale),
                sigma_epi: rel(|r| r.sigma_epi),
                n_methods: all_ok.len(),
                gate: Gate::of(&dnn_r),
            }
        });
        rows.push(ClosureRow { lo, hi, cells });
    }
    Ok(ClosureTable { rows })
}

/// Average ranks, ties sharing the mean of their positions.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut k = i;
        while k + 1 < order.len() && xs[order[k + 1]] == xs[order[i]] {
            k += 1;
        }
        let avg = (i + k) as f64 / 2.0 + 1.0;
        for &o in &order[i..=k] {
            r[o] = avg;
        }
        i = k + 1;
    }
    r
}

/// Spearman rank correlation; `None` when either input is constant or
/// shorter than two.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let (ma, mb) = (mean(&ra)?, mean(&rb)?);
    let prod: Vec<f64> = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).collect();
    let va = pairwise_sum(&ra.iter().map(|x| (x - ma) * (x - ma)).collect::<Vec<_>>());
    let vb = pairwise_sum(&rb.iter().map(|y| (y - mb) * (y - mb)).collect::<Vec<_>>());
    if va <= 0.0 || vb <= 0.0 {
        return None;
    }
    Some(pairwise_sum(&prod) / (va * vb).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpistemicBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Weighted mean of `σ_epi / |pred|`.
    pub weighted_sigma_epi: Option<f64>,
    /// Weighted mean of `|pred / truth - 1|`.
    pub weighted_inaccuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpistemicReport {
    pub bins: [Vec<EpistemicBin>; 3],
    /// Spearman correlation of `σ_epi / |pred|` with `|pred / truth - 1|`.
    pub spearman: [Option<f64>; 3],
    pub median_sigma_epi: [Option<f64>; 3],
    /// Same medians from a model trained on less data, over the same events.
    pub median_sigma_epi_small: Option<[Option<f64>; 3]>,
}

fn rel_epi(r: &PredictionRecord, j: usize) -> f64 {
    r.sigma_epi[j] / r.pred[j].abs()
}

fn inaccuracy(r: &PredictionRecord, j: usize) -> f64 {
    (r.pred[j] / r.truth[j] - 1.0).abs()
}

/// Epistemic uncertainty against inaccuracy on `records`, plus the
/// small-versus-large training comparison when `small` is given. Weights are
/// `1/σ_tot²` in ratio units.
pub fn closure_epistemic(
    records: &[PredictionRecord],
    small: Option<&[PredictionRecord]>,
    bins: &YBins,
) -> Result<EpistemicReport> {
    if records.is_empty() {
        return Err(AnalysisError::Contract("no records to analyse".into()));
    }
    if let Some(s) = small {
        same_events(records, s)?;
    }
    let members = bins.assign(records.iter().map(|r| r.truth[2]));
    let mut out: [Vec<EpistemicBin>; 3] = Default::default();
    for (b, idx) in members.iter().enumerate() {
        let (lo, hi) = bins.bounds(b);
        for (j, rows) in out.iter_mut().enumerate() {
            let sig: Vec<f64> = idx.iter().map(|&i| records[i].sigma_tot[j] / records[i].truth[j].abs()).collect();
            let weighted = |f: fn(&PredictionRecord, usize) -> f64| -> Result<Option<f64>> {
                if idx.is_empty() {
                    return Ok(None);
                }
                let v: Vec<f64> = idx.iter().map(|&i| f(&records[i], j)).collect();
                Ok(Some(weighted_average(&v, &sig)?.mean))
            };
            rows.push(EpistemicBin {
                lo,
                hi,
                count: idx.len(),
                weighted_sigma_epi: weighted(rel_epi)?,
                weighted_inaccuracy: weighted(inaccuracy)?,
            });
        }
    }
    let col = |recs: &[PredictionRecord], j: usize, f: fn(&PredictionRecord, usize) -> f64| -> Vec<f64> {
        recs.iter().map(|r| f(r, j)).collect()
    };
    Ok(EpistemicReport {
        bins: out,
        spearman: std::array::from_fn(|j| spearman(&col(records, j, rel_epi), &col(records, j, inaccuracy))),
        median_sigma_epi: std::array::from_fn(|j| median(&col(records, j, rel_epi))),
        median_sigma_epi_small: small.map(|s| std::array::from_fn(|j| median(&col(s, j, rel_epi)))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::test_record as rec;

    #[test]
    fn spearman_basics() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]), Some(1.0));
        assert_eq!(spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), None);
        assert_eq!(ranks(&[2.0, 1.0, 2.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn duplicate_records_leave_spearman_undefined() {
        let r = rec(0, [0.01, 10.0, 0.3], [0.011, 11.0, 0.31], 0.1);
        let recs = vec![r; 10];
        let rep = closure_epistemic(&recs, Some(&recs), &YBins::default()).unwrap();
        assert_eq!(rep.spearman, [None; 3]);
        assert_eq!(rep.median_sigma_epi_small, Some(rep.median_sigma_epi));
    }

    #[test]
    fn mismatched_events_rejected() {
        let a = rec(0, [0.01, 10.0, 0.3], [0.011, 11.0, 0.31], 0.1);
        let b = rec(1, [0.01, 10.0, 0.3], [0.011, 11.0, 0.31], 0.1);
        assert!(matches!(closure_aleatoric(&[a], &[b], &YBins::default()), Err(AnalysisError::Contract(_))));
        assert!(closure_aleatoric(&[a], &[a, a], &YBins::default()).is_err());
    }

    #[test]
    fn table_layout() {
        assert_eq!(ClosureTable::header().len(), 13);
        let recs: Vec<_> = (0..20)
            .map(|i| rec(i, [0.01, 10.0, 0.012 + 0.04 * i as f64], [0.011, 10.5, 0.3], 0.01))
            .collect();
        let t = closure_aleatoric(&recs, &recs, &YBins::default()).unwrap();
        assert_eq!(t.rows.len(), 5);
        assert_eq!((t.rows[0].lo, t.rows[4].lo), (0.5, 0.01));
        assert!(t.rows.iter().all(|r| !r.cells[0].gate.eligible));
    }
}
