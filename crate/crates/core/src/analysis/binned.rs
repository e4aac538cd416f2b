use super::{mean, rms, weighted_average, AnalysisError, Result, WeightedMean, YBins};
use crate::inference::PredictionRecord;
use crate::kinematics::Method;

/// Where a predicted triplet comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Eluq,
    Dnn,
    Method(Method),
}

impl Source {
    pub fn name(&self) -> &'static str {
        match self {
            Source::Eluq => "eluq",
            Source::Dnn => "dnn",
            Source::Method(m) => m.tag(),
        }
    }

    /// The triplet this source predicts for `r`; `None` when a classical
    /// method failed on the event.
    pub fn triplet(&self, r: &PredictionRecord) -> Option<[f64; 3]> {
        match self {
            Source::Eluq | Source::Dnn => Some(r.pred),
            Source::Method(m) => {
                let k = Method::ALL.iter().position(|x| x == m).expect("listed method");
                r.method_ok(k).then_some(r.methods[k])
            }
        }
    }
}

/// Ratio statistics of one `y` bin; empty bins carry `None`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinStat {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub mean_ratio: Option<f64>,
    /// Weighted mean ratio with `1/σ_tot²` weights in ratio units.
    pub weighted: Option<WeightedMean>,
    pub rms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BinnedTable {
    pub source: Source,
    /// Index into [`super::OBSERVABLES`].
    pub observable: usize,
    pub rows: Vec<BinStat>,
}

fn tables(records: &[PredictionRecord], bins: &YBins, source: Source, weighted: bool) -> Result<[BinnedTable; 3]> {
    if records.is_empty() {
        return Err(AnalysisError::Contract("no records to analyse".into()));
    }
    tables_of(records, bins, source, weighted)
}

/// As [`binned_analysis`]/[`binned_rms`], but an empty input gives empty rows.
pub(super) fn tables_of(
    records: &[PredictionRecord],
    bins: &YBins,
    source: Source,
    weighted: bool,
) -> Result<[BinnedTable; 3]> {
    let members = bins.assign(records.iter().map(|r| r.truth[2]));
    let mut out: [BinnedTable; 3] = std::array::from_fn(|j| BinnedTable {
        source,
        observable: j,
        rows: Vec::with_capacity(bins.len()),
    });
    for (b, idx) in members.iter().enumerate() {
        let (lo, hi) = bins.bounds(b);
        let used: Vec<(&PredictionRecord, [f64; 3])> = idx
            .iter()
            .filter_map(|&i| source.triplet(&records[i]).map(|t| (&records[i], t)))
            .collect();
        for (j, table) in out.iter_mut().enumerate() {
            let ratios: Vec<f64> = used.iter().map(|(r, t)| t[j] / r.truth[j]).collect();
            let w = if weighted && !ratios.is_empty() {
                let sig: Vec<f64> = used.iter().map(|(r, _)| r.sigma_tot[j] / r.truth[j].abs()).collect();
                Some(weighted_average(&ratios, &sig)?)
            } else {
                None
            };
            table.rows.push(BinStat {
                lo,
                hi,
                count: ratios.len(),
                mean_ratio: mean(&ratios),
                weighted: w,
                rms: rms(&ratios),
            });
        }
    }
    Ok(out)
}

/// Ratio tables for the network's predictions, including the weighted mean.
pub fn binned_analysis(records: &[PredictionRecord], bins: &YBins) -> Result<[BinnedTable; 3]> {
    tables(records, bins, Source::Eluq, true)
}

/// Mean ratio and RMS only, for sources without per-event uncertainties.
/// Events on which a classical method failed are left out of its table.
pub fn binned_rms(records: &[PredictionRecord], bins: &YBins, source: Source) -> Result<[BinnedTable; 3]> {
    tables(records, bins, source, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::test_record as rec;

    #[test]
    fn perfect_predictor() {
        let recs: Vec<_> = (0..50)
            .map(|i| {
                let t = [0.001 * (i + 1) as f64, 10.0 + i as f64, 0.011 + 0.0155 * i as f64];
                rec(i, t, t, 0.1 + 0.01 * i as f64)
            })
            .collect();
        for t in binned_analysis(&recs, &YBins::default()).unwrap() {
            for row in t.rows.iter().filter(|r| r.count > 0) {
                assert!((row.mean_ratio.unwrap() - 1.0).abs() < 1e-15);
                assert!(row.rms.unwrap() < 1e-15);
                assert!((row.weighted.unwrap().mean - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn empty_bins_and_failed_methods() {
        let mut r = rec(0, [0.01, 10.0, 0.3], [0.011, 11.0, 0.33], 0.1);
        r.flags = Method::DoubleAngle.flag_bit();
        let t = binned_rms(&[r], &YBins::default(), Source::Method(Method::DoubleAngle)).unwrap();
        assert!(t[0].rows.iter().all(|row| row.count == 0 && row.rms.is_none()));
        let t = binned_rms(&[r], &YBins::default(), Source::Method(Method::Electron)).unwrap();
        assert_eq!(t[0].rows[3].count, 1);
        assert_eq!(t[0].rows[0].mean_ratio, None);
        assert!(binned_analysis(&[], &YBins::default()).is_err());
    }
}
