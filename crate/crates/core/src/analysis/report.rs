//! Plot-ready CSV tables.
//!
//! Every file starts with `#` lines echoing the provenance, then a header
//! row. Missing statistics (empty bins, undefined correlations) are empty
//! fields. Files:
//!
//! - `resolution.csv`: ratio RMS per bin and observable for the network, the
//!   baseline and the three classical methods.
//! - `ratio.csv`: count, mean and weighted mean ratio, `σ_w`, `σ_w √N` and
//!   RMS per bin, observable and source.
//! - `closure_aleatoric.csv`: mean aleatoric uncertainty against baseline
//!   and classical RMS, one row per bin, high `y` first.
//! - `closure_gates.csv`: the centering/normality gate of each cell.
//! - `uncertainty_vs_rms.csv`: mean `σ_ale`, `σ_epi` and baseline RMS.
//! - `epistemic.csv`: weighted `σ_epi` and inaccuracy per bin.
//! - `epistemic_summary.csv`: Spearman correlations and medians.
//! - `cuts.csv`: rejected fractions and kept-event weighted ratios per
//!   threshold and bin.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::binned::{tables_of, BinnedTable, Source};
use super::closure::{closure_aleatoric, closure_epistemic, ClosureTable, EpistemicReport};
use super::cuts::{uncertainty_cut, CutOutcome, DEFAULT_LADDER};
use super::{AnalysisError, Result, YBins, OBSERVABLES};
use crate::config::KeyValues;
use crate::inference::PredictionRecord;
use crate::kinematics::Method;

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisConfig {
    pub bins: YBins,
    /// Relative-uncertainty thresholds, applied to all three observables.
    pub ladder: Vec<f64>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            bins: YBins::default(),
            ladder: DEFAULT_LADDER.to_vec(),
        }
    }
}

impl AnalysisConfig {
    pub fn to_kv(&self) -> KeyValues {
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        let mut kv = KeyValues::new();
        kv.set("analysis.y_edges", join(self.bins.edges()));
        kv.set("analysis.thresholds", join(&self.ladder));
        kv
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CutLevel {
    pub threshold: f64,
    pub outcome: CutOutcome,
    /// Network tables over the kept events.
    pub kept: [BinnedTable; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub config: AnalysisConfig,
    pub n_records: usize,
    /// Events on which every classical method succeeded.
    pub n_methods_ok: usize,
    pub eluq: [BinnedTable; 3],
    pub dnn: Option<[BinnedTable; 3]>,
    /// Per method in [`Method::ALL`] order, over the all-methods subset.
    pub methods: Vec<[BinnedTable; 3]>,
    pub closure: Option<ClosureTable>,
    pub epistemic: EpistemicReport,
    /// No-cut reference first, then the ladder.
    pub cuts: Vec<CutLevel>,
    pub notices: Vec<String>,
    pub provenance: KeyValues,
}

/// Runs every analysis. `baseline` enables the aleatoric closure and the
/// baseline columns; `small` the nested-training epistemic comparison.
pub fn analyze(
    records: &[PredictionRecord],
    baseline: Option<&[PredictionRecord]>,
    small: Option<&[PredictionRecord]>,
    cfg: &AnalysisConfig,
    provenance: KeyValues,
) -> Result<Report> {
    if records.is_empty() {
        return Err(AnalysisError::Contract("no records to analyse".into()));
    }
    let bins = &cfg.bins;
    let mut notices = Vec::new();
    let ok: Vec<PredictionRecord> = records.iter().copied().filter(|r| r.all_methods_ok()).collect();
    if ok.len() < records.len() {
        notices.push(format!(
            "{} of {} events lack a classical reconstruction and are left out of the method columns",
            records.len() - ok.len(),
            records.len()
        ));
    }
    let methods = Method::ALL
        .iter()
        .map(|&m| tables_of(&ok, bins, Source::Method(m), false))
        .collect::<Result<Vec<_>>>()?;
    let dnn = baseline.map(|b| tables_of(b, bins, Source::Dnn, false)).transpose()?;
    let closure = baseline.map(|b| closure_aleatoric(records, b, bins)).transpose()?;
    if baseline.is_none() {
        notices.push("no baseline records: aleatoric closure and baseline columns skipped".into());
    }
    if small.is_none() {
        notices.push("no second record set: nested-training epistemic closure skipped".into());
    }
    let epistemic = closure_epistemic(records, small, bins)?;
    let mut cuts = Vec::new();
    for &t in std::iter::once(&f64::INFINITY).chain(&cfg.ladder) {
        let outcome = uncertainty_cut(records, [t; 3], bins)?;
        let kept_recs: Vec<PredictionRecord> = outcome.kept.iter().map(|&i| records[i]).collect();
        cuts.push(CutLevel {
            threshold: t,
            kept: tables_of(&kept_recs, bins, Source::Eluq, true)?,
            outcome,
        });
    }
    let mut provenance = provenance;
    provenance.extend(&cfg.to_kv());
    Ok(Report {
        config: cfg.clone(),
        n_records: records.len(),
        n_methods_ok: ok.len(),
        eluq: tables_of(records, bins, Source::Eluq, true)?,
        dnn,
        methods,
        closure,
        epistemic,
        cuts,
        notices,
        provenance,
    })
}

fn num(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| format!("{x:?}"))
}

struct Csv {
    text: String,
}

impl Csv {
    fn new(report: &Report, header: &[&str]) -> Self {
        let mut text = String::new();
        for (k, v) in report.provenance.iter() {
            let _ = writeln!(text, "# {k} = {v}");
        }
        let _ = writeln!(text, "# code_version = {}", crate::CODE_VERSION);
        text.push_str(&header.join(","));
        text.push('\n');
        Self { text }
    }

    fn row(&mut self, fields: &[String]) {
        self.text.push_str(&fields.join(","));
        self.text.push('\n');
    }
}

fn write(dir: &Path, name: &str, csv: Csv, out: &mut Vec<PathBuf>) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, csv.text).map_err(|e| AnalysisError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    out.push(path);
    Ok(())
}

fn bin_label(lo: f64, hi: f64) -> String {
    format!("{lo:?}..{hi:?}")
}

/// Writes the CSV suite into `dir` (created if needed) and returns the paths.
pub fn emit_report(report: &Report, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| AnalysisError::Io {
        path: dir.display().to_string(),
        reason: e.to_string(),
    })?;
    let mut files = Vec::new();
    let nb = report.config.bins.len();

    let mut c = Csv::new(
        report,
        &["y_lo", "y_hi", "observable", "n_network", "rms_eluq", "rms_dnn", "n_methods", "rms_el", "rms_da", "rms_jb"],
    );
    for b in 0..nb {
        for (j, obs) in OBSERVABLES.iter().enumerate() {
            let e = &report.eluq[j].rows[b];
            let m = |k: usize| num(report.methods[k][j].rows[b].rms);
            c.row(&[
                format!("{:?}", e.lo),
                format!("{:?}", e.hi),
                obs.to_string(),
                e.count.to_string(),
                num(e.rms),
                num(report.dnn.as_ref().and_then(|d| d[j].rows[b].rms)),
                report.methods[0][j].rows[b].count.to_string(),
                m(0),
                m(1),
                m(2),
            ]);
        }
    }
    write(dir, "resolution.csv", c, &mut files)?;

    let mut c = Csv::new(
        report,
        &["y_lo", "y_hi", "observable", "source", "count", "mean_ratio", "weighted_mean", "sigma_w", "sigma_w_event", "rms"],
    );
    let mut sources: Vec<&[BinnedTable; 3]> = vec![&report.eluq];
    sources.extend(report.dnn.as_ref());
    sources.extend(report.methods.iter());
    for b in 0..nb {
        for j in 0..3 {
            for t in &sources {
                let r = &t[j].rows[b];
                c.row(&[
                    format!("{:?}", r.lo),
                    format!("{:?}", r.hi),
                    OBSERVABLES[j].to_string(),
                    t[j].source.name().to_string(),
                    r.count.to_string(),
                    num(r.mean_ratio),
                    num(r.weighted.map(|w| w.mean)),
                    num(r.weighted.map(|w| w.sigma)),
                    num(r.weighted.map(|w| w.event_level())),
                    num(r.rms),
                ]);
            }
        }
    }
    write(dir, "ratio.csv", c, &mut files)?;

    if let Some(cl) = &report.closure {
        let header = ClosureTable::header();
        let mut c = Csv::new(report, &header.iter().map(String::as_str).collect::<Vec<_>>());
        for row in &cl.rows {
            let mut f = vec![bin_label(row.lo, row.hi)];
            for cell in &row.cells {
                f.extend([num(cell.rms_da), num(cell.rms_el), num(cell.rms_dnn), num(cell.sigma_ale)]);
            }
            c.row(&f);
        }
        write(dir, "closure_aleatoric.csv", c, &mut files)?;

        let mut c = Csv::new(
            report,
            &["y_lo", "y_hi", "observable", "count", "n_methods", "bias", "skewness", "excess_kurtosis", "eligible", "sigma_over_rms"],
        );
        for row in &cl.rows {
            for (j, cell) in row.cells.iter().enumerate() {
                let g = &cell.gate;
                c.row(&[
                    format!("{:?}", row.lo),
                    format!("{:?}", row.hi),
                    OBSERVABLES[j].to_string(),
                    g.count.to_string(),
                    cell.n_methods.to_string(),
                    num(g.bias),
                    num(g.skewness),
                    num(g.excess_kurtosis),
                    g.eligible.to_string(),
                    num(cell.agreement()),
                ]);
            }
        }
        write(dir, "closure_gates.csv", c, &mut files)?;

        let mut c = Csv::new(report, &["y_lo", "y_hi", "observable", "mean_sigma_ale", "mean_sigma_epi", "rms_dnn"]);
        for row in cl.rows.iter().rev() {
            for (j, cell) in row.cells.iter().enumerate() {
                c.row(&[
                    format!("{:?}", row.lo),
                    format!("{:?}", row.hi),
                    OBSERVABLES[j].to_string(),
                    num(cell.sigma_ale),
                    num(cell.sigma_epi),
                    num(cell.rms_dnn),
                ]);
            }
        }
        write(dir, "uncertainty_vs_rms.csv", c, &mut files)?;
    }

    let ep = &report.epistemic;
    let mut c = Csv::new(report, &["y_lo", "y_hi", "observable", "count", "weighted_sigma_epi", "weighted_inaccuracy"]);
    for b in 0..nb {
        for j in 0..3 {
            let r = &ep.bins[j][b];
            c.row(&[
                format!("{:?}", r.lo),
                format!("{:?}", r.hi),
                OBSERVABLES[j].to_string(),
                r.count.to_string(),
                num(r.weighted_sigma_epi),
                num(r.weighted_inaccuracy),
            ]);
        }
    }
    write(dir, "epistemic.csv", c, &mut files)?;

    let mut c = Csv::new(
        report,
        &["observable", "spearman", "spearman_defined", "median_sigma_epi", "median_sigma_epi_small"],
    );
    for j in 0..3 {
        c.row(&[
            OBSERVABLES[j].to_string(),
            num(ep.spearman[j]),
            ep.spearman[j].is_some().to_string(),
            num(ep.median_sigma_epi[j]),
            num(ep.median_sigma_epi_small.and_then(|m| m[j])),
        ]);
    }
    write(dir, "epistemic_summary.csv", c, &mut files)?;

    let mut c = Csv::new(
        report,
        &[
            "threshold",
            "y_lo",
            "y_hi",
            "total",
            "rejected",
            "rejected_fraction",
            "weighted_ratio_x",
            "weighted_ratio_Q2",
            "weighted_ratio_y",
        ],
    );
    for level in &report.cuts {
        for (b, rb) in level.outcome.bins.iter().enumerate() {
            let w = |j: usize| num(level.kept[j].rows[b].weighted.map(|w| w.mean));
            c.row(&[
                format!("{:?}", level.threshold),
                format!("{:?}", rb.lo),
                format!("{:?}", rb.hi),
                rb.total.to_string(),
                rb.rejected.to_string(),
                num(rb.fraction()),
                w(0),
                w(1),
                w(2),
            ]);
        }
    }
    write(dir, "cuts.csv", c, &mut files)?;

    let mut notes = String::new();
    for n in &report.notices {
        let _ = writeln!(notes, "{n}");
    }
    write(dir, "notices.txt", Csv { text: notes }, &mut files)?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::test_record as rec;

    fn records() -> Vec<PredictionRecord> {
        (0..300)
            .map(|i| {
                let y = 0.01 + 0.78 * ((i * 37 % 300) as f64 + 0.5) / 300.0;
                let t = [0.001 + 0.0001 * i as f64, 50.0 + i as f64, y];
                let p = [t[0] * (1.0 + 0.01 * ((i % 11) as f64 - 5.0)), t[1] * 1.02, y * 0.99];
                let mut r = rec(i as u64, t, p, 0.0);
                r.sigma_ale = [0.1 * t[0], 2.0, 0.02];
                r.sigma_epi = [0.01 * t[0], 0.5, 0.001 * (i % 3) as f64];
                r.sigma_tot = std::array::from_fn(|j| r.sigma_ale[j].hypot(r.sigma_epi[j]));
                r
            })
            .collect()
    }

    #[test]
    fn deterministic_files_and_schema() {
        let recs = records();
        let rep = analyze(&recs, Some(&recs), None, &AnalysisConfig::default(), KeyValues::new()).unwrap();
        assert!(rep.notices.iter().any(|n| n.contains("epistemic closure skipped")));
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let f1 = emit_report(&rep, d1.path()).unwrap();
        let rep2 = analyze(&recs, Some(&recs), None, &AnalysisConfig::default(), KeyValues::new()).unwrap();
        emit_report(&rep2, d2.path()).unwrap();
        for p in &f1 {
            let name = p.file_name().unwrap();
            assert_eq!(std::fs::read(p).unwrap(), std::fs::read(d2.path().join(name)).unwrap());
        }
        let body = |name: &str| -> Vec<String> {
            std::fs::read_to_string(d1.path().join(name))
                .unwrap()
                .lines()
                .filter(|l| !l.starts_with('#'))
                .map(String::from)
                .collect()
        };
        let res = body("resolution.csv");
        assert_eq!(res.len(), 1 + 5 * 3);
        assert!(res[0].contains("rms_el") && res[0].contains("rms_da") && res[0].contains("rms_jb"));
        let cl = body("closure_aleatoric.csv");
        assert_eq!(cl[0].split(',').count(), 13);
        assert_eq!(cl.len(), 6);
        assert_eq!(body("cuts.csv").len(), 1 + 5 * 5);
    }

    #[test]
    fn io_error_names_path() {
        let recs = records();
        let rep = analyze(&recs, None, None, &AnalysisConfig::default(), KeyValues::new()).unwrap();
        let f = tempfile::NamedTempFile::new().unwrap();
        let err = emit_report(&rep, &f.path().join("sub")).unwrap_err();
        assert!(matches!(err, AnalysisError::Io { ref path, .. } if path.contains("sub")));
    }
}
