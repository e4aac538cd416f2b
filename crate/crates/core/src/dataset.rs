//! Dataset files: a text header followed by fixed-width binary rows.
//!
//! ```text
//! ELUQ-DATASET
//! format_version = 1
//! n_events = 1000
//! columns = pT_bal,...,delta_sigma,x,Q2,y
//! <generator key = value lines>
//! end_header
//! ```
//!
//! Each row is 18 little-endian `f64` (features then truth `x, Q², y`) and one
//! flag byte.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::config::KeyValues;
use crate::generator::{generate_range, GeneratedEvent, GeneratorConfig, GeneratorError};
use crate::kinematics::{FeatureVector, KinematicTriplet, FEATURE_NAMES, NUM_FEATURES};

pub const MAGIC: &str = "ELUQ-DATASET";
pub const FORMAT_VERSION: u32 = 1;
pub const TRUTH_NAMES: [&str; 3] = ["x", "Q2", "y"];
pub const ROW_FLOATS: usize = NUM_FEATURES + 3;
pub const ROW_BYTES: usize = ROW_FLOATS * 8 + 1;

const CHUNK: u64 = 1 << 15;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("malformed dataset: {0}")]
    Format(String),
    #[error(transparent)]
    Generator(#[from] GeneratorError),
}

pub fn column_names() -> Vec<&'static str> {
    FEATURE_NAMES.iter().chain(TRUTH_NAMES.iter()).copied().collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: GeneratorConfig,
    pub events: Vec<GeneratedEvent>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn features(&self) -> Vec<[f64; NUM_FEATURES]> {
        self.events.iter().map(|e| e.features.to_array()).collect()
    }

    pub fn truths(&self) -> Vec<KinematicTriplet<f64>> {
        self.events.iter().map(|e| e.truth).collect()
    }

    /// Drops events flagged unusable by the smearing stage.
    pub fn usable(mut self) -> Self {
        self.events.retain(GeneratedEvent::usable);
        self
    }
}

fn header(cfg: &GeneratorConfig, n_events: u64) -> String {
    let mut h = format!(
        "{MAGIC}\nformat_version = {FORMAT_VERSION}\ncode_version = {}\nn_events = {n_events}\ncolumns = {}\n",
        crate::CODE_VERSION,
        column_names().join(",")
    );
    h.push_str(&cfg.to_kv().to_string());
    h.push_str("end_header\n");
    h
}

fn encode_row(ev: &GeneratedEvent, out: &mut Vec<u8>) {
    for v in ev.features.to_array().iter().chain(ev.truth.as_array().iter()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(ev.flags);
}

fn decode_row(buf: &[u8]) -> GeneratedEvent {
    let mut vals = [0.0; ROW_FLOATS];
    for (i, v) in vals.iter_mut().enumerate() {
        *v = f64::from_le_bytes(buf[i * 8..i * 8 + 8].try_into().expect("8 bytes"));
    }
    let mut feats = [0.0; NUM_FEATURES];
    feats.copy_from_slice(&vals[..NUM_FEATURES]);
    GeneratedEvent {
        features: FeatureVector::from_array(feats),
        truth: KinematicTriplet::from_array([vals[15], vals[16], vals[17]]),
        flags: buf[ROW_FLOATS * 8],
    }
}

/// Generates `n_events` and streams them to `path` in index order. The same
/// config always yields the same bytes.
pub fn generate_dataset(cfg: &GeneratorConfig, n_events: u64, path: &Path) -> Result<(), DatasetError> {
    cfg.validate()?;
    if n_events == 0 {
        return Err(GeneratorError::Config("n_events must be positive".into()).into());
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(header(cfg, n_events).as_bytes())?;
    let mut buf = Vec::with_capacity(CHUNK as usize * ROW_BYTES);
    let mut start = 0;
    while start < n_events {
        let n = CHUNK.min(n_events - start);
        buf.clear();
        for ev in generate_range(cfg, start, n)? {
            encode_row(&ev, &mut buf);
        }
        w.write_all(&buf)?;
        start += n;
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<(), DatasetError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(header(&ds.config, ds.events.len() as u64).as_bytes())?;
    let mut buf = Vec::with_capacity(ROW_BYTES);
    for ev in &ds.events {
        buf.clear();
        encode_row(ev, &mut buf);
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DatasetError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim_end() != MAGIC {
        return Err(DatasetError::Format("missing magic line".into()));
    }
    let mut text = String::new();
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(DatasetError::Format("header not terminated".into()));
        }
        if line.trim_end() == "end_header" {
            break;
        }
        text.push_str(&line);
    }
    let kv = KeyValues::parse(&text).map_err(|e| DatasetError::Format(e.to_string()))?;
    let version: u32 = kv
        .require("format_version")
        .map_err(|e| DatasetError::Format(e.to_string()))?;
    if version != FORMAT_VERSION {
        return Err(DatasetError::Format(format!(
            "unsupported format version {version}"
        )));
    }
    if kv.raw("columns") != Some(column_names().join(",").as_str()) {
        return Err(DatasetError::Format("unexpected column list".into()));
    }
    let n: u64 = kv
        .require("n_events")
        .map_err(|e| DatasetError::Format(e.to_string()))?;
    let config = GeneratorConfig::from_kv(&kv)?;

    let mut events = Vec::with_capacity(n as usize);
    let mut row = [0u8; ROW_BYTES];
    for i in 0..n {
        r.read_exact(&mut row).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => {
                DatasetError::Format(format!("truncated at row {i} of {n}"))
            }
            _ => e.into(),
        })?;
        events.push(decode_row(&row));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(DatasetError::Format("trailing bytes after last row".into()));
    }
    Ok(Dataset { config, events })
}

/// Plain CSV with the dataset columns plus `flags`.
pub fn export_csv<W: Write>(ds: &Dataset, out: W) -> io::Result<()> {
    let mut w = BufWriter::new(out);
    writeln!(w, "{},flags", column_names().join(","))?;
    for ev in &ds.events {
        for v in ev.features.to_array().iter().chain(ev.truth.as_array().iter()) {
            write!(w, "{v:?},")?;
        }
        writeln!(w, "{}", ev.flags)?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = GeneratorConfig {
            seed: 11,
            ..GeneratorConfig::default()
        };
        let a = dir.path().join("a.bin");
        let b = dir.path().join("b.bin");
        generate_dataset(&cfg, 300, &a).unwrap();
        generate_dataset(&cfg, 300, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let ds = read_dataset(&a).unwrap();
        assert_eq!(ds.config, cfg);
        assert_eq!(ds.len(), 300);
        let direct = crate::generator::generate(&cfg, 300).unwrap();
        assert_eq!(ds.events, direct);

        let c = dir.path().join("c.bin");
        write_dataset(&ds, &c).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&c).unwrap());
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        generate_dataset(&GeneratorConfig::default(), 10, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(read_dataset(&p), Err(DatasetError::Format(_))));
    }

    #[test]
    fn csv_has_header_and_rows() {
        let cfg = GeneratorConfig::default();
        let ds = Dataset {
            config: cfg,
            events: crate::generator::generate(&cfg, 4).unwrap(),
        };
        let mut out = Vec::new();
        export_csv(&ds, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[0].starts_with("pT_bal,pz_bal"));
        assert_eq!(lines[1].split(',').count(), 19);
    }
}
