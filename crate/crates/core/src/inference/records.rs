//! Prediction record files: a text header of `key = value` lines closed by
//! `end_header`, then fixed-width little-endian rows
//! (`u64` event, 24 `f64`, `u8` flags).

use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::PredictionRecord;
use crate::config::KeyValues;

pub const RECORD_MAGIC: &str = "ELUQ-RECORDS";
pub const RECORD_VERSION: u32 = 1;
const ROW_BYTES: usize = 8 + 24 * 8 + 1;

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}: malformed record file: {reason}")]
    Format { path: String, reason: String },
}

/// Provenance echoed at the top of a record file.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordHeader {
    pub meta: KeyValues,
    pub n_records: u64,
}

fn encode(r: &PredictionRecord, out: &mut Vec<u8>) {
    out.extend_from_slice(&r.event.to_le_bytes());
    let groups = [r.truth, r.pred, r.sigma_ale, r.sigma_epi, r.sigma_tot];
    for v in groups.iter().chain(r.methods.iter()).flatten() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(r.flags);
}

fn decode(b: &[u8]) -> PredictionRecord {
    let f = |k: usize| f64::from_le_bytes(b[8 + k * 8..16 + k * 8].try_into().expect("8 bytes"));
    let t = |g: usize| [f(3 * g), f(3 * g + 1), f(3 * g + 2)];
    PredictionRecord {
        event: u64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        truth: t(0),
        pred: t(1),
        sigma_ale: t(2),
        sigma_epi: t(3),
        sigma_tot: t(4),
        methods: [t(5), t(6), t(7)],
        flags: b[ROW_BYTES - 1],
    }
}

pub fn write_records(path: &Path, meta: &KeyValues, records: &[PredictionRecord]) -> Result<(), RecordError> {
    let io_err = |source| RecordError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    let mut head = format!(
        "{RECORD_MAGIC}\nformat_version = {RECORD_VERSION}\nn_records = {}\n",
        records.len()
    );
    head.push_str(&meta.to_string());
    head.push_str("end_header\n");
    w.write_all(head.as_bytes()).map_err(io_err)?;
    let mut buf = Vec::with_capacity(ROW_BYTES);
    for r in records {
        buf.clear();
        encode(r, &mut buf);
        w.write_all(&buf).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

pub fn read_records(path: &Path) -> Result<(RecordHeader, Vec<PredictionRecord>), RecordError> {
    let p = path.display().to_string();
    let io_err = |source| RecordError::Io {
        path: p.clone(),
        source,
    };
    let bad = |reason: String| RecordError::Format {
        path: p.clone(),
        reason,
    };
    let mut r = BufReader::new(std::fs::File::open(path).map_err(io_err)?);
    let mut line = String::new();
    r.read_line(&mut line).map_err(io_err)?;
    if line.trim_end() != RECORD_MAGIC {
        return Err(bad("missing magic line".into()));
    }
    let mut text = String::new();
    loop {
        line.clear();
        if r.read_line(&mut line).map_err(io_err)? == 0 {
            return Err(bad("header not terminated".into()));
        }
        if line.trim_end() == "end_header" {
            break;
        }
        text.push_str(&line);
    }
    let mut meta = KeyValues::parse(&text).map_err(|e| bad(e.to_string()))?;
    let version: u32 = meta.require("format_version").map_err(|e| bad(e.to_string()))?;
    if version != RECORD_VERSION {
        return Err(bad(format!("format version {version}, expected {RECORD_VERSION}")));
    }
    let n: u64 = meta.require("n_records").map_err(|e| bad(e.to_string()))?;
    let mut body = Vec::new();
    r.read_to_end(&mut body).map_err(io_err)?;
    if body.len() as u64 != n * ROW_BYTES as u64 {
        return Err(bad(format!("{} bytes of rows for {n} records", body.len())));
    }
    let records = body.chunks_exact(ROW_BYTES).map(decode).collect();
    meta = strip(meta, &["format_version", "n_records"]);
    Ok((RecordHeader { meta, n_records: n }, records))
}

fn strip(kv: KeyValues, keys: &[&str]) -> KeyValues {
    let mut out = KeyValues::new();
    for (k, v) in kv.iter().filter(|(k, _)| !keys.contains(k)) {
        out.set(k, v);
    }
    out
}
