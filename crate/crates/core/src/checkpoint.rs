//! Binary checkpoint: magic, version, JSON header, `f64` blob, SHA-256 trailer.
//!
//! ```text
//! "ELUQCKPT" | u32 version | u64 header_len | header (JSON)
//!            | u64 n_values | n_values x f64 | sha256(all preceding bytes)
//! ```
//! The blob holds every parameter in binding order, then the running mean and
//! variance of each batch norm. All integers are little-endian.

use std::collections::BTreeMap;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{Param, Tensor};
use crate::config::KeyValues;
use crate::mnf::{MnfConfig, Parameterized};
use crate::model::{FeatureScaler, Layer, Network, TargetScaler, Topology};
use crate::rng::stream;
use crate::trainer::{Split, TrainConfig};
use crate::{Real, CODE_VERSION};

pub const MAGIC: &[u8; 8] = b"ELUQCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found}, this build reads {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupted checkpoint: {0}")]
    Corrupt(String),
    #[error("incompatible checkpoint: {0}")]
    Schema(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Eluq,
    Dnn,
}

impl ModelKind {
    pub fn of<T: Real, L: Layer<T>>() -> Self {
        if L::BAYESIAN {
            ModelKind::Eluq
        } else {
            ModelKind::Dnn
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            ModelKind::Eluq => "eluq",
            ModelKind::Dnn => "dnn",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckpointMeta {
    /// Epoch the parameters come from (0 = initialization).
    pub epoch: usize,
    pub val_loss: Option<f64>,
    /// Optimizer steps taken when the parameters were captured.
    pub steps: u64,
}

/// Everything needed to resume or audit a run and to run inference.
#[derive(Debug, Clone)]
pub struct Checkpoint<T, L> {
    pub network: Network<T, L>,
    pub feature_scaler: FeatureScaler,
    pub target_scaler: TargetScaler,
    pub train_config: TrainConfig,
    pub split: Split,
    pub meta: CheckpointMeta,
    /// Upstream configuration (e.g. the generator's) echoed for provenance.
    pub provenance: KeyValues,
}

#[derive(Serialize, Deserialize)]
struct Header {
    code_version: String,
    scalar: String,
    kind: ModelKind,
    topology: Topology,
    logvar_head: bool,
    mnf: MnfConfig,
    clamp: [f64; 3],
    params: Vec<(String, Vec<usize>)>,
    norm_dims: Vec<usize>,
    feature_scaler: FeatureScaler,
    target_scaler: TargetScaler,
    train_config: BTreeMap<String, String>,
    provenance: BTreeMap<String, String>,
    split: Split,
    epoch: usize,
    val_loss: Option<f64>,
    steps: u64,
}

fn kv_map(kv: &KeyValues) -> BTreeMap<String, String> {
    kv.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

fn map_kv(map: &BTreeMap<String, String>) -> KeyValues {
    let mut kv = KeyValues::new();
    for (k, v) in map {
        kv.set(k, v);
    }
    kv
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CheckpointError::Corrupt("truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Reads the model kind without building the network.
pub fn peek_kind(path: &Path) -> Result<ModelKind, CheckpointError> {
    let bytes = read_file(path)?;
    Ok(parse_header(&bytes)?.0.kind)
}

fn read_file(path: &Path) -> Result<Vec<u8>, CheckpointError> {
    std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Validates framing and digest, returning the header and the blob bytes.
fn parse_header(bytes: &[u8]) -> Result<(Header, &[u8]), CheckpointError> {
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut r = Reader { buf: bytes, pos: 8 };
    let found = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
    if found != VERSION {
        return Err(CheckpointError::VersionMismatch {
            found,
            expected: VERSION,
        });
    }
    if bytes.len() < 8 + 4 + 32 {
        return Err(CheckpointError::Corrupt("truncated".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(CheckpointError::Corrupt("checksum mismatch".into()));
    }
    let mut r = Reader { buf: body, pos: 12 };
    let hlen = r.u64()? as usize;
    let header: Header =
        serde_json::from_slice(r.take(hlen)?).map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
    let n = r.u64()? as usize;
    let blob = r.take(n.checked_mul(8).ok_or_else(|| CheckpointError::Corrupt("blob size".into()))?)?;
    if r.pos != body.len() {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    Ok((header, blob))
}

impl<T: Real, L: Layer<T>> Checkpoint<T, L> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let net = &self.network;
        let norms = net.norms();
        let header = Header {
            code_version: CODE_VERSION.to_string(),
            scalar: T::NAME.to_string(),
            kind: ModelKind::of::<T, L>(),
            topology: net.topology().clone(),
            logvar_head: net.has_logvar_head(),
            mnf: *net.mnf_config(),
            clamp: [net.clamp.lo, net.clamp.hi, net.clamp.sharpness],
            params: net
                .named_params()
                .into_iter()
                .map(|(n, p)| (n, p.shape().to_vec()))
                .collect(),
            norm_dims: norms.iter().map(|b| b.dim()).collect(),
            feature_scaler: self.feature_scaler.clone(),
            target_scaler: self.target_scaler.clone(),
            train_config: kv_map(&self.train_config.to_kv()),
            provenance: kv_map(&self.provenance),
            split: self.split.clone(),
            epoch: self.meta.epoch,
            val_loss: self.meta.val_loss.filter(|v| v.is_finite()),
            steps: self.meta.steps,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut values: Vec<f64> = Vec::with_capacity(net.num_params());
        for p in net.params() {
            values.extend(p.data().iter().map(|v| v.as_f64()));
        }
        for b in &norms {
            values.extend(b.running_mean.data().iter().map(|v| v.as_f64()));
            values.extend(b.running_var.data().iter().map(|v| v.as_f64()));
        }
        let mut out = Vec::with_capacity(json.len() + values.len() * 8 + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let (h, blob) = parse_header(bytes)?;
        let kind = ModelKind::of::<T, L>();
        if h.kind != kind {
            return Err(CheckpointError::Schema(format!(
                "file holds a {} model, expected {}",
                h.kind.tag(),
                kind.tag()
            )));
        }
        let mut net = Network::<T, L>::new(h.topology.clone(), h.mnf, h.logvar_head, &mut stream(0, "init", 0))
            .map_err(|e| CheckpointError::Schema(e.to_string()))?;
        let layout: Vec<(String, Vec<usize>)> = net
            .named_params()
            .into_iter()
            .map(|(n, p)| (n, p.shape().to_vec()))
            .collect();
        if layout != h.params {
            return Err(CheckpointError::Schema("parameter layout does not match the topology".into()));
        }
        let dims: Vec<usize> = net.norms().iter().map(|b| b.dim()).collect();
        if dims != h.norm_dims {
            return Err(CheckpointError::Schema("batch-norm layout does not match the topology".into()));
        }
        let expected: usize = layout.iter().map(|(_, s)| s.iter().product::<usize>()).sum::<usize>()
            + 2 * dims.iter().sum::<usize>();
        if blob.len() != expected * 8 {
            return Err(CheckpointError::Corrupt(format!(
                "blob holds {} values, layout needs {expected}",
                blob.len() / 8
            )));
        }
        let mut values = blob
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))));
        let mut next = |shape: &[usize]| -> Tensor<T> {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), values.by_ref().take(n).collect()).expect("sized by layout")
        };
        for (p, (_, shape)) in net.params_mut().into_iter().zip(&layout) {
            *p = Param::new(next(shape));
        }
        for b in net.norms_mut() {
            let d = [b.dim()];
            b.running_mean = next(&d);
            b.running_var = next(&d);
        }
        net.clamp.lo = h.clamp[0];
        net.clamp.hi = h.clamp[1];
        net.clamp.sharpness = h.clamp[2];
        let train_config = TrainConfig::from_kv(&map_kv(&h.train_config))
            .map_err(|e| CheckpointError::Schema(format!("training config: {e}")))?;
        Ok(Self {
            network: net,
            feature_scaler: h.feature_scaler,
            target_scaler: h.target_scaler,
            train_config,
            split: h.split,
            meta: CheckpointMeta {
                epoch: h.epoch,
                val_loss: h.val_loss,
                steps: h.steps,
            },
            provenance: map_kv(&h.provenance),
        })
    }

    /// Writes through a temporary sibling so a failed write leaves no partial file.
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io_err = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".partial");
        std::fs::write(&tmp, self.to_bytes()).map_err(io_err)?;
        std::fs::rename(&tmp, path).map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::from_bytes(&read_file(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{EluqNetwork, TargetTransform};
    use crate::trainer::TrainConfig;

    fn sample() -> Checkpoint<f64, crate::mnf::MnfDenseLayer<f64>> {
        let net = EluqNetwork::eluq(Topology::compact().with_input(4), MnfConfig::default(), &mut stream(5, "init", 0)).unwrap();
        Checkpoint {
            network: net,
            feature_scaler: FeatureScaler {
                min: vec![0.0; 4],
                max: vec![1.0; 4],
            },
            target_scaler: TargetScaler::fit(&[[0.1, 10.0, 0.2], [0.5, 100.0, 0.9]], TargetTransform::Log10),
            train_config: TrainConfig::default(),
            split: Split::new(20, [0.7, 0.15, 0.15], 0),
            meta: CheckpointMeta {
                epoch: 3,
                val_loss: Some(-1.25),
                steps: 42,
            },
            provenance: KeyValues::parse("seed = 9").unwrap(),
        }
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.to_bytes();
        let back = Checkpoint::<f64, crate::mnf::MnfDenseLayer<f64>>::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let x = Tensor::from_fn(&[5, 4], |i| (i as f64 * 0.37).sin());
        let noise = ck.network.draw_noise(5, &mut stream(1, "n", 0));
        let (a, sa) = ck.network.predict(&x, &noise, false).unwrap();
        let (b, sb) = back.network.predict(&x, &noise, false).unwrap();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
        assert_eq!(back.split, ck.split);
        assert_eq!(back.meta, ck.meta);
    }

    #[test]
    fn corruption_and_version_errors() {
        let bytes = sample().to_bytes();
        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 1;
        type Ck = Checkpoint<f64, crate::mnf::MnfDenseLayer<f64>>;
        assert!(matches!(Ck::from_bytes(&flipped), Err(CheckpointError::Corrupt(_))));
        assert!(matches!(Ck::from_bytes(&bytes[..100]), Err(CheckpointError::Corrupt(_))));
        let mut v2 = bytes.clone();
        v2[8] = 2;
        assert!(matches!(
            Ck::from_bytes(&v2),
            Err(CheckpointError::VersionMismatch { found: 2, .. })
        ));
        assert!(matches!(Ck::from_bytes(b"garbage!"), Err(CheckpointError::BadMagic)));
        let dnn = Checkpoint::<f64, crate::mnf::DenseLayer<f64>>::from_bytes(&bytes);
        assert!(matches!(dnn, Err(CheckpointError::Schema(_))));
    }
}
