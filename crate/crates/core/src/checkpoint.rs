//! Checkpoint container: magic, manifest length, JSON manifest, raw little-endian payload.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamKind, ParamStore};
use crate::tensor::{DType, Scalar, Shape, Tensor};

const MAGIC: &[u8; 8] = b"LSEGCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize, Debug)]
struct Manifest {
    version: u32,
    dtype: DType,
    #[serde(default)]
    stats_geometry: Option<String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize, Debug)]
struct TensorEntry {
    name: String,
    kind: String,
    shape: [usize; 4],
    dtype: DType,
    offset: usize,
    nbytes: usize,
}

fn kind_name(k: ParamKind) -> &'static str {
    match k {
        ParamKind::ConvWeight => "conv_weight",
        ParamKind::HeadWeight => "head_weight",
        ParamKind::Bias => "bias",
        ParamKind::Gamma => "gamma",
        ParamKind::Beta => "beta",
        ParamKind::RunningMean => "running_mean",
        ParamKind::RunningVar => "running_var",
        ParamKind::GateLogits => "gate_logits",
    }
}

fn parse_kind(s: &str) -> Result<ParamKind> {
    Ok(match s {
        "conv_weight" => ParamKind::ConvWeight,
        "head_weight" => ParamKind::HeadWeight,
        "bias" => ParamKind::Bias,
        "gamma" => ParamKind::Gamma,
        "beta" => ParamKind::Beta,
        "running_mean" => ParamKind::RunningMean,
        "running_var" => ParamKind::RunningVar,
        "gate_logits" => ParamKind::GateLogits,
        other => return Err(Error::Checkpoint(format!("unknown tensor kind `{other}`"))),
    })
}

pub fn to_bytes<T: Scalar>(store: &ParamStore<T>) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (name, kind, t) in store.iter() {
        let offset = payload.len();
        for &v in t.data() {
            v.write_le(&mut payload);
        }
        tensors.push(TensorEntry {
            name: name.to_string(),
            kind: kind_name(kind).to_string(),
            shape: t.shape().0,
            dtype: T::DTYPE,
            offset,
            nbytes: payload.len() - offset,
        });
    }
    let manifest = serde_json::to_vec(&Manifest {
        version: VERSION,
        dtype: T::DTYPE,
        stats_geometry: store.stats_geometry.clone(),
        tensors,
    })?;
    let mut out = Vec::with_capacity(16 + manifest.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<ParamStore<T>> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let mlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + mlen)
        .ok_or_else(|| Error::Checkpoint("truncated manifest".into()))?;
    let manifest: Manifest = serde_json::from_slice(body)?;
    if manifest.version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {}", manifest.version)));
    }
    if manifest.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {:?} tensors, requested {:?}",
            manifest.dtype,
            T::DTYPE
        )));
    }
    let payload = &bytes[16 + mlen..];
    let size = T::DTYPE.size();
    let mut store = ParamStore::default();
    for e in manifest.tensors {
        let shape = Shape(e.shape);
        if e.nbytes != shape.numel() * size {
            return Err(Error::Checkpoint(format!("{}: byte count does not match shape", e.name)));
        }
        let raw = payload
            .get(e.offset..e.offset + e.nbytes)
            .ok_or_else(|| Error::Checkpoint(format!("{}: payload out of range", e.name)))?;
        let data = raw.chunks_exact(size).map(T::read_le).collect();
        store.insert(&e.name, parse_kind(&e.kind)?, Tensor::from_vec(shape, data)?);
    }
    store.stats_geometry = manifest.stats_geometry;
    Ok(store)
}

pub fn save<T: Scalar>(path: impl AsRef<Path>, store: &ParamStore<T>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&to_bytes(store)?)?;
    Ok(())
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<ParamStore<T>> {
    from_bytes(&fs::read(path)?)
}
