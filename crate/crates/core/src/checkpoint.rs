//! Binary checkpoints: `DPN1`, a little-endian `u64` header length, a JSON
//! header, then every array as raw little-endian values.

use std::fs;
use std::path::Path;

use dpn_tensor::{DType, Float, ParamKind};
use serde::{Deserialize, Serialize};

use crate::embeddings::FieldSchema;
use crate::error::{DpnError, Result};
use crate::model::{Model, ModelSpec};
use crate::optim::{Adam, AdamConfig};
use crate::rng::RngState;

pub const MAGIC: &[u8; 4] = b"DPN1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub kind: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the data section.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHeader {
    pub cfg: AdamConfig,
    pub step: u64,
    /// Offsets of the first and second moments, parallel to `params`.
    pub m_offsets: Vec<usize>,
    pub v_offsets: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub dtype: String,
    pub model: ModelSpec,
    pub schema: FieldSchema,
    pub params: Vec<ArrayEntry>,
    pub optimizer: Option<OptimizerHeader>,
    pub rng: Option<RngState>,
    #[serde(default)]
    pub metrics: serde_json::Value,
}

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint<T: Float> {
    pub model: Model<T>,
    pub adam: Option<Adam<T>>,
    pub rng: Option<RngState>,
    pub metrics: serde_json::Value,
}

fn corrupt(msg: impl Into<String>) -> DpnError {
    DpnError::Checkpoint(msg.into())
}

pub fn save<T: Float>(
    path: &Path,
    model: &Model<T>,
    adam: Option<&Adam<T>>,
    rng: Option<&RngState>,
    metrics: &serde_json::Value,
) -> Result<()> {
    let store = &model.store;
    let mut data = Vec::new();
    let mut params = Vec::new();
    for id in store.ids() {
        let t = store.get(id);
        params.push(ArrayEntry {
            name: store.name(id).to_string(),
            kind: store.kind(id).as_str().to_string(),
            shape: t.shape().to_vec(),
            offset: data.len(),
        });
        t.data().iter().for_each(|v| v.write_le(&mut data));
    }
    let optimizer = adam.map(|a| {
        let mut put = |slots: &[Vec<T>]| {
            slots
                .iter()
                .map(|s| {
                    let off = data.len();
                    s.iter().for_each(|v| v.write_le(&mut data));
                    off
                })
                .collect::<Vec<_>>()
        };
        let m_offsets = put(&a.m);
        let v_offsets = put(&a.v);
        OptimizerHeader { cfg: a.cfg, step: a.step, m_offsets, v_offsets }
    });
    let header = Header {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE.as_str().to_string(),
        model: model.spec.clone(),
        schema: model.schema.clone(),
        params,
        optimizer,
        rng: rng.cloned(),
        metrics: metrics.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| corrupt(e.to_string()))?;
    let mut out = Vec::with_capacity(12 + json.len() + data.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&data);
    fs::write(path, out).map_err(|e| DpnError::io(path, e))
}

fn split(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(corrupt("not a checkpoint (bad magic)"));
    }
    let len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let body = &bytes[12..];
    if len > body.len() {
        return Err(corrupt(format!("header claims {len} bytes, file has {}", body.len())));
    }
    let header: Header = serde_json::from_slice(&body[..len]).map_err(|e| corrupt(format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(corrupt(format!(
            "format version {} not supported (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    Ok((header, &body[len..]))
}

/// Header only, e.g. to pick the element type before a full load.
pub fn read_header(path: &Path) -> Result<Header> {
    let bytes = fs::read(path).map_err(|e| DpnError::io(path, e))?;
    Ok(split(&bytes)?.0)
}

pub fn header_dtype(h: &Header) -> Result<DType> {
    DType::parse(&h.dtype).ok_or_else(|| corrupt(format!("unknown dtype `{}`", h.dtype)))
}

fn read_array<T: Float>(data: &[u8], offset: usize, len: usize) -> Result<Vec<T>> {
    let size = T::DTYPE.size_of();
    let end = offset.checked_add(len * size).ok_or_else(|| corrupt("array offset overflow"))?;
    if end > data.len() {
        return Err(corrupt(format!("truncated data: need {end} bytes, have {}", data.len())));
    }
    Ok(data[offset..end].chunks_exact(size).map(T::read_le).collect())
}

pub fn load<T: Float>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = fs::read(path).map_err(|e| DpnError::io(path, e))?;
    let (h, data) = split(&bytes)?;
    if header_dtype(&h)? != T::DTYPE {
        return Err(corrupt(format!("checkpoint holds {} values, requested {}", h.dtype, T::DTYPE.as_str())));
    }
    let mut model = Model::<T>::build(&h.model, &h.schema, 0)?;
    if h.params.len() != model.store.len() {
        return Err(corrupt(format!(
            "checkpoint has {} tensors, model defines {}",
            h.params.len(),
            model.store.len()
        )));
    }
    let mut ids = Vec::with_capacity(h.params.len());
    for p in &h.params {
        let id = model.store.find(&p.name).ok_or_else(|| corrupt(format!("unknown tensor `{}`", p.name)))?;
        let t = model.store.get(id);
        if t.shape() != p.shape.as_slice() || ParamKind::parse(&p.kind) != Some(model.store.kind(id)) {
            return Err(corrupt(format!("tensor `{}` has shape {:?}/{}, model expects {:?}", p.name, p.shape, p.kind, t.shape())));
        }
        let vals = read_array::<T>(data, p.offset, t.numel())?;
        model.store.set_data(id, &vals)?;
        ids.push(id);
    }
    let adam = match &h.optimizer {
        None => None,
        Some(o) => {
            if o.m_offsets.len() != ids.len() || o.v_offsets.len() != ids.len() {
                return Err(corrupt("optimizer state does not cover every tensor"));
            }
            let mut a = Adam::new(o.cfg, &model.store);
            a.step = o.step;
            for (k, &id) in ids.iter().enumerate() {
                let n = a.m[id.index()].len();
                a.m[id.index()] = read_array(data, o.m_offsets[k], n)?;
                a.v[id.index()] = read_array(data, o.v_offsets[k], n)?;
            }
            Some(a)
        }
    };
    Ok(Checkpoint { model, adam, rng: h.rng, metrics: h.metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::FieldSpec;

    fn model() -> Model<f64> {
        let schema = FieldSchema::new(vec![FieldSpec::new("a", 5), FieldSpec::new("b", 4)]).unwrap();
        Model::build(&ModelSpec::mlp(3, &[4]), &schema, 11).unwrap()
    }

    #[test]
    fn round_trip_restores_every_tensor() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save(&p, &m, None, None, &serde_json::json!({"auc": 0.5})).unwrap();
        let c = load::<f64>(&p).unwrap();
        for id in m.store.ids() {
            assert_eq!(m.store.get(id).data(), c.model.store.get(id).data(), "{}", m.store.name(id));
        }
        assert_eq!(c.metrics["auc"], 0.5);
        assert!(c.adam.is_none());
    }

    #[test]
    fn damaged_files_are_rejected() {
        let m = model();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save(&p, &m, None, None, &serde_json::Value::Null).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load::<f64>(&p), Err(DpnError::Checkpoint(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&p, &bad).unwrap();
        assert!(matches!(load::<f64>(&p), Err(DpnError::Checkpoint(_))));
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load::<f32>(&p), Err(DpnError::Checkpoint(_))));
    }
}
