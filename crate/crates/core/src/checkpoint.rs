//! Model checkpoints.
//!
//! Layout: a little-endian `u64` header length, a JSON header holding the
//! model config, a tensor manifest and free-form metadata, then one `QTEN`
//! record per parameter in manifest order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{build_variant, Model, VariantConfig};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const MAX_HEADER: u64 = 64 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: u32,
    pub config: VariantConfig,
    pub manifest: Vec<ManifestEntry>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

fn corrupt(detail: impl Into<String>) -> Error {
    Error::Corrupt {
        what: "checkpoint",
        detail: detail.into(),
    }
}

pub fn write<T: Scalar, W: Write>(model: &Model<T>, meta: serde_json::Value, mut w: W) -> Result<()> {
    let header = Header {
        format: 1,
        config: model.arch.config.clone(),
        manifest: model
            .params
            .iter()
            .map(|(_, name, t)| ManifestEntry {
                name: name.to_owned(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        meta,
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for t in model.params.tensors() {
        t.write_qten(&mut w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read<T: Scalar, R: Read>(mut r: R) -> Result<(Model<T>, Header)> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(|e| corrupt(format!("missing header length: {e}")))?;
    let len = u64::from_le_bytes(len);
    if len > MAX_HEADER {
        return Err(corrupt(format!("header length {len} exceeds limit")));
    }
    let mut json = vec![0u8; len as usize];
    r.read_exact(&mut json).map_err(|e| corrupt(format!("truncated header: {e}")))?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| corrupt(format!("bad header: {e}")))?;

    let template = build_variant::<T>(&header.config, 0)?;
    if template.params.len() != header.manifest.len() {
        return Err(corrupt(format!(
            "manifest lists {} tensors, config builds {}",
            header.manifest.len(),
            template.params.len()
        )));
    }
    let mut names = Vec::with_capacity(header.manifest.len());
    let mut tensors = Vec::with_capacity(header.manifest.len());
    for ((_, name, t), entry) in template.params.iter().zip(&header.manifest) {
        if name != entry.name || t.shape() != entry.shape.as_slice() {
            return Err(corrupt(format!(
                "manifest entry {} {:?} does not match model tensor {name} {:?}",
                entry.name,
                entry.shape,
                t.shape()
            )));
        }
        let rec = Tensor::<T>::read_qten(&mut r).map_err(|e| match e {
            Error::Io(io) => corrupt(format!("truncated record for {name}: {io}")),
            other => other,
        })?;
        if rec.shape() != t.shape() {
            return Err(corrupt(format!("record for {name} has shape {:?}", rec.shape())));
        }
        names.push(name.to_owned());
        tensors.push(rec);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(corrupt("trailing bytes after last record"));
    }
    Ok((
        Model {
            arch: template.arch,
            params: ParamStore::from_parts(names, tensors)?,
        },
        header,
    ))
}

pub fn save<T: Scalar>(model: &Model<T>, meta: serde_json::Value, path: &Path) -> Result<()> {
    write(model, meta, BufWriter::new(File::create(path)?))
}

pub fn load<T: Scalar>(path: &Path) -> Result<(Model<T>, Header)> {
    read(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> Model<f32> {
        build_variant(&VariantConfig::micro(), 11).unwrap()
    }

    #[test]
    fn round_trip_is_exact_for_f32() {
        let m = micro();
        let mut buf = Vec::new();
        write(&m, serde_json::json!({"step": 3}), &mut buf).unwrap();
        let (back, header) = read::<f32, _>(buf.as_slice()).unwrap();
        assert_eq!(back.params, m.params);
        assert_eq!(header.meta["step"], 3);
        assert_eq!(header.config, m.arch.config);
    }

    #[test]
    fn corruption_is_reported() {
        let m = micro();
        let mut buf = Vec::new();
        write(&m, serde_json::Value::Null, &mut buf).unwrap();

        let truncated = &buf[..buf.len() - 3];
        assert!(matches!(read::<f32, _>(truncated), Err(Error::Corrupt { .. })));

        let mut extra = buf.clone();
        extra.push(0);
        assert!(matches!(read::<f32, _>(extra.as_slice()), Err(Error::Corrupt { .. })));

        let mut bad_len = buf.clone();
        bad_len[..8].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(read::<f32, _>(bad_len.as_slice()), Err(Error::Corrupt { .. })));

        let mut bad_json = buf;
        bad_json[8] = b'!';
        assert!(matches!(read::<f32, _>(bad_json.as_slice()), Err(Error::Corrupt { .. })));
    }
}
