//! Binary checkpoints.
//!
//! Layout: the 8-byte magic `GMRNNT01`, a little-endian `u64` length, that
//! many bytes of JSON metadata (vocabulary, blank index, architecture, config
//! hash and the ordered parameter manifest), then every parameter's values as
//! little-endian `f64` in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelDims, Param, TransducerModel};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"GMRNNT01";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub vocab_size: usize,
    pub blank_index: usize,
    pub dims: ModelDims,
    pub config_hash: String,
    pub params: Vec<ParamEntry>,
}

pub fn to_bytes(model: &TransducerModel, config_hash: &str) -> Result<Vec<u8>> {
    let meta = CheckpointMeta {
        vocab_size: model.dims().vocab_size,
        blank_index: model.dims().blank(),
        dims: model.dims().clone(),
        config_hash: config_hash.to_string(),
        params: model
            .params()
            .iter()
            .map(|p| ParamEntry {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
            })
            .collect(),
    };
    let header = serde_json::to_vec(&meta)?;
    let mut out = Vec::with_capacity(16 + header.len() + 8 * model.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for p in model.params() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<(TransducerModel, CheckpointMeta)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file (bad magic)"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + len)
        .ok_or_else(|| bad("truncated metadata"))?;
    let meta: CheckpointMeta = serde_json::from_slice(body)?;
    if meta.blank_index != meta.dims.blank() || meta.vocab_size != meta.dims.vocab_size {
        return Err(bad("metadata vocabulary disagrees with architecture"));
    }
    let mut rest = &bytes[16 + len..];
    let mut params = Vec::with_capacity(meta.params.len());
    for entry in &meta.params {
        let n: usize = entry.shape.iter().product();
        if rest.len() < 8 * n {
            return Err(bad(&format!("truncated values for {}", entry.name)));
        }
        let data = rest[..8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        rest = &rest[8 * n..];
        params.push(Param {
            name: entry.name.clone(),
            value: Tensor::new(entry.shape.clone(), data)?,
        });
    }
    if !rest.is_empty() {
        return Err(bad("trailing bytes after parameter values"));
    }
    let model = TransducerModel::from_params(meta.dims.clone(), params)?;
    Ok((model, meta))
}

pub fn save_checkpoint(path: &Path, model: &TransducerModel, config_hash: &str) -> Result<()> {
    fs::write(path, to_bytes(model, config_hash)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(TransducerModel, CheckpointMeta)> {
    from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn round_trip_is_bitwise() {
        let m = TransducerModel::new(ModelDims::default(), &mut stream(4, &["init"])).unwrap();
        let bytes = to_bytes(&m, "abc").unwrap();
        let (back, meta) = from_bytes(&bytes).unwrap();
        assert_eq!(meta.config_hash, "abc");
        assert_eq!(meta.blank_index, 16);
        for (a, b) in m.params().iter().zip(back.params()) {
            assert_eq!(a.name, b.name);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        assert_eq!(to_bytes(&back, "abc").unwrap(), bytes);
    }

    #[test]
    fn corrupt_files_rejected() {
        let m = TransducerModel::new(ModelDims::default(), &mut stream(4, &["init"])).unwrap();
        let bytes = to_bytes(&m, "").unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(from_bytes(b"nonsense").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
    }
}
