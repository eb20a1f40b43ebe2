//! Parameter checkpoints.
//!
//! The file opens with a valid rank-1 `M3T1` tensor holding every parameter
//! concatenated in name order, so generic tensor readers can load it. After the
//! payload comes a JSON index, its byte length as `u64` LE, and the magic
//! `M3IX`. The index maps each name to the absolute byte offset of its first
//! value and its shape, and carries free-form metadata.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::io::{decode_prefix, encode};
use crate::numerics::{ParamSet, Tensor};

pub const INDEX_MAGIC: &[u8; 4] = b"M3IX";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub offset: usize,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Index {
    params: BTreeMap<String, IndexEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

pub fn encode_checkpoint(params: &ParamSet, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let total = params.scalar_count();
    if total == 0 {
        return Err(Error::Contract("cannot checkpoint an empty parameter set".into()));
    }
    let mut flat = Vec::with_capacity(total);
    let mut index = BTreeMap::new();
    let header = 4 + 4 + 4;
    for (name, t) in params.iter() {
        index.insert(
            name.clone(),
            IndexEntry {
                offset: header + 8 * flat.len(),
                shape: t.shape().to_vec(),
            },
        );
        flat.extend_from_slice(t.data());
    }
    let mut out = encode(&Tensor::new(vec![total], flat)?);
    let json = serde_json::to_vec(&Index {
        params: index,
        meta: meta.clone(),
    })?;
    out.extend_from_slice(&json);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(INDEX_MAGIC);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ParamSet, serde_json::Value)> {
    let n = bytes.len();
    if n < 12 || &bytes[n - 4..] != INDEX_MAGIC {
        return Err(Error::Format("missing checkpoint index trailer".into()));
    }
    let len = u64::from_le_bytes(bytes[n - 12..n - 4].try_into().unwrap()) as usize;
    let (flat, consumed) = decode_prefix(bytes)?;
    if consumed + len + 12 != n {
        return Err(Error::Format(format!(
            "index length {len} inconsistent with file size {n}"
        )));
    }
    let index: Index = serde_json::from_slice(&bytes[consumed..consumed + len])?;
    let mut params = ParamSet::new();
    for (name, e) in index.params {
        let count: usize = e.shape.iter().product();
        let end = e.offset + 8 * count;
        if e.offset < 12 || end > consumed || (e.offset - 12) % 8 != 0 {
            return Err(Error::Format(format!("parameter {name} lies outside the payload")));
        }
        let start = (e.offset - 12) / 8;
        let data = flat.data()[start..start + count].to_vec();
        params.insert(name, Tensor::new(e.shape, data)?);
    }
    Ok((params, index.meta))
}

pub fn save(path: &Path, params: &ParamSet, meta: &serde_json::Value) -> Result<()> {
    fs::write(path, encode_checkpoint(params, meta)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParamSet, serde_json::Value)> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::io::decode;

    fn sample() -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("expert.seg.w_q", Tensor::from_fn(&[3, 2], |i| i as f64 * 0.5 - 1.0));
        p.insert("static.logits", Tensor::new(vec![2], vec![0.25, -3.0]).unwrap());
        p.insert("a", Tensor::scalar(f64::MIN_POSITIVE));
        p
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let meta = serde_json::json!({"variant": "dynamic", "step": 10});
        let bytes = encode_checkpoint(&sample(), &meta).unwrap();
        let (p, m) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(p, sample());
        assert_eq!(m, meta);
    }

    #[test]
    fn prefix_is_a_plain_tensor_file() {
        let bytes = encode_checkpoint(&sample(), &serde_json::Value::Null).unwrap();
        let flat = decode(&bytes).unwrap();
        assert_eq!(flat.shape(), &[9]);
        // names are stored in sorted order: a, expert.seg.w_q, static.logits
        assert_eq!(flat.data()[0], f64::MIN_POSITIVE);
        assert_eq!(flat.data()[8], -3.0);
    }

    #[test]
    fn offsets_point_at_values() {
        let bytes = encode_checkpoint(&sample(), &serde_json::Value::Null).unwrap();
        let n = bytes.len();
        let len = u64::from_le_bytes(bytes[n - 12..n - 4].try_into().unwrap()) as usize;
        let json: serde_json::Value = serde_json::from_slice(&bytes[n - 12 - len..n - 12]).unwrap();
        let off = json["params"]["static.logits"]["offset"].as_u64().unwrap() as usize;
        assert_eq!(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()), 0.25);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = encode_checkpoint(&sample(), &serde_json::Value::Null).unwrap();
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_checkpoint(&bytes[4..]).is_err());
        assert!(encode_checkpoint(&ParamSet::new(), &serde_json::Value::Null).is_err());
    }
}
