//! LKW1 weight container.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "LKW1"
//! 4       8     header length H, u64 little-endian
//! 12      H     JSON header {"metadata": {...}, "tensors": {name: {dtype, shape, offset, length}}}
//! 12+H    P     payload: little-endian f32 tensor data, offsets relative to payload start
//! 12+H+P  4     CRC-32 (IEEE) of the payload, u32 little-endian
//! ```
//!
//! Tensor entries are keyed by name in the header (sorted, so serialization
//! is byte-stable); payload order follows insertion order. Weights are stored
//! as `f32` unless the container was created with [`Dtype::F64`].

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::numerics::{Activation, Layer, MlpParams, Tensor};

pub const MAGIC: &[u8; 4] = b"LKW1";
const PREFIX: usize = 4 + 8;
/// Refuse headers beyond this size; real ones are a few kilobytes.
const MAX_HEADER: u64 = 64 << 20;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    #[default]
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            TensorData::F32(_) => Dtype::F32,
            TensorData::F64(_) => Dtype::F64,
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(dtype: Dtype, bytes: &[u8]) -> Self {
        match dtype {
            Dtype::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            ),
            Dtype::F64 => TensorData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
            ),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub metadata: Value,
    dtype: Dtype,
    tensors: Vec<StoredTensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    metadata: Value,
    tensors: BTreeMap<String, Entry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    dtype: Dtype,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Corrupt(msg.into())
}

impl Container {
    pub fn new(metadata: Value) -> Self {
        Self::with_dtype(metadata, Dtype::F32)
    }

    /// Empty container whose [`push`](Self::push) stores `dtype` values.
    pub fn with_dtype(metadata: Value, dtype: Dtype) -> Self {
        Self {
            metadata,
            dtype,
            tensors: Vec::new(),
        }
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    /// Store `t` at the container's precision.
    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) -> Result<()> {
        let data = match self.dtype {
            Dtype::F32 => TensorData::F32(t.data().iter().map(|&v| v as f32).collect()),
            Dtype::F64 => TensorData::F64(t.data().to_vec()),
        };
        self.push_raw(name.into(), t.shape().to_vec(), data)
    }

    pub fn push_raw(&mut self, name: String, shape: Vec<usize>, data: TensorData) -> Result<()> {
        if self.tensors.iter().any(|t| t.name == name) {
            return Err(Error::Invalid(format!("duplicate tensor `{name}`")));
        }
        if shape.iter().product::<usize>() != data.len() || shape.is_empty() {
            return Err(Error::Shape(format!("tensor `{name}`: shape {shape:?} vs {} values", data.len())));
        }
        self.tensors.push(StoredTensor { name, shape, data });
        Ok(())
    }

    pub fn tensors(&self) -> &[StoredTensor] {
        &self.tensors
    }

    pub fn get_stored(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Widened copy of a stored tensor.
    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let st = self
            .get_stored(name)
            .ok_or_else(|| corrupt(format!("missing tensor `{name}`")))?;
        let t = Tensor::new(st.shape.clone(), st.data.to_f64())?;
        t.ensure_finite(name)?;
        Ok(t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = BTreeMap::new();
        let mut offset = 0u64;
        for t in &self.tensors {
            let length = (t.data.len() * t.data.dtype().size()) as u64;
            entries.insert(
                t.name.clone(),
                Entry {
                    dtype: t.data.dtype(),
                    shape: t.shape.clone(),
                    offset,
                    length,
                },
            );
            offset += length;
        }
        let header = serde_json::to_vec(&Header {
            metadata: self.metadata.clone(),
            tensors: entries,
        })?;
        let mut payload = Vec::with_capacity(offset as usize);
        for t in &self.tensors {
            t.data.write_le(&mut payload);
        }
        let mut out = Vec::with_capacity(PREFIX + header.len() + payload.len() + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < PREFIX + 4 {
            return Err(corrupt("file shorter than the fixed prefix"));
        }
        if &bytes[..4] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let hlen = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes"));
        if hlen > MAX_HEADER || hlen as usize > bytes.len() - PREFIX - 4 {
            return Err(corrupt(format!("header length {hlen} exceeds file size")));
        }
        let hend = PREFIX + hlen as usize;
        let payload = &bytes[hend..bytes.len() - 4];
        let expected = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let actual = crc32fast::hash(payload);
        if expected != actual {
            return Err(Error::Checksum { expected, actual });
        }
        let header: Header =
            serde_json::from_slice(&bytes[PREFIX..hend]).map_err(|e| corrupt(format!("header: {e}")))?;

        let mut spans: Vec<(u64, u64, String, Vec<usize>, Dtype)> = Vec::with_capacity(header.tensors.len());
        for (name, e) in header.tensors {
            let numel = e
                .shape
                .iter()
                .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
                .ok_or_else(|| corrupt(format!("tensor `{name}` shape overflows")))?;
            if e.shape.is_empty() || e.shape.contains(&0) {
                return Err(corrupt(format!("tensor `{name}` has an empty shape")));
            }
            if numel.checked_mul(e.dtype.size() as u64) != Some(e.length) {
                return Err(corrupt(format!("tensor `{name}` byte length disagrees with its shape")));
            }
            let end = e
                .offset
                .checked_add(e.length)
                .ok_or_else(|| corrupt(format!("tensor `{name}` span overflows")))?;
            if end > payload.len() as u64 {
                return Err(corrupt(format!("tensor `{name}` runs past the payload")));
            }
            spans.push((e.offset, end, name, e.shape, e.dtype));
        }
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(corrupt(format!("tensors `{}` and `{}` overlap", w[0].2, w[1].2)));
            }
        }
        let tensors: Vec<StoredTensor> = spans
            .into_iter()
            .map(|(start, end, name, shape, dtype)| StoredTensor {
                name,
                shape,
                data: TensorData::read_le(dtype, &payload[start as usize..end as usize]),
            })
            .collect();
        let dtype = if tensors.iter().any(|t| t.data.dtype() == Dtype::F64) { Dtype::F64 } else { Dtype::F32 };
        Ok(Self {
            metadata: header.metadata,
            dtype,
            tensors,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct LayerMeta {
    name: String,
    activation: Activation,
}

/// Container for a plain network: `{layer}.weight`, `{layer}.bias` tensors
/// and a `layers` list merged into `metadata`, which must be an object.
pub fn mlp_to_container(params: &MlpParams, metadata: Value) -> Result<Container> {
    mlp_to_container_as(params, metadata, Dtype::F32)
}

pub fn mlp_to_container_as(params: &MlpParams, mut metadata: Value, dtype: Dtype) -> Result<Container> {
    let layers: Vec<LayerMeta> = params
        .layers()
        .iter()
        .map(|l| LayerMeta {
            name: l.name.clone(),
            activation: l.activation,
        })
        .collect();
    metadata
        .as_object_mut()
        .ok_or_else(|| Error::Invalid("container metadata must be a JSON object".into()))?
        .insert("layers".into(), serde_json::to_value(layers)?);
    let mut c = Container::with_dtype(metadata, dtype);
    for l in params.layers() {
        c.push(format!("{}.weight", l.name), &l.weight)?;
        c.push(format!("{}.bias", l.name), &l.bias)?;
    }
    Ok(c)
}

/// Inverse of [`mlp_to_container`]; every problem is reported as corruption.
pub fn mlp_from_container(c: &Container) -> Result<MlpParams> {
    let layers: Vec<LayerMeta> = c
        .metadata
        .get("layers")
        .cloned()
        .ok_or_else(|| corrupt("metadata has no layer list"))
        .and_then(|v| serde_json::from_value(v).map_err(|e| corrupt(format!("layer list: {e}"))))?;
    layers
        .iter()
        .map(|l| {
            Layer::new(
                l.name.clone(),
                c.tensor(&format!("{}.weight", l.name))?,
                c.tensor(&format!("{}.bias", l.name))?,
                l.activation,
            )
        })
        .collect::<Result<Vec<_>>>()
        .and_then(MlpParams::new)
        .map_err(|e| match e {
            Error::Corrupt(_) => e,
            other => corrupt(other.to_string()),
        })
}

/// String field of a container's metadata, checked against `expected`.
pub fn expect_format(c: &Container, expected: &str) -> Result<()> {
    match c.metadata.get("format").and_then(Value::as_str) {
        Some(f) if f == expected => Ok(()),
        Some(f) => Err(corrupt(format!("expected a `{expected}` container, found `{f}`"))),
        None => Err(corrupt(format!("expected a `{expected}` container, metadata has no format"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn sample() -> Container {
        let mut c = Container::new(json!({"kind": "test", "n": 2}));
        c.push("w", &Tensor::matrix(2, 2, vec![1.0, -2.0, 0.5, 3.25]).unwrap()).unwrap();
        c.push("b", &Tensor::vector(vec![0.125, -7.0])).unwrap();
        c
    }

    #[test]
    fn roundtrip_is_byte_exact() {
        let bytes = sample().to_bytes().unwrap();
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back, sample());
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(&bytes[..4], b"LKW1");
    }

    #[test]
    fn every_single_bit_flip_in_the_payload_is_detected() {
        let bytes = sample().to_bytes().unwrap();
        let hlen = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        for pos in PREFIX + hlen..bytes.len() - 4 {
            for bit in 0..8 {
                let mut b = bytes.clone();
                b[pos] ^= 1 << bit;
                assert!(matches!(Container::from_bytes(&b), Err(Error::Checksum { .. })));
            }
        }
    }

    #[test]
    fn f64_tensors_roundtrip_without_narrowing() {
        let mut c = Container::with_dtype(json!({}), Dtype::F64);
        let t = Tensor::vector(vec![0.1, 1.0 / 3.0, -2e-300]);
        c.push("x", &t).unwrap();
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back.dtype(), Dtype::F64);
        assert_eq!(back.tensor("x").unwrap(), t);
        assert_eq!(back, c);
    }

    #[test]
    fn truncation_is_a_checksum_error() {
        let bytes = sample().to_bytes().unwrap();
        let r = Container::from_bytes(&bytes[..bytes.len() - 3]);
        assert!(matches!(r, Err(Error::Checksum { .. })), "{r:?}");
    }

    #[test]
    fn malformed_headers_are_rejected() {
        assert!(Container::from_bytes(b"LKW2\0\0\0\0\0\0\0\0\0\0\0\0").is_err());
        let mut b = sample().to_bytes().unwrap();
        b[4..12].copy_from_slice(&u64::MAX.to_le_bytes());
        assert!(matches!(Container::from_bytes(&b), Err(Error::Corrupt(_))));
    }

    #[test]
    fn overlapping_spans_are_rejected() {
        let header = br#"{"metadata":null,"tensors":{"a":{"dtype":"f32","shape":[2],"offset":0,"length":8},"b":{"dtype":"f32","shape":[1],"offset":4,"length":4}}}"#;
        let payload = [0u8; 8];
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&(header.len() as u64).to_le_bytes());
        b.extend_from_slice(header);
        b.extend_from_slice(&payload);
        b.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
        assert!(matches!(Container::from_bytes(&b), Err(Error::Corrupt(m)) if m.contains("overlap")));
    }
}
