//! Single-file tensor container in the safetensors layout.
//!
//! ```text
//! [u64 little-endian header length L][L bytes of JSON header][raw little-endian data]
//! ```
//!
//! The header is a JSON object with one entry per tensor,
//! `{"dtype": "U8" | "F32" | "F64", "shape": [...], "data_offsets": [begin, end]}`,
//! plus an optional `"__metadata__"` string map. Keys are written in sorted order
//! and the header is space-padded to a multiple of 8 bytes, so equal contents
//! always produce identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::{json, Value};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    U8,
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> &'static str {
        match self {
            DType::U8 => "U8",
            DType::F32 => "F32",
            DType::F64 => "F64",
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    fn parse(tag: &str) -> Option<Self> {
        match tag {
            "U8" => Some(DType::U8),
            "F32" => Some(DType::F32),
            "F64" => Some(DType::F64),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawTensor {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl RawTensor {
    pub fn u8(shape: Vec<usize>, data: Vec<u8>) -> Self {
        RawTensor {
            dtype: DType::U8,
            shape,
            bytes: data,
        }
    }

    pub fn f32(shape: Vec<usize>, data: &[f32]) -> Self {
        RawTensor {
            dtype: DType::F32,
            shape,
            bytes: data.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    pub fn f64(shape: Vec<usize>, data: &[f64]) -> Self {
        RawTensor {
            dtype: DType::F64,
            shape,
            bytes: data.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self.dtype {
            DType::U8 => self.bytes.iter().map(|&b| b as f64).collect(),
            DType::F32 => self.to_f32().into_iter().map(f64::from).collect(),
            DType::F64 => self
                .bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        }
    }
}

/// Named tensors plus string metadata.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub tensors: BTreeMap<String, RawTensor>,
    pub metadata: BTreeMap<String, String>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: RawTensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn tensor(&self, name: &str) -> Result<&RawTensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::format(name, "missing tensor"))
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::format(key, "missing metadata entry"))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = serde_json::Map::new();
        if !self.metadata.is_empty() {
            let meta: serde_json::Map<String, Value> = self
                .metadata
                .iter()
                .map(|(k, v)| (k.clone(), Value::String(v.clone())))
                .collect();
            header.insert("__metadata__".into(), Value::Object(meta));
        }
        let mut offset = 0usize;
        for (name, t) in &self.tensors {
            let end = offset + t.bytes.len();
            header.insert(
                name.clone(),
                json!({ "dtype": t.dtype.tag(), "shape": t.shape, "data_offsets": [offset, end] }),
            );
            offset = end;
        }
        // serde_json's Map is a BTreeMap without the `preserve_order` feature: keys come out sorted.
        let mut text = serde_json::to_string(&Value::Object(header)).expect("header serializes");
        while !text.len().is_multiple_of(8) {
            text.push(' ');
        }
        let mut out = Vec::with_capacity(8 + text.len() + offset);
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        for t in self.tensors.values() {
            out.extend_from_slice(&t.bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::format("header", "file shorter than the 8-byte length prefix"));
        }
        let len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let body = bytes
            .get(8..8usize.saturating_add(len))
            .ok_or_else(|| Error::format("header", format!("declared header length {len} exceeds file")))?;
        let header: Value = serde_json::from_slice(body)
            .map_err(|e| Error::format("header", format!("invalid JSON: {e}")))?;
        let Value::Object(map) = header else {
            return Err(Error::format("header", "header is not a JSON object"));
        };
        let data = &bytes[8 + len..];
        let mut out = Container::new();
        let mut covered = 0usize;
        for (name, entry) in map {
            if name == "__metadata__" {
                let Value::Object(meta) = entry else {
                    return Err(Error::format("__metadata__", "not an object"));
                };
                for (k, v) in meta {
                    let Value::String(s) = v else {
                        return Err(Error::format(k, "metadata value is not a string"));
                    };
                    out.metadata.insert(k, s);
                }
                continue;
            }
            let dtype = entry
                .get("dtype")
                .and_then(Value::as_str)
                .and_then(DType::parse)
                .ok_or_else(|| Error::format(&name, "missing or unknown dtype"))?;
            let shape: Vec<usize> = entry
                .get("shape")
                .and_then(Value::as_array)
                .ok_or_else(|| Error::format(&name, "missing shape"))?
                .iter()
                .map(|v| v.as_u64().map(|d| d as usize))
                .collect::<Option<_>>()
                .ok_or_else(|| Error::format(&name, "shape entries must be non-negative integers"))?;
            let offs = entry
                .get("data_offsets")
                .and_then(Value::as_array)
                .filter(|a| a.len() == 2)
                .and_then(|a| Some((a[0].as_u64()? as usize, a[1].as_u64()? as usize)))
                .ok_or_else(|| Error::format(&name, "data_offsets must be [begin, end]"))?;
            let expected = shape.iter().product::<usize>() * dtype.size();
            if offs.1 < offs.0 || offs.1 - offs.0 != expected {
                return Err(Error::format(
                    &name,
                    format!("byte range {:?} does not match shape {shape:?}", offs),
                ));
            }
            let slice = data.get(offs.0..offs.1).ok_or_else(|| {
                Error::format(&name, format!("data range {:?} past end of file (truncated?)", offs))
            })?;
            covered = covered.max(offs.1);
            out.tensors.insert(
                name,
                RawTensor {
                    dtype,
                    shape,
                    bytes: slice.to_vec(),
                },
            );
        }
        if covered != data.len() {
            return Err(Error::format(
                "data",
                format!("{} trailing bytes after the last tensor", data.len() - covered),
            ));
        }
        Ok(out)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// `key = value` lines, sorted, one per line.
pub fn encode_kv<'a>(pairs: impl IntoIterator<Item = (&'a str, String)>) -> String {
    let sorted: BTreeMap<&str, String> = pairs.into_iter().collect();
    sorted
        .into_iter()
        .map(|(k, v)| format!("{k} = {v}\n"))
        .collect()
}

pub fn decode_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format("meta", format!("line {} is not `key = value`", i + 1)))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new();
        c.insert("frames", RawTensor::u8(vec![2, 3], vec![1, 2, 3, 4, 5, 255]));
        c.insert("centers", RawTensor::f32(vec![1, 2], &[0.25, 0.75]));
        c.metadata.insert("meta".into(), "seed = 3\n".into());
        c
    }

    #[test]
    fn roundtrip_is_exact_and_deterministic() {
        let c = sample();
        let bytes = c.to_bytes();
        assert_eq!(bytes, sample().to_bytes());
        assert_eq!(Container::from_bytes(&bytes).unwrap(), c);
        let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        assert_eq!(header_len % 8, 0);
    }

    #[test]
    fn truncation_names_the_field() {
        let bytes = sample().to_bytes();
        let err = Container::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        match err {
            Error::Format { field, .. } => assert_eq!(field, "frames"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(Container::from_bytes(&bytes[..5]).is_err());
    }

    #[test]
    fn kv_roundtrip() {
        let text = encode_kv([("b", "2".to_string()), ("a", "x y".to_string())]);
        assert_eq!(text, "a = x y\nb = 2\n");
        let back = decode_kv(&text).unwrap();
        assert_eq!(back["a"], "x y");
    }
}
