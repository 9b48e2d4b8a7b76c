// The container layout:
//
//   [ u64 LE header length N ][ N bytes of JSON header ][ raw tensor data ]
//
// The header maps tensor names to {"dtype", "shape", "data_offsets"}, with
// offsets relative to the start of the data region, plus an optional
// "__metadata__" object of string values.
//
// Writing is canonical: metadata first, then tensors sorted by name, with
// data laid out contiguously in the same order and no padding anywhere. Two
// writes of the same logical file are byte-identical.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::de::{Deserializer, MapAccess, Visitor};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::{element_count, DType, Tensor};

const METADATA_KEY: &str = "__metadata__";
const MAX_HEADER_LEN: u64 = 100 * 1024 * 1024;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub data_offsets: (usize, usize),
}

impl TensorEntry {
    pub fn byte_size(&self) -> usize {
        self.data_offsets.1 - self.data_offsets.0
    }
}

/// A parsed (or assembled) safetensors container.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SafetensorsFile {
    metadata: Option<BTreeMap<String, String>>,
    entries: BTreeMap<String, TensorEntry>,
    data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TensorInfo {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub byte_size: usize,
}

impl SafetensorsFile {
    pub fn new() -> Self {
        Self::default()
    }

    /// Assembles a file from named tensors, laying data out in name order.
    pub fn from_tensors<I, S>(metadata: Option<BTreeMap<String, String>>, tensors: I) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Tensor)>,
        S: Into<String>,
    {
        let mut named = BTreeMap::new();
        for (name, tensor) in tensors {
            let name = name.into();
            if name == METADATA_KEY {
                return Err(Error::HeaderEntry {
                    name,
                    reason: "reserved name".into(),
                });
            }
            if named.insert(name.clone(), tensor).is_some() {
                return Err(Error::DuplicateName(name));
            }
        }
        let mut entries = BTreeMap::new();
        let mut data = Vec::new();
        for (name, tensor) in named {
            let begin = data.len();
            data.extend_from_slice(tensor.bytes());
            entries.insert(
                name.clone(),
                TensorEntry {
                    name,
                    dtype: tensor.dtype(),
                    shape: tensor.shape().to_vec(),
                    data_offsets: (begin, data.len()),
                },
            );
        }
        Ok(Self {
            metadata,
            entries,
            data,
        })
    }

    /// Parses a complete container held in memory.
    pub fn parse(bytes: Vec<u8>) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::HeaderLength(format!(
                "file is {} bytes, shorter than the 8-byte length prefix",
                bytes.len()
            )));
        }
        let n = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        if n > MAX_HEADER_LEN || n > (bytes.len() - 8) as u64 {
            return Err(Error::HeaderLength(format!(
                "header length {n} does not fit in a {}-byte file",
                bytes.len()
            )));
        }
        let header_end = 8 + n as usize;
        let header = std::str::from_utf8(&bytes[8..header_end]).map_err(|e| Error::HeaderSyntax(e.to_string()))?;
        let raw: RawHeader = serde_json::from_str(header).map_err(|e| Error::HeaderSyntax(e.to_string()))?;

        let mut metadata = None;
        let mut entries = BTreeMap::new();
        for (name, value) in raw.0 {
            if name == METADATA_KEY {
                metadata = Some(parse_metadata(value)?);
                continue;
            }
            let entry = parse_entry(&name, value)?;
            entries.insert(name, entry);
        }

        let mut data = bytes;
        data.drain(..header_end);
        validate_layout(&entries, data.len())?;
        Ok(Self {
            metadata,
            entries,
            data,
        })
    }

    /// Canonical serialization.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut header = String::from("{");
        let mut first = true;
        if let Some(meta) = &self.metadata {
            header.push_str(&serde_json::to_string(METADATA_KEY)?);
            header.push(':');
            header.push_str(&serde_json::to_string(meta)?);
            first = false;
        }
        let mut offset = 0usize;
        for entry in self.entries.values() {
            check_entry(entry)?;
            let len = entry.byte_size();
            if !first {
                header.push(',');
            }
            first = false;
            header.push_str(&serde_json::to_string(&entry.name)?);
            header.push(':');
            header.push_str(&serde_json::to_string(&HeaderEntry {
                dtype: entry.dtype.as_str(),
                shape: &entry.shape,
                data_offsets: [offset, offset + len],
            })?);
            offset += len;
        }
        header.push('}');

        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for entry in self.entries.values() {
            out.extend_from_slice(&self.data[entry.data_offsets.0..entry.data_offsets.1]);
        }
        Ok(out)
    }

    pub fn metadata(&self) -> Option<&BTreeMap<String, String>> {
        self.metadata.as_ref()
    }

    pub fn set_metadata(&mut self, metadata: Option<BTreeMap<String, String>>) {
        self.metadata = metadata;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Entries in name order.
    pub fn entries(&self) -> impl Iterator<Item = &TensorEntry> {
        self.entries.values()
    }

    pub fn entry(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.get(name)
    }

    /// Borrowed payload of one tensor.
    pub fn tensor_bytes(&self, name: &str) -> Result<&[u8]> {
        let entry = self
            .entries
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        Ok(&self.data[entry.data_offsets.0..entry.data_offsets.1])
    }

    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        let entry = self
            .entries
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        Tensor::new(entry.dtype, entry.shape.clone(), self.tensor_bytes(name)?.to_vec())
    }

    /// Owned copies of every tensor, in name order.
    pub fn tensors(&self) -> Result<Vec<(String, Tensor)>> {
        self.entries
            .keys()
            .map(|name| Ok((name.clone(), self.tensor(name)?)))
            .collect()
    }
}

pub fn read_file(path: impl AsRef<Path>) -> Result<SafetensorsFile> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    SafetensorsFile::parse(bytes)
}

pub fn write_file(file: &SafetensorsFile, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = file.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn list_tensors(file: &SafetensorsFile) -> Vec<TensorInfo> {
    file.entries()
        .map(|e| TensorInfo {
            name: e.name.clone(),
            dtype: e.dtype,
            shape: e.shape.clone(),
            byte_size: element_count(&e.shape) * e.dtype.size(),
        })
        .collect()
}

#[derive(Serialize)]
struct HeaderEntry<'a> {
    dtype: &'static str,
    shape: &'a [usize],
    data_offsets: [usize; 2],
}

// Header keys in file order. serde_json's map types collapse duplicate keys,
// so the map is walked by hand.
struct RawHeader(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct HeaderVisitor;

        impl<'de> Visitor<'de> for HeaderVisitor {
            type Value = RawHeader;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<RawHeader, A::Error> {
                let mut seen = std::collections::HashSet::new();
                let mut out = Vec::new();
                while let Some((key, value)) = map.next_entry::<String, Value>()? {
                    if !seen.insert(key.clone()) {
                        return Err(serde::de::Error::custom(format!("duplicate key {key:?}")));
                    }
                    out.push((key, value));
                }
                Ok(RawHeader(out))
            }
        }

        deserializer.deserialize_map(HeaderVisitor)
    }
}

fn parse_metadata(value: Value) -> Result<BTreeMap<String, String>> {
    let Value::Object(map) = value else {
        return Err(Error::HeaderEntry {
            name: METADATA_KEY.into(),
            reason: "must be an object".into(),
        });
    };
    map.into_iter()
        .map(|(k, v)| match v {
            Value::String(s) => Ok((k, s)),
            _ => Err(Error::HeaderEntry {
                name: METADATA_KEY.into(),
                reason: format!("value for {k:?} is not a string"),
            }),
        })
        .collect()
}

fn parse_entry(name: &str, value: Value) -> Result<TensorEntry> {
    let bad = |reason: &str| Error::HeaderEntry {
        name: name.to_string(),
        reason: reason.to_string(),
    };
    let obj = value.as_object().ok_or_else(|| bad("must be an object"))?;
    let dtype = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| bad("missing dtype"))?;
    let dtype = match dtype {
        "F32" => DType::F32,
        "F16" => DType::F16,
        "BF16" => DType::BF16,
        other => return Err(Error::UnsupportedDType(other.to_string())),
    };
    let shape = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing shape"))?
        .iter()
        .map(|d| {
            d.as_u64()
                .map(|d| d as usize)
                .ok_or_else(|| bad("shape must hold non-negative integers"))
        })
        .collect::<Result<Vec<_>>>()?;
    let offsets = obj
        .get("data_offsets")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing data_offsets"))?;
    let [begin, end] = offsets.as_slice() else {
        return Err(bad("data_offsets must have two elements"));
    };
    let begin = begin.as_u64().ok_or_else(|| bad("invalid begin offset"))? as usize;
    let end = end.as_u64().ok_or_else(|| bad("invalid end offset"))? as usize;
    let entry = TensorEntry {
        name: name.to_string(),
        dtype,
        shape,
        data_offsets: (begin, end),
    };
    check_entry(&entry)?;
    Ok(entry)
}

fn check_entry(entry: &TensorEntry) -> Result<()> {
    let (begin, end) = entry.data_offsets;
    let expected = entry
        .shape
        .iter()
        .try_fold(entry.dtype.size(), |acc, &d| acc.checked_mul(d));
    if end < begin || expected != Some(end - begin) {
        return Err(Error::HeaderEntry {
            name: entry.name.clone(),
            reason: format!(
                "data_offsets [{begin}, {end}) do not match {} x {:?}",
                entry.dtype, entry.shape
            ),
        });
    }
    Ok(())
}

fn validate_layout(entries: &BTreeMap<String, TensorEntry>, data_len: usize) -> Result<()> {
    let mut spans: Vec<&TensorEntry> = entries.values().collect();
    spans.sort_by_key(|e| e.data_offsets);
    for e in &spans {
        if e.data_offsets.1 > data_len {
            return Err(Error::OutOfBounds {
                name: e.name.clone(),
                begin: e.data_offsets.0,
                end: e.data_offsets.1,
                len: data_len,
            });
        }
    }
    let non_empty: Vec<&&TensorEntry> = spans.iter().filter(|e| e.byte_size() > 0).collect();
    for pair in non_empty.windows(2) {
        if pair[1].data_offsets.0 < pair[0].data_offsets.1 {
            return Err(Error::Overlap {
                first: pair[0].name.clone(),
                second: pair[1].name.clone(),
            });
        }
    }
    let covered = spans.iter().map(|e| e.data_offsets.1).max().unwrap_or(0);
    if covered != data_len {
        return Err(Error::DataLength {
            expected: covered,
            actual: data_len,
        });
    }
    Ok(())
}
