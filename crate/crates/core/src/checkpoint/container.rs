//! Binary checkpoint container.
//!
//! Layout: an 8-byte little-endian header length `H`, then `H` bytes of UTF-8
//! JSON, then the raw data buffer. The header maps each tensor name to
//! `{"dtype", "shape", "data_offsets"}` with offsets relative to the start of
//! the data buffer. The optional `__metadata__` entry holds string annotations.

use std::collections::BTreeMap;

use serde_json::{Map, Value};

use super::CheckpointError;

const METADATA_KEY: &str = "__metadata__";
const SOURCE_ID_KEY: &str = "source_id";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size_in_bytes(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F64 => "F64",
        }
    }

    fn from_tag(tag: &str) -> Result<Self, CheckpointError> {
        match tag {
            "F32" => Ok(Dtype::F32),
            "F64" => Ok(Dtype::F64),
            other => Err(CheckpointError::UnsupportedDtype(other.to_string())),
        }
    }

    /// Rounds a value to what this dtype can store.
    pub fn quantize(self, v: f64) -> f64 {
        match self {
            Dtype::F32 => v as f32 as f64,
            Dtype::F64 => v,
        }
    }
}

/// One named parameter array. Values are kept as `f64` regardless of the
/// storage dtype; `F32` records only ever hold `f32`-representable values.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    dtype: Dtype,
    values: Vec<f64>,
}

impl TensorRecord {
    pub fn new(
        name: impl Into<String>,
        shape: Vec<usize>,
        dtype: Dtype,
        values: Vec<f64>,
    ) -> Result<Self, CheckpointError> {
        let name = name.into();
        if name.is_empty() {
            return Err(CheckpointError::InvalidRecord("empty tensor name".into()));
        }
        let numel = shape_numel(&shape)
            .ok_or_else(|| CheckpointError::InvalidRecord(format!("{name}: shape overflows")))?;
        if numel != values.len() {
            return Err(CheckpointError::InvalidRecord(format!(
                "{name}: shape {shape:?} holds {numel} values, got {}",
                values.len()
            )));
        }
        let values = match dtype {
            Dtype::F32 => values.into_iter().map(|v| Dtype::F32.quantize(v)).collect(),
            Dtype::F64 => values,
        };
        Ok(Self { name, shape, dtype, values })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Same name, shape and dtype with new values (rounded to the dtype).
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self, CheckpointError> {
        Self::new(self.name.clone(), self.shape.clone(), self.dtype, values)
    }
}

pub(crate) fn shape_numel(shape: &[usize]) -> Option<usize> {
    shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

/// All parameter arrays of one checkpoint, kept in canonical (lexicographic)
/// name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TensorMap {
    source_id: String,
    metadata: BTreeMap<String, String>,
    records: Vec<TensorRecord>,
}

impl TensorMap {
    pub fn new(
        source_id: impl Into<String>,
        records: Vec<TensorRecord>,
    ) -> Result<Self, CheckpointError> {
        let mut records = records;
        records.sort_by(|a, b| a.name.cmp(&b.name));
        if let Some(pair) = records.windows(2).find(|w| w[0].name == w[1].name) {
            return Err(CheckpointError::DuplicateName(pair[0].name.clone()));
        }
        if records.iter().any(|r| r.name == METADATA_KEY) {
            return Err(CheckpointError::InvalidRecord(format!("{METADATA_KEY} is reserved")));
        }
        Ok(Self { source_id: source_id.into(), metadata: BTreeMap::new(), records })
    }

    pub fn with_metadata(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        let key = key.into();
        if key == SOURCE_ID_KEY {
            self.source_id = value.into();
        } else {
            self.metadata.insert(key, value.into());
        }
        self
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn set_source_id(&mut self, id: impl Into<String>) {
        self.source_id = id.into();
    }

    /// Annotations other than `source_id`.
    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn metadata_mut(&mut self) -> &mut BTreeMap<String, String> {
        &mut self.metadata
    }

    pub fn records(&self) -> &[TensorRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.records
            .binary_search_by(|r| r.name.as_str().cmp(name))
            .ok()
            .map(|i| &self.records[i])
    }

    pub fn parameter_count(&self) -> usize {
        self.records.iter().map(TensorRecord::numel).sum()
    }

    /// `(name, shape)` pairs in canonical order.
    pub fn shape_list(&self) -> Vec<(String, Vec<usize>)> {
        self.records.iter().map(|r| (r.name.clone(), r.shape.clone())).collect()
    }

    /// Flat concatenation of all values in canonical order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.records.iter().flat_map(|r| r.values.iter().copied()).collect()
    }

    /// Rebuilds the map with the same names, shapes and dtypes from a flat
    /// value vector laid out like [`TensorMap::flat_values`].
    pub fn with_flat_values(&self, flat: &[f64]) -> Result<Self, CheckpointError> {
        if flat.len() != self.parameter_count() {
            return Err(CheckpointError::InvalidRecord(format!(
                "expected {} values, got {}",
                self.parameter_count(),
                flat.len()
            )));
        }
        let mut offset = 0;
        let mut records = Vec::with_capacity(self.records.len());
        for r in &self.records {
            let n = r.numel();
            records.push(r.with_values(flat[offset..offset + n].to_vec())?);
            offset += n;
        }
        Ok(Self { source_id: self.source_id.clone(), metadata: self.metadata.clone(), records })
    }
}

/// Decodes a container byte buffer. Never reads outside `bytes`.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<TensorMap, CheckpointError> {
    if bytes.len() < 8 {
        return Err(CheckpointError::MalformedHeader("buffer shorter than 8 bytes".into()));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|h| h.checked_add(8))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| {
            CheckpointError::MalformedHeader(format!(
                "header length {header_len} exceeds buffer of {} bytes",
                bytes.len()
            ))
        })?;
    let header: Map<String, Value> = serde_json::from_slice(&bytes[8..header_end])
        .map_err(|e| CheckpointError::MalformedHeader(e.to_string()))?;
    let data = &bytes[header_end..];

    let mut source_id = String::new();
    let mut metadata = BTreeMap::new();
    let mut regions: Vec<(usize, usize, String)> = Vec::new();
    let mut records = Vec::new();

    for (name, entry) in &header {
        if name == METADATA_KEY {
            let obj = entry
                .as_object()
                .ok_or_else(|| CheckpointError::MalformedHeader("__metadata__ not an object".into()))?;
            for (k, v) in obj {
                let v = v.as_str().ok_or_else(|| {
                    CheckpointError::MalformedHeader(format!("metadata value for {k} not a string"))
                })?;
                if k == SOURCE_ID_KEY {
                    source_id = v.to_string();
                } else {
                    metadata.insert(k.clone(), v.to_string());
                }
            }
            continue;
        }
        let obj = entry
            .as_object()
            .ok_or_else(|| CheckpointError::MalformedHeader(format!("{name}: entry not an object")))?;
        let dtype = obj
            .get("dtype")
            .and_then(Value::as_str)
            .ok_or_else(|| CheckpointError::MalformedHeader(format!("{name}: missing dtype")))?;
        let dtype = Dtype::from_tag(dtype)?;
        let shape = obj
            .get("shape")
            .and_then(Value::as_array)
            .ok_or_else(|| CheckpointError::MalformedHeader(format!("{name}: missing shape")))?
            .iter()
            .map(|d| d.as_u64().and_then(|d| usize::try_from(d).ok()))
            .collect::<Option<Vec<usize>>>()
            .ok_or_else(|| CheckpointError::MalformedHeader(format!("{name}: bad shape entry")))?;
        let offsets = obj
            .get("data_offsets")
            .and_then(Value::as_array)
            .filter(|a| a.len() == 2)
            .and_then(|a| {
                let b = usize::try_from(a[0].as_u64()?).ok()?;
                let e = usize::try_from(a[1].as_u64()?).ok()?;
                Some((b, e))
            })
            .ok_or_else(|| CheckpointError::MalformedHeader(format!("{name}: bad data_offsets")))?;
        let (begin, end) = offsets;
        if begin > end || end > data.len() {
            return Err(CheckpointError::OffsetOverlap(format!(
                "{name}: region [{begin}, {end}) outside data buffer of {} bytes",
                data.len()
            )));
        }
        let numel = shape_numel(&shape)
            .ok_or_else(|| CheckpointError::MalformedHeader(format!("{name}: shape overflows")))?;
        let expected = numel
            .checked_mul(dtype.size_in_bytes())
            .ok_or_else(|| CheckpointError::MalformedHeader(format!("{name}: shape overflows")))?;
        if end - begin != expected {
            return Err(CheckpointError::MalformedHeader(format!(
                "{name}: region holds {} bytes, shape {shape:?} needs {expected}",
                end - begin
            )));
        }
        let raw = &data[begin..end];
        let values: Vec<f64> = match dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        regions.push((begin, end, name.clone()));
        records.push(
            TensorRecord::new(name.clone(), shape, dtype, values)
                .map_err(|e| CheckpointError::MalformedHeader(e.to_string()))?,
        );
    }

    // Empty regions occupy no bytes and cannot overlap anything.
    regions.retain(|(b, e, _)| e > b);
    regions.sort();
    let mut furthest: Option<(usize, &str)> = None;
    for (begin, end, name) in &regions {
        if let Some((prev_end, prev)) = furthest {
            if *begin < prev_end {
                return Err(CheckpointError::OffsetOverlap(format!("{prev} and {name} overlap")));
            }
        }
        if furthest.is_none_or(|(e, _)| *end > e) {
            furthest = Some((*end, name));
        }
    }

    let mut map = TensorMap::new(source_id, records)?;
    map.metadata = metadata;
    Ok(map)
}

/// Serializes a map into the container format. Records are laid out
/// contiguously in canonical order; the header is space-padded to a multiple
/// of 8 bytes.
pub fn write_checkpoint(map: &TensorMap) -> Vec<u8> {
    let mut header = Map::new();
    let mut meta = Map::new();
    if !map.source_id.is_empty() {
        meta.insert(SOURCE_ID_KEY.into(), Value::String(map.source_id.clone()));
    }
    for (k, v) in &map.metadata {
        meta.insert(k.clone(), Value::String(v.clone()));
    }
    if !meta.is_empty() {
        header.insert(METADATA_KEY.into(), Value::Object(meta));
    }

    let mut offset = 0usize;
    for r in &map.records {
        let len = r.numel() * r.dtype.size_in_bytes();
        let mut entry = Map::new();
        entry.insert("dtype".into(), Value::String(r.dtype.tag().into()));
        entry.insert("shape".into(), Value::from(r.shape.clone()));
        entry.insert("data_offsets".into(), Value::from(vec![offset, offset + len]));
        header.insert(r.name.clone(), Value::Object(entry));
        offset += len;
    }

    let mut header_bytes = serde_json::to_vec(&Value::Object(header)).expect("json map serializes");
    while !header_bytes.len().is_multiple_of(8) {
        header_bytes.push(b' ');
    }

    let mut out = Vec::with_capacity(8 + header_bytes.len() + offset);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for r in &map.records {
        match r.dtype {
            Dtype::F32 => r.values.iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
            Dtype::F64 => r.values.iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    out
}

pub fn read_checkpoint_file(path: &std::path::Path) -> Result<TensorMap, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|e| CheckpointError::Io(path.display().to_string(), e))?;
    parse_checkpoint(&bytes)
}

pub fn write_checkpoint_file(path: &std::path::Path, map: &TensorMap) -> Result<(), CheckpointError> {
    std::fs::write(path, write_checkpoint(map)).map_err(|e| CheckpointError::Io(path.display().to_string(), e))
}
