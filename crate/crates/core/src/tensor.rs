//! Named-tensor checkpoint files (`.pem.bin`) and backbone fingerprints.
//!
//! File layout:
//!
//! ```text
//! [0..8)        u64 little-endian header length N
//! [8..8+N)      UTF-8 JSON header
//! [8+N..)       data region, tensors packed back to back
//! ```
//!
//! The header maps `"__metadata__"` to a string map and every tensor name to
//! `{"data_offsets": [begin, end], "dtype": "F64", "shape": [..]}`, with
//! offsets relative to the start of the data region. Writers emit sorted keys
//! without whitespace and lay tensors out in lexicographic name order, so
//! rewriting a file that was read back reproduces it byte for byte.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde_json::{json, Map, Value};

use crate::error::{Error, FormatError, Result};

pub const FORMAT_VERSION: &str = "1";
pub const METADATA_KEY: &str = "__metadata__";
pub const FILE_EXTENSION: &str = ".pem.bin";

const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F64 => "F64",
        }
    }
}

impl FromStr for Dtype {
    type Err = ();

    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "F32" => Ok(Dtype::F32),
            "F64" => Ok(Dtype::F64),
            _ => Err(()),
        }
    }
}

/// One named tensor with its raw little-endian storage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorRecord {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    data: Vec<u8>,
}

impl TensorRecord {
    pub fn new(name: impl Into<String>, dtype: Dtype, shape: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        let record = TensorRecord {
            name: name.into(),
            dtype,
            shape,
            data,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn from_f64(name: impl Into<String>, shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self::new(name, Dtype::F64, shape, data)
    }

    pub fn from_f32(name: impl Into<String>, shape: Vec<usize>, values: &[f32]) -> Result<Self> {
        let data = values.iter().flat_map(|v| v.to_le_bytes()).collect();
        Self::new(name, Dtype::F32, shape, data)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dtype(&self) -> Dtype {
        self.dtype
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    /// Values widened to `f64` regardless of storage dtype.
    pub fn to_f64(&self) -> Vec<f64> {
        match self.dtype {
            Dtype::F64 => self
                .data
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            Dtype::F32 => self
                .data
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        }
    }

    fn validate(&self) -> Result<()> {
        validate_name(&self.name)?;
        if self.shape.contains(&0) {
            return Err(Error::InvalidCheckpoint(format!(
                "tensor {:?} has a zero dimension in shape {:?}",
                self.name, self.shape
            )));
        }
        let expected = self.numel() * self.dtype.width();
        if self.data.len() != expected {
            return Err(Error::InvalidCheckpoint(format!(
                "tensor {:?}: buffer is {} bytes, shape {:?} as {} needs {}",
                self.name,
                self.data.len(),
                self.shape,
                self.dtype.as_str(),
                expected
            )));
        }
        Ok(())
    }
}

fn validate_name(name: &str) -> Result<()> {
    if name.is_empty() {
        return Err(Error::InvalidCheckpoint("empty tensor name".into()));
    }
    if name == METADATA_KEY {
        return Err(Error::InvalidCheckpoint(format!("{METADATA_KEY} is reserved")));
    }
    if name.chars().any(char::is_control) {
        return Err(Error::InvalidCheckpoint(format!(
            "tensor name {name:?} contains a control character"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CheckpointKind {
    Base,
    Lora,
    Ia3,
}

impl CheckpointKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CheckpointKind::Base => "base",
            CheckpointKind::Lora => "lora",
            CheckpointKind::Ia3 => "ia3",
        }
    }
}

impl fmt::Display for CheckpointKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CheckpointKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(CheckpointKind::Base),
            "lora" => Ok(CheckpointKind::Lora),
            "ia3" => Ok(CheckpointKind::Ia3),
            other => Err(Error::Invalid(format!(
                "unknown kind {other:?} (expected base, lora or ia3)"
            ))),
        }
    }
}

/// String metadata carried in the file header.
///
/// Required keys: `format_version`, `kind`, `base_fingerprint`, `trait`,
/// `rank`. Extra keys (resolved configs, seeds, provenance) are allowed.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CheckpointMetadata(BTreeMap<String, String>);

impl CheckpointMetadata {
    pub const REQUIRED: [&'static str; 5] = ["format_version", "kind", "base_fingerprint", "trait", "rank"];

    pub fn new(kind: CheckpointKind, base_fingerprint: &str, trait_label: &str, rank: usize) -> Self {
        let mut map = BTreeMap::new();
        map.insert("format_version".to_owned(), FORMAT_VERSION.to_owned());
        map.insert("kind".to_owned(), kind.as_str().to_owned());
        map.insert("base_fingerprint".to_owned(), base_fingerprint.to_owned());
        map.insert("trait".to_owned(), trait_label.to_owned());
        map.insert("rank".to_owned(), rank.to_string());
        CheckpointMetadata(map)
    }

    pub fn from_map(map: BTreeMap<String, String>) -> Self {
        CheckpointMetadata(map)
    }

    pub fn as_map(&self) -> &BTreeMap<String, String> {
        &self.0
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn insert(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.0.insert(key.into(), value.into());
    }

    pub fn kind(&self) -> Result<CheckpointKind> {
        self.required("kind")?.parse()
    }

    pub fn base_fingerprint(&self) -> Result<&str> {
        self.required("base_fingerprint")
    }

    pub fn trait_label(&self) -> Result<&str> {
        self.required("trait")
    }

    pub fn rank(&self) -> Result<usize> {
        let raw = self.required("rank")?;
        raw.parse()
            .map_err(|_| Error::InvalidCheckpoint(format!("rank {raw:?} is not a decimal integer")))
    }

    fn required(&self, key: &str) -> Result<&str> {
        self.get(key)
            .ok_or_else(|| Error::InvalidCheckpoint(format!("missing metadata key {key:?}")))
    }

    pub fn validate(&self) -> Result<()> {
        for key in Self::REQUIRED {
            self.required(key)?;
        }
        self.kind()?;
        self.rank()?;
        let fp = self.base_fingerprint()?;
        if !is_fingerprint(fp) {
            return Err(Error::InvalidCheckpoint(format!(
                "base_fingerprint {fp:?} is not 16 lowercase hex characters"
            )));
        }
        Ok(())
    }
}

pub fn is_fingerprint(s: &str) -> bool {
    s.len() == 16 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

/// Metadata plus a name-keyed set of tensors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Checkpoint {
    pub metadata: CheckpointMetadata,
    tensors: BTreeMap<String, TensorRecord>,
}

impl Checkpoint {
    pub fn new(metadata: CheckpointMetadata) -> Self {
        Checkpoint {
            metadata,
            tensors: BTreeMap::new(),
        }
    }

    /// Adds a tensor, rejecting duplicate names.
    pub fn insert(&mut self, record: TensorRecord) -> Result<()> {
        if self.tensors.contains_key(record.name()) {
            return Err(Error::InvalidCheckpoint(format!(
                "duplicate tensor name {:?}",
                record.name()
            )));
        }
        self.tensors.insert(record.name().to_owned(), record);
        Ok(())
    }

    pub fn insert_f64(&mut self, name: &str, shape: Vec<usize>, values: &[f64]) -> Result<()> {
        self.insert(TensorRecord::from_f64(name, shape, values)?)
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.get(name)
    }

    /// Looks up a tensor and checks its shape, returning its values as `f64`.
    pub fn values(&self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let record = self
            .get(name)
            .ok_or_else(|| Error::InvalidCheckpoint(format!("missing tensor {name:?}")))?;
        if record.shape() != shape {
            return Err(Error::InvalidCheckpoint(format!(
                "tensor {name:?} has shape {:?}, expected {:?}",
                record.shape(),
                shape
            )));
        }
        Ok(record.to_f64())
    }

    pub fn tensors(&self) -> &BTreeMap<String, TensorRecord> {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        self.metadata.validate()?;
        for record in self.tensors.values() {
            record.validate()?;
        }
        Ok(())
    }

    /// Fingerprint over every tensor whose name does not start with `head.`.
    pub fn backbone_fingerprint(&self) -> String {
        fingerprint(self.tensors.values().filter(|t| !t.name().starts_with("head.")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut header = Map::new();
        let meta: Map<String, Value> = self
            .metadata
            .as_map()
            .iter()
            .map(|(k, v)| (k.clone(), Value::String(v.clone())))
            .collect();
        header.insert(METADATA_KEY.to_owned(), Value::Object(meta));
        let mut offset = 0usize;
        for record in self.tensors.values() {
            let end = offset + record.bytes().len();
            header.insert(
                record.name().to_owned(),
                json!({
                    "dtype": record.dtype().as_str(),
                    "shape": record.shape(),
                    "data_offsets": [offset, end],
                }),
            );
            offset = end;
        }
        // serde_json maps are BTreeMaps here, so keys come out sorted.
        let header = serde_json::to_string(&Value::Object(header))
            .map_err(|e| Error::InvalidCheckpoint(format!("header encoding failed: {e}")))?;
        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for record in self.tensors.values() {
            out.extend_from_slice(record.bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(FormatError::Truncated { len: bytes.len() }.into());
        }
        let declared = u64::from_le_bytes(bytes[..8].try_into().unwrap());
        let available = bytes.len() - 8;
        if declared > available as u64 {
            return Err(FormatError::HeaderTooLarge { declared, available }.into());
        }
        let header_end = 8 + declared as usize;
        let header: Value = serde_json::from_slice(&bytes[8..header_end])
            .map_err(|e| FormatError::MalformedHeader(e.to_string()))?;
        let Value::Object(header) = header else {
            return Err(FormatError::MalformedHeader("header is not a JSON object".into()).into());
        };
        let data = &bytes[header_end..];

        let mut metadata = BTreeMap::new();
        let mut entries = Vec::new();
        for (name, value) in header {
            if name == METADATA_KEY {
                let Value::Object(map) = value else {
                    return Err(malformed(format!("{METADATA_KEY} is not an object")));
                };
                for (k, v) in map {
                    let Value::String(v) = v else {
                        return Err(malformed(format!("metadata value for {k:?} is not a string")));
                    };
                    metadata.insert(k, v);
                }
                continue;
            }
            entries.push(parse_entry(name, &value)?);
        }

        entries.sort_by_key(|e| (e.begin, e.end));
        if let Some(e) = entries.iter().find(|e| e.end > data.len()) {
            return Err(FormatError::OutOfBounds {
                name: e.name.clone(),
                end: e.end,
                len: data.len(),
            }
            .into());
        }
        for pair in entries.windows(2) {
            if pair[1].begin < pair[0].end {
                return Err(FormatError::OffsetOverlap {
                    first: pair[0].name.clone(),
                    second: pair[1].name.clone(),
                }
                .into());
            }
        }
        let mut cursor = 0usize;
        for e in &entries {
            if e.begin != cursor {
                return Err(FormatError::NotDense(format!(
                    "tensor {:?} starts at {} but previous data ends at {}",
                    e.name, e.begin, cursor
                ))
                .into());
            }
            cursor = e.end;
        }
        if cursor != data.len() {
            return Err(FormatError::NotDense(format!(
                "{} trailing bytes after the last tensor",
                data.len() - cursor
            ))
            .into());
        }

        let mut ckpt = Checkpoint::new(CheckpointMetadata::from_map(metadata));
        for e in entries {
            let record = TensorRecord::new(e.name, e.dtype, e.shape, data[e.begin..e.end].to_vec())?;
            ckpt.insert(record)?;
        }
        ckpt.metadata.validate()?;
        Ok(ckpt)
    }
}

fn malformed(msg: String) -> Error {
    FormatError::MalformedHeader(msg).into()
}

struct Entry {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    begin: usize,
    end: usize,
}

fn parse_entry(name: String, value: &Value) -> Result<Entry> {
    let obj = value
        .as_object()
        .ok_or_else(|| malformed(format!("entry {name:?} is not an object")))?;
    let dtype_str = obj
        .get("dtype")
        .and_then(Value::as_str)
        .ok_or_else(|| malformed(format!("entry {name:?} has no string dtype")))?;
    let dtype = dtype_str.parse::<Dtype>().map_err(|_| FormatError::UnknownDtype {
        name: name.clone(),
        dtype: dtype_str.to_owned(),
    })?;
    let shape = obj
        .get("shape")
        .and_then(Value::as_array)
        .ok_or_else(|| malformed(format!("entry {name:?} has no shape array")))?
        .iter()
        .map(|d| d.as_u64().map(|d| d as usize))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| malformed(format!("entry {name:?} has a non-integer dimension")))?;
    let offsets = obj
        .get("data_offsets")
        .and_then(Value::as_array)
        .filter(|a| a.len() == 2)
        .and_then(|a| Some((a[0].as_u64()? as usize, a[1].as_u64()? as usize)))
        .ok_or_else(|| malformed(format!("entry {name:?} needs data_offsets [begin, end]")))?;
    let (begin, end) = offsets;
    if end < begin {
        return Err(malformed(format!("entry {name:?} has end before begin")));
    }
    let expected = shape.iter().product::<usize>() * dtype.width();
    if end - begin != expected {
        return Err(FormatError::SizeMismatch {
            name,
            expected,
            actual: end - begin,
        }
        .into());
    }
    Ok(Entry {
        name,
        dtype,
        shape,
        begin,
        end,
    })
}

pub fn write_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.to_bytes()?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// FNV-1a 64 over each tensor in name order: name, `0x00`, shape as
/// `AxBxC`, `0x00`, raw data bytes.
pub fn fingerprint<'a>(tensors: impl IntoIterator<Item = &'a TensorRecord>) -> String {
    let mut sorted: Vec<&TensorRecord> = tensors.into_iter().collect();
    sorted.sort_by(|a, b| a.name().cmp(b.name()));
    let mut hasher = Fnv1a::new();
    for t in sorted {
        hasher.update(t.name().as_bytes());
        hasher.update(&[0]);
        let shape = t.shape().iter().map(usize::to_string).collect::<Vec<_>>().join("x");
        hasher.update(shape.as_bytes());
        hasher.update(&[0]);
        hasher.update(t.bytes());
    }
    format!("{:016x}", hasher.finish())
}

struct Fnv1a(u64);

impl Fnv1a {
    fn new() -> Self {
        Fnv1a(FNV_OFFSET_BASIS)
    }

    fn update(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}
