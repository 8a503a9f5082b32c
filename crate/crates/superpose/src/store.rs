//! Safetensors checkpoints.
//!
//! Layout: an 8-byte little-endian header length, a UTF-8 JSON header mapping
//! tensor names to `{dtype, shape, data_offsets}`, then the data buffer.
//! Offsets are relative to the start of the buffer. `F32`, `F16` and `BF16`
//! tensors are read; 16-bit values are widened to `f32` on read.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use half::{bf16, f16};
use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};

/// Largest header accepted on read (100 MB, as in the reference loader).
const MAX_HEADER_LEN: u64 = 100_000_000;

/// Tags the format defines but this crate does not decode.
const KNOWN_UNSUPPORTED: &[&str] =
    &["BOOL", "U8", "I8", "I16", "U16", "I32", "U32", "I64", "U64", "F64", "F8_E4M3", "F8_E5M2"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dtype {
    F32,
    F16,
    BF16,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 | Dtype::BF16 => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F16 => "F16",
            Dtype::BF16 => "BF16",
        }
    }

    fn parse(tag: &str, tensor: &str) -> Result<Self> {
        match tag {
            "F32" => Ok(Dtype::F32),
            "F16" => Ok(Dtype::F16),
            "BF16" => Ok(Dtype::BF16),
            t if KNOWN_UNSUPPORTED.contains(&t) => Err(Error::Dtype(format!("tensor {tensor}: unsupported dtype {t}"))),
            t => Err(Error::Format(format!("tensor {tensor}: unknown dtype tag {t:?}"))),
        }
    }

    fn decode(self, bytes: &[u8]) -> Vec<f32> {
        match self {
            Dtype::F32 => bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect(),
            Dtype::F16 => bytes.chunks_exact(2).map(|b| f16::from_le_bytes([b[0], b[1]]).to_f32()).collect(),
            Dtype::BF16 => bytes.chunks_exact(2).map(|b| bf16::from_le_bytes([b[0], b[1]]).to_f32()).collect(),
        }
    }

    fn encode(self, values: &[f32], out: &mut Vec<u8>) {
        out.reserve(values.len() * self.size());
        match self {
            Dtype::F32 => values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Dtype::F16 => values.iter().for_each(|v| out.extend_from_slice(&f16::from_f32(*v).to_le_bytes())),
            Dtype::BF16 => values.iter().for_each(|v| out.extend_from_slice(&bf16::from_f32(*v).to_le_bytes())),
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One named tensor with its values widened to `f32`.
///
/// `dtype` records the on-disk element type the values came from (or should
/// be narrowed to when written with [`WriteOptions::keep_dtype`]).
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
    pub data: Vec<f32>,
}

impl TensorRecord {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let record = Self { name: name.into(), shape, dtype: Dtype::F32, data };
        record.validate()?;
        Ok(record)
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::Schema("tensor name is empty".into()));
        }
        if self.numel() != self.data.len() {
            return Err(Error::Shape(format!(
                "tensor {}: shape {:?} holds {} elements but {} were given",
                self.name,
                self.shape,
                self.numel(),
                self.data.len()
            )));
        }
        Ok(())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|v| f64::from(*v)).collect()
    }
}

/// Header entry of one stored tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorInfo {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    /// Byte range within the data buffer.
    pub offsets: (u64, u64),
}

impl TensorInfo {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Deserialize)]
struct RawEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

/// JSON object kept as an ordered list so duplicate keys can be detected.
struct RawHeader(Vec<(String, serde_json::Value)>);

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct Entries;
        impl<'de> Visitor<'de> for Entries {
            type Value = RawHeader;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object of tensor entries")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<RawHeader, A::Error> {
                let mut out = Vec::new();
                while let Some(entry) = map.next_entry::<String, serde_json::Value>()? {
                    out.push(entry);
                }
                Ok(RawHeader(out))
            }
        }
        d.deserialize_map(Entries)
    }
}

type Header = (BTreeMap<String, TensorInfo>, Option<BTreeMap<String, String>>);

fn parse_header(bytes: &[u8], buffer_len: u64) -> Result<Header> {
    let text = std::str::from_utf8(bytes).map_err(|e| Error::Format(format!("header is not UTF-8: {e}")))?;
    let RawHeader(entries) =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("header is not valid JSON: {e}")))?;

    let mut tensors = BTreeMap::new();
    let mut metadata = None;
    for (name, value) in entries {
        if name == "__metadata__" {
            let meta: BTreeMap<String, String> = serde_json::from_value(value)
                .map_err(|e| Error::Format(format!("__metadata__ must map strings to strings: {e}")))?;
            metadata = Some(meta);
            continue;
        }
        if name.is_empty() {
            return Err(Error::Format("empty tensor name in header".into()));
        }
        let raw: RawEntry =
            serde_json::from_value(value).map_err(|e| Error::Format(format!("tensor {name}: malformed entry: {e}")))?;
        let dtype = Dtype::parse(&raw.dtype, &name)?;
        let [start, end] = raw.data_offsets;
        let numel = raw
            .shape
            .iter()
            .try_fold(1u64, |acc, d| acc.checked_mul(*d as u64))
            .ok_or_else(|| Error::Format(format!("tensor {name}: shape overflows")))?;
        if end < start || end - start != numel * dtype.size() as u64 {
            return Err(Error::Format(format!(
                "tensor {name}: offsets {start}..{end} do not match shape {:?} of {dtype}",
                raw.shape
            )));
        }
        if end > buffer_len {
            return Err(Error::Format(format!(
                "tensor {name}: data ends at byte {end} but the buffer holds {buffer_len} (truncated file?)"
            )));
        }
        let info = TensorInfo { dtype, shape: raw.shape, offsets: (start, end) };
        if tensors.insert(name.clone(), info).is_some() {
            return Err(Error::Format(format!("duplicate tensor name {name}")));
        }
    }

    let mut spans: Vec<(u64, u64, &str)> =
        tensors.iter().map(|(n, i)| (i.offsets.0, i.offsets.1, n.as_str())).collect();
    spans.sort_unstable();
    for pair in spans.windows(2) {
        if pair[1].0 < pair[0].1 {
            return Err(Error::Format(format!("tensors {} and {} overlap", pair[0].2, pair[1].2)));
        }
    }
    Ok((tensors, metadata))
}

/// An opened checkpoint. Only the header is read up front; tensor data is
/// read on demand.
#[derive(Debug)]
pub struct Checkpoint {
    path: PathBuf,
    file: Mutex<File>,
    data_start: u64,
    tensors: BTreeMap<String, TensorInfo>,
    metadata: Option<BTreeMap<String, String>>,
}

impl Checkpoint {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let file_len = file.metadata().map_err(|e| Error::io(&path, e))?.len();
        if file_len < 8 {
            return Err(Error::Format(format!("{}: file too short for a header", path.display())));
        }
        let mut len_bytes = [0u8; 8];
        file.read_exact(&mut len_bytes).map_err(|e| Error::io(&path, e))?;
        let header_len = u64::from_le_bytes(len_bytes);
        if header_len > MAX_HEADER_LEN || header_len > file_len - 8 {
            return Err(Error::Format(format!("{}: header length {header_len} exceeds the file", path.display())));
        }
        let mut header = vec![0u8; header_len as usize];
        file.read_exact(&mut header).map_err(|e| Error::io(&path, e))?;
        let data_start = 8 + header_len;
        let (tensors, metadata) = parse_header(&header, file_len - data_start).map_err(|e| prefix_path(e, &path))?;
        Ok(Self { path, file: Mutex::new(file), data_start, tensors, metadata })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Tensor names in sorted order.
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn info(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.get(name)
    }

    pub fn infos(&self) -> impl Iterator<Item = (&str, &TensorInfo)> {
        self.tensors.iter().map(|(n, i)| (n.as_str(), i))
    }

    pub fn metadata(&self) -> Option<&BTreeMap<String, String>> {
        self.metadata.as_ref()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn read(&self, name: &str) -> Result<TensorRecord> {
        let info = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Schema(format!("tensor {name} not found in {}", self.path.display())))?;
        let (start, end) = info.offsets;
        let mut bytes = vec![0u8; (end - start) as usize];
        {
            let mut file = self.file.lock().unwrap_or_else(|p| p.into_inner());
            file.seek(SeekFrom::Start(self.data_start + start))
                .and_then(|_| file.read_exact(&mut bytes))
                .map_err(|e| Error::io(&self.path, e))?;
        }
        Ok(TensorRecord {
            name: name.to_string(),
            shape: info.shape.clone(),
            dtype: info.dtype,
            data: info.dtype.decode(&bytes),
        })
    }

    pub fn read_all(&self) -> Result<Vec<TensorRecord>> {
        self.names().map(|n| self.read(n)).collect()
    }
}

fn prefix_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Dtype(m) => Error::Dtype(format!("{}: {m}", path.display())),
        other => other,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WriteOptions {
    /// Store each tensor in its record's dtype instead of `F32`.
    pub keep_dtype: bool,
}

/// Name, shape and on-disk dtype of a tensor about to be written.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorPlan {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: Dtype,
}

/// Streams tensors into a checkpoint whose header is fixed up front.
///
/// Tensors must be supplied in plan order.
pub struct CheckpointWriter {
    path: PathBuf,
    out: BufWriter<File>,
    plan: Vec<TensorPlan>,
    next: usize,
    scratch: Vec<u8>,
}

impl CheckpointWriter {
    pub fn create(path: impl AsRef<Path>, plan: Vec<TensorPlan>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut seen = HashSet::new();
        for p in &plan {
            if p.name.is_empty() {
                return Err(Error::Schema("tensor name is empty".into()));
            }
            if !seen.insert(p.name.as_str()) {
                return Err(Error::Schema(format!("duplicate tensor name {}", p.name)));
            }
        }

        let mut header = serde_json::Map::new();
        let mut offset = 0u64;
        for p in &plan {
            let bytes = (p.shape.iter().product::<usize>() * p.dtype.size()) as u64;
            header.insert(
                p.name.clone(),
                serde_json::json!({
                    "dtype": p.dtype.as_str(),
                    "shape": p.shape,
                    "data_offsets": [offset, offset + bytes],
                }),
            );
            offset += bytes;
        }
        let mut text = serde_json::to_string(&header).map_err(|e| Error::Format(e.to_string()))?;
        while (8 + text.len()) % 8 != 0 {
            text.push(' ');
        }

        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::new(file);
        out.write_all(&(text.len() as u64).to_le_bytes())
            .and_then(|_| out.write_all(text.as_bytes()))
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self { path, out, plan, next: 0, scratch: Vec::new() })
    }

    pub fn write(&mut self, record: &TensorRecord) -> Result<()> {
        let Some(expected) = self.plan.get(self.next) else {
            return Err(Error::Schema(format!("tensor {} is not part of the plan", record.name)));
        };
        if expected.name != record.name || expected.shape != record.shape {
            return Err(Error::Schema(format!(
                "expected tensor {} {:?} next, got {} {:?}",
                expected.name, expected.shape, record.name, record.shape
            )));
        }
        record.validate()?;
        self.scratch.clear();
        expected.dtype.encode(&record.data, &mut self.scratch);
        self.out.write_all(&self.scratch).map_err(|e| Error::io(&self.path, e))?;
        self.next += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        if self.next != self.plan.len() {
            return Err(Error::Schema(format!("checkpoint closed after {} of {} tensors", self.next, self.plan.len())));
        }
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Writes `tensors` in the given order. Name collisions are reported before
/// the file is created.
pub fn write_checkpoint(
    path: impl AsRef<Path>,
    tensors: impl IntoIterator<Item = TensorRecord>,
    options: WriteOptions,
) -> Result<()> {
    let records: Vec<TensorRecord> = tensors.into_iter().collect();
    for r in &records {
        r.validate()?;
    }
    let plan = records
        .iter()
        .map(|r| TensorPlan {
            name: r.name.clone(),
            shape: r.shape.clone(),
            dtype: if options.keep_dtype { r.dtype } else { Dtype::F32 },
        })
        .collect();
    let mut writer = CheckpointWriter::create(path, plan)?;
    for r in &records {
        writer.write(r)?;
    }
    writer.finish()
}

/// Dense `lora_scale * (B A)` for factors `B: m x k` and `A: k x n`.
pub fn materialize_lora_delta(
    a_factor: &TensorRecord,
    b_factor: &TensorRecord,
    lora_scale: f32,
) -> Result<TensorRecord> {
    let (&[k_a, n], &[m, k_b]) = (a_factor.shape.as_slice(), b_factor.shape.as_slice()) else {
        return Err(Error::Shape(format!(
            "LoRA factors must be 2-D, got A {:?} ({}) and B {:?} ({})",
            a_factor.shape, a_factor.name, b_factor.shape, b_factor.name
        )));
    };
    if k_a != k_b {
        return Err(Error::Shape(format!(
            "LoRA inner dimensions differ: B {} is {m}x{k_b}, A {} is {k_a}x{n}",
            b_factor.name, a_factor.name
        )));
    }
    let scale = f64::from(lora_scale);
    let mut data = Vec::with_capacity(m * n);
    let mut row = vec![0.0f64; n];
    for i in 0..m {
        row.fill(0.0);
        for k in 0..k_a {
            let b = f64::from(b_factor.data[i * k_a + k]);
            let a_row = &a_factor.data[k * n..(k + 1) * n];
            for (out, a) in row.iter_mut().zip(a_row) {
                *out += b * f64::from(*a);
            }
        }
        data.extend(row.iter().map(|v| (scale * v) as f32));
    }
    let name = b_factor.name.replace(".lora_B.weight", ".weight").replace(".lora_B", "");
    TensorRecord::new(name, vec![m, n], data)
}
