use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RetrievalError;

/// Magic bytes opening a binary descriptor file.
pub const BINARY_MAGIC: &[u8; 4] = b"VPRD";

/// Tolerance on the L2 norm of a normalized descriptor.
pub const NORM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingFormat {
    Jsonl,
    Binary,
}

impl EmbeddingFormat {
    /// Picks a format from the file extension: `.jsonl`/`.json` → jsonl,
    /// anything else → binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => EmbeddingFormat::Jsonl,
            _ => EmbeddingFormat::Binary,
        }
    }
}

impl std::str::FromStr for EmbeddingFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "jsonl" => Ok(EmbeddingFormat::Jsonl),
            "binary" => Ok(EmbeddingFormat::Binary),
            other => Err(format!("unknown embedding format `{other}` (expected jsonl|binary)")),
        }
    }
}

/// Id → descriptor table with a fixed dimension.
///
/// Entries iterate in ascending id order. The set is immutable once built
/// and may be shared freely across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    dim: usize,
    entries: BTreeMap<String, Vec<f64>>,
}

impl DescriptorSet {
    pub fn new(dim: usize) -> Result<Self, RetrievalError> {
        if dim == 0 {
            return Err(RetrievalError::CorruptHeader("dimension must be positive".into()));
        }
        Ok(DescriptorSet {
            dim,
            entries: BTreeMap::new(),
        })
    }

    /// Builds a set from `(id, vector)` pairs without normalizing.
    pub fn from_entries<I, S>(dim: usize, entries: I) -> Result<Self, RetrievalError>
    where
        I: IntoIterator<Item = (S, Vec<f64>)>,
        S: Into<String>,
    {
        let mut set = DescriptorSet::new(dim)?;
        for (id, v) in entries {
            set.insert(id.into(), v)?;
        }
        Ok(set)
    }

    pub fn insert(&mut self, id: String, vector: Vec<f64>) -> Result<(), RetrievalError> {
        if vector.len() != self.dim {
            return Err(RetrievalError::DimMismatch {
                id,
                got: vector.len(),
                want: self.dim,
            });
        }
        if self.entries.contains_key(&id) {
            return Err(RetrievalError::DuplicateId(id));
        }
        self.entries.insert(id, vector);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.entries.get(id).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Scales every vector to unit L2 norm.
    pub fn normalize(&mut self) -> Result<(), RetrievalError> {
        for (id, v) in self.entries.iter_mut() {
            normalize_in_place(v).ok_or_else(|| RetrievalError::ZeroVector(id.clone()))?;
        }
        Ok(())
    }

    pub fn normalized(mut self) -> Result<Self, RetrievalError> {
        self.normalize()?;
        Ok(self)
    }

    pub fn write(&self, path: impl AsRef<Path>, format: EmbeddingFormat) -> Result<(), RetrievalError> {
        let path = path.as_ref();
        let bytes = match format {
            EmbeddingFormat::Jsonl => self.to_jsonl().into_bytes(),
            EmbeddingFormat::Binary => self.to_binary()?,
        };
        fs::write(path, bytes).map_err(|e| RetrievalError::io(path, e))
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (id, vector) in &self.entries {
            let line = JsonlRecord {
                id: id.clone(),
                vector: vector.clone(),
            };
            out.push_str(&serde_json::to_string(&line).expect("descriptor serializes"));
            out.push('\n');
        }
        out
    }

    /// Encodes in the binary layout: magic, u32 dim, u32 count, then per
    /// record a u16 id length, the UTF-8 id, and `dim` f32 values, all
    /// little-endian.
    pub fn to_binary(&self) -> Result<Vec<u8>, RetrievalError> {
        let dim = u32::try_from(self.dim)
            .map_err(|_| RetrievalError::CorruptHeader("dimension exceeds u32".into()))?;
        let count = u32::try_from(self.entries.len())
            .map_err(|_| RetrievalError::CorruptHeader("record count exceeds u32".into()))?;
        let mut out = Vec::with_capacity(12 + self.entries.len() * (2 + 8 + 4 * self.dim));
        out.extend_from_slice(BINARY_MAGIC);
        out.extend_from_slice(&dim.to_le_bytes());
        out.extend_from_slice(&count.to_le_bytes());
        for (id, vector) in &self.entries {
            let id_len = u16::try_from(id.len())
                .map_err(|_| RetrievalError::CorruptHeader(format!("id too long: {id}")))?;
            out.extend_from_slice(&id_len.to_le_bytes());
            out.extend_from_slice(id.as_bytes());
            for &x in vector {
                out.write_all(&(x as f32).to_le_bytes()).expect("vec write");
            }
        }
        Ok(out)
    }
}

/// Divides `v` by its L2 norm; returns `None` for a zero vector.
pub fn normalize_in_place(v: &mut [f64]) -> Option<()> {
    let norm = l2_norm(v);
    if norm == 0.0 || !norm.is_finite() {
        return None;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Some(())
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Serialize, Deserialize)]
struct JsonlRecord {
    id: String,
    vector: Vec<f64>,
}

/// Loads a descriptor file and L2-normalizes every vector.
pub fn load_embeddings(
    path: impl AsRef<Path>,
    format: EmbeddingFormat,
) -> Result<DescriptorSet, RetrievalError> {
    load_embeddings_raw(path, format)?.normalized()
}

/// Loads a descriptor file as stored, without normalization.
pub fn load_embeddings_raw(
    path: impl AsRef<Path>,
    format: EmbeddingFormat,
) -> Result<DescriptorSet, RetrievalError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| RetrievalError::io(path, e))?;
    match format {
        EmbeddingFormat::Jsonl => {
            let text = String::from_utf8(bytes).map_err(|e| RetrievalError::Parse {
                line: 0,
                message: e.to_string(),
            })?;
            parse_jsonl(&text)
        }
        EmbeddingFormat::Binary => parse_binary(&bytes),
    }
}

/// The dimension is taken from the first record. An empty document has no
/// dimension to report and is rejected.
pub fn parse_jsonl(text: &str) -> Result<DescriptorSet, RetrievalError> {
    let mut set: Option<DescriptorSet> = None;
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlRecord = serde_json::from_str(line).map_err(|e| RetrievalError::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        if rec.id.is_empty() {
            return Err(RetrievalError::Parse {
                line: idx + 1,
                message: "empty id".into(),
            });
        }
        let set = match &mut set {
            Some(s) => s,
            None => set.insert(DescriptorSet::new(rec.vector.len()).map_err(|_| {
                RetrievalError::DimMismatch {
                    id: rec.id.clone(),
                    got: 0,
                    want: 1,
                }
            })?),
        };
        set.insert(rec.id, rec.vector)?;
    }
    set.ok_or_else(|| RetrievalError::CorruptHeader("jsonl file has no records".into()))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], RetrievalError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            RetrievalError::CorruptHeader(format!("truncated file while reading {what}"))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16, RetrievalError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32, RetrievalError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn parse_binary(bytes: &[u8]) -> Result<DescriptorSet, RetrievalError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != BINARY_MAGIC {
        return Err(RetrievalError::CorruptHeader("bad magic bytes".into()));
    }
    let dim = r.u32("dimension")? as usize;
    let count = r.u32("record count")? as usize;
    let mut set = DescriptorSet::new(dim)?;
    for i in 0..count {
        let id_len = r.u16("id length")? as usize;
        let id = std::str::from_utf8(r.take(id_len, "id")?)
            .map_err(|_| RetrievalError::CorruptHeader(format!("record {i}: id is not UTF-8")))?
            .to_owned();
        if id.is_empty() {
            return Err(RetrievalError::CorruptHeader(format!("record {i}: empty id")));
        }
        let raw = r.take(4 * dim, "vector")?;
        let vector = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        set.insert(id, vector)?;
    }
    if r.pos != bytes.len() {
        return Err(RetrievalError::CorruptHeader(format!(
            "{} trailing bytes after {count} records",
            bytes.len() - r.pos
        )));
    }
    Ok(set)
}
