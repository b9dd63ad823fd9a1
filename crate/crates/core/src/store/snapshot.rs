//! Versioned binary embedding snapshots.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "LMES"
//! format     u16      FORMAT_VERSION
//! dim        u32
//! count      u64
//! version    10 bytes ASCII YYYY-MM-DD
//! index      count x { key_len u32, key UTF-8 bytes, offset u64 }
//! payload    count x dim x f32
//! checksum   u64      FNV-1a over every preceding byte
//! ```
//!
//! Index entries are sorted by key bytes; `offset` is the byte position of
//! the record's vector relative to the start of the payload.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::embedgen::{validate_version, MetaEmbedding};
use crate::error::{Error, Result};
use crate::seeds::fnv1a;

pub const MAGIC: &[u8; 4] = b"LMES";
pub const FORMAT_VERSION: u16 = 1;
const VERSION_LEN: usize = 10;
/// Header plus trailing checksum.
pub const FIXED_OVERHEAD: usize = 4 + 2 + 4 + 8 + VERSION_LEN + 8;
/// Per-record index bytes besides the key itself.
pub const INDEX_ENTRY_OVERHEAD: usize = 4 + 8;

/// Immutable set of embeddings sharing one version and dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSnapshot {
    version: String,
    dim: usize,
    keys: Vec<String>,
    vectors: Vec<Vec<f32>>,
}

impl EmbeddingSnapshot {
    /// Builds a snapshot; records are sorted by key, duplicates rejected.
    pub fn new(version: impl Into<String>, dim: usize, records: Vec<(String, Vec<f32>)>) -> Result<Self> {
        let version = version.into();
        validate_version(&version)?;
        if u32::try_from(dim).is_err() {
            return Err(Error::Config(format!("embedding dim {dim} too large")));
        }
        let mut sorted = BTreeMap::new();
        for (key, v) in records {
            if v.len() != dim {
                return Err(Error::LengthMismatch {
                    expected: dim,
                    got: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("embedding of `{key}`")));
            }
            if sorted.insert(key.clone(), v).is_some() {
                return Err(Error::Data(format!("duplicate task key `{key}`")));
            }
        }
        let (keys, vectors) = sorted.into_iter().unzip();
        Ok(Self {
            version,
            dim,
            keys,
            vectors,
        })
    }

    pub fn from_embeddings(version: &str, dim: usize, embeddings: &[MetaEmbedding]) -> Result<Self> {
        Self::new(
            version,
            dim,
            embeddings
                .iter()
                .map(|e| (e.task_key.clone(), e.vector.clone()))
                .collect(),
        )
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn records(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.keys
            .iter()
            .map(String::as_str)
            .zip(self.vectors.iter().map(Vec::as_slice))
    }

    /// Binary search over the sorted keys.
    pub fn lookup(&self, key: &str) -> Option<&[f32]> {
        self.keys
            .binary_search_by(|k| k.as_str().cmp(key))
            .ok()
            .map(|i| self.vectors[i].as_slice())
    }

    /// Element-wise mean of every stored vector (zeros when empty).
    pub fn mean_vector(&self) -> Vec<f64> {
        let mut acc = vec![0.0f64; self.dim];
        for v in &self.vectors {
            for (a, x) in acc.iter_mut().zip(v) {
                *a += f64::from(*x);
            }
        }
        if !self.vectors.is_empty() {
            let n = self.vectors.len() as f64;
            acc.iter_mut().for_each(|a| *a /= n);
        }
        acc
    }

    /// Bytes of the encoded file.
    pub fn encoded_len(&self) -> usize {
        FIXED_OVERHEAD
            + self
                .keys
                .iter()
                .map(|k| INDEX_ENTRY_OVERHEAD + k.len() + self.dim * 4)
                .sum::<usize>()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.keys.len() as u64).to_le_bytes());
        out.extend_from_slice(self.version.as_bytes());
        for (i, k) in self.keys.iter().enumerate() {
            out.extend_from_slice(&(k.len() as u32).to_le_bytes());
            out.extend_from_slice(k.as_bytes());
            out.extend_from_slice(&((i * self.dim * 4) as u64).to_le_bytes());
        }
        for v in &self.vectors {
            for x in v {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let sum = fnv1a(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    /// Parses an encoded snapshot; `origin` names the source in errors.
    pub fn decode(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |reason: String| Error::format(origin, reason);
        if bytes.len() < FIXED_OVERHEAD {
            return Err(bad(format!("truncated: {} bytes", bytes.len())));
        }
        if &bytes[..4] != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        let mut r = Reader { buf: body, pos: 4 };
        let format = r.u16().map_err(&bad)?;
        if format != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {format}")));
        }
        if fnv1a(body) != stored {
            return Err(bad("checksum mismatch".into()));
        }
        let dim = r.u32().map_err(&bad)? as usize;
        let count = usize::try_from(r.u64().map_err(&bad)?).map_err(|_| bad("count too large".into()))?;
        let version = String::from_utf8(r.take(VERSION_LEN).map_err(&bad)?.to_vec())
            .map_err(|_| bad("version is not UTF-8".into()))?;
        validate_version(&version).map_err(|e| bad(e.to_string()))?;
        let mut keys = Vec::with_capacity(count.min(body.len()));
        let mut offsets = Vec::with_capacity(count.min(body.len()));
        for _ in 0..count {
            let len = r.u32().map_err(&bad)? as usize;
            let key = std::str::from_utf8(r.take(len).map_err(&bad)?)
                .map_err(|_| bad("key is not UTF-8".into()))?
                .to_string();
            keys.push(key);
            offsets.push(r.u64().map_err(&bad)?);
        }
        if keys.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad("index keys not strictly sorted".into()));
        }
        let payload = &body[r.pos..];
        let record_bytes = dim * 4;
        let expected = count.checked_mul(record_bytes);
        if expected != Some(payload.len()) {
            return Err(bad(format!(
                "payload is {} bytes, expected {count} records of {record_bytes}",
                payload.len()
            )));
        }
        let mut vectors = Vec::with_capacity(count);
        for (i, off) in offsets.iter().enumerate() {
            if *off != (i * record_bytes) as u64 {
                return Err(bad(format!("record {i} has offset {off}")));
            }
            let start = i * record_bytes;
            let v: Vec<f32> = payload[start..start + record_bytes]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if v.iter().any(|x| !x.is_finite()) {
                return Err(bad(format!("non-finite value in record `{}`", keys[i])));
            }
            vectors.push(v);
        }
        Ok(Self {
            version,
            dim,
            keys,
            vectors,
        })
    }

    /// `task_key \t version \t v0,v1,...` per record; floats in shortest
    /// round-trip form.
    pub fn export_tsv(&self, mut out: impl Write) -> Result<()> {
        for (k, v) in self.records() {
            let values: Vec<String> = v.iter().map(f32::to_string).collect();
            writeln!(out, "{k}\t{}\t{}", self.version, values.join(","))?;
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        if self.buf.len() - self.pos < n {
            return Err(format!("truncated at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory
/// and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn write_snapshot(snapshot: &EmbeddingSnapshot, path: &Path) -> Result<()> {
    write_atomic(path, &snapshot.encode())
}

pub fn read_snapshot(path: &Path) -> Result<EmbeddingSnapshot> {
    let bytes = fs::read(path)?;
    EmbeddingSnapshot::decode(&bytes, path)
}
