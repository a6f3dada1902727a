//! Clip embedding files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "AJEPAEMB"
//! version  u32
//! source   u32 length + UTF-8 (checkpoint id the vectors came from)
//! count    u32
//! record   u16 id length + id, i64 label (-1 = none),
//!          u8 split (0 = train, 1 = test, 255 = none),
//!          u32 width, width × f32
//! crc32    u32 over every preceding byte
//! ```

use std::path::Path;

use ajepa_core::probe::EmbeddingSet;

use crate::error::{io_err, Error, Result};
use crate::fsutil;
use crate::manifest::Split;

pub const MAGIC: &[u8; 8] = b"AJEPAEMB";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    pub id: String,
    pub label: Option<usize>,
    pub split: Option<Split>,
    pub vector: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingFile {
    pub source: String,
    pub records: Vec<EmbeddingRecord>,
}

impl EmbeddingFile {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.source.len() as u32).to_le_bytes());
        out.extend_from_slice(self.source.as_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.id.len() as u16).to_le_bytes());
            out.extend_from_slice(r.id.as_bytes());
            let label = r.label.map_or(-1, |l| l as i64);
            out.extend_from_slice(&label.to_le_bytes());
            out.push(match r.split {
                Some(Split::Train) => 0,
                Some(Split::Test) => 1,
                None => 255,
            });
            out.extend_from_slice(&(r.vector.len() as u32).to_le_bytes());
            for v in &r.vector {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |message: String| Error::Corrupt {
            path: path.to_path_buf(),
            message,
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(corrupt("not an embedding file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::VersionMismatch {
                path: path.to_path_buf(),
                found: version,
                expected: VERSION,
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
            return Err(corrupt("checksum mismatch (file truncated or damaged)".into()));
        }
        let mut pos = 12;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = body
                .get(pos..pos + n)
                .ok_or_else(|| corrupt(format!("unexpected end of data at byte {pos}")))?;
            pos += n;
            Ok(s)
        };
        let text = |raw: &[u8]| String::from_utf8(raw.to_vec()).map_err(|_| corrupt("invalid UTF-8".into()));
        let n = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let source = text(take(n)?)?;
        let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut records = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let n = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
            let id = text(take(n)?)?;
            let label = i64::from_le_bytes(take(8)?.try_into().unwrap());
            let label = match label {
                -1 => None,
                l if l >= 0 => Some(l as usize),
                l => return Err(corrupt(format!("record `{id}` has label {l}"))),
            };
            let split = match take(1)?[0] {
                0 => Some(Split::Train),
                1 => Some(Split::Test),
                255 => None,
                s => return Err(corrupt(format!("record `{id}` has split code {s}"))),
            };
            let width = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
            let vector = take(width * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            records.push(EmbeddingRecord { id, label, split, vector });
        }
        if pos != body.len() {
            return Err(corrupt("trailing bytes after the last record".into()));
        }
        Ok(EmbeddingFile { source, records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, &self.encode())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::decode(&bytes, path)
    }

    /// Labeled records of one split as a probe input; rows without a split
    /// tag count as training data. Any record in the split without a label is
    /// an error.
    pub fn split_set(&self, split: Split) -> Result<EmbeddingSet> {
        let mut vectors = Vec::new();
        let mut labels = Vec::new();
        let mut ids = Vec::new();
        for r in self.records.iter().filter(|r| r.split.unwrap_or(Split::Train) == split) {
            let label = r
                .label
                .ok_or_else(|| Error::Config(format!("clip `{}` has no label; probing needs labels", r.id)))?;
            vectors.push(r.vector.clone());
            labels.push(label);
            ids.push(r.id.clone());
        }
        if vectors.is_empty() {
            return Err(Error::Config(format!("no {split} embeddings to probe")));
        }
        Ok(EmbeddingSet::new(vectors, labels, ids)?)
    }
}
