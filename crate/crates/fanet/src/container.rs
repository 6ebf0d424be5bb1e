//! Binary tensor container used for checkpoints and feature imports.
//!
//! Layout, little-endian throughout:
//!   magic "FANT" | version u32 | entry count u32
//!   per entry: name len u32, name bytes (UTF-8), dtype u8 (0 = f32,
//!   1 = f64), rank u32, extents u32 each, row-major payload
//!   trailing CRC-32 over every byte after the 12-byte header
//!
//! f32 entries are converted to f64 on read; writing f32 is lossy and
//! intended only for smaller checkpoint files.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FANT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

/// One named tensor. Data is held as f64 in memory regardless of the
/// on-disk dtype.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Entry {
    pub fn f64(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Self {
        Entry {
            name: name.into(),
            dtype: Dtype::F64,
            shape,
            data,
        }
    }

    pub fn scalar(name: impl Into<String>, value: f64) -> Self {
        Entry::f64(name, vec![1], vec![value])
    }
}

pub fn write_container(path: &Path, entries: &[Entry]) -> Result<()> {
    let mut body = Vec::new();
    for e in entries {
        let numel: usize = e.shape.iter().product();
        if numel != e.data.len() {
            return Err(Error::Invalid(format!(
                "container entry '{}': {} values for shape {:?}",
                e.name,
                e.data.len(),
                e.shape
            )));
        }
        body.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        body.extend_from_slice(e.name.as_bytes());
        body.push(match e.dtype {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        });
        body.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &ext in &e.shape {
            body.extend_from_slice(&(ext as u32).to_le_bytes());
        }
        match e.dtype {
            Dtype::F32 => {
                for &v in &e.data {
                    body.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            Dtype::F64 => {
                for &v in &e.data {
                    body.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    let mut out = Vec::with_capacity(12 + body.len() + 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
    fs::write(path, out)?;
    Ok(())
}

struct Cursor<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Cursor<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CorruptContainer(format!(
                "truncated at byte {} (wanted {} more)",
                self.pos, n
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

pub fn read_container(path: &Path) -> Result<Vec<Entry>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 16 {
        return Err(Error::CorruptContainer(format!(
            "{}: file too short ({} bytes)",
            path.display(),
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::CorruptContainer(format!(
            "{}: bad magic {:02x?}",
            path.display(),
            &bytes[0..4]
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::CorruptContainer(format!(
            "{}: unsupported format version {version} (expected {FORMAT_VERSION})",
            path.display()
        )));
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;

    let body = &bytes[12..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let actual_crc = crc32fast::hash(body);
    if stored_crc != actual_crc {
        return Err(Error::CorruptContainer(format!(
            "{}: CRC mismatch (stored {stored_crc:08x}, computed {actual_crc:08x})",
            path.display()
        )));
    }

    let mut cur = Cursor { buf: body, pos: 0 };
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::CorruptContainer("entry name is not UTF-8".into()))?
            .to_string();
        let dtype = match cur.u8()? {
            0 => Dtype::F32,
            1 => Dtype::F64,
            other => {
                return Err(Error::CorruptContainer(format!(
                    "entry '{name}': unknown dtype tag {other}"
                )))
            }
        };
        let rank = cur.u32()? as usize;
        if rank > 8 {
            return Err(Error::CorruptContainer(format!(
                "entry '{name}': implausible rank {rank}"
            )));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = match dtype {
            Dtype::F32 => {
                let raw = cur.take(numel * 4)?;
                raw.chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect()
            }
            Dtype::F64 => {
                let raw = cur.take(numel * 8)?;
                raw.chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect()
            }
        };
        entries.push(Entry {
            name,
            dtype,
            shape,
            data,
        });
    }
    if cur.pos != body.len() {
        return Err(Error::CorruptContainer(format!(
            "{} trailing bytes after last entry",
            body.len() - cur.pos
        )));
    }
    Ok(entries)
}

/// Find an entry by name.
pub fn lookup<'e>(entries: &'e [Entry], name: &str) -> Option<&'e Entry> {
    entries.iter().find(|e| e.name == name)
}
