//! FEDR embedding files.
//!
//! Little-endian layout:
//!
//! ```text
//! magic        4 bytes  "FEDR"
//! version      u16      1
//! d_in         u32
//! class_count  u32
//! record_count u64
//! class names  class_count × (u16 byte length, UTF-8 bytes)
//! records      record_count × (u32 label, d_in × f32)
//! ```
//!
//! A sibling `<stem>.json` manifest repeats the class names and carries the
//! provenance tag. The binary file is authoritative.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataError, EmbeddingDataset, EmbeddingRecord};

pub const MAGIC: [u8; 4] = *b"FEDR";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u16,
    pub d_in: usize,
    pub record_count: usize,
    pub class_names: Vec<String>,
    pub provenance: String,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn encode(ds: &EmbeddingDataset) -> Result<Vec<u8>, DataError> {
    let names_len: usize = ds.class_names().iter().map(|n| 2 + n.len()).sum();
    let mut out = Vec::with_capacity(22 + names_len + ds.len() * (4 + 4 * ds.d_in()));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.d_in() as u32).to_le_bytes());
    out.extend_from_slice(&(ds.n_classes() as u32).to_le_bytes());
    out.extend_from_slice(&(ds.len() as u64).to_le_bytes());
    for (i, name) in ds.class_names().iter().enumerate() {
        let len = u16::try_from(name.len())
            .map_err(|_| DataError::Config(format!("class name {i} exceeds 65535 bytes")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
    }
    for r in ds.records() {
        out.extend_from_slice(&r.label.to_le_bytes());
        for v in &r.vector {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], DataError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| DataError::Truncated(what.to_string()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &str) -> Result<[u8; N], DataError> {
        Ok(self.take(N, what)?.try_into().expect("exact length"))
    }
}

pub fn decode(buf: &[u8]) -> Result<EmbeddingDataset, DataError> {
    let mut c = Cursor { buf, pos: 0 };
    let magic: [u8; 4] = c.array("magic")?;
    if magic != MAGIC {
        return Err(DataError::BadMagic {
            expected: MAGIC,
            found: magic,
        });
    }
    let version = u16::from_le_bytes(c.array("version")?);
    if version != FORMAT_VERSION {
        return Err(DataError::Version {
            found: version,
            supported: FORMAT_VERSION,
        });
    }
    let d_in = u32::from_le_bytes(c.array("d_in")?) as usize;
    let class_count = u32::from_le_bytes(c.array("class_count")?) as usize;
    let record_count = u64::from_le_bytes(c.array("record_count")?) as usize;

    let mut class_names = Vec::with_capacity(class_count.min(1 << 16));
    for i in 0..class_count {
        let len = u16::from_le_bytes(c.array(&format!("class name {i} length"))?) as usize;
        let bytes = c.take(len, &format!("class name {i}"))?;
        let name = std::str::from_utf8(bytes).map_err(|_| DataError::ClassName(i))?;
        class_names.push(name.to_string());
    }

    let record_bytes = 4 + 4 * d_in;
    let remaining = buf.len() - c.pos;
    if record_count.saturating_mul(record_bytes) > remaining {
        return Err(DataError::Truncated(format!(
            "records ({record_count} declared, {} present)",
            remaining / record_bytes.max(1)
        )));
    }
    let mut records = Vec::with_capacity(record_count);
    for i in 0..record_count {
        let label = u32::from_le_bytes(c.array("record label")?);
        if label as usize >= class_count {
            return Err(DataError::LabelOutOfRange {
                record: i,
                label,
                class_count,
            });
        }
        let raw = c.take(4 * d_in, "record features")?;
        let vector = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        records.push(EmbeddingRecord { label, vector });
    }
    EmbeddingDataset::new(d_in, class_names, records, String::new())
}

/// Writes the binary file and its JSON manifest.
pub fn save_dataset(ds: &EmbeddingDataset, path: &Path) -> Result<(), DataError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode(ds)?)?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        d_in: ds.d_in(),
        record_count: ds.len(),
        class_names: ds.class_names().to_vec(),
        provenance: ds.provenance.clone(),
    };
    fs::write(manifest_path(path), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Reads a FEDR file. Provenance comes from the manifest when one exists.
pub fn load_dataset(path: &Path) -> Result<EmbeddingDataset, DataError> {
    let mut ds = decode(&fs::read(path)?)?;
    let mpath = manifest_path(path);
    if mpath.exists() {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(mpath)?)?;
        ds.provenance = manifest.provenance;
    }
    Ok(ds)
}
