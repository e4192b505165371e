//! Versioned binary model snapshots.
//!
//! Layout:
//!
//! ```text
//! magic        8 bytes   "INCDSNAP"
//! version      u32 LE    currently 1
//! header_len   u64 LE
//! header       JSON      {"version", "arch", "labels", "arrays": [{"name", "shape", "len"}]}
//! payload      f64 LE    arrays concatenated in header order
//! ```
//!
//! Reading and writing are bit-exact.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ArchConfig, DetectorModel};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"INCDSNAP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub version: u32,
    pub arch: ArchConfig,
    pub labels: Vec<String>,
    pub arrays: Vec<ArrayEntry>,
}

fn array_entries(model: &DetectorModel) -> Vec<ArrayEntry> {
    let names = model.parameter_names();
    let mut entries = Vec::with_capacity(names.len());
    let mut names = names.into_iter();
    for conv in model.convs() {
        entries.push(ArrayEntry {
            name: names.next().expect("name per array"),
            shape: vec![conv.out_channels, conv.in_channels, conv.kernel, conv.kernel],
            len: conv.weight.len(),
        });
        entries.push(ArrayEntry {
            name: names.next().expect("name per array"),
            shape: vec![conv.out_channels],
            len: conv.bias.len(),
        });
    }
    entries
}

pub fn to_bytes(model: &DetectorModel) -> Vec<u8> {
    let header = SnapshotHeader {
        version: FORMAT_VERSION,
        arch: model.arch.clone(),
        labels: model.labels.clone(),
        arrays: array_entries(model),
    };
    let header_json = serde_json::to_vec(&header).expect("header serialises");
    let params = model.flat_parameters();
    let mut out = Vec::with_capacity(20 + header_json.len() + params.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for v in params {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Snapshot("truncated snapshot".into()))?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

pub fn read_header(bytes: &[u8]) -> Result<(SnapshotHeader, usize)> {
    let mut pos = 0;
    if take(bytes, &mut pos, 8)? != MAGIC {
        return Err(Error::Snapshot("bad magic".into()));
    }
    let version = u32::from_le_bytes(take(bytes, &mut pos, 4)?.try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Snapshot(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(take(bytes, &mut pos, 8)?.try_into().expect("8 bytes")) as usize;
    let header: SnapshotHeader = serde_json::from_slice(take(bytes, &mut pos, header_len)?)?;
    if header.version != version {
        return Err(Error::Snapshot("header version disagrees with preamble".into()));
    }
    Ok((header, pos))
}

pub fn from_bytes(bytes: &[u8]) -> Result<DetectorModel> {
    let (header, mut pos) = read_header(bytes)?;
    // Structure is rebuilt from the header, then overwritten array by array.
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut model = DetectorModel::new(header.arch.clone(), header.labels.clone(), &mut rng)?;
    let expected = array_entries(&model);
    if expected.len() != header.arrays.len() {
        return Err(Error::Snapshot("array count does not match architecture".into()));
    }
    for (want, got) in expected.iter().zip(&header.arrays) {
        if want != got {
            return Err(Error::Snapshot(format!(
                "array '{}' does not match architecture (expected {:?})",
                got.name, want.shape
            )));
        }
    }
    let total: usize = header.arrays.iter().map(|a| a.len).sum();
    let payload = take(bytes, &mut pos, total * 8)?;
    if pos != bytes.len() {
        return Err(Error::Snapshot("trailing bytes after payload".into()));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    model.set_flat_parameters(&values)?;
    Ok(model)
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn save(model: &DetectorModel, path: &std::path::Path) -> Result<String> {
    let bytes = to_bytes(model);
    std::fs::write(path, &bytes)?;
    Ok(content_hash(&bytes))
}

pub fn load(path: &std::path::Path) -> Result<DetectorModel> {
    from_bytes(&std::fs::read(path)?)
}
