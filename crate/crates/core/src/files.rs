//! Shared file plumbing: the binary vector sidecar, content digests, and
//! the JSON grid description schema.
//!
//! Sidecar layout: a 16-byte header (4-byte magic `GGPR`, little-endian
//! `u32` version, little-endian `u64` element count) followed by the
//! elements as little-endian 64-bit floats in canonical grid order.

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::grid::{GridError, GridShape, IncompleteGrid, ModeCombination, ModeCombinationRange};

const SIDECAR_MAGIC: [u8; 4] = *b"GGPR";
const SIDECAR_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FileError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error("digest mismatch: expected {expected}, found {found}")]
    DigestMismatch { expected: String, found: String },
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Writes a vector sidecar and returns the file's content digest.
pub fn write_f64_sidecar(path: &Path, values: &[f64]) -> Result<String, FileError> {
    let mut bytes = Vec::with_capacity(16 + 8 * values.len());
    bytes.extend_from_slice(&SIDECAR_MAGIC);
    bytes.extend_from_slice(&SIDECAR_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(sha256_hex(&bytes))
}

/// Reads a vector sidecar, checking the digest when one is given.
pub fn read_f64_sidecar(path: &Path, expected_digest: Option<&str>) -> Result<Vec<f64>, FileError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if let Some(expected) = expected_digest {
        let found = sha256_hex(&bytes);
        if found != expected {
            return Err(FileError::DigestMismatch {
                expected: expected.to_string(),
                found,
            });
        }
    }
    if bytes.len() < 16 || bytes[..4] != SIDECAR_MAGIC {
        return Err(FileError::Malformed("bad sidecar header".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != SIDECAR_VERSION {
        return Err(FileError::Malformed(format!(
            "unsupported sidecar version {version}"
        )));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    if bytes.len() != 16 + 8 * count {
        return Err(FileError::Malformed(format!(
            "sidecar length {} does not match count {count}",
            bytes.len()
        )));
    }
    let mut values = Vec::with_capacity(count);
    for chunk in bytes[16..].chunks_exact(8) {
        values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    Ok(values)
}

fn schema_version() -> u32 {
    1
}

/// JSON grid description. Either `cut_level` (simple range) or `mcr`
/// (explicit combinations, 1-based modes) must be present.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GridDescription {
    #[serde(default = "schema_version")]
    pub format_version: u32,
    pub dims: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cut_level: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mcr: Option<Vec<Vec<usize>>>,
    pub grids_1d: Vec<Vec<f64>>,
}

impl GridDescription {
    pub fn simple(dims: usize, cut_level: usize, grids_1d: Vec<Vec<f64>>) -> Self {
        GridDescription {
            format_version: 1,
            dims,
            cut_level: Some(cut_level),
            mcr: None,
            grids_1d,
        }
    }

    pub fn from_grid(grid: &IncompleteGrid) -> Self {
        let dims = grid.dims();
        let mcs: Vec<Vec<usize>> = grid
            .mcr()
            .iter()
            .map(|mc| mc.modes().map(|m| m + 1).collect())
            .collect();
        // Prefer the compact form when the range is exactly a simple cut.
        let max_order = grid.mcr().max_order();
        let simple = ModeCombinationRange::simple(dims, max_order).ok();
        let is_simple = simple.as_ref().is_some_and(|s| s == grid.mcr());
        let grids_1d = (0..dims).map(|m| grid.shape().grid_1d(m).to_vec()).collect();
        if is_simple {
            GridDescription::simple(dims, max_order, grids_1d)
        } else {
            GridDescription {
                format_version: 1,
                dims,
                cut_level: None,
                mcr: Some(mcs),
                grids_1d,
            }
        }
    }

    pub fn range(&self) -> Result<ModeCombinationRange, FileError> {
        match (&self.cut_level, &self.mcr) {
            (Some(alpha), None) => Ok(ModeCombinationRange::simple(self.dims, *alpha)?),
            (None, Some(lists)) => {
                let mut mcs = Vec::with_capacity(lists.len());
                for list in lists {
                    // 1-based in files.
                    for &m in list {
                        if m == 0 {
                            return Err(FileError::Malformed(
                                "mode indices in files are 1-based".into(),
                            ));
                        }
                    }
                    let zero_based: Vec<usize> = list.iter().map(|&m| m - 1).collect();
                    mcs.push(ModeCombination::new(&zero_based, self.dims)?);
                }
                Ok(ModeCombinationRange::new(self.dims, mcs)?)
            }
            (Some(_), Some(_)) => Err(FileError::Malformed(
                "grid description has both cut_level and mcr".into(),
            )),
            (None, None) => Err(FileError::Malformed(
                "grid description needs cut_level or mcr".into(),
            )),
        }
    }

    pub fn build(&self) -> Result<Arc<IncompleteGrid>, FileError> {
        if self.grids_1d.len() != self.dims {
            return Err(FileError::Malformed(format!(
                "expected {} 1D grids, got {}",
                self.dims,
                self.grids_1d.len()
            )));
        }
        let shape = GridShape::new(self.grids_1d.clone())?;
        let mcr = self.range()?;
        Ok(IncompleteGrid::new(shape, mcr)?)
    }
}
