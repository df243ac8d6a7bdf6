//! File formats and the output manifest.
//!
//! Matrices travel in a little-endian binary container: the magic bytes
//! `SVOM`, a u32 version (1 = f64 payload, 2 = f32), u64 row and column
//! counts, then the entries row-major. A header-less CSV path exists for
//! interoperability. Structured data (schedules, partitions, masks,
//! reports) is JSON. Parsers never trust lengths from the input: sizes are
//! validated against the actual byte count before anything is allocated.

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::partitioning::Partition;
use crate::profiling::SparsitySchedule;
use crate::selection::BlockMask;
use crate::synth::SynthSpec;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::Path;

pub const MATRIX_MAGIC: &[u8; 4] = b"SVOM";
pub const MATRIX_VERSION_F64: u32 = 1;
pub const MATRIX_VERSION_F32: u32 = 2;

const HEADER_LEN: usize = 4 + 4 + 8 + 8;

/// Encode a matrix with an f64 (version 1) payload.
pub fn matrix_to_bytes(m: &Matrix) -> Vec<u8> {
    encode_matrix(m, MATRIX_VERSION_F64)
}

/// Encode a matrix with an f32 (version 2) payload. Lossy.
pub fn matrix_to_bytes_f32(m: &Matrix) -> Vec<u8> {
    encode_matrix(m, MATRIX_VERSION_F32)
}

fn encode_matrix(m: &Matrix, version: u32) -> Vec<u8> {
    let elem = if version == MATRIX_VERSION_F64 { 8 } else { 4 };
    let mut out = Vec::with_capacity(HEADER_LEN + m.data().len() * elem);
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for &v in m.data() {
        if version == MATRIX_VERSION_F64 {
            out.extend_from_slice(&v.to_le_bytes());
        } else {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Decode a matrix container, rejecting bad magic, unknown versions,
/// payload/size mismatches and non-finite entries.
pub fn parse_matrix(bytes: &[u8]) -> Result<Matrix> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format(format!(
            "matrix container truncated: {} bytes, need at least {HEADER_LEN}",
            bytes.len()
        )));
    }
    if &bytes[..4] != MATRIX_MAGIC {
        return Err(Error::Format("bad magic, expected SVOM".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let elem: u128 = match version {
        MATRIX_VERSION_F64 => 8,
        MATRIX_VERSION_F32 => 4,
        other => return Err(Error::Format(format!("unsupported matrix version {other}"))),
    };
    let rows = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let cols = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let expected = u128::from(rows) * u128::from(cols) * elem + HEADER_LEN as u128;
    if expected != bytes.len() as u128 {
        return Err(Error::Format(format!(
            "{rows}x{cols} v{version} matrix needs {expected} bytes, got {}",
            bytes.len()
        )));
    }
    let (rows, cols) = (rows as usize, cols as usize);
    let payload = &bytes[HEADER_LEN..];
    let data: Vec<f64> = if version == MATRIX_VERSION_F64 {
        payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect()
    } else {
        payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect()
    };
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Format("matrix payload contains non-finite values".into()));
    }
    Matrix::new(rows, cols, data)
        .map_err(|e| Error::Format(format!("inconsistent matrix container: {e}")))
}

/// CSV export: comma-separated, no header, one row per line, decimal point.
pub fn matrix_to_csv(m: &Matrix) -> Result<String> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::Argument("CSV cannot represent an empty matrix".into()));
    }
    let mut out = String::new();
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(f64::to_string).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    Ok(out)
}

/// CSV import; rows must be rectangular and every field a finite number.
pub fn parse_matrix_csv(text: &str) -> Result<Matrix> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for (col, field) in line.split(',').enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Format(format!("line {}, field {}: {field:?} is not a number", ln + 1, col + 1))
            })?;
            if !v.is_finite() {
                return Err(Error::Format(format!(
                    "line {}, field {}: non-finite value",
                    ln + 1,
                    col + 1
                )));
            }
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Format("CSV holds no rows".into()));
    }
    let width = rows[0].len();
    if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != width) {
        return Err(Error::Format(format!(
            "line {} has {} fields, expected {width}",
            i + 1,
            r.len()
        )));
    }
    Matrix::from_rows(&rows).map_err(|e| Error::Format(e.to_string()))
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_matrix(&bytes)
}

pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    write_bytes(path, &matrix_to_bytes(m))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// Serialize pretty-printed JSON with a trailing newline.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

// --- JSON schemas for clustering artifacts ---------------------------------

/// On-disk form of a partition: `{"k":..., "labels":[...], "seed":...}`.
/// Centroids travel separately in the matrix container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionFile {
    pub k: usize,
    pub labels: Vec<usize>,
    pub seed: u64,
}

impl PartitionFile {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Format("partition k must be >= 1".into()));
        }
        if self.labels.is_empty() {
            return Err(Error::Format("partition labels are empty".into()));
        }
        if let Some(bad) = self.labels.iter().find(|l| **l >= self.k) {
            return Err(Error::Format(format!("label {bad} out of range for k = {}", self.k)));
        }
        Ok(())
    }

    /// Join with a centroid matrix into a [`Partition`].
    pub fn into_partition(self, centroids: Matrix) -> Result<Partition> {
        self.validate()?;
        Partition::new(self.labels, centroids, self.k)
    }
}

pub fn parse_partition_json(bytes: &[u8]) -> Result<PartitionFile> {
    let file: PartitionFile = serde_json::from_slice(bytes)?;
    file.validate()?;
    Ok(file)
}

pub fn parse_schedule_json(bytes: &[u8]) -> Result<SparsitySchedule> {
    let schedule: SparsitySchedule = serde_json::from_slice(bytes)?;
    schedule.validate()?;
    Ok(schedule)
}

pub fn parse_mask_json(bytes: &[u8]) -> Result<BlockMask> {
    let mask: BlockMask = serde_json::from_slice(bytes)?;
    mask.validate()?;
    Ok(mask)
}

pub fn parse_synth_spec_json(bytes: &[u8]) -> Result<SynthSpec> {
    let spec: SynthSpec = serde_json::from_slice(bytes)?;
    spec.validate()?;
    Ok(spec)
}

// --- output manifest --------------------------------------------------------

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Index of every file a command wrote, with content hashes. Entries are
/// kept sorted by path so reruns produce identical bytes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_NAME: &str = "manifest.json";

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_NAME);
        if !path.exists() {
            return Ok(Self::default());
        }
        read_json(&path)
    }

    pub fn upsert(&mut self, path: &str, sha256: String, seed: Option<u64>) {
        match self.entries.iter_mut().find(|e| e.path == path) {
            Some(e) => {
                e.sha256 = sha256;
                e.seed = seed;
            }
            None => self.entries.push(ManifestEntry { path: path.to_string(), sha256, seed }),
        }
        self.entries.sort_by(|a, b| a.path.cmp(&b.path));
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_bytes(&dir.join(MANIFEST_NAME), &to_json_bytes(self)?)
    }

    /// Write a file under `dir` and record it.
    pub fn write_file(&mut self, dir: &Path, rel: &str, bytes: &[u8], seed: Option<u64>) -> Result<()> {
        write_bytes(&dir.join(rel), bytes)?;
        self.upsert(rel, sha256_hex(bytes), seed);
        Ok(())
    }
}
