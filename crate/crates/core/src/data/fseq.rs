//! FSEQ per-frame feature files: `"FSEQ"`, version `u32`, L `u32`, C `u32`,
//! then L·C little-endian `f32` values, frame-major.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FSEQ";
pub const VERSION: u32 = 1;

/// L×C per-frame feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    frames: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureSequence {
    pub fn new(frames: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(Error::Input(format!(
                "feature sequence must be non-empty, got {frames}×{dim}"
            )));
        }
        if data.len() != frames * dim {
            return Err(Error::Dimension(format!(
                "{frames}×{dim} feature sequence cannot hold {} values",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!(
                "non-finite feature in frame {}",
                i / dim
            )));
        }
        Ok(Self { frames, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Dimension("feature rows differ in length".into()));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim)
    }

    /// Frame-averaged feature vector.
    pub fn mean_frame(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for row in self.rows() {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= self.frames as f64);
        out
    }

    pub fn map_rows(&self, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Result<Self> {
        let rows: Vec<Vec<f64>> = self.rows().map(&mut f).collect();
        Self::from_rows(&rows)
    }
}

pub fn encode_fseq(seq: &FeatureSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + seq.data.len() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(seq.frames as u32).to_le_bytes());
    out.extend_from_slice(&(seq.dim as u32).to_le_bytes());
    for &v in &seq.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_fseq(bytes: &[u8]) -> Result<FeatureSequence> {
    if bytes.len() < 16 {
        return Err(Error::format(
            "header",
            format!("{} bytes, need at least 16", bytes.len()),
        ));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format("magic", "expected \"FSEQ\""));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = word(4);
    if version != VERSION {
        return Err(Error::format(
            "version",
            format!("unsupported version {version}"),
        ));
    }
    let (frames, dim) = (word(8) as usize, word(12) as usize);
    let expected = frames
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format("dims", format!("{frames}×{dim} overflows")))?;
    let payload = &bytes[16..];
    if payload.len() != expected {
        return Err(Error::format(
            "payload",
            format!(
                "header declares {frames}×{dim} ({expected} bytes), payload has {} bytes",
                payload.len()
            ),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    FeatureSequence::new(frames, dim, data).map_err(|e| Error::format("payload", e.to_string()))
}

pub fn read_feature_file(path: &Path) -> Result<FeatureSequence> {
    decode_fseq(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_feature_file(path: &Path, seq: &FeatureSequence) -> Result<()> {
    fs::write(path, encode_fseq(seq)).map_err(|e| Error::io(path, e))
}
