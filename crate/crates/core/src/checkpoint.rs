//! Named-tensor checkpoint container.
//!
//! Layout (little-endian): `"FBPM"`, version `u32`, tensor count `u32`, then
//! per tensor: name length `u16`, UTF-8 name, rank `u8`, one `u32` per
//! dimension, and the row-major payload as `f32`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, MAX_RANK};

pub const MAGIC: &[u8; 4] = b"FBPM";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

pub fn encode(tensors: &[NamedTensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let count =
        u32::try_from(tensors.len()).map_err(|_| Error::Input("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for NamedTensor { name, tensor } in tensors {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Input(format!("tensor name too long: {} bytes", name.len())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(tensor.rank() as u8);
        for &d in tensor.shape() {
            let d =
                u32::try_from(d).map_err(|_| Error::Input(format!("dimension {d} too large")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::format(
                    field,
                    format!(
                        "truncated: need {n} bytes at offset {}, file has {}",
                        self.pos,
                        self.bytes.len()
                    ),
                )
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format("magic", "expected \"FBPM\""));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(
            "version",
            format!("unsupported version {version}"),
        ));
    }
    let count = r.u32("count")?;
    let mut out = Vec::new();
    for i in 0..count {
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format("name", format!("tensor {i} name is not UTF-8")))?
            .to_owned();
        let rank = r.u8("rank")? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::format(
                "rank",
                format!("tensor {name:?} has rank {rank}"),
            ));
        }
        let shape = (0..rank)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&n| n > 0)
            .ok_or_else(|| {
                Error::format(
                    "dims",
                    format!("tensor {name:?} has invalid shape {shape:?}"),
                )
            })?;
        let payload = r.take(numel.saturating_mul(4), "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let tensor = Tensor::new(&shape, data).map_err(|e| Error::format("dims", e.to_string()))?;
        out.push(NamedTensor { name, tensor });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(
            "payload",
            format!("{} trailing bytes after last tensor", bytes.len() - r.pos),
        ));
    }
    Ok(out)
}

pub fn write(path: &Path, tensors: &[NamedTensor]) -> Result<()> {
    fs::write(path, encode(tensors)?).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<NamedTensor>> {
    decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<NamedTensor> {
        vec![
            NamedTensor {
                name: "w".into(),
                tensor: Tensor::new(&[2, 3], vec![1.0, -2.5, 3.25, 0.0, 0.125, 7.0]).unwrap(),
            },
            NamedTensor {
                name: "bias".into(),
                tensor: Tensor::from_vec(vec![0.5]).unwrap(),
            },
        ]
    }

    #[test]
    fn layout_matches_format() {
        let bytes = encode(&sample()).unwrap();
        assert_eq!(&bytes[..4], b"FBPM");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u16::from_le_bytes(bytes[12..14].try_into().unwrap()), 1);
        assert_eq!(bytes[14], b'w');
        assert_eq!(bytes[15], 2);
        // header 12 + (2+1+1+8+24) + (2+4+1+4+4)
        assert_eq!(bytes.len(), 12 + 36 + 15);
    }

    #[test]
    fn round_trip_is_exact_for_f32_values() {
        let t = sample();
        assert_eq!(decode(&encode(&t).unwrap()).unwrap(), t);
    }

    #[test]
    fn corrupt_headers_are_format_errors() {
        let good = encode(&sample()).unwrap();
        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode(&bad_magic), Err(Error::Format { field, .. }) if field == "magic"));
        let mut bad_version = good.clone();
        bad_version[4] = 9;
        assert!(
            matches!(decode(&bad_version), Err(Error::Format { field, .. }) if field == "version")
        );
        assert!(
            matches!(decode(&good[..good.len() - 2]), Err(Error::Format { field, .. }) if field == "payload")
        );
        let mut extra = good;
        extra.push(0);
        assert!(matches!(decode(&extra), Err(Error::Format { .. })));
    }
}
