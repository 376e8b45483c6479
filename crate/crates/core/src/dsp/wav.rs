//! 16-bit PCM mono RIFF/WAVE reading and writing.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct WavAudio {
    /// Samples scaled to [-1, 1) by 1/32768.
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

fn le_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

pub fn decode_wav(bytes: &[u8]) -> Result<WavAudio> {
    if bytes.len() < 12 || &bytes[..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::format("riff header", "not a RIFF/WAVE file"));
    }
    let mut pos = 12;
    let mut format: Option<(u32, u16)> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = le_u32(bytes, pos + 4) as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                if size < 16 || body + 16 > bytes.len() {
                    return Err(Error::format("fmt chunk", "truncated format chunk"));
                }
                let tag = le_u16(bytes, body);
                let channels = le_u16(bytes, body + 2);
                let rate = le_u32(bytes, body + 4);
                let bits = le_u16(bytes, body + 14);
                if tag != 1 {
                    return Err(Error::format(
                        "audio format",
                        format!("{tag} is not PCM (1)"),
                    ));
                }
                if channels != 1 {
                    return Err(Error::format(
                        "channels",
                        format!("{channels} channels, expected mono"),
                    ));
                }
                if bits != 16 {
                    return Err(Error::format(
                        "bits per sample",
                        format!("{bits}, expected 16"),
                    ));
                }
                format = Some((rate, channels));
            }
            b"data" => {
                let Some((sample_rate, _)) = format else {
                    return Err(Error::format("fmt chunk", "data chunk before format chunk"));
                };
                if body + size > bytes.len() {
                    return Err(Error::format(
                        "data chunk",
                        format!("declares {size} bytes, only {} present", bytes.len() - body),
                    ));
                }
                if !size.is_multiple_of(2) {
                    return Err(Error::format(
                        "data chunk",
                        format!("odd payload length {size}"),
                    ));
                }
                let samples = bytes[body..body + size]
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64 / 32768.0)
                    .collect();
                return Ok(WavAudio {
                    samples,
                    sample_rate,
                });
            }
            _ => {}
        }
        pos = body + size + (size & 1);
    }
    Err(Error::format(
        if format.is_some() {
            "data chunk"
        } else {
            "fmt chunk"
        },
        "chunk missing or truncated",
    ))
}

/// Quantizes to 16-bit, rounding to nearest and clamping to the i16 range.
pub fn encode_wav(samples: &[f64], sample_rate: u32) -> Vec<u8> {
    let data_len = (samples.len() * 2) as u32;
    let mut out = Vec::with_capacity(44 + samples.len() * 2);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_len).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_len.to_le_bytes());
    for &s in samples {
        let q = (s * 32768.0)
            .round()
            .clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        out.extend_from_slice(&q.to_le_bytes());
    }
    out
}

pub fn read_wav(path: &Path) -> Result<WavAudio> {
    decode_wav(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    fs::write(path, encode_wav(samples, sample_rate)).map_err(|e| Error::io(path, e))
}
