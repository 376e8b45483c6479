//! Waveform to low-frequency magnitude spectrogram.

mod wav;

use std::f64::consts::PI;
use std::io::Write;

pub use wav::{decode_wav, encode_wav, read_wav, write_wav, WavAudio};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SpectrogramConfig {
    pub sample_rate: u32,
    pub window_ms: u32,
    pub shift_ms: u32,
    pub low_bins: usize,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window_ms: 40,
            shift_ms: 10,
            low_bins: 200,
        }
    }
}

impl SpectrogramConfig {
    pub fn window_len(&self) -> usize {
        (self.sample_rate as u64 * self.window_ms as u64 / 1000) as usize
    }

    pub fn shift_len(&self) -> usize {
        (self.sample_rate as u64 * self.shift_ms as u64 / 1000) as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.shift_ms == 0 || self.window_ms < self.shift_ms {
            return Err(Error::Input(format!(
                "need window_ms >= shift_ms > 0, got window {} ms, shift {} ms",
                self.window_ms, self.shift_ms
            )));
        }
        for (ms, what) in [(self.window_ms, "window"), (self.shift_ms, "shift")] {
            if !(self.sample_rate as u64 * ms as u64).is_multiple_of(1000) {
                return Err(Error::Input(format!(
                    "{what} of {ms} ms is not a whole number of samples at {} Hz",
                    self.sample_rate
                )));
            }
        }
        let nyquist_bins = self.window_len() / 2;
        if self.low_bins == 0 || self.low_bins > nyquist_bins {
            return Err(Error::Input(format!(
                "low_bins must be in 1..={nyquist_bins} for a {}-sample window, got {}",
                self.window_len(),
                self.low_bins
            )));
        }
        if self.window_len() < 2 {
            return Err(Error::Input("window shorter than two samples".into()));
        }
        Ok(())
    }

    /// Number of full frames in a waveform of `num_samples`, if any.
    pub fn frame_count(&self, num_samples: usize) -> Option<usize> {
        let win = self.window_len();
        (num_samples >= win).then(|| (num_samples - win) / self.shift_len() + 1)
    }

    /// Width of one DFT bin in Hz.
    pub fn bin_hz(&self) -> f64 {
        self.sample_rate as f64 / self.window_len() as f64
    }
}

/// Magnitude spectrogram stored frequency-major: `bins[f * frames + t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    freq_bins: usize,
    frames: usize,
    bins: Vec<f64>,
    pub frame_times: Vec<f64>,
}

impl Spectrogram {
    pub fn from_parts(freq_bins: usize, frames: usize, bins: Vec<f64>) -> Result<Self> {
        if freq_bins == 0 || frames == 0 || bins.len() != freq_bins * frames {
            return Err(Error::Dimension(format!(
                "spectrogram {freq_bins}×{frames} cannot hold {} values",
                bins.len()
            )));
        }
        if bins.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Input(
                "spectrogram magnitudes must be finite and nonnegative".into(),
            ));
        }
        Ok(Self {
            freq_bins,
            frames,
            bins,
            frame_times: (0..frames).map(|t| t as f64).collect(),
        })
    }

    pub fn freq_bins(&self) -> usize {
        self.freq_bins
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> &[f64] {
        &self.bins
    }

    pub fn get(&self, freq: usize, frame: usize) -> f64 {
        self.bins[freq * self.frames + frame]
    }

    /// One frame's magnitudes across all bins.
    pub fn frame(&self, t: usize) -> Vec<f64> {
        (0..self.freq_bins).map(|f| self.get(f, t)).collect()
    }

    /// CSV dump, one row per frequency bin.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for row in self.bins.chunks(self.frames) {
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(out, "{}", line.join(","))?;
        }
        Ok(())
    }
}

/// Symmetric Hamming window `0.54 - 0.46 cos(2πi/(n-1))`.
pub fn hamming_window(n: usize) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::Dimension(format!(
            "Hamming window needs n >= 2, got {n}"
        )));
    }
    let denom = (n - 1) as f64;
    Ok((0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / denom).cos())
        .collect())
}

/// Windowed-DFT magnitudes of the lowest `cfg.low_bins` bins, one column per
/// frame. The DFT length equals the window length.
pub fn spectrogram(wave: &[f64], cfg: &SpectrogramConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    let win = cfg.window_len();
    let frames = cfg.frame_count(wave.len()).ok_or_else(|| {
        Error::Input(format!(
            "waveform of {} samples is shorter than one {win}-sample window",
            wave.len()
        ))
    })?;
    let window = hamming_window(win)?;
    let shift = cfg.shift_len();
    let bins = cfg.low_bins;

    // twiddles[f][n] = e^{-2πi f n / win}; index reduced mod win for accuracy
    let mut cos_t = vec![0.0; bins * win];
    let mut sin_t = vec![0.0; bins * win];
    for f in 0..bins {
        for n in 0..win {
            let angle = 2.0 * PI * ((f * n) % win) as f64 / win as f64;
            cos_t[f * win + n] = angle.cos();
            sin_t[f * win + n] = -angle.sin();
        }
    }

    let mut out = vec![0.0; bins * frames];
    let mut frame = vec![0.0; win];
    for t in 0..frames {
        let start = t * shift;
        for ((dst, &s), &w) in frame.iter_mut().zip(&wave[start..start + win]).zip(&window) {
            *dst = s * w;
        }
        for f in 0..bins {
            let (c, s) = (
                &cos_t[f * win..(f + 1) * win],
                &sin_t[f * win..(f + 1) * win],
            );
            let (mut re, mut im) = (0.0, 0.0);
            for ((x, cv), sv) in frame.iter().zip(c).zip(s) {
                re += x * cv;
                im += x * sv;
            }
            out[f * frames + t] = re.hypot(im);
        }
    }
    let mut spec = Spectrogram::from_parts(bins, frames, out)?;
    spec.frame_times = (0..frames)
        .map(|t| (t * shift) as f64 / cfg.sample_rate as f64)
        .collect();
    Ok(spec)
}
