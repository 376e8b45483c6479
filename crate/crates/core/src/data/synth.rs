//! Synthetic audio-video emotion data.
//!
//! Each sample carries class evidence only inside one "emotion segment"
//! covering a fixed fraction of its duration; everything else is neutral
//! noise. The two modalities are complementary:
//!
//! * video: emotion frames are `A·e_group + B·e_class + noise` with
//!   `group = class / 2`, so the strong component only narrows the class to
//!   a pair and the weak one separates the pair. Emotion frames also carry
//!   a class-agnostic salience marker on one dimension, and neutral frames
//!   share a per-sample random offset on the class dimensions, which biases
//!   a plain frame average but not the emotion frames;
//! * audio: the segment holds a class-specific set of tones whose local
//!   texture depends on class parity (two widely spaced loud tones for even
//!   classes, a dense comb of quieter tones for odd classes).
//!
//! Waveforms are quantized to 16 bits and features to `f32` at generation
//! time, so in-memory samples are identical to what a disk round trip yields.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::fseq::{write_feature_file, FeatureSequence};
use super::manifest::{write_manifest, ManifestEntry, Split};
use crate::dsp::write_wav;
use crate::error::{Error, Result};
use crate::labels::{Emotion, NUM_CLASSES};

/// Group dims `0..4`, class dims `4..11`, then the salience marker.
const SALIENCE_DIM: usize = 4 + NUM_CLASSES;
const SIGNAL_DIMS: usize = SALIENCE_DIM + 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub train_samples: usize,
    pub val_samples: usize,
    pub test_samples: usize,
    pub feature_dim: usize,
    pub frames_min: usize,
    pub frames_max: usize,
    pub duration_min: f64,
    pub duration_max: f64,
    pub sample_rate: u32,
    /// Scales the video frame noise and the audio background noise; 0 gives
    /// noiseless, Bayes-separable classes.
    pub noise: f64,
    /// Share of frames (and of audio duration) that carries class evidence.
    pub emotion_fraction: f64,
    pub video_signal: bool,
    pub audio_signal: bool,
    /// Amplitude of the class-pair component of the video mean.
    pub video_group_amplitude: f64,
    /// Amplitude of the class-specific component of the video mean.
    pub video_class_amplitude: f64,
    /// Class-agnostic marker added to a dedicated dimension of emotion frames.
    pub video_salience: f64,
    /// Spread of a per-sample offset shared by all neutral frames on the
    /// class-bearing dimensions; it biases frame averages but not the
    /// emotion frames themselves.
    pub neutral_offset: f64,
    /// Peak amplitude of the audio tone set, in waveform units.
    pub audio_amplitude: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            train_samples: 70,
            val_samples: 14,
            test_samples: 70,
            feature_dim: 64,
            frames_min: 8,
            frames_max: 24,
            duration_min: 1.0,
            duration_max: 3.0,
            sample_rate: 16_000,
            noise: 1.0,
            emotion_fraction: 0.4,
            video_signal: true,
            audio_signal: true,
            video_group_amplitude: 6.0,
            video_class_amplitude: 0.6,
            video_salience: 5.0,
            neutral_offset: 1.5,
            audio_amplitude: 0.3,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn samples(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_samples,
            Split::Val => self.val_samples,
            Split::Test => self.test_samples,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Input(m));
        if self.train_samples + self.val_samples + self.test_samples == 0 {
            return bad("synthetic dataset would be empty".into());
        }
        if self.feature_dim < SIGNAL_DIMS {
            return bad(format!("feature_dim must be at least {SIGNAL_DIMS}"));
        }
        if self.frames_min == 0 || self.frames_min > self.frames_max {
            return bad(format!(
                "invalid frame range [{}, {}]",
                self.frames_min, self.frames_max
            ));
        }
        if !(self.duration_min > 0.0 && self.duration_min <= self.duration_max) {
            return bad(format!(
                "invalid duration range [{}, {}]",
                self.duration_min, self.duration_max
            ));
        }
        if !(self.emotion_fraction > 0.0 && self.emotion_fraction <= 1.0) {
            return bad(format!(
                "emotion_fraction {} outside (0, 1]",
                self.emotion_fraction
            ));
        }
        if !(self.neutral_offset >= 0.0 && self.neutral_offset.is_finite()) {
            return bad(format!(
                "neutral_offset {} must be finite and nonnegative",
                self.neutral_offset
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!(
                "noise {} must be finite and nonnegative",
                self.noise
            ));
        }
        if self.sample_rate < 4000 {
            return bad(format!("sample_rate {} too low", self.sample_rate));
        }
        Ok(())
    }

    /// Mean of an emotion-bearing video frame for `class`.
    pub fn video_mean(&self, class: usize) -> Vec<f64> {
        let mut mu = vec![0.0; self.feature_dim];
        if self.video_signal {
            mu[class / 2] = self.video_group_amplitude;
            mu[4 + class] = self.video_class_amplitude;
            mu[SALIENCE_DIM] = self.video_salience;
        }
        mu
    }

    /// (frequency Hz, relative amplitude) pairs of the tone set for `class`.
    pub fn audio_tones(&self, class: usize) -> Vec<(f64, f64)> {
        let base = 400.0 + 200.0 * class as f64;
        if class.is_multiple_of(2) {
            vec![(base, 1.0), (base + 800.0, 1.0)]
        } else {
            (0..5).map(|j| (base + 75.0 * j as f64, 0.4)).collect()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSample {
    pub sample_id: String,
    pub label: Emotion,
    pub wave: Vec<f64>,
    pub features: FeatureSequence,
    /// Emotion-bearing frames, half-open.
    pub video_segment: (usize, usize),
    /// Emotion-bearing audio span in seconds, half-open.
    pub audio_segment: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentInfo {
    pub sample_id: String,
    pub label: Emotion,
    pub frames: usize,
    pub video_segment: (usize, usize),
    pub audio_segment: (f64, f64),
}

fn split_rng(seed: u64, split: Split) -> ChaCha8Rng {
    let salt = match split {
        Split::Train => 0x7261_696e,
        Split::Val => 0x0076_616c,
        Split::Test => 0x7465_7374,
    };
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt)
}

fn quantize(s: f64) -> f64 {
    (s * 32768.0).round().clamp(-32768.0, 32767.0) / 32768.0
}

fn gauss<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn generate_one<R: Rng>(
    spec: &SyntheticSpec,
    id: String,
    class: usize,
    rng: &mut R,
) -> Result<GeneratedSample> {
    let frames = rng.gen_range(spec.frames_min..=spec.frames_max);
    let bearing = ((spec.emotion_fraction * frames as f64).round() as usize).clamp(1, frames);
    let start_frac: f64 = rng.gen_range(0.0..=1.0 - spec.emotion_fraction);
    let v_start = ((start_frac * frames as f64).round() as usize).min(frames - bearing);
    let video_segment = (v_start, v_start + bearing);

    let mu = spec.video_mean(class);
    let offset: Vec<f64> = (0..SALIENCE_DIM)
        .map(|_| spec.noise * spec.neutral_offset * gauss(rng))
        .collect();
    let mut data = Vec::with_capacity(frames * spec.feature_dim);
    for f in 0..frames {
        let inside = f >= video_segment.0 && f < video_segment.1;
        for (j, &m) in mu.iter().enumerate() {
            let mean = match (inside, offset.get(j)) {
                (true, _) => m,
                (false, Some(&o)) => o,
                (false, None) => 0.0,
            };
            data.push((mean + spec.noise * gauss(rng)) as f32 as f64);
        }
    }
    let features = FeatureSequence::new(frames, spec.feature_dim, data)?;

    let duration = rng.gen_range(spec.duration_min..=spec.duration_max);
    let rate = spec.sample_rate as f64;
    let n = (duration * rate).round() as usize;
    let seg_len = spec.emotion_fraction * duration;
    let a_start = start_frac * duration;
    let audio_segment = (a_start, a_start + seg_len);
    let tones = spec.audio_tones(class);
    let phases: Vec<f64> = tones.iter().map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
    let gain = spec.audio_amplitude * (1.0 + 0.2 * spec.noise.min(1.0) * rng.gen_range(-1.0..1.0));
    let ramp = 0.01;
    let mut wave = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / rate;
        let mut s = 0.01 * spec.noise * gauss(rng);
        if spec.audio_signal && t >= audio_segment.0 && t < audio_segment.1 {
            let edge = ((t - audio_segment.0).min(audio_segment.1 - t) / ramp).min(1.0);
            let tone: f64 = tones
                .iter()
                .zip(&phases)
                .map(|(&(f, a), ph)| a * (2.0 * PI * f * t + ph).sin())
                .sum();
            s += gain * edge * tone / tones.len() as f64 * 2.0;
        }
        wave.push(quantize(s));
    }
    Ok(GeneratedSample {
        sample_id: id,
        label: Emotion::from_index(class)?,
        wave,
        features,
        video_segment,
        audio_segment,
    })
}

/// Generates one split in memory. Labels cycle through the seven classes, so
/// each class gets exactly `n / 7` samples when `n` is divisible by 7.
pub fn generate_split(spec: &SyntheticSpec, split: Split) -> Result<Vec<GeneratedSample>> {
    spec.validate()?;
    let mut rng = split_rng(spec.seed, split);
    (0..spec.samples(split))
        .map(|i| {
            generate_one(
                spec,
                format!("{}_{i:04}", split.name()),
                i % NUM_CLASSES,
                &mut rng,
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthSummary {
    pub manifests: Vec<PathBuf>,
    pub counts: Vec<(Split, usize)>,
}

/// Writes `<split>.csv`, `<split>_segments.json`, and per-sample WAV and FSEQ
/// files under `<out>/<split>/` for every split.
pub fn generate_synthetic(spec: &SyntheticSpec, out: &Path) -> Result<SynthSummary> {
    spec.validate()?;
    let mut summary = SynthSummary {
        manifests: Vec::new(),
        counts: Vec::new(),
    };
    for split in Split::ALL {
        let samples = generate_split(spec, split)?;
        let dir = out.join(split.name());
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut entries = Vec::with_capacity(samples.len());
        let mut segments = Vec::with_capacity(samples.len());
        for s in &samples {
            let wav_rel = PathBuf::from(split.name()).join(format!("{}.wav", s.sample_id));
            let fseq_rel = PathBuf::from(split.name()).join(format!("{}.fseq", s.sample_id));
            write_wav(&out.join(&wav_rel), &s.wave, spec.sample_rate)?;
            write_feature_file(&out.join(&fseq_rel), &s.features)?;
            entries.push(ManifestEntry {
                sample_id: s.sample_id.clone(),
                wav_path: wav_rel,
                feature_path: fseq_rel,
                label: s.label,
            });
            segments.push(SegmentInfo {
                sample_id: s.sample_id.clone(),
                label: s.label,
                frames: s.features.frames(),
                video_segment: s.video_segment,
                audio_segment: s.audio_segment,
            });
        }
        let manifest = out.join(format!("{}.csv", split.name()));
        write_manifest(&manifest, &entries)?;
        let seg_path = out.join(format!("{}_segments.json", split.name()));
        fs::write(&seg_path, serde_json::to_vec_pretty(&segments)?)
            .map_err(|e| Error::io(&seg_path, e))?;
        summary.manifests.push(manifest);
        summary.counts.push((split, samples.len()));
    }
    Ok(summary)
}

pub fn read_segments(path: &Path) -> Result<Vec<SegmentInfo>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}
