//! Dataset ingestion and the synthetic multimodal generator.

mod fseq;
mod manifest;
mod synth;

use serde::{Deserialize, Serialize};

pub use fseq::{decode_fseq, encode_fseq, read_feature_file, write_feature_file, FeatureSequence};
pub use manifest::{load_manifest, write_manifest, Manifest, ManifestEntry, Split, HEADER};
pub use synth::{
    generate_split, generate_synthetic, read_segments, GeneratedSample, SegmentInfo, SynthSummary,
    SyntheticSpec,
};

use crate::dsp::{read_wav, spectrogram, Spectrogram, SpectrogramConfig};
use crate::error::{Error, Result};
use crate::labels::{Emotion, NUM_CLASSES};

/// One model input: the audio spectrogram and the video feature sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub label: Emotion,
    pub spectrogram: Spectrogram,
    pub features: FeatureSequence,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.samples.first().map(|s| s.features.dim())
    }

    pub fn find(&self, id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.id == id)
    }

    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0; NUM_CLASSES];
        for s in &self.samples {
            counts[s.label.index()] += 1;
        }
        counts
    }

    /// Reads every WAV and FSEQ file referenced by the manifest.
    pub fn from_manifest(manifest: &Manifest, cfg: &SpectrogramConfig) -> Result<Self> {
        let mut samples = Vec::with_capacity(manifest.len());
        for e in &manifest.entries {
            let audio = read_wav(&e.wav_path)?;
            if audio.sample_rate != cfg.sample_rate {
                return Err(Error::Input(format!(
                    "{}: sample rate {} Hz, expected {} Hz",
                    e.wav_path.display(),
                    audio.sample_rate,
                    cfg.sample_rate
                )));
            }
            samples.push(Sample {
                id: e.sample_id.clone(),
                label: e.label,
                spectrogram: spectrogram(&audio.samples, cfg)?,
                features: read_feature_file(&e.feature_path)?,
            });
        }
        Self::from_samples(samples)
    }

    pub fn from_generated(generated: &[GeneratedSample], cfg: &SpectrogramConfig) -> Result<Self> {
        let samples = generated
            .iter()
            .map(|g| {
                Ok(Sample {
                    id: g.sample_id.clone(),
                    label: g.label,
                    spectrogram: spectrogram(&g.wave, cfg)?,
                    features: g.features.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_samples(samples)
    }

    /// Checks that video feature dimensions agree across samples.
    pub fn from_samples(samples: Vec<Sample>) -> Result<Self> {
        if let Some(first) = samples.first() {
            let dim = first.features.dim();
            if let Some(bad) = samples.iter().find(|s| s.features.dim() != dim) {
                return Err(Error::Dimension(format!(
                    "sample {} has feature dim {}, dataset uses {dim}",
                    bad.id,
                    bad.features.dim()
                )));
            }
        }
        Ok(Self { samples })
    }
}

/// Per-dimension video feature standardization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureNorm {
    pub const STD_FLOOR: f64 = 1e-8;

    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Statistics over every frame of every sample; dimensions with
    /// (near-)zero spread get a unit divisor.
    pub fn fit(dataset: &Dataset) -> Result<Self> {
        let dim = dataset
            .feature_dim()
            .ok_or_else(|| Error::Input("cannot fit normalization on an empty dataset".into()))?;
        let mut sum = vec![0.0; dim];
        let mut count = 0usize;
        for s in &dataset.samples {
            for row in s.features.rows() {
                sum.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                count += 1;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        let mut var = vec![0.0; dim];
        for s in &dataset.samples {
            for row in s.features.rows() {
                var.iter_mut()
                    .zip(row.iter().zip(&mean))
                    .for_each(|(a, (v, m))| *a += (v - m) * (v - m));
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / count as f64).sqrt();
                if s < Self::STD_FLOOR {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, seq: &FeatureSequence) -> Result<FeatureSequence> {
        if seq.dim() != self.dim() {
            return Err(Error::Dimension(format!(
                "feature dim {} does not match normalization dim {}",
                seq.dim(),
                self.dim()
            )));
        }
        seq.map_rows(|row| {
            row.iter()
                .zip(self.mean.iter().zip(&self.std))
                .map(|(v, (m, s))| (v - m) / s)
                .collect()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalization_standardizes_training_frames() {
        let spec = SyntheticSpec {
            train_samples: 14,
            duration_min: 0.1,
            duration_max: 0.1,
            ..SyntheticSpec::default()
        };
        let gen = generate_split(&spec, Split::Train).unwrap();
        let ds = Dataset::from_generated(&gen, &SpectrogramConfig::default()).unwrap();
        let norm = FeatureNorm::fit(&ds).unwrap();
        let rows: Vec<Vec<f64>> = ds
            .samples
            .iter()
            .flat_map(|s| {
                norm.apply(&s.features)
                    .unwrap()
                    .rows()
                    .map(<[f64]>::to_vec)
                    .collect::<Vec<_>>()
            })
            .collect();
        for j in 0..norm.dim() {
            let m = rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64;
            let v = rows.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / rows.len() as f64;
            assert!(m.abs() < 1e-9);
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_dimension_gets_unit_divisor() {
        let seq = FeatureSequence::new(2, 2, vec![1.0, 5.0, 3.0, 5.0]).unwrap();
        let ds = Dataset {
            samples: vec![Sample {
                id: "a".into(),
                label: Emotion::Sad,
                spectrogram: Spectrogram::from_parts(1, 1, vec![0.0]).unwrap(),
                features: seq,
            }],
        };
        let norm = FeatureNorm::fit(&ds).unwrap();
        assert_eq!(norm.std[1], 1.0);
        assert_eq!(norm.mean, vec![2.0, 5.0]);
    }
}
