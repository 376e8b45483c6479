//! Run configuration: a flat `key = value` file with `[section]` headers.
//!
//! ```text
//! [synth]
//! train_samples = 70
//! seed = 7
//!
//! [model]
//! fusion = fbp
//! encoder = tiny
//!
//! [train]
//! epochs = 30
//! lr = 0.0001
//!
//! [spectrogram]
//! low_bins = 200
//! ```
//!
//! Blank lines and lines starting with `#` or `;` are ignored. Unknown
//! sections and keys are rejected.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use avfusion::data::SyntheticSpec;
use avfusion::dsp::SpectrogramConfig;
use avfusion::model::{AudioEncoderConfig, EncoderVariant, Fusion, ModelConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.line == 0 {
            write!(f, "{}", self.message)
        } else {
            write!(f, "line {}: {}", self.line, self.message)
        }
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub synth: SyntheticSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub spectrogram: SpectrogramConfig,
}

fn parse<T: FromStr>(value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("cannot parse {value:?}"))
}

fn parse_bool(value: &str) -> Result<bool, String> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected a boolean, got {value:?}")),
    }
}

fn parse_encoder(value: &str) -> Result<AudioEncoderConfig, String> {
    match value {
        "full" => Ok(AudioEncoderConfig::full()),
        "tiny" => Ok(AudioEncoderConfig::tiny()),
        _ => Err(format!("encoder must be full or tiny, got {value:?}")),
    }
}

pub fn parse_fusion(value: &str) -> Result<Fusion, String> {
    Fusion::from_name(value)
        .ok_or_else(|| format!("fusion must be fbp, concat or video-only, got {value:?}"))
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            line: 0,
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let err = |message: String| ConfigError {
                line: i + 1,
                message,
            };
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| err("unterminated section header".into()))?;
                let name = name.trim();
                if !["synth", "model", "train", "spectrogram"].contains(&name) {
                    return Err(err(format!("unknown section [{name}]")));
                }
                section = name.to_owned();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            if section.is_empty() {
                return Err(err(format!("key {key:?} appears before any section")));
            }
            cfg.set(&section, key, value)
                .map_err(|m| err(format!("[{section}] {key}: {m}")))?;
        }
        Ok(cfg)
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<(), String> {
        match section {
            "synth" => {
                let s = &mut self.synth;
                match key {
                    "train_samples" => s.train_samples = parse(value)?,
                    "val_samples" => s.val_samples = parse(value)?,
                    "test_samples" => s.test_samples = parse(value)?,
                    "feature_dim" => s.feature_dim = parse(value)?,
                    "frames_min" => s.frames_min = parse(value)?,
                    "frames_max" => s.frames_max = parse(value)?,
                    "duration_min" => s.duration_min = parse(value)?,
                    "duration_max" => s.duration_max = parse(value)?,
                    "sample_rate" => s.sample_rate = parse(value)?,
                    "noise" => s.noise = parse(value)?,
                    "emotion_fraction" => s.emotion_fraction = parse(value)?,
                    "video_signal" => s.video_signal = parse_bool(value)?,
                    "audio_signal" => s.audio_signal = parse_bool(value)?,
                    "video_group_amplitude" => s.video_group_amplitude = parse(value)?,
                    "video_class_amplitude" => s.video_class_amplitude = parse(value)?,
                    "video_salience" => s.video_salience = parse(value)?,
                    "neutral_offset" => s.neutral_offset = parse(value)?,
                    "audio_amplitude" => s.audio_amplitude = parse(value)?,
                    "seed" => s.seed = parse(value)?,
                    _ => return Err("unknown key".into()),
                }
            }
            "model" => {
                let m = &mut self.model;
                match key {
                    "lambda_audio" => m.lambda_audio = parse(value)?,
                    "lambda_video" => m.lambda_video = parse(value)?,
                    "reduced_video_dim" => m.reduced_video_dim = parse(value)?,
                    "fbp_o" => m.fbp_o = parse(value)?,
                    "fbp_k" => m.fbp_k = parse(value)?,
                    "dropout_p" => m.dropout_p = parse(value)?,
                    "fusion" => m.fusion = parse_fusion(value)?,
                    "encoder" => m.encoder = parse_encoder(value)?,
                    "seed" => m.seed = parse(value)?,
                    _ => return Err("unknown key".into()),
                }
            }
            "train" => {
                let t = &mut self.train;
                match key {
                    "epochs" => t.epochs = parse(value)?,
                    "batch_size" => t.batch_size = parse(value)?,
                    "lr" => t.adam.lr = parse(value)?,
                    "beta1" => t.adam.beta1 = parse(value)?,
                    "beta2" => t.adam.beta2 = parse(value)?,
                    "eps" => t.adam.eps = parse(value)?,
                    _ => return Err("unknown key".into()),
                }
            }
            "spectrogram" => {
                let s = &mut self.spectrogram;
                match key {
                    "sample_rate" => s.sample_rate = parse(value)?,
                    "window_ms" => s.window_ms = parse(value)?,
                    "shift_ms" => s.shift_ms = parse(value)?,
                    "low_bins" => s.low_bins = parse(value)?,
                    _ => return Err("unknown key".into()),
                }
            }
            _ => unreachable!("sections are checked when parsed"),
        }
        Ok(())
    }

    /// Checks every value before any work starts.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let wrap = |e: avfusion::Error| ConfigError {
            line: 0,
            message: e.to_string(),
        };
        self.synth.validate().map_err(wrap)?;
        self.model.validate().map_err(wrap)?;
        self.train.validate().map_err(wrap)?;
        self.spectrogram.validate().map_err(wrap)?;
        Ok(())
    }

    pub fn encoder_name(&self) -> &'static str {
        match self.model.encoder.variant {
            EncoderVariant::Full => "full",
            EncoderVariant::Tiny => "tiny",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_without_file_content() {
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
        assert_eq!(
            RunConfig::parse("# nothing\n\n").unwrap(),
            RunConfig::default()
        );
    }

    #[test]
    fn sets_values_in_every_section() {
        let text = "[synth]\nnoise = 0.5\nvideo_signal = false\n[model]\nfusion = concat\nencoder = tiny\n\
                    [train]\nlr = 0.01\n[spectrogram]\nlow_bins = 64\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.synth.noise, 0.5);
        assert!(!cfg.synth.video_signal);
        assert_eq!(cfg.model.fusion, Fusion::Concat);
        assert_eq!(cfg.encoder_name(), "tiny");
        assert_eq!(cfg.train.adam.lr, 0.01);
        assert_eq!(cfg.spectrogram.low_bins, 64);
    }

    #[test]
    fn rejects_unknown_keys_and_sections() {
        let e = RunConfig::parse("[model]\nlambda = 1\n").unwrap_err();
        assert_eq!(e.line, 2);
        assert!(e.message.contains("unknown key"));
        assert!(RunConfig::parse("[optim]\n")
            .unwrap_err()
            .message
            .contains("unknown section"));
        assert!(RunConfig::parse("seed = 1\n").is_err());
        assert!(RunConfig::parse("[train]\nepochs = many\n").is_err());
        assert!(RunConfig::parse("[train]\nepochs\n").is_err());
    }

    #[test]
    fn validation_catches_bad_values() {
        let cfg = RunConfig::parse("[train]\nepochs = 0\n").unwrap();
        assert!(cfg.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }
}
