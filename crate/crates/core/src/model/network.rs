use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoder::AudioEncoderConfig;
use crate::attention::{
    attention_pool_graph, flatten_grid_graph, uniform, AttentionBinding, AttentionParams,
    GridLayout,
};
use crate::checkpoint::NamedTensor;
use crate::error::{Error, Result};
use crate::fbp::{fbp_graph, FbpBinding, FbpParams};
use crate::labels::NUM_CLASSES;
use crate::tensor::{Graph, NodeId, Tensor};

/// How the pooled audio vector `a` and video vector `v` are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    /// Factorized bilinear pooling.
    Fbp,
    /// `[a/‖a‖, v/‖v‖] / √2` followed by dropout.
    Concat,
    /// `l2(dropout(v))`; the audio branch is absent.
    VideoOnly,
}

impl Fusion {
    pub fn name(self) -> &'static str {
        match self {
            Fusion::Fbp => "fbp",
            Fusion::Concat => "concat",
            Fusion::VideoOnly => "video-only",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        [Fusion::Fbp, Fusion::Concat, Fusion::VideoOnly]
            .into_iter()
            .find(|f| f.name() == s)
    }

    pub fn uses_audio(self) -> bool {
        self != Fusion::VideoOnly
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub lambda_audio: f64,
    pub lambda_video: f64,
    pub reduced_video_dim: usize,
    pub fbp_o: usize,
    pub fbp_k: usize,
    pub dropout_p: f64,
    pub num_classes: usize,
    pub fusion: Fusion,
    pub encoder: AudioEncoderConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            lambda_audio: 0.0,
            lambda_video: 1.0,
            reduced_video_dim: 256,
            fbp_o: 128,
            fbp_k: 4,
            dropout_p: 0.3,
            num_classes: NUM_CLASSES,
            fusion: Fusion::Fbp,
            encoder: AudioEncoderConfig::full(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, l) in [
            ("lambda_audio", self.lambda_audio),
            ("lambda_video", self.lambda_video),
        ] {
            if !(0.0..=1.0).contains(&l) {
                return Err(Error::Input(format!("{name} {l} outside [0, 1]")));
            }
        }
        if self.reduced_video_dim == 0 || self.fbp_o == 0 || self.fbp_k == 0 {
            return Err(Error::Input(
                "reduced_video_dim, fbp_o and fbp_k must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Input(format!(
                "dropout_p {} outside [0, 1)",
                self.dropout_p
            )));
        }
        if self.num_classes != NUM_CLASSES {
            return Err(Error::Input(format!(
                "num_classes must be {NUM_CLASSES}, got {}",
                self.num_classes
            )));
        }
        self.encoder.validate()
    }

    /// Length of the vector fed to the classifier head.
    pub fn fused_dim(&self) -> usize {
        match self.fusion {
            Fusion::Fbp => self.fbp_o,
            Fusion::Concat => self.encoder.output_channels() + self.reduced_video_dim,
            Fusion::VideoOnly => self.reduced_video_dim,
        }
    }
}

/// Model input after preprocessing: a `1×F×T` spectrogram and an `L×C`
/// standardized video feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub spectrogram: Tensor,
    pub video: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardNodes {
    pub logits: NodeId,
    pub audio_weights: Option<NodeId>,
    pub audio_layout: Option<GridLayout>,
    pub video_weights: NodeId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    /// Attention over the flattened audio grid; empty without an audio branch.
    pub audio_weights: Vec<f64>,
    pub audio_layout: Option<GridLayout>,
    pub video_weights: Vec<f64>,
}

impl ForwardOutput {
    pub fn probabilities(&self) -> Vec<f64> {
        softmax(&self.logits)
    }

    /// Audio attention summed over frequency, one weight per grid time step.
    pub fn audio_time_weights(&self) -> Vec<f64> {
        self.audio_layout
            .map(|l| l.time_profile(&self.audio_weights))
            .unwrap_or_default()
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

/// Parameters of the whole network, held as an ordered list of named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: ModelConfig,
    video_dim: usize,
    params: Vec<NamedTensor>,
}

fn named(name: impl Into<String>, tensor: Tensor) -> NamedTensor {
    NamedTensor {
        name: name.into(),
        tensor,
    }
}

impl Network {
    /// Fresh parameters drawn from `config.seed`.
    pub fn init(config: &ModelConfig, video_dim: usize) -> Result<Self> {
        config.validate()?;
        if video_dim == 0 {
            return Err(Error::Input(
                "video feature dimension must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = Vec::new();
        let d = config.reduced_video_dim;
        if config.fusion.uses_audio() {
            for (i, (k, b)) in config.encoder.init(&mut rng)?.into_iter().enumerate() {
                params.push(named(format!("encoder.{i}.kernels"), k));
                params.push(named(format!("encoder.{i}.bias"), b));
            }
            let c_a = config.encoder.output_channels();
            let att = AttentionParams::init(c_a, c_a, config.lambda_audio, false, &mut rng)?;
            params.push(named("audio_attention.weight", att.weight));
            params.push(named("audio_attention.bias", att.bias));
            params.push(named("audio_attention.score", att.score));
        }
        let att = AttentionParams::init(video_dim, d, config.lambda_video, true, &mut rng)?;
        params.push(named("video_attention.weight", att.weight));
        params.push(named("video_attention.bias", att.bias));
        params.push(named("video_attention.score", att.score));
        if config.fusion == Fusion::Fbp {
            let c_a = config.encoder.output_channels();
            let fbp = FbpParams::init(
                c_a,
                d,
                config.fbp_k,
                config.fbp_o,
                config.dropout_p,
                &mut rng,
            )?;
            params.push(named("fbp.audio_proj", fbp.audio_proj));
            params.push(named("fbp.video_proj", fbp.video_proj));
        }
        let z = config.fused_dim();
        let bound = 1.0 / (z as f64).sqrt();
        params.push(named(
            "head.weight",
            uniform(&[z, config.num_classes], bound, &mut rng)?,
        ));
        params.push(named("head.bias", Tensor::zeros(&[config.num_classes])?));
        Ok(Self {
            config: config.clone(),
            video_dim,
            params,
        })
    }

    /// Rebuilds a network from stored tensors, which must match the names and
    /// shapes implied by `config` and `video_dim`.
    pub fn from_tensors(
        config: &ModelConfig,
        video_dim: usize,
        tensors: Vec<NamedTensor>,
    ) -> Result<Self> {
        let template = Self::init(config, video_dim)?;
        if tensors.len() != template.params.len() {
            return Err(Error::Contract(format!(
                "checkpoint holds {} tensors, configuration needs {}",
                tensors.len(),
                template.params.len()
            )));
        }
        for (want, got) in template.params.iter().zip(&tensors) {
            if want.name != got.name || want.tensor.shape() != got.tensor.shape() {
                return Err(Error::Contract(format!(
                    "checkpoint tensor {} {:?} does not match expected {} {:?}",
                    got.name,
                    got.tensor.shape(),
                    want.name,
                    want.tensor.shape()
                )));
            }
        }
        Ok(Self {
            config: config.clone(),
            video_dim,
            params: tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn video_dim(&self) -> usize {
        self.video_dim
    }

    pub fn named_tensors(&self) -> &[NamedTensor] {
        &self.params
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.params.iter().map(|p| &p.tensor)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|p| &mut p.tensor)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.tensor)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Rounds every parameter to the nearest `f32`, the checkpoint precision.
    pub fn quantize_f32(&mut self) {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }

    /// Adds all parameters to `g` as gradient-tracking leaves, in storage order.
    pub fn bind(&self, g: &mut Graph) -> Vec<NodeId> {
        self.tensors()
            .map(|t| g.leaf(t.clone().with_grad()))
            .collect()
    }

    /// Records the forward pass with parameters bound at `ids` (storage order).
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        ids: &[NodeId],
        input: &ModelInput,
        training: bool,
        seed: u64,
    ) -> Result<ForwardNodes> {
        self.forward_graph_inner(g, ids, input, training, seed, false)
    }

    fn forward_graph_inner(
        &self,
        g: &mut Graph,
        ids: &[NodeId],
        input: &ModelInput,
        training: bool,
        seed: u64,
        zero_video: bool,
    ) -> Result<ForwardNodes> {
        if ids.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "{} parameter nodes bound, network has {}",
                ids.len(),
                self.params.len()
            )));
        }
        let cfg = &self.config;
        let video_shape = input.video.shape();
        if video_shape.len() != 2 || video_shape[1] != self.video_dim {
            return Err(Error::Dimension(format!(
                "video features {video_shape:?} do not match model dimension {}",
                self.video_dim
            )));
        }
        let mut next = ids.iter().copied();
        let mut take = || next.next().expect("parameter count checked above");

        let mut audio = None;
        if cfg.fusion.uses_audio() {
            let layers: Vec<(NodeId, NodeId)> = (0..cfg.encoder.layers.len())
                .map(|_| (take(), take()))
                .collect();
            let spec = g.constant(input.spectrogram.clone());
            let grid = cfg.encoder.encode_graph(g, spec, &layers)?;
            let (elements, layout) = flatten_grid_graph(g, grid)?;
            let binding = AttentionBinding {
                weight: take(),
                bias: take(),
                score: take(),
                lambda: cfg.lambda_audio,
                pool_transformed: false,
            };
            audio = Some((attention_pool_graph(g, elements, &binding)?, layout));
        }
        let frames = g.constant(input.video.clone());
        let binding = AttentionBinding {
            weight: take(),
            bias: take(),
            score: take(),
            lambda: cfg.lambda_video,
            pool_transformed: true,
        };
        let video = attention_pool_graph(g, frames, &binding)?;
        let v = if zero_video {
            g.scale(video.pooled, 0.0)
        } else {
            video.pooled
        };

        let fused = match (cfg.fusion, audio) {
            (Fusion::Fbp, Some((a, _))) => {
                let binding = FbpBinding {
                    audio_proj: take(),
                    video_proj: take(),
                    k: cfg.fbp_k,
                    dropout_p: cfg.dropout_p,
                };
                fbp_graph(g, a.pooled, v, &binding, training, seed)?.fused
            }
            (Fusion::Concat, Some((a, _))) => {
                let an = g.l2_normalize(a.pooled);
                let vn = g.l2_normalize(v);
                let joined = g.concat(&[an, vn])?;
                let joined = g.scale(joined, std::f64::consts::FRAC_1_SQRT_2);
                g.dropout(joined, cfg.dropout_p, training, seed)?
            }
            (Fusion::VideoOnly, None) => {
                let dropped = g.dropout(v, cfg.dropout_p, training, seed)?;
                g.l2_normalize(dropped)
            }
            _ => unreachable!("audio branch presence follows the fusion mode"),
        };
        let width = g.value(fused).numel();
        let row = g.reshape(fused, &[1, width])?;
        let (head_w, head_b) = (take(), take());
        let logits = g.matmul(row, head_w)?;
        let logits = g.add_row(logits, head_b)?;
        let logits = g.reshape(logits, &[cfg.num_classes])?;
        Ok(ForwardNodes {
            logits,
            audio_weights: audio.map(|(a, _)| a.weights),
            audio_layout: audio.map(|(_, l)| l),
            video_weights: video.weights,
        })
    }

    fn run(
        &self,
        input: &ModelInput,
        training: bool,
        seed: u64,
        zero_video: bool,
    ) -> Result<ForwardOutput> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = self.tensors().map(|t| g.constant(t.clone())).collect();
        let nodes = self.forward_graph_inner(&mut g, &ids, input, training, seed, zero_video)?;
        Ok(ForwardOutput {
            logits: g.data(nodes.logits).to_vec(),
            audio_weights: nodes
                .audio_weights
                .map(|w| g.data(w).to_vec())
                .unwrap_or_default(),
            audio_layout: nodes.audio_layout,
            video_weights: g.data(nodes.video_weights).to_vec(),
        })
    }

    pub fn forward(&self, input: &ModelInput, training: bool, seed: u64) -> Result<ForwardOutput> {
        self.run(input, training, seed, false)
    }

    /// Eval-mode forward with the pooled video vector replaced by zeros.
    pub fn forward_without_video(&self, input: &ModelInput) -> Result<ForwardOutput> {
        self.run(input, false, 0, true)
    }
}
