//! Fully convolutional audio encoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::uniform;
use crate::error::{Error, Result};
use crate::tensor::{window_extent, Graph, LrnParams, NodeId, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolSpec {
    pub size: usize,
    pub stride: usize,
}

/// One conv block: conv → ReLU → optional LRN → optional max-pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub channels: usize,
    pub lrn: bool,
    pub pool: Option<PoolSpec>,
}

impl LayerSpec {
    const fn conv(kernel: usize, stride: usize, padding: usize, channels: usize) -> Self {
        Self {
            kernel,
            stride,
            padding,
            channels,
            lrn: false,
            pool: None,
        }
    }

    const fn with_lrn(mut self) -> Self {
        self.lrn = true;
        self
    }

    const fn with_pool(mut self, size: usize, stride: usize) -> Self {
        self.pool = Some(PoolSpec { size, stride });
        self
    }

    /// Output extent along one axis, or `None` if the input is too small.
    pub fn output_extent(&self, input: usize) -> Option<usize> {
        let conv = window_extent(input, self.kernel, self.stride, self.padding)?;
        match self.pool {
            Some(p) => window_extent(conv, p.size, p.stride, 0),
            None => Some(conv),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderVariant {
    Full,
    Tiny,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioEncoderConfig {
    pub variant: EncoderVariant,
    pub layers: Vec<LayerSpec>,
    pub lrn: LrnParams,
}

impl AudioEncoderConfig {
    /// AlexNet convolution stack on a one-channel spectrogram; 256 output channels.
    pub fn full() -> Self {
        Self {
            variant: EncoderVariant::Full,
            layers: vec![
                LayerSpec::conv(11, 4, 0, 96).with_lrn().with_pool(3, 2),
                LayerSpec::conv(5, 1, 2, 256).with_lrn().with_pool(3, 2),
                LayerSpec::conv(3, 1, 1, 384),
                LayerSpec::conv(3, 1, 1, 384),
                LayerSpec::conv(3, 1, 1, 256).with_pool(3, 2),
            ],
            lrn: LrnParams::default(),
        }
    }

    /// Two small strided convolutions; 16 output channels.
    pub fn tiny() -> Self {
        Self {
            variant: EncoderVariant::Tiny,
            layers: vec![LayerSpec::conv(5, 2, 0, 8), LayerSpec::conv(3, 2, 0, 16)],
            lrn: LrnParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Input(
                "audio encoder needs at least one layer".into(),
            ));
        }
        let mut c_in = 1;
        for (i, l) in self.layers.iter().enumerate() {
            if l.kernel == 0 || l.stride == 0 || l.channels == 0 {
                return Err(Error::Input(format!(
                    "encoder layer {i}: kernel, stride and channels must be positive"
                )));
            }
            if l.pool.is_some_and(|p| p.size == 0 || p.stride == 0) {
                return Err(Error::Input(format!(
                    "encoder layer {i}: pool size and stride must be positive"
                )));
            }
            if l.lrn && (self.lrn.size.is_multiple_of(2) || self.lrn.size > 2 * l.channels - 1) {
                return Err(Error::Input(format!(
                    "encoder layer {i}: LRN size {} invalid for {} channels",
                    self.lrn.size, l.channels
                )));
            }
            c_in = l.channels;
        }
        debug_assert!(c_in > 0);
        Ok(())
    }

    /// Channel count of the output grid.
    pub fn output_channels(&self) -> usize {
        self.layers.last().map_or(1, |l| l.channels)
    }

    /// Output extent along one axis for an input extent.
    pub fn output_extent(&self, input: usize) -> Option<usize> {
        self.layers
            .iter()
            .try_fold(input, |n, l| l.output_extent(n))
    }

    /// Smallest input extent (per axis) that survives every layer.
    pub fn min_input(&self) -> usize {
        // extents are monotone in the input, so the first valid size is the minimum
        (1..)
            .find(|&n| self.output_extent(n).is_some())
            .unwrap_or(usize::MAX)
    }

    /// Grid shape `[C_a, F', T']` for an F×T spectrogram.
    pub fn output_shape(&self, freq: usize, time: usize) -> Result<[usize; 3]> {
        match (self.output_extent(freq), self.output_extent(time)) {
            (Some(f), Some(t)) => Ok([self.output_channels(), f, t]),
            _ => {
                let min = self.min_input();
                Err(Error::Input(format!(
                    "spectrogram {freq}×{time} is smaller than the encoder minimum {min}×{min}"
                )))
            }
        }
    }

    /// Kernel and bias tensors for every layer: kernels uniform in
    /// ±1/√fan_in, zero biases.
    pub fn init<R: Rng>(&self, rng: &mut R) -> Result<Vec<(Tensor, Tensor)>> {
        self.validate()?;
        let mut c_in = 1;
        let mut out = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let fan_in = c_in * l.kernel * l.kernel;
            let kernels = uniform(
                &[l.channels, c_in, l.kernel, l.kernel],
                1.0 / (fan_in as f64).sqrt(),
                rng,
            )?;
            out.push((kernels, Tensor::zeros(&[l.channels])?));
            c_in = l.channels;
        }
        Ok(out)
    }

    /// Records the encoder on a `1×F×T` input; `params` holds (kernel, bias)
    /// node pairs in layer order.
    pub fn encode_graph(
        &self,
        g: &mut Graph,
        input: NodeId,
        params: &[(NodeId, NodeId)],
    ) -> Result<NodeId> {
        if params.len() != self.layers.len() {
            return Err(Error::Contract(format!(
                "encoder has {} layers but {} parameter pairs were bound",
                self.layers.len(),
                params.len()
            )));
        }
        let shape = g.shape(input).to_vec();
        let [_, f, t] = shape[..] else {
            return Err(Error::Dimension(format!(
                "encoder input must be 1×F×T, got {shape:?}"
            )));
        };
        self.output_shape(f, t)?;
        let mut x = input;
        for (l, &(kernels, bias)) in self.layers.iter().zip(params) {
            x = g.conv2d(x, kernels, l.stride, l.padding)?;
            x = g.add_channel(x, bias)?;
            x = g.relu(x);
            if l.lrn {
                x = g.local_response_norm(x, self.lrn)?;
            }
            if let Some(p) = l.pool {
                x = g.maxpool2d(x, p.size, p.stride)?;
            }
        }
        Ok(x)
    }
}
