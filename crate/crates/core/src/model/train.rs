use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{ForwardOutput, ModelConfig, ModelInput, Network};
use crate::checkpoint;
use crate::data::{Dataset, FeatureNorm, Sample};
use crate::dsp::SpectrogramConfig;
use crate::error::{Error, Result};
use crate::labels::{Emotion, NUM_CLASSES};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Samples per optimizer step; gradients are accumulated one sample at a time.
    pub batch_size: usize,
    pub adam: AdamConfigSerde,
}

/// Serializable mirror of [`AdamConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfigSerde {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<AdamConfigSerde> for AdamConfig {
    fn from(c: AdamConfigSerde) -> Self {
        AdamConfig {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
        }
    }
}

impl Default for AdamConfigSerde {
    fn default() -> Self {
        let c = AdamConfig::default();
        Self {
            lr: c.lr,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.eps,
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 8,
            adam: AdamConfigSerde::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Input(
                "epochs and batch_size must be positive".into(),
            ));
        }
        let a = self.adam;
        if !(a.lr > 0.0
            && (0.0..1.0).contains(&a.beta1)
            && (0.0..1.0).contains(&a.beta2)
            && a.eps > 0.0)
        {
            return Err(Error::Input(format!("invalid Adam settings {a:?}")));
        }
        Ok(())
    }
}

/// Network parameters together with everything needed to preprocess inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub network: Network,
    pub norm: FeatureNorm,
    pub spectrogram: SpectrogramConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Sidecar {
    model: ModelConfig,
    video_dim: usize,
    normalization: FeatureNorm,
    spectrogram: SpectrogramConfig,
}

/// Sidecar path for a checkpoint: `model.fbpm` → `model.json`.
pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

impl TrainedModel {
    pub fn prepare(&self, sample: &Sample) -> Result<ModelInput> {
        let s = &sample.spectrogram;
        Ok(ModelInput {
            spectrogram: Tensor::new(&[1, s.freq_bins(), s.frames()], s.bins().to_vec())?,
            video: {
                let f = self.norm.apply(&sample.features)?;
                Tensor::new(&[f.frames(), f.dim()], f.data().to_vec())?
            },
        })
    }

    pub fn forward(&self, sample: &Sample) -> Result<ForwardOutput> {
        self.network.forward(&self.prepare(sample)?, false, 0)
    }

    /// Writes the parameter file and its JSON sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::write(path, self.network.named_tensors())?;
        let sidecar = Sidecar {
            model: self.network.config().clone(),
            video_dim: self.network.video_dim(),
            normalization: self.norm.clone(),
            spectrogram: self.spectrogram,
        };
        let side = sidecar_path(path);
        fs::write(&side, serde_json::to_vec_pretty(&sidecar)?).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let bytes = fs::read(&side).map_err(|e| Error::io(&side, e))?;
        let sidecar: Sidecar = serde_json::from_slice(&bytes)?;
        if sidecar.normalization.dim() != sidecar.video_dim {
            return Err(Error::Contract(format!(
                "normalization has {} dimensions, model expects {}",
                sidecar.normalization.dim(),
                sidecar.video_dim
            )));
        }
        let tensors = checkpoint::read(path)?;
        Ok(Self {
            network: Network::from_tensors(&sidecar.model, sidecar.video_dim, tensors)?,
            norm: sidecar.normalization,
            spectrogram: sidecar.spectrogram,
        })
    }

    fn check_dataset(&self, dataset: &Dataset) -> Result<()> {
        match dataset.feature_dim() {
            Some(d) if d != self.network.video_dim() => Err(Error::Contract(format!(
                "dataset video dim {d} does not match model video dim {}",
                self.network.video_dim()
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    /// Mean training-mode loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// Eval-mode mean loss over the training set with the final (f32-rounded) parameters.
    pub final_train_loss: f64,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z =
        seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Minimizes mean cross-entropy with Adam. Samples are visited one at a time
/// in a seeded shuffle; gradients are averaged over each batch before a step.
/// Parameters are rounded to `f32` at the end so a saved checkpoint
/// reproduces the returned model exactly.
pub fn train(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    spectrogram: SpectrogramConfig,
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    let video_dim = dataset
        .feature_dim()
        .ok_or_else(|| Error::Input("cannot train on an empty dataset".into()))?;
    let mut model = TrainedModel {
        network: Network::init(model_cfg, video_dim)?,
        norm: FeatureNorm::fit(dataset)?,
        spectrogram,
    };
    let inputs = dataset
        .samples
        .iter()
        .map(|s| Ok((model.prepare(s)?, s.label.index())))
        .collect::<Result<Vec<_>>>()?;

    let mut adam = Adam::new(train_cfg.adam.into());
    let mut rng = ChaCha8Rng::seed_from_u64(mix(model_cfg.seed, 0x5348_5546, 0));
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut epoch_losses = Vec::with_capacity(train_cfg.epochs);
    for epoch in 0..train_cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in order.chunks(train_cfg.batch_size) {
            for t in model.network.tensors_mut() {
                t.grad = Some(vec![0.0; t.numel()]);
            }
            let scale = 1.0 / batch.len() as f64;
            for (pos, &i) in batch.iter().enumerate() {
                let (input, label) = &inputs[i];
                let seed = mix(model_cfg.seed, epoch as u64 + 1, (pos + i * 7919) as u64);
                let mut g = Graph::new();
                let ids = model.network.bind(&mut g);
                let nodes = model
                    .network
                    .forward_graph(&mut g, &ids, input, true, seed)?;
                let loss = g.cross_entropy(nodes.logits, &[*label])?;
                total += g.data(loss)[0];
                let loss = g.scale(loss, scale);
                g.backward(loss)?;
                for (t, id) in model.network.tensors_mut().zip(&ids) {
                    if let Some(grad) = g.grad(*id) {
                        t.accumulate_grad(grad)?;
                    }
                }
            }
            adam.step(model.network.tensors_mut())?;
        }
        epoch_losses.push(total / inputs.len() as f64);
    }
    for t in model.network.tensors_mut() {
        t.zero_grad();
    }
    model.network.quantize_f32();
    let final_train_loss = evaluate(&model, dataset)?.mean_loss;
    Ok(TrainOutcome {
        model,
        epoch_losses,
        final_train_loss,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePrediction {
    pub id: String,
    pub label: Emotion,
    pub predicted: Emotion,
    pub probabilities: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Rows are true classes, columns predicted classes.
    pub confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
    pub mean_loss: f64,
    pub per_sample: Vec<SamplePrediction>,
}

/// Index of the largest probability; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

impl EvalReport {
    /// Builds a report from (id, label, probabilities) triples.
    pub fn from_predictions(items: Vec<(String, Emotion, Vec<f64>)>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Input("cannot report on an empty sample set".into()));
        }
        let mut confusion = [[0; NUM_CLASSES]; NUM_CLASSES];
        let mut correct = 0;
        let mut loss = 0.0;
        let mut per_sample = Vec::with_capacity(items.len());
        for (id, label, probabilities) in items {
            if probabilities.len() != NUM_CLASSES {
                return Err(Error::Dimension(format!(
                    "sample {id}: {} class probabilities, expected {NUM_CLASSES}",
                    probabilities.len()
                )));
            }
            let predicted = Emotion::from_index(argmax(&probabilities))?;
            confusion[label.index()][predicted.index()] += 1;
            correct += usize::from(predicted == label);
            loss -= probabilities[label.index()].max(f64::MIN_POSITIVE).ln();
            per_sample.push(SamplePrediction {
                id,
                label,
                predicted,
                probabilities,
            });
        }
        let n = per_sample.len() as f64;
        Ok(Self {
            accuracy: correct as f64 / n,
            confusion,
            mean_loss: loss / n,
            per_sample,
        })
    }

    pub fn len(&self) -> usize {
        self.per_sample.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_sample.is_empty()
    }

    /// `true\predicted` header plus one row per true class.
    pub fn write_confusion_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let names: Vec<&str> = Emotion::ALL.iter().map(|e| e.name()).collect();
        writeln!(out, "true\\predicted,{}", names.join(","))?;
        for (e, row) in Emotion::ALL.iter().zip(&self.confusion) {
            let cells: Vec<String> = row.iter().map(usize::to_string).collect();
            writeln!(out, "{},{}", e.name(), cells.join(","))?;
        }
        Ok(())
    }
}

/// Eval-mode predictions for every sample. The mean loss is the
/// cross-entropy computed from the logits.
pub fn evaluate(model: &TrainedModel, dataset: &Dataset) -> Result<EvalReport> {
    model.check_dataset(dataset)?;
    let mut items = Vec::with_capacity(dataset.len());
    let mut loss = 0.0;
    for s in &dataset.samples {
        let out = model.forward(s)?;
        let max = out.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + out.logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        loss += lse - out.logits[s.label.index()];
        items.push((s.id.clone(), s.label, out.probabilities()));
    }
    let mut report = EvalReport::from_predictions(items)?;
    report.mean_loss = loss / dataset.len() as f64;
    Ok(report)
}

/// Averages class probabilities across models sample by sample.
pub fn ensemble_mean(reports: &[EvalReport]) -> Result<EvalReport> {
    if reports.len() < 2 {
        return Err(Error::Input(format!(
            "an ensemble needs at least 2 reports, got {}",
            reports.len()
        )));
    }
    let first = &reports[0];
    for (i, r) in reports.iter().enumerate().skip(1) {
        let same = r.len() == first.len()
            && r.per_sample
                .iter()
                .zip(&first.per_sample)
                .all(|(a, b)| a.id == b.id && a.label == b.label);
        if !same {
            return Err(Error::Input(format!(
                "report {i} covers a different sample set"
            )));
        }
    }
    let items = first
        .per_sample
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let mut probs = vec![0.0; NUM_CLASSES];
            for r in reports {
                probs
                    .iter_mut()
                    .zip(&r.per_sample[j].probabilities)
                    .for_each(|(p, q)| *p += q);
            }
            probs.iter_mut().for_each(|p| *p /= reports.len() as f64);
            (s.id.clone(), s.label, probs)
        })
        .collect();
    EvalReport::from_predictions(items)
}
