//! The full network: audio encoder, two attention streams, fusion, and a
//! linear classifier, plus training and evaluation.

mod encoder;
mod network;
mod train;

pub use encoder::{AudioEncoderConfig, EncoderVariant, LayerSpec, PoolSpec};
pub use network::{softmax, ForwardNodes, ForwardOutput, Fusion, ModelConfig, ModelInput, Network};
pub use train::{
    argmax, ensemble_mean, evaluate, sidecar_path, train, AdamConfigSerde, EvalReport,
    SamplePrediction, TrainConfig, TrainOutcome, TrainedModel,
};
