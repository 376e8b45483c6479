use avfusion::checkpoint::{self, NamedTensor};
use avfusion::data::{generate_split, Dataset, FeatureSequence, Sample, Split, SyntheticSpec};
use avfusion::dsp::{Spectrogram, SpectrogramConfig};
use avfusion::error::Error;
use avfusion::gradcheck::{check_gradients, GradCheckConfig};
use avfusion::labels::{Emotion, NUM_CLASSES};
use avfusion::model::{
    ensemble_mean, evaluate, train, AdamConfigSerde, AudioEncoderConfig, EvalReport, Fusion,
    ModelConfig, ModelInput, Network, TrainConfig, TrainedModel,
};
use avfusion::tensor::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config(fusion: Fusion, seed: u64) -> ModelConfig {
    ModelConfig {
        fusion,
        encoder: AudioEncoderConfig::tiny(),
        reduced_video_dim: 16,
        fbp_o: 16,
        fbp_k: 2,
        seed,
        ..ModelConfig::default()
    }
}

fn short_spec(train: usize, test: usize) -> SyntheticSpec {
    SyntheticSpec {
        train_samples: train,
        val_samples: 0,
        test_samples: test,
        duration_min: 0.2,
        duration_max: 0.4,
        ..SyntheticSpec::default()
    }
}

fn dataset(spec: &SyntheticSpec, split: Split) -> Dataset {
    Dataset::from_generated(
        &generate_split(spec, split).unwrap(),
        &SpectrogramConfig::default(),
    )
    .unwrap()
}

fn train_cfg(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        adam: AdamConfigSerde {
            lr: 1e-3,
            ..AdamConfigSerde::default()
        },
    }
}

fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

fn untrained(cfg: &ModelConfig, video_dim: usize) -> TrainedModel {
    TrainedModel {
        network: Network::init(cfg, video_dim).unwrap(),
        norm: avfusion::data::FeatureNorm::identity(video_dim),
        spectrogram: SpectrogramConfig::default(),
    }
}

#[test]
fn tiny_encoder_shapes_follow_the_floor_chain() {
    let enc = AudioEncoderConfig::tiny();
    assert_eq!(enc.output_shape(200, 97).unwrap(), [16, 48, 23]);
    let short = enc.output_shape(200, 97).unwrap();
    let long = enc.output_shape(200, 194).unwrap();
    assert_eq!(short[1], long[1]);
    assert!(long[2] > short[2]);
}

#[test]
fn zero_spectrogram_encodes_to_zero_grid() {
    let enc = AudioEncoderConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new();
    let params: Vec<_> = enc
        .init(&mut rng)
        .unwrap()
        .into_iter()
        .map(|(k, b)| (g.leaf(k), g.leaf(b)))
        .collect();
    let x = g.constant(Tensor::zeros(&[1, 200, 97]).unwrap());
    let grid = enc.encode_graph(&mut g, x, &params).unwrap();
    assert_eq!(g.shape(grid), &[16, 48, 23]);
    assert!(g.data(grid).iter().all(|&v| v == 0.0));
}

#[test]
fn undersized_spectrogram_names_the_minimum() {
    let cfg = small_config(Fusion::Fbp, 0);
    let net = Network::init(&cfg, 12).unwrap();
    let input = ModelInput {
        spectrogram: Tensor::zeros(&[1, 200, 5]).unwrap(),
        video: Tensor::zeros(&[3, 12]).unwrap(),
    };
    let err = net.forward(&input, false, 0).unwrap_err();
    assert!(
        matches!(err, Error::Input(ref m) if m.contains("9×9")),
        "{err}"
    );
}

#[test]
fn forward_outputs_and_determinism() {
    let spec = short_spec(7, 0);
    let ds = dataset(&spec, Split::Train);
    let model = untrained(&small_config(Fusion::Fbp, 3), 64);
    for s in &ds.samples {
        let a = model.forward(s).unwrap();
        let b = model.forward(s).unwrap();
        assert_eq!(a.logits.len(), NUM_CLASSES);
        assert!((a.probabilities().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(a.logits, b.logits);
        // λ_audio = 0: exactly uniform audio weights
        let l = a.audio_weights.len() as f64;
        assert!(a.audio_weights.iter().all(|&w| w == 1.0 / l));
        assert_eq!(a.video_weights.len(), s.features.frames());
        let profile = a.audio_time_weights();
        assert!((profile.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn zero_video_lambda_gives_uniform_video_weights() {
    let cfg = ModelConfig {
        lambda_video: 0.0,
        ..small_config(Fusion::Fbp, 4)
    };
    let ds = dataset(&short_spec(7, 0), Split::Train);
    let model = untrained(&cfg, 64);
    for s in &ds.samples {
        let w = model.forward(s).unwrap().video_weights;
        assert!(w.iter().all(|&x| x == 1.0 / w.len() as f64));
    }
}

#[test]
fn end_to_end_gradients_at_tiny_dimensions() {
    let cfg = ModelConfig {
        lambda_audio: 0.7,
        lambda_video: 1.0,
        reduced_video_dim: 5,
        fbp_o: 4,
        fbp_k: 2,
        dropout_p: 0.3,
        encoder: AudioEncoderConfig::tiny(),
        seed: 9,
        ..ModelConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let net = Network::init(&cfg, 8).unwrap();
    let n_params = net.named_tensors().len();
    // larger parameters so no gradient is vanishingly small
    let mut inputs: Vec<Tensor> = net
        .tensors()
        .map(|t| random_tensor(t.shape(), -0.6, 0.6, &mut rng).with_grad())
        .collect();
    inputs.push(random_tensor(&[1, 13, 15], 0.0, 2.0, &mut rng));
    inputs.push(random_tensor(&[3, 8], -1.5, 1.5, &mut rng));
    let report = check_gradients(
        |g, ids| {
            let input = ModelInput {
                spectrogram: g.value(ids[n_params]).clone(),
                video: g.value(ids[n_params + 1]).clone(),
            };
            let nodes = net.forward_graph(g, &ids[..n_params], &input, false, 0)?;
            g.cross_entropy(nodes.logits, &[Emotion::Fear.index()])
        },
        &inputs,
        &GradCheckConfig {
            coordinates: usize::MAX,
            ..GradCheckConfig::default()
        },
    )
    .unwrap();
    for i in 0..n_params {
        assert!(
            report.checks.iter().any(|c| c.input == i),
            "parameter {i} not probed"
        );
    }
    assert!(report.checks.len() >= 100);
    assert!(report.passed(), "worst {:?}", report.worst());
}

#[test]
fn one_epoch_smoke_and_empty_dataset() {
    let ds = dataset(&short_spec(4, 0), Split::Train);
    let out = train(
        &ds,
        &small_config(Fusion::Fbp, 1),
        &train_cfg(1),
        SpectrogramConfig::default(),
    )
    .unwrap();
    assert_eq!(out.epoch_losses.len(), 1);
    let empty = Dataset::default();
    assert!(matches!(
        train(
            &empty,
            &small_config(Fusion::Fbp, 1),
            &train_cfg(1),
            SpectrogramConfig::default()
        ),
        Err(Error::Input(_))
    ));
}

#[test]
fn overfits_a_single_repeated_sample() {
    let base = dataset(&short_spec(7, 0), Split::Train);
    let one = base.samples[3].clone();
    let ds = Dataset::from_samples(vec![one.clone(); 4]).unwrap();
    let cfg = TrainConfig {
        batch_size: 1,
        ..train_cfg(50)
    };
    let out = train(
        &ds,
        &small_config(Fusion::Fbp, 2),
        &cfg,
        SpectrogramConfig::default(),
    )
    .unwrap();
    let losses = &out.epoch_losses;
    assert!(losses[49] < 0.5 * losses[0], "{losses:?}");
    // non-increasing up to dropout noise
    for w in losses.windows(2) {
        assert!(w[1] < w[0] + 0.1, "{losses:?}");
    }
    let report = evaluate(&out.model, &ds).unwrap();
    assert_eq!(report.accuracy, 1.0);
}

#[test]
fn training_is_deterministic() {
    let ds = dataset(&short_spec(7, 0), Split::Train);
    let cfg = small_config(Fusion::Fbp, 5);
    let a = train(&ds, &cfg, &train_cfg(3), SpectrogramConfig::default()).unwrap();
    let b = train(&ds, &cfg, &train_cfg(3), SpectrogramConfig::default()).unwrap();
    assert_eq!(a.epoch_losses, b.epoch_losses);
    assert_eq!(a.model, b.model);
    let c = train(
        &ds,
        &small_config(Fusion::Fbp, 6),
        &train_cfg(3),
        SpectrogramConfig::default(),
    )
    .unwrap();
    assert_ne!(a.epoch_losses, c.epoch_losses);
}

#[test]
fn checkpoint_reload_reproduces_training_loss() {
    let spec = short_spec(14, 0);
    let ds = dataset(&spec, Split::Train);
    let out = train(
        &ds,
        &small_config(Fusion::Concat, 7),
        &train_cfg(3),
        SpectrogramConfig::default(),
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.fbpm");
    out.model.save(&path).unwrap();
    let back = TrainedModel::load(&path).unwrap();
    assert_eq!(back, out.model);
    let loss = evaluate(&back, &ds).unwrap().mean_loss;
    assert!((loss - out.final_train_loss).abs() < 1e-6);

    // a sidecar describing a different architecture is rejected
    let mut tensors = checkpoint::read(&path).unwrap();
    tensors.pop();
    checkpoint::write(&path, &tensors).unwrap();
    assert!(matches!(TrainedModel::load(&path), Err(Error::Contract(_))));
    tensors.push(NamedTensor {
        name: "head.bias".into(),
        tensor: Tensor::zeros(&[3]).unwrap(),
    });
    checkpoint::write(&path, &tensors).unwrap();
    assert!(matches!(TrainedModel::load(&path), Err(Error::Contract(_))));
}

#[test]
fn evaluate_rejects_mismatched_feature_dim() {
    let ds = dataset(&short_spec(7, 0), Split::Train);
    let model = untrained(&small_config(Fusion::Fbp, 0), 32);
    assert!(matches!(evaluate(&model, &ds), Err(Error::Contract(_))));
}

#[test]
fn fusion_depends_on_the_video_branch() {
    let ds = dataset(&short_spec(14, 0), Split::Train);
    for fusion in [Fusion::Fbp, Fusion::Concat] {
        let out = train(
            &ds,
            &small_config(fusion, 8),
            &train_cfg(3),
            SpectrogramConfig::default(),
        )
        .unwrap();
        for s in &ds.samples[..4] {
            let full = out.model.forward(s).unwrap().logits;
            let input = out.model.prepare(s).unwrap();
            let ablated = out
                .model
                .network
                .forward_without_video(&input)
                .unwrap()
                .logits;
            let diff = full
                .iter()
                .zip(&ablated)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(diff > 1e-6, "{fusion:?}: {diff}");
        }
    }
}

fn report_of(probs: Vec<(Emotion, Vec<f64>)>) -> EvalReport {
    EvalReport::from_predictions(
        probs
            .into_iter()
            .enumerate()
            .map(|(i, (e, p))| (format!("s{i}"), e, p))
            .collect(),
    )
    .unwrap()
}

fn one_hot(i: usize) -> Vec<f64> {
    let mut v = vec![0.0; NUM_CLASSES];
    v[i] = 1.0;
    v
}

#[test]
fn perfect_predictions_give_identity_confusion() {
    let r = report_of(
        Emotion::ALL
            .iter()
            .map(|&e| (e, one_hot(e.index())))
            .collect(),
    );
    assert_eq!(r.accuracy, 1.0);
    for i in 0..NUM_CLASSES {
        for j in 0..NUM_CLASSES {
            assert_eq!(r.confusion[i][j], usize::from(i == j));
        }
    }
    let mut csv = Vec::new();
    r.write_confusion_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 8);
    assert!(lines.iter().all(|l| l.split(',').count() == 8));
}

#[test]
fn random_predictor_is_near_chance_and_rows_sum_to_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let n = 7000;
    let r = report_of(
        (0..n)
            .map(|i| {
                let p: Vec<f64> = (0..NUM_CLASSES).map(|_| rng.gen::<f64>()).collect();
                (Emotion::ALL[i % NUM_CLASSES], p)
            })
            .collect(),
    );
    // binomial sd at n = 7000 is about 0.0042
    assert!((r.accuracy - 1.0 / 7.0).abs() < 0.02, "{}", r.accuracy);
    for row in r.confusion {
        assert_eq!(row.iter().sum::<usize>(), n / NUM_CLASSES);
    }
}

#[test]
fn ensemble_rules() {
    let a = report_of(vec![
        (Emotion::Angry, one_hot(0)),
        (Emotion::Sad, one_hot(5)),
    ]);
    assert_eq!(ensemble_mean(&[a.clone(), a.clone()]).unwrap(), a);

    let x = report_of(vec![(Emotion::Disgust, one_hot(0))]);
    let y = report_of(vec![(Emotion::Disgust, one_hot(1))]);
    let e = ensemble_mean(&[x.clone(), y]).unwrap();
    assert_eq!(e.per_sample[0].probabilities[..2], [0.5, 0.5]);
    assert_eq!(e.per_sample[0].predicted, Emotion::Angry);

    assert!(matches!(ensemble_mean(std::slice::from_ref(&x)), Err(Error::Input(_))));
    let other = report_of(vec![
        (Emotion::Angry, one_hot(0)),
        (Emotion::Sad, one_hot(5)),
    ]);
    assert!(matches!(ensemble_mean(&[x, other]), Err(Error::Input(_))));
}

#[test]
fn network_from_tensors_round_trip() {
    let cfg = small_config(Fusion::VideoOnly, 2);
    let net = Network::init(&cfg, 10).unwrap();
    assert!(net.get("encoder.0.kernels").is_none());
    let back = Network::from_tensors(&cfg, 10, net.named_tensors().to_vec()).unwrap();
    assert_eq!(back, net);
    assert!(Network::from_tensors(&cfg, 11, net.named_tensors().to_vec()).is_err());
}

#[test]
fn samples_with_one_frame_are_valid() {
    let model = untrained(&small_config(Fusion::Fbp, 0), 4);
    let s = Sample {
        id: "x".into(),
        label: Emotion::Happy,
        spectrogram: Spectrogram::from_parts(20, 20, vec![0.5; 400]).unwrap(),
        features: FeatureSequence::new(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
    };
    let out = model.forward(&s).unwrap();
    assert_eq!(out.video_weights, vec![1.0]);
}
