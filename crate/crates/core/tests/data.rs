use std::fs;
use std::path::Path;

use avfusion::data::{
    generate_split, generate_synthetic, load_manifest, read_feature_file, read_segments, Dataset,
    Split, SyntheticSpec,
};
use avfusion::dsp::{read_wav, SpectrogramConfig};
use avfusion::labels::NUM_CLASSES;

fn nearest_mean_accuracy(train: &[(usize, Vec<f64>)], test: &[(usize, Vec<f64>)]) -> f64 {
    let dim = train[0].1.len();
    let mut means = vec![vec![0.0; dim]; NUM_CLASSES];
    let mut counts = [0usize; NUM_CLASSES];
    for (c, x) in train {
        counts[*c] += 1;
        means[*c].iter_mut().zip(x).for_each(|(m, v)| *m += v);
    }
    for (m, n) in means.iter_mut().zip(counts) {
        m.iter_mut().for_each(|v| *v /= n.max(1) as f64);
    }
    let correct = test
        .iter()
        .filter(|(c, x)| {
            let dist = |m: &Vec<f64>| m.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
            let best = (0..NUM_CLASSES)
                .min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b])))
                .unwrap();
            best == *c
        })
        .count();
    correct as f64 / test.len() as f64
}

fn frame_means(spec: &SyntheticSpec, split: Split) -> Vec<(usize, Vec<f64>)> {
    generate_split(spec, split)
        .unwrap()
        .into_iter()
        .map(|s| (s.label.index(), s.features.mean_frame()))
        .collect()
}

fn short(spec: SyntheticSpec) -> SyntheticSpec {
    SyntheticSpec {
        duration_min: 0.1,
        duration_max: 0.2,
        ..spec
    }
}

#[test]
fn noiseless_video_is_separable_by_nearest_class_mean() {
    let spec = short(SyntheticSpec {
        noise: 0.0,
        train_samples: 70,
        test_samples: 70,
        ..SyntheticSpec::default()
    });
    let acc = nearest_mean_accuracy(
        &frame_means(&spec, Split::Train),
        &frame_means(&spec, Split::Test),
    );
    assert_eq!(acc, 1.0);
}

#[test]
fn disabling_video_signal_leaves_chance_accuracy() {
    let spec = short(SyntheticSpec {
        video_signal: false,
        train_samples: 700,
        test_samples: 700,
        ..SyntheticSpec::default()
    });
    let acc = nearest_mean_accuracy(
        &frame_means(&spec, Split::Train),
        &frame_means(&spec, Split::Test),
    );
    // 700 balanced trials at p = 1/7: sd ≈ 0.013
    assert!((acc - 1.0 / 7.0).abs() < 0.05, "accuracy {acc}");
}

#[test]
fn classes_are_balanced() {
    let spec = short(SyntheticSpec::default());
    for split in Split::ALL {
        let samples = generate_split(&spec, split).unwrap();
        let mut counts = [0; NUM_CLASSES];
        samples.iter().for_each(|s| counts[s.label.index()] += 1);
        assert!(
            counts
                .iter()
                .all(|&c| c == spec.samples(split) / NUM_CLASSES),
            "{counts:?}"
        );
    }
}

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn written_dataset_is_deterministic_and_self_consistent() {
    let spec = SyntheticSpec {
        train_samples: 14,
        val_samples: 7,
        test_samples: 7,
        duration_min: 0.3,
        duration_max: 0.5,
        ..SyntheticSpec::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let summary = generate_synthetic(&spec, a.path()).unwrap();
    generate_synthetic(&spec, b.path()).unwrap();
    assert_eq!(summary.manifests.len(), 3);
    assert_eq!(tree_bytes(a.path()), tree_bytes(b.path()));

    let cfg = SpectrogramConfig::default();
    for split in Split::ALL {
        let manifest = load_manifest(&a.path().join(format!("{}.csv", split.name()))).unwrap();
        assert_eq!(manifest.split, Some(split));
        assert_eq!(manifest.len(), spec.samples(split));
        for e in &manifest.entries {
            assert_eq!(read_wav(&e.wav_path).unwrap().sample_rate, 16_000);
            assert_eq!(read_feature_file(&e.feature_path).unwrap().dim(), 64);
        }
        // on-disk data equals in-memory generation
        let from_disk = Dataset::from_manifest(&manifest, &cfg).unwrap();
        let in_memory =
            Dataset::from_generated(&generate_split(&spec, split).unwrap(), &cfg).unwrap();
        assert_eq!(from_disk, in_memory);
        let segments =
            read_segments(&a.path().join(format!("{}_segments.json", split.name()))).unwrap();
        assert_eq!(segments.len(), manifest.len());
    }
}

#[test]
fn different_seeds_differ() {
    let spec = short(SyntheticSpec::default());
    let other = SyntheticSpec {
        seed: spec.seed + 1,
        ..spec.clone()
    };
    assert_ne!(
        generate_split(&spec, Split::Train).unwrap(),
        generate_split(&other, Split::Train).unwrap()
    );
}
