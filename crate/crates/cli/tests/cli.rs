use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = "\
[synth]
train_samples = 14
val_samples = 7
test_samples = 14
feature_dim = 16
frames_min = 4
frames_max = 8
duration_min = 0.2
duration_max = 0.4
seed = 3

[model]
encoder = tiny
reduced_video_dim = 16
fbp_o = 16
fbp_k = 2

[train]
epochs = 2
batch_size = 4
lr = 0.001
";

fn avfusion(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avfusion"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = avfusion(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    avfusion(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new(config: &str) -> Self {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("run.ini"), config).unwrap();
        let f = Self { dir };
        ok(&["synth", "--config", s(&f.config()), "--out", s(&f.data())]);
        f
    }

    fn config(&self) -> PathBuf {
        self.dir.path().join("run.ini")
    }

    fn data(&self) -> PathBuf {
        self.dir.path().join("data")
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, name: &str, extra: &[&str]) -> String {
        let (out, config, data) = (self.path(name), self.config(), self.data());
        let mut args = vec![
            "train",
            "--config",
            s(&config),
            "--data",
            s(&data),
            "--out",
            s(&out),
        ];
        args.extend_from_slice(extra);
        ok(&args)
    }
}

fn tree_bytes(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_writes_three_manifests_deterministically() {
    let f = Fixture::new(SMALL);
    for split in ["train", "val", "test"] {
        assert!(f.data().join(format!("{split}.csv")).is_file());
    }
    let again = f.path("again");
    let stdout = ok(&["synth", "--config", s(&f.config()), "--out", s(&again)]);
    assert!(stdout.contains("train: 14 samples"));
    assert_eq!(tree_bytes(&f.data()), tree_bytes(&again));

    let other = f.path("other");
    ok(&[
        "synth",
        "--config",
        s(&f.config()),
        "--seed",
        "4",
        "--out",
        s(&other),
    ]);
    assert_ne!(tree_bytes(&f.data()), tree_bytes(&other));
}

#[test]
fn empty_dataset_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("empty.ini");
    fs::write(
        &cfg,
        "[synth]\ntrain_samples = 0\nval_samples = 0\ntest_samples = 0\n",
    )
    .unwrap();
    assert_eq!(
        code(&[
            "synth",
            "--config",
            s(&cfg),
            "--out",
            s(&dir.path().join("d"))
        ]),
        1
    );
}

#[test]
fn usage_and_config_errors_exit_1() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.ini");
    fs::write(&cfg, "[model]\nattention = yes\n").unwrap();
    assert_eq!(
        code(&["synth", "--config", s(&cfg), "--out", s(dir.path())]),
        1
    );
    assert_eq!(code(&["train", "--bogus"]), 1);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["synth"]), 1);
    assert_eq!(
        code(&[
            "train",
            "--data",
            s(dir.path()),
            "--out",
            s(dir.path()),
            "--fusion",
            "sum"
        ]),
        1
    );
    assert_eq!(code(&["--help"]), 0);
}

#[test]
fn missing_data_exits_2() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.ini");
    fs::write(&cfg, SMALL).unwrap();
    let nowhere = dir.path().join("nowhere");
    let args = [
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&nowhere),
        "--out",
        s(dir.path()),
    ];
    assert_eq!(code(&args), 2);
}

#[test]
fn train_eval_round_trip() {
    let f = Fixture::new(SMALL);
    let stdout = f.train("fbp", &[]);
    let run = f.path("fbp");
    for file in ["model.fbpm", "model.json", "loss.csv"] {
        assert!(run.join(file).is_file(), "{file}");
    }
    let loss = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 3);
    assert_eq!(loss.lines().next(), Some("epoch,loss"));

    let final_loss: f64 = stdout.trim().rsplit(' ').next().unwrap().parse().unwrap();
    let eval_dir = f.path("eval_train");
    ok(&[
        "eval",
        "--checkpoint",
        s(&run.join("model.fbpm")),
        "--manifest",
        s(&f.data().join("train.csv")),
        "--out",
        s(&eval_dir),
    ]);
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(eval_dir.join("report.json")).unwrap()).unwrap();
    let reloaded = report["mean_loss"].as_f64().unwrap();
    assert!(
        (reloaded - final_loss).abs() < 1e-6,
        "{reloaded} vs {final_loss}"
    );

    let confusion = fs::read_to_string(eval_dir.join("confusion.csv")).unwrap();
    let rows: Vec<&str> = confusion.lines().collect();
    assert_eq!(rows.len(), 8);
    assert!(rows.iter().all(|r| r.split(',').count() == 8));
    let total: usize = rows[1..]
        .iter()
        .flat_map(|r| r.split(',').skip(1))
        .map(|c| c.parse::<usize>().unwrap())
        .sum();
    assert_eq!(total, 14);
}

#[test]
fn training_is_deterministic_and_seeded() {
    let f = Fixture::new(SMALL);
    f.train("a", &[]);
    f.train("b", &[]);
    f.train("c", &["--seed", "9"]);
    for file in ["model.fbpm", "model.json", "loss.csv"] {
        let a = fs::read(f.path("a").join(file)).unwrap();
        assert_eq!(a, fs::read(f.path("b").join(file)).unwrap(), "{file}");
    }
    assert_ne!(
        fs::read(f.path("a").join("model.fbpm")).unwrap(),
        fs::read(f.path("c").join("model.fbpm")).unwrap()
    );
}

#[test]
fn fusion_flag_switches_baseline() {
    let f = Fixture::new(SMALL);
    f.train("concat", &["--fusion", "concat"]);
    let side: serde_json::Value =
        serde_json::from_slice(&fs::read(f.path("concat").join("model.json")).unwrap()).unwrap();
    assert_eq!(side["model"]["fusion"], "concat");
    f.train("fbp", &["--lambda-audio", "0.5", "--lambda-video", "0.25"]);
    let side: serde_json::Value =
        serde_json::from_slice(&fs::read(f.path("fbp").join("model.json")).unwrap()).unwrap();
    assert_eq!(side["model"]["fusion"], "fbp");
    assert_eq!(side["model"]["lambda_audio"], 0.5);
    assert_eq!(side["model"]["lambda_video"], 0.25);
}

#[test]
fn ensemble_averages_checkpoints() {
    let f = Fixture::new(SMALL);
    f.train("a", &[]);
    f.train("b", &["--seed", "5"]);
    let (a, b) = (
        f.path("a").join("model.fbpm"),
        f.path("b").join("model.fbpm"),
    );
    let list = format!("{},{}", s(&a), s(&b));
    let dirs = ["ea", "eb", "ens"].map(|d| f.path(d));
    ok(&[
        "eval",
        "--checkpoint",
        s(&a),
        "--data",
        s(&f.data()),
        "--out",
        s(&dirs[0]),
    ]);
    ok(&[
        "eval",
        "--checkpoint",
        s(&b),
        "--data",
        s(&f.data()),
        "--out",
        s(&dirs[1]),
    ]);
    ok(&[
        "eval",
        "--ensemble",
        &list,
        "--data",
        s(&f.data()),
        "--out",
        s(&dirs[2]),
    ]);
    let read = |d: &PathBuf| -> serde_json::Value {
        serde_json::from_slice(&fs::read(d.join("report.json")).unwrap()).unwrap()
    };
    let (ra, rb, re) = (read(&dirs[0]), read(&dirs[1]), read(&dirs[2]));
    let n = re["per_sample"].as_array().unwrap().len();
    assert_eq!(n, 14);
    for j in 0..n {
        for c in 0..7 {
            let p =
                |r: &serde_json::Value| r["per_sample"][j]["probabilities"][c].as_f64().unwrap();
            assert!((p(&re) - (p(&ra) + p(&rb)) / 2.0).abs() < 1e-12);
        }
    }
    let single = s(&a).to_owned();
    assert_eq!(
        code(&[
            "eval",
            "--ensemble",
            &single,
            "--data",
            s(&f.data()),
            "--out",
            s(&dirs[2])
        ]),
        2
    );
    assert_eq!(
        code(&["eval", "--data", s(&f.data()), "--out", s(&dirs[2])]),
        1
    );
}

#[test]
fn eval_rejects_incompatible_data() {
    let f = Fixture::new(SMALL);
    f.train("m", &[]);
    let other = SMALL.replace("feature_dim = 16", "feature_dim = 20");
    let g = Fixture::new(&other);
    let (ckpt, data, out) = (f.path("m").join("model.fbpm"), g.data(), f.path("x"));
    let args = [
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--out",
        s(&out),
    ];
    let out = avfusion(&args);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("contract"));
}

fn read_attention(path: &Path) -> (Vec<f64>, Vec<f64>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("sample_id,stream,index,weight"));
    let (mut audio, mut video) = (Vec::new(), Vec::new());
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        let w: f64 = cells[3].parse().unwrap();
        match cells[1] {
            "audio" => audio.push(w),
            "video" => video.push(w),
            other => panic!("stream {other}"),
        }
    }
    (audio, video)
}

#[test]
fn attention_dump_weights_are_normalized() {
    let f = Fixture::new(SMALL);
    f.train("m", &[]);
    f.train("mean", &["--lambda-video", "0"]);
    let dump = |model: &str, sample: &str| {
        avfusion(&[
            "attention-dump",
            "--checkpoint",
            s(&f.path(model).join("model.fbpm")),
            "--data",
            s(&f.data()),
            "--sample",
            sample,
            "--out",
            s(&f.path("att")),
        ])
    };
    assert!(dump("m", "val_0002").status.success());
    let (audio, video) = read_attention(&f.path("att").join("attention_val_0002.csv"));
    assert!(!audio.is_empty() && !video.is_empty());
    assert!((audio.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    assert!((video.iter().sum::<f64>() - 1.0).abs() < 1e-6);

    assert!(dump("mean", "test_0003").status.success());
    let (_, video) = read_attention(&f.path("att").join("attention_test_0003.csv"));
    let l = video.len() as f64;
    assert!(video.iter().all(|w| (w - 1.0 / l).abs() < 1e-12));

    assert_eq!(dump("m", "test_9999").status.code(), Some(2));
}

#[test]
fn selfcheck_passes() {
    let stdout = ok(&["selfcheck"]);
    assert!(stdout.lines().count() > 20);
    assert!(stdout.lines().all(|l| l.starts_with("PASS ")));
}

const OVERFIT: &str = "\
[synth]
train_samples = 14
val_samples = 0
test_samples = 7
feature_dim = 16
frames_min = 4
frames_max = 8
duration_min = 0.2
duration_max = 0.4
noise = 0.5

[model]
encoder = tiny
fusion = video-only
reduced_video_dim = 16
fbp_o = 16
fbp_k = 2
dropout_p = 0

[train]
epochs = 60
batch_size = 1
lr = 0.003
";

#[test]
fn overfit_run_scores_perfectly_on_train_split() {
    let f = Fixture::new(OVERFIT);
    f.train("m", &[]);
    let out = ok(&[
        "eval",
        "--checkpoint",
        s(&f.path("m").join("model.fbpm")),
        "--manifest",
        s(&f.data().join("train.csv")),
        "--out",
        s(&f.path("e")),
    ]);
    assert!(out.starts_with("accuracy 1.0000"), "{out}");
}

const ATTENTION: &str = "\
[synth]
train_samples = 140
val_samples = 0
test_samples = 14
feature_dim = 32
duration_min = 0.2
duration_max = 0.3

[model]
encoder = tiny
fusion = video-only
reduced_video_dim = 32
dropout_p = 0.1

[train]
epochs = 20
batch_size = 4
lr = 0.003
";

#[derive(serde::Deserialize)]
struct Segment {
    sample_id: String,
    video_segment: (usize, usize),
}

#[test]
fn trained_video_attention_focuses_on_emotion_frames() {
    let f = Fixture::new(ATTENTION);
    f.train("m", &[]);
    let segments: Vec<Segment> =
        serde_json::from_slice(&fs::read(f.data().join("test_segments.json")).unwrap()).unwrap();
    let mut focused = 0;
    for seg in segments.iter().take(7) {
        ok(&[
            "attention-dump",
            "--checkpoint",
            s(&f.path("m").join("model.fbpm")),
            "--data",
            s(&f.data()),
            "--sample",
            &seg.sample_id,
            "--out",
            s(&f.path("att")),
        ]);
        let (_, video) = read_attention(
            &f.path("att")
                .join(format!("attention_{}.csv", seg.sample_id)),
        );
        let (a, b) = seg.video_segment;
        let inside = video[a..b].iter().sum::<f64>() / (b - a) as f64;
        let outside_n = video.len() - (b - a);
        let outside =
            (video.iter().sum::<f64>() - video[a..b].iter().sum::<f64>()) / outside_n as f64;
        focused += usize::from(inside > outside);
    }
    assert_eq!(focused, 7);
}
