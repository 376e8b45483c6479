//! Command-line driver: synthetic data generation, training, evaluation,
//! attention export, and the built-in self-check.

pub mod config;

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use avfusion::data::{generate_synthetic, load_manifest, Dataset, Manifest, Split};
use avfusion::model::{ensemble_mean, evaluate, train, EvalReport, TrainedModel};
use avfusion::selfcheck::{self, SelfCheckConfig};
use clap::{Args, Parser, Subcommand};

use config::{parse_fusion, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "avfusion",
    version,
    about = "Audio-video emotion recognition with attention and factorized bilinear pooling"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration file.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the seed in the configuration file.
    #[arg(long, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with train/val/test manifests.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write `model.fbpm`, `model.json` and `loss.csv`.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_name = "N")]
        epochs: Option<usize>,
        /// fbp, concat or video-only.
        #[arg(long, value_name = "NAME")]
        fusion: Option<String>,
        #[arg(long, value_name = "X")]
        lambda_audio: Option<f64>,
        #[arg(long, value_name = "X")]
        lambda_video: Option<f64>,
    },
    /// Evaluate one checkpoint or a probability-averaged ensemble.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_name = "PATH", conflicts_with = "ensemble")]
        checkpoint: Option<PathBuf>,
        /// Comma-separated checkpoints whose probabilities are averaged.
        #[arg(long, value_name = "CKPT[,CKPT...]", value_delimiter = ',')]
        ensemble: Vec<PathBuf>,
    },
    /// Write per-stream attention weights of one sample as CSV.
    AttentionDump {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "ID")]
        sample: String,
    },
    /// Run the factorization oracle, gradient checks and invariant checks.
    Selfcheck {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Dataset directory holding `train.csv`, `val.csv` and `test.csv`.
    #[arg(long, value_name = "DIR", conflicts_with = "manifest")]
    pub data: Option<PathBuf>,
    /// A single manifest file.
    #[arg(long, value_name = "PATH")]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Invariant(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Invariant(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Invariant(m) => write!(f, "invariant failure: {m}"),
        }
    }
}

impl From<avfusion::Error> for CliError {
    fn from(e: avfusion::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<config::ConfigError> for CliError {
    fn from(e: config::ConfigError) -> Self {
        CliError::Usage(format!("config: {e}"))
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn load_config(common: &Common) -> CliResult<RunConfig> {
    match &common.config {
        Some(path) => Ok(RunConfig::from_file(path)?),
        None => Ok(RunConfig::default()),
    }
}

fn out_dir(common: &Common) -> CliResult<PathBuf> {
    let out = common
        .out
        .clone()
        .ok_or_else(|| CliError::Usage("--out DIR is required".into()))?;
    fs::create_dir_all(&out)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", out.display())))?;
    Ok(out)
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult {
    fs::write(path, bytes)
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

impl DataArgs {
    /// The manifest to read: `--manifest`, or `<data>/<split>.csv`.
    fn manifest_path(&self, split: Split) -> CliResult<PathBuf> {
        match (&self.manifest, &self.data) {
            (Some(m), _) => Ok(m.clone()),
            (None, Some(d)) => Ok(d.join(format!("{}.csv", split.name()))),
            (None, None) => Err(CliError::Usage(
                "one of --data DIR or --manifest PATH is required".into(),
            )),
        }
    }
}

fn load_dataset(manifest: &Manifest, model: &TrainedModel) -> CliResult<Dataset> {
    Ok(Dataset::from_manifest(manifest, &model.spectrogram)?)
}

pub fn run(cli: Cli, stdout: &mut dyn Write) -> CliResult {
    match cli.command {
        Command::Synth { common } => cmd_synth(&common, stdout),
        Command::Train {
            common,
            data,
            epochs,
            fusion,
            lambda_audio,
            lambda_video,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(f) = fusion {
                cfg.model.fusion = parse_fusion(&f).map_err(CliError::Usage)?;
            }
            if let Some(l) = lambda_audio {
                cfg.model.lambda_audio = l;
            }
            if let Some(l) = lambda_video {
                cfg.model.lambda_video = l;
            }
            if let Some(s) = common.seed {
                cfg.model.seed = s;
            }
            cmd_train(&cfg, &data, &common, stdout)
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            ensemble,
        } => {
            let (checkpoints, is_ensemble) = match (checkpoint, ensemble.is_empty()) {
                (Some(c), true) => (vec![c], false),
                (None, false) => (ensemble, true),
                _ => {
                    return Err(CliError::Usage(
                        "pass either --checkpoint or --ensemble".into(),
                    ))
                }
            };
            load_config(&common)?;
            cmd_eval(&checkpoints, is_ensemble, &data, &common, stdout)
        }
        Command::AttentionDump {
            common,
            data,
            checkpoint,
            sample,
        } => {
            load_config(&common)?;
            cmd_attention_dump(&checkpoint, &data, &sample, &common, stdout)
        }
        Command::Selfcheck { common } => {
            load_config(&common)?;
            cmd_selfcheck(&common, stdout)
        }
    }
}

fn io_err(e: std::io::Error) -> CliError {
    CliError::Data(format!("write failed: {e}"))
}

pub fn cmd_synth(common: &Common, stdout: &mut dyn Write) -> CliResult {
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.synth.seed = s;
    }
    cfg.synth
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let out = out_dir(common)?;
    let summary = generate_synthetic(&cfg.synth, &out)?;
    for (split, n) in &summary.counts {
        writeln!(stdout, "{}: {n} samples", split.name()).map_err(io_err)?;
    }
    Ok(())
}

pub fn cmd_train(
    cfg: &RunConfig,
    data: &DataArgs,
    common: &Common,
    stdout: &mut dyn Write,
) -> CliResult {
    cfg.validate()?;
    let manifest = load_manifest(&data.manifest_path(Split::Train)?)?;
    let out = out_dir(common)?;
    let dataset = Dataset::from_manifest(&manifest, &cfg.spectrogram)?;
    let outcome = train(&dataset, &cfg.model, &cfg.train, cfg.spectrogram)?;
    outcome.model.save(&out.join("model.fbpm"))?;

    let mut log = String::from("epoch,loss\n");
    for (i, l) in outcome.epoch_losses.iter().enumerate() {
        log.push_str(&format!("{},{l:?}\n", i + 1));
    }
    write_file(&out.join("loss.csv"), log.as_bytes())?;
    writeln!(
        stdout,
        "trained {} ({} samples, {} epochs); final training loss {}",
        cfg.model.fusion.name(),
        dataset.len(),
        cfg.train.epochs,
        outcome.final_train_loss
    )
    .map_err(io_err)?;
    Ok(())
}

/// With `ensemble`, probabilities of all checkpoints are averaged; an
/// ensemble needs at least two members.
pub fn cmd_eval(
    checkpoints: &[PathBuf],
    ensemble: bool,
    data: &DataArgs,
    common: &Common,
    stdout: &mut dyn Write,
) -> CliResult {
    let manifest = load_manifest(&data.manifest_path(Split::Test)?)?;
    let out = out_dir(common)?;
    let mut reports = Vec::with_capacity(checkpoints.len());
    let mut cached: Option<(avfusion::dsp::SpectrogramConfig, Dataset)> = None;
    for path in checkpoints {
        let model = TrainedModel::load(path)?;
        let dataset = match cached.take() {
            Some((cfg, ds)) if cfg == model.spectrogram => ds,
            _ => load_dataset(&manifest, &model)?,
        };
        reports.push(evaluate(&model, &dataset)?);
        cached = Some((model.spectrogram, dataset));
    }
    let report: EvalReport = if ensemble {
        ensemble_mean(&reports)?
    } else {
        reports.pop().expect("one report")
    };
    let json = serde_json::to_vec_pretty(&report).map_err(|e| CliError::Data(e.to_string()))?;
    write_file(&out.join("report.json"), &json)?;
    let mut csv = Vec::new();
    report.write_confusion_csv(&mut csv).map_err(io_err)?;
    write_file(&out.join("confusion.csv"), &csv)?;
    writeln!(
        stdout,
        "accuracy {:.4} on {} samples",
        report.accuracy,
        report.len()
    )
    .map_err(io_err)?;
    Ok(())
}

/// Finds the manifest containing `sample`: the `--manifest` file, or the
/// first split of `--data` that lists it.
fn find_sample(data: &DataArgs, sample: &str) -> CliResult<Manifest> {
    let candidates: Vec<PathBuf> = match (&data.manifest, &data.data) {
        (Some(m), _) => vec![m.clone()],
        (None, Some(_)) => Split::ALL
            .iter()
            .map(|s| data.manifest_path(*s))
            .collect::<CliResult<Vec<_>>>()?
            .into_iter()
            .filter(|p| p.is_file())
            .collect(),
        (None, None) => {
            return Err(CliError::Usage(
                "one of --data DIR or --manifest PATH is required".into(),
            ))
        }
    };
    for path in candidates {
        let manifest = load_manifest(&path)?;
        if let Some(entry) = manifest.find(sample) {
            return Ok(Manifest {
                entries: vec![entry.clone()],
                split: manifest.split,
            });
        }
    }
    Err(CliError::Data(format!(
        "input error: unknown sample {sample:?}"
    )))
}

pub fn cmd_attention_dump(
    checkpoint: &Path,
    data: &DataArgs,
    sample: &str,
    common: &Common,
    stdout: &mut dyn Write,
) -> CliResult {
    let model = TrainedModel::load(checkpoint)?;
    let manifest = find_sample(data, sample)?;
    let out = out_dir(common)?;
    let dataset = load_dataset(&manifest, &model)?;
    let output = model.forward(&dataset.samples[0])?;

    let mut csv = String::from("sample_id,stream,index,weight\n");
    for (stream, weights) in [
        ("audio", output.audio_time_weights()),
        ("video", output.video_weights.clone()),
    ] {
        for (i, w) in weights.iter().enumerate() {
            csv.push_str(&format!("{sample},{stream},{i},{w:?}\n"));
        }
    }
    let path = out.join(format!("attention_{sample}.csv"));
    write_file(&path, csv.as_bytes())?;
    writeln!(stdout, "wrote {}", path.display()).map_err(io_err)?;
    Ok(())
}

pub fn cmd_selfcheck(common: &Common, stdout: &mut dyn Write) -> CliResult {
    let cfg = SelfCheckConfig {
        seed: common.seed.unwrap_or(0),
        ..SelfCheckConfig::default()
    };
    let report = selfcheck::run(&cfg)?;
    let mut text = String::new();
    for o in &report.outcomes {
        let status = if o.passed { "PASS" } else { "FAIL" };
        text.push_str(&format!("{status} {} ({})\n", o.name, o.detail));
    }
    stdout.write_all(text.as_bytes()).map_err(io_err)?;
    if let Some(out) = &common.out {
        fs::create_dir_all(out)
            .map_err(|e| CliError::Data(format!("cannot create {}: {e}", out.display())))?;
        write_file(&out.join("selfcheck.txt"), text.as_bytes())?;
    }
    let failed: Vec<&str> = report.failures().map(|o| o.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Invariant(format!(
            "failed checks: {}",
            failed.join(", ")
        )))
    }
}
