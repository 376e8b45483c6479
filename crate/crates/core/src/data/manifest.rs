use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::Emotion;

pub const HEADER: [&str; 4] = ["sample_id", "wav_path", "feature_path", "label"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.name() == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub wav_path: PathBuf,
    pub feature_path: PathBuf,
    pub label: Emotion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Taken from the file stem (`train.csv`, `val.csv`, `test.csv`) when it names a split.
    pub split: Option<Split>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn find(&self, sample_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.sample_id == sample_id)
    }
}

/// Parses and validates a manifest. Relative paths resolve against the
/// manifest's directory, and every referenced file must exist.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let load_err = |line: usize, message: String| Error::Load {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| load_err(1, format!("unreadable header: {e}")))?
        .clone();
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(load_err(1, format!("header must be {}", HEADER.join(","))));
    }

    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            load_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let sample_id = record[0].to_owned();
        if sample_id.is_empty() {
            return Err(load_err(line, "empty sample_id".into()));
        }
        if !seen.insert(sample_id.clone()) {
            return Err(load_err(line, format!("duplicate sample_id {sample_id:?}")));
        }
        let label: Emotion = record[3]
            .parse()
            .map_err(|_| load_err(line, format!("unknown label {:?}", &record[3])))?;
        let wav_path = base.join(&record[1]);
        let feature_path = base.join(&record[2]);
        for p in [&wav_path, &feature_path] {
            if !p.is_file() {
                return Err(load_err(line, format!("missing file {}", p.display())));
            }
        }
        entries.push(ManifestEntry {
            sample_id,
            wav_path,
            feature_path,
            label,
        });
    }
    let split = path
        .file_stem()
        .and_then(|s| s.to_str())
        .and_then(Split::from_name);
    Ok(Manifest { entries, split })
}

/// Writes a manifest with paths exactly as given.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Input(format!("csv encoding: {e}"));
    writer.write_record(HEADER).map_err(csv_err)?;
    for e in entries {
        writer
            .write_record([
                e.sample_id.as_str(),
                &e.wav_path.to_string_lossy(),
                &e.feature_path.to_string_lossy(),
                e.label.name(),
            ])
            .map_err(csv_err)?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::Input(e.to_string()))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
