use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{bin_age, MAX_AGE_YEARS};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    /// As written in the manifest (relative paths resolve against the
    /// manifest's directory).
    pub image_path: String,
    pub age_years: f64,
    /// `None` when the manifest leaves the split to [`super::split_dataset`].
    pub split: Option<Split>,
    pub dataset_tag: String,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub path: PathBuf,
    pub records: Vec<SampleRecord>,
    pub warnings: Vec<String>,
}

impl Manifest {
    pub fn root(&self) -> &Path {
        self.path.parent().unwrap_or(Path::new("."))
    }

    pub fn resolve(&self, image_path: &str) -> PathBuf {
        let p = Path::new(image_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root().join(p)
        }
    }

    /// Record counts per split; unassigned records count under `None`.
    pub fn split_counts(&self) -> BTreeMap<Option<Split>, usize> {
        let mut counts = BTreeMap::new();
        for r in &self.records {
            *counts.entry(r.split).or_insert(0) += 1;
        }
        counts
    }

    pub fn records_in(&self, split: Split) -> Vec<SampleRecord> {
        self.records.iter().filter(|r| r.split == Some(split)).cloned().collect()
    }
}

#[derive(Debug, Deserialize)]
struct Row {
    path: String,
    age_years: String,
    #[serde(default)]
    split: Option<String>,
    dataset_tag: String,
}

/// Parse and validate a `path,age_years,split,dataset_tag` manifest.
/// Line numbers in errors count the header as line 1.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::ingest(path, None, e.to_string()))?;
    let headers = reader.headers().map_err(|e| Error::ingest(path, Some(1), e.to_string()))?.clone();
    for required in ["path", "age_years", "dataset_tag"] {
        if !headers.iter().any(|h| h == required) {
            return Err(Error::ingest(path, Some(1), format!("missing column {required}")));
        }
    }
    let mut manifest = Manifest {
        path: path.to_path_buf(),
        records: Vec::new(),
        warnings: Vec::new(),
    };
    let mut seen = HashSet::new();
    for result in reader.deserialize::<Row>() {
        let row = result.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize);
            Error::ingest(path, line, e.to_string())
        })?;
        let line = manifest.records.len() + 2;
        let err = |m: String| Error::ingest(path, Some(line), m);
        let age: f64 = row.age_years.parse().map_err(|_| err(format!("age {:?} is not a number", row.age_years)))?;
        bin_age(age, 5).map_err(|_| err(format!("age {age} outside [0, {MAX_AGE_YEARS}]")))?;
        let split = match row.split.as_deref() {
            None | Some("") => None,
            Some(s) => Some(Split::parse(s).ok_or_else(|| err(format!("unknown split {s:?}")))?),
        };
        if row.path.is_empty() {
            return Err(err("empty image path".into()));
        }
        let record = SampleRecord {
            image_path: row.path,
            age_years: age,
            split,
            dataset_tag: row.dataset_tag,
        };
        if !manifest.resolve(&record.image_path).is_file() {
            return Err(err(format!("image file {} not found", record.image_path)));
        }
        if !seen.insert(record.image_path.clone()) {
            let w = format!("line {line}: duplicate image path {}", record.image_path);
            log::warn!("{w}");
            manifest.warnings.push(w);
        }
        manifest.records.push(record);
    }
    Ok(manifest)
}

pub fn write_manifest(path: &Path, records: &[SampleRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let io = |e: csv::Error| Error::io(path, e.into());
    w.write_record(["path", "age_years", "split", "dataset_tag"]).map_err(io)?;
    for r in records {
        w.write_record([
            r.image_path.as_str(),
            &r.age_years.to_string(),
            r.split.map(Split::as_str).unwrap_or(""),
            &r.dataset_tag,
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
