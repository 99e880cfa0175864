//! Reading a dataset directory into a [`DatasetBundle`].
//!
//! Layout: `<root>/<dataset>/manifest.txt` plus one `<user_id>.csv` per
//! user recording with header `t,ax,ay,az,activity`. The manifest is
//! `key = value` text with at least `sampling_rate_hz` and `classes`
//! (comma-separated activity names, in class-index order). Lines starting
//! with `#` are comments. An empty `activity` cell marks an unlabeled
//! sample.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::preprocess::{make_folds, resample, resample_labels, segment, FoldConfig};
use crate::data::types::{DatasetBundle, SensorWindow};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const REQUIRED_COLUMNS: [&str; 5] = ["t", "ax", "ay", "az", "activity"];

/// How raw recordings become windows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IngestionSchema {
    pub target_rate_hz: f64,
    pub window_len: usize,
    pub overlap: f64,
    pub folds: FoldConfig,
    pub fold_seed: u64,
}

impl Default for IngestionSchema {
    fn default() -> Self {
        Self {
            target_rate_hz: 50.0,
            window_len: 50,
            overlap: 0.5,
            folds: FoldConfig::default(),
            fold_seed: 0,
        }
    }
}

/// Parsed `manifest.txt`.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub name: Option<String>,
    pub sampling_rate_hz: f64,
    pub classes: Vec<String>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Schema(format!("manifest line {}: expected key = value", n + 1)))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let rate = kv
            .get("sampling_rate_hz")
            .ok_or_else(|| Error::Schema("manifest lacks sampling_rate_hz".into()))?;
        let sampling_rate_hz: f64 = rate
            .parse()
            .map_err(|_| Error::Schema(format!("bad sampling_rate_hz {rate:?}")))?;
        let classes: Vec<String> = kv
            .get("classes")
            .ok_or_else(|| Error::Schema("manifest lacks classes".into()))?
            .split(',')
            .map(|c| c.trim().to_string())
            .filter(|c| !c.is_empty())
            .collect();
        if classes.is_empty() {
            return Err(Error::Schema("manifest class list is empty".into()));
        }
        let unique: BTreeSet<&String> = classes.iter().collect();
        if unique.len() != classes.len() {
            return Err(Error::Schema("manifest class list has duplicates".into()));
        }
        Ok(Self {
            name: kv.get("name").cloned(),
            sampling_rate_hz,
            classes,
        })
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        if let Some(name) = &self.name {
            out.push_str(&format!("name = {name}\n"));
        }
        out.push_str(&format!("sampling_rate_hz = {}\n", self.sampling_rate_hz));
        out.push_str(&format!("classes = {}\n", self.classes.join(",")));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RejectedRow {
    pub file: String,
    pub line: usize,
    pub reason: String,
}

/// What ingestion did besides producing windows.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub files: usize,
    pub rows_accepted: usize,
    pub rejected: Vec<RejectedRow>,
    pub boundary_windows_dropped: usize,
    pub windows_per_user: BTreeMap<String, usize>,
}

struct UserRecording {
    user: String,
    samples: Array2<f32>,
    labels: Vec<Option<usize>>,
    rejected: Vec<RejectedRow>,
}

fn read_user_file(path: &Path, class_index: &BTreeMap<String, usize>) -> Result<UserRecording> {
    let file = path.display().to_string();
    let user = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Ingestion(format!("unusable file name {file}")))?
        .to_string();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Ingestion(format!("{file}: {e}")))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Schema(format!("{file}: unreadable header: {e}")))?
        .clone();
    let mut col = BTreeMap::new();
    for name in REQUIRED_COLUMNS {
        let idx = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("{file}: missing required column `{name}`")))?;
        col.insert(name, idx);
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut rejected = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                rejected.push(RejectedRow { file: file.clone(), line, reason: e.to_string() });
                continue;
            }
        };
        let parsed: std::result::Result<Vec<f32>, String> = ["ax", "ay", "az"]
            .iter()
            .map(|c| {
                let cell = record.get(col[c]).unwrap_or("");
                cell.parse::<f32>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| format!("non-numeric {c} value {cell:?}"))
            })
            .collect();
        let xyz = match parsed {
            Ok(v) => v,
            Err(reason) => {
                rejected.push(RejectedRow { file: file.clone(), line, reason });
                continue;
            }
        };
        let activity = record.get(col["activity"]).unwrap_or("");
        let label = if activity.is_empty() {
            None
        } else if let Some(&idx) = class_index.get(activity) {
            Some(idx)
        } else {
            rejected.push(RejectedRow {
                file: file.clone(),
                line,
                reason: format!("activity {activity:?} not in manifest classes"),
            });
            continue;
        };
        values.extend(xyz);
        labels.push(label);
    }
    let samples = Array2::from_shape_vec((labels.len(), 3), values).expect("three values per accepted row");
    Ok(UserRecording { user, samples, labels, rejected })
}

fn csv_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv")))
        .collect();
    files.sort();
    Ok(files)
}

/// Reads every user file of one dataset directory, resamples, segments and
/// assigns folds.
pub fn ingest(dataset_dir: &Path, schema: &IngestionSchema) -> Result<(DatasetBundle, IngestReport)> {
    if !dataset_dir.is_dir() {
        return Err(Error::Ingestion(format!("{} is not a directory", dataset_dir.display())));
    }
    let files = csv_files(dataset_dir)?;
    if files.is_empty() {
        return Err(Error::Ingestion(format!("{} contains no recordings", dataset_dir.display())));
    }
    let manifest_path = dataset_dir.join(MANIFEST_FILE);
    let manifest_text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest = Manifest::parse(&manifest_text)?;
    let name = manifest.name.clone().unwrap_or_else(|| {
        dataset_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    });
    let class_map: BTreeMap<String, usize> = manifest
        .classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.clone(), i))
        .collect();

    let recordings: Vec<UserRecording> = files
        .par_iter()
        .map(|f| read_user_file(f, &class_map))
        .collect::<Result<_>>()?;

    let mut report = IngestReport {
        files: files.len(),
        ..Default::default()
    };
    let mut windows: Vec<SensorWindow> = Vec::new();
    for rec in recordings {
        report.rows_accepted += rec.labels.len();
        report.rejected.extend(rec.rejected);
        let samples = resample(&rec.samples, manifest.sampling_rate_hz, schema.target_rate_hz)?;
        let labels = resample_labels(&rec.labels, manifest.sampling_rate_hz, schema.target_rate_hz)?;
        let seg = segment(&samples, &labels, &rec.user, &name, schema.window_len, schema.overlap)?;
        report.boundary_windows_dropped += seg.dropped_boundary;
        report.windows_per_user.insert(rec.user.clone(), seg.windows.len());
        windows.extend(seg.windows);
    }
    if windows.is_empty() {
        return Err(Error::Ingestion(format!("{name}: no complete windows after segmentation")));
    }
    if !report.rejected.is_empty() {
        log::warn!("{name}: rejected {} unparseable rows", report.rejected.len());
    }
    let users: BTreeSet<String> = windows.iter().map(|w| w.user.clone()).collect();
    let folds = make_folds(&users, schema.folds, schema.fold_seed)?;
    let bundle = DatasetBundle {
        name,
        windows,
        folds,
        stats: None,
        class_map,
    };
    bundle.validate()?;
    Ok((bundle, report))
}

/// Writes one user recording in the ingestion layout.
pub fn write_user_csv(path: &Path, samples: &Array2<f32>, activities: &[Option<&str>], rate_hz: f64) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?;
    let wrap = |e: csv::Error| Error::Ingestion(format!("{}: {e}", path.display()));
    w.write_record(REQUIRED_COLUMNS).map_err(wrap)?;
    for (i, row) in samples.outer_iter().enumerate() {
        let t = format!("{:.4}", i as f64 / rate_hz);
        let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        w.write_record([t.as_str(), &vals[0], &vals[1], &vals[2], activities[i].unwrap_or("")])
            .map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
