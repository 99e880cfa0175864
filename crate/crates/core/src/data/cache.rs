//! Binary cache of processed bundles.
//!
//! File layout (all integers little-endian):
//!
//! | bytes | content                                              |
//! |-------|------------------------------------------------------|
//! | 4     | magic `CDHB`                                         |
//! | 4     | format version (`u32`, currently 1)                  |
//! | 8     | header length `h` (`u64`)                            |
//! | h     | UTF-8 JSON header (see [`CacheHeader`])              |
//! | rest  | `f32` samples, window-major, then time, then channel |

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::types::{ChannelStats, DatasetBundle, FoldSpec, SensorWindow};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CDHB";
const VERSION: u32 = 1;

/// Identity of a processed bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheKey {
    pub dataset: String,
    pub window_len: usize,
    pub overlap: f64,
    pub rate_hz: f64,
}

impl CacheKey {
    pub fn file_name(&self) -> String {
        format!(
            "{}_w{}_o{}_r{}.cdhb",
            self.dataset,
            self.window_len,
            (self.overlap * 1000.0).round() as u64,
            (self.rate_hz * 1000.0).round() as u64
        )
    }

    pub fn path_in(&self, dir: &Path) -> PathBuf {
        dir.join(self.file_name())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct WindowMeta {
    user: String,
    label: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheHeader {
    key: CacheKey,
    name: String,
    dataset: String,
    steps: usize,
    channels: usize,
    class_map: BTreeMap<String, usize>,
    folds: Vec<FoldSpec>,
    stats: Option<ChannelStats>,
    windows: Vec<WindowMeta>,
}

pub fn write_bundle(path: &Path, key: &CacheKey, bundle: &DatasetBundle) -> Result<()> {
    let (steps, channels) = bundle.window_shape().unwrap_or((0, 0));
    let header = CacheHeader {
        key: key.clone(),
        name: bundle.name.clone(),
        dataset: bundle.windows.first().map(|w| w.dataset.clone()).unwrap_or_default(),
        steps,
        channels,
        class_map: bundle.class_map.clone(),
        folds: bundle.folds.clone(),
        stats: bundle.stats.clone(),
        windows: bundle
            .windows
            .iter()
            .map(|w| WindowMeta { user: w.user.clone(), label: w.label })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Ingestion(format!("cache header: {e}")))?;
    let mut buf = Vec::with_capacity(16 + json.len() + bundle.windows.len() * steps * channels * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for w in &bundle.windows {
        for v in w.samples.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_bundle(path: &Path) -> Result<(CacheKey, DatasetBundle)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |why: &str| Error::Ingestion(format!("{}: {why}", path.display()));
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(bad("not a bundle cache file"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(&format!("unsupported cache version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: CacheHeader = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    let data = &bytes[16 + hlen..];
    let per = header.steps * header.channels;
    if data.len() != header.windows.len() * per * 4 {
        return Err(bad("sample payload size does not match header"));
    }
    let mut floats = data.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()));
    let windows = header
        .windows
        .into_iter()
        .map(|m| SensorWindow {
            samples: Array2::from_shape_vec((header.steps, header.channels), floats.by_ref().take(per).collect())
                .expect("payload size checked"),
            label: m.label,
            user: m.user,
            dataset: header.dataset.clone(),
        })
        .collect();
    Ok((
        header.key,
        DatasetBundle {
            name: header.name,
            windows,
            folds: header.folds,
            stats: header.stats,
            class_map: header.class_map,
        },
    ))
}
