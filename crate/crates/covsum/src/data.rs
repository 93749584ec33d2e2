//! Dataset I/O: the VJMF binary feature container, JSON manifests, and
//! loading of full video records (features, ground-truth scores, per-user
//! summaries, cached shot boundaries).
//!
//! VJMF layout, all little-endian: bytes 0-3 magic "VJMF", bytes 4-5 u16
//! version (= 1), bytes 6-7 reserved (= 0), bytes 8-11 u32 row count M,
//! bytes 12-15 u32 column count d, then M*d IEEE-754 f32 values row-major.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tensor, TensorError};
use crate::kts::{KtsError, ShotBoundaries};

pub const VJMF_MAGIC: [u8; 4] = *b"VJMF";
pub const VJMF_VERSION: u16 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io ({path}): {source}")]
    Io { path: String, source: std::io::Error },
    #[error("json ({path}): {detail}")]
    Json { path: String, detail: String },
    #[error("{path}: bad magic at byte 0: expected \"VJMF\", found {found:?}")]
    BadMagic { path: String, found: [u8; 4] },
    #[error("{path}: unsupported version {version} at byte 4")]
    BadVersion { path: String, version: u16 },
    #[error("{path}: reserved field at byte 6 must be zero, found {found}")]
    BadReserved { path: String, found: u16 },
    #[error("{path}: wrong length: expected {expected} bytes, found {actual}")]
    WrongLength { path: String, expected: usize, actual: usize },
    #[error("{path}: empty matrix ({rows}x{cols})")]
    EmptyMatrix { path: String, rows: usize, cols: usize },
    #[error("{path}: non-finite value at byte offset {offset}")]
    NonFinite { path: String, offset: usize },
    #[error("{path}: expected a column vector (d = 1), got d = {d}")]
    NotColumn { path: String, d: u32 },
    #[error("{path}: summary values must be 0 or 1, found {value} at row {row}")]
    NotBinary { path: String, value: f32, row: usize },
    #[error("manifest: duplicate video id {0:?}")]
    DuplicateVideoId(String),
    #[error("manifest entry {id:?}: fps_after_subsample must be positive, got {fps}")]
    BadFps { id: String, fps: f64 },
    #[error("{id}: {what} has {got} rows but the video has {expected} frames")]
    FrameCount { id: String, what: &'static str, got: usize, expected: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Boundaries(#[from] KtsError),
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io { path: path.display().to_string(), source }
}

/// Raw contents of a VJMF file.
#[derive(Clone, Debug, PartialEq)]
pub struct VjmfFile {
    pub rows: u32,
    pub cols: u32,
    pub values: Vec<f32>,
}

pub fn write_vjmf(path: &Path, rows: u32, cols: u32, values: &[f32]) -> Result<(), DataError> {
    assert_eq!(values.len(), rows as usize * cols as usize, "value count must match the header");
    let mut bytes = Vec::with_capacity(HEADER_LEN + 4 * values.len());
    bytes.extend_from_slice(&VJMF_MAGIC);
    bytes.extend_from_slice(&VJMF_VERSION.to_le_bytes());
    bytes.extend_from_slice(&0u16.to_le_bytes());
    bytes.extend_from_slice(&rows.to_le_bytes());
    bytes.extend_from_slice(&cols.to_le_bytes());
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

pub fn read_vjmf(path: &Path) -> Result<VjmfFile, DataError> {
    let p = path.display().to_string();
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() < HEADER_LEN {
        return Err(DataError::WrongLength { path: p, expected: HEADER_LEN, actual: bytes.len() });
    }
    let found = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if found != VJMF_MAGIC {
        return Err(DataError::BadMagic { path: p, found });
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VJMF_VERSION {
        return Err(DataError::BadVersion { path: p, version });
    }
    let reserved = u16::from_le_bytes([bytes[6], bytes[7]]);
    if reserved != 0 {
        return Err(DataError::BadReserved { path: p, found: reserved });
    }
    let rows = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]);
    let cols = u32::from_le_bytes([bytes[12], bytes[13], bytes[14], bytes[15]]);
    if rows == 0 || cols == 0 {
        return Err(DataError::EmptyMatrix { path: p, rows: rows as usize, cols: cols as usize });
    }
    let count = rows as usize * cols as usize;
    let expected = HEADER_LEN + 4 * count;
    if bytes.len() != expected {
        return Err(DataError::WrongLength { path: p, expected, actual: bytes.len() });
    }
    let mut values = Vec::with_capacity(count);
    for (k, chunk) in bytes[HEADER_LEN..].chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(DataError::NonFinite { path: p, offset: HEADER_LEN + 4 * k });
        }
        values.push(v);
    }
    Ok(VjmfFile { rows, cols, values })
}

/// Read a VJMF file into an f64 tensor.
pub fn read_matrix(path: &Path) -> Result<Tensor, DataError> {
    let file = read_vjmf(path)?;
    Ok(Tensor::new(
        file.rows as usize,
        file.cols as usize,
        file.values.iter().map(|&v| v as f64).collect(),
    )?)
}

/// Write an f64 tensor, narrowing values to f32.
pub fn write_matrix(path: &Path, t: &Tensor) -> Result<(), DataError> {
    let values: Vec<f32> = t.data().iter().map(|&v| v as f32).collect();
    write_vjmf(path, t.rows() as u32, t.cols() as u32, &values)
}

/// Read a d = 1 container as a plain vector.
pub fn read_column(path: &Path) -> Result<Vec<f64>, DataError> {
    let file = read_vjmf(path)?;
    if file.cols != 1 {
        return Err(DataError::NotColumn { path: path.display().to_string(), d: file.cols });
    }
    Ok(file.values.iter().map(|&v| v as f64).collect())
}

pub fn write_column(path: &Path, values: &[f64]) -> Result<(), DataError> {
    let narrow: Vec<f32> = values.iter().map(|&v| v as f32).collect();
    write_vjmf(path, values.len() as u32, 1, &narrow)
}

fn read_binary_column(path: &Path) -> Result<Vec<bool>, DataError> {
    let file = read_vjmf(path)?;
    if file.cols != 1 {
        return Err(DataError::NotColumn { path: path.display().to_string(), d: file.cols });
    }
    file.values
        .iter()
        .enumerate()
        .map(|(row, &v)| {
            if v == 0.0 {
                Ok(false)
            } else if v == 1.0 {
                Ok(true)
            } else {
                Err(DataError::NotBinary { path: path.display().to_string(), value: v, row })
            }
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub video_id: String,
    /// Paths are resolved relative to the manifest's directory.
    pub features_path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_scores_path: Option<String>,
    /// A single d = 1 container, or a directory holding one per annotator.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub user_summaries_path: Option<String>,
    pub fps_after_subsample: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_id: Option<usize>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub videos: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = std::collections::BTreeSet::new();
        for entry in &self.videos {
            if !seen.insert(&entry.video_id) {
                return Err(DataError::DuplicateVideoId(entry.video_id.clone()));
            }
            if !(entry.fps_after_subsample > 0.0 && entry.fps_after_subsample.is_finite()) {
                return Err(DataError::BadFps { id: entry.video_id.clone(), fps: entry.fps_after_subsample });
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| DataError::Json { path: path.display().to_string(), detail: e.to_string() })?;
        fs::write(path, json).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| DataError::Json { path: path.display().to_string(), detail: e.to_string() })?;
        manifest.validate()?;
        Ok(manifest)
    }
}

/// A fully loaded video. Ground-truth scores are normalized to [0, 1] by
/// the per-video maximum at ingestion.
#[derive(Clone, Debug)]
pub struct VideoRecord {
    pub id: String,
    pub features: Tensor,
    pub gt_scores: Option<Vec<f64>>,
    pub user_summaries: Option<Vec<Vec<bool>>>,
    pub boundaries: Option<ShotBoundaries>,
    pub cluster_id: Option<usize>,
}

impl VideoRecord {
    pub fn num_frames(&self) -> usize {
        self.features.rows()
    }
}

pub fn load_video(manifest_dir: &Path, entry: &ManifestEntry) -> Result<VideoRecord, DataError> {
    let features = read_matrix(&manifest_dir.join(&entry.features_path))?;
    let m = features.rows();

    let gt_scores = match &entry.gt_scores_path {
        Some(p) => {
            let mut scores = read_column(&manifest_dir.join(p))?;
            if scores.len() != m {
                return Err(DataError::FrameCount {
                    id: entry.video_id.clone(),
                    what: "ground-truth scores",
                    got: scores.len(),
                    expected: m,
                });
            }
            let max = scores.iter().cloned().fold(0.0f64, f64::max);
            if max > 0.0 {
                for s in &mut scores {
                    *s /= max;
                }
            }
            Some(scores)
        }
        None => None,
    };

    let user_summaries = match &entry.user_summaries_path {
        Some(p) => {
            let full = manifest_dir.join(p);
            let files = if full.is_dir() {
                let mut paths: Vec<PathBuf> = fs::read_dir(&full)
                    .map_err(|e| io_err(&full, e))?
                    .filter_map(|r| r.ok().map(|d| d.path()))
                    .filter(|p| p.is_file())
                    .collect();
                paths.sort();
                paths
            } else {
                vec![full]
            };
            let mut summaries = Vec::with_capacity(files.len());
            for f in &files {
                let mask = read_binary_column(f)?;
                if mask.len() != m {
                    return Err(DataError::FrameCount {
                        id: entry.video_id.clone(),
                        what: "user summary",
                        got: mask.len(),
                        expected: m,
                    });
                }
                summaries.push(mask);
            }
            Some(summaries)
        }
        None => None,
    };

    Ok(VideoRecord {
        id: entry.video_id.clone(),
        features,
        gt_scores,
        user_summaries,
        boundaries: None,
        cluster_id: entry.cluster_id,
    })
}

/// Load the manifest at `path` and every video it references.
pub fn load_dataset(path: &Path) -> Result<(DatasetManifest, Vec<VideoRecord>), DataError> {
    let manifest = DatasetManifest::load(path)?;
    let dir = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let records = manifest
        .videos
        .iter()
        .map(|entry| load_video(&dir, entry))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((manifest, records))
}

/// Shot-boundary cache next to the manifest, one JSON cut array per video.
pub fn cuts_cache_path(manifest_dir: &Path, video_id: &str) -> PathBuf {
    manifest_dir.join("cuts").join(format!("{video_id}.json"))
}

pub fn load_cached_cuts(manifest_dir: &Path, video_id: &str) -> Result<Option<ShotBoundaries>, DataError> {
    let path = cuts_cache_path(manifest_dir, video_id);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let cuts: Vec<usize> = serde_json::from_str(&text)
        .map_err(|e| DataError::Json { path: path.display().to_string(), detail: e.to_string() })?;
    Ok(Some(ShotBoundaries::new(cuts)?))
}

pub fn store_cached_cuts(manifest_dir: &Path, video_id: &str, bounds: &ShotBoundaries) -> Result<(), DataError> {
    let path = cuts_cache_path(manifest_dir, video_id);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    let json = serde_json::to_string(bounds.cuts())
        .map_err(|e| DataError::Json { path: path.display().to_string(), detail: e.to_string() })?;
    fs::write(&path, json).map_err(|e| io_err(&path, e))
}
