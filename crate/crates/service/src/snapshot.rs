//! On-disk session snapshots: a JSON document per session plus DGRID blobs.
//!
//! A snapshot stores the create request, the feedback set and the refinement
//! and optimizer state. Restoring re-synthesizes the counter from the request,
//! reinstates the state and checks the prediction against the saved one.

use std::fs;
use std::path::{Path, PathBuf};

use icount::adapt::{AdaptState, CountRange, FeedbackRecord};
use icount::formats::{load_dgrid, save_dgrid};
use serde::{Deserialize, Serialize};

use crate::api::CreateRequest;

const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum SnapshotError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Core(#[from] icount::Error),
    #[error("{0}")]
    Invalid(String),
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> SnapshotError + '_ {
    move |source| SnapshotError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SavedRecord {
    pub region_id: u32,
    pub pixels: Vec<usize>,
    pub range: CountRange,
    pub iteration: usize,
}

impl From<&FeedbackRecord> for SavedRecord {
    fn from(r: &FeedbackRecord) -> Self {
        Self {
            region_id: r.region_id,
            pixels: r.pixels.clone(),
            range: r.range,
            iteration: r.iteration,
        }
    }
}

impl From<SavedRecord> for FeedbackRecord {
    fn from(r: SavedRecord) -> Self {
        Self {
            region_id: r.region_id,
            pixels: r.pixels,
            range: r.range,
            iteration: r.iteration,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub version: u32,
    pub id: String,
    /// The create request with any uploaded grid moved to `<id>.input.dgrid`.
    pub request: CreateRequest,
    pub has_input_blob: bool,
    pub adapt: AdaptState,
    pub feedback: Vec<SavedRecord>,
    pub iteration: usize,
    pub generation: u64,
}

pub fn json_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.json"))
}

fn input_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.input.dgrid"))
}

pub fn prediction_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.prediction.dgrid"))
}

/// Writes the snapshot files, replacing the JSON document atomically.
pub fn write(
    dir: &Path,
    id: &str,
    request: &CreateRequest,
    session: &icount::session::InteractiveSession,
) -> Result<(), SnapshotError> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let mut request = request.clone();
    let has_input_blob = request.dgrid.is_some();
    if has_input_blob {
        let gt = request
            .ground_truth(usize::MAX)
            .map_err(|e| SnapshotError::Invalid(e.message))?;
        save_dgrid(input_path(dir, id), &gt)?;
        request.dgrid = None;
    }
    save_dgrid(prediction_path(dir, id), session.prediction())?;
    let snapshot = Snapshot {
        version: VERSION,
        id: id.to_string(),
        request,
        has_input_blob,
        adapt: session.adapt_state().clone(),
        feedback: session.feedback().iter().map(SavedRecord::from).collect(),
        iteration: session.iteration(),
        generation: session.generation(),
    };
    let path = json_path(dir, id);
    let tmp = dir.join(format!("{id}.json.tmp"));
    fs::write(&tmp, serde_json::to_vec(&snapshot)?).map_err(io(&tmp))?;
    fs::rename(&tmp, &path).map_err(io(&path))
}

/// Reads a snapshot and the request it was created from, with any uploaded
/// grid restored into the request.
pub fn read(path: &Path) -> Result<Snapshot, SnapshotError> {
    let text = fs::read(path).map_err(io(path))?;
    let mut snapshot: Snapshot = serde_json::from_slice(&text)?;
    if snapshot.version != VERSION {
        return Err(SnapshotError::Invalid(format!("unsupported snapshot version {}", snapshot.version)));
    }
    if uuid::Uuid::parse_str(&snapshot.id).is_err() {
        return Err(SnapshotError::Invalid(format!("bad session id {:?}", snapshot.id)));
    }
    if snapshot.has_input_blob {
        let dir = path.parent().unwrap_or(Path::new("."));
        let grid = load_dgrid(input_path(dir, &snapshot.id))?;
        snapshot.request = CreateRequest {
            dgrid: CreateRequest::from_grid(&grid).dgrid,
            ..snapshot.request
        };
    }
    Ok(snapshot)
}

pub fn remove(dir: &Path, id: &str) {
    for p in [json_path(dir, id), input_path(dir, id), prediction_path(dir, id)] {
        if let Err(e) = fs::remove_file(&p) {
            if e.kind() != std::io::ErrorKind::NotFound {
                tracing::warn!("removing {}: {e}", p.display());
            }
        }
    }
}

/// Snapshot documents found in `dir`.
pub fn list(dir: &Path) -> Result<Vec<PathBuf>, SnapshotError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    Ok(paths)
}
