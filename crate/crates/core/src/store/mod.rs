//! Datasets, label maps and the artifacts the pipeline writes next to them.

mod assignments;
mod dataset;
mod labelmap;

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub use assignments::{
    read_assignments, write_assignments, CrossClassSuggestion, NameAssignment, Verification,
};
pub use dataset::{
    load_dataset, save_dataset, save_semantic_maps, AnnotationIndex, ClassEntry, ClassTable,
    Dataset, DatasetKind, ImageEntry, SegmentInfo, SegmentRecord, CLASSES_FILE, INDEX_FILE,
};
pub use labelmap::{decode_segment_id, encode_segment_id, LabelMap, MAX_SEGMENT_ID};

use crate::error::{Error, Result};

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
}

/// Seeded uniform sample of `round(fraction * n)` items, returned in input order.
pub fn sample_segments<T: Clone>(items: &[T], fraction: f64, seed: u64) -> Result<Vec<T>> {
    if items.is_empty() {
        return Err(Error::InvalidData("cannot sample from an empty segment list".into()));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("sampling fraction {fraction} not in (0, 1]")));
    }
    let n = items.len();
    let k = ((fraction * n as f64).round() as usize).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = sample(&mut rng, n, k).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| items[i].clone()).collect())
}
