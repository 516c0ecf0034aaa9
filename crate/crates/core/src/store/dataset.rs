use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::labelmap::{LabelMap, MAX_SEGMENT_ID};
use crate::error::{Error, Result};
use crate::mask::Mask;

pub const INDEX_FILE: &str = "index.json";
pub const CLASSES_FILE: &str = "classes.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Panoptic,
    Semantic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub original_names: Vec<String>,
    pub is_thing: bool,
}

/// Original benchmark classes keyed by class id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTable {
    pub classes: BTreeMap<u32, ClassEntry>,
}

impl ClassTable {
    pub fn insert(&mut self, class_id: u32, names: &[&str], is_thing: bool) {
        self.classes.insert(
            class_id,
            ClassEntry {
                original_names: names.iter().map(|n| n.to_lowercase()).collect(),
                is_thing,
            },
        );
    }

    pub fn get(&self, class_id: u32) -> Option<&ClassEntry> {
        self.classes.get(&class_id)
    }

    pub fn contains(&self, class_id: u32) -> bool {
        self.classes.contains_key(&class_id)
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// The name string used for a class in prompts and metric labels, e.g. `"rock, stone"`.
    pub fn label(&self, class_id: u32) -> Option<String> {
        self.get(class_id).map(|c| c.original_names.join(", "))
    }

    pub fn ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.classes.keys().copied()
    }

    pub fn validate(&self) -> Result<()> {
        for (id, entry) in &self.classes {
            if entry.original_names.is_empty() {
                return Err(Error::InvalidData(format!("class {id} has no original names")));
            }
            for name in &entry.original_names {
                if name.trim().is_empty() || *name != name.to_lowercase() {
                    return Err(Error::InvalidData(format!(
                        "class {id}: original name {name:?} must be non-empty lowercase"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: ClassTable = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
        table.validate()?;
        Ok(table)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.validate()?;
        super::write_json(path, self)
    }
}

/// One ground-truth (or predicted) segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub segment_id: u64,
    pub image_id: String,
    pub original_class_id: u32,
    pub mask: Mask,
    pub area: usize,
    pub is_thing: bool,
    /// Confidence, present on prediction sets only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentInfo {
    pub id: u64,
    pub class_id: u32,
    pub area: usize,
    pub is_thing: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEntry {
    pub image_id: String,
    pub label_map: String,
    /// Optional RGB photograph used for training and the verification UI.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<String>,
    pub width: usize,
    pub height: usize,
    #[serde(default)]
    pub segments: Vec<SegmentInfo>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnnotationIndex {
    pub images: Vec<ImageEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub root: PathBuf,
    pub kind: DatasetKind,
    pub classes: ClassTable,
    pub images: Vec<ImageEntry>,
    pub segments: Vec<SegmentRecord>,
}

impl Dataset {
    pub fn image(&self, image_id: &str) -> Option<&ImageEntry> {
        self.images.iter().find(|i| i.image_id == image_id)
    }

    pub fn segment(&self, segment_id: u64) -> Option<&SegmentRecord> {
        self.segments.iter().find(|s| s.segment_id == segment_id)
    }

    /// Segments grouped by image, in image order.
    pub fn segments_by_image(&self) -> Vec<(&ImageEntry, Vec<&SegmentRecord>)> {
        let mut by_image: HashMap<&str, Vec<&SegmentRecord>> = HashMap::new();
        for s in &self.segments {
            by_image.entry(s.image_id.as_str()).or_default().push(s);
        }
        self.images
            .iter()
            .map(|img| {
                (
                    img,
                    by_image.remove(img.image_id.as_str()).unwrap_or_default(),
                )
            })
            .collect()
    }

    pub fn rgb_path(&self, image_id: &str) -> Option<PathBuf> {
        self.image(image_id)
            .and_then(|i| i.image.as_ref())
            .map(|p| self.root.join(p))
    }
}

/// Load a dataset stored under `root` as `index.json`, `classes.json` and label-map PNGs.
///
/// Panoptic label maps hold segment ids. Semantic label maps hold `class_id + 1`
/// (0 is unlabeled); each 4-connected class region becomes one segment, numbered
/// in scan order across the dataset.
pub fn load_dataset(root: &Path, kind: DatasetKind) -> Result<Dataset> {
    let classes = ClassTable::read(&root.join(CLASSES_FILE))?;
    let index_path = root.join(INDEX_FILE);
    let text = std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: AnnotationIndex =
        serde_json::from_str(&text).map_err(|e| Error::parse(&index_path, e))?;

    let mut segments = Vec::new();
    let mut seen_ids = BTreeSet::new();
    let mut images = Vec::with_capacity(index.images.len());
    let mut next_semantic_id = 1u64;
    for mut entry in index.images {
        let map = LabelMap::read_png(&root.join(&entry.label_map))?;
        if map.width != entry.width || map.height != entry.height {
            return Err(Error::InvalidData(format!(
                "image {}: index says {}x{}, label map is {}x{}",
                entry.image_id, entry.width, entry.height, map.width, map.height
            )));
        }
        match kind {
            DatasetKind::Panoptic => {
                load_panoptic_image(&entry, &map, &classes, &mut seen_ids, &mut segments)?
            }
            DatasetKind::Semantic => {
                let found =
                    semantic_components(&entry.image_id, &map, &classes, &mut next_semantic_id)?;
                entry.segments = found
                    .iter()
                    .map(|s| SegmentInfo {
                        id: s.segment_id,
                        class_id: s.original_class_id,
                        area: s.area,
                        is_thing: s.is_thing,
                        score: None,
                    })
                    .collect();
                segments.extend(found);
            }
        }
        images.push(entry);
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        kind,
        classes,
        images,
        segments,
    })
}

fn load_panoptic_image(
    entry: &ImageEntry,
    map: &LabelMap,
    classes: &ClassTable,
    seen_ids: &mut BTreeSet<u64>,
    out: &mut Vec<SegmentRecord>,
) -> Result<()> {
    let mut pixels: HashMap<u64, Vec<usize>> = HashMap::new();
    for (i, &id) in map.ids.iter().enumerate() {
        if id != 0 {
            pixels.entry(id).or_default().push(i);
        }
    }
    let indexed: BTreeSet<u64> = entry.segments.iter().map(|s| s.id).collect();
    if let Some(stray) = pixels.keys().filter(|id| !indexed.contains(id)).min() {
        return Err(Error::InvalidData(format!(
            "image {}: label map contains id {stray} missing from the annotation index",
            entry.image_id
        )));
    }
    for info in &entry.segments {
        if !classes.contains(info.class_id) {
            return Err(Error::InvalidData(format!(
                "segment {}: class {} not in class table",
                info.id, info.class_id
            )));
        }
        if info.id == 0 || info.id >= MAX_SEGMENT_ID {
            return Err(Error::SegmentIdOutOfRange(info.id));
        }
        if !seen_ids.insert(info.id) {
            return Err(Error::InvalidData(format!(
                "segment id {} appears more than once",
                info.id
            )));
        }
        let Some(idx) = pixels.get(&info.id) else {
            if info.area == 0 {
                log::warn!(
                    "image {}: skipping zero-area segment {}",
                    entry.image_id,
                    info.id
                );
                continue;
            }
            return Err(Error::DanglingSegment {
                image_id: entry.image_id.clone(),
                segment_id: info.id,
            });
        };
        let mut mask = Mask::empty(map.width, map.height);
        for &i in idx {
            mask.set_index(i, true);
        }
        if info.area != idx.len() {
            log::warn!(
                "segment {}: index area {} differs from pixel count {}",
                info.id,
                info.area,
                idx.len()
            );
        }
        out.push(SegmentRecord {
            segment_id: info.id,
            image_id: entry.image_id.clone(),
            original_class_id: info.class_id,
            area: idx.len(),
            mask,
            is_thing: info.is_thing,
            score: info.score,
        });
    }
    Ok(())
}

fn semantic_components(
    image_id: &str,
    map: &LabelMap,
    classes: &ClassTable,
    next_id: &mut u64,
) -> Result<Vec<SegmentRecord>> {
    let (w, h) = (map.width, map.height);
    let mut visited = vec![false; w * h];
    let mut out = Vec::new();
    for start in 0..w * h {
        let value = map.ids[start];
        if value == 0 || visited[start] {
            continue;
        }
        let class_id = u32::try_from(value - 1)
            .map_err(|_| Error::InvalidData(format!("class value {value} too large")))?;
        let Some(entry) = classes.get(class_id) else {
            return Err(Error::InvalidData(format!(
                "image {image_id}: class {class_id} not in class table"
            )));
        };
        let mut mask = Mask::empty(w, h);
        let mut queue = VecDeque::from([start]);
        visited[start] = true;
        while let Some(i) = queue.pop_front() {
            mask.set_index(i, true);
            let (x, y) = (i % w, i / w);
            let mut push = |j: usize| {
                if !visited[j] && map.ids[j] == value {
                    visited[j] = true;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < w {
                push(i + 1);
            }
            if y > 0 {
                push(i - w);
            }
            if y + 1 < h {
                push(i + w);
            }
        }
        out.push(SegmentRecord {
            segment_id: *next_id,
            image_id: image_id.to_string(),
            original_class_id: class_id,
            area: mask.area(),
            mask,
            is_thing: entry.is_thing,
            score: None,
        });
        *next_id += 1;
    }
    Ok(out)
}

/// Persist a panoptic dataset: label maps, index and class table under `root`.
///
/// Image entries are written in the order given; segments are rewritten from
/// `segments`, so `load_dataset(save_dataset(x))` reproduces `x`.
pub fn save_dataset(
    root: &Path,
    classes: &ClassTable,
    images: &[ImageEntry],
    segments: &[SegmentRecord],
) -> Result<()> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut by_image: HashMap<&str, Vec<&SegmentRecord>> = HashMap::new();
    for s in segments {
        if s.area != s.mask.area() || s.area == 0 {
            return Err(Error::Invariant(format!(
                "segment {}: area {} but mask has {} pixels",
                s.segment_id,
                s.area,
                s.mask.area()
            )));
        }
        by_image.entry(s.image_id.as_str()).or_default().push(s);
    }
    let mut index = AnnotationIndex::default();
    for img in images {
        let mut map = LabelMap::new(img.width, img.height);
        let mut infos = Vec::new();
        for s in by_image.remove(img.image_id.as_str()).unwrap_or_default() {
            if s.mask.width() != img.width || s.mask.height() != img.height {
                return Err(Error::Shape(format!(
                    "segment {} mask does not match image {}",
                    s.segment_id, img.image_id
                )));
            }
            for i in s.mask.iter_indices() {
                if map.ids[i] != 0 {
                    return Err(Error::Invariant(format!(
                        "segments {} and {} overlap",
                        map.ids[i], s.segment_id
                    )));
                }
                map.ids[i] = s.segment_id;
            }
            infos.push(SegmentInfo {
                id: s.segment_id,
                class_id: s.original_class_id,
                area: s.area,
                is_thing: s.is_thing,
                score: s.score,
            });
        }
        map.write_png(&root.join(&img.label_map))?;
        index.images.push(ImageEntry {
            segments: infos,
            ..img.clone()
        });
    }
    if let Some(orphan) = by_image.keys().next() {
        return Err(Error::InvalidData(format!(
            "segments reference unknown image {orphan}"
        )));
    }
    classes.write(&root.join(CLASSES_FILE))?;
    super::write_json(&root.join(INDEX_FILE), &index)
}

/// Write a semantic dataset: label maps hold `class_id + 1` per pixel.
pub fn save_semantic_maps(
    root: &Path,
    classes: &ClassTable,
    maps: &[(ImageEntry, Vec<Option<u32>>)],
) -> Result<()> {
    std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut index = AnnotationIndex::default();
    for (entry, labels) in maps {
        let mut map = LabelMap::new(entry.width, entry.height);
        for (i, l) in labels.iter().enumerate() {
            map.ids[i] = l.map_or(0, |c| c as u64 + 1);
        }
        map.write_png(&root.join(&entry.label_map))?;
        index.images.push(ImageEntry {
            segments: Vec::new(),
            ..entry.clone()
        });
    }
    classes.write(&root.join(CLASSES_FILE))?;
    super::write_json(&root.join(INDEX_FILE), &index)
}
