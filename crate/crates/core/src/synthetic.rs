//! Synthetic planted-name dataset.
//!
//! Each class has a few named subtypes, each with a prototype colour. A segment
//! is painted in its subtype's colour plus noise, and the subtype's name gets a
//! text embedding close to the frozen visual feature of that colour. A model
//! that learns to match queries to pixels should therefore rank the planted
//! name first among its class's candidates.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::candidates::{CandidateEntry, CandidateStore, Provenance};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::model::{EncoderManifest, Renamer, RgbImage, TemplateSet, TextEncoderSpec, ENCODERS_FILE};
use crate::names::{normalized, TableEncoder};
use crate::renovation::rank_by_scores;
use crate::store::{save_dataset, ClassTable, Dataset, ImageEntry, SegmentRecord};

const CLASS_NAMES: [&str; 8] = ["field", "tree", "road", "sky", "water", "rock", "wall", "sand"];
const ADJECTIVES: [&str; 10] = [
    "rural", "green", "dry", "wet", "dark", "bright", "old", "tall", "wild", "pale",
];

pub const CANDIDATES_FILE: &str = "candidates.json";
pub const PLANTED_FILE: &str = "planted.json";
pub const TEXT_TABLE_FILE: &str = "text_embeddings.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub names_per_class: usize,
    pub images: usize,
    pub size: usize,
    pub dim: usize,
    /// Per-pixel colour noise (standard deviation per channel).
    pub color_noise: f64,
    /// Noise added to the planted text embeddings before normalisation.
    pub embedding_noise: f64,
    pub min_color_distance: f64,
    pub vision_bandwidth: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            classes: 4,
            names_per_class: 5,
            images: 48,
            size: 16,
            dim: 64,
            color_noise: 0.02,
            embedding_noise: 0.1,
            min_color_distance: 0.25,
            vision_bandwidth: 10.0,
            seed: 0,
        }
    }
}

/// What was generated, beyond the files on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    /// Planted name per segment id.
    pub planted: BTreeMap<u64, String>,
    pub pools: BTreeMap<u32, Vec<String>>,
    pub encoders: EncoderManifest,
}

pub fn planted_name(class: usize, subtype: usize) -> String {
    format!("{} {}", ADJECTIVES[subtype], CLASS_NAMES[class])
}

fn prototypes(count: usize, min_distance: f64, rng: &mut impl Rng) -> Result<Vec<[f64; 3]>> {
    let mut out: Vec<[f64; 3]> = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::Config(format!(
                "cannot place {count} colours {min_distance} apart"
            )));
        }
        let c = [
            rng.random_range(0.05..0.95),
            rng.random_range(0.05..0.95),
            rng.random_range(0.05..0.95),
        ];
        let far = out.iter().all(|o| {
            let d2: f64 = o.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum();
            d2.sqrt() >= min_distance
        });
        if far {
            out.push(c);
        }
    }
    Ok(out)
}

/// Write the dataset, candidate pools, text table and planted names under `root`.
pub fn generate(root: &Path, config: &SyntheticConfig) -> Result<SyntheticDataset> {
    if config.classes < 2 || config.classes > CLASS_NAMES.len() {
        return Err(Error::Config(format!(
            "classes must be between 2 and {}",
            CLASS_NAMES.len()
        )));
    }
    if !(5..=ADJECTIVES.len()).contains(&config.names_per_class) {
        return Err(Error::Config(format!(
            "names_per_class must be between 5 and {}",
            ADJECTIVES.len()
        )));
    }
    if config.size < 4 || config.images == 0 {
        return Err(Error::Config("need at least one image of size 4 or more".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = config.names_per_class;
    let colors = prototypes(config.classes * n, config.min_color_distance, &mut rng)?;
    let encoders = EncoderManifest {
        dim: config.dim,
        vision_bandwidth: config.vision_bandwidth,
        vision_seed: config.seed,
        text: TextEncoderSpec::Table {
            path: TEXT_TABLE_FILE.into(),
        },
        templates: TemplateSet::Identity,
    };
    let vision = encoders.vision();

    let noise = Normal::new(0.0, config.embedding_noise / (config.dim as f64).sqrt())
        .map_err(|e| Error::Config(e.to_string()))?;
    let mut table = TableEncoder {
        dim: config.dim,
        table: BTreeMap::new(),
    };
    let mut classes = ClassTable::default();
    let mut candidates = CandidateStore::default();
    let mut pools = BTreeMap::new();
    for k in 0..config.classes {
        let class_id = k as u32 + 1;
        classes.insert(class_id, &[CLASS_NAMES[k]], false);
        let names: Vec<String> = (0..n).map(|s| planted_name(k, s)).collect();
        for (s, name) in names.iter().enumerate() {
            let mut v = vision.encode_color(colors[k * n + s]);
            v.iter_mut().for_each(|x| *x += noise.sample(&mut rng));
            let v = normalized(&v).ok_or(Error::DegenerateEnsemble)?;
            table.table.insert(name.clone(), v);
        }
        candidates.classes.insert(
            class_id,
            CandidateEntry {
                original_names: vec![CLASS_NAMES[k].to_string()],
                context: Vec::new(),
                candidates: names.clone(),
                provenance: Provenance::Fixture,
            },
        );
        pools.insert(class_id, names);
    }

    let pixel_noise = Normal::new(0.0, config.color_noise).map_err(|e| Error::Config(e.to_string()))?;
    let size = config.size;
    let mut images = Vec::new();
    let mut segments = Vec::new();
    let mut planted = BTreeMap::new();
    let mut next_id = 1u64;
    for i in 0..config.images {
        let image_id = format!("img{i:04}");
        let sx = rng.random_range(size / 3..=size - size / 3);
        let sy = rng.random_range(size / 3..=size - size / 3);
        let rects = [(0, 0, sx, sy), (sx, 0, size, sy), (0, sy, sx, size), (sx, sy, size, size)];
        let mut rgb = RgbImage::from_fn(size, size, |_, _| [0.0; 3]);
        for (x0, y0, x1, y1) in rects {
            let k = rng.random_range(0..config.classes);
            let s = rng.random_range(0..n);
            let color = colors[k * n + s];
            let mask = Mask::rect(size, size, x0, y0, x1, y1);
            for p in mask.iter_indices() {
                let mut c = color;
                for ch in &mut c {
                    *ch = (*ch + pixel_noise.sample(&mut rng)).clamp(0.0, 1.0);
                }
                rgb.pixels[p] = c;
            }
            planted.insert(next_id, planted_name(k, s));
            segments.push(SegmentRecord {
                segment_id: next_id,
                image_id: image_id.clone(),
                original_class_id: k as u32 + 1,
                area: mask.area(),
                mask,
                is_thing: false,
                score: None,
            });
            next_id += 1;
        }
        let image_rel = format!("images/{image_id}.png");
        rgb.write_png(&root.join(&image_rel))?;
        images.push(ImageEntry {
            image_id: image_id.clone(),
            label_map: format!("labels/{image_id}.png"),
            image: Some(image_rel),
            width: size,
            height: size,
            segments: Vec::new(),
        });
    }

    save_dataset(root, &classes, &images, &segments)?;
    candidates.write(&root.join(CANDIDATES_FILE))?;
    table.write(&root.join(TEXT_TABLE_FILE))?;
    encoders.write(&root.join(ENCODERS_FILE))?;
    crate::store::write_json(&root.join(PLANTED_FILE), &planted)?;
    Ok(SyntheticDataset {
        planted,
        pools,
        encoders,
    })
}

pub fn read_planted(path: &Path) -> Result<BTreeMap<u64, String>> {
    crate::store::read_json(path)
}

/// How well a renamer recovers planted names.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub segments: usize,
    /// Fraction of segments whose best-ranked candidate is the planted name.
    pub top1_accuracy: f64,
    /// Fraction of segments where a negative from another class scores
    /// strictly below the planted name.
    pub negative_below_planted: f64,
}

/// Rank each segment's pool, and separately the pool plus one negative drawn
/// from another class, on the images accepted by `include`.
pub fn measure_recovery(
    renamer: &Renamer,
    dataset: &Dataset,
    planted: &BTreeMap<u64, String>,
    pools: &BTreeMap<u32, Vec<String>>,
    include: impl Fn(&str) -> bool,
    seed: u64,
) -> Result<RecoveryReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut n, mut hits, mut below) = (0usize, 0usize, 0usize);
    for (img, segs) in dataset.segments_by_image() {
        if !include(&img.image_id) {
            continue;
        }
        let path = dataset.rgb_path(&img.image_id).ok_or_else(|| Error::Unknown {
            what: "image file for",
            id: img.image_id.clone(),
        })?;
        let pixels = renamer.pixel_values(&RgbImage::read_png(&path)?)?;
        for s in segs {
            let unknown = |what| Error::Unknown {
                what,
                id: s.segment_id.to_string(),
            };
            let pool = pools.get(&s.original_class_id).ok_or_else(|| unknown("pool for segment"))?;
            let target = planted.get(&s.segment_id).ok_or_else(|| unknown("planted name for segment"))?;
            let planted_at = pool.iter().position(|p| p == target).ok_or_else(|| unknown("planted name in pool of segment"))?;

            let (scores, _) = renamer.score_names(&pixels, &s.mask, pool)?;
            if rank_by_scores(pool, &scores)[0].0 == *target {
                hits += 1;
            }

            let others: Vec<&String> = pools
                .iter()
                .filter(|(c, _)| **c != s.original_class_id)
                .flat_map(|(_, names)| names)
                .filter(|name| !pool.contains(name))
                .collect();
            if others.is_empty() {
                return Err(Error::InvalidData("no negative names outside the segment's pool".into()));
            }
            let mut names = pool.clone();
            names.push(others[rng.random_range(0..others.len())].clone());
            let (scores, _) = renamer.score_names(&pixels, &s.mask, &names)?;
            if scores[pool.len()] < scores[planted_at] {
                below += 1;
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidData("no segments to measure".into()));
    }
    Ok(RecoveryReport {
        segments: n,
        top1_accuracy: hits as f64 / n as f64,
        negative_below_planted: below as f64 / n as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{load_dataset, DatasetKind};

    #[test]
    fn generates_loadable_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig {
            images: 3,
            ..SyntheticConfig::default()
        };
        let synth = generate(dir.path(), &cfg).unwrap();
        let ds = load_dataset(dir.path(), DatasetKind::Panoptic).unwrap();
        assert_eq!(ds.segments.len(), 12);
        assert_eq!(synth.planted.len(), 12);
        for s in &ds.segments {
            let name = &synth.planted[&s.segment_id];
            assert!(synth.pools[&s.original_class_id].contains(name));
        }
        let store = CandidateStore::read(&dir.path().join(CANDIDATES_FILE)).unwrap();
        assert_eq!(store.pools(), synth.pools);
        assert_eq!(read_planted(&dir.path().join(PLANTED_FILE)).unwrap(), synth.planted);
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig {
            images: 2,
            ..SyntheticConfig::default()
        };
        generate(a.path(), &cfg).unwrap();
        generate(b.path(), &cfg).unwrap();
        for f in [TEXT_TABLE_FILE, PLANTED_FILE, "index.json", "images/img0001.png"] {
            assert_eq!(
                std::fs::read(a.path().join(f)).unwrap(),
                std::fs::read(b.path().join(f)).unwrap()
            );
        }
    }
}
