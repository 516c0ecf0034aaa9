//! Random metric instances and brute-force reference implementations.
//!
//! Shared with the acceptance target of the cli crate, so it only depends on
//! `segrename`, `rand` and `rand_chacha`.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segrename::context::{extract_nouns, ExtractOptions, RuleTagger};
use segrename::metrics::{LabeledImage, LabeledSegment};
use segrename::model::train::{TrainingImage, TrainingSegment};
use segrename::model::{EncoderManifest, ModelConfig, Renamer, RgbImage};
use segrename::Mask;

pub const NAMES: [&str; 6] = ["c0", "c1", "c2", "c3", "c4", "c5"];

/// Classes below this index are things.
const THINGS: usize = 3;

fn label_index(label: &str) -> usize {
    NAMES.iter().position(|n| *n == label).expect("known label")
}

fn paint(rng: &mut ChaCha8Rng, map: &mut [Option<usize>], w: usize, h: usize, value: Option<usize>) {
    let (x0, y0) = (rng.random_range(0..w), rng.random_range(0..h));
    let (x1, y1) = (rng.random_range(x0 + 1..=w), rng.random_range(y0 + 1..=h));
    for y in y0..y1 {
        for x in x0..x1 {
            map[y * w + x] = value;
        }
    }
}

fn segments_of(map: &[Option<usize>], w: usize, h: usize, labels: &BTreeMap<usize, usize>, scores: Option<&BTreeMap<usize, f64>>) -> Vec<LabeledSegment> {
    let ids: BTreeSet<usize> = map.iter().flatten().copied().collect();
    ids.into_iter()
        .map(|k| {
            let class = labels[&k];
            LabeledSegment {
                id: k as u64 + 1,
                label: NAMES[class].to_string(),
                mask: Mask::from_fn(w, h, |x, y| map[y * w + x] == Some(k)),
                is_thing: class < THINGS,
                score: scores.map(|s| s[&k]),
            }
        })
        .collect()
}

/// Ground truth and predictions over one to four images of at most 16x16
/// pixels and up to six classes. Segments within a set are disjoint.
pub fn random_instance(seed: u64) -> (Vec<LabeledImage>, Vec<LabeledImage>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = rng.random_range(1..=NAMES.len());
    let mut gt = Vec::new();
    let mut pred = Vec::new();
    for i in 0..rng.random_range(1..=4) {
        let (w, h) = (rng.random_range(2..=16), rng.random_range(2..=16));
        let mut gmap = vec![None; w * h];
        let nseg = rng.random_range(1..=6);
        for k in 0..nseg {
            paint(&mut rng, &mut gmap, w, h, Some(k));
        }
        let glabels: BTreeMap<usize, usize> = (0..nseg).map(|k| (k, rng.random_range(0..classes))).collect();

        let mut pmap = gmap.clone();
        let mut next = nseg;
        for _ in 0..rng.random_range(0..=3) {
            let value = match rng.random_range(0..3) {
                0 => None,
                1 => Some(rng.random_range(0..nseg)),
                _ => {
                    next += 1;
                    Some(next - 1)
                }
            };
            paint(&mut rng, &mut pmap, w, h, value);
        }
        let mut plabels = BTreeMap::new();
        let mut scores = BTreeMap::new();
        for k in 0..next {
            let keep = k < nseg && rng.random_bool(0.7);
            plabels.insert(k, if keep { glabels[&k] } else { rng.random_range(0..classes) });
            scores.insert(k, rng.random::<f64>());
        }
        let image_id = format!("img{i}");
        gt.push(LabeledImage {
            image_id: image_id.clone(),
            width: w,
            height: h,
            segments: segments_of(&gmap, w, h, &glabels, None),
        });
        pred.push(LabeledImage {
            image_id,
            width: w,
            height: h,
            segments: segments_of(&pmap, w, h, &plabels, Some(&scores)),
        });
    }
    (gt, pred)
}

/// Symmetric similarity over [`NAMES`] with unit diagonal.
pub fn random_similarity(seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5151);
    let n = NAMES.len();
    let mut s = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = if rng.random_bool(0.3) { 0.0 } else { rng.random::<f64>() };
            s[i][j] = v;
            s[j][i] = v;
        }
    }
    s
}

pub fn lookup(table: &[Vec<f64>], a: &str, b: &str) -> f64 {
    table[label_index(a)][label_index(b)]
}

fn pixel_iou(a: &Mask, b: &Mask) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for y in 0..a.height() {
        for x in 0..a.width() {
            let (p, q) = (a.get(x, y), b.get(x, y));
            inter += (p && q) as usize;
            union += (p || q) as usize;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn pair_up<'a>(gt: &'a [LabeledImage], pred: &'a [LabeledImage]) -> Vec<(&'a LabeledImage, &'a LabeledImage)> {
    gt.iter()
        .map(|g| (g, pred.iter().find(|p| p.image_id == g.image_id).expect("prediction per image")))
        .collect()
}

/// Standard panoptic quality: same-label pairs with IoU above one half.
pub fn oracle_pq(gt: &[LabeledImage], pred: &[LabeledImage]) -> Option<f64> {
    if gt.iter().all(|g| g.segments.is_empty()) {
        return None;
    }
    // class -> (tp, fp, fn, iou sum)
    let mut acc: BTreeMap<&str, (f64, f64, f64, f64)> = BTreeMap::new();
    for (g, p) in pair_up(gt, pred) {
        let mut pred_hit = vec![false; p.segments.len()];
        for gs in &g.segments {
            let hit = p
                .segments
                .iter()
                .enumerate()
                .find(|(_, ps)| ps.label == gs.label && pixel_iou(&gs.mask, &ps.mask) > 0.5);
            let e = acc.entry(&gs.label).or_default();
            match hit {
                Some((j, ps)) => {
                    pred_hit[j] = true;
                    e.0 += 1.0;
                    e.3 += pixel_iou(&gs.mask, &ps.mask);
                }
                None => e.2 += 1.0,
            }
        }
        for (ps, hit) in p.segments.iter().zip(pred_hit) {
            if !hit {
                acc.entry(&ps.label).or_default().1 += 1.0;
            }
        }
    }
    let pqs: Vec<f64> = acc
        .values()
        .filter(|c| c.0 + c.1 + c.2 > 0.0)
        .map(|&(tp, fp, fn_, iou)| iou / (tp + 0.5 * fp + 0.5 * fn_))
        .collect();
    Some(pqs.iter().sum::<f64>() / pqs.len() as f64)
}

fn pixel_labels(image: &LabeledImage) -> Vec<Option<&str>> {
    let mut out = vec![None; image.width * image.height];
    for s in &image.segments {
        for y in 0..image.height {
            for x in 0..image.width {
                if s.mask.get(x, y) {
                    out[y * image.width + x] = Some(s.label.as_str());
                }
            }
        }
    }
    out
}

/// Per-class soft IoU from a pixel loop: for every class and every pixel
/// labeled in the ground truth, add that pixel's share to TP, FN and FP.
pub fn oracle_soft_iou(gt: &[LabeledImage], pred: &[LabeledImage], s: &dyn Fn(&str, &str) -> f64) -> (Option<f64>, BTreeMap<String, f64>) {
    let mut per_class = BTreeMap::new();
    for c in NAMES {
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for (g, p) in pair_up(gt, pred) {
            let (gl, pl) = (pixel_labels(g), pixel_labels(p));
            for (a, b) in gl.iter().zip(&pl) {
                let Some(a) = a else { continue };
                if *a == c {
                    let w = b.map_or(0.0, |b| s(a, b));
                    tp += w;
                    fn_ += 1.0 - w;
                }
                if *b == Some(c) {
                    fp += 1.0 - s(a, c);
                }
            }
        }
        if tp + fp + fn_ > 0.0 {
            per_class.insert(c.to_string(), tp / (tp + fp + fn_));
        }
    }
    if per_class.is_empty() {
        return (None, per_class);
    }
    let mean = per_class.values().sum::<f64>() / per_class.len() as f64;
    (Some(mean), per_class)
}

pub fn oracle_miou(gt: &[LabeledImage], pred: &[LabeledImage]) -> Option<f64> {
    oracle_soft_iou(gt, pred, &|a, b| (a == b) as u8 as f64).0
}

/// Standard mask AP averaged over IoU thresholds 0.50 to 0.95 and thing classes.
pub fn oracle_ap(gt: &[LabeledImage], pred: &[LabeledImage]) -> Option<f64> {
    let pairs = pair_up(gt, pred);
    let classes: BTreeSet<&str> = gt
        .iter()
        .flat_map(|g| g.segments.iter().filter(|s| s.is_thing).map(|s| s.label.as_str()))
        .collect();
    if classes.is_empty() {
        return None;
    }
    let mut aps = Vec::new();
    for c in &classes {
        let num_gt = gt.iter().flat_map(|g| &g.segments).filter(|s| s.is_thing && s.label == *c).count() as f64;
        let mut dets: Vec<(f64, usize, usize)> = Vec::new();
        for (i, (_, p)) in pairs.iter().enumerate() {
            for (j, s) in p.segments.iter().enumerate() {
                if s.is_thing && s.label == *c {
                    dets.push((s.score.unwrap(), i, j));
                }
            }
        }
        dets.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));
        let mut ap_sum = 0.0;
        for k in 0..10 {
            let t = (50 + 5 * k) as f64 / 100.0;
            let mut used = BTreeSet::new();
            let mut hits = Vec::new();
            for &(_, i, j) in &dets {
                let (g, p) = pairs[i];
                let mut best: Option<(usize, f64)> = None;
                for (gi, gs) in g.segments.iter().enumerate() {
                    if gs.is_thing && gs.label == *c && !used.contains(&(i, gi)) {
                        let iou = pixel_iou(&gs.mask, &p.segments[j].mask);
                        if iou >= t && best.is_none_or(|(_, b)| iou > b) {
                            best = Some((gi, iou));
                        }
                    }
                }
                if let Some((gi, _)) = best {
                    used.insert((i, gi));
                }
                hits.push(best.is_some());
            }
            // (recall, precision) after each detection
            let mut curve = Vec::new();
            let mut tp = 0.0;
            for (n, hit) in hits.iter().enumerate() {
                tp += *hit as u8 as f64;
                curve.push((tp / num_gt, tp / (n + 1) as f64));
            }
            let sum: f64 = (0..=100)
                .map(|r| {
                    let r = r as f64 / 100.0;
                    curve.iter().filter(|(rc, _)| *rc >= r).map(|(_, pr)| *pr).fold(0.0, f64::max)
                })
                .sum();
            ap_sum += sum / 101.0;
        }
        aps.push(ap_sum / 10.0);
    }
    Some(aps.iter().sum::<f64>() / aps.len() as f64)
}

pub fn close(a: Option<f64>, b: Option<f64>, tol: f64) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(a), Some(b)) => (a - b).abs() <= tol,
        _ => false,
    }
}

pub fn toy_renamer(dim: usize, heads: usize, blocks: usize, seed: u64) -> Renamer {
    let config = ModelConfig {
        dim,
        heads,
        ffn_dim: 2 * dim,
        blocks,
        num_classes: 2,
        init_seed: seed,
    };
    EncoderManifest::hashing(dim, seed)
        .renamer(config, vec![1, 2], std::path::Path::new("."))
        .unwrap()
}

pub fn toy_image(renamer: &Renamer, size: usize, seed: u64) -> (RgbImage, TrainingImage) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rgb = RgbImage::from_fn(size, size, |x, _| {
        let base = if x < size / 2 { 0.2 } else { 0.7 };
        [base + rng.random_range(0.0..0.1), 0.5, 1.0 - base]
    });
    let image = TrainingImage {
        image_id: "toy".into(),
        width: size,
        height: size,
        backbone: renamer.vision.encode_image(&rgb),
        segments: vec![TrainingSegment {
            segment_id: 1,
            class_index: 0,
            mask: Mask::rect(size, size, 0, 0, size / 2, size),
        }],
    };
    (rgb, image)
}


pub const WORDS: &[&str] = &[
    "a", "the", "with", "near", "of", "under", "field", "fields", "grass", "sky", "road", "tree", "trees", "cow", "lush",
    "green", "grassy", "rural", "hillside", "view", "image", "picture", "river", "boats", "blue",
];

/// Repeated selection of the highest count, lexicographically smallest first.
pub fn brute_force_top_k(captions: &[String], k: usize, options: &ExtractOptions) -> Vec<(String, u32)> {
    let mut counts: HashMap<String, u32> = HashMap::new();
    for c in captions {
        for n in extract_nouns(c, &RuleTagger, options) {
            *counts.entry(n).or_default() += 1;
        }
    }
    let mut out = Vec::new();
    while out.len() < k && !counts.is_empty() {
        let best = counts
            .iter()
            .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
            .map(|(n, c)| (n.clone(), *c))
            .unwrap();
        counts.remove(&best.0);
        out.push(best);
    }
    out
}

