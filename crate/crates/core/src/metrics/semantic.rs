use std::collections::BTreeMap;

use super::panoptic::{similarity, SoftCounts};
use super::{LabeledImage, MetricMode};
use crate::error::{Error, Result};
use crate::names::NameSimilarity;

/// Per-pixel labels over a small vocabulary; `None` is unlabeled.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMap {
    pub width: usize,
    pub height: usize,
    pub vocab: Vec<String>,
    pub labels: Vec<Option<usize>>,
}

impl SemanticMap {
    pub fn from_labels(width: usize, height: usize, labels: &[Option<&str>]) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::Shape(format!(
                "{} labels for a {width}x{height} map",
                labels.len()
            )));
        }
        let mut vocab: Vec<String> = Vec::new();
        let mut index: BTreeMap<&str, usize> = BTreeMap::new();
        let labels = labels
            .iter()
            .map(|l| {
                l.map(|name| {
                    *index.entry(name).or_insert_with(|| {
                        vocab.push(name.to_string());
                        vocab.len() - 1
                    })
                })
            })
            .collect();
        Ok(SemanticMap {
            width,
            height,
            vocab,
            labels,
        })
    }

    /// Paint an image's segments; later segments win where they overlap.
    pub fn from_image(image: &LabeledImage) -> Self {
        let mut vocab: Vec<String> = Vec::new();
        let mut labels = vec![None; image.width * image.height];
        for s in &image.segments {
            let idx = match vocab.iter().position(|v| *v == s.label) {
                Some(i) => i,
                None => {
                    vocab.push(s.label.clone());
                    vocab.len() - 1
                }
            };
            for i in s.mask.iter_indices() {
                labels[i] = Some(idx);
            }
        }
        SemanticMap {
            width: image.width,
            height: image.height,
            vocab,
            labels,
        }
    }

    pub fn label(&self, i: usize) -> Option<&str> {
        self.labels[i].map(|l| self.vocab[l].as_str())
    }
}

/// Add pixel-level soft counts. Pixels unlabeled in the ground truth are
/// ignored; labeled pixels without a prediction count as misses.
pub fn accumulate_semantic(
    counts: &mut SoftCounts,
    gt: &SemanticMap,
    pred: &SemanticMap,
    mode: MetricMode,
    s: &dyn NameSimilarity,
) -> Result<()> {
    if (gt.width, gt.height) != (pred.width, pred.height) {
        return Err(Error::Shape(format!(
            "ground truth {}x{} vs prediction {}x{}",
            gt.width, gt.height, pred.width, pred.height
        )));
    }
    let mut pairs: BTreeMap<(usize, Option<usize>), usize> = BTreeMap::new();
    for (g, p) in gt.labels.iter().zip(&pred.labels) {
        if let Some(g) = g {
            *pairs.entry((*g, *p)).or_default() += 1;
        }
    }
    for ((g, p), n) in pairs {
        let n = n as f64;
        let ci = &gt.vocab[g];
        match p {
            None => counts.entry(ci).fn_ += n,
            Some(p) => {
                let cj = &pred.vocab[p];
                let w = similarity(mode, s, ci, cj);
                let e = counts.entry(ci);
                e.tp += n * w;
                e.fn_ += n * (1.0 - w);
                counts.entry(cj).fp += n * (1.0 - w);
            }
        }
    }
    Ok(())
}

/// Per-class IoU and their mean over classes present in ground truth or prediction.
pub fn semantic_miou(counts: &SoftCounts) -> (Option<f64>, BTreeMap<String, f64>) {
    let per_class: BTreeMap<String, f64> = counts
        .classes
        .iter()
        .filter(|(_, c)| c.present())
        .map(|(l, c)| (l.clone(), c.tp / (c.tp + c.fp + c.fn_)))
        .collect();
    if per_class.is_empty() {
        return (None, per_class);
    }
    let mean = per_class.values().sum::<f64>() / per_class.len() as f64;
    (Some(mean), per_class)
}
