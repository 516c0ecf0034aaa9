//! Standard and open-vocabulary PQ, mIoU and AP, with name-grouping protocols.
//!
//! Open metrics replace the 0/1 label agreement of a matched pair with a name
//! similarity `S`: the ground-truth class gets `S` true positives and `1 - S`
//! false negatives, the predicted class `1 - S` false positives.

pub mod instance;
pub mod panoptic;
pub mod semantic;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use instance::{instance_ap, interpolated_ap, iou_thresholds};
pub use panoptic::{accumulate_panoptic, match_segments, panoptic_quality, Counts, MatchSet, MatchedPair, Quality, SoftCounts};
pub use semantic::{accumulate_semantic, semantic_miou, SemanticMap};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::names::{Indicator, NameSimilarity};
use crate::store::{ClassTable, Dataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricMode {
    Standard,
    Open,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Labels are compared as given.
    Plain,
    /// Predicted names are collapsed to their original class.
    MergedNames,
    /// Both ground truth and predictions are collapsed to original classes.
    GroupedToOriginal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSegment {
    pub id: u64,
    pub label: String,
    pub mask: Mask,
    pub is_thing: bool,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub segments: Vec<LabeledSegment>,
}

/// Segments of a dataset labelled with their class label.
pub fn labeled_images(dataset: &Dataset) -> Result<Vec<LabeledImage>> {
    dataset
        .segments_by_image()
        .into_iter()
        .map(|(img, segs)| {
            let segments = segs
                .into_iter()
                .map(|s| {
                    let label = dataset.classes.label(s.original_class_id).ok_or_else(|| Error::Unknown {
                        what: "class",
                        id: s.original_class_id.to_string(),
                    })?;
                    Ok(LabeledSegment {
                        id: s.segment_id,
                        label,
                        mask: s.mask.clone(),
                        is_thing: s.is_thing,
                        score: s.score,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(LabeledImage {
                image_id: img.image_id.clone(),
                width: img.width,
                height: img.height,
                segments,
            })
        })
        .collect()
}

/// Maps every known name to the label of the original class it belongs to.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct NameGrouping {
    pub names: BTreeMap<String, String>,
}

impl NameGrouping {
    /// Union of name sets keyed by original class id. Original labels and names
    /// map to their own class. A name claimed by two classes is an error.
    pub fn merge(original: &ClassTable, sets: &[BTreeMap<u32, Vec<String>>]) -> Result<Self> {
        let mut claims: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for (id, entry) in &original.classes {
            let label = original.label(*id).expect("present");
            claims.entry(label.clone()).or_default().insert(label.clone());
            for n in &entry.original_names {
                claims.entry(n.clone()).or_default().insert(label.clone());
            }
        }
        for set in sets {
            for (id, names) in set {
                let label = original.label(*id).ok_or_else(|| Error::Unknown {
                    what: "original class in name set",
                    id: id.to_string(),
                })?;
                for n in names {
                    claims.entry(n.clone()).or_default().insert(label.clone());
                }
            }
        }
        let mut names = BTreeMap::new();
        for (name, labels) in claims {
            if labels.len() > 1 {
                return Err(Error::NameConflict {
                    name,
                    classes: labels.into_iter().collect(),
                });
            }
            names.insert(name, labels.into_iter().next().expect("one label"));
        }
        Ok(NameGrouping { names })
    }

    pub fn group(&self, name: &str) -> Result<&str> {
        self.names.get(name).map(String::as_str).ok_or_else(|| Error::Unknown {
            what: "name outside the merged vocabulary",
            id: name.to_string(),
        })
    }

    fn apply(&self, images: &[LabeledImage]) -> Result<Vec<LabeledImage>> {
        images
            .iter()
            .map(|img| {
                let segments = img
                    .segments
                    .iter()
                    .map(|s| {
                        Ok(LabeledSegment {
                            label: self.group(&s.label)?.to_string(),
                            ..s.clone()
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(LabeledImage {
                    segments,
                    ..img.clone()
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub label: String,
    pub pq: Option<f64>,
    pub sq: Option<f64>,
    pub rq: Option<f64>,
    pub iou: Option<f64>,
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mode: MetricMode,
    pub protocol: Protocol,
    pub pq: Option<f64>,
    pub sq: Option<f64>,
    pub rq: Option<f64>,
    pub ap: Option<f64>,
    pub miou: Option<f64>,
    pub per_class: Vec<ClassRow>,
    /// Why a metric is missing, when it is.
    #[serde(default)]
    pub notes: Vec<String>,
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x))
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mode = serde_json::to_value(self.mode).expect("enum");
        let protocol = serde_json::to_value(self.protocol).expect("enum");
        let mut out = format!(
            "mode: {}  protocol: {}\n",
            mode.as_str().unwrap_or_default(),
            protocol.as_str().unwrap_or_default()
        );
        let _ = writeln!(
            out,
            "PQ {}  SQ {}  RQ {}  AP {}  mIoU {}",
            fmt_metric(self.pq),
            fmt_metric(self.sq),
            fmt_metric(self.rq),
            fmt_metric(self.ap),
            fmt_metric(self.miou)
        );
        let width = self.per_class.iter().map(|r| r.label.len()).max().unwrap_or(5).max(5);
        let _ = writeln!(out, "\n{:width$}  {:>6} {:>6} {:>6} {:>6} {:>6}", "class", "PQ", "SQ", "RQ", "IoU", "AP");
        for r in &self.per_class {
            let _ = writeln!(
                out,
                "{:width$}  {:>6} {:>6} {:>6} {:>6} {:>6}",
                r.label,
                fmt_metric(r.pq),
                fmt_metric(r.sq),
                fmt_metric(r.rq),
                fmt_metric(r.iou),
                fmt_metric(r.ap)
            );
        }
        for n in &self.notes {
            let _ = writeln!(out, "note: {n}");
        }
        out
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        crate::store::write_json(path, self)
    }
}

/// Evaluate predictions against ground truth under a mode and protocol.
///
/// `grouping` is required by the merged and grouped protocols, `similarity`
/// by open mode. Predictions may only cover images present in the ground truth.
pub fn evaluate(
    gt: &[LabeledImage],
    pred: &[LabeledImage],
    mode: MetricMode,
    protocol: Protocol,
    grouping: Option<&NameGrouping>,
    similarity: Option<&dyn NameSimilarity>,
) -> Result<EvalReport> {
    let s: &dyn NameSimilarity = match (mode, similarity) {
        (MetricMode::Standard, _) => &Indicator,
        (MetricMode::Open, Some(s)) => s,
        (MetricMode::Open, None) => {
            return Err(Error::Config("open metrics need a name similarity".into()));
        }
    };
    let (gt, pred) = match protocol {
        Protocol::Plain => (gt.to_vec(), pred.to_vec()),
        Protocol::MergedNames | Protocol::GroupedToOriginal => {
            let g = grouping
                .ok_or_else(|| Error::Config("this protocol needs name sets to group by".into()))?;
            let gt = if protocol == Protocol::GroupedToOriginal {
                g.apply(gt)?
            } else {
                gt.to_vec()
            };
            (gt, g.apply(pred)?)
        }
    };

    let mut by_id: BTreeMap<&str, (&LabeledImage, Option<&LabeledImage>)> =
        gt.iter().map(|g| (g.image_id.as_str(), (g, None))).collect();
    if by_id.len() != gt.len() {
        return Err(Error::InvalidData("duplicate ground-truth image ids".into()));
    }
    for p in &pred {
        let slot = by_id.get_mut(p.image_id.as_str()).ok_or_else(|| Error::Unknown {
            what: "predicted image",
            id: p.image_id.clone(),
        })?;
        if slot.1.replace(p).is_some() {
            return Err(Error::InvalidData(format!("duplicate predictions for image {}", p.image_id)));
        }
        if (slot.0.width, slot.0.height) != (p.width, p.height) {
            return Err(Error::Shape(format!("image {} sizes differ", p.image_id)));
        }
    }

    let mut notes = Vec::new();
    let mut pan = SoftCounts::default();
    let mut sem = SoftCounts::default();
    let mut pairs = Vec::with_capacity(by_id.len());
    let mut any_gt = false;
    for (g, p) in by_id.values() {
        let empty = LabeledImage {
            segments: Vec::new(),
            ..(*g).clone()
        };
        let p = p.unwrap_or(&empty);
        any_gt |= !g.segments.is_empty();
        let m = match_segments(&g.segments, &p.segments, mode)?;
        accumulate_panoptic(&mut pan, &g.segments, &p.segments, &m, mode, s);
        accumulate_semantic(&mut sem, &SemanticMap::from_image(g), &SemanticMap::from_image(p), mode, s)?;
        pairs.push((g.segments.clone(), p.segments.clone()));
    }

    let (pq_agg, pq_per) = if any_gt {
        panoptic_quality(&pan)
    } else {
        notes.push("ground truth is empty; PQ is undefined".into());
        (None, BTreeMap::new())
    };
    let (miou, iou_per) = semantic_miou(&sem);
    let (ap, ap_per) = match instance_ap(&pairs, mode, s) {
        Ok(r) => r,
        Err(Error::InvalidData(msg)) => {
            notes.push(format!("AP not computed: {msg}"));
            (None, BTreeMap::new())
        }
        Err(e) => return Err(e),
    };
    if ap.is_none() && !notes.iter().any(|n| n.starts_with("AP")) {
        notes.push("no thing classes in the ground truth; AP is undefined".into());
    }

    let labels: BTreeSet<&String> = pq_per.keys().chain(iou_per.keys()).chain(ap_per.keys()).collect();
    let per_class = labels
        .into_iter()
        .map(|l| {
            let q = pq_per.get(l);
            ClassRow {
                label: l.clone(),
                pq: q.map(|q| q.pq),
                sq: q.map(|q| q.sq),
                rq: q.map(|q| q.rq),
                iou: iou_per.get(l).copied(),
                ap: ap_per.get(l).copied(),
            }
        })
        .collect();
    Ok(EvalReport {
        mode,
        protocol,
        pq: pq_agg.map(|q| q.pq),
        sq: pq_agg.map(|q| q.sq),
        rq: pq_agg.map(|q| q.rq),
        ap,
        miou,
        per_class,
        notes,
    })
}

/// Best and worst `k` classes by IoU; ties in name order.
pub fn per_name_report(report: &EvalReport, k: usize) -> (Vec<(String, f64)>, Vec<(String, f64)>) {
    let mut rows: Vec<(String, f64)> = report
        .per_class
        .iter()
        .filter_map(|r| r.iou.map(|v| (r.label.clone(), v)))
        .collect();
    let k = k.min(rows.len());
    rows.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let top = rows[..k].to_vec();
    rows.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)));
    let bottom = rows[..k].to_vec();
    (top, bottom)
}
