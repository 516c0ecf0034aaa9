use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{LabeledSegment, MetricMode};
use crate::error::{Error, Result};
use crate::names::NameSimilarity;

/// One matched ground-truth/prediction pair, by index into the inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub gt: usize,
    pub pred: usize,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchSet {
    pub pairs: Vec<MatchedPair>,
    pub unmatched_gt: Vec<usize>,
    pub unmatched_pred: Vec<usize>,
}

pub(crate) fn check_disjoint(segments: &[LabeledSegment], what: &str) -> Result<()> {
    for (i, a) in segments.iter().enumerate() {
        for b in &segments[i + 1..] {
            if a.mask.overlaps(&b.mask) {
                return Err(Error::InvalidData(format!(
                    "{what} segments {} and {} overlap",
                    a.id, b.id
                )));
            }
        }
    }
    Ok(())
}

/// Match segments of one image. Pairs need mask IoU above 0.5; standard mode
/// additionally requires equal labels. Candidates are taken greedily by
/// descending IoU (ties by ground-truth then prediction index).
pub fn match_segments(gt: &[LabeledSegment], pred: &[LabeledSegment], mode: MetricMode) -> Result<MatchSet> {
    check_disjoint(gt, "ground-truth")?;
    let mut candidates = Vec::new();
    for (i, g) in gt.iter().enumerate() {
        for (j, p) in pred.iter().enumerate() {
            if mode == MetricMode::Standard && g.label != p.label {
                continue;
            }
            let iou = g.mask.iou(&p.mask);
            if iou > 0.5 {
                candidates.push(MatchedPair { gt: i, pred: j, iou });
            }
        }
    }
    candidates.sort_by(|a, b| b.iou.total_cmp(&a.iou).then(a.gt.cmp(&b.gt)).then(a.pred.cmp(&b.pred)));
    let mut gt_used = vec![false; gt.len()];
    let mut pred_used = vec![false; pred.len()];
    let mut pairs = Vec::new();
    for c in candidates {
        if !gt_used[c.gt] && !pred_used[c.pred] {
            gt_used[c.gt] = true;
            pred_used[c.pred] = true;
            pairs.push(c);
        }
    }
    pairs.sort_by_key(|p| p.gt);
    Ok(MatchSet {
        pairs,
        unmatched_gt: (0..gt.len()).filter(|&i| !gt_used[i]).collect(),
        unmatched_pred: (0..pred.len()).filter(|&j| !pred_used[j]).collect(),
    })
}

/// Per-class soft counts. `iou_sum` accumulates `S * mask_iou` over pairs.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: f64,
    pub fp: f64,
    #[serde(rename = "fn")]
    pub fn_: f64,
    pub iou_sum: f64,
}

impl Counts {
    pub fn present(&self) -> bool {
        self.tp + self.fp + self.fn_ > 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SoftCounts {
    pub classes: BTreeMap<String, Counts>,
}

impl SoftCounts {
    pub fn entry(&mut self, label: &str) -> &mut Counts {
        self.classes.entry(label.to_string()).or_default()
    }

    /// Associative, commutative merge.
    pub fn merge(&mut self, other: &SoftCounts) {
        for (label, c) in &other.classes {
            let e = self.entry(label);
            e.tp += c.tp;
            e.fp += c.fp;
            e.fn_ += c.fn_;
            e.iou_sum += c.iou_sum;
        }
    }
}

pub(crate) fn similarity(mode: MetricMode, s: &dyn NameSimilarity, a: &str, b: &str) -> f64 {
    match mode {
        MetricMode::Standard => (a == b) as u8 as f64,
        MetricMode::Open => s.similarity(a, b),
    }
}

/// Add one image's matches to `counts`.
pub fn accumulate_panoptic(
    counts: &mut SoftCounts,
    gt: &[LabeledSegment],
    pred: &[LabeledSegment],
    matches: &MatchSet,
    mode: MetricMode,
    s: &dyn NameSimilarity,
) {
    for pair in &matches.pairs {
        let (ci, cj) = (&gt[pair.gt].label, &pred[pair.pred].label);
        let w = similarity(mode, s, ci, cj);
        let e = counts.entry(ci);
        e.tp += w;
        e.fn_ += 1.0 - w;
        e.iou_sum += w * pair.iou;
        counts.entry(cj).fp += 1.0 - w;
    }
    for &i in &matches.unmatched_gt {
        counts.entry(&gt[i].label).fn_ += 1.0;
    }
    for &j in &matches.unmatched_pred {
        counts.entry(&pred[j].label).fp += 1.0;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quality {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
}

impl Quality {
    pub fn of(c: &Counts) -> Quality {
        let denom = c.tp + 0.5 * c.fp + 0.5 * c.fn_;
        let sq = if c.tp > 0.0 { c.iou_sum / c.tp } else { 0.0 };
        let rq = if denom > 0.0 { c.tp / denom } else { 0.0 };
        Quality { pq: sq * rq, sq, rq }
    }
}

/// Per-class quality and its mean over present classes; `None` without any class.
pub fn panoptic_quality(counts: &SoftCounts) -> (Option<Quality>, BTreeMap<String, Quality>) {
    let per_class: BTreeMap<String, Quality> = counts
        .classes
        .iter()
        .filter(|(_, c)| c.present())
        .map(|(l, c)| (l.clone(), Quality::of(c)))
        .collect();
    if per_class.is_empty() {
        return (None, per_class);
    }
    let n = per_class.len() as f64;
    let mean = |f: fn(&Quality) -> f64| per_class.values().map(f).sum::<f64>() / n;
    let agg = Quality {
        pq: mean(|q| q.pq),
        sq: mean(|q| q.sq),
        rq: mean(|q| q.rq),
    };
    (Some(agg), per_class)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::Mask;
    use crate::names::Indicator;

    fn seg(id: u64, label: &str, mask: Mask) -> LabeledSegment {
        LabeledSegment {
            id,
            label: label.into(),
            mask,
            is_thing: true,
            score: None,
        }
    }

    #[test]
    fn identical_sets_match_fully() {
        let gt = vec![
            seg(1, "a", Mask::rect(8, 8, 0, 0, 4, 8)),
            seg(2, "b", Mask::rect(8, 8, 4, 0, 8, 8)),
        ];
        for mode in [MetricMode::Standard, MetricMode::Open] {
            let m = match_segments(&gt, &gt, mode).unwrap();
            assert_eq!(m.pairs.len(), 2);
            assert!(m.pairs.iter().all(|p| p.iou == 1.0));
            let mut counts = SoftCounts::default();
            accumulate_panoptic(&mut counts, &gt, &gt, &m, mode, &Indicator);
            let (q, _) = panoptic_quality(&counts);
            assert_eq!(q.unwrap(), Quality { pq: 1.0, sq: 1.0, rq: 1.0 });
        }
    }

    #[test]
    fn disjoint_masks_do_not_match() {
        let gt = vec![seg(1, "a", Mask::rect(8, 8, 0, 0, 4, 4))];
        let pred = vec![seg(2, "a", Mask::rect(8, 8, 4, 4, 8, 8))];
        let m = match_segments(&gt, &pred, MetricMode::Standard).unwrap();
        assert!(m.pairs.is_empty());
        assert_eq!((m.unmatched_gt.len(), m.unmatched_pred.len()), (1, 1));
    }

    #[test]
    fn overlapping_ground_truth_rejected() {
        let gt = vec![
            seg(1, "a", Mask::rect(8, 8, 0, 0, 4, 4)),
            seg(2, "a", Mask::rect(8, 8, 3, 3, 8, 8)),
        ];
        assert!(match_segments(&gt, &[], MetricMode::Open).is_err());
    }

    #[test]
    fn soft_pair_hand_computed() {
        // One pair with S = 0.8 and IoU 0.9.
        let gt = vec![seg(1, "field", Mask::rect(10, 1, 0, 0, 10, 1))];
        let pred = vec![seg(2, "meadow", Mask::rect(10, 1, 0, 0, 9, 1))];
        let s = |a: &str, b: &str| if a == b { 1.0 } else { 0.8 };
        let m = match_segments(&gt, &pred, MetricMode::Open).unwrap();
        assert!((m.pairs[0].iou - 0.9).abs() < 1e-12);
        let mut counts = SoftCounts::default();
        accumulate_panoptic(&mut counts, &gt, &pred, &m, MetricMode::Open, &s);
        let field = counts.classes["field"];
        let meadow = counts.classes["meadow"];
        assert!((field.tp - 0.8).abs() < 1e-12 && (field.fn_ - 0.2).abs() < 1e-12);
        assert!((meadow.fp - 0.2).abs() < 1e-12 && meadow.tp == 0.0);
        let (_, per) = panoptic_quality(&counts);
        let q = per["field"];
        assert!((q.sq - 0.9).abs() < 1e-12);
        assert!((q.rq - 0.8 / 0.9).abs() < 1e-12);
        assert!((q.pq - 0.9 * 0.8 / 0.9).abs() < 1e-12);
        assert_eq!(per["meadow"].pq, 0.0);
    }

    #[test]
    fn three_segment_fixture_matches_exhaustive_search() {
        // Exhaustive oracle: the assignment maximising the number of IoU > 0.5 pairs.
        let gt = vec![
            seg(1, "a", Mask::rect(8, 8, 0, 0, 8, 3)),
            seg(2, "b", Mask::rect(8, 8, 0, 3, 4, 8)),
            seg(3, "c", Mask::rect(8, 8, 4, 3, 8, 8)),
        ];
        let pred = vec![
            seg(4, "c", Mask::rect(8, 8, 3, 3, 8, 8)),
            seg(5, "a", Mask::rect(8, 8, 0, 0, 8, 4)),
            seg(6, "b", Mask::rect(8, 8, 0, 4, 3, 8)),
        ];
        let m = match_segments(&gt, &pred, MetricMode::Open).unwrap();
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let best = perms
            .iter()
            .max_by_key(|p| (0..3).filter(|&i| gt[i].mask.iou(&pred[p[i]].mask) > 0.5).count())
            .unwrap();
        let expected: Vec<(usize, usize)> = (0..3)
            .filter(|&i| gt[i].mask.iou(&pred[best[i]].mask) > 0.5)
            .map(|i| (i, best[i]))
            .collect();
        let got: Vec<(usize, usize)> = m.pairs.iter().map(|p| (p.gt, p.pred)).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn merge_is_order_free() {
        let mut a = SoftCounts::default();
        a.entry("x").tp = 1.0;
        let mut b = SoftCounts::default();
        b.entry("x").fp = 0.5;
        b.entry("y").fn_ = 2.0;
        let mut ab = a.clone();
        ab.merge(&b);
        let mut ba = b.clone();
        ba.merge(&a);
        assert_eq!(ab, ba);
    }
}
