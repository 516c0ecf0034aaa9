use std::collections::{BTreeMap, BTreeSet};

use super::panoptic::similarity;
use super::{LabeledSegment, MetricMode};
use crate::error::{Error, Result};
use crate::names::NameSimilarity;

pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect()
}

/// 101-point interpolated average precision from cumulative soft counts.
pub fn interpolated_ap(tp: &[f64], fp: &[f64], num_gt: f64) -> f64 {
    let recall: Vec<f64> = tp.iter().map(|t| t / num_gt).collect();
    let mut precision: Vec<f64> = tp
        .iter()
        .zip(fp)
        .map(|(t, f)| if t + f > 0.0 { t / (t + f) } else { 0.0 })
        .collect();
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let total: f64 = (0..=100)
        .map(|k| {
            let r = k as f64 / 100.0;
            recall
                .iter()
                .position(|&rc| rc >= r)
                .map_or(0.0, |i| precision[i])
        })
        .sum();
    total / 101.0
}

/// Mask AP over IoU thresholds 0.50:0.05:0.95, per ground-truth thing class.
///
/// For class `c`, every thing detection with `w = S(c, label) > 0` is ranked by
/// score. A detection matched to an unmatched ground truth of `c` (best IoU at
/// or above the threshold) adds `w` to TP and `1 - w` to FP; an unmatched one
/// adds `w` to FP. `images` pairs ground truth with scored predictions.
pub fn instance_ap(
    images: &[(Vec<LabeledSegment>, Vec<LabeledSegment>)],
    mode: MetricMode,
    s: &dyn NameSimilarity,
) -> Result<(Option<f64>, BTreeMap<String, f64>)> {
    let classes: BTreeSet<&str> = images
        .iter()
        .flat_map(|(gt, _)| gt.iter().filter(|g| g.is_thing).map(|g| g.label.as_str()))
        .collect();
    for (_, pred) in images {
        if let Some(p) = pred.iter().find(|p| p.is_thing && p.score.is_none_or(|s| !s.is_finite())) {
            return Err(Error::InvalidData(format!("detection {} has no usable score", p.id)));
        }
    }
    let mut per_class = BTreeMap::new();
    for class in classes {
        let num_gt = images
            .iter()
            .flat_map(|(gt, _)| gt.iter())
            .filter(|g| g.is_thing && g.label == class)
            .count() as f64;
        let mut dets: Vec<(usize, usize, f64, f64)> = Vec::new();
        for (img, (_, pred)) in images.iter().enumerate() {
            for (j, p) in pred.iter().enumerate().filter(|(_, p)| p.is_thing) {
                let w = similarity(mode, s, class, &p.label);
                if w > 0.0 {
                    dets.push((img, j, p.score.expect("checked"), w));
                }
            }
        }
        dets.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));

        let mut sum = 0.0;
        let thresholds = iou_thresholds();
        for &t in &thresholds {
            let mut used: BTreeSet<(usize, usize)> = BTreeSet::new();
            let (mut tp, mut fp) = (0.0, 0.0);
            let mut tps = Vec::with_capacity(dets.len());
            let mut fps = Vec::with_capacity(dets.len());
            for &(img, j, _, w) in &dets {
                let (gt, pred) = &images[img];
                let mut best: Option<(usize, f64)> = None;
                for (i, g) in gt.iter().enumerate() {
                    if !g.is_thing || g.label != class || used.contains(&(img, i)) {
                        continue;
                    }
                    let iou = g.mask.iou(&pred[j].mask);
                    if iou >= t && best.is_none_or(|(_, b)| iou > b) {
                        best = Some((i, iou));
                    }
                }
                match best {
                    Some((i, _)) => {
                        used.insert((img, i));
                        tp += w;
                        fp += 1.0 - w;
                    }
                    None => fp += w,
                }
                tps.push(tp);
                fps.push(fp);
            }
            sum += interpolated_ap(&tps, &fps, num_gt);
        }
        per_class.insert(class.to_string(), sum / thresholds.len() as f64);
    }
    if per_class.is_empty() {
        return Ok((None, per_class));
    }
    let mean = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok((Some(mean), per_class))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::Mask;
    use crate::names::Indicator;

    fn det(id: u64, label: &str, mask: Mask, score: Option<f64>) -> LabeledSegment {
        LabeledSegment {
            id,
            label: label.into(),
            mask,
            is_thing: true,
            score,
        }
    }

    #[test]
    fn perfect_detections() {
        let gt = vec![
            det(1, "cup", Mask::rect(6, 6, 0, 0, 3, 3), None),
            det(2, "dog", Mask::rect(6, 6, 3, 3, 6, 6), None),
        ];
        let pred: Vec<_> = gt.iter().map(|g| LabeledSegment { score: Some(0.9), ..g.clone() }).collect();
        let (ap, _) = instance_ap(&[(gt, pred)], MetricMode::Standard, &Indicator).unwrap();
        assert_eq!(ap, Some(1.0));
    }

    #[test]
    fn single_soft_detection() {
        let m = Mask::rect(4, 4, 0, 0, 2, 2);
        let gt = vec![det(1, "cup", m.clone(), None)];
        let pred = vec![det(2, "mug", m, Some(0.5))];
        let s = |a: &str, b: &str| if a == b { 1.0 } else { 0.6 };
        let (ap, per) = instance_ap(&[(gt, pred)], MetricMode::Open, &s).unwrap();
        // Precision 0.6 up to recall 0.6 (61 of 101 points) at every threshold.
        let expected = 61.0 * 0.6 / 101.0;
        assert!((per["cup"] - expected).abs() < 1e-12);
        assert_eq!(ap, Some(per["cup"]));
    }

    #[test]
    fn missing_score_is_an_error() {
        let m = Mask::rect(2, 2, 0, 0, 1, 1);
        let r = instance_ap(&[(vec![det(1, "a", m.clone(), None)], vec![det(2, "a", m, None)])], MetricMode::Standard, &Indicator);
        assert!(r.is_err());
    }

    #[test]
    fn no_things_is_undefined() {
        let (ap, per) = instance_ap(&[], MetricMode::Standard, &Indicator).unwrap();
        assert!(ap.is_none() && per.is_empty());
    }
}
