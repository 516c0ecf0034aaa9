//! Ranking candidate names per segment and analysing the renamed dataset.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{PixelValues, Renamer, RgbImage};
use crate::store::{
    ClassTable, CrossClassSuggestion, Dataset, NameAssignment, SegmentRecord, Verification,
};

/// Scores names for a segment; higher is better.
pub trait NameScorer {
    fn score(&self, segment: &SegmentRecord, names: &[String]) -> Result<Vec<f64>>;

    /// Most confident original classes for the segment, best first. Used for
    /// cross-class suggestions; scorers without a class head return nothing.
    fn top_classes(&self, _segment: &SegmentRecord, _names: &[String], _k: usize) -> Result<Vec<u32>> {
        Ok(Vec::new())
    }
}

/// Sort names by descending score; equal scores keep pool order.
pub fn rank_by_scores(names: &[String], scores: &[f64]) -> Vec<(String, f64)> {
    let mut ranked: Vec<(String, f64)> = names.iter().cloned().zip(scores.iter().copied()).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    ranked
}

pub fn rank_candidates(
    scorer: &dyn NameScorer,
    segment: &SegmentRecord,
    pool: &[String],
) -> Result<Vec<(String, f64)>> {
    if pool.is_empty() {
        return Err(Error::InvalidData(format!(
            "empty candidate pool for class {}",
            segment.original_class_id
        )));
    }
    let scores = scorer.score(segment, pool)?;
    if scores.len() != pool.len() {
        return Err(Error::Shape(format!("{} scores for {} names", scores.len(), pool.len())));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("score {bad} for segment {}", segment.segment_id)));
    }
    Ok(rank_by_scores(pool, &scores))
}

/// Scores names with a trained model: IoU between each name's predicted mask
/// and the segment. Pixel features are cached for the most recent image.
pub struct ModelScorer<'a> {
    renamer: &'a Renamer,
    dataset: &'a Dataset,
    cache: Mutex<Option<(String, PixelValues)>>,
}

impl<'a> ModelScorer<'a> {
    pub fn new(renamer: &'a Renamer, dataset: &'a Dataset) -> Self {
        ModelScorer {
            renamer,
            dataset,
            cache: Mutex::new(None),
        }
    }

    fn pixels(&self, image_id: &str) -> Result<PixelValues> {
        let mut cache = self.cache.lock().expect("pixel cache poisoned");
        if let Some((id, values)) = cache.as_ref() {
            if id == image_id {
                return Ok(values.clone());
            }
        }
        let path = self.dataset.rgb_path(image_id).ok_or_else(|| {
            Error::InvalidData(format!("image {image_id} has no RGB file to score"))
        })?;
        let values = self.renamer.pixel_values(&RgbImage::read_png(&path)?)?;
        *cache = Some((image_id.to_string(), values.clone()));
        Ok(values)
    }
}

impl NameScorer for ModelScorer<'_> {
    fn score(&self, segment: &SegmentRecord, names: &[String]) -> Result<Vec<f64>> {
        let pixels = self.pixels(&segment.image_id)?;
        Ok(self.renamer.score_names(&pixels, &segment.mask, names)?.0)
    }

    fn top_classes(&self, segment: &SegmentRecord, names: &[String], k: usize) -> Result<Vec<u32>> {
        let pixels = self.pixels(&segment.image_id)?;
        let (scores, class_probs) = self.renamer.score_names(&pixels, &segment.mask, names)?;
        let best = rank_by_scores(names, &scores)
            .first()
            .and_then(|(n, _)| names.iter().position(|m| m == n))
            .unwrap_or(0);
        let row = class_probs.row(best);
        let mut classes: Vec<(u32, f64)> = self
            .renamer
            .class_ids
            .iter()
            .enumerate()
            .map(|(i, c)| (*c, row[i]))
            .collect();
        classes.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(classes.into_iter().take(k).map(|(c, _)| c).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenameOptions {
    pub top_k: usize,
    /// Also rank the pools of the most confident other classes.
    pub cross_class: bool,
}

impl Default for RenameOptions {
    fn default() -> Self {
        RenameOptions {
            top_k: 3,
            cross_class: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenameFailure {
    pub segment_id: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RenameOutcome {
    pub assignments: Vec<NameAssignment>,
    pub failures: Vec<RenameFailure>,
}

fn rename_one(
    scorer: &dyn NameScorer,
    segment: &SegmentRecord,
    pools: &BTreeMap<u32, Vec<String>>,
    options: &RenameOptions,
) -> Result<NameAssignment> {
    let class = segment.original_class_id;
    let pool = pools.get(&class).ok_or_else(|| Error::Unknown {
        what: "candidate pool for class",
        id: class.to_string(),
    })?;
    let mut ranked = rank_candidates(scorer, segment, pool)?;
    let chosen = ranked[0].0.clone();
    let best_score = ranked[0].1;
    let mut suggestion = None;
    if options.cross_class {
        for other in scorer.top_classes(segment, pool, 3)? {
            if other == class {
                continue;
            }
            let Some(other_pool) = pools.get(&other) else { continue };
            let top = rank_candidates(scorer, segment, other_pool)?.swap_remove(0);
            let better = suggestion.as_ref().is_none_or(|s: &CrossClassSuggestion| top.1 > s.score);
            if top.1 > best_score && better {
                suggestion = Some(CrossClassSuggestion {
                    class_id: other,
                    name: top.0,
                    score: top.1,
                });
            }
        }
    }
    ranked.truncate(options.top_k.max(1));
    Ok(NameAssignment {
        segment_id: segment.segment_id,
        class_id: class,
        ranked,
        chosen,
        verification: Verification::Unverified,
        replacement_class: None,
        cross_class_suggestion: suggestion,
    })
}

/// Rename every segment; per-segment failures are recorded and the run continues.
pub fn rename_segments(
    segments: &[SegmentRecord],
    pools: &BTreeMap<u32, Vec<String>>,
    scorer: &dyn NameScorer,
    options: &RenameOptions,
) -> RenameOutcome {
    let mut outcome = RenameOutcome::default();
    for segment in segments {
        match rename_one(scorer, segment, pools, options) {
            Ok(a) => outcome.assignments.push(a),
            Err(e) => {
                log::warn!("segment {}: {e}", segment.segment_id);
                outcome.failures.push(RenameFailure {
                    segment_id: segment.segment_id,
                    error: e.to_string(),
                });
            }
        }
    }
    outcome
}

/// Rename a dataset with a trained model. Every class with segments needs a pool.
pub fn rename_dataset(
    dataset: &Dataset,
    pools: &BTreeMap<u32, Vec<String>>,
    renamer: &Renamer,
    options: &RenameOptions,
) -> Result<RenameOutcome> {
    if options.top_k == 0 {
        return Err(Error::Config("top_k must be at least 1".into()));
    }
    let missing: BTreeSet<u32> = dataset
        .segments
        .iter()
        .map(|s| s.original_class_id)
        .filter(|c| !pools.contains_key(c))
        .collect();
    if let Some(c) = missing.first() {
        return Err(Error::Unknown {
            what: "candidate pool for class",
            id: c.to_string(),
        });
    }
    let scorer = ModelScorer::new(renamer, dataset);
    let ordered: Vec<SegmentRecord> = dataset
        .segments_by_image()
        .into_iter()
        .flat_map(|(_, segs)| segs.into_iter().cloned())
        .collect();
    Ok(rename_segments(&ordered, pools, &scorer, options))
}

/// The name a segment ends up with and the original class it now belongs to.
fn final_name(a: &NameAssignment) -> (u32, &str) {
    (a.replacement_class.unwrap_or(a.class_id), a.chosen.as_str())
}

/// Counts of final names among segments of `class_id`, most frequent first,
/// ties by name.
pub fn name_distribution(
    assignments: &[NameAssignment],
    classes: &ClassTable,
    class_id: u32,
) -> Result<Vec<(String, usize)>> {
    if !classes.contains(class_id) {
        return Err(Error::Unknown {
            what: "class",
            id: class_id.to_string(),
        });
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for a in assignments {
        let (class, name) = final_name(a);
        if class == class_id {
            *counts.entry(name).or_default() += 1;
        }
    }
    let mut rows: Vec<(String, usize)> = counts.into_iter().map(|(n, c)| (n.to_string(), c)).collect();
    rows.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(rows)
}

pub fn write_distribution_csv(rows: &[(String, usize)], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    writeln!(out, "name,count").map_err(|e| Error::io(path, e))?;
    for (name, count) in rows {
        let quoted = if name.contains([',', '"']) {
            format!("\"{}\"", name.replace('"', "\"\""))
        } else {
            name.clone()
        };
        writeln!(out, "{quoted},{count}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Class table over the unique renovated names.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct UpgradedClasses {
    /// New class per unique name; ids follow the sorted name order starting at 0.
    pub table: ClassTable,
    /// Original class id to the new names its segments received.
    pub grouping: BTreeMap<u32, BTreeSet<String>>,
}

impl UpgradedClasses {
    pub fn id_of(&self, name: &str) -> Option<u32> {
        self.table
            .classes
            .iter()
            .find(|(_, e)| e.original_names.first().map(String::as_str) == Some(name))
            .map(|(id, _)| *id)
    }
}

/// Build the upgraded vocabulary. `original` supplies the thing/stuff flag;
/// a name is a thing if any class it came from is.
pub fn build_upgraded_class_table(assignments: &[NameAssignment], original: &ClassTable) -> UpgradedClasses {
    let mut grouping: BTreeMap<u32, BTreeSet<String>> = BTreeMap::new();
    let mut thing: BTreeMap<&str, bool> = BTreeMap::new();
    for a in assignments {
        let (class, name) = final_name(a);
        grouping.entry(class).or_default().insert(name.to_string());
        let is_thing = original.get(class).is_some_and(|e| e.is_thing);
        *thing.entry(name).or_default() |= is_thing;
    }
    let mut table = ClassTable::default();
    for (id, (name, is_thing)) in thing.into_iter().enumerate() {
        table.insert(id as u32, &[name], is_thing);
    }
    UpgradedClasses { table, grouping }
}

/// Segments of `dataset` labelled with the upgraded class of their final name.
pub fn relabel_segments(
    dataset: &Dataset,
    assignments: &[NameAssignment],
    upgraded: &UpgradedClasses,
) -> Result<Vec<SegmentRecord>> {
    let ids: BTreeMap<&str, u32> = upgraded
        .table
        .classes
        .iter()
        .filter_map(|(id, e)| e.original_names.first().map(|n| (n.as_str(), *id)))
        .collect();
    let by_segment: BTreeMap<u64, &NameAssignment> = assignments.iter().map(|a| (a.segment_id, a)).collect();
    dataset
        .segments
        .iter()
        .map(|s| {
            let a = by_segment.get(&s.segment_id).ok_or_else(|| Error::Unknown {
                what: "assignment for segment",
                id: s.segment_id.to_string(),
            })?;
            let id = ids.get(a.chosen.as_str()).ok_or_else(|| Error::Unknown {
                what: "upgraded class for name",
                id: a.chosen.clone(),
            })?;
            Ok(SegmentRecord {
                original_class_id: *id,
                is_thing: upgraded.table.get(*id).is_some_and(|e| e.is_thing),
                ..s.clone()
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::Mask;

    struct Fixed(BTreeMap<String, f64>);

    impl NameScorer for Fixed {
        fn score(&self, _: &SegmentRecord, names: &[String]) -> Result<Vec<f64>> {
            Ok(names.iter().map(|n| self.0.get(n).copied().unwrap_or(0.0)).collect())
        }

        fn top_classes(&self, _: &SegmentRecord, _: &[String], _: usize) -> Result<Vec<u32>> {
            Ok(vec![1, 2])
        }
    }

    fn segment(id: u64, class: u32) -> SegmentRecord {
        let mask = Mask::rect(4, 4, 0, 0, 2, 2);
        SegmentRecord {
            segment_id: id,
            image_id: "a".into(),
            original_class_id: class,
            area: mask.area(),
            mask,
            is_thing: false,
            score: None,
        }
    }

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn pools() -> BTreeMap<u32, Vec<String>> {
        BTreeMap::from([
            (1, names(&["grass field", "sports field", "rural field"])),
            (2, names(&["lawn", "meadow"])),
        ])
    }

    fn scorer() -> Fixed {
        Fixed(BTreeMap::from([
            ("grass field".to_string(), 0.4),
            ("sports field".to_string(), 0.9),
            ("rural field".to_string(), 0.4),
            ("lawn".to_string(), 0.95),
            ("meadow".to_string(), 0.1),
        ]))
    }

    #[test]
    fn ranking_is_stable() {
        let ranked = rank_candidates(&scorer(), &segment(1, 1), &pools()[&1]).unwrap();
        let order: Vec<&str> = ranked.iter().map(|r| r.0.as_str()).collect();
        assert_eq!(order, ["sports field", "grass field", "rural field"]);
    }

    #[test]
    fn monotone_transform_keeps_choice() {
        let pool = pools()[&1].clone();
        let base = scorer();
        let squashed = Fixed(base.0.iter().map(|(k, v)| (k.clone(), (3.0 * v).tanh())).collect());
        let a = rank_candidates(&base, &segment(1, 1), &pool).unwrap();
        let b = rank_candidates(&squashed, &segment(1, 1), &pool).unwrap();
        let names_a: Vec<_> = a.iter().map(|r| &r.0).collect();
        let names_b: Vec<_> = b.iter().map(|r| &r.0).collect();
        assert_eq!(names_a, names_b);
    }

    #[test]
    fn five_segments_with_failure_recorded() {
        let segs: Vec<_> = (1..=5).map(|i| segment(i, if i == 5 { 7 } else { 1 + (i as u32 % 2) })).collect();
        let out = rename_segments(&segs, &pools(), &scorer(), &RenameOptions { top_k: 1, cross_class: false });
        assert_eq!(out.assignments.len(), 4);
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.failures[0].segment_id, 5);
        for a in &out.assignments {
            assert_eq!(a.ranked.len(), 1);
            assert!(pools()[&a.class_id].contains(&a.chosen));
            a.validate().unwrap();
        }
    }

    #[test]
    fn cross_class_suggestion() {
        let out = rename_segments(
            &[segment(1, 1)],
            &pools(),
            &scorer(),
            &RenameOptions { top_k: 3, cross_class: true },
        );
        let a = &out.assignments[0];
        assert_eq!(a.chosen, "sports field");
        let s = a.cross_class_suggestion.as_ref().unwrap();
        assert_eq!((s.class_id, s.name.as_str()), (2, "lawn"));
    }

    fn assignment(id: u64, class: u32, name: &str) -> NameAssignment {
        NameAssignment {
            segment_id: id,
            class_id: class,
            ranked: vec![(name.to_string(), 1.0)],
            chosen: name.to_string(),
            verification: Verification::Unverified,
            replacement_class: None,
            cross_class_suggestion: None,
        }
    }

    fn classes() -> ClassTable {
        let mut t = ClassTable::default();
        t.insert(1, &["field"], false);
        t.insert(2, &["grass"], false);
        t.insert(3, &["person"], true);
        t.insert(4, &["empty"], false);
        t
    }

    #[test]
    fn distribution_counts() {
        let mut items = Vec::new();
        let mut id = 0;
        for (name, n) in [("a", 5), ("c", 2), ("b", 3)] {
            for _ in 0..n {
                id += 1;
                items.push(assignment(id, 1, name));
            }
        }
        let rows = name_distribution(&items, &classes(), 1).unwrap();
        assert_eq!(rows, vec![("a".into(), 5), ("b".into(), 3), ("c".into(), 2)]);
        assert_eq!(rows.iter().map(|r| r.1).sum::<usize>(), 10);
        assert!(name_distribution(&items, &classes(), 4).unwrap().is_empty());
        assert!(name_distribution(&items, &classes(), 99).is_err());
    }

    #[test]
    fn upgraded_table() {
        let items = vec![
            assignment(1, 1, "lawn"),
            assignment(2, 2, "lawn"),
            assignment(3, 3, "child"),
            assignment(4, 1, "sports field"),
        ];
        let up = build_upgraded_class_table(&items, &classes());
        assert_eq!(up.table.len(), 3);
        assert_eq!(up.grouping[&1], BTreeSet::from(["lawn".to_string(), "sports field".to_string()]));
        assert_eq!(up.grouping[&2], BTreeSet::from(["lawn".to_string()]));
        assert!(up.table.get(up.id_of("child").unwrap()).unwrap().is_thing);

        let mut reversed = items.clone();
        reversed.reverse();
        assert_eq!(build_upgraded_class_table(&reversed, &classes()), up);
        assert!(build_upgraded_class_table(&[], &classes()).table.is_empty());
    }
}
