use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verification {
    Unverified,
    Top1,
    Top3,
    Others,
    CrossClass,
}

/// A name suggestion from another original class (optional cross-class mode).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossClassSuggestion {
    pub class_id: u32,
    pub name: String,
    pub score: f64,
}

/// Renaming outcome for one segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NameAssignment {
    pub segment_id: u64,
    pub class_id: u32,
    /// Candidates with their IoU scores, best first.
    pub ranked: Vec<(String, f64)>,
    pub chosen: String,
    pub verification: Verification,
    /// Class whose pool `chosen` comes from when `verification == CrossClass`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replacement_class: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cross_class_suggestion: Option<CrossClassSuggestion>,
}

impl NameAssignment {
    pub fn validate(&self) -> Result<()> {
        let id = self.segment_id;
        for (name, score) in &self.ranked {
            if !(0.0..=1.0).contains(score) {
                return Err(Error::Invariant(format!(
                    "segment {id}: score {score} for {name:?} outside [0, 1]"
                )));
            }
        }
        if self.ranked.windows(2).any(|w| w[0].1 < w[1].1) {
            return Err(Error::Invariant(format!(
                "segment {id}: ranked list is not sorted by descending score"
            )));
        }
        if self.chosen.trim().is_empty() {
            return Err(Error::Invariant(format!("segment {id}: empty chosen name")));
        }
        if self.verification == Verification::Unverified
            && self.ranked.first().map(|r| r.0.as_str()) != Some(self.chosen.as_str())
        {
            return Err(Error::Invariant(format!(
                "segment {id}: unverified assignment must choose the top-ranked name"
            )));
        }
        if (self.verification == Verification::CrossClass) != self.replacement_class.is_some() {
            return Err(Error::Invariant(format!(
                "segment {id}: replacement class must be set exactly for cross-class decisions"
            )));
        }
        Ok(())
    }

    /// Check `chosen` against the candidate pools (`class_id -> names`).
    pub fn validate_against_pools(&self, pools: &BTreeMap<u32, Vec<String>>) -> Result<()> {
        let class = self.replacement_class.unwrap_or(self.class_id);
        let pool = pools.get(&class).ok_or_else(|| Error::Unknown {
            what: "candidate pool for class",
            id: class.to_string(),
        })?;
        if !pool.contains(&self.chosen) {
            return Err(Error::Invariant(format!(
                "segment {}: chosen name {:?} not in the pool of class {class}",
                self.segment_id, self.chosen
            )));
        }
        Ok(())
    }
}

/// Write assignments as JSON lines sorted by segment id. Invalid records are
/// rejected before anything is written.
pub fn write_assignments(assignments: &[NameAssignment], path: &Path) -> Result<()> {
    let mut seen = BTreeSet::new();
    for a in assignments {
        a.validate()?;
        if !seen.insert(a.segment_id) {
            return Err(Error::Invariant(format!(
                "duplicate assignment for segment {}",
                a.segment_id
            )));
        }
    }
    let mut sorted: Vec<&NameAssignment> = assignments.iter().collect();
    sorted.sort_by_key(|a| a.segment_id);

    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for a in sorted {
        let line = serde_json::to_string(a).map_err(|e| Error::parse(path, e))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_assignments(path: &Path) -> Result<Vec<NameAssignment>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let a: NameAssignment = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path, format!("line {}: {e}", n + 1)))?;
        a.validate()?;
        out.push(a);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: u64) -> NameAssignment {
        NameAssignment {
            segment_id: id,
            class_id: 3,
            ranked: vec![
                ("rural field".into(), 0.91),
                ("crop field".into(), 0.4),
                ("sports field".into(), 0.1 + (id % 100) as f64 * 1e-3),
            ],
            chosen: "rural field".into(),
            verification: Verification::Unverified,
            replacement_class: None,
            cross_class_suggestion: None,
        }
    }

    #[test]
    fn round_trip_sorted_by_segment() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.jsonl");
        let items = vec![sample(9), sample(2), sample(5)];
        write_assignments(&items, &path).unwrap();
        let back = read_assignments(&path).unwrap();
        let mut expected = items.clone();
        expected.sort_by_key(|a| a.segment_id);
        assert_eq!(back, expected);
    }

    #[test]
    fn unsorted_ranked_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.jsonl");
        let mut bad = sample(1);
        bad.ranked.swap(0, 2);
        bad.chosen = bad.ranked[0].0.clone();
        assert!(matches!(
            write_assignments(&[bad], &path),
            Err(Error::Invariant(_))
        ));
        assert!(!path.exists());
    }

    #[test]
    fn ten_thousand_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.jsonl");
        let items: Vec<_> = (0..10_000).map(sample).collect();
        write_assignments(&items, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 10_000);
        assert_eq!(read_assignments(&path).unwrap().len(), 10_000);
    }

    #[test]
    fn pool_membership() {
        let pools = BTreeMap::from([(3, vec!["rural field".to_string()])]);
        sample(1).validate_against_pools(&pools).unwrap();
        let mut a = sample(1);
        a.class_id = 4;
        assert!(a.validate_against_pools(&pools).is_err());
    }
}
