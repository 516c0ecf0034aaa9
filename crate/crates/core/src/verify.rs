//! Human verification of renovated names: task store, decision event log,
//! overlay rendering and export.
//!
//! Every accepted decision is appended to a JSON-lines log before the in-memory
//! state changes, so replaying the log rebuilds the store exactly. The latest
//! event for a segment wins; earlier ones stay in the log and show up as
//! disagreements in the export statistics.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Cursor, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::model::RgbImage;
use crate::store::{write_assignments, Dataset, NameAssignment, Verification};

pub const VERIFIED_FILE: &str = "verified_assignments.jsonl";
pub const STATS_FILE: &str = "verification_stats.json";
pub const MAX_PAGE_SIZE: usize = 500;

/// Brightness factor applied outside the segment in overlays.
const DIM: f64 = 0.3;
const CONTOUR: [u8; 3] = [255, 220, 0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskState {
    Pending,
    Decided,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub chosen: String,
    pub source: Verification,
    pub annotator: String,
    pub timestamp_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replacement_class: Option<u32>,
}

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionEvent {
    pub seq: u64,
    pub segment_id: u64,
    #[serde(flatten)]
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationTask {
    pub segment_id: u64,
    pub image_id: String,
    pub class_id: u32,
    pub crop: String,
    pub overlay: String,
    pub top3: Vec<(String, f64)>,
    pub others: Vec<(String, f64)>,
    pub state: TaskState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<Decision>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub segment_id: u64,
    pub image_id: String,
    pub class_id: u32,
    pub suggestion: String,
    pub state: TaskState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskPage {
    pub page: usize,
    pub page_size: usize,
    pub total: usize,
    pub tasks: Vec<TaskSummary>,
}

/// A reviewer's choice. `source` may be omitted; it is derived from where
/// `chosen` sits in the ranked list. Cross-class choices need
/// `replacement_class`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DecisionRequest {
    pub chosen: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<Verification>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replacement_class: Option<u32>,
    /// Reject with [`Error::AlreadyDecided`] instead of overwriting.
    #[serde(default)]
    pub if_pending: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SourceCounts {
    pub top1: usize,
    pub top3: usize,
    pub others: usize,
    pub cross_class: usize,
}

impl SourceCounts {
    fn add(&mut self, source: Verification) {
        match source {
            Verification::Top1 => self.top1 += 1,
            Verification::Top3 => self.top3 += 1,
            Verification::Others => self.others += 1,
            Verification::CrossClass => self.cross_class += 1,
            Verification::Unverified => {}
        }
    }

    pub fn total(&self) -> usize {
        self.top1 + self.top3 + self.others + self.cross_class
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub total: usize,
    pub decided: usize,
    pub pending: usize,
    pub by_source: SourceCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Disagreement {
    pub segment_id: u64,
    /// `(annotator, chosen)` in log order; the last one is exported.
    pub decisions: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportStats {
    pub total: usize,
    pub decided: usize,
    pub counts: SourceCounts,
    pub top1: f64,
    pub top3: f64,
    pub others: f64,
    pub cross_class: f64,
    pub disagreements: Vec<Disagreement>,
}

impl ExportStats {
    fn new(total: usize, counts: SourceCounts, disagreements: Vec<Disagreement>) -> Self {
        let decided = counts.total();
        let frac = |n: usize| if decided == 0 { 0.0 } else { n as f64 / decided as f64 };
        ExportStats {
            total,
            decided,
            top1: frac(counts.top1),
            top3: frac(counts.top3),
            others: frac(counts.others),
            cross_class: frac(counts.cross_class),
            counts,
            disagreements,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportSummary {
    pub assignments: PathBuf,
    pub stats_file: PathBuf,
    pub stats: ExportStats,
}

struct TaskRecord {
    assignment: NameAssignment,
    image_id: String,
    mask: Mask,
    rgb: Option<PathBuf>,
    decision: Option<Decision>,
    history: Vec<(String, String)>,
}

impl TaskRecord {
    fn view(&self) -> VerificationTask {
        let id = self.assignment.segment_id;
        let split = self.assignment.ranked.len().min(3);
        VerificationTask {
            segment_id: id,
            image_id: self.image_id.clone(),
            class_id: self.assignment.class_id,
            crop: format!("/tasks/{id}/crop.png"),
            overlay: format!("/tasks/{id}/overlay.png"),
            top3: self.assignment.ranked[..split].to_vec(),
            others: self.assignment.ranked[split..].to_vec(),
            state: self.state(),
            decision: self.decision.clone(),
        }
    }

    fn state(&self) -> TaskState {
        if self.decision.is_some() {
            TaskState::Decided
        } else {
            TaskState::Pending
        }
    }

    fn summary(&self) -> TaskSummary {
        TaskSummary {
            segment_id: self.assignment.segment_id,
            image_id: self.image_id.clone(),
            class_id: self.assignment.class_id,
            suggestion: self.assignment.chosen.clone(),
            state: self.state(),
        }
    }
}

struct Inner {
    tasks: BTreeMap<u64, TaskRecord>,
    next_seq: u64,
    log: File,
}

/// Verification state for one dataset, shared by all annotator sessions.
pub struct VerifyStore {
    inner: Mutex<Inner>,
    pools: BTreeMap<u32, Vec<String>>,
    log_path: PathBuf,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn resolve_source(
    record: &TaskRecord,
    request: &DecisionRequest,
    pools: &BTreeMap<u32, Vec<String>>,
) -> Result<Verification> {
    let a = &record.assignment;
    let disallowed = || Error::DisallowedChoice {
        segment_id: a.segment_id,
        name: request.chosen.clone(),
    };
    let cross = request.replacement_class.is_some() || request.source == Some(Verification::CrossClass);
    if cross {
        let class = request.replacement_class.ok_or_else(|| {
            Error::InvalidData(format!("segment {}: cross-class decision without a replacement class", a.segment_id))
        })?;
        if request.source.is_some_and(|s| s != Verification::CrossClass) {
            return Err(Error::InvalidData(format!(
                "segment {}: replacement class given for a {:?} decision",
                a.segment_id,
                request.source.expect("checked")
            )));
        }
        if class == a.class_id {
            return Err(Error::InvalidData(format!(
                "segment {}: replacement class equals the original class",
                a.segment_id
            )));
        }
        let pool = pools.get(&class).ok_or_else(|| Error::Unknown {
            what: "replacement class",
            id: class.to_string(),
        })?;
        return if pool.contains(&request.chosen) {
            Ok(Verification::CrossClass)
        } else {
            Err(disallowed())
        };
    }
    let rank = a.ranked.iter().position(|(n, _)| *n == request.chosen).ok_or_else(disallowed)?;
    let derived = match rank {
        0 => Verification::Top1,
        1 | 2 => Verification::Top3,
        _ => Verification::Others,
    };
    match request.source {
        Some(s) if s != derived => Err(Error::InvalidData(format!(
            "segment {}: {:?} is a {derived:?} choice, not {s:?}",
            a.segment_id, request.chosen
        ))),
        _ => Ok(derived),
    }
}

impl VerifyStore {
    /// Build tasks from renovated assignments and replay an existing log.
    pub fn open(
        dataset: &Dataset,
        assignments: Vec<NameAssignment>,
        pools: BTreeMap<u32, Vec<String>>,
        log_path: &Path,
    ) -> Result<Self> {
        let mut tasks = BTreeMap::new();
        for a in assignments {
            a.validate()?;
            if a.ranked.is_empty() {
                return Err(Error::InvalidData(format!("segment {} has no ranked names", a.segment_id)));
            }
            let seg = dataset.segment(a.segment_id).ok_or_else(|| Error::Unknown {
                what: "segment",
                id: a.segment_id.to_string(),
            })?;
            let record = TaskRecord {
                image_id: seg.image_id.clone(),
                mask: seg.mask.clone(),
                rgb: dataset.rgb_path(&seg.image_id).filter(|p| p.exists()),
                assignment: a,
                decision: None,
                history: Vec::new(),
            };
            if tasks.insert(record.assignment.segment_id, record).is_some() {
                return Err(Error::InvalidData("duplicate assignment in verification input".into()));
            }
        }

        let mut next_seq = 0;
        if log_path.exists() {
            let file = File::open(log_path).map_err(|e| Error::io(log_path, e))?;
            for (n, line) in BufReader::new(file).lines().enumerate() {
                let line = line.map_err(|e| Error::io(log_path, e))?;
                if line.trim().is_empty() {
                    continue;
                }
                let event: DecisionEvent =
                    serde_json::from_str(&line).map_err(|e| Error::parse(log_path, format!("line {}: {e}", n + 1)))?;
                let record = tasks.get_mut(&event.segment_id).ok_or_else(|| Error::Unknown {
                    what: "segment in decision log",
                    id: event.segment_id.to_string(),
                })?;
                let request = DecisionRequest {
                    chosen: event.decision.chosen.clone(),
                    source: Some(event.decision.source),
                    replacement_class: event.decision.replacement_class,
                    if_pending: false,
                };
                resolve_source(record, &request, &pools)?;
                record
                    .history
                    .push((event.decision.annotator.clone(), event.decision.chosen.clone()));
                record.decision = Some(event.decision);
                next_seq = next_seq.max(event.seq + 1);
            }
        } else if let Some(parent) = log_path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(log_path)
            .map_err(|e| Error::io(log_path, e))?;
        Ok(VerifyStore {
            inner: Mutex::new(Inner { tasks, next_seq, log }),
            pools,
            log_path: log_path.to_path_buf(),
        })
    }

    pub fn log_path(&self) -> &Path {
        &self.log_path
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Tasks in segment-id order, optionally filtered by state. Pages start at 1;
    /// a page past the end is empty.
    pub fn list_tasks(&self, state: Option<TaskState>, page: usize, page_size: usize) -> Result<TaskPage> {
        if page == 0 || page_size == 0 || page_size > MAX_PAGE_SIZE {
            return Err(Error::Config(format!(
                "page must be >= 1 and page size within 1..={MAX_PAGE_SIZE}"
            )));
        }
        let inner = self.lock();
        let matching: Vec<&TaskRecord> = inner
            .tasks
            .values()
            .filter(|t| state.is_none_or(|s| t.state() == s))
            .collect();
        let tasks = matching
            .iter()
            .skip((page - 1).saturating_mul(page_size))
            .take(page_size)
            .map(|t| t.summary())
            .collect();
        Ok(TaskPage {
            page,
            page_size,
            total: matching.len(),
            tasks,
        })
    }

    pub fn get_task(&self, segment_id: u64) -> Result<VerificationTask> {
        let inner = self.lock();
        inner.tasks.get(&segment_id).map(TaskRecord::view).ok_or_else(|| Error::Unknown {
            what: "segment",
            id: segment_id.to_string(),
        })
    }

    /// Record a decision. A payload identical to the current decision is a
    /// no-op; anything else is appended to the log and becomes current.
    pub fn post_decision(&self, segment_id: u64, annotator: &str, request: &DecisionRequest) -> Result<VerificationTask> {
        if annotator.trim().is_empty() {
            return Err(Error::InvalidData("annotator id must not be empty".into()));
        }
        let mut inner = self.lock();
        let Inner { tasks, next_seq, log } = &mut *inner;
        let record = tasks.get_mut(&segment_id).ok_or_else(|| Error::Unknown {
            what: "segment",
            id: segment_id.to_string(),
        })?;
        let source = resolve_source(record, request, &self.pools)?;
        if let Some(current) = &record.decision {
            if current.chosen == request.chosen
                && current.source == source
                && current.annotator == annotator
                && current.replacement_class == request.replacement_class
            {
                return Ok(record.view());
            }
            if request.if_pending {
                return Err(Error::AlreadyDecided(segment_id));
            }
        }
        let event = DecisionEvent {
            seq: *next_seq,
            segment_id,
            decision: Decision {
                chosen: request.chosen.clone(),
                source,
                annotator: annotator.to_string(),
                timestamp_ms: now_ms(),
                replacement_class: request.replacement_class,
            },
        };
        let line = serde_json::to_string(&event).map_err(|e| Error::parse(&self.log_path, e))?;
        writeln!(log, "{line}").map_err(|e| Error::io(&self.log_path, e))?;
        log.flush().map_err(|e| Error::io(&self.log_path, e))?;
        *next_seq += 1;
        record.history.push((annotator.to_string(), request.chosen.clone()));
        record.decision = Some(event.decision);
        Ok(record.view())
    }

    pub fn progress(&self) -> Progress {
        let inner = self.lock();
        let mut by_source = SourceCounts::default();
        for d in inner.tasks.values().filter_map(|t| t.decision.as_ref()) {
            by_source.add(d.source);
        }
        let decided = by_source.total();
        Progress {
            total: inner.tasks.len(),
            decided,
            pending: inner.tasks.len() - decided,
            by_source,
        }
    }

    /// Decided tasks as verified assignments, plus source fractions.
    pub fn verified(&self) -> (Vec<NameAssignment>, ExportStats) {
        let inner = self.lock();
        let mut counts = SourceCounts::default();
        let mut out = Vec::new();
        let mut disagreements = Vec::new();
        for t in inner.tasks.values() {
            let Some(d) = &t.decision else { continue };
            counts.add(d.source);
            out.push(NameAssignment {
                chosen: d.chosen.clone(),
                verification: d.source,
                replacement_class: d.replacement_class,
                ..t.assignment.clone()
            });
            let distinct = t.history.iter().any(|(_, c)| *c != d.chosen);
            if distinct {
                disagreements.push(Disagreement {
                    segment_id: t.assignment.segment_id,
                    decisions: t.history.clone(),
                });
            }
        }
        (out, ExportStats::new(inner.tasks.len(), counts, disagreements))
    }

    /// Write verified assignments and statistics into `dir`.
    pub fn export(&self, dir: &Path) -> Result<ExportSummary> {
        let (assignments, stats) = self.verified();
        let path = dir.join(VERIFIED_FILE);
        write_assignments(&assignments, &path)?;
        let stats_file = dir.join(STATS_FILE);
        crate::store::write_json(&stats_file, &stats)?;
        Ok(ExportSummary {
            assignments: path,
            stats_file,
            stats,
        })
    }

    fn image_and_mask(&self, segment_id: u64) -> Result<(RgbImage, Mask)> {
        let (rgb, mask) = {
            let inner = self.lock();
            let t = inner.tasks.get(&segment_id).ok_or_else(|| Error::Unknown {
                what: "segment",
                id: segment_id.to_string(),
            })?;
            (t.rgb.clone(), t.mask.clone())
        };
        let image = match rgb {
            Some(p) => RgbImage::read_png(&p)?,
            None => RgbImage::from_fn(mask.width(), mask.height(), |_, _| [0.5; 3]),
        };
        if (image.width, image.height) != (mask.width(), mask.height()) {
            return Err(Error::Shape(format!("image for segment {segment_id} does not match its mask")));
        }
        Ok((image, mask))
    }

    pub fn overlay_png(&self, segment_id: u64) -> Result<Vec<u8>> {
        let (image, mask) = self.image_and_mask(segment_id)?;
        encode_png(&render_overlay(&image.to_rgb8(), &mask))
    }

    pub fn crop_png(&self, segment_id: u64) -> Result<Vec<u8>> {
        let (image, mask) = self.image_and_mask(segment_id)?;
        encode_png(&render_crop(&image.to_rgb8(), &mask))
    }
}

pub fn dim_pixel(p: [u8; 3]) -> [u8; 3] {
    p.map(|v| (v as f64 * DIM).round() as u8)
}

/// The image dimmed outside `mask`, at full brightness inside, with the
/// mask's inner contour drawn in a highlight colour.
pub fn render_overlay(image: &image::RgbImage, mask: &Mask) -> image::RgbImage {
    let contour = mask.inner_contour();
    let mut out = image.clone();
    for (x, y, p) in out.enumerate_pixels_mut() {
        let (x, y) = (x as usize, y as usize);
        if contour.get(x, y) {
            p.0 = CONTOUR;
        } else if !mask.get(x, y) {
            p.0 = dim_pixel(p.0);
        }
    }
    out
}

/// The mask's bounding box padded by a quarter of its size, from the overlay.
pub fn render_crop(image: &image::RgbImage, mask: &Mask) -> image::RgbImage {
    let overlay = render_overlay(image, mask);
    let Some((x0, y0, x1, y1)) = mask.bbox() else {
        return overlay;
    };
    let pad_x = ((x1 - x0 + 1) / 4).max(2);
    let pad_y = ((y1 - y0 + 1) / 4).max(2);
    let cx0 = x0.saturating_sub(pad_x);
    let cy0 = y0.saturating_sub(pad_y);
    let cx1 = (x1 + pad_x).min(mask.width() - 1);
    let cy1 = (y1 + pad_y).min(mask.height() - 1);
    image::imageops::crop_imm(&overlay, cx0 as u32, cy0 as u32, (cx1 - cx0 + 1) as u32, (cy1 - cy0 + 1) as u32)
        .to_image()
}

fn encode_png(image: &image::RgbImage) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    image
        .write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| Error::InvalidData(format!("png encoding failed: {e}")))?;
    Ok(buf.into_inner())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlay_changes_exactly_the_mask() {
        let img = image::RgbImage::from_fn(8, 6, |x, y| image::Rgb([40 + 20 * x as u8, 60 + 10 * y as u8, 200]));
        let mask = Mask::rect(8, 6, 2, 1, 6, 5);
        let overlay = render_overlay(&img, &mask);
        for (x, y, p) in overlay.enumerate_pixels() {
            let highlighted = p.0 != dim_pixel(img.get_pixel(x, y).0);
            assert_eq!(highlighted, mask.get(x as usize, y as usize), "pixel ({x}, {y})");
        }
    }

    #[test]
    fn crop_covers_the_mask() {
        let img = image::RgbImage::from_pixel(20, 20, image::Rgb([100, 100, 100]));
        let crop = render_crop(&img, &Mask::rect(20, 20, 8, 8, 12, 12));
        assert_eq!(crop.dimensions(), (8, 8));
    }
}
