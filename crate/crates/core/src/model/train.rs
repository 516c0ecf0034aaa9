//! Training loop, query batches and the loss curve.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{segment_loss, LossWeights, SegmentTarget};
use super::network::{AttentionBias, BiasPolicy};
use super::params::{AdamW, AdamWConfig};
use super::tape::{Mat, Tape};
use super::{RgbImage, Renamer};
use crate::candidates::CandidateStore;
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::store::Dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub images_per_step: usize,
    pub optimizer: AdamWConfig,
    /// Fractions of `steps` at which the learning rate is multiplied by `gamma`.
    pub milestones: Vec<f64>,
    pub gamma: f64,
    pub p_replace: f64,
    /// Fraction of steps trained with ground-truth biases only.
    pub replace_warmup: f64,
    pub weights: LossWeights,
    /// Supervise every decoder level, not just the last.
    pub deep_supervision: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            images_per_step: 2,
            optimizer: AdamWConfig::default(),
            milestones: vec![0.89, 0.96],
            gamma: 0.1,
            p_replace: 0.3,
            replace_warmup: 0.1,
            weights: LossWeights::default(),
            deep_supervision: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.images_per_step == 0 {
            return Err(Error::Config("steps and images_per_step must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.p_replace) || !(0.0..=1.0).contains(&self.replace_warmup) {
            return Err(Error::Config("p_replace and replace_warmup must lie in [0, 1]".into()));
        }
        if self.optimizer.lr <= 0.0 || !self.optimizer.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be positive", self.optimizer.lr)));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|m| step >= (*m * self.steps as f64).floor() as usize)
            .count();
        self.optimizer.lr * self.gamma.powi(passed as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSegment {
    pub segment_id: u64,
    pub class_index: usize,
    pub mask: Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingImage {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    /// Frozen vision-encoder features, `P x C`.
    pub backbone: Mat,
    pub segments: Vec<TrainingSegment>,
}

/// Images with their segments and each class's candidate names (by class-head index).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub images: Vec<TrainingImage>,
    pub pools: Vec<Vec<String>>,
}

impl TrainingSet {
    pub fn from_dataset(dataset: &Dataset, candidates: &CandidateStore, renamer: &Renamer) -> Result<Self> {
        let pools = renamer
            .class_ids
            .iter()
            .map(|id| {
                candidates
                    .pool(*id)
                    .map(|p| p.candidates)
                    .ok_or_else(|| Error::Unknown {
                        what: "candidate pool for class",
                        id: id.to_string(),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut images = Vec::new();
        for (entry, segments) in dataset.segments_by_image() {
            if segments.is_empty() {
                continue;
            }
            let path = dataset.rgb_path(&entry.image_id).ok_or_else(|| {
                Error::InvalidData(format!("image {} has no RGB file to train on", entry.image_id))
            })?;
            let rgb = RgbImage::read_png(&path)?;
            if (rgb.width, rgb.height) != (entry.width, entry.height) {
                return Err(Error::InvalidData(format!(
                    "{}: {}x{} photo for a {}x{} label map",
                    path.display(),
                    rgb.width,
                    rgb.height,
                    entry.width,
                    entry.height
                )));
            }
            let segments = segments
                .into_iter()
                .map(|s| {
                    let class_index = renamer.class_index(s.original_class_id).ok_or_else(|| Error::Unknown {
                        what: "class in model head",
                        id: s.original_class_id.to_string(),
                    })?;
                    Ok(TrainingSegment {
                        segment_id: s.segment_id,
                        class_index,
                        mask: s.mask.clone(),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            images.push(TrainingImage {
                image_id: entry.image_id.clone(),
                width: entry.width,
                height: entry.height,
                backbone: renamer.vision.encode_image(&rgb),
                segments,
            });
        }
        if images.is_empty() {
            return Err(Error::InvalidData("no segments to train on".into()));
        }
        Ok(TrainingSet { images, pools })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryMeta {
    pub segment_id: u64,
    pub name: String,
    pub is_negative: bool,
}

/// All queries for one image: each segment's pool plus one negative name.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryBatch {
    pub meta: Vec<QueryMeta>,
    /// Segment position of each query; self-attention stays within a group.
    pub groups: Vec<usize>,
    pub targets: Vec<SegmentTarget>,
}

impl QueryBatch {
    pub fn names(&self) -> Vec<String> {
        self.meta.iter().map(|m| m.name.clone()).collect()
    }

    pub fn bias(&self) -> AttentionBias {
        let mut per_query = vec![None; self.meta.len()];
        for t in &self.targets {
            for &r in &t.rows {
                per_query[r] = Some(t.mask.clone());
            }
        }
        AttentionBias {
            per_query: per_query.into_iter().map(|m| m.expect("every query has a segment")).collect(),
        }
    }
}

/// Build the query batch for an image, drawing a fresh negative per segment.
/// The negative comes from another class and never names a positive.
pub fn build_query_batch(image: &TrainingImage, pools: &[Vec<String>], rng: &mut impl Rng) -> Result<QueryBatch> {
    let mut meta = Vec::new();
    let mut groups = Vec::new();
    let mut targets = Vec::new();
    for (g, seg) in image.segments.iter().enumerate() {
        let pool = &pools[seg.class_index];
        if pool.is_empty() {
            return Err(Error::InvalidData(format!("class index {} has no candidates", seg.class_index)));
        }
        let own: BTreeSet<&String> = pool.iter().collect();
        let others: Vec<&String> = pools
            .iter()
            .enumerate()
            .filter(|(c, _)| *c != seg.class_index)
            .flat_map(|(_, p)| p.iter())
            .filter(|n| !own.contains(n))
            .collect();
        if others.is_empty() {
            return Err(Error::Config(
                "negative names need candidates from at least two classes".into(),
            ));
        }
        let start = meta.len();
        for name in pool {
            meta.push(QueryMeta {
                segment_id: seg.segment_id,
                name: name.clone(),
                is_negative: false,
            });
        }
        let negative = others[rng.random_range(0..others.len())];
        meta.push(QueryMeta {
            segment_id: seg.segment_id,
            name: negative.clone(),
            is_negative: true,
        });
        groups.extend(std::iter::repeat_n(g, pool.len() + 1));
        targets.push(SegmentTarget {
            mask: seg.mask.clone(),
            class_index: seg.class_index,
            rows: (start..meta.len()).collect(),
            negative: meta.len() - 1,
        });
    }
    Ok(QueryBatch { meta, groups, targets })
}

/// Loss of one image under the current parameters, averaged over its segments
/// and summed over supervised levels. Returns the loss and its gradients.
pub fn image_loss(
    renamer: &Renamer,
    image: &TrainingImage,
    batch: &QueryBatch,
    config: &TrainConfig,
    replace: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Vec<Mat>, usize)> {
    let model = &renamer.model;
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let backbone = tape.leaf(image.backbone.clone());
    let feats = model.pixel_decoder(&mut tape, &bound, backbone, image.width, image.height)?;
    let queries = tape.leaf(renamer.embed(&batch.names())?);
    let gt = batch.bias();
    let policy = match replace {
        Some(rng) => BiasPolicy::Replace {
            gt: &gt,
            p_replace: config.p_replace,
            rng,
        },
        None => BiasPolicy::Fixed(&gt),
    };
    let out = model.forward(&mut tape, &bound, &feats, queries, &batch.groups, policy)?;
    let levels: Vec<_> = if config.deep_supervision {
        out.levels.clone()
    } else {
        vec![*out.last()]
    };
    let scale = 1.0 / batch.targets.len() as f64;
    let mut terms = Vec::new();
    for head in &levels {
        for target in &batch.targets {
            let (l, _) = segment_loss(&mut tape, head, target, model.config.num_classes, &config.weights);
            terms.push((l, scale));
        }
    }
    let total = tape.weighted_sum(&terms);
    let loss = tape.scalar(total);
    let grads = bound.collect(&model.params, &tape.backward(total));
    Ok((loss, grads, out.replacements))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss per step.
    pub loss_curve: Vec<f64>,
    pub encoder_digests_before: (String, String),
    pub encoder_digests_after: (String, String),
    pub parameter_digest: String,
    pub replacements: usize,
}

impl TrainReport {
    pub fn write_loss_curve(&self, path: &Path) -> Result<()> {
        write_loss_curve(&self.loss_curve, path)
    }
}

pub fn write_loss_curve(curve: &[f64], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    writeln!(out, "step,loss").map_err(|e| Error::io(path, e))?;
    for (i, l) in curve.iter().enumerate() {
        writeln!(out, "{i},{l}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn diverged_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".diverged");
    PathBuf::from(s)
}

/// Train the pixel decoder and transformer decoder; encoders stay frozen.
///
/// On a non-finite loss or gradient the current (last finite) parameters are
/// written to `<checkpoint>.diverged` and training stops.
pub fn train(renamer: &mut Renamer, data: &TrainingSet, config: &TrainConfig, checkpoint: &Path) -> Result<TrainReport> {
    config.validate()?;
    if data.pools.len() != renamer.model.config.num_classes {
        return Err(Error::Config(format!(
            "{} candidate pools for a {}-class model",
            data.pools.len(),
            renamer.model.config.num_classes
        )));
    }
    let before = renamer.encoder_digests();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = AdamW::new(config.optimizer, &renamer.model.params);
    let warmup = (config.replace_warmup * config.steps as f64).ceil() as usize;
    let mut order: Vec<usize> = Vec::new();
    let mut loss_curve = Vec::with_capacity(config.steps);
    let mut replacements = 0;

    for step in 0..config.steps {
        let mut grads: Option<Vec<Mat>> = None;
        let mut step_loss = 0.0;
        for _ in 0..config.images_per_step {
            if order.is_empty() {
                order = (0..data.images.len()).collect();
                order.shuffle(&mut rng);
            }
            let image = &data.images[order.pop().expect("refilled")];
            let batch = build_query_batch(image, &data.pools, &mut rng)?;
            let replace = (step >= warmup && config.p_replace > 0.0).then_some(&mut rng);
            let (loss, g, replaced) = image_loss(renamer, image, &batch, config, replace)?;
            replacements += replaced;
            step_loss += loss / config.images_per_step as f64;
            match &mut grads {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, g)| *a += &g),
                None => grads = Some(g),
            }
        }
        let mut grads = grads.expect("at least one image per step");
        let finite = step_loss.is_finite() && grads.iter().all(|g| g.iter().all(|v| v.is_finite()));
        if !finite {
            let path = diverged_path(checkpoint);
            renamer.save(&path)?;
            return Err(Error::Divergence { step, checkpoint: path });
        }
        let inv = 1.0 / config.images_per_step as f64;
        grads.iter_mut().for_each(|g| *g *= inv);
        optimizer.step(&mut renamer.model.params, &grads, config.lr_at(step));
        loss_curve.push(step_loss);
        if step % 100 == 0 || step + 1 == config.steps {
            log::info!("step {step}: loss {step_loss:.4}");
        }
    }

    let after = renamer.encoder_digests();
    if before != after {
        return Err(Error::Invariant("encoder parameters changed during training".into()));
    }
    Ok(TrainReport {
        loss_curve,
        encoder_digests_before: before,
        encoder_digests_after: after,
        parameter_digest: renamer.model.params.digest(),
        replacements,
    })
}
