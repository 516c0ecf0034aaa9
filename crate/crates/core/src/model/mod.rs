//! The renaming model: frozen encoders, a trainable pixel decoder and a
//! transformer decoder that takes candidate-name embeddings as queries.

pub mod encoders;
pub mod loss;
pub mod network;
pub mod params;
pub mod tape;
pub mod train;

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

pub use encoders::{RgbImage, VisionEncoder};
pub use loss::{compute_loss, select_best, CandidatePrediction, LossWeights, SegmentTarget};
pub use network::{
    predict_heads, replace_bias, AttentionBias, BiasPolicy, ForwardOutput, HeadOutput, ModelConfig,
    PixelFeatures, PixelValues, RenameModel,
};
pub use params::{AdamW, AdamWConfig, ParamStore};
pub use tape::{Mat, Tape, Var};
pub use train::{train, TrainConfig, TrainReport, TrainingSet};

use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::names::{embed_name_ensembled, vild_templates, HashingEncoder, TableEncoder, TextEncoder};

/// Which frozen text encoder produced the query embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TextEncoderSpec {
    Hashing { dim: usize, seed: u64 },
    /// A lookup table; the path is relative to the checkpoint's directory when not absolute.
    Table { path: PathBuf },
}

impl TextEncoderSpec {
    pub fn open(&self, base: &Path) -> Result<Box<dyn TextEncoder>> {
        Ok(match self {
            TextEncoderSpec::Hashing { dim, seed } => Box::new(HashingEncoder::new(*dim, *seed)),
            TextEncoderSpec::Table { path } => Box::new(TableEncoder::read(&base.join(path))?),
        })
    }
}

/// Prompt templates for ensembling name embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateSet {
    Vild,
    /// The bare name only.
    Identity,
}

impl TemplateSet {
    pub fn templates(self) -> Vec<String> {
        match self {
            TemplateSet::Vild => vild_templates(),
            TemplateSet::Identity => vec!["{category}".to_string()],
        }
    }
}

/// Encoder choice stored next to a dataset (`encoders.json`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderManifest {
    pub dim: usize,
    pub vision_bandwidth: f64,
    pub vision_seed: u64,
    pub text: TextEncoderSpec,
    pub templates: TemplateSet,
}

pub const ENCODERS_FILE: &str = "encoders.json";

impl EncoderManifest {
    pub fn hashing(dim: usize, seed: u64) -> Self {
        EncoderManifest {
            dim,
            vision_bandwidth: 10.0,
            vision_seed: seed,
            text: TextEncoderSpec::Hashing { dim, seed },
            templates: TemplateSet::Vild,
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        crate::store::read_json(path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::store::write_json(path, self)
    }

    pub fn vision(&self) -> VisionEncoder {
        VisionEncoder::new(self.dim, self.vision_bandwidth, self.vision_seed)
    }

    /// A fresh model over these encoders. Table paths resolve against `base`.
    pub fn renamer(&self, config: ModelConfig, class_ids: Vec<u32>, base: &Path) -> Result<Renamer> {
        let text_spec = match &self.text {
            TextEncoderSpec::Table { path } if path.is_relative() => TextEncoderSpec::Table {
                path: std::path::absolute(base.join(path)).map_err(|e| Error::io(base, e))?,
            },
            other => other.clone(),
        };
        let text = text_spec.open(base)?;
        Renamer::new(RenameModel::new(config)?, self.vision(), text_spec, text, self.templates, class_ids)
    }
}

/// A model together with everything needed to run it on new images.
pub struct Renamer {
    pub model: RenameModel,
    pub vision: VisionEncoder,
    pub text_spec: TextEncoderSpec,
    pub text: Box<dyn TextEncoder>,
    pub templates: TemplateSet,
    /// Original class ids in class-head order.
    pub class_ids: Vec<u32>,
    cache: Mutex<HashMap<String, Vec<f64>>>,
}

const CHECKPOINT_MAGIC: &str = "SEGRENAME-CHECKPOINT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointBody {
    model: ModelConfig,
    vision: VisionEncoder,
    text: TextEncoderSpec,
    templates: TemplateSet,
    class_ids: Vec<u32>,
    vision_digest: String,
    text_digest: String,
    params: Vec<params::ParamRecord>,
}

impl Renamer {
    pub fn new(
        model: RenameModel,
        vision: VisionEncoder,
        text_spec: TextEncoderSpec,
        text: Box<dyn TextEncoder>,
        templates: TemplateSet,
        class_ids: Vec<u32>,
    ) -> Result<Self> {
        let c = model.config.dim;
        if vision.dim != c || text.dim() != c {
            return Err(Error::Config(format!(
                "encoder widths (vision {}, text {}) must equal the model width {c}",
                vision.dim,
                text.dim()
            )));
        }
        if class_ids.len() != model.config.num_classes {
            return Err(Error::Config(format!(
                "{} class ids for a {}-class head",
                class_ids.len(),
                model.config.num_classes
            )));
        }
        Ok(Renamer {
            model,
            vision,
            text_spec,
            text,
            templates,
            class_ids,
            cache: Mutex::new(HashMap::new()),
        })
    }

    pub fn class_index(&self, class_id: u32) -> Option<usize> {
        self.class_ids.iter().position(|&c| c == class_id)
    }

    /// Template-ensembled embeddings, one row per name.
    pub fn embed(&self, names: &[String]) -> Result<Mat> {
        let templates = self.templates.templates();
        let mut out = Mat::zeros((names.len(), self.model.config.dim));
        let mut cache = self.cache.lock().expect("embedding cache poisoned");
        for (row, name) in names.iter().enumerate() {
            if !cache.contains_key(name) {
                let e = embed_name_ensembled(name, &templates, self.text.as_ref())?;
                cache.insert(name.clone(), e.vector);
            }
            for (o, v) in out.row_mut(row).iter_mut().zip(&cache[name]) {
                *o = *v;
            }
        }
        Ok(out)
    }

    pub fn pixel_values(&self, image: &RgbImage) -> Result<PixelValues> {
        let mut tape = Tape::new();
        let bound = self.model.params.bind(&mut tape);
        let backbone = tape.leaf(self.vision.encode_image(image));
        let feats = self
            .model
            .pixel_decoder(&mut tape, &bound, backbone, image.width, image.height)?;
        Ok(feats.values(&tape))
    }

    /// One forward pass with `names` as queries, all biased by `region`.
    /// Returns per-name IoU of the final predicted mask with `region`, and the
    /// final class probabilities.
    pub fn score_names(&self, pixels: &PixelValues, region: &Mask, names: &[String]) -> Result<(Vec<f64>, Mat)> {
        if names.is_empty() {
            return Err(Error::InvalidData("no names to score".into()));
        }
        if region.width() != pixels.width || region.height() != pixels.height {
            return Err(Error::Shape(format!(
                "mask {}x{} on a {}x{} image",
                region.width(),
                region.height(),
                pixels.width,
                pixels.height
            )));
        }
        let mut tape = Tape::new();
        let bound = self.model.params.bind(&mut tape);
        let feats = pixels.bind(&mut tape);
        let queries = tape.leaf(self.embed(names)?);
        let bias = AttentionBias {
            per_query: vec![region.clone(); names.len()],
        };
        let groups = vec![0; names.len()];
        let out = self
            .model
            .forward(&mut tape, &bound, &feats, queries, &groups, BiasPolicy::Fixed(&bias))?;
        let last = out.last();
        let scores = (0..names.len())
            .map(|q| last.mask(&tape, q, pixels.width, pixels.height).iou(region))
            .collect();
        Ok((scores, last.class_probs(&tape)))
    }

    pub fn encoder_digests(&self) -> (String, String) {
        (self.vision.parameter_digest(), self.text.parameter_digest())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let (vision_digest, text_digest) = self.encoder_digests();
        let body = CheckpointBody {
            model: self.model.config.clone(),
            vision: self.vision.clone(),
            text: self.text_spec.clone(),
            templates: self.templates,
            class_ids: self.class_ids.clone(),
            vision_digest,
            text_digest,
            params: self.model.params.to_records(),
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = std::io::BufWriter::new(file);
        writeln!(out, "{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}").map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(&mut out, &body).map_err(|e| Error::parse(path, e))?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(file);
        let mut header = String::new();
        reader.read_line(&mut header).map_err(|e| Error::io(path, e))?;
        let expected = format!("{CHECKPOINT_MAGIC} v{CHECKPOINT_VERSION}");
        if header.trim_end() != expected {
            return Err(Error::parse(
                path,
                format!("unsupported checkpoint header {:?}", header.trim_end()),
            ));
        }
        let body: CheckpointBody = serde_json::from_reader(reader).map_err(|e| Error::parse(path, e))?;
        let mut model = RenameModel::new(body.model)?;
        model.params.load_records(&body.params)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let text = body.text.open(base)?;
        if body.vision.parameter_digest() != body.vision_digest || text.parameter_digest() != body.text_digest {
            return Err(Error::InvalidData(format!(
                "{}: encoder parameters differ from those used in training",
                path.display()
            )));
        }
        Renamer::new(model, body.vision, body.text, text, body.templates, body.class_ids)
    }
}
