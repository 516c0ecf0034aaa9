//! Pixel decoder, transformer decoder and prediction heads.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::{Bound, ParamId, ParamStore};
use super::tape::{sigmoid, Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::mask::Mask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Query and pixel-feature width; must equal the encoder width.
    pub dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Number of decoder blocks `L`.
    pub blocks: usize,
    /// Original classes `K`; the class head has `K + 1` outputs.
    pub num_classes: usize,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn desk(dim: usize, num_classes: usize) -> Self {
        ModelConfig {
            dim,
            heads: 4,
            ffn_dim: 2 * dim,
            blocks: 3,
            num_classes,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.blocks == 0 || self.num_classes == 0 || self.ffn_dim == 0 {
            return Err(Error::Config(
                "blocks, num_classes and ffn_dim must be positive".into(),
            ));
        }
        Ok(())
    }
}

struct Conv {
    w: ParamId,
    b: ParamId,
}

struct Attention {
    q: Vec<(ParamId, ParamId)>,
    k: Vec<(ParamId, ParamId)>,
    v: Vec<(ParamId, ParamId)>,
    out_w: ParamId,
    out_b: ParamId,
}

struct Norm {
    gain: ParamId,
    bias: ParamId,
}

struct Block {
    cross: Attention,
    norm1: Norm,
    this: Attention,
    norm2: Norm,
    ffn1: (ParamId, ParamId),
    ffn2: (ParamId, ParamId),
    norm3: Norm,
}

struct Layout {
    enc: [Conv; 3],
    dec: [Conv; 2],
    lateral: (ParamId, ParamId),
    out_proj: ParamId,
    blocks: Vec<Block>,
    class_head: (ParamId, ParamId),
}

/// Pixel features on a tape: `F_pix` at full resolution plus the
/// cross-attention inputs, coarsest first.
#[derive(Debug, Clone)]
pub struct PixelFeatures {
    pub width: usize,
    pub height: usize,
    pub f_pix: Var,
    pub scales: Vec<Scale>,
}

#[derive(Debug, Clone, Copy)]
pub struct Scale {
    pub width: usize,
    pub height: usize,
    pub features: Var,
}

/// Detached copy of [`PixelFeatures`], reusable across tapes.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelValues {
    pub width: usize,
    pub height: usize,
    pub f_pix: Mat,
    pub scales: Vec<(usize, usize, Mat)>,
}

impl PixelFeatures {
    pub fn values(&self, tape: &Tape) -> PixelValues {
        PixelValues {
            width: self.width,
            height: self.height,
            f_pix: tape.value(self.f_pix).clone(),
            scales: self
                .scales
                .iter()
                .map(|s| (s.width, s.height, tape.value(s.features).clone()))
                .collect(),
        }
    }
}

impl PixelValues {
    pub fn bind(&self, tape: &mut Tape) -> PixelFeatures {
        PixelFeatures {
            width: self.width,
            height: self.height,
            f_pix: tape.leaf(self.f_pix.clone()),
            scales: self
                .scales
                .iter()
                .map(|(w, h, m)| Scale {
                    width: *w,
                    height: *h,
                    features: tape.leaf(m.clone()),
                })
                .collect(),
        }
    }
}

/// Per-query region masks at full resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBias {
    pub per_query: Vec<Mask>,
}

impl AttentionBias {
    /// Allowed-entry matrix at a feature scale. Queries whose region vanishes
    /// attend everywhere; the count of such fallbacks is returned.
    pub fn at_scale(&self, width: usize, height: usize) -> (Array2<bool>, usize) {
        let mut allowed = Array2::from_elem((self.per_query.len(), width * height), false);
        let mut fallbacks = 0;
        for (q, mask) in self.per_query.iter().enumerate() {
            let small = if mask.width() == width && mask.height() == height {
                mask.clone()
            } else {
                mask.resize_nearest(width, height)
            };
            if small.area() == 0 {
                fallbacks += 1;
                allowed.row_mut(q).fill(true);
            } else {
                for i in small.iter_indices() {
                    allowed[[q, i]] = true;
                }
            }
        }
        (allowed, fallbacks)
    }
}

/// Tape handles for the two heads at one decoder level.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    /// `N x P` mask logits, `X · F_pixᵀ`.
    pub mask_logits: Var,
    /// `N x (K + 1)` class logits.
    pub class_logits: Var,
}

impl HeadOutput {
    pub fn mask_probs(&self, tape: &Tape) -> Mat {
        tape.value(self.mask_logits).mapv(sigmoid)
    }

    pub fn class_probs(&self, tape: &Tape) -> Mat {
        softmax_rows(tape.value(self.class_logits))
    }

    /// Predicted mask of query `q`, thresholded at probability 0.5.
    pub fn mask(&self, tape: &Tape, q: usize, width: usize, height: usize) -> Mask {
        let row = tape.value(self.mask_logits).row(q);
        Mask::from_fn(width, height, |x, y| sigmoid(row[y * width + x]) > 0.5)
    }
}

pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Eq. (1) heads: `sigmoid(X · F_pixᵀ)` masks and `softmax(X W + b)` classes.
pub fn predict_heads(tape: &mut Tape, x: Var, f_pix: Var, class_w: Var, class_b: Var) -> HeadOutput {
    let mask_logits = tape.matmul_t(x, f_pix);
    let lin = tape.matmul(x, class_w);
    let class_logits = tape.add_row(lin, class_b);
    HeadOutput {
        mask_logits,
        class_logits,
    }
}

/// How each block's attention bias is chosen.
pub enum BiasPolicy<'a> {
    /// The same regions in every block.
    Fixed(&'a AttentionBias),
    /// Per query and block, swap the ground-truth region for the previous
    /// level's thresholded prediction with probability `p_replace`.
    Replace {
        gt: &'a AttentionBias,
        p_replace: f64,
        rng: &'a mut ChaCha8Rng,
    },
}

#[derive(Debug, Clone)]
pub struct BlockOutput {
    pub post_cross: Var,
    pub post_self: Var,
    pub out: Var,
    pub fallbacks: usize,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Predictions from `X^(0)` through `X^(L)`.
    pub levels: Vec<HeadOutput>,
    pub blocks: Vec<BlockOutput>,
    /// Number of times a block's bias was replaced by a prediction.
    pub replacements: usize,
    pub fallbacks: usize,
}

impl ForwardOutput {
    pub fn last(&self) -> &HeadOutput {
        self.levels.last().expect("at least the input level")
    }
}

pub struct RenameModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    layout: Layout,
}

fn identity(n: usize) -> Mat {
    Mat::eye(n)
}

impl RenameModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut p = ParamStore::default();
        let c = config.dim;
        let dh = c / config.heads;
        let conv_std = (2.0 / (9 * c) as f64).sqrt();

        let conv = |p: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng| Conv {
            w: p.normal(format!("{name}.w"), (9 * c, c), conv_std, rng),
            b: p.zeros(format!("{name}.b"), (1, c)),
        };
        let enc = [
            conv(&mut p, "pixel.enc1", &mut rng),
            conv(&mut p, "pixel.enc2", &mut rng),
            conv(&mut p, "pixel.enc3", &mut rng),
        ];
        let dec = [
            conv(&mut p, "pixel.dec2", &mut rng),
            conv(&mut p, "pixel.dec1", &mut rng),
        ];
        // Starts as the identity so pixel features begin in the text-aligned space.
        let lateral = (
            p.add("pixel.lateral.w", identity(c)),
            p.zeros("pixel.lateral.b", (1, c)),
        );
        let out_proj = p.normal("pixel.out.w", (c, c), 0.02, &mut rng);

        let attn_std = (1.0 / c as f64).sqrt();
        let attention = |p: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng| {
            let proj = |kind: &str, p: &mut ParamStore, rng: &mut ChaCha8Rng| {
                (0..config.heads)
                    .map(|h| {
                        (
                            p.normal(format!("{name}.{kind}{h}.w"), (c, dh), attn_std, rng),
                            p.zeros(format!("{name}.{kind}{h}.b"), (1, dh)),
                        )
                    })
                    .collect::<Vec<_>>()
            };
            let q = proj("q", p, rng);
            let k = proj("k", p, rng);
            let v = proj("v", p, rng);
            Attention {
                q,
                k,
                v,
                out_w: p.normal(format!("{name}.out.w"), (c, c), 0.02, rng),
                out_b: p.zeros(format!("{name}.out.b"), (1, c)),
            }
        };
        let norm = |p: &mut ParamStore, name: &str| Norm {
            gain: p.ones(format!("{name}.gain"), (1, c)),
            bias: p.zeros(format!("{name}.bias"), (1, c)),
        };
        let mut blocks = Vec::with_capacity(config.blocks);
        for l in 0..config.blocks {
            let name = format!("decoder.{l}");
            let cross = attention(&mut p, &format!("{name}.cross"), &mut rng);
            let norm1 = norm(&mut p, &format!("{name}.norm1"));
            let this = attention(&mut p, &format!("{name}.self"), &mut rng);
            let norm2 = norm(&mut p, &format!("{name}.norm2"));
            let ffn1 = (
                p.normal(format!("{name}.ffn1.w"), (c, config.ffn_dim), attn_std, &mut rng),
                p.zeros(format!("{name}.ffn1.b"), (1, config.ffn_dim)),
            );
            let ffn2 = (
                p.normal(format!("{name}.ffn2.w"), (config.ffn_dim, c), 0.02, &mut rng),
                p.zeros(format!("{name}.ffn2.b"), (1, c)),
            );
            let norm3 = norm(&mut p, &format!("{name}.norm3"));
            blocks.push(Block {
                cross,
                norm1,
                this,
                norm2,
                ffn1,
                ffn2,
                norm3,
            });
        }
        let class_head = (
            p.normal("class.w", (c, config.num_classes + 1), attn_std, &mut rng),
            p.zeros("class.b", (1, config.num_classes + 1)),
        );
        Ok(RenameModel {
            config,
            params: p,
            layout: Layout {
                enc,
                dec,
                lateral,
                out_proj,
                blocks,
                class_head,
            },
        })
    }

    /// Run the pixel decoder over frozen backbone features (`P x C`).
    pub fn pixel_decoder(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        backbone: Var,
        width: usize,
        height: usize,
    ) -> Result<PixelFeatures> {
        let c = self.config.dim;
        let b = tape.value(backbone);
        if b.dim() != (width * height, c) {
            return Err(Error::Shape(format!(
                "backbone features {:?} do not match {width}x{height}x{c}",
                b.dim()
            )));
        }
        let l = &self.layout;
        let (w2, h2) = (width.div_ceil(2), height.div_ceil(2));
        let (w4, h4) = (w2.div_ceil(2), h2.div_ceil(2));

        let e1 = conv_block(tape, bound, &l.enc[0], backbone, width, height);
        let p1 = avg_pool(tape, e1, width, height);
        let e2 = conv_block(tape, bound, &l.enc[1], p1, w2, h2);
        let p2 = avg_pool(tape, e2, w2, h2);
        let e3 = conv_block(tape, bound, &l.enc[2], p2, w4, h4);
        let up3 = upsample(tape, e3, w4, h4, w2, h2);
        let s2 = tape.add(up3, e2);
        let u2 = conv_block(tape, bound, &l.dec[0], s2, w2, h2);
        let up2 = upsample(tape, u2, w2, h2, width, height);
        let s1 = tape.add(up2, e1);
        let u1 = conv_block(tape, bound, &l.dec[1], s1, width, height);

        let lat = tape.matmul(backbone, bound.var(l.lateral.0));
        let lat = tape.add_row(lat, bound.var(l.lateral.1));
        let refined = tape.matmul(u1, bound.var(l.out_proj));
        let f_pix = tape.add(lat, refined);
        Ok(PixelFeatures {
            width,
            height,
            f_pix,
            scales: vec![
                Scale {
                    width: w4,
                    height: h4,
                    features: e3,
                },
                Scale {
                    width: w2,
                    height: h2,
                    features: u2,
                },
                Scale {
                    width,
                    height,
                    features: f_pix,
                },
            ],
        })
    }

    fn attention(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        ids: &Attention,
        queries: Var,
        keys: Var,
        allowed: &Array2<bool>,
    ) -> Var {
        let dh = self.config.dim / self.config.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.heads);
        for h in 0..self.config.heads {
            let q = linear(tape, bound, ids.q[h], queries);
            let k = linear(tape, bound, ids.k[h], keys);
            let v = linear(tape, bound, ids.v[h], keys);
            let scores = tape.matmul_t(q, k);
            let scores = tape.scale(scores, scale);
            let weights = tape.masked_softmax(scores, allowed);
            heads.push(tape.matmul(weights, v));
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)
        };
        linear(tape, bound, (ids.out_w, ids.out_b), joined)
    }

    /// One decoder block: masked cross-attention, self-attention within each
    /// query group, feed-forward; each followed by a residual and layer norm.
    #[allow(clippy::too_many_arguments)]
    pub fn decoder_block(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        index: usize,
        x: Var,
        features: &PixelFeatures,
        bias: &AttentionBias,
        groups: &[usize],
    ) -> Result<BlockOutput> {
        let n = tape.value(x).nrows();
        if bias.per_query.len() != n || groups.len() != n {
            return Err(Error::Shape(format!(
                "{n} queries but {} biases and {} group labels",
                bias.per_query.len(),
                groups.len()
            )));
        }
        let block = self.layout.blocks.get(index).ok_or_else(|| {
            Error::Shape(format!("block {index} out of {}", self.config.blocks))
        })?;
        let scale = features.scales[index % features.scales.len()];
        let (allowed, fallbacks) = bias.at_scale(scale.width, scale.height);

        let ca = self.attention(tape, bound, &block.cross, x, scale.features, &allowed);
        let x1 = tape.add(x, ca);
        let post_cross = norm(tape, bound, &block.norm1, x1);

        let same_group = Array2::from_shape_fn((n, n), |(i, j)| groups[i] == groups[j]);
        let sa = self.attention(tape, bound, &block.this, post_cross, post_cross, &same_group);
        let x2 = tape.add(post_cross, sa);
        let post_self = norm(tape, bound, &block.norm2, x2);

        let h = linear(tape, bound, block.ffn1, post_self);
        let h = tape.relu(h);
        let h = linear(tape, bound, block.ffn2, h);
        let x3 = tape.add(post_self, h);
        let out = norm(tape, bound, &block.norm3, x3);
        Ok(BlockOutput {
            post_cross,
            post_self,
            out,
            fallbacks,
        })
    }

    pub fn heads(&self, tape: &mut Tape, bound: &Bound, x: Var, f_pix: Var) -> HeadOutput {
        let (w, b) = self.layout.class_head;
        predict_heads(tape, x, f_pix, bound.var(w), bound.var(b))
    }

    /// All decoder blocks, with predictions after each (and for the input queries).
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        features: &PixelFeatures,
        queries: Var,
        groups: &[usize],
        mut policy: BiasPolicy<'_>,
    ) -> Result<ForwardOutput> {
        let (n, c) = tape.value(queries).dim();
        if c != self.config.dim {
            return Err(Error::Shape(format!(
                "query width {c} differs from model width {}",
                self.config.dim
            )));
        }
        let mut x = queries;
        let mut levels = vec![self.heads(tape, bound, x, features.f_pix)];
        let mut blocks = Vec::with_capacity(self.config.blocks);
        let mut replacements = 0;
        let mut fallbacks = 0;
        for l in 0..self.config.blocks {
            let bias = match &mut policy {
                BiasPolicy::Fixed(b) => (*b).clone(),
                BiasPolicy::Replace { gt, p_replace, rng } => {
                    let prev = levels.last().expect("input level");
                    let mut per_query = Vec::with_capacity(n);
                    for q in 0..n {
                        let pred = prev.mask(tape, q, features.width, features.height);
                        let (m, replaced) = replace_bias(&gt.per_query[q], &pred, *p_replace, rng);
                        replacements += replaced as usize;
                        per_query.push(m);
                    }
                    AttentionBias { per_query }
                }
            };
            let out = self.decoder_block(tape, bound, l, x, features, &bias, groups)?;
            fallbacks += out.fallbacks;
            x = out.out;
            blocks.push(out);
            levels.push(self.heads(tape, bound, x, features.f_pix));
        }
        if fallbacks > 0 {
            log::warn!("{fallbacks} attention regions were empty; those queries attended to the full image");
        }
        Ok(ForwardOutput {
            levels,
            blocks,
            replacements,
            fallbacks,
        })
    }
}

/// With probability `p_replace` return the predicted region, else the ground truth.
/// The second value reports whether the replacement happened.
pub fn replace_bias(gt: &Mask, predicted: &Mask, p_replace: f64, rng: &mut impl rand::Rng) -> (Mask, bool) {
    if rng.random::<f64>() < p_replace {
        (predicted.clone(), true)
    } else {
        (gt.clone(), false)
    }
}

fn linear(tape: &mut Tape, bound: &Bound, (w, b): (ParamId, ParamId), x: Var) -> Var {
    let y = tape.matmul(x, bound.var(w));
    tape.add_row(y, bound.var(b))
}

fn norm(tape: &mut Tape, bound: &Bound, ids: &Norm, x: Var) -> Var {
    let y = tape.layer_norm(x, 1e-5);
    let y = tape.mul_row(y, bound.var(ids.gain));
    tape.add_row(y, bound.var(ids.bias))
}

fn conv_block(tape: &mut Tape, bound: &Bound, ids: &Conv, x: Var, width: usize, height: usize) -> Var {
    let cols = im2col(tape, x, width, height);
    let y = linear(tape, bound, (ids.w, ids.b), cols);
    tape.relu(y)
}

/// 3x3 neighbourhoods with zero padding: `P x 9C`.
fn im2col(tape: &mut Tape, x: Var, width: usize, height: usize) -> Var {
    let c = tape.value(x).ncols();
    let mut index = Vec::with_capacity(width * height * 9 * c);
    for y in 0..height as isize {
        for x0 in 0..width as isize {
            for dy in -1..=1isize {
                for dx in -1..=1isize {
                    let (ny, nx) = (y + dy, x0 + dx);
                    let inside = ny >= 0 && nx >= 0 && ny < height as isize && nx < width as isize;
                    if inside {
                        let q = (ny * width as isize + nx) as usize;
                        index.extend((0..c).map(|ch| Some(q * c + ch)));
                    } else {
                        index.extend(std::iter::repeat_n(None, c));
                    }
                }
            }
        }
    }
    tape.gather(x, (width * height, 9 * c), index)
}

/// 2x2 average pooling; odd edges average the pixels that exist.
fn avg_pool(tape: &mut Tape, x: Var, width: usize, height: usize) -> Var {
    let (w2, h2) = (width.div_ceil(2), height.div_ceil(2));
    let mut pool = Mat::zeros((w2 * h2, width * height));
    for cy in 0..h2 {
        for cx in 0..w2 {
            let cells: Vec<usize> = (2 * cy..(2 * cy + 2).min(height))
                .flat_map(|y| (2 * cx..(2 * cx + 2).min(width)).map(move |x| y * width + x))
                .collect();
            for &i in &cells {
                pool[[cy * w2 + cx, i]] = 1.0 / cells.len() as f64;
            }
        }
    }
    let pool = tape.leaf(pool);
    tape.matmul(pool, x)
}

fn upsample(tape: &mut Tape, x: Var, w: usize, h: usize, width: usize, height: usize) -> Var {
    let c = tape.value(x).ncols();
    let mut index = Vec::with_capacity(width * height * c);
    for y in 0..height {
        for x0 in 0..width {
            let q = (y / 2).min(h - 1) * w + (x0 / 2).min(w - 1);
            index.extend((0..c).map(|ch| Some(q * c + ch)));
        }
    }
    tape.gather(x, (width * height, c), index)
}
