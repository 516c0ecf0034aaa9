mod common;

use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segrename::candidates::CandidateStore;
use segrename::mask::Mask;
use segrename::model::network::{predict_heads, AttentionBias, BiasPolicy};
use segrename::model::train::{build_query_batch, diverged_path, image_loss, TrainingSet};
use segrename::model::{train, EncoderManifest, Mat, ModelConfig, Renamer, Tape, TrainConfig, ENCODERS_FILE};
use segrename::renovation::{rename_dataset, RenameOptions};
use segrename::store::{load_dataset, write_assignments, DatasetKind};
use segrename::synthetic::{generate, SyntheticConfig, CANDIDATES_FILE};
use segrename::Error;

use common::{toy_image, toy_renamer};

fn norm(m: &Mat) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[test]
fn gradient_check_on_toy_model() {
    // Two queries (one candidate plus the negative) on a 4x4 image.
    let mut renamer = toy_renamer(4, 2, 2, 3);
    let (_, image) = toy_image(&renamer, 4, 1);
    let pools = vec![vec!["alpha".to_string()], vec!["beta".to_string()]];
    let batch = build_query_batch(&image, &pools, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert_eq!(batch.meta.len(), 2);
    let config = TrainConfig::default();
    let (_, grads, _) = image_loss(&renamer, &image, &batch, &config, None).unwrap();

    let ids: Vec<_> = renamer.model.params.ids().collect();
    let eps = 1e-4;
    let mut worst = 0.0f64;
    for (id, analytic) in ids.into_iter().zip(&grads) {
        let mut numeric = Mat::zeros(analytic.dim());
        for idx in 0..analytic.len() {
            let (r, c) = (idx / analytic.ncols(), idx % analytic.ncols());
            let orig = renamer.model.params.get(id)[[r, c]];
            let mut at = |delta: f64| {
                renamer.model.params.get_mut(id)[[r, c]] = orig + delta;
                image_loss(&renamer, &image, &batch, &config, None).unwrap().0
            };
            // Five-point central difference.
            let d = (at(-2.0 * eps) - 8.0 * at(-eps) + 8.0 * at(eps) - at(2.0 * eps)) / (12.0 * eps);
            renamer.model.params.get_mut(id)[[r, c]] = orig;
            numeric[[r, c]] = d;
        }
        let scale = norm(analytic).max(norm(&numeric));
        if scale < 1e-10 {
            continue;
        }
        let err = norm(&(analytic - &numeric)) / scale;
        let name = renamer.model.params.name(id).to_string();
        assert!(err < 1e-4, "{name}: relative error {err:.2e}");
        worst = worst.max(err);
    }
    assert!(worst < 1e-4);
}

#[test]
fn cross_attention_ignores_features_outside_the_region() {
    let renamer = toy_renamer(8, 2, 3, 5);
    let (rgb, _) = toy_image(&renamer, 16, 2);
    let pixels = renamer.pixel_values(&rgb).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let queries = Array2::from_shape_fn((3, 8), |_| rng.random_range(-1.0..1.0));
    let bias = AttentionBias {
        per_query: vec![
            Mask::rect(16, 16, 0, 0, 8, 16),
            Mask::rect(16, 16, 8, 0, 16, 16),
            Mask::rect(16, 16, 4, 4, 12, 12),
        ],
    };
    let groups = [0, 0, 1];

    let post_cross = |pixels: &segrename::model::network::PixelValues, block: usize| {
        let mut tape = Tape::new();
        let bound = renamer.model.params.bind(&mut tape);
        let feats = pixels.bind(&mut tape);
        let x = tape.leaf(queries.clone());
        let out = renamer
            .model
            .decoder_block(&mut tape, &bound, block, x, &feats, &bias, &groups)
            .unwrap();
        tape.value(out.post_cross).clone()
    };

    for block in 0..3 {
        let base = post_cross(&pixels, block);
        let scale = block % pixels.scales.len();
        let (w, h, _) = pixels.scales[scale];
        let (allowed, fallbacks) = bias.at_scale(w, h);
        assert_eq!(fallbacks, 0);
        for q in 0..3 {
            let mut outside = pixels.clone();
            let mut inside = pixels.clone();
            let feats = &mut outside.scales[scale].2;
            for p in 0..w * h {
                if !allowed[[q, p]] {
                    feats.row_mut(p).mapv_inplace(|v| v + rng.random_range(-5.0..5.0));
                } else {
                    inside.scales[scale].2.row_mut(p).mapv_inplace(|v| v + 1.0);
                }
            }
            let moved = post_cross(&outside, block);
            let diff = (&moved.row(q) - &base.row(q)).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
            assert!(diff < 1e-9, "block {block}, query {q}: changed by {diff:e}");
            let changed = post_cross(&inside, block);
            let diff = (&changed.row(q) - &base.row(q)).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
            assert!(diff > 1e-6, "block {block}, query {q}: in-region change had no effect");
        }
    }
}

#[test]
fn untrained_prediction_does_not_copy_an_unaligned_bias() {
    for seed in 0..4 {
        let renamer = toy_renamer(16, 4, 3, seed);
        let (rgb, _) = toy_image(&renamer, 16, seed);
        let pixels = renamer.pixel_values(&rgb).unwrap();
        // Straddles the colour boundary, so only a copy could reproduce it.
        let region = Mask::rect(16, 16, 4, 2, 12, 10);
        let mut tape = Tape::new();
        let bound = renamer.model.params.bind(&mut tape);
        let feats = pixels.bind(&mut tape);
        let x = tape.leaf(renamer.embed(&["alpha".to_string()]).unwrap());
        let bias = AttentionBias { per_query: vec![region.clone()] };
        let out = renamer
            .model
            .forward(&mut tape, &bound, &feats, x, &[0], BiasPolicy::Fixed(&bias))
            .unwrap();
        for level in &out.levels {
            assert_ne!(level.mask(&tape, 0, 16, 16), region, "seed {seed}");
        }
    }
}

#[test]
fn trained_prediction_rarely_equals_the_wrong_segment() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_synthetic(dir.path(), 11);
    let mut renamer = fresh_renamer(dir.path());
    let config = TrainConfig {
        steps: 150,
        ..TrainConfig::default()
    };
    train(&mut renamer, &data, &config, &dir.path().join("m.ckpt")).unwrap();

    let mut checked = 0;
    let mut copies = 0;
    for image in &data.images {
        for (a, b) in image.segments.iter().zip(image.segments.iter().cycle().skip(1)) {
            if a.mask == b.mask {
                continue;
            }
            let mut tape = Tape::new();
            let bound = renamer.model.params.bind(&mut tape);
            let backbone = tape.leaf(image.backbone.clone());
            let feats = renamer
                .model
                .pixel_decoder(&mut tape, &bound, backbone, image.width, image.height)
                .unwrap();
            let name = data.pools[a.class_index][0].clone();
            let x = tape.leaf(renamer.embed(&[name]).unwrap());
            let bias = AttentionBias { per_query: vec![b.mask.clone()] };
            let out = renamer
                .model
                .forward(&mut tape, &bound, &feats, x, &[0], BiasPolicy::Fixed(&bias))
                .unwrap();
            let predicted = out.last().mask(&tape, 0, image.width, image.height);
            copies += (predicted == b.mask) as usize;
            checked += 1;
        }
    }
    // A query confined to segment B can legitimately segment B; what must not
    // happen is the prediction tracking the bias regardless of the name.
    assert!(checked >= 10);
    assert!(copies * 10 <= checked, "{copies} of {checked} predictions equal the wrong segment");
}

proptest! {
    #[test]
    fn head_ranges(n in 1usize..5, p in 1usize..20, c in 1usize..6, k in 1usize..5, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = |r: usize, cc: usize| Array2::from_shape_fn((r, cc), |_| rng.random_range(-2.0..2.0));
        let mut tape = Tape::new();
        let x = tape.leaf(m(n, c));
        let f = tape.leaf(m(p, c));
        let w = tape.leaf(m(c, k + 1));
        let b = tape.leaf(m(1, k + 1));
        let head = predict_heads(&mut tape, x, f, w, b);
        let masks = head.mask_probs(&tape);
        let classes = head.class_probs(&tape);
        prop_assert_eq!(masks.dim(), (n, p));
        prop_assert_eq!(classes.dim(), (n, k + 1));
        prop_assert!(masks.iter().all(|&v| v > 0.0 && v < 1.0));
        for row in classes.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }
}

fn small_synthetic(dir: &std::path::Path, seed: u64) -> TrainingSet {
    let cfg = SyntheticConfig {
        images: 8,
        dim: 32,
        seed,
        ..SyntheticConfig::default()
    };
    generate(dir, &cfg).unwrap();
    let dataset = load_dataset(dir, DatasetKind::Panoptic).unwrap();
    let candidates = CandidateStore::read(&dir.join(CANDIDATES_FILE)).unwrap();
    TrainingSet::from_dataset(&dataset, &candidates, &fresh_renamer(dir)).unwrap()
}

fn fresh_renamer(dir: &std::path::Path) -> Renamer {
    let dataset = load_dataset(dir, DatasetKind::Panoptic).unwrap();
    let ids: Vec<u32> = dataset.classes.ids().collect();
    EncoderManifest::read(&dir.join(ENCODERS_FILE))
        .unwrap()
        .renamer(ModelConfig::desk(32, ids.len()), ids, dir)
        .unwrap()
}

#[test]
fn fifty_steps_reduce_the_loss_and_repeat_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_synthetic(dir.path(), 4);
    let config = TrainConfig {
        steps: 50,
        optimizer: segrename::model::AdamWConfig {
            lr: 1e-3,
            ..Default::default()
        },
        ..TrainConfig::default()
    };
    let mut a = fresh_renamer(dir.path());
    let report = train(&mut a, &data, &config, &dir.path().join("a.ckpt")).unwrap();
    let head: f64 = report.loss_curve[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = report.loss_curve[40..].iter().sum::<f64>() / 10.0;
    assert!(tail < head, "loss went from {head:.4} to {tail:.4}");
    assert_eq!(report.encoder_digests_before, report.encoder_digests_after);

    let mut b = fresh_renamer(dir.path());
    let again = train(&mut b, &data, &config, &dir.path().join("b.ckpt")).unwrap();
    assert_eq!(report.loss_curve, again.loss_curve);
    assert_eq!(report.parameter_digest, again.parameter_digest);
}

#[test]
fn non_finite_loss_stops_training_with_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_synthetic(dir.path(), 1);
    let mut renamer = fresh_renamer(dir.path());
    let params = &mut renamer.model.params;
    let id = params.ids().find(|&id| params.name(id) == "pixel.lateral.w").unwrap();
    params.get_mut(id).fill(f64::NAN);
    let ckpt = dir.path().join("m.ckpt");
    let config = TrainConfig {
        steps: 5,
        ..TrainConfig::default()
    };
    match train(&mut renamer, &data, &config, &ckpt) {
        Err(Error::Divergence { step, checkpoint }) => {
            assert_eq!(step, 0);
            assert_eq!(checkpoint, diverged_path(&ckpt));
            assert!(checkpoint.exists());
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn renaming_from_one_checkpoint_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_synthetic(dir.path(), 2);
    let mut renamer = fresh_renamer(dir.path());
    let config = TrainConfig {
        steps: 5,
        ..TrainConfig::default()
    };
    let ckpt = dir.path().join("m.ckpt");
    train(&mut renamer, &data, &config, &ckpt).unwrap();
    renamer.save(&ckpt).unwrap();

    let dataset = load_dataset(dir.path(), DatasetKind::Panoptic).unwrap();
    let pools = CandidateStore::read(&dir.path().join(CANDIDATES_FILE)).unwrap().pools();
    let mut files = Vec::new();
    for run in 0..2 {
        let loaded = Renamer::load(&ckpt).unwrap();
        let outcome = rename_dataset(&dataset, &pools, &loaded, &RenameOptions::default()).unwrap();
        assert!(outcome.failures.is_empty());
        assert_eq!(outcome.assignments.len(), dataset.segments.len());
        let path = dir.path().join(format!("assignments{run}.jsonl"));
        write_assignments(&outcome.assignments, &path).unwrap();
        files.push(std::fs::read(path).unwrap());
    }
    assert_eq!(files[0], files[1]);
}
