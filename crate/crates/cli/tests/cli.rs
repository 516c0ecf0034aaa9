use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use segrename::candidates::{build_prompt, CandidateEntry, CandidateStore, Provenance, RecordingSet};
use segrename::context::ContextNames;
use segrename::mask::Mask;
use segrename::model::RgbImage;
use segrename::store::{read_assignments, save_dataset, ClassTable, ImageEntry, SegmentRecord};

fn segrename(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_segrename"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Two images split into a left "field" half and a right "sky" half.
fn write_dataset(root: &Path, names: [&str; 2], with_rgb: bool) {
    let mut classes = ClassTable::default();
    classes.insert(1, &[names[0]], false);
    classes.insert(2, &[names[1]], false);
    let mut images = Vec::new();
    let mut segments = Vec::new();
    for i in 0..2u64 {
        let image_id = format!("im{i}");
        let image = with_rgb.then(|| {
            let rel = format!("images/{image_id}.png");
            RgbImage::from_fn(8, 8, |x, _| if x < 4 { [0.2, 0.7, 0.2] } else { [0.4, 0.6, 0.9] })
                .write_png(&root.join(&rel))
                .unwrap();
            rel
        });
        images.push(ImageEntry {
            image_id: image_id.clone(),
            label_map: format!("labels/{image_id}.png"),
            image,
            width: 8,
            height: 8,
            segments: Vec::new(),
        });
        for (k, mask) in [Mask::rect(8, 8, 0, 0, 4, 8), Mask::rect(8, 8, 4, 0, 8, 8)].into_iter().enumerate() {
            segments.push(SegmentRecord {
                segment_id: 10 * i + k as u64 + 1,
                image_id: image_id.clone(),
                original_class_id: k as u32 + 1,
                area: mask.area(),
                mask,
                is_thing: false,
                score: None,
            });
        }
    }
    save_dataset(root, &classes, &images, &segments).unwrap();
}

#[test]
fn rename_without_checkpoint_asks_for_training() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), ["field", "sky"], true);
    let out = segrename(&["rename", "--dataset", p(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("run train first"), "{}", stderr(&out));
}

#[test]
fn unknown_flag_is_a_configuration_error() {
    let out = segrename(&["train", "--dataset", "x", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    let out = segrename(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_dataset_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = segrename(&["mine-context", "--dataset", p(&dir.path().join("nope")), "--captions", "x"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn live_llm_without_credentials_is_a_configuration_error() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(dir.path(), ["field", "sky"], false);
    let out = Command::new(env!("CARGO_BIN_EXE_segrename"))
        .args(["gen-candidates", "--dataset", p(dir.path()), "--llm", "live", "--no-context"])
        .env_remove("SEGRENAME_LLM_API_KEY")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}

#[test]
fn evaluate_echoes_mode_and_protocol() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt");
    let pred = dir.path().join("pred");
    write_dataset(&gt, ["field", "sky"], false);
    write_dataset(&pred, ["sports field", "sky"], false);
    let mut store = CandidateStore::default();
    store.classes.insert(
        1,
        CandidateEntry {
            original_names: vec!["field".into()],
            context: Vec::new(),
            candidates: ["sports field", "lawn", "meadow", "pasture", "grassland"].map(String::from).to_vec(),
            provenance: Provenance::Manual,
        },
    );
    let names = dir.path().join("names.json");
    store.write(&names).unwrap();
    let vectors = dir.path().join("vectors.vec");
    std::fs::write(&vectors, "4 2\nsports 1 0\nfield 0.8 0.6\nsky 0 1\nlawn 0.9 0.1\n").unwrap();
    let report = dir.path().join("report.json");

    let out = segrename(&[
        "evaluate",
        "--dataset",
        p(&gt),
        "--predictions",
        p(&pred),
        "--metric",
        "open",
        "--protocol",
        "grouped",
        "--similarity",
        p(&vectors),
        "--names",
        p(&names),
        "--report",
        p(&report),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["mode"], "open");
    assert_eq!(r["protocol"], "grouped_to_original");
    assert_eq!(r["pq"], 1.0);
    assert!(report.with_extension("txt").exists());

    // Without grouping the fine name is only partly credited.
    let out = segrename(&[
        "evaluate",
        "--dataset",
        p(&gt),
        "--predictions",
        p(&pred),
        "--metric",
        "open",
        "--similarity",
        p(&vectors),
        "--report",
        p(&report),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["protocol"], "plain");
    assert!(r["pq"].as_f64().unwrap() < 1.0);

    let out = segrename(&["evaluate", "--dataset", p(&gt), "--predictions", p(&pred), "--metric", "open"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn demo_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let out = segrename(&["demo-synthetic", "--out", p(dir.path()), "--seed", "7", "--steps", "5", "--images", "4"]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let read = |d: &Path| std::fs::read(d.join("assignments.jsonl")).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    assert_eq!(read_assignments(&a.path().join("assignments.jsonl")).unwrap().len(), 16);
    assert!(a.path().join("upgraded/index.json").exists());
    assert!(a.path().join("summary.json").exists());
}

#[test]
fn fixture_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    write_dataset(&ds, ["field", "sky"], true);
    let captions = dir.path().join("captions");
    std::fs::create_dir_all(&captions).unwrap();
    std::fs::write(captions.join("1.txt"), "A lush field with grass\nA green field near a road\n").unwrap();
    std::fs::write(captions.join("2.txt"), "Clouds in the blue sky\n").unwrap();

    let out = segrename(&["gen-candidates", "--dataset", p(&ds), "--fixture", "x.json"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("run mine-context first"));

    let out = segrename(&["mine-context", "--dataset", p(&ds), "--captions", p(&captions), "--k", "3"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let contexts: Vec<ContextNames> = serde_json::from_str(&std::fs::read_to_string(ds.join("context.json")).unwrap()).unwrap();
    assert_eq!(contexts[0].entries[0], ("field".to_string(), 2));

    // Record the responses a language model would give to these exact prompts.
    let classes = ClassTable::read(&ds.join("classes.json")).unwrap();
    let responses = BTreeMap::from([
        (1, "1. lawn\n2. meadow\n3. pasture\n4. grassland\n5. sports field"),
        (2, "clear sky, cloudy sky, blue sky, night sky, overcast sky, horizon"),
    ]);
    let mut recordings = RecordingSet::default();
    for c in &contexts {
        let prompt = build_prompt(classes.get(c.class_id).unwrap(), c, true);
        recordings.push(&prompt, "", responses[&c.class_id]);
    }
    let fixture = dir.path().join("fixture.json");
    recordings.write(&fixture).unwrap();

    let out = segrename(&["train", "--dataset", p(&ds)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("run gen-candidates first"));

    let out = segrename(&["gen-candidates", "--dataset", p(&ds), "--fixture", p(&fixture)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let store = CandidateStore::read(&ds.join("candidates.json")).unwrap();
    assert_eq!(store.classes[&1].candidates.len(), 5);
    assert_eq!(store.classes[&2].candidates.len(), 6);

    let out = segrename(&["train", "--dataset", p(&ds), "--steps", "3", "--dim", "16"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let curve = std::fs::read_to_string(ds.join("model.ckpt.loss.csv")).unwrap();
    assert_eq!(curve.lines().count(), 4);

    let out = segrename(&["rename", "--dataset", p(&ds), "--top-k", "2"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let assignments = read_assignments(&ds.join("assignments.jsonl")).unwrap();
    assert_eq!(assignments.len(), 4);
    for a in &assignments {
        assert_eq!(a.ranked.len(), 2);
        assert!(store.classes[&a.class_id].candidates.contains(&a.chosen));
    }
    assert!(ds.join("distribution/1.csv").exists());

    let out = segrename(&["export", "--dataset", p(&ds)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let up: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ds.join("verified/upgraded_classes.json")).unwrap()).unwrap();
    assert!(up["grouping"]["1"].as_array().is_some());
    assert!(read_assignments(&ds.join("verified/verified_assignments.jsonl")).unwrap().is_empty());
}
