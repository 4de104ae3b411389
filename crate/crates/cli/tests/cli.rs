use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dcfl_core::bias::{synth_scene, SceneSpec};
use dcfl_core::io::{encode_offsets, serialize_dota, RunConfig};
use dcfl_core::prior::{build_prior_field, synth_offsets_toward_gt};
use serde_json::Value;
use tempfile::TempDir;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn dcfl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcfl"))
        .args(args)
        .env_remove("DCFL_JOBS")
        .output()
        .expect("run dcfl")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn corpus() -> PathBuf {
    fixtures().join("corpus/ann")
}

#[test]
fn missing_ann_is_usage_error() {
    assert_eq!(code(&dcfl(&["assign", "--out", "x.json"])), 2);
    assert_eq!(code(&dcfl(&["frobnicate"])), 2);
}

#[test]
fn config_errors_exit_2() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.toml");
    let out = dir.path().join("o.json");
    for text in ["K = 16\nQ = 20\n", "g = 0\n", "nonsense = 1\n"] {
        fs::write(&bad, text).unwrap();
        let o = dcfl(&[
            "assign",
            "--ann",
            s(&corpus()),
            "--config",
            s(&bad),
            "--out",
            s(&out),
        ]);
        assert_eq!(code(&o), 2, "{text}");
    }
}

#[test]
fn parse_errors_exit_3_and_name_the_file() {
    let dir = TempDir::new().unwrap();
    let ann = dir.path().join("ann");
    fs::create_dir(&ann).unwrap();
    fs::write(ann.join("a_ok.txt"), "0 0 2 0 2 2 0 2 ship 0\n").unwrap();
    fs::write(ann.join("b_bad.txt"), "0 0 2 0 2 2 0 2 submarine 0\n").unwrap();
    fs::write(ann.join("c_bad.txt"), "a b c d e f g h ship\n").unwrap();
    let o = dcfl(&[
        "assign",
        "--ann",
        s(&ann),
        "--out",
        s(&dir.path().join("o.json")),
    ]);
    assert_eq!(code(&o), 3);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        err.contains("b_bad.txt") && err.contains("submarine"),
        "{err}"
    );
    assert!(!err.contains("c_bad.txt"));
}

#[test]
fn zero_synthetic_offsets_equal_no_offsets() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    assert_eq!(
        code(&dcfl(&["assign", "--ann", s(&corpus()), "--out", s(&a)])),
        0
    );
    let o = dcfl(&[
        "assign",
        "--ann",
        s(&corpus()),
        "--offsets-synth",
        "0",
        "--out",
        s(&b),
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let c = dir.path().join("c.json");
    let o = dcfl(&[
        "assign",
        "--ann",
        s(&corpus()),
        "--offsets-synth",
        "2",
        "--out",
        s(&c),
    ]);
    assert_eq!(code(&o), 0);
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn offset_files_binary_json_and_per_image() {
    let dir = TempDir::new().unwrap();
    let ann = dir.path().join("ann");
    fs::create_dir(&ann).unwrap();
    fs::copy(
        fixtures().join("minimal/ann/scene.txt"),
        ann.join("scene.txt"),
    )
    .unwrap();
    let cfg = RunConfig::default();
    let field = build_prior_field(800.0, 800.0, &cfg.strides, cfg.scale_factor).unwrap();
    let gts = dcfl_core::io::load_annotation_dir(&ann, &cfg.classes).unwrap();
    let boxes: Vec<_> = gts["scene"].iter().map(|g| g.obox).collect();
    // The binary layout stores f32, so the JSON file carries the same
    // f32-rounded values.
    let offsets = synth_offsets_toward_gt(&field, &boxes, 1.5);
    let bin = encode_offsets(&offsets);
    let rounded = dcfl_core::io::decode_offsets(&bin).unwrap();
    let nested: Vec<Vec<[f64; 2]>> = (0..rounded.num_priors())
        .map(|i| rounded.of_prior(i).to_vec())
        .collect();

    let off_bin = dir.path().join("shared.off");
    let off_json = dir.path().join("shared.json");
    let per_image = dir.path().join("per_image");
    fs::create_dir(&per_image).unwrap();
    fs::write(&off_bin, &bin).unwrap();
    fs::write(&off_json, serde_json::to_string(&nested).unwrap()).unwrap();
    fs::write(per_image.join("scene.off"), &bin).unwrap();

    let run = |offsets: &Path, name: &str| {
        let out = dir.path().join(name);
        let o = dcfl(&[
            "assign",
            "--ann",
            s(&ann),
            "--offsets",
            s(offsets),
            "--out",
            s(&out),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        fs::read(out).unwrap()
    };
    let a = run(&off_bin, "a.json");
    assert_eq!(a, run(&off_json, "b.json"));
    assert_eq!(a, run(&per_image, "c.json"));

    let short = dir.path().join("short.off");
    fs::write(&short, &bin[..bin.len() - 8]).unwrap();
    let o = dcfl(&[
        "assign",
        "--ann",
        s(&ann),
        "--offsets",
        s(&short),
        "--out",
        s(&dir.path().join("d.json")),
    ]);
    assert_ne!(code(&o), 0);
}

#[test]
fn predictions_change_assignment() {
    let dir = TempDir::new().unwrap();
    let ann = fixtures().join("minimal/ann");
    let pred = dir.path().join("pred.jsonl");
    // Prior 1213 is the stride-8 prior right of the vehicle; make it confident
    // and well regressed onto the vehicle.
    let mut scores = vec![0.0; 8];
    scores[5] = 0.99;
    let line = serde_json::json!({
        "image_id": "scene", "prior": 1213, "scores": scores,
        "box": [100.0, 100.0, 12.0, 6.0, 0.3]
    });
    fs::write(&pred, format!("{line}\n")).unwrap();
    let out = dir.path().join("o.json");
    let o = dcfl(&[
        "assign",
        "--ann",
        s(&ann),
        "--pred",
        s(&pred),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let doc: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let golden: Value = serde_json::from_str(
        &fs::read_to_string(fixtures().join("minimal/assignments.json")).unwrap(),
    )
    .unwrap();
    assert_ne!(doc, golden);
    assert_eq!(doc["images"][0]["per_gt"][0]["mps"][0], 1213);

    fs::write(&pred, "{\"image_id\": \"scene\", \"prior\": 3}\n").unwrap();
    let o = dcfl(&[
        "assign",
        "--ann",
        s(&ann),
        "--pred",
        s(&pred),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 3);
}

fn standard_scene_dir(dir: &Path) -> (PathBuf, PathBuf) {
    let spec = SceneSpec::standard(100, 11);
    let gts = synth_scene(&spec).unwrap();
    let cfg = RunConfig::default();
    let ann = dir.join("std_ann");
    fs::create_dir(&ann).unwrap();
    fs::write(
        ann.join("standard.txt"),
        serialize_dota(&gts, &cfg.classes).unwrap(),
    )
    .unwrap();
    let config = dir.join("std.toml");
    fs::write(&config, "image_width = 1536\nimage_height = 1536\n").unwrap();
    (ann, config)
}

fn zero_fraction(report: &Value, lo: f64) -> f64 {
    report["scale"]
        .as_array()
        .unwrap()
        .iter()
        .find(|b| b["lo"].as_f64() == Some(lo))
        .unwrap()["zero_positive_fraction"]
        .as_f64()
        .unwrap()
}

#[test]
fn stats_maxiou_then_dcfl() {
    let dir = TempDir::new().unwrap();
    let (ann, config) = standard_scene_dir(dir.path());
    let buckets = "scale=2,8,16,32,64,128";
    let mut reports = Vec::new();
    for assigner in ["maxiou", "dcfl"] {
        let stem = dir.path().join(assigner);
        let o = dcfl(&[
            "stats",
            "--ann",
            s(&ann),
            "--config",
            s(&config),
            "--assigner",
            assigner,
            "--buckets",
            buckets,
            "--out",
            s(&stem),
        ]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let csv = fs::read_to_string(stem.with_extension("csv")).unwrap();
        assert!(csv.starts_with("kind,lo,hi,gt_count"));
        let json: Value =
            serde_json::from_str(&fs::read_to_string(stem.with_extension("json")).unwrap())
                .unwrap();
        reports.push(json);
    }
    let (maxiou, dcfl_report) = (&reports[0], &reports[1]);
    assert!(zero_fraction(maxiou, 2.0) > zero_fraction(maxiou, 64.0));
    for b in dcfl_report["scale"]
        .as_array()
        .unwrap()
        .iter()
        .chain(dcfl_report["angle"].as_array().unwrap())
    {
        if b["gt_count"].as_u64().unwrap() > 0 {
            assert_eq!(b["zero_positive_fraction"].as_f64(), Some(0.0));
        }
    }
    let edges: Vec<f64> = dcfl_report["scale"]
        .as_array()
        .unwrap()
        .iter()
        .map(|b| b["lo"].as_f64().unwrap())
        .collect();
    assert_eq!(edges, vec![2.0, 8.0, 16.0, 32.0, 64.0]);
}

#[test]
fn stats_from_saved_assignments_matches_fresh_run() {
    let dir = TempDir::new().unwrap();
    let saved = dir.path().join("assign.json");
    assert_eq!(
        code(&dcfl(&[
            "assign",
            "--ann",
            s(&corpus()),
            "--out",
            s(&saved)
        ])),
        0
    );
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(
        code(&dcfl(&["stats", "--ann", s(&corpus()), "--out", s(&a)])),
        0
    );
    let o = dcfl(&[
        "stats",
        "--ann",
        s(&corpus()),
        "--assignments",
        s(&saved),
        "--out",
        s(&b),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        fs::read(a.with_extension("json")).unwrap(),
        fs::read(b.with_extension("json")).unwrap()
    );
}

#[test]
fn stats_empty_dir_and_bad_buckets() {
    let dir = TempDir::new().unwrap();
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let stem = dir.path().join("r");
    assert_eq!(
        code(&dcfl(&["stats", "--ann", s(&empty), "--out", s(&stem)])),
        0
    );
    let json: Value =
        serde_json::from_str(&fs::read_to_string(stem.with_extension("json")).unwrap()).unwrap();
    assert_eq!(json["gt_count"], 0);

    for bad in ["scale=8,2", "size=1,2", "scale=a,b", "scale"] {
        let o = dcfl(&[
            "stats",
            "--ann",
            s(&empty),
            "--buckets",
            bad,
            "--out",
            s(&stem),
        ]);
        assert_eq!(code(&o), 2, "{bad}");
    }
}

fn run_eval(gt: &Path, pred: &Path, thrs: &str) -> Value {
    let o = dcfl(&["eval", "--gt", s(gt), "--pred", s(pred), "--iou-thrs", thrs]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

#[test]
fn eval_perfect_and_empty_predictions() {
    let dir = TempDir::new().unwrap();
    let cfg = RunConfig::default();
    let images = dcfl_core::io::load_annotation_dir(&corpus(), &cfg.classes).unwrap();
    let mut lines = String::new();
    for (id, gts) in &images {
        for g in gts {
            let line = serde_json::json!({
                "image_id": id, "class": cfg.classes[g.class_id], "score": 1.0, "box": g.obox,
            });
            lines.push_str(&format!("{line}\n"));
        }
    }
    let perfect = dir.path().join("perfect.jsonl");
    fs::write(&perfect, lines).unwrap();
    let report = run_eval(&corpus(), &perfect, "0.5,0.75,0.95");
    for t in report["map_per_threshold"].as_array().unwrap() {
        assert_eq!(t.as_f64(), Some(1.0));
    }

    let none = dir.path().join("none.jsonl");
    fs::write(&none, "").unwrap();
    let report = run_eval(&corpus(), &none, "0.5");
    for c in report["per_class"].as_array().unwrap() {
        let ap = &c["ap"][0];
        assert!(ap.is_null() || ap.as_f64() == Some(0.0));
    }
    assert_eq!(report["ap_50"].as_f64(), Some(0.0));
}

#[test]
fn eval_micro_scene_to_file() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("metrics.json");
    let micro = fixtures().join("micro");
    let o = dcfl(&[
        "eval",
        "--gt",
        s(&micro.join("gt")),
        "--pred",
        s(&micro.join("dets.jsonl")),
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0);
    let report: Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report["iou_thresholds"].as_array().unwrap().len(), 10);
    let ap50 = report["ap_50"].as_f64().unwrap();
    assert!((ap50 - (51.0 + 25.0 * 0.75 + 25.0 * 4.0 / 6.0) / 101.0).abs() < 1e-12);

    let o = dcfl(&[
        "eval",
        "--gt",
        s(&micro.join("gt")),
        "--pred",
        s(&micro.join("dets.jsonl")),
        "--iou-thrs",
        "1.5",
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn selfcheck_exit_codes() {
    let o = dcfl(&["selfcheck", "--trials", "10"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let table = String::from_utf8_lossy(&o.stdout);
    assert_eq!(table.lines().filter(|l| l.starts_with("PASS")).count(), 5);
    for fault in ["iou", "kld", "gjsd"] {
        let o = dcfl(&["selfcheck", "--trials", "10", "--inject-fault", fault]);
        assert_eq!(code(&o), 1, "{fault}");
    }
}

#[test]
fn jobs_env_var_is_honoured() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("o.json");
    let o = Command::new(env!("CARGO_BIN_EXE_dcfl"))
        .args(["assign", "--ann", s(&corpus()), "--out", s(&out)])
        .env("DCFL_JOBS", "3")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    let o = Command::new(env!("CARGO_BIN_EXE_dcfl"))
        .args(["assign", "--ann", s(&corpus()), "--out", s(&out)])
        .env("DCFL_JOBS", "many")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}
