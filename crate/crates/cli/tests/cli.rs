use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn trialign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_trialign"))
        .args(args)
        .env("TRIALIGN_LOG", "off")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Value {
    let out = trialign(args);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{args:?} failed: {stdout}");
    serde_json::from_str(&stdout).unwrap_or_else(|e| panic!("stdout is not JSON ({e}): {stdout}"))
}

fn err(args: &[&str]) -> Value {
    let out = trialign(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    let v: Value = serde_json::from_slice(&out.stdout).expect("structured error");
    assert!(v["message"].is_string());
    v
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthesizes a small labeled dataset into `dir`.
fn synth(dir: &Path) {
    let cfg = fixture("small.json");
    ok(&["synth", "--config", s(&cfg), "--seed", "1", "--out", s(dir)]);
}

fn train(dir: &Path, out: &str, seed: &str) -> Value {
    let cfg = fixture("small.json");
    let manifest = dir.join("train.jsonl");
    let out = dir.join(out);
    ok(&[
        "train",
        "--config",
        s(&cfg),
        "--seed",
        seed,
        "--manifest",
        s(&manifest),
        "--out",
        s(&out),
    ])
}

#[test]
fn training_twice_gives_identical_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let a = train(dir.path(), "a", "7");
    let b = train(dir.path(), "b", "7");
    assert_eq!(a["epochs"], 4);
    let bytes = |v: &Value, key: &str| std::fs::read(v[key].as_str().unwrap()).unwrap();
    assert_eq!(bytes(&a, "checkpoint"), bytes(&b, "checkpoint"));
    assert_eq!(bytes(&a, "report"), bytes(&b, "report"));
    let metrics = String::from_utf8(bytes(&a, "metrics")).unwrap();
    let lines: Vec<Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[3]["epoch"], 4);
    let c = train(dir.path(), "c", "8");
    assert_ne!(bytes(&a, "checkpoint"), bytes(&c, "checkpoint"));
}

#[test]
fn train_without_seed_is_a_structured_error() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let manifest = dir.path().join("train.jsonl");
    let e = err(&["train", "--manifest", s(&manifest), "--out", s(dir.path())]);
    assert_eq!(e["code"], "invalid_config");
}

#[test]
fn evaluation_workflow() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let trained = train(dir.path(), "run", "3");
    let ckpt = trained["checkpoint"].as_str().unwrap();
    let cfg = fixture("small.json");
    let test = dir.path().join("test.jsonl");
    let templates = dir.path().join("templates.txt");

    let report = ok(&[
        "eval",
        "--checkpoint",
        ckpt,
        "--manifest",
        s(&test),
        "--templates",
        s(&templates),
    ]);
    let bench = &report["benchmarks"][0];
    assert_eq!(bench["name"], "test");
    assert_eq!(bench["num_shapes"], 18);
    assert_eq!(bench["num_classes"], 3);
    let top1 = bench["top1"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&top1));
    assert_eq!(bench["top3"], 1.0);

    let train_manifest = dir.path().join("train.jsonl");
    let probe = ok(&[
        "probe",
        "--config",
        s(&cfg),
        "--checkpoint",
        ckpt,
        "--manifest",
        s(&train_manifest),
        "--test-manifest",
        s(&test),
    ]);
    let curve: Vec<u64> = probe["probe"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| p["shots"].as_u64().unwrap())
        .collect();
    assert_eq!(curve, [1, 2]);
    assert_eq!(probe["probe"][0]["per_seed"].as_array().unwrap().len(), 3);

    let index = dir.path().join("shapes.idx");
    let built = ok(&[
        "index",
        "--checkpoint",
        ckpt,
        "--manifest",
        s(&test),
        "--out",
        s(&index),
    ]);
    assert_eq!(built["rows"], 18);
    assert_eq!(built["dim"], 16);
    let hits = ok(&[
        "retrieve",
        "--index",
        s(&index),
        "-k",
        "3",
        r#"{"shape_id": "test-00_0000"}"#,
    ]);
    assert_eq!(hits["results"][0]["id"], "test-00_0000");
    assert_eq!(hits["results"].as_array().unwrap().len(), 3);
}

#[test]
fn eval_with_mismatched_class_vectors_fails_with_dim_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path());
    let trained = train(dir.path(), "run", "3");
    let vectors = dir.path().join("classes.json");
    std::fs::write(
        &vectors,
        r#"{"class00": [1, 0, 0], "class01": [0, 1, 0], "class02": [0, 0, 1]}"#,
    )
    .unwrap();
    let test = dir.path().join("test.jsonl");
    let e = err(&[
        "eval",
        "--checkpoint",
        trained["checkpoint"].as_str().unwrap(),
        "--manifest",
        s(&test),
        "--class-vectors",
        s(&vectors),
    ]);
    assert_eq!(e["code"], "dim_mismatch");
}

#[test]
fn joint_retrieval_returns_the_bisector() {
    let dir = tempfile::tempdir().unwrap();
    let index = dir.path().join("three.idx");
    ok(&[
        "index",
        "--vectors",
        s(&fixture("three_candidates.json")),
        "--out",
        s(&index),
    ]);
    let hits = ok(&[
        "retrieve",
        "--index",
        s(&index),
        "--joint",
        "-k",
        "3",
        s(&fixture("a.json")),
        s(&fixture("b.json")),
    ]);
    let results = hits["results"].as_array().unwrap();
    assert_eq!(results[0]["id"], "bisector");
    assert!((results[0]["score"].as_f64().unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    assert_eq!(results.len(), 3);

    let e = err(&["retrieve", "--index", s(&index), "[1.0, 0.0, 0.0]"]);
    assert_eq!(e["code"], "dim_mismatch");
    let e = err(&["retrieve", "--index", s(&index), "--joint", "[1.0, 0.0]"]);
    assert_eq!(e["code"], "usage");
}

#[test]
fn prepare_samples_meshes_into_a_loadable_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("src");
    std::fs::create_dir(&src).unwrap();
    std::fs::write(
        src.join("tri.obj"),
        "v 0 0 0 1 0 0\nv 1 0 0 0 1 0\nv 0 1 0 0 0 1\nv 0 0 1 1 1 1\nf 1 2 3\nf 1 2 4\n",
    )
    .unwrap();
    std::fs::write(
        src.join("cache.json"),
        r#"{"text": {"a tetra": [0.1, 0.2]}, "image": {"tet:v0": [1.0, 0.0, 0.5]}}"#,
    )
    .unwrap();
    std::fs::write(
        src.join("m.jsonl"),
        concat!(
            "{\"trialign_manifest\": 1, \"cache\": \"cache.json\"}\n",
            "{\"id\": \"tet\", \"mesh\": {\"path\": \"tri.obj\", \"num_points\": 64}, ",
            "\"text_candidates\": {\"caption\": [\"a tetra\"]}, \"image_view_keys\": [\"tet:v0\"], ",
            "\"dataset_tag\": \"abo\", \"label\": \"tetra\"}\n"
        ),
    )
    .unwrap();
    let out = dir.path().join("out/prepared.jsonl");
    let sidecar = dir.path().join("out/points");
    let r = ok(&[
        "prepare",
        "--manifest",
        s(&src.join("m.jsonl")),
        "--out",
        s(&out),
        "--num-points",
        "32",
        "--sidecar-dir",
        s(&sidecar),
    ]);
    assert_eq!(r["records"], 1);
    assert_eq!(r["labeled"], 1);
    assert_eq!(r["image_dim"], 3);
    let data = trialign_core::datamodel::load_manifest(&out).unwrap();
    assert_eq!(data.manifest.records[0].points.len(), 32);
    assert_eq!(data.manifest.label_of("tet"), Some("tetra"));
    assert!(sidecar.join("tet.pts").exists());

    let e = err(&["prepare", "--manifest", s(&src.join("missing.jsonl")), "--out", s(&out)]);
    assert_eq!(e["code"], "io");
}

#[test]
fn usage_errors_are_structured() {
    let e = err(&["retrieve"]);
    assert_eq!(e["code"], "usage");
    let out = trialign(&["bogus"]);
    assert_eq!(out.status.code(), Some(2));
}
