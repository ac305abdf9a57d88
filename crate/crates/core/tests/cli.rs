//! End-to-end runs of the `taskgrasp` binary: exit codes, output files,
//! and byte-level determinism.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

use taskgrasp::data::{enumerate_triplets, load_triplets, SyntheticWorld};
use taskgrasp::model::EmbeddingModel;

const BIN: &str = env!("CARGO_BIN_EXE_taskgrasp");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small noisy world so the pipeline runs in well under a second.
fn write_spec(dir: &Path) -> PathBuf {
    let path = dir.join("spec.json");
    std::fs::write(&path, r#"{"scenes": 6, "noise_sigma": 0.05, "seed": 7}"#).unwrap();
    path
}

/// synth, train, eval, predict, infer and embed-dump into `dir`.
fn pipeline(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let spec = write_spec(dir);
    let data = dir.join("data");
    let ckpt = dir.join("model.json");
    let report = dir.join("report.json");
    let dump = dir.join("dump");
    ok(&["synth", "--config", s(&spec), "--out", s(&data)]);
    ok(&["train", "--data", s(&data), "--out", s(&ckpt), "--epochs", "5", "--quiet"]);
    ok(&["eval", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&report)]);
    let predict = ok(&[
        "predict",
        "--checkpoint",
        s(&ckpt),
        "--scene",
        s(&data.join("example_scene.json")),
        "--action",
        "knock",
        "--target",
        s(&data.join("example_target.json")),
    ]);
    let infer = ok(&["infer", "--checkpoint", s(&ckpt), "--data", s(&data), "--action", "knock", "--target", "none"]);
    ok(&["embed-dump", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&dump)]);

    let mut files = vec![("predict.stdout".to_string(), predict.into_bytes()), ("infer.stdout".to_string(), infer.into_bytes())];
    for p in [
        data.join("world.json"),
        data.join("triplets.jsonl"),
        data.join("train.jsonl"),
        data.join("test.jsonl"),
        data.join("manifest.json"),
        ckpt.clone(),
        dir.join("model.loss.csv"),
        report.clone(),
        dir.join("report.csv"),
        dump.join("embeddings.csv"),
        dump.join("projection.csv"),
    ] {
        let name = p.strip_prefix(dir).unwrap().display().to_string();
        files.push((name, std::fs::read(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))));
    }
    files
}

#[test]
fn pipeline_is_byte_identical_across_runs() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let first = pipeline(a.path());
    let second = pipeline(b.path());
    assert_eq!(first.len(), second.len());
    for ((name, x), (_, y)) in first.iter().zip(&second) {
        assert!(x == y, "{name} differs between runs");
    }
}

#[test]
fn synth_counts_match_enumeration() {
    let dir = TempDir::new().unwrap();
    let spec = write_spec(dir.path());
    let data = dir.path().join("data");
    let stdout = ok(&["synth", "--config", s(&spec), "--out", s(&data)]);

    let world = SyntheticWorld::from_json(&std::fs::read_to_string(data.join("world.json")).unwrap()).unwrap();
    let expected = enumerate_triplets(&world).unwrap();
    let written = load_triplets(&data.join("triplets.jsonl")).unwrap();
    assert_eq!(written.triplets.len(), expected.triplets.len());
    let train = load_triplets(&data.join("train.jsonl")).unwrap().triplets.len();
    let test = load_triplets(&data.join("test.jsonl")).unwrap().triplets.len();
    assert_eq!(train + test, expected.triplets.len());
    assert!(stdout.contains(&expected.triplets.len().to_string()), "counts missing from: {stdout}");

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["format"], "taskgrasp-dataset");
    assert_eq!(manifest["triplets"], expected.triplets.len());
    assert_eq!(manifest["train"], train);
    assert_eq!(manifest["test"], test);
}

#[test]
fn zero_learning_rate_checkpoint_is_the_initialization() {
    let dir = TempDir::new().unwrap();
    let spec = write_spec(dir.path());
    let data = dir.path().join("data");
    ok(&["synth", "--config", s(&spec), "--out", s(&data)]);
    let config = dir.path().join("lr0.toml");
    std::fs::write(&config, "learning_rate = 0.0\nepochs = 3\nseed = 5\n").unwrap();
    let ckpt = dir.path().join("m.json");
    ok(&["train", "--data", s(&data), "--config", s(&config), "--out", s(&ckpt), "--quiet"]);

    let set = load_triplets(&data.join("train.jsonl")).unwrap();
    let init = EmbeddingModel::init(set.header.model_header(64, 32, 5)).unwrap();
    assert_eq!(std::fs::read_to_string(&ckpt).unwrap(), init.save_json().unwrap());
    let trace = std::fs::read_to_string(dir.path().join("m.loss.csv")).unwrap();
    assert_eq!(trace.lines().count(), 1 + 3, "header plus one row per epoch");
}

#[test]
fn embed_dump_has_one_row_per_observation_and_action() {
    let dir = TempDir::new().unwrap();
    let spec = write_spec(dir.path());
    let data = dir.path().join("data");
    let ckpt = dir.path().join("m.json");
    let dump = dir.path().join("dump");
    ok(&["synth", "--config", s(&spec), "--out", s(&data)]);
    ok(&["train", "--data", s(&data), "--out", s(&ckpt), "--epochs", "1", "--quiet"]);
    ok(&["embed-dump", "--checkpoint", s(&ckpt), "--data", s(&data), "--out", s(&dump)]);

    let set = load_triplets(&data.join("triplets.jsonl")).unwrap();
    let heads: BTreeSet<_> = set
        .triplets
        .iter()
        .map(|t| (t.scene, t.tool.entity_id.clone(), t.tool.grasp_region_id))
        .collect();
    let tails: BTreeSet<_> = set
        .triplets
        .iter()
        .map(|t| (if t.target.is_null() { None } else { Some(t.scene) }, t.target.entity_id.clone()))
        .collect();
    let expected = heads.len() + tails.len() + set.header.actions.len();
    for file in ["embeddings.csv", "projection.csv"] {
        let rows = std::fs::read_to_string(dump.join(file)).unwrap().lines().count() - 1;
        assert_eq!(rows, expected, "{file}");
    }
}

#[test]
fn predict_output_is_versioned_and_carries_a_pose_with_calibration() {
    let dir = TempDir::new().unwrap();
    let spec = write_spec(dir.path());
    let data = dir.path().join("data");
    let ckpt = dir.path().join("m.json");
    ok(&["synth", "--config", s(&spec), "--out", s(&data)]);
    ok(&["train", "--data", s(&data), "--out", s(&ckpt), "--epochs", "2", "--quiet"]);
    let scene = data.join("example_scene.json");
    let calibration = dir.path().join("camera.json");
    std::fs::write(
        &calibration,
        r#"{"fx": 600, "fy": 600, "cx": 320, "cy": 240,
            "extrinsic": [1,0,0,0.1, 0,1,0,0, 0,0,1,0.5, 0,0,0,1]}"#,
    )
    .unwrap();

    let plain: serde_json::Value =
        serde_json::from_str(&ok(&["predict", "--checkpoint", s(&ckpt), "--scene", s(&scene), "--action", "hand-over"])).unwrap();
    assert_eq!(plain["format"], "taskgrasp-prediction");
    assert_eq!(plain["version"], 1);
    assert_eq!(plain["action"], "hand-over");
    assert!(plain["best"].is_object());
    assert!(plain["robot_pose"].is_null());

    let posed: serde_json::Value = serde_json::from_str(&ok(&[
        "predict",
        "--checkpoint",
        s(&ckpt),
        "--scene",
        s(&scene),
        "--action",
        "hand-over",
        "--calibration",
        s(&calibration),
        "--depth",
        "0.8",
    ]))
    .unwrap();
    assert!(posed["robot_pose"].is_object(), "no pose in {posed}");
    assert_eq!(posed["best"], plain["best"]);
}

#[test]
fn oracle_eval_on_a_noiseless_world_is_exact() {
    let dir = TempDir::new().unwrap();
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, r#"{"scenes": 8, "noise_sigma": 0.0}"#).unwrap();
    let data = dir.path().join("data");
    let report = dir.path().join("oracle.json");
    ok(&["synth", "--config", s(&spec), "--out", s(&data), "--mode", "object-wise"]);
    ok(&["eval", "--oracle", s(&data.join("world.json")), "--data", s(&data), "--out", s(&report)]);
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(r["task_specific_accuracy"], 1.0);
    assert_eq!(r["task_agnostic_accuracy"], 1.0);
    assert!(dir.path().join("oracle.csv").exists());
}

#[test]
fn unknown_action_exits_2_and_lists_the_vocabulary() {
    let dir = TempDir::new().unwrap();
    let spec = write_spec(dir.path());
    let data = dir.path().join("data");
    let ckpt = dir.path().join("m.json");
    ok(&["synth", "--config", s(&spec), "--out", s(&data)]);
    ok(&["train", "--data", s(&data), "--out", s(&ckpt), "--epochs", "1", "--quiet"]);
    let out = run(&["predict", "--checkpoint", s(&ckpt), "--scene", s(&data.join("example_scene.json")), "--action", "juggle"]);
    assert_eq!(code(&out), 2);
    let err = String::from_utf8_lossy(&out.stderr);
    for name in ["hand-over", "knock", "clean", "cut"] {
        assert!(err.contains(name), "{name} missing from: {err}");
    }
    assert!(out.stdout.is_empty());
}

#[test]
fn invalid_spec_exits_2_and_names_the_field() {
    let dir = TempDir::new().unwrap();
    let spec = dir.path().join("bad.json");
    std::fs::write(&spec, r#"{"scenes": 0}"#).unwrap();
    let out_dir = dir.path().join("data");
    let out = run(&["synth", "--config", s(&spec), "--out", s(&out_dir)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("scenes"));
    assert!(!out_dir.join("triplets.jsonl").exists());
}

#[test]
fn bad_training_config_exits_2() {
    let dir = TempDir::new().unwrap();
    let spec = write_spec(dir.path());
    let data = dir.path().join("data");
    ok(&["synth", "--config", s(&spec), "--out", s(&data)]);
    let config = dir.path().join("c.toml");
    std::fs::write(&config, "learning_rate = -1.0\n").unwrap();
    let ckpt = dir.path().join("m.json");
    let out = run(&["train", "--data", s(&data), "--config", s(&config), "--out", s(&ckpt)]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
    assert!(!ckpt.exists());
}

#[test]
fn missing_checkpoint_exits_3_without_writing_a_report() {
    let dir = TempDir::new().unwrap();
    let spec = write_spec(dir.path());
    let data = dir.path().join("data");
    ok(&["synth", "--config", s(&spec), "--out", s(&data)]);
    let report = dir.path().join("r.json");
    let out = run(&["eval", "--checkpoint", s(&dir.path().join("absent.json")), "--data", s(&data), "--out", s(&report)]);
    assert_eq!(code(&out), 3);
    assert!(!report.exists());
    assert!(!dir.path().join("r.csv").exists());
}

#[test]
fn malformed_triplets_exit_4_without_a_checkpoint() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("broken.jsonl");
    std::fs::write(&data, "{\"not\": \"a header\"}\n{garbage\n").unwrap();
    let ckpt = dir.path().join("m.json");
    let out = run(&["train", "--data", s(&data), "--out", s(&ckpt)]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!ckpt.exists());
    assert!(!dir.path().join("m.loss.csv").exists());
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(code(&run(&["train"])), 2);
    assert_eq!(code(&run(&["frobnicate"])), 2);
    // predict calibration without a depth is rejected by the parser
    assert_eq!(
        code(&run(&["predict", "--checkpoint", "m", "--scene", "s", "--action", "knock", "--calibration", "c"])),
        2
    );
}

#[test]
fn diverging_training_exits_5() {
    let dir = TempDir::new().unwrap();
    let spec = write_spec(dir.path());
    let data = dir.path().join("data");
    ok(&["synth", "--config", s(&spec), "--out", s(&data)]);
    let config = dir.path().join("c.json");
    std::fs::write(&config, r#"{"learning_rate": 1e300, "epochs": 20}"#).unwrap();
    let ckpt = dir.path().join("m.json");
    let out = run(&["train", "--data", s(&data), "--config", s(&config), "--out", s(&ckpt), "--quiet"]);
    assert_eq!(code(&out), 5, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!ckpt.exists());
}
