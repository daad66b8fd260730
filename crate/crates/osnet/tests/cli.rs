//! Subcommands end to end on a miniature dataset.

use std::fs;
use std::path::Path;
use std::process::Command;

use osnet::checkpoint::Checkpoint;
use osnet::cli::run;
use osnet::metrics::EvalReport;
use osnet::pgm;
use osnet_core::nn::{build_supernet, ModelSpec};

const DATA: &str = r#"{"train_ids": 4, "test_ids": 3, "images_per_id": 4, "cameras": 2, "height": 32, "width": 16}"#;
const MODEL: &str = r#"{"width_multiplier": 0.0625, "streams": 2, "feature_dim": 16, "base_height": 32, "base_width": 16}"#;

fn osnet(args: &[&str]) -> osnet::Result<()> {
    run(std::iter::once("osnet").chain(args.iter().copied()))
}

fn write(path: &Path, text: &str) -> String {
    fs::write(path, text).unwrap();
    path.to_str().unwrap().to_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Generates the miniature dataset under `dir/data`.
fn dataset(dir: &Path) -> String {
    let cfg = write(&dir.join("data.json"), DATA);
    let out = dir.join("data");
    osnet(&["gen-data", "--config", &cfg, "--out", s(&out)]).unwrap();
    s(&out).to_owned()
}

#[test]
fn train_eval_and_actmap_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = dataset(d);
    let cfg = write(
        &d.join("train.json"),
        &format!(r#"{{"model": {MODEL}, "train": {{"epochs": 3, "batch_size": 8, "checkpoint_interval": 2}}}}"#),
    );
    let run_a = d.join("a");
    osnet(&["train", "--config", &cfg, "--data", &data, "--seed", "4", "--out", s(&run_a)]).unwrap();
    for f in ["config.json", "train.csv", "model.ckpt", "checkpoints/epoch_0002.ckpt"] {
        assert!(run_a.join(f).exists(), "{f} missing");
    }
    let csv = fs::read_to_string(run_a.join("train.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("epoch,lr,loss,accuracy\n0,0.065,"));
    let resolved: serde_json::Value = serde_json::from_str(&fs::read_to_string(run_a.join("config.json")).unwrap()).unwrap();
    assert_eq!(resolved["train"]["seed"], 4);
    assert_eq!(resolved["model"]["num_classes"], 4);
    assert_eq!(resolved["data"], data.as_str());

    let run_b = d.join("b");
    osnet(&["train", "--config", &cfg, "--data", &data, "--seed", "4", "--out", s(&run_b)]).unwrap();
    assert_eq!(fs::read(run_b.join("train.csv")).unwrap(), csv.as_bytes());
    assert_eq!(fs::read(run_b.join("model.ckpt")).unwrap(), fs::read(run_a.join("model.ckpt")).unwrap());
    let run_c = d.join("c");
    osnet(&["train", "--config", &cfg, "--data", &data, "--seed", "5", "--out", s(&run_c)]).unwrap();
    assert_ne!(fs::read(run_c.join("train.csv")).unwrap(), csv.as_bytes());

    let ckpt = run_a.join("model.ckpt");
    let ev = d.join("eval");
    osnet(&["eval", "--checkpoint", s(&ckpt), "--data", &data, "--out", s(&ev)]).unwrap();
    let report: EvalReport = serde_json::from_str(&fs::read_to_string(ev.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report.queries, 6);
    assert!(report.r1 <= report.r5 && report.r5 <= report.r10);
    assert!((0.0..=1.0).contains(&report.map));

    let maps = d.join("maps");
    osnet(&["actmap", "--checkpoint", s(&ckpt), "--data", &data, "--out", s(&maps), "--count", "3"]).unwrap();
    let mut pgms: Vec<_> = fs::read_dir(&maps)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    pgms.sort();
    assert_eq!(pgms.len(), 3);
    assert!(pgms[0].file_name().unwrap().to_str().unwrap().starts_with("query_0000_id4_cam0"));
    for p in pgms {
        let img = pgm::read(&p).unwrap();
        assert_eq!((img.width, img.height), (1, 2));
        let norm: f64 = img.values().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-4, "{}: norm {norm}", p.display());
    }
}

#[test]
fn search_then_derive() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = dataset(d);
    let cfg = write(
        &d.join("search.json"),
        &format!(r#"{{"model": {MODEL}, "search": {{"train": {{"epochs": 2, "batch_size": 8}}}}}}"#),
    );
    let out = d.join("search");
    osnet(&["search", "--config", &cfg, "--data", &data, "--out", s(&out)]).unwrap();
    let csv = fs::read_to_string(out.join("search.csv")).unwrap();
    let header = csv.lines().next().unwrap();
    assert_eq!(header.split(',').count(), 4 + 24);
    assert!(header.starts_with("epoch,temperature,lr,loss,b0_OS,b0_OS_IN_in"));
    assert_eq!(csv.lines().nth(1).unwrap().split(',').nth(1), Some("10"));

    let derived = d.join("derived");
    osnet(&["derive", "--checkpoint", s(&out.join("supernet.ckpt")), "--out", s(&derived)]).unwrap();
    let names: Vec<String> = serde_json::from_str(&fs::read_to_string(derived.join("architecture.json")).unwrap()).unwrap();
    assert_eq!(names.len(), 6);
    let from_search: Vec<String> = serde_json::from_str(&fs::read_to_string(out.join("architecture.json")).unwrap()).unwrap();
    assert_eq!(names, from_search);

    let model = osnet(&["derive", "--checkpoint", s(&d.join("data/train/00000.bin"))]);
    assert!(model.is_err());
}

#[test]
fn derive_on_uniform_logits_selects_plain_blocks() {
    let dir = tempfile::tempdir().unwrap();
    let spec: ModelSpec = serde_json::from_str(MODEL).unwrap();
    let supernet = build_supernet(&ModelSpec { num_classes: 2, ..spec }, 0).unwrap();
    let path = dir.path().join("zero.ckpt");
    Checkpoint::from_model(&supernet).write(&path).unwrap();
    let out = dir.path().join("d");
    osnet(&["derive", "--checkpoint", s(&path), "--out", s(&out)]).unwrap();
    let names: Vec<String> = serde_json::from_str(&fs::read_to_string(out.join("architecture.json")).unwrap()).unwrap();
    assert_eq!(names, ["OS"; 6]);
}

#[test]
fn count_and_gradcheck_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("count");
    osnet(&["count", "--grid", "--out", s(&out)]).unwrap();
    let csv = fs::read_to_string(out.join("count.csv")).unwrap();
    assert_eq!(csv.lines().count(), 8);
    assert!(csv.lines().nth(1).unwrap().starts_with("1.0,1.0,256,128,"));

    let out = dir.path().join("grad");
    osnet(&["gradcheck", "--scope", "ops", "--seed", "3", "--out", s(&out)]).unwrap();
    let first = fs::read(out.join("gradcheck.csv")).unwrap();
    osnet(&["gradcheck", "--scope", "ops", "--seed", "3", "--out", s(&out)]).unwrap();
    assert_eq!(fs::read(out.join("gradcheck.csv")).unwrap(), first);
    let text = String::from_utf8(first).unwrap();
    assert!(text.lines().skip(1).all(|l| l.ends_with(",true")), "{text}");
}

#[test]
fn config_errors_name_the_key_and_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let bad = write(&dir.path().join("bad.json"), r#"{"train": {"schedule": {"kind": "cosine", "decay": 1}}}"#);
    let err = osnet(&["train", "--config", &bad, "--data", &data, "--out", s(&dir.path().join("x"))]).unwrap_err();
    assert!(err.is_config());
    assert!(err.to_string().contains("`train.schedule"), "{err}");

    let status = Command::new(env!("CARGO_BIN_EXE_osnet"))
        .args(["-q", "train", "--config", &bad, "--data", &data, "--out"])
        .arg(dir.path().join("y"))
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&status.stderr).contains("train.schedule"));

    let no_data = Command::new(env!("CARGO_BIN_EXE_osnet")).args(["-q", "train", "--out"]).arg(dir.path().join("z")).output().unwrap();
    assert_eq!(no_data.status.code(), Some(2));
    let unknown = Command::new(env!("CARGO_BIN_EXE_osnet")).args(["frobnicate"]).output().unwrap();
    assert_eq!(unknown.status.code(), Some(2));
}

#[test]
fn diverging_training_leaves_a_diagnostic_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = dataset(dir.path());
    let cfg = write(
        &dir.path().join("hot.json"),
        &format!(r#"{{"model": {MODEL}, "train": {{"epochs": 20, "batch_size": 8, "base_lr": 1e200, "weight_decay": 0}}}}"#),
    );
    let out = dir.path().join("run");
    let status = Command::new(env!("CARGO_BIN_EXE_osnet"))
        .args(["-q", "train", "--config", &cfg, "--data", &data, "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(1), "{}", String::from_utf8_lossy(&status.stderr));
    let diag = Checkpoint::read(&out.join("diagnostic.ckpt")).unwrap();
    let msg = diag.header.meta["error"].as_str().unwrap();
    assert!(msg.contains("epoch"), "{msg}");
    let bad: Vec<_> = diag.header.tensors.iter().zip(&diag.data).filter(|(_, d)| d.iter().any(|v| !v.is_finite())).map(|(e, _)| format!("{} {:?}", e.name, e.role)).collect();
    assert!(bad.is_empty(), "{msg}: {bad:?}");
    assert!(!out.join("model.ckpt").exists());
}
