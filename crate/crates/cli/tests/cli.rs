use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn il(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_il")).args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_dataset(dir: &Path) {
    let spec = dir.join("spec.json");
    fs::write(&spec, r#"{"identities_per_domain": 6, "images_per_identity": 4}"#).unwrap();
    let out = il(&["gen", "--spec", path(&spec), "--out", path(&dir.join("data"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn write_config(dir: &Path, train: &str) -> std::path::PathBuf {
    let p = dir.join("config.json");
    fs::write(&p, format!(r#"{{"train": {{"p": 4, "k": 2, "iters_per_epoch": 2, {train}}}}}"#)).unwrap();
    p
}

#[test]
fn gen_writes_manifest_and_data() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path());
    let manifest = fs::read_to_string(dir.path().join("data/manifest.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(v["schema_version"], 1);
    assert_eq!(v["domains"].as_array().unwrap().len(), 4);
    assert_eq!(&fs::read(dir.path().join("data/data.bin")).unwrap()[..6], b"SYNDG1");
}

#[test]
fn zero_epochs_gives_one_record_and_train_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path());
    let data = dir.path().join("data");

    let cfg = write_config(dir.path(), r#""epochs": 0"#);
    let run0 = dir.path().join("run0");
    assert!(il(&["train", "--config", path(&cfg), "--data", path(&data), "--out", path(&run0)]).status.success());
    let metrics = fs::read_to_string(run0.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 1);
    assert!(run0.join("checkpoint.bin").exists());
    let resolved: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run0.join("resolved-config.json")).unwrap()).unwrap();
    assert_eq!(resolved["train"]["lr"], 3.5e-4);

    let cfg = write_config(dir.path(), r#""epochs": 2, "mode": "il""#);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = il(&["train", "--config", path(&cfg), "--data", path(&data), "--out", path(out), "--seed", "7"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let ma = fs::read(a.join("metrics.jsonl")).unwrap();
    assert_eq!(ma, fs::read(b.join("metrics.jsonl")).unwrap());
    assert_eq!(String::from_utf8(ma).unwrap().lines().count(), 2);

    let o = il(&["eval", "--checkpoint", path(&a.join("checkpoint.bin")), "--data", path(&data), "--domain", "target"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let last: serde_json::Value =
        serde_json::from_str(fs::read_to_string(a.join("metrics.jsonl")).unwrap().lines().last().unwrap()).unwrap();
    assert_eq!(v["mAP"], last["map_target"]);
    assert_eq!(v["rank1"], last["rank1_target"]);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path());
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"train": {"learning_rate": 1.0}}"#).unwrap();
    let o = il(&["train", "--config", path(&cfg), "--data", path(&dir.path().join("data")), "--out", path(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(2));
    // more identities per batch than the domain holds
    fs::write(&cfg, r#"{"train": {"p": 50, "epochs": 1}}"#).unwrap();
    let o = il(&["train", "--config", path(&cfg), "--data", path(&dir.path().join("data")), "--out", path(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn style_diag_writes_csv_and_summary() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path());
    let out = dir.path().join("diag");
    let o = il(&["style-diag", "--data", path(&dir.path().join("data")), "--out", path(&out), "--draws", "200"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("styles.csv")).unwrap();
    assert!(csv.starts_with("method,sample,mu_1,"));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("style-summary.json")).unwrap()).unwrap();
    for m in ["original", "isg", "mixstyle", "dsu", "padain"] {
        assert!(summary["methods"][m]["mean_abs_pearson"].is_number(), "{m}");
    }
}

#[test]
fn gradcheck_passes() {
    let o = il(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(!String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn ablate_writes_rows_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    small_dataset(dir.path());
    let cfg = write_config(dir.path(), r#""epochs": 1"#);
    let out = dir.path().join("abl");
    let o = il(&[
        "ablate", "--suite", "components", "--seeds", "2", "--out", path(&out), "--config", path(&cfg), "--data",
        path(&dir.path().join("data")),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = fs::read_to_string(out.join("ablation-components.csv")).unwrap();
    let variants: Vec<&str> = rows.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(variants, ["baseline", "baseline", "aug+isg", "aug+isg", "il+isg", "il+isg"]);
    assert!(out.join("ablation-components-summary.csv").exists());
    assert_eq!(il(&["ablate", "--suite", "nope", "--out", path(&out)]).status.code(), Some(2));
}
