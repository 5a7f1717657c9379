use std::path::Path;
use std::process::{Command, Output};

fn carft(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_carft"))
        .arg("--out-dir")
        .arg(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

fn small_pretrain(dir: &Path) {
    let out = carft(dir, &["pretrain", "--n-train", "256", "--n-val", "128", "--n-test", "128"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn pretrain_writes_its_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    small_pretrain(dir.path());
    for name in [
        "pretrained.ckpt",
        "zeroshot.ckpt",
        "train.csv",
        "val.csv",
        "id_test.csv",
        "ood_test.csv",
        "templates.tsv",
        "classes.txt",
        "pretrain_report.csv",
    ] {
        assert!(dir.path().join(name).is_file(), "missing {name}");
    }
}

#[test]
fn sweep_alpha_writes_one_row_per_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_pretrain(d);
    let out = carft(
        d,
        &[
            "sweep-alpha",
            "--ckpt-in",
            &path(d, "pretrained.ckpt"),
            "--data",
            &path(d, "train.csv"),
            "--data-id",
            &path(d, "id_test.csv"),
            "--data-ood",
            &path(d, "ood_test.csv"),
            "--templates",
            &path(d, "templates.tsv"),
            "--classes",
            &path(d, "classes.txt"),
            "--alphas",
            "0,1",
            "--epochs",
            "1",
        ],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(d.join("alpha_sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "alpha,id_acc,ood_acc");
    assert_eq!(lines.len(), 3);
}

#[test]
fn missing_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = carft(d, &["eval", "--ckpt", &path(d, "nope.ckpt"), "--data-id", &path(d, "nope.csv")]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope.ckpt"));
}

#[test]
fn corrupt_checkpoint_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("bad.ckpt"), b"not a checkpoint").unwrap();
    let out = carft(d, &["eval", "--ckpt", &path(d, "bad.ckpt"), "--data-id", &path(d, "x.csv")]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn half_given_prompts_are_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_pretrain(d);
    let out = carft(
        d,
        &[
            "finetune",
            "--method",
            "car-ft",
            "--ckpt-in",
            &path(d, "pretrained.ckpt"),
            "--data",
            &path(d, "train.csv"),
            "--templates",
            &path(d, "templates.tsv"),
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_method_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = carft(dir.path(), &["finetune", "--method", "sgd", "--ckpt-in", "a", "--data", "b"]);
    assert_eq!(out.status.code(), Some(2));
}
