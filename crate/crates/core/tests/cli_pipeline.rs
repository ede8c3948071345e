//! End-to-end runs of the `tpnt` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tpnt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tpnt"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn tpnt")
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status,
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

/// Column `name` of the first data row of a CSV file.
fn csv_field(path: &Path, name: &str) -> String {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    let i = header.iter().position(|h| *h == name).unwrap_or_else(|| panic!("{name} not in {header:?}"));
    row[i].to_string()
}

const SMALL: &str = "\
[data]
seed = 3
teacher_count = 400
pool_count = 60
eval_count = 200

[teacher]
channels = 8
epochs = 12
gate = 0.9

[train]
samples = 20
epochs = 6
distill_pool = 64
probe_size = 16
";

#[test]
fn gen_data_pretrain_transplant_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("run.ini"), SMALL).unwrap();

    ok(&tpnt(d, &["gen-data", "-c", "run.ini", "-o", "data"]));
    for split in ["teacher", "pool", "eval", "reference"] {
        assert!(d.join("data/data").join(split).is_dir(), "{split}");
    }
    let from_dir = ["--set", "data.dir=data/data"];

    let teacher = tpnt(d, &[&["pretrain", "-c", "run.ini", "-o", "teacher"][..], &from_dir].concat());
    ok(&teacher);
    ok(&tpnt(d, &["pretrain", "-c", "run.ini", "-o", "student", "--set", "data.family=ring"]));
    assert!(d.join("teacher/model.tpnt").is_file() && d.join("teacher/accuracy.csv").is_file());

    let link = [
        "--set",
        "teacher.path=teacher/model.tpnt",
        "--set",
        "student.path=student/model.tpnt",
    ];
    ok(&tpnt(d, &[&["transplant", "-c", "run.ini", "-o", "trained"][..], &from_dir, &link].concat()));
    ok(&tpnt(
        d,
        &[&["transplant", "-c", "run.ini", "-o", "untrained", "--set", "train.epochs=0"][..], &from_dir, &link].concat(),
    ));
    let train_csv = fs::read_to_string(d.join("trained/train.csv")).unwrap();
    assert_eq!(train_csv.lines().count(), 7);
    assert_eq!(csv_field(&d.join("trained/link.csv"), "method"), "back-distill");

    let eval_of = |name: &str| -> f64 {
        let model = format!("eval.model={name}/model.tpnt");
        ok(&tpnt(
            d,
            &[&["evaluate", "-c", "run.ini", "-o", &format!("{name}-eval"), "--set", &model][..], &from_dir].concat(),
        ));
        let path = d.join(format!("{name}-eval/eval.csv"));
        assert_eq!(csv_field(&path, "task"), "ring.cls");
        assert_eq!(csv_field(&path, "count"), "200");
        csv_field(&path, "value").parse().unwrap()
    };
    let untrained = eval_of("untrained");
    let trained = eval_of("trained");
    // a random adapter carries no label information
    assert!((untrained - 0.5).abs() <= 0.25, "untrained error {untrained}");
    assert!(trained < untrained - 0.1, "trained {trained} vs untrained {untrained}");
    let recorded: f64 = csv_field(&d.join("trained/link.csv"), "after").parse().unwrap();
    assert!((recorded - trained).abs() < 1e-9);

    ok(&tpnt(
        d,
        &[&["export-features", "-c", "run.ini", "-o", "features", "--set", "eval.model=trained/model.tpnt"][..], &from_dir]
            .concat(),
    ));
    let pca = fs::read_to_string(d.join("features/features_pca.csv")).unwrap();
    assert_eq!(pca.lines().count(), 201);
    assert!(d.join("features/relu_stats.csv").is_file());
    // every run records the resolved config
    let saved = fs::read_to_string(d.join("trained/config.ini")).unwrap();
    assert!(saved.contains("path = teacher/model.tpnt"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bad.ini"), "[data]\nseed = 1\n[train]\nepoch = 3\n").unwrap();
    let bad = tpnt(d, &["pretrain", "-c", "bad.ini"]);
    assert_eq!(bad.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("line 4"));

    let missing = tpnt(d, &["evaluate", "--set", "eval.model=nope.tpnt"]);
    assert_eq!(missing.status.code(), Some(1));

    let weak = tpnt(
        d,
        &[
            "pretrain",
            "-o",
            "weak",
            "--set",
            "data.teacher_count=20",
            "--set",
            "teacher.epochs=1",
            "--set",
            "teacher.channels=2",
            "--set",
            "teacher.gate=1",
        ],
    );
    assert_eq!(weak.status.code(), Some(2));
    // the weak model is still written for inspection
    assert!(d.join("weak/model.tpnt").is_file());

    assert_ne!(tpnt(d, &["frobnicate"]).status.code(), Some(0));
}
