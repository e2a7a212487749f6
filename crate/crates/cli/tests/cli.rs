use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use nmc_core::synthetic;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const CLASSES: &str = "class_a,class_b,class_c";

fn nmc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nmc"))
        .args(args)
        .current_dir(dir)
        .env("NMC_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = nmc(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    nmc(dir, args).status.code().expect("exit code")
}

fn write_names(dir: &Path, n: usize, seed: u64) {
    let labels = synthetic::label_set();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut text = String::from("first_name,last_name,label\n");
    for r in synthetic::generate(n, &mut rng) {
        text.push_str(&format!("{},{},{}\n", r.first_name, r.last_name, labels.label(r.label_id).unwrap()));
    }
    fs::write(dir.join("data.csv"), text).unwrap();
}

/// vocab.txt plus a briefly trained classifier at model.nmc.
fn trained(dir: &Path) {
    write_names(dir, 240, 3);
    ok(dir, &["train-tokenizer", "--data", "data.csv", "--max-vocab", "60", "--out", "vocab.txt"]);
    ok(
        dir,
        &[
            "train", "--data", "data.csv", "--vocab", "vocab.txt", "--task", "custom", "--classes", CLASSES,
            "--epochs", "1", "--batch-size", "32", "--lr", "1e-3", "--out", "model.nmc",
        ],
    );
}

#[test]
fn usage_data_and_config_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_names(d, 60, 1);
    assert_eq!(code(d, &[]), 1);
    assert_eq!(code(d, &["frobnicate"]), 1);
    assert_eq!(code(d, &["--help"]), 0);
    assert_eq!(code(d, &["train-tokenizer", "--data", "missing.csv", "--out", "v.txt"]), 2);
    assert_eq!(code(d, &["train-tokenizer", "--data", "data.csv", "--max-vocab", "4", "--out", "v.txt"]), 3);
    assert!(!d.join("v.txt").exists());

    fs::write(d.join("bad.toml"), "[train]\nepochs = 3\n").unwrap();
    assert_eq!(code(d, &["train-tokenizer", "--config", "bad.toml", "--data", "data.csv", "--out", "v.txt"]), 3);
    assert_eq!(code(d, &["train", "--data", "data.csv", "--out", "m.nmc"]), 1, "no vocab and no LM");
}

#[test]
fn predict_single_name_and_csv() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    trained(d);

    let stdout = ok(d, &["predict", "--model", "model.nmc", "--name", "abcd dcba"]);
    let rows: Vec<(String, f64)> = stdout
        .lines()
        .map(|l| {
            let (label, p) = l.split_once('\t').unwrap();
            (label.to_string(), p.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 3);
    assert!(rows.windows(2).all(|w| w[0].1 >= w[1].1));
    let total: f64 = rows.iter().map(|r| r.1).sum();
    assert!((total - 1.0).abs() < 1e-5, "{total}");

    assert_eq!(code(d, &["predict", "--model", "model.nmc", "--name", "Cher"]), 1);
    assert_eq!(code(d, &["predict", "--model", "vocab.txt", "--name", "a b"]), 2);

    ok(d, &["predict", "--model", "model.nmc", "--csv", "data.csv", "--out", "pred.csv"]);
    let mut reader = csv::Reader::from_path(d.join("pred.csv")).unwrap();
    let headers = reader.headers().unwrap().clone();
    assert_eq!(
        headers.iter().collect::<Vec<_>>(),
        ["first_name", "last_name", "label", "p_class_a", "p_class_b", "p_class_c", "predicted"]
    );
    let records: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(records.len(), 240);
    for r in &records {
        let total: f64 = (3..6).map(|i| r[i].parse::<f64>().unwrap()).sum();
        assert!((total - 1.0).abs() < 1e-5);
        assert!(CLASSES.split(',').any(|c| c == &r[6]));
    }

    // the predictions file feeds straight back into evaluate
    let table = ok(d, &["evaluate", "--predictions", "pred.csv", "--task", "custom", "--classes", CLASSES]);
    assert!(table.starts_with("Group"));
}

#[test]
fn pretrain_then_train_without_vocab_flag() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_names(d, 150, 5);
    ok(d, &["train-tokenizer", "--data", "data.csv", "--max-vocab", "60", "--out", "vocab.txt"]);
    let stdout = ok(
        d,
        &["pretrain", "--data", "data.csv", "--vocab", "vocab.txt", "--epochs", "1", "--batch-size", "16", "--lr", "1e-3", "--out", "lm.nmc"],
    );
    assert!(stdout.contains("steps="));
    assert!(fs::read_to_string(d.join("lm.loss.tsv")).unwrap().starts_with("# step\tloss"));

    ok(
        d,
        &[
            "train", "--data", "data.csv", "--init-lm", "lm.nmc", "--task", "custom", "--classes", CLASSES, "--epochs",
            "1", "--batch-size", "32", "--lr", "1e-3", "--out", "clf.nmc",
        ],
    );
    let report = fs::read_to_string(d.join("clf.report.txt")).unwrap();
    assert!(report.contains("Weighted avg"));
    assert!(fs::read_to_string(d.join("clf.report.json")).unwrap().contains("\"weighted\""));

    assert_eq!(code(d, &["train", "--data", "data.csv", "--init-lm", "missing.nmc", "--out", "x.nmc"]), 2);
}

#[test]
fn foreign_label_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_names(d, 60, 2);
    ok(d, &["train-tokenizer", "--data", "data.csv", "--max-vocab", "60", "--out", "vocab.txt"]);
    let mut text = fs::read_to_string(d.join("data.csv")).unwrap();
    text.push_str("abcd,dcba,unknown\nabcd,dcba,martian\n");
    fs::write(d.join("data.csv"), text).unwrap();
    let out = nmc(
        d,
        &["train", "--data", "data.csv", "--vocab", "vocab.txt", "--task", "custom", "--classes", CLASSES, "--out", "m.nmc"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("martian"));
}

#[test]
fn evaluate_from_prediction_files() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let perfect = "label,predicted\nnh_white,nh_white\nhispanic,hispanic\nnh_black,nh_black\napi,api\naian,aian\n";
    fs::write(d.join("perfect.csv"), perfect).unwrap();
    let table = ok(d, &["evaluate", "--predictions", "perfect.csv"]);
    for line in table.lines().skip(1).take(7) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let n = fields.len();
        assert_eq!(&fields[n - 4..n - 1], ["1.00", "1.00", "1.00"], "{line}");
    }

    // [[2,1],[1,2]]: every score is 2/3
    let fixture = "label,predicted\nx,x\nx,x\nx,y\ny,x\ny,y\ny,y\n";
    fs::write(d.join("two.csv"), fixture).unwrap();
    ok(d, &["evaluate", "--predictions", "two.csv", "--task", "custom", "--classes", "x,y", "--json", "two.json"]);
    let json = fs::read_to_string(d.join("two.json")).unwrap();
    assert_eq!(json.matches("0.6666666666666666").count(), 12, "{json}");

    fs::write(d.join("base.csv"), "class,f1\nx,0.5\n").unwrap();
    let text = ok(
        d,
        &["evaluate", "--predictions", "two.csv", "--task", "custom", "--classes", "x,y", "--baseline-f1", "base.csv"],
    );
    assert!(text.contains("33.33"), "{text}");

    fs::write(d.join("bad_base.csv"), "class,f1\nz,0.5\n").unwrap();
    assert_eq!(
        code(d, &["evaluate", "--predictions", "two.csv", "--task", "custom", "--classes", "x,y", "--baseline-f1", "bad_base.csv"]),
        2
    );
    assert_eq!(code(d, &["evaluate", "--predictions", "two.csv"]), 2, "x is not a race5 label");
    assert_eq!(
        code(d, &["evaluate", "--predictions", "two.csv", "--task", "custom", "--classes", "x,y", "--improvement-basis", "f1"]),
        1
    );
}
