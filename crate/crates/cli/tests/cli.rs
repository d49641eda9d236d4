use std::path::Path;
use std::process::{Command, Output};

fn stattn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stattn")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = stattn(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, n: &str, seed: &str) {
    ok(&["synth", "--n", n, "--seed", seed, "--out", p(dir)]);
}

#[test]
fn synth_writes_requested_patients() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "365", "7");
    let text = std::fs::read_to_string(tmp.path().join("static.csv")).unwrap();
    assert_eq!(text.lines().count(), 366);
    for f in ["visits.csv", "generator.toml", "truth.csv", "manifest.json"] {
        assert!(tmp.path().join(f).exists(), "{f} missing");
    }
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    synth(a.path(), "50", "3");
    synth(b.path(), "50", "3");
    for f in ["static.csv", "visits.csv", "truth.csv", "generator.toml"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn zero_patients_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = stattn(&["synth", "--n", "0", "--out", p(tmp.path())]);
    assert!(!out.status.success());
    assert!(!tmp.path().join("static.csv").exists());
}

#[test]
fn unknown_variant_and_modality_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path(), "20", "1");
    let d = p(tmp.path());
    assert!(!stattn(&["train", "--data", d, "--variant", "gru", "--out", d]).status.success());
    assert!(!stattn(&["train", "--data", d, "--modalities", "genomics", "--out", d]).status.success());
    assert!(!stattn(&["train", "--data", "/definitely/not/here", "--out", d]).status.success());
}

#[test]
fn help_documents_flags_and_formats() {
    for cmd in ["synth", "preprocess", "train", "evaluate", "compare"] {
        let text = ok(&[cmd, "--help"]);
        assert!(text.contains("--"), "{cmd}");
        assert!(text.contains("static.csv"), "{cmd} help lacks file formats");
    }
    let train = ok(&["train", "--help"]);
    for flag in ["--variant", "--modalities", "--config", "--epochs", "--clinical-table", "--out"] {
        assert!(train.contains(flag), "train help lacks {flag}");
    }
}

#[test]
fn preprocess_emits_unit_range_features() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("c");
    let out = tmp.path().join("p");
    synth(&data, "30", "2");
    ok(&["preprocess", "--data", p(&data), "--out", p(&out), "--modalities", "labs,vitals"]);
    let mut r = csv::Reader::from_path(out.join("features.csv")).unwrap();
    let headers = r.headers().unwrap().clone();
    assert!(headers.iter().skip(3).all(|h| h.starts_with("labs:") || h.starts_with("vitals:")));
    for rec in r.records() {
        for v in rec.unwrap().iter().skip(3) {
            let x: f64 = v.parse().unwrap();
            assert!((0.0..=1.0).contains(&x));
        }
    }
    assert!(out.join("scaling.toml").exists());
}

#[test]
fn train_then_evaluate_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("c");
    let run = tmp.path().join("run");
    synth(&data, "40", "5");
    let stdout = ok(&[
        "train", "--data", p(&data), "--variant", "local-joint", "--epochs", "2", "--hidden", "6", "--folds", "3",
        "--seed", "4", "--out", p(&run),
    ]);
    assert!(stdout.contains("mean auc"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("cv_report.json")).unwrap()).unwrap();
    let folds: Vec<f64> = report["fold_auc"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert_eq!(folds.len(), 3);
    let mean = report["mean_auc"].as_f64().unwrap();
    assert!((mean - folds.iter().sum::<f64>() / 3.0).abs() < 1e-12);

    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("manifest.json")).unwrap()).unwrap();
    let outputs = manifest["outputs"].as_array().unwrap();
    assert_eq!(outputs.len(), 1 + 3 + 2);
    for o in outputs {
        assert!(Path::new(o.as_str().unwrap()).exists());
    }
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 2);

    let eval = tmp.path().join("eval");
    let roc = tmp.path().join("roc.csv");
    let text = ok(&[
        "evaluate", "--checkpoint", p(&run.join("fold0.ckpt")), "--data", p(&data), "--roc", p(&roc), "--out",
        p(&eval),
    ]);
    let value: f64 = text.trim().split('\t').nth(1).unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&value));
    let scores = std::fs::read_to_string(eval.join("scores.csv")).unwrap();
    assert_eq!(scores.lines().count(), 41);
    assert!(std::fs::read_to_string(&roc).unwrap().starts_with("fpr,tpr"));
}

#[test]
fn training_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("c");
    synth(&data, "30", "8");
    let mut reports = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        ok(&[
            "train", "--data", p(&data), "--variant", "lstm-joint", "--epochs", "2", "--hidden", "4", "--folds", "3",
            "--out", p(&out),
        ]);
        reports.push((
            std::fs::read(out.join("cv_report.json")).unwrap(),
            std::fs::read(out.join("fold1.ckpt")).unwrap(),
        ));
    }
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn compare_with_itself_gives_identical_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("c");
    let out = tmp.path().join("cmp");
    synth(&data, "30", "6");
    ok(&[
        "compare", "--data", p(&data), "--variants", "lstm,lstm", "--seeds", "0,1", "--epochs", "1", "--hidden", "4",
        "--folds", "3", "--out", p(&out),
    ]);
    let text = std::fs::read_to_string(out.join("comparison.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "variant,mean_auc,sd_auc,seed_0,seed_1");
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[1], lines[2]);
    assert!(!stattn(&["compare", "--data", p(&data), "--variants", "lstm", "--out", p(&out)]).status.success());
}

#[test]
fn clinical_variant_trains_without_network() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("c");
    let run = tmp.path().join("run");
    synth(&data, "40", "9");
    ok(&["train", "--data", p(&data), "--variant", "clinical", "--out", p(&run)]);
    assert!(run.join("cv_report.json").exists());
    assert!(!run.join("fold0.ckpt").exists());
}
