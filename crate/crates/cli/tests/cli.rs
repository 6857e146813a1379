use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = r#"{
  "synth": {"n_classes": 3, "n_train_per_class": 8, "n_test_per_class": 4, "n_distractors": 8},
  "eval": {"folds": 2}
}"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_partloc"))
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = bin().current_dir(dir).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "partloc {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Runs the whole pipeline in `dir` and returns the produced files that must
/// be reproducible.
fn pipeline(dir: &Path, jobs: &str) -> Vec<PathBuf> {
    fs::write(dir.join("config.json"), CONFIG).unwrap();
    let g = ["--config", "config.json", "--seed", "7", "--jobs", jobs];
    let steps: Vec<Vec<&str>> = vec![
        vec!["gen-synth", "--out", "data"],
        vec!["extract-features", "--data", "data", "--out", "feats"],
        vec!["train-detectors", "--data", "data", "--features", "feats", "--out", "dets"],
        vec!["fit-prior", "--data", "data", "--features", "feats", "--variant", "np", "--out", "prior/np.json"],
        vec!["fit-prior", "--data", "data", "--features", "feats", "--variant", "mg", "--out", "prior/mg.json"],
        vec![
            "infer", "--data", "data", "--features", "feats", "--detectors", "dets", "--prior", "prior/np.json",
            "--out", "out/np.jsonl",
        ],
        vec![
            "infer", "--data", "data", "--features", "feats", "--detectors", "dets", "--prior", "prior/mg.json",
            "--bbox-given", "--out", "out/mg_given.jsonl",
        ],
        vec!["train-classifier", "--data", "data", "--features", "feats", "--out", "clf/clf.json"],
        vec![
            "predict", "--data", "data", "--features", "feats", "--classifier", "clf/clf.json", "--configs",
            "out/np.jsonl", "--out", "out/pred.csv",
        ],
        vec!["evaluate", "--data", "data", "--metric", "accuracy", "--predictions", "out/pred.csv", "--out", "out/acc.csv"],
        vec!["evaluate", "--data", "data", "--metric", "pcp", "--configs", "out/np.jsonl", "--out", "out/pcp.csv"],
        vec!["evaluate", "--data", "data", "--metric", "recall", "--out", "out/recall.csv"],
        vec!["cv-sweep", "--data", "data", "--features", "feats", "--param", "k", "--grid", "1,5", "--out", "cv"],
    ];
    for s in steps {
        let mut args: Vec<&str> = g.to_vec();
        args.extend(s);
        run(dir, &args);
    }
    [
        "data/manifest.jsonl",
        "data/proposals.csv",
        "data/images/000001.pgm",
        "feats/detector.pgfs",
        "feats/appearance.pgfs",
        "dets/detector_root.json",
        "dets/detector_head.json",
        "dets/detector_body.json",
        "prior/np.json",
        "prior/np.appearance.pgfs",
        "prior/mg.json",
        "out/np.jsonl",
        "out/mg_given.jsonl",
        "clf/clf.json",
        "out/pred.csv",
        "out/acc.csv",
        "out/pcp.csv",
        "out/recall.csv",
        "cv/cv_k.csv",
        "cv/cv_k.svg",
        "out/effective_config.json",
    ]
    .iter()
    .map(|p| dir.join(p))
    .collect()
}

#[test]
fn smoke_path_and_determinism_across_runs_and_jobs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    let fa = pipeline(a.path(), "1");
    let fb = pipeline(b.path(), "1");
    let fc = pipeline(c.path(), "8");
    for ((x, y), z) in fa.iter().zip(&fb).zip(&fc) {
        let bx = fs::read(x).unwrap();
        assert_eq!(bx, fs::read(y).unwrap(), "{} differs between runs", x.display());
        assert_eq!(bx, fs::read(z).unwrap(), "{} differs between --jobs 1 and 8", x.display());
    }

    let acc = fs::read_to_string(a.path().join("out/acc.csv")).unwrap();
    assert!(acc.starts_with("metric,value\naccuracy,"));
    let pcp = fs::read_to_string(a.path().join("out/pcp.csv")).unwrap();
    assert!(pcp.starts_with("part,correct,total,pcp\nroot,"));
    let recall = fs::read_to_string(a.path().join("out/recall.csv")).unwrap();
    let header = recall.lines().next().unwrap();
    assert_eq!(header, "part,0.5,0.6,0.7");
    let echoed = fs::read_to_string(a.path().join("out/effective_config.json")).unwrap();
    assert!(echoed.contains("\"n_train_per_class\": 8") && !echoed.contains("\"jobs\""));
}

#[test]
fn recall_thresholds_flag_sets_columns() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("config.json"), CONFIG).unwrap();
    run(d.path(), &["--config", "config.json", "gen-synth", "--out", "data"]);
    let out = run(
        d.path(),
        &["evaluate", "--data", "data", "--metric", "recall", "--thresholds", "0.5,0.6,0.7", "--split", "all"],
    );
    let text = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "part,0.5,0.6,0.7");
    assert_eq!(lines.len(), 4);
    assert!(lines[1..].iter().all(|l| l.split(',').count() == 4));
}

#[test]
fn usage_errors_exit_nonzero() {
    let out = bin().args(["infer", "--bogus"]).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("--bogus"));

    let out = bin().args(["evaluate", "--metric", "nonsense", "--data", "."]).output().unwrap();
    assert!(!out.status.success());

    let d = tempfile::tempdir().unwrap();
    let out = bin()
        .current_dir(d.path())
        .args(["train-detectors", "--data", "missing", "--features", "f", "--out", "o"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("manifest.jsonl"));
}

#[test]
fn dense_and_loaded_proposals() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("config.json"), CONFIG).unwrap();
    run(d.path(), &["--config", "config.json", "gen-synth", "--out", "data"]);
    run(d.path(), &["dense-propose", "--data", "data", "--out", "dense/proposals.csv"]);
    run(
        d.path(),
        &["load-proposals", "--data", "data", "--input", "dense/proposals.csv", "--out", "dense/copy.csv"],
    );
    assert_eq!(
        fs::read(d.path().join("dense/proposals.csv")).unwrap(),
        fs::read(d.path().join("dense/copy.csv")).unwrap()
    );
    let text = fs::read_to_string(d.path().join("dense/proposals.csv")).unwrap();
    assert!(text.starts_with("image_id,region_id,x_min,y_min,x_max,y_max\n"));

    fs::write(d.path().join("bad.csv"), "image_id,region_id,x_min,y_min,x_max,y_max\n999,0,0,0,5,5\n").unwrap();
    let out = bin()
        .current_dir(d.path())
        .args(["load-proposals", "--data", "data", "--input", "bad.csv", "--out", "x.csv"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
