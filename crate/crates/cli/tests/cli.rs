use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn oodlab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oodlab"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn small_config(dir: &Path, name: &str, objective_lines: &str) -> String {
    let text = format!(
        "{objective_lines}\nepochs = 4\nbatch_size = 32\nruns = 2\n\n\
         [dataset]\nkind = \"synthetic\"\ntrain_per_class = 30\ntest_per_class = 10\nnear = 20\nfar = 20\n"
    );
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn error_record(out: &Output) -> serde_json::Value {
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("an error line");
    serde_json::from_str(line).expect("error line is JSON")
}

#[test]
fn gen_data_writes_four_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = oodlab(&["gen-data", "--preset", "cifar10-analog/ce", "--seed", "4", "--out", "d"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let lines = |f: &str| fs::read_to_string(dir.path().join("d").join(f)).unwrap().lines().count();
    assert_eq!(lines("train.csv"), 1001);
    assert_eq!(lines("test.csv"), 401);
    assert_eq!(lines("near.csv"), 401);
    assert_eq!(lines("far.csv"), 401);
}

#[test]
fn train_score_eval_agree() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "proto.toml", "objective = \"prototype\"\nlr = 0.1\nembedding_dim = 8\nlambda = 0.01\ntau = 0.1");
    let out = oodlab(&["train", "--config", &cfg, "--out", "run"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let metrics: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("run/run-1/metrics.json")).unwrap()).unwrap();
    let out = oodlab(&["eval", "run/run-1/scores.csv"], dir.path());
    assert!(out.status.success());
    let eval: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["id_accuracy", "near_auroc", "far_auroc"] {
        assert_eq!(eval[key], metrics[key], "{key}");
    }

    // Rescoring the saved checkpoint on regenerated data reproduces the run's scores.
    let out = oodlab(&["gen-data", "--config", &cfg, "--seed", "1", "--out", "data"], dir.path());
    assert!(out.status.success());
    let out = oodlab(
        &[
            "score", "--checkpoint", "run/run-1/checkpoint.json", "--id", "data/test.csv", "--near",
            "data/near.csv", "--far", "data/far.csv", "--scorer", "entropy", "--out", "rescored.csv",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        fs::read_to_string(dir.path().join("rescored.csv")).unwrap(),
        fs::read_to_string(dir.path().join("run/run-1/scores.csv")).unwrap()
    );

    let out = oodlab(
        &["export-embeddings", "--checkpoint", "run/run-0/checkpoint.json", "--config", &cfg, "--out", "emb.csv"],
        dir.path(),
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let emb = fs::read_to_string(dir.path().join("emb.csv")).unwrap();
    assert_eq!(emb.lines().count(), 1 + 40 + 20 + 20);
    assert!(emb.lines().next().unwrap().ends_with("e7,role,label"));
}

#[test]
fn compare_is_byte_deterministic_and_report_rebuilds() {
    let dir = tempfile::tempdir().unwrap();
    let ce = small_config(dir.path(), "ce.toml", "objective = \"ce\"\nlr = 0.1");
    let tl = small_config(dir.path(), "tl.toml", "objective = \"triplet\"\nlr = 0.005\nembedding_dim = 8\nscorer = \"knn\"");
    for out_dir in ["a", "b"] {
        let out = oodlab(&["compare", "--config", &ce, "--config", &tl, "--out", out_dir], dir.path());
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["report.md", "report.json", "runs.json", "runs.csv", "ce/run-0/scores.csv", "triplet/run-1/checkpoint.json"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap(),
            "{f}"
        );
    }
    let out = oodlab(&["report", "a", "--out", "rebuilt"], dir.path());
    assert!(out.status.success());
    assert_eq!(
        fs::read(dir.path().join("a/report.md")).unwrap(),
        fs::read(dir.path().join("rebuilt/report.md")).unwrap()
    );
}

#[test]
fn failures_emit_json_error_records() {
    let dir = tempfile::tempdir().unwrap();
    let out = oodlab(&["train", "--preset", "cifar10-analog/nope", "--out", "x"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_record(&out)["error"]["kind"], "config");

    let bad = small_config(dir.path(), "bad.toml", "objective = \"triplet\"\nlr = 0.005\nembedding_dim = 8\nscorer = \"msp\"");
    let out = oodlab(&["train", "--config", &bad, "--out", "x"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let rec = error_record(&out);
    assert_eq!(rec["error"]["kind"], "config");
    assert!(rec["error"]["message"].as_str().unwrap().contains("knn"));

    let out = oodlab(&["eval", "missing.csv"], dir.path());
    assert_eq!(error_record(&out)["error"]["kind"], "io");

    let out = oodlab(&["compare", "--preset", "cifar10-analog/ce", "--preset", "cifar10-analog/ce", "--out", "c"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(error_record(&out)["error"]["message"].as_str().unwrap().contains("more than once"));

    let out = oodlab(&["nonsense"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_record(&out)["error"]["kind"], "usage");
}

#[test]
fn diverging_runs_fail_with_numerical_record() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "hot.toml", "objective = \"ce\"\nlr = 1e9");
    let out = oodlab(&["train", "--config", &cfg, "--out", "hot"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let failures: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("hot/failures.json")).unwrap()).unwrap();
    assert_eq!(failures[0]["kind"], "numerical");
    assert_eq!(error_record(&out)["error"]["kind"], "invalid_state");
}
