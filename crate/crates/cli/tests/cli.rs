use std::path::{Path, PathBuf};
use std::process::Command;

use vscomplete_cli::config::{parse_config, PipelineConfig};
use vscomplete_cli::pipeline::{run_all, STAGES};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vscomplete"))
}

fn small_config(out: &Path) -> PipelineConfig {
    let mut c = parse_config(
        r#"{
            "synth": {"topic_count": 12, "sets_per_topic": 8, "seed": 3, "max_size": 60, "size_p95": 40},
            "dim": 32,
            "hidden": [16, 8],
            "train": {"max_epochs": 3, "batch_size": 256, "learning_rate": 0.003}
        }"#,
    )
    .unwrap();
    c.out_dir = out.to_path_buf();
    c
}

#[test]
fn run_all_skips_fresh_stages_and_reruns_downstream() {
    let dir = tempfile::tempdir().unwrap();
    let c = small_config(dir.path());
    let first = run_all(&c).unwrap();
    assert_eq!(first.ran.len(), STAGES.len());
    assert!(first.skipped.is_empty());

    let again = run_all(&c).unwrap();
    assert!(again.ran.is_empty(), "{:?}", again.ran);
    assert_eq!(again.summary, first.summary);

    std::fs::remove_file(dir.path().join("model.bin")).unwrap();
    let partial = run_all(&c).unwrap();
    assert_eq!(partial.ran, vec!["train", "eval"]);
    assert_eq!(partial.summary, first.summary);

    // a changed setting reruns its stage and everything after it
    let mut c2 = c.clone();
    c2.k = 5;
    let rerun = run_all(&c2).unwrap();
    assert_eq!(rerun.ran, vec!["pool", "split", "features", "train", "eval"]);
}

#[test]
fn identical_configs_give_identical_reports() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_all(&small_config(a.path())).unwrap();
    run_all(&small_config(b.path())).unwrap();
    for f in ["reports/report.json", "manifest.csv", "pools.jsonl", "reports/strata_size.csv"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f} differs"
        );
    }
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().arg("no-such-command").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(bin().arg("--help").output().unwrap().status.code(), Some(0));

    let bad_cfg = write(dir.path(), "bad.json", r#"{"k": 0, "dim": 1}"#);
    let out = bin().args(["run-all", "--config"]).arg(&bad_cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("k:") && err.contains("dim:"), "{err}");

    let good = r#"{"oid":"1.2.3","title":"Asthma","description":"","publisher":"P","vs_type":"Medication","codes":[{"code":"1","system":"SNOMED-CT","display":"a"},{"code":"2","system":"SNOMED-CT","display":"b"},{"code":"3","system":"SNOMED-CT","display":"c"}]}"#;
    let corpus = write(dir.path(), "c.jsonl", &format!("{good}\n{{broken\n"));
    let out = bin()
        .args(["ingest", "--input"])
        .arg(&corpus)
        .arg("--out")
        .arg(dir.path().join("o.jsonl"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("ingest") && err.contains(":2"), "{err}");
}

#[test]
fn json_logs_are_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["--json-logs", "gen-synth", "--out"])
        .arg(dir.path().join("c.jsonl"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let err = String::from_utf8_lossy(&out.stderr);
    let first = err.lines().next().expect("a log line");
    let v: serde_json::Value = serde_json::from_str(first).unwrap();
    assert_eq!(v["level"], "INFO");
}

#[test]
fn subcommands_compose() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let c = small_config(&d.join("run"));
    run_all(&c).unwrap();
    let run = d.join("run");

    let out = bin().arg("inspect").arg(run.join("model.bin")).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let header: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(header["kind"], "model_checkpoint");

    // the classifier's own predictions never leave the corpus
    let scored = d.join("scored.json");
    let out = bin()
        .args(["eval-predictions", "--predictions"])
        .arg(run.join("reports/test_predictions.jsonl"))
        .arg("--corpus")
        .arg(run.join("corpus.jsonl"))
        .arg("--manifest")
        .arg(run.join("manifest.csv"))
        .arg("--out")
        .arg(&scored)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&scored).unwrap()).unwrap();
    assert_eq!(report["hallucination_rate"], 0.0);
    let rr: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(run.join("reports/report.json")).unwrap()).unwrap();
    assert_eq!(report["value_set_level"]["f1"], rr["classifier"]["value_set_level"]["f1"]);

    let stats = d.join("stats.json");
    let out = bin().args(["stats", "--corpus"]).arg(run.join("corpus.jsonl")).arg("--out").arg(&stats).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(stats.exists());

    let theory = write(d, "theory.json", r#"{"N": 200, "K": 20, "s": 3, "gamma": 0.3, "sigma": 1.0, "n": 100, "delta": 0.05, "trials": 500}"#);
    let csv = d.join("theory.csv");
    let out = bin()
        .args(["simulate-theory", "--config"])
        .arg(&theory)
        .args(["--sweep", "50,100,200", "--out"])
        .arg(&csv)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 4);
}

#[test]
fn stages_run_individually() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let p = |n: &str| d.join(n);
    let synth = write(d, "synth.json", r#"{"topic_count": 8, "sets_per_topic": 6, "max_size": 40, "size_p95": 30}"#);
    let steps: Vec<Vec<std::ffi::OsString>> = vec![
        vec!["gen-synth".into(), "--config".into(), synth.into(), "--out".into(), p("c.jsonl").into()],
        vec![
            "embed".into(), "--corpus".into(), p("c.jsonl").into(), "--dim".into(), "16".into(),
            "--titles-out".into(), p("t.emb").into(), "--displays-out".into(), p("d.emb").into(),
        ],
        vec!["index".into(), "--corpus".into(), p("c.jsonl").into(), "--titles".into(), p("t.emb").into(), "--out".into(), p("i.bin").into()],
        vec![
            "pool".into(), "--corpus".into(), p("c.jsonl").into(), "--index".into(), p("i.bin").into(),
            "--titles".into(), p("t.emb").into(), "--k".into(), "4".into(), "--out".into(), p("p.jsonl").into(),
        ],
        vec![
            "split".into(), "--corpus".into(), p("c.jsonl").into(), "--pools".into(), p("p.jsonl").into(),
            "--out".into(), p("m.csv").into(),
        ],
        vec![
            "features".into(), "--corpus".into(), p("c.jsonl").into(), "--pools".into(), p("p.jsonl").into(),
            "--titles".into(), p("t.emb").into(), "--displays".into(), p("d.emb").into(), "--out".into(), p("f.bin").into(),
        ],
    ];
    for args in steps {
        let out = bin().args(&args).output().unwrap();
        assert_eq!(out.status.code(), Some(0), "{:?}: {}", args[0], String::from_utf8_lossy(&out.stderr));
    }
    let out = bin().args(["pool", "--k", "0", "--corpus", "x", "--index", "x", "--titles", "x", "--out", "x"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = bin().arg("inspect").arg(p("f.bin")).output().unwrap();
    let header: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(header["metadata"]["feature_dim"], 2 * 16 + 9);
}
