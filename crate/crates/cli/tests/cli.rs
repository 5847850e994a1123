//! End-to-end checks of the command-line surface: artifact determinism
//! across worker counts, config-file precedence, and failure modes.

use std::path::Path;
use std::process::Command;

fn distimp() -> Command {
    Command::new(env!("CARGO_BIN_EXE_distimp"))
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap()
}

/// The same (config, seed) produce byte-identical artifacts regardless of
/// the worker-thread count; checked twice.
#[test]
fn outputs_are_byte_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    // One shared input file: the analysis artifact embeds its input path,
    // so all runs must point at the same file for byte comparison.
    let shared_data = dir.path().join("data.csv");
    let mut reference: Option<(Vec<u8>, Vec<u8>, Vec<u8>)> = None;
    for round in 0..2 {
        for threads in ["1", "2"] {
            let data = dir.path().join(format!("data_{round}_{threads}.csv"));
            let metrics = dir.path().join(format!("metrics_{round}_{threads}.csv"));
            let analysis = dir.path().join(format!("analysis_{round}_{threads}.json"));
            let status = distimp()
                .args([
                    "--threads",
                    threads,
                    "simulate",
                    "--preset",
                    "j2r-ate",
                    "--n",
                    "120",
                    "--m",
                    "10",
                    "--b",
                    "25",
                    "--reps",
                    "10",
                    "--seed",
                    "77",
                ])
                .arg("--out")
                .arg(&metrics)
                .arg("--emit-data")
                .arg(&data)
                .status()
                .unwrap();
            assert!(status.success());
            if reference.is_none() {
                std::fs::copy(&data, &shared_data).unwrap();
            }
            let status = distimp()
                .args([
                    "--threads",
                    threads,
                    "analyze",
                    "--model",
                    "j2r",
                    "--estimand",
                    "ate-ancova",
                    "--method",
                    "di",
                    "--m",
                    "20",
                    "--b",
                    "40",
                    "--seed",
                    "5",
                ])
                .arg("--input")
                .arg(&shared_data)
                .arg("--out")
                .arg(&analysis)
                .status()
                .unwrap();
            assert!(status.success());
            let triple = (read(&data), read(&metrics), read(&analysis));
            match &reference {
                None => reference = Some(triple),
                Some(r) => {
                    assert_eq!(r.0, triple.0, "dataset bytes differ");
                    assert_eq!(r.1, triple.1, "metrics bytes differ");
                    assert_eq!(r.2, triple.2, "analysis bytes differ");
                }
            }
        }
    }
}

/// Config-file values apply, and explicit flags override them.
#[test]
fn config_file_with_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    assert!(distimp()
        .args(["simulate", "--preset", "j2r-ate", "--n", "80", "--reps", "0", "--seed", "3"])
        .arg("--emit-data")
        .arg(&data)
        .arg("--out")
        .arg(dir.path().join("unused.csv"))
        .status()
        .unwrap()
        .success());

    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        format!(
            "input = {}\nmodel = j2r\nestimand = ate\nmethod = di\nm = 8\nb = 20\nseed = 9\n",
            data.display()
        ),
    )
    .unwrap();
    let out_a = dir.path().join("a.json");
    assert!(distimp()
        .arg("--config")
        .arg(&cfg)
        .arg("analyze")
        .arg("--out")
        .arg(&out_a)
        .status()
        .unwrap()
        .success());
    let a: serde_json::Value = serde_json::from_slice(&read(&out_a)).unwrap();
    assert_eq!(a["config"]["m"], 8);
    assert_eq!(a["config"]["model"], "j2r");

    // Flag overrides the config value.
    let out_b = dir.path().join("b.json");
    assert!(distimp()
        .arg("--config")
        .arg(&cfg)
        .args(["analyze", "--m", "12"])
        .arg("--out")
        .arg(&out_b)
        .status()
        .unwrap()
        .success());
    let b: serde_json::Value = serde_json::from_slice(&read(&out_b)).unwrap();
    assert_eq!(b["config"]["m"], 12);

    // Unknown config keys are rejected.
    std::fs::write(&cfg, "bogus = 1\n").unwrap();
    assert!(!distimp()
        .arg("--config")
        .arg(&cfg)
        .args(["analyze"])
        .status()
        .unwrap()
        .success());
}

/// Malformed data fails with a nonzero exit and a row-specific message.
#[test]
fn non_monotone_input_is_rejected_with_context() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "x1,group,y1,y2,y3\n0.5,1,1.0,,3.0\n0.2,2,1,2,3\n").unwrap();
    let output = distimp()
        .args(["fit"])
        .arg("--input")
        .arg(&bad)
        .arg("--out")
        .arg(dir.path().join("fit.json"))
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("row 1"), "stderr: {stderr}");
    assert!(stderr.contains("visit 3"), "stderr: {stderr}");
}

/// MI and DI runs both produce well-formed inference JSON, and the MI
/// variance dominates for this control-based model.
#[test]
fn analyze_emits_complete_inference_json() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    assert!(distimp()
        .args(["simulate", "--preset", "j2r-ate", "--n", "250", "--reps", "0", "--seed", "12"])
        .arg("--emit-data")
        .arg(&data)
        .arg("--out")
        .arg(dir.path().join("unused.csv"))
        .status()
        .unwrap()
        .success());
    let mut results = Vec::new();
    for method in ["di", "mi"] {
        let out = dir.path().join(format!("{method}.json"));
        assert!(distimp()
            .args([
                "analyze", "--model", "j2r", "--estimand", "ate-ancova", "--method", method,
                "--m", "30", "--b", "60", "--seed", "4",
            ])
            .arg("--input")
            .arg(&data)
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap()
            .success());
        let doc: serde_json::Value = serde_json::from_slice(&read(&out)).unwrap();
        for key in ["tau_hat", "variance", "se", "ci", "p_value"] {
            assert!(doc["result"].get(key).is_some(), "{method} missing {key}");
        }
        results.push(doc["result"]["variance"].as_f64().unwrap());
    }
    assert!(results[1] > results[0], "expected MI variance above DI");
}

/// An emitted completed dataset is itself loadable by the fit command.
#[test]
fn emitted_completion_round_trips_through_fit() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data.csv");
    assert!(distimp()
        .args(["simulate", "--preset", "j2r-ate", "--n", "100", "--reps", "0", "--seed", "2"])
        .arg("--emit-data")
        .arg(&data)
        .arg("--out")
        .arg(dir.path().join("unused.csv"))
        .status()
        .unwrap()
        .success());
    let completed = dir.path().join("completed.csv");
    assert!(distimp()
        .args(["impute", "--model", "j2r", "--m", "5", "--seed", "1", "--emit", "3"])
        .arg("--input")
        .arg(&data)
        .arg("--out")
        .arg(&completed)
        .status()
        .unwrap()
        .success());
    assert!(distimp()
        .args(["fit"])
        .arg("--input")
        .arg(&completed)
        .arg("--out")
        .arg(dir.path().join("fit.json"))
        .status()
        .unwrap()
        .success());
}
