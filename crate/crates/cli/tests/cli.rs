//! End-to-end checks of the `l2d` binary: exit codes, file outputs, and the
//! gen -> train -> eval -> conformal flow on a small config.

use std::path::Path;
use std::process::Command;

fn l2d() -> Command {
    Command::new(env!("CARGO_BIN_EXE_l2d"))
}

fn small_config_json() -> String {
    r#"{
        "experiment": "train-eval",
        "task": {
            "dim": 2,
            "num_classes": 3,
            "means": [[2.0, 0.0], [-1.0, 1.7], [-1.0, -1.7]],
            "std": 0.9
        },
        "experts": [
            { "kind": "classwise_prob", "correct_prob": [0.9, 0.9, 0.2], "seed": 11 },
            { "kind": "classwise_prob", "correct_prob": [0.2, 0.3, 0.95], "seed": 12 }
        ],
        "data": { "n_train": 1200, "n_val": 300, "n_test": 400, "n_eval": 400 },
        "train": { "epochs": 12, "batch_size": 64, "learning_rate": 0.05 },
        "estimators": ["ova"],
        "seeds": [1]
    }"#
    .to_string()
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, small_config_json()).unwrap();
    path
}

#[test]
fn validate_echoes_canonical_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let output = l2d()
        .args(["validate", "--config"])
        .arg(&config)
        .output()
        .unwrap();
    assert!(output.status.success(), "{output:?}");
    let stdout = String::from_utf8(output.stdout).unwrap();
    assert!(stdout.contains("\"experiment\": \"train-eval\""));
    assert!(stdout.contains("\"alpha\": 0.1"), "defaults filled in");
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(
        &path,
        small_config_json().replace("\"seeds\": [1]", "\"seeds\": []"),
    )
    .unwrap();
    let output = l2d()
        .args(["validate", "--config"])
        .arg(&path)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8(output.stderr).unwrap();
    assert!(stderr.contains("seeds"), "{stderr}");

    let output = l2d()
        .args(["repro", "--preset", "not-a-preset"])
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_code_three() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    // A checkpoint path that is not a checkpoint.
    let bogus = dir.path().join("model.ckpt");
    std::fs::write(&bogus, b"definitely not a checkpoint").unwrap();
    let output = l2d()
        .args(["eval", "--config"])
        .arg(&config)
        .args(["--model"])
        .arg(&bogus)
        .args(["--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(3));
    let stderr = String::from_utf8(output.stderr).unwrap();
    assert!(stderr.contains("not a checkpoint"), "{stderr}");
}

#[test]
fn gen_train_eval_conformal_flow() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let out = dir.path().join("out");

    let status = l2d()
        .args(["gen", "--config"])
        .arg(&config)
        .args(["--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(out.join("data-seed1.csv").exists());
    assert!(out.join("data-seed1.json").exists());
    let header = std::fs::read_to_string(out.join("data-seed1.csv")).unwrap();
    assert!(header.starts_with("x0,x1,y,m1,m2\n"));

    let status = l2d()
        .args(["train", "--config"])
        .arg(&config)
        .args(["--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let ckpt = out.join("model-ova-seed1.ckpt");
    assert!(ckpt.exists());

    let status = l2d()
        .args(["eval", "--config"])
        .arg(&config)
        .args(["--model"])
        .arg(&ckpt)
        .args(["--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("eval-report.json")).unwrap()).unwrap();
    assert_eq!(report["estimator"], "ova");
    assert!(report["system"]["overall_accuracy"].as_f64().unwrap() > 0.5);
    assert!(report["calibration"].as_array().unwrap().len() == 2);

    let status = l2d()
        .args(["conformal", "--config"])
        .arg(&config)
        .args(["--model"])
        .arg(&ckpt)
        .args(["--out"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    for stat in ["naive", "regularized"] {
        let path = out.join(format!("conformal-{stat}.json"));
        let report: serde_json::Value =
            serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
        assert_eq!(report["fit"]["kind"], stat);
        assert!(report["heldout"]["coverage_any_correct"].as_f64().unwrap() > 0.0);
    }
}

#[test]
fn repro_config_writes_expected_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.json");
    // Tiny expert-dependence run; checks the CSV emits the sweep metrics.
    std::fs::write(
        &path,
        r#"{
            "experiment": "expert-dependence",
            "task": { "dim": 2, "num_classes": 4 },
            "data": { "n_train": 600, "n_val": 200, "n_test": 300, "n_eval": 300 },
            "train": { "epochs": 6, "batch_size": 64, "learning_rate": 0.05 },
            "sweep": { "correctness_probs": [0.3, 0.8], "expertise_classes": 2, "num_support_experts": 2 },
            "seeds": [1, 2]
        }"#,
    )
    .unwrap();
    let out = dir.path().join("run");
    let output = l2d()
        .args(["repro", "--config"])
        .arg(&path)
        .args(["--out"])
        .arg(&out)
        .args(["--threads", "2"])
        .output()
        .unwrap();
    assert!(output.status.success(), "{output:?}");

    let csv = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(csv.starts_with("experiment,seed,sweep,metric,value\n"));
    for metric in [
        "avg_ece_softmax",
        "avg_ece_ova",
        "random_expert_ece_softmax",
        "random_expert_ece_ova",
    ] {
        for sweep in ["0.3", "0.8"] {
            assert!(
                csv.contains(&format!("expert-dependence,1,{sweep},{metric},")),
                "missing {metric} at {sweep}"
            );
        }
    }
    assert!(out.join("summary.json").exists());
    assert!(out.join("timing.json").exists());
    let ckpts = std::fs::read_dir(out.join("checkpoints")).unwrap().count();
    assert_eq!(ckpts, 2 * 2 * 2, "losses x sweep points x seeds");
}
