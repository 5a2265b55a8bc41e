use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use pon_cli::commands::{self, CHECKPOINT_FILE, HISTORY_FILE, REPORT_FILE};
use pon_core::data::{signal_direction, SyntheticConfig};
use pon_core::gradcheck::GradcheckOptions;
use pon_core::nn::{Checkpoint, Method, MethodSpec, ModelConfig, TrainConfig, Trainer};
use pon_core::poisson::log_score_rate_derivative;
use serde_json::Value;
use tempfile::TempDir;

const TINY: &str = r#"{
  "data": {"synthetic": {"num_samples": 200, "feature_dim": 4}},
  "model": {"encoder_widths": [16], "projector_hidden": 8, "projection_dim": 4},
  "train": {"epochs": 2}
}"#;

fn pon(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pon"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn workspace() -> TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("tiny.json"), TINY).unwrap();
    dir
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn history(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn keys(v: &Value) -> BTreeSet<&str> {
    v.as_object().unwrap().keys().map(String::as_str).collect()
}

#[test]
fn gen_data_writes_csv_and_config() {
    let dir = workspace();
    ok(&pon(&["gen-data", "--out", "d.csv"], dir.path()));
    let csv = fs::read_to_string(dir.path().join("d.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "id,label,f0,f1,f2,f3,f4,f5,f6,f7"
    );
    assert_eq!(csv.lines().count(), 2001);
    let config = read_json(&dir.path().join("d.config.json"));
    assert_eq!(config["data"]["synthetic"]["num_samples"], 2000);
}

#[test]
fn gen_data_is_deterministic_per_seed() {
    let dir = workspace();
    for out in ["a.csv", "b.csv"] {
        ok(&pon(&["gen-data", "--seed", "7", "--out", out], dir.path()));
    }
    ok(&pon(
        &["gen-data", "--seed", "8", "--out", "c.csv"],
        dir.path(),
    ));
    let read = |f: &str| fs::read(dir.path().join(f)).unwrap();
    assert_eq!(read("a.csv"), read("b.csv"));
    assert_ne!(read("a.csv"), read("c.csv"));
}

#[test]
fn unknown_config_key_exits_1_naming_it() {
    let dir = workspace();
    fs::write(
        dir.path().join("bad.json"),
        r#"{"train": {"learning_rat": 0.1}}"#,
    )
    .unwrap();
    let out = pon(&["gen-data", "--config", "bad.json"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rat"));
}

#[test]
fn unwritable_output_exits_nonzero_with_message() {
    let dir = workspace();
    fs::write(dir.path().join("blocker"), "").unwrap();
    let out = pon(&["gen-data", "--out", "blocker/d.csv"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
}

#[test]
fn train_writes_checkpoint_history_and_config() {
    let dir = workspace();
    ok(&pon(
        &["train", "--config", "tiny.json", "--out", "run"],
        dir.path(),
    ));
    let run = dir.path().join("run");
    let records = history(&run.join(HISTORY_FILE));
    assert_eq!(records.len(), 2);
    assert_eq!(records[1]["epoch"], 2);
    let ckpt = Checkpoint::load(&run.join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ckpt.epochs_done, 2);
    assert!(!ckpt.bank.is_empty());
    let config = read_json(&run.join("config.json"));
    assert_eq!(config["train"]["epochs"], 2);
    assert_eq!(config["train"]["temperature"], 0.1);
}

#[test]
fn ce_method_leaves_bank_empty() {
    let dir = workspace();
    ok(&pon(
        &[
            "train",
            "--config",
            "tiny.json",
            "--method",
            "ce",
            "--out",
            "run",
        ],
        dir.path(),
    ));
    let ckpt = Checkpoint::load(&dir.path().join("run").join(CHECKPOINT_FILE)).unwrap();
    assert!(ckpt.bank.is_empty());
    assert_eq!(ckpt.method, MethodSpec::new(Method::Ce));
}

#[test]
fn resume_continues_numbering_and_matches_uninterrupted_run() {
    let dir = workspace();
    let args = ["train", "--config", "tiny.json"];
    ok(&pon(
        &[&args[..], &["--epochs", "4", "--out", "full"]].concat(),
        dir.path(),
    ));
    ok(&pon(
        &[&args[..], &["--epochs", "2", "--out", "part"]].concat(),
        dir.path(),
    ));
    ok(&pon(
        &[
            &args[..],
            &[
                "--epochs",
                "4",
                "--out",
                "part",
                "--resume",
                "part/checkpoint.json",
            ],
        ]
        .concat(),
        dir.path(),
    ));
    let full = history(&dir.path().join("full").join(HISTORY_FILE));
    let part = history(&dir.path().join("part").join(HISTORY_FILE));
    let epochs: Vec<u64> = part.iter().map(|r| r["epoch"].as_u64().unwrap()).collect();
    assert_eq!(epochs, [1, 2, 3, 4]);
    for (a, b) in full.iter().zip(&part) {
        for key in ["loss_pfl", "loss_mcl", "train_acc"] {
            let (a, b) = (a[key].as_f64().unwrap(), b[key].as_f64().unwrap());
            assert!((a - b).abs() <= 1e-10, "{key}: {a} vs {b}");
        }
    }
}

#[test]
fn divergence_exits_2() {
    let dir = workspace();
    fs::write(
        dir.path().join("hot.json"),
        TINY.replace(r#""epochs": 2"#, r#""epochs": 2, "learning_rate": 1e300"#),
    )
    .unwrap();
    let out = pon(
        &["train", "--config", "hot.json", "--out", "run"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverge"));
    assert!(dir.path().join("run").join(HISTORY_FILE).exists());
}

/// Noiseless data and a checkpoint whose logits `k·s − k(k+1)/2` (scaled)
/// realize the threshold rule on the projection `s = ⟨u, x⟩`.
fn oracle_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let data_cfg = SyntheticConfig {
        num_samples: 500,
        severity_noise: 0.0,
        feature_noise: 0.0,
        seed: 3,
        ..SyntheticConfig::default()
    };
    let config = serde_json::json!({ "data": { "synthetic": data_cfg } });
    fs::write(dir.join("oracle.json"), config.to_string()).unwrap();
    ok(&pon(
        &["gen-data", "--config", "oracle.json", "--out", "oracle.csv"],
        dir,
    ));

    let data = pon_core::data::load_csv(&dir.join("oracle.csv"), Some(5)).unwrap();
    let model = ModelConfig {
        encoder_widths: vec![1],
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let mut ckpt = Trainer::new(&data, &model, &train, &MethodSpec::new(Method::Ce))
        .unwrap()
        .checkpoint();
    let params = &mut ckpt.network.params;
    params.encoder[0].weights = signal_direction(&data_cfg);
    params.encoder[0].bias = vec![0.0];
    let a = 50.0;
    params.classifier.weights = (0..5).map(|k| a * k as f64).collect();
    params.classifier.bias = (0..5).map(|k| -a * (k * (k + 1)) as f64 / 2.0).collect();
    let path = dir.join("oracle_checkpoint.json");
    ckpt.save(&path).unwrap();
    (path, dir.join("oracle.csv"))
}

#[test]
fn oracle_checkpoint_scores_perfectly() {
    let dir = workspace();
    let (ckpt, data) = oracle_fixture(dir.path());
    let args = [
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
    ];
    ok(&pon(&[&args[..], &["--out", "e"]].concat(), dir.path()));
    let report = read_json(&dir.path().join("e").join(REPORT_FILE));
    assert_eq!(report["acc"], 1.0);
    assert_eq!(report["qwk"], 1.0);
    assert_eq!(report["macro_auc"], 1.0);
    assert!(dir.path().join("e").join("config.json").exists());
}

#[test]
fn eval_report_has_the_metric_schema_and_is_reproducible() {
    let dir = workspace();
    let (ckpt, data) = oracle_fixture(dir.path());
    let args = [
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
    ];
    ok(&pon(&[&args[..], &["--out", "e1"]].concat(), dir.path()));
    ok(&pon(&[&args[..], &["--out", "e2"]].concat(), dir.path()));
    let bytes = |d: &str| fs::read(dir.path().join(d).join(REPORT_FILE)).unwrap();
    assert_eq!(bytes("e1"), bytes("e2"));

    let report = read_json(&dir.path().join("e1").join(REPORT_FILE));
    let metrics = [
        "acc",
        "macro_auc",
        "qwk",
        "macro_f1",
        "primary",
        "secondary",
    ];
    let artifacts = ["confusion_matrix", "roc"];
    assert_eq!(
        keys(&report),
        metrics.iter().chain(&artifacts).copied().collect()
    );
    let points: BTreeSet<&str> = [
        "sen_at_spec80",
        "spec_at_sen80",
        "sen_at_spec90",
        "spec_at_sen90",
    ]
    .into();
    assert_eq!(keys(&report["primary"]), points);
    assert_eq!(keys(&report["secondary"]), points);
}

#[test]
fn eval_rejects_class_count_mismatch() {
    let dir = workspace();
    ok(&pon(
        &[
            "train",
            "--config",
            "tiny.json",
            "--method",
            "ce",
            "--out",
            "run",
        ],
        dir.path(),
    ));
    fs::write(
        dir.path().join("k3.json"),
        r#"{"data": {"synthetic": {"num_samples": 100, "num_classes": 3, "feature_dim": 4}}}"#,
    )
    .unwrap();
    ok(&pon(
        &["gen-data", "--config", "k3.json", "--out", "k3.csv"],
        dir.path(),
    ));
    let out = pon(
        &[
            "eval",
            "--checkpoint",
            "run/checkpoint.json",
            "--data",
            "k3.csv",
            "--out",
            "e",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("classes"));
}

#[test]
fn gradcheck_passes_and_lists_components() {
    let dir = workspace();
    let out = pon(&["gradcheck", "--out", "g"], dir.path());
    ok(&out);
    let report = read_json(&dir.path().join("g").join("gradcheck.json"));
    let components = report["components"].as_array().unwrap();
    let names: Vec<&str> = components
        .iter()
        .map(|c| c["component"].as_str().unwrap())
        .collect();
    assert_eq!(
        names,
        [
            "poisson_focal_loss",
            "cross_entropy",
            "focal_loss",
            "mcl_loss",
            "full_model"
        ]
    );
    assert!(components
        .iter()
        .all(|c| c["max_relative_error"].as_f64().unwrap() < 1e-4));
    assert!(String::from_utf8_lossy(&out.stdout).contains("max rel err"));
    assert!(dir.path().join("g").join("config.json").exists());
}

fn flipped(k: usize, lambda: f64) -> f64 {
    -log_score_rate_derivative(k, lambda)
}

#[test]
fn gradcheck_names_injected_fault() {
    let report = commands::gradcheck(&GradcheckOptions {
        score_derivative: flipped,
        ..GradcheckOptions::default()
    })
    .unwrap();
    assert!(!report.passed());
    assert!(report
        .failures()
        .any(|c| c.component == "poisson_focal_loss"));
    assert!(commands::gradcheck_table(&report).contains("FAIL"));
}

#[test]
fn gradcheck_gamma_zero_path_passes() {
    let report = commands::gradcheck(&GradcheckOptions {
        gammas: &[0.0],
        ..GradcheckOptions::default()
    })
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn compare_two_methods_gives_mean_sd_rows() {
    let dir = workspace();
    let out = pon(
        &[
            "compare",
            "--config",
            "tiny.json",
            "--methods",
            "pon,ce",
            "--folds",
            "2",
            "--repeats",
            "2",
            "--out",
            "cmp",
        ],
        dir.path(),
    );
    ok(&out);
    let report = read_json(&dir.path().join("cmp").join("compare.json"));
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    for row in rows {
        assert!(row["error"].is_null());
        assert_eq!(row["runs"].as_array().unwrap().len(), 4);
        assert!(row["qwk"]["sd"].as_f64().unwrap() >= 0.0);
    }
    let table = fs::read_to_string(dir.path().join("cmp").join("table.txt")).unwrap();
    assert_eq!(table, String::from_utf8_lossy(&out.stdout));
    let body: Vec<&str> = table.lines().skip(2).collect();
    assert_eq!(body.len(), 2);
    assert!(body[0].starts_with("pon") && body[1].starts_with("ce"));
    assert_eq!(body[0].matches('±').count(), 4);
    assert!(dir.path().join("cmp").join("config.json").exists());
}

#[test]
fn compare_is_independent_of_thread_count() {
    let dir = workspace();
    for (threads, out) in [("1", "t1"), ("3", "t3")] {
        let status = Command::new(env!("CARGO_BIN_EXE_pon"))
            .args([
                "compare",
                "--config",
                "tiny.json",
                "--methods",
                "pon,emd",
                "--folds",
                "2",
            ])
            .args(["--repeats", "1", "--out", out])
            .env("PON_THREADS", threads)
            .current_dir(dir.path())
            .output()
            .unwrap();
        ok(&status);
    }
    let bytes = |d: &str| fs::read(dir.path().join(d).join("compare.json")).unwrap();
    assert_eq!(bytes("t1"), bytes("t3"));
}

#[test]
fn ordinal_row_has_no_auc() {
    let dir = workspace();
    ok(&pon(
        &[
            "compare",
            "--config",
            "tiny.json",
            "--methods",
            "ordinal",
            "--folds",
            "2",
            "--repeats",
            "1",
            "--out",
            "cmp",
        ],
        dir.path(),
    ));
    let report = read_json(&dir.path().join("cmp").join("compare.json"));
    let row = &report["rows"][0];
    assert!(row["error"].is_null());
    assert!(row["macro_auc"].is_null());
    assert!(row["qwk"].is_object());
    let table = fs::read_to_string(dir.path().join("cmp").join("table.txt")).unwrap();
    let cells: Vec<&str> = table.lines().nth(2).unwrap().split_whitespace().collect();
    assert_eq!(cells[0], "ordinal");
    assert_eq!(cells[2], "-");
}

#[test]
fn ablation_grid_has_the_five_toggle_rows() {
    let dir = workspace();
    ok(&pon(
        &[
            "compare",
            "--config",
            "tiny.json",
            "--ablation",
            "--epochs",
            "1",
            "--folds",
            "2",
            "--repeats",
            "1",
            "--out",
            "abl",
        ],
        dir.path(),
    ));
    let report = read_json(&dir.path().join("abl").join("compare.json"));
    let labels: Vec<&str> = report["rows"]
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["label"].as_str().unwrap())
        .collect();
    assert_eq!(
        labels,
        [
            "ce",
            "pon[PP]",
            "pon[PP+PE]",
            "pon[PP+PE+pfl]",
            "pon[mcl]",
            "pon"
        ]
    );
}

#[test]
fn failing_runs_mark_rows_and_harness_continues() {
    let dir = workspace();
    fs::write(
        dir.path().join("hot.json"),
        TINY.replace(r#""epochs": 2"#, r#""epochs": 2, "learning_rate": 1e300"#),
    )
    .unwrap();
    let out = pon(
        &[
            "compare",
            "--config",
            "hot.json",
            "--methods",
            "pon,ce",
            "--folds",
            "2",
            "--repeats",
            "1",
            "--out",
            "cmp",
        ],
        dir.path(),
    );
    ok(&out);
    let report = read_json(&dir.path().join("cmp").join("compare.json"));
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r["error"].is_string()));
    assert!(String::from_utf8_lossy(&out.stdout).contains("failed"));
}

#[test]
fn invalid_thread_count_is_a_validation_error() {
    let dir = workspace();
    let out = Command::new(env!("CARGO_BIN_EXE_pon"))
        .args([
            "compare",
            "--config",
            "tiny.json",
            "--methods",
            "ce",
            "--folds",
            "2",
            "--repeats",
            "1",
        ])
        .env("PON_THREADS", "zero")
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}
