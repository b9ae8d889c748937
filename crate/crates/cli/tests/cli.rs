//! End-to-end tests of the `nae` binary: pipeline smoke run, byte
//! determinism, exit codes, and artifact contracts.

use nae_core::flight::load_dataset;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nae"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Exit code plus the machine-readable error record on stderr.
fn assert_error(out: &Output, code: i32, kind: &str) {
    assert_eq!(out.status.code(), Some(code), "wrong exit code");
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr.lines().last().expect("error record on stderr");
    let record: serde_json::Value = serde_json::from_str(line).expect("stderr line is JSON");
    assert_eq!(record["error"], kind);
    assert_eq!(record["exit_code"], serde_json::json!(code));
    assert!(record["message"].is_string());
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

const SMOKE_CONFIG: &str = r#"
seed = 11

[dataset]
count = 12
object_id = "smoke"

[train]
embed_dim = 16
hidden_dim = 16
epochs = 2
windows_per_trajectory = 1

[eval]
test_fraction = 0.25
metrics = ["leading_time"]

[predict]
prefix_frames = 30
horizon = 20
"#;

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn pipeline_smoke() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", SMOKE_CONFIG);
    let cfg = path_str(&cfg);

    // Generate.
    let gen_dir = tmp.path().join("gen");
    let out = run(&["gen-data", "--config", cfg, "--out", path_str(&gen_dir)]);
    assert_ok(&out);
    let dataset = gen_dir.join("dataset.jsonl");
    assert!(dataset.exists());
    assert!(gen_dir.join("resolved-config.toml").exists());
    let dataset_bytes = fs::read(&dataset).unwrap();
    let dataset_arg = path_str(&dataset);

    // Train the estimator, then fine-tune it through the filter.
    let nae_dir = tmp.path().join("nae");
    let out = run(&[
        "train", "--config", cfg, "--out", path_str(&nae_dir),
        "--dataset", dataset_arg, "--mode", "nae",
    ]);
    assert_ok(&out);
    let nae_ckpt = nae_dir.join("checkpoint-nae.json");
    assert!(nae_ckpt.exists());
    let history = fs::read_to_string(nae_dir.join("loss_history.csv")).unwrap();
    assert!(history.starts_with("# config_hash="));
    assert!(history.lines().nth(1) == Some("epoch,loss"));
    assert_eq!(history.lines().count(), 4, "two epochs of history");
    assert!(nae_dir.join("loss_history.svg").exists());

    let naedf_dir = tmp.path().join("naedf");
    let out = run(&[
        "train", "--config", cfg, "--out", path_str(&naedf_dir),
        "--dataset", dataset_arg, "--mode", "naedf",
        "--warm-start", path_str(&nae_ckpt), "--epochs", "1",
    ]);
    assert_ok(&out);
    let naedf_ckpt = naedf_dir.join("checkpoint-naedf.json");
    assert!(naedf_ckpt.exists());

    // Predict.
    let pred_dir = tmp.path().join("pred");
    let out = run(&[
        "predict", "--config", cfg, "--out", path_str(&pred_dir),
        "--checkpoint", path_str(&naedf_ckpt), "--dataset", dataset_arg,
    ]);
    assert_ok(&out);
    let predictions = fs::read_to_string(pred_dir.join("predictions.jsonl")).unwrap();
    let mut lines = predictions.lines();
    let header: serde_json::Value = serde_json::from_str(lines.next().unwrap()).unwrap();
    assert_eq!(header["checkpoint_kind"], "naedf");
    assert_eq!(header["prefix_frames"], 30);
    assert_eq!(header["horizon"], 20);
    assert!(header["config_hash"].as_str().unwrap().len() == 64);
    let records: Vec<serde_json::Value> =
        lines.map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 12);
    for record in &records {
        // Anchor frame plus the forecast horizon.
        assert_eq!(record["samples"].as_array().unwrap().len(), 21);
    }

    // Evaluate both checkpoints against the Newton baseline.
    let eval_dir = tmp.path().join("eval");
    let out = run(&[
        "eval", "--config", cfg, "--out", path_str(&eval_dir),
        "--checkpoint", path_str(&nae_ckpt), "--checkpoint", path_str(&naedf_ckpt),
        "--dataset", dataset_arg, "--metrics", "leading_time,error_curve,generalization",
    ]);
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("9 train / 3 test"), "stdout: {stdout}");
    let lt_csv = fs::read_to_string(eval_dir.join("leading_times.csv")).unwrap();
    assert!(lt_csv.starts_with("# config_hash="));
    assert!(lt_csv.lines().nth(1) == Some("predictor,trajectory,leading_time"));
    // newton + two checkpoints, three test trajectories each.
    assert_eq!(lt_csv.lines().count(), 2 + 3 * 3);
    assert!(eval_dir.join("error_curves.csv").exists());
    assert!(eval_dir.join("error_curves.svg").exists());
    let gen_csv = fs::read_to_string(eval_dir.join("generalization.csv")).unwrap();
    assert!(gen_csv.starts_with("# config_hash="));
    // hash + header + one row per (predictor, dataset) pair.
    assert_eq!(gen_csv.lines().count(), 2 + 3);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(eval_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["train_count"], 9);
    assert_eq!(summary["test_count"], 3);
    assert_eq!(summary["predictors"].as_array().unwrap().len(), 3);

    // Catch simulation with a workspace straddling the first trajectory.
    let data = load_dataset(&dataset).unwrap();
    let mid = data.trajectories[0].samples[60].state.position();
    let catch_cfg = format!(
        "{SMOKE_CONFIG}\n[catch]\nworkspace = {{ center = [{}, {}, {}], inner_radius = 0.05, outer_radius = 0.4 }}\neffector_home = [{}, {}, {}]\n",
        mid.x, mid.y, mid.z, mid.x, mid.y, mid.z
    );
    let catch_cfg = write_config(tmp.path(), "catch.toml", &catch_cfg);
    let catch_dir = tmp.path().join("catch");
    let out = run(&[
        "catch-sim", "--config", path_str(&catch_cfg), "--out", path_str(&catch_dir),
        "--dataset", dataset_arg, "--baseline", "newton",
    ]);
    assert_ok(&out);
    let report = fs::read_to_string(catch_dir.join("catch_report.jsonl")).unwrap();
    let header: serde_json::Value =
        serde_json::from_str(report.lines().next().unwrap()).unwrap();
    assert_eq!(header["throws"], 12);
    assert!(header["feasible"].as_u64().unwrap() >= 1);
    assert_eq!(report.lines().count(), 13);

    // No stage may mutate its input dataset.
    assert_eq!(fs::read(&dataset).unwrap(), dataset_bytes);
}

const TINY_CONFIG: &str = r#"
seed = 3

[dataset]
count = 8

[train]
embed_dim = 8
hidden_dim = 8
epochs = 1
windows_per_trajectory = 1

[eval]
test_fraction = 0.25
metrics = ["leading_time"]
"#;

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", TINY_CONFIG);
    let cfg = path_str(&cfg);
    let gen_dir = tmp.path().join("gen");
    let train_dir = tmp.path().join("train");
    let eval_dir = tmp.path().join("eval");

    type ArtifactBytes = (Vec<u8>, Vec<u8>, Vec<u8>, Vec<u8>);
    let mut first: Option<ArtifactBytes> = None;
    for _ in 0..2 {
        assert_ok(&run(&["gen-data", "--config", cfg, "--out", path_str(&gen_dir)]));
        let dataset = gen_dir.join("dataset.jsonl");
        assert_ok(&run(&[
            "train", "--config", cfg, "--out", path_str(&train_dir),
            "--dataset", path_str(&dataset),
        ]));
        assert_ok(&run(&[
            "eval", "--config", cfg, "--out", path_str(&eval_dir),
            "--checkpoint", path_str(&train_dir.join("checkpoint-nae.json")),
            "--dataset", path_str(&dataset),
        ]));
        let snapshot = (
            fs::read(&dataset).unwrap(),
            fs::read(train_dir.join("checkpoint-nae.json")).unwrap(),
            fs::read(train_dir.join("loss_history.csv")).unwrap(),
            fs::read(eval_dir.join("leading_times.csv")).unwrap(),
        );
        match &first {
            None => first = Some(snapshot),
            Some(prev) => {
                assert_eq!(prev.0, snapshot.0, "dataset changed between reruns");
                assert_eq!(prev.1, snapshot.1, "checkpoint changed between reruns");
                assert_eq!(prev.2, snapshot.2, "loss history changed between reruns");
                assert_eq!(prev.3, snapshot.3, "leading times changed between reruns");
            }
        }
    }
}

#[test]
fn missing_dataset_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", TINY_CONFIG);
    let out = run(&[
        "train", "--config", path_str(&cfg),
        "--out", path_str(&tmp.path().join("out")),
        "--dataset", path_str(&tmp.path().join("nope.jsonl")),
    ]);
    assert_error(&out, 3, "io");
}

#[test]
fn unknown_config_key_is_a_schema_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", "seed = 1\nunknown_knob = true\n");
    let out = run(&[
        "gen-data", "--config", path_str(&cfg),
        "--out", path_str(&tmp.path().join("out")),
    ]);
    assert_error(&out, 4, "schema");
}

#[test]
fn invalid_values_are_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    // Threshold is validated before any dataset is touched.
    let cfg = write_config(
        tmp.path(),
        "run.toml",
        "[eval]\nthreshold = -1.0\nmetrics = [\"leading_time\"]\n",
    );
    let out = run(&[
        "eval", "--config", path_str(&cfg),
        "--out", path_str(&tmp.path().join("out")),
        "--dataset", path_str(&tmp.path().join("unused.jsonl")),
    ]);
    assert_error(&out, 2, "invalid-config");

    // Negative learning rate is rejected at training time.
    let cfg2 = write_config(
        tmp.path(),
        "bad_lr.toml",
        "[dataset]\ncount = 8\n[train]\nlearning_rate = -0.5\nembed_dim = 8\nhidden_dim = 8\nepochs = 1\n",
    );
    let gen_dir = tmp.path().join("gen");
    assert_ok(&run(&["gen-data", "--config", path_str(&cfg2), "--out", path_str(&gen_dir)]));
    let out = run(&[
        "train", "--config", path_str(&cfg2),
        "--out", path_str(&tmp.path().join("train")),
        "--dataset", path_str(&gen_dir.join("dataset.jsonl")),
    ]);
    assert_error(&out, 2, "invalid-config");
}

#[test]
fn runaway_training_exits_with_the_divergence_code() {
    let tmp = tempfile::tempdir().unwrap();
    // An absurd learning rate blows the decoder weights up after the first
    // update; the squared error overflows on the next window.
    let cfg = write_config(
        tmp.path(),
        "run.toml",
        "seed = 3\n[dataset]\ncount = 4\n[throws]\nduration = 0.3\n\
         [train]\nembed_dim = 8\nhidden_dim = 8\nepochs = 3\nlearning_rate = 1e200\n\
         prefix_len = 8\nfree_run_len = 8\n",
    );
    let gen_dir = tmp.path().join("gen");
    assert_ok(&run(&["gen-data", "--config", path_str(&cfg), "--out", path_str(&gen_dir)]));
    let out = run(&[
        "train", "--config", path_str(&cfg),
        "--out", path_str(&tmp.path().join("train")),
        "--dataset", path_str(&gen_dir.join("dataset.jsonl")),
    ]);
    assert_error(&out, 5, "training-diverged");
}

#[test]
fn catch_sim_requires_catch_section() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", TINY_CONFIG);
    let out = run(&[
        "catch-sim", "--config", path_str(&cfg),
        "--out", path_str(&tmp.path().join("out")),
        "--dataset", path_str(&tmp.path().join("unused.jsonl")),
        "--baseline", "newton",
    ]);
    assert_error(&out, 2, "invalid-config");
}

#[test]
fn zero_horizon_prediction_echoes_the_last_observed_state() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.toml", TINY_CONFIG);
    let cfg = path_str(&cfg);
    let gen_dir = tmp.path().join("gen");
    assert_ok(&run(&["gen-data", "--config", cfg, "--out", path_str(&gen_dir)]));
    let dataset = gen_dir.join("dataset.jsonl");
    let train_dir = tmp.path().join("train");
    assert_ok(&run(&[
        "train", "--config", cfg, "--out", path_str(&train_dir),
        "--dataset", path_str(&dataset),
    ]));
    let pred_dir = tmp.path().join("pred");
    assert_ok(&run(&[
        "predict", "--config", cfg, "--out", path_str(&pred_dir),
        "--checkpoint", path_str(&train_dir.join("checkpoint-nae.json")),
        "--dataset", path_str(&dataset),
        "--prefix-frames", "25", "--horizon", "0",
    ]));
    let predictions = fs::read_to_string(pred_dir.join("predictions.jsonl")).unwrap();
    let data = load_dataset(&dataset).unwrap();
    let mut lines = predictions.lines();
    let _header = lines.next().unwrap();
    for (record, traj) in lines.zip(&data.trajectories) {
        let record: serde_json::Value = serde_json::from_str(record).unwrap();
        let samples = record["samples"].as_array().unwrap();
        assert_eq!(samples.len(), 1, "zero horizon yields only the anchor frame");
        let row: Vec<f64> = samples[0]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_f64().unwrap())
            .collect();
        let expected = &traj.samples[24];
        assert_eq!(row[0], expected.time);
        let state = expected.state.to_array();
        for (got, want) in row[1..].iter().zip(state.iter()) {
            assert_eq!(got, want, "anchor must be the observed state, bit for bit");
        }
    }
}

#[test]
fn eval_split_reporting_matches_the_documented_example() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "run.toml",
        "[dataset]\ncount = 1500\n[eval]\ntest_fraction = 0.1\nmetrics = [\"leading_time\"]\n",
    );
    let cfg = path_str(&cfg);
    let gen_dir = tmp.path().join("gen");
    assert_ok(&run(&["gen-data", "--config", cfg, "--out", path_str(&gen_dir)]));
    let out = run(&[
        "eval", "--config", cfg, "--out", path_str(&tmp.path().join("eval")),
        "--dataset", path_str(&gen_dir.join("dataset.jsonl")),
    ]);
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("1350 train / 150 test"), "stdout: {stdout}");
}
