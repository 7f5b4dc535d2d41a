//! End-to-end tests against the compiled binary: flag handling, config
//! validation, output stamping, determinism, and the file round-trips.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use diffres::points::PointSet;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_diffres"));
    cmd.env_remove("DIFFRES_OUT");
    cmd
}

/// Fresh scratch directory per test, emptied on entry so reruns start
/// clean.
fn scratch(test: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("diffres-cli-tests").join(test);
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn write(path: &Path, content: &str) {
    fs::write(path, content).unwrap();
}

fn assert_success(out: &Output) {
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// A fast synthetic config: the four-disk dataset, a handful of rounds and
/// epochs.
const TINY_SYNTH: &str = r#"{
  "dataset": "xor",
  "n_top": 10,
  "sigma": { "fixed": 0.5 },
  "gamma": 0.5,
  "rounds": 5,
  "lr": 1.0,
  "momentum": 0.9,
  "weight_decay": 0.0005,
  "epochs": 3,
  "snapshot_epochs": [1]
}"#;

#[test]
fn same_seed_reproduces_every_output_byte() {
    let dir = scratch("determinism");
    let config = dir.join("synth.json");
    write(&config, TINY_SYNTH);
    let out_a = dir.join("a");
    let out_b = dir.join("b");
    for out in [&out_a, &out_b] {
        let result = bin()
            .args(["train-synthetic", "--config"])
            .arg(&config)
            .args(["--seed", "7", "--out"])
            .arg(out)
            .output()
            .unwrap();
        assert_success(&result);
    }
    for file in ["trace.csv", "run.json", "params.json", "features_epoch_1.csv"] {
        let a = fs::read(out_a.join(file)).unwrap();
        let b = fs::read(out_b.join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between identical runs");
    }
}

#[test]
fn outputs_are_stamped_with_the_config_hash() {
    let dir = scratch("stamping");
    let config = dir.join("synth.json");
    write(&config, TINY_SYNTH);
    let result = bin()
        .args(["train-synthetic", "--config"])
        .arg(&config)
        .args(["--seed", "1", "--out"])
        .arg(&dir)
        .output()
        .unwrap();
    assert_success(&result);

    let trace = fs::read_to_string(dir.join("trace.csv")).unwrap();
    let first = trace.lines().next().unwrap();
    assert!(
        first.starts_with("# config ") && first.len() == "# config ".len() + 16,
        "unexpected stamp line: {first:?}"
    );
    let stamp = first.trim_start_matches("# config ").to_string();

    let run: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["config_hash"], serde_json::Value::String(stamp));
    assert_eq!(run["epochs_completed"], 3);
}

#[test]
fn no_diffusion_flag_zeroes_the_rounds() {
    let dir = scratch("no-diffusion");
    let config = dir.join("synth.json");
    write(&config, TINY_SYNTH);
    let result = bin()
        .args(["train-synthetic", "--config"])
        .arg(&config)
        .args(["--seed", "1", "--no-diffusion", "--out"])
        .arg(&dir)
        .output()
        .unwrap();
    assert_success(&result);
    let run: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["rounds"], 0);
    assert_eq!(run["gamma_used"], 0.0);
    assert_eq!(run["no_diffusion"], true);
}

#[test]
fn unknown_config_key_is_a_hard_error() {
    let dir = scratch("unknown-key");
    let config = dir.join("synth.json");
    write(
        &config,
        &TINY_SYNTH.replace("\"epochs\": 3,", "\"epochs\": 3, \"learning_rate\": 0.1,"),
    );
    let result = bin()
        .args(["train-synthetic", "--config"])
        .arg(&config)
        .args(["--out"])
        .arg(&dir)
        .output()
        .unwrap();
    assert!(!result.status.success(), "a typo'd key must fail the run");
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("learning_rate"), "stderr: {stderr}");
}

#[test]
fn missing_required_config_is_reported() {
    let result = bin().arg("train-synthetic").output().unwrap();
    assert!(!result.status.success());
    let stderr = String::from_utf8_lossy(&result.stderr);
    assert!(stderr.contains("--config"), "stderr: {stderr}");
}

#[test]
fn env_var_sets_the_default_output_directory() {
    let dir = scratch("env-out");
    let config = dir.join("synth.json");
    write(&config, TINY_SYNTH);
    let env_dir = dir.join("from-env");
    let result = bin()
        .env("DIFFRES_OUT", &env_dir)
        .args(["train-synthetic", "--config"])
        .arg(&config)
        .args(["--seed", "1"])
        .output()
        .unwrap();
    assert_success(&result);
    assert!(env_dir.join("run.json").exists(), "outputs missing from the env-var directory");
}

#[test]
fn verify_claim_filter_and_report_schema() {
    let dir = scratch("verify");
    let config = dir.join("verify.json");
    write(
        &config,
        r#"{ "stability_graphs": 2, "oracle_graphs": 1, "flow_instances": 2, "separation_datasets": 1 }"#,
    );
    let result = bin()
        .args(["verify", "--config"])
        .arg(&config)
        .args(["--seed", "3", "--claim", "flow-construction", "--out"])
        .arg(&dir)
        .output()
        .unwrap();
    assert_success(&result);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], true);
    let claims = report["claims"].as_array().unwrap();
    assert_eq!(claims.len(), 1, "--claim must restrict the report");
    assert_eq!(claims[0]["name"], "flow-construction");
    assert_eq!(claims[0]["passed"], true);
    assert_eq!(claims[0]["instances"], 2);

    let unknown = bin()
        .args(["verify", "--claim", "no-such-claim", "--out"])
        .arg(&dir)
        .output()
        .unwrap();
    assert!(!unknown.status.success());
    let stderr = String::from_utf8_lossy(&unknown.stderr);
    assert!(stderr.contains("stability"), "the error must list valid claims: {stderr}");
}

#[test]
fn build_graph_then_diffuse_round_trip() {
    let dir = scratch("round-trip");
    // Two well-separated triods; labels survive the trip.
    let mut csv = String::from("x_1,x_2,label\n");
    for i in 0..6 {
        let (cx, label) = if i < 3 { (0.0, 0) } else { (10.0, 1) };
        csv.push_str(&format!("{},{},{label}\n", cx + 0.1 * i as f64, 0.2 * i as f64));
    }
    let points = dir.join("points.csv");
    write(&points, &csv);

    let build_cfg = dir.join("build.json");
    write(
        &build_cfg,
        &format!(
            r#"{{ "points": {:?}, "n_top": 2, "sigma": {{ "adaptive": 2 }} }}"#,
            points.to_str().unwrap()
        ),
    );
    let result = bin()
        .args(["build-graph", "--config"])
        .arg(&build_cfg)
        .arg("--out")
        .arg(&dir)
        .output()
        .unwrap();
    assert_success(&result);
    let graph: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("graph.json")).unwrap()).unwrap();
    assert_eq!(graph["n"], 6);
    assert_eq!(graph["components"], 2);
    let edges = fs::read_to_string(dir.join("edges.txt")).unwrap();
    assert!(edges.starts_with("# config "));
    for line in edges.lines().skip(1) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        assert_eq!(fields.len(), 3, "bad edge row: {line:?}");
        let i: usize = fields[0].parse().unwrap();
        let j: usize = fields[1].parse().unwrap();
        let w: f64 = fields[2].parse().unwrap();
        assert!(i < j && w > 0.0, "bad edge row: {line:?}");
    }

    let diffuse_cfg = dir.join("diffuse.json");
    write(
        &diffuse_cfg,
        &format!(
            r#"{{ "points": {:?}, "n_top": 2, "sigma": {{ "adaptive": 2 }}, "gamma": 0.5, "rounds": 4 }}"#,
            points.to_str().unwrap()
        ),
    );
    let result = bin()
        .args(["diffuse", "--config"])
        .arg(&diffuse_cfg)
        .arg("--out")
        .arg(&dir)
        .output()
        .unwrap();
    assert_success(&result);

    let original = PointSet::read_csv(&points).unwrap();
    let diffused = PointSet::read_csv(dir.join("diffused.csv")).unwrap();
    assert_eq!(diffused.n(), original.n());
    assert_eq!(diffused.labels(), original.labels());
    assert_ne!(
        diffused.coords(),
        original.coords(),
        "four diffusion rounds must move the points"
    );
}
