use std::path::Path;
use std::process::{Command, Output};

fn edgetp(args: &[&str], cwd: &Path) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_edgetp"))
        .args(args)
        .current_dir(cwd)
        .env_remove("EDGETP_SEED")
        .output()
        .expect("binary runs");
    assert!(
        out.status.success(),
        "edgetp {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const CONFIG: &str = r#"
model_path = "model.halm"
predictor_path = "pred.halp"
prompt_len = 4
num_tokens = 3
seeds = [0, 1]
threads = 2

[[devices]]
id = 0
memory_mb = 1000000.0
compute = 1.0
plr = 0.0

[[devices]]
id = 1
memory_mb = 1000000.0
compute = 2.0
plr = 0.0

[matrix]
plr = [0.0, 0.2]
mapping = ["halo", "random"]
"#;

#[test]
fn full_workflow_through_the_binary() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("exp.toml"), CONFIG).unwrap();

    edgetp(&["init-model", "--set", "model.num_layers=3", "--seed", "7", "-o", "model.halm"], d);
    edgetp(&["calibrate", "--model", "model.halm", "--prompts", "4", "--prompt-len", "4", "-o", "samples.jsonl"], d);
    let samples = std::fs::read_to_string(d.join("samples.jsonl")).unwrap();
    // 4 prompts x 4 positions x 2 source layers x 2 kinds.
    assert_eq!(samples.lines().count(), 64);

    let out = edgetp(&["train-sap", "--model", "model.halm", "--samples", "samples.jsonl", "--epochs", "3", "-o", "pred.halp"], d);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(report["validation_mse"]["mha"].is_number());

    let out = edgetp(&["schedule", "-c", "exp.toml"], d);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("[[device]]"), "{text}");

    let out = edgetp(&["generate", "-c", "exp.toml", "--trace", "trace.jsonl"], d);
    let g: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(g["tokens"].as_array().unwrap().len(), 3);
    assert!(g["max_relative_error"].as_f64().unwrap() < 1e-5);
    assert!(std::fs::read_to_string(d.join("trace.jsonl")).unwrap().contains("\"record\":\"token\""));

    let out = edgetp(&["matrix", "-c", "exp.toml", "-o", "run"], d);
    let summary = std::fs::read_to_string(d.join("run/summary.csv")).unwrap();
    assert_eq!(String::from_utf8(out.stdout).unwrap(), summary);
    assert_eq!(summary.lines().count(), 1 + 4);
    assert_eq!(std::fs::read_to_string(d.join("run/records.jsonl")).unwrap().lines().count(), 8);

    let out = edgetp(&["report", "-c", "exp.toml", "--records", "run/records.jsonl"], d);
    assert_eq!(String::from_utf8(out.stdout).unwrap(), summary);
}

#[test]
fn seed_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let run = |seed: &str, name: &str| {
        let st = Command::new(env!("CARGO_BIN_EXE_edgetp"))
            .args(["init-model", "-o", name])
            .env("EDGETP_SEED", seed)
            .current_dir(d)
            .output()
            .unwrap();
        assert!(st.status.success());
        std::fs::read(d.join(name)).unwrap()
    };
    let a = run("3", "a.halm");
    assert_eq!(a, run("3", "b.halm"));
    assert_ne!(a, run("4", "c.halm"));
}

#[test]
fn bad_input_fails_with_a_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_edgetp"))
        .args(["generate", "--set", "no_such_key=1"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));

    let out = Command::new(env!("CARGO_BIN_EXE_edgetp"))
        .args(["schedule"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
}
