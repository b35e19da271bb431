use std::path::Path;
use std::process::{Command, Output};

use dcshield::cli::RunManifest;
use serde_json::Value;

fn dcshield(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcshield")).current_dir(dir).args(args).output().expect("binary runs")
}

fn json(dir: &Path, args: &[&str]) -> Value {
    let mut all = args.to_vec();
    all.push("--json");
    let out = dcshield(dir, &all);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("json on stdout")
}

#[test]
fn build_env_writes_files_and_a_reproducible_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let r = json(dir.path(), &["build-env", "--env", "car-following", "--out-dir", "a"]);
    assert_eq!(r["states"], 484);
    let manifest = RunManifest::read(&dir.path().join("a/env.mdp.manifest.json")).unwrap();
    assert_eq!(manifest.subcommand, "build-env");
    let listed: Vec<_> = manifest.outputs.iter().map(|f| f.path.to_str().unwrap().to_string()).collect();
    assert_eq!(listed, ["a/env.mdp", "a/env.meta.json", "a/controller.txt"]);
    for f in &manifest.outputs {
        let digest = dcshield::digest::file_digest(&dir.path().join(&f.path)).unwrap();
        assert_eq!(digest, f.sha256, "{}", f.path.display());
    }

    json(dir.path(), &["build-env", "--env", "car-following", "--out-dir", "b"]);
    for f in ["env.mdp", "env.meta.json", "controller.txt"] {
        let a = std::fs::read(dir.path().join("a").join(f)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between runs");
    }
}

#[test]
fn metadata_file_round_trips_through_later_subcommands() {
    let dir = tempfile::tempdir().unwrap();
    json(dir.path(), &["build-env", "--env", "gridworld", "--out-dir", "g"]);
    let from_file = json(dir.path(), &["verify", "--env", "g/env.meta.json", "--mode", "policy"]);
    let built_in = json(dir.path(), &["verify", "--env", "gridworld", "--mode", "policy"]);
    assert_eq!(from_file["initial_value"], built_in["initial_value"]);
    let via_policy_file = json(
        dir.path(),
        &["verify", "--env", "gridworld", "--mode", "policy", "--policy", "g/controller.txt"],
    );
    assert_eq!(via_policy_file["initial_value"], built_in["initial_value"]);

    // tampering with the recorded digest is caught
    let meta_path = dir.path().join("g/env.meta.json");
    let mut meta: Value = serde_json::from_str(&std::fs::read_to_string(&meta_path).unwrap()).unwrap();
    meta["mdp_digest"] = Value::String("0".repeat(64));
    std::fs::write(&meta_path, meta.to_string()).unwrap();
    let out = dcshield(dir.path(), &["verify", "--env", "g/env.meta.json"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn product_sizes_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let r = json(dir.path(), &["build-dcmdp", "--env", "car-following", "--mostly-zero", "3"]);
    assert_eq!(r["states"], 75_504);
    let r = json(dir.path(), &["build-dcmdp", "--env", "car-following", "--constant", "2"]);
    assert_eq!(r["states"], 484 * 25);
}

#[test]
fn product_files_parse_back_as_mdps() {
    let dir = tempfile::tempdir().unwrap();
    let r = json(
        dir.path(),
        &["build-dcmdp", "--env", "car-following", "--constant", "1", "--out", "p.mdp", "--mapping", "p.map"],
    );
    let direct = json(dir.path(), &["verify", "--env", "car-following", "--constant", "1"]);
    let from_file = json(dir.path(), &["verify", "--mdp", "p.mdp"]);
    assert_eq!(from_file["states"], r["states"]);
    let (a, b) = (direct["initial_value"].as_f64().unwrap(), from_file["initial_value"].as_f64().unwrap());
    assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    let mapping = std::fs::read_to_string(dir.path().join("p.map")).unwrap();
    assert!(mapping.lines().count() >= 484 * 5);
}

#[test]
fn zero_delay_verify_prints_the_max_value() {
    let dir = tempfile::tempdir().unwrap();
    let out = dcshield(dir.path(), &["verify", "--env", "gridworld", "--constant", "0", "--objective", "safety"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().any(|l| l.starts_with("initial_value: ")), "{text}");
}

#[test]
fn infeasible_target_exits_3_with_the_bound() {
    let dir = tempfile::tempdir().unwrap();
    let out = dcshield(
        dir.path(),
        &["synthesize-shield", "--env", "car-following", "--constant", "1", "--delta", "1.1", "--out", "s.txt"],
    );
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("feasibility bound"), "{err}");
    assert!(!dir.path().join("s.txt").exists());
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(dcshield(dir.path(), &["verify", "--bogus"]).status.code(), Some(2));
    assert_eq!(dcshield(dir.path(), &["frobnicate"]).status.code(), Some(2));
    let both = ["build-dcmdp", "--env", "gridworld", "--constant", "1", "--mostly-zero", "1"];
    assert_eq!(dcshield(dir.path(), &both).status.code(), Some(2));
    assert_eq!(dcshield(dir.path(), &["build-dcmdp", "--env", "nowhere", "--constant", "1"]).status.code(), Some(2));
}

#[test]
fn shield_pipeline_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let s = json(
        dir.path(),
        &[
            "synthesize-shield", "--env", "car-following", "--constant", "2", "--seeds", "init", "--delta", "0.9",
            "--mode", "policy-free", "--eta", "0.1", "--out", "s.txt",
        ],
    );
    assert!(s["certified"].as_f64().unwrap() >= 0.9);
    assert!(dir.path().join("s.txt.manifest.json").exists());

    let sim = [
        "simulate", "--env", "car-following", "--constant", "2", "--seeds", "init", "--shield", "s.txt",
        "--episodes", "20", "--seed", "9", "--log", "run.jsonl",
    ];
    let r = json(dir.path(), &sim);
    assert_eq!(r["episodes"], 20);
    let log = std::fs::read_to_string(dir.path().join("run.jsonl")).unwrap();
    let records: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.last().unwrap()["record"], "summary");
    assert_eq!(records.iter().filter(|r| r["record"] == "episode").count(), 20);
    assert!(records.iter().any(|r| r["record"] == "tick"));
    // same seeds, same bytes
    let first = std::fs::read(dir.path().join("run.jsonl")).unwrap();
    json(dir.path(), &sim);
    assert_eq!(first, std::fs::read(dir.path().join("run.jsonl")).unwrap());

    let wrong = [
        "simulate", "--env", "car-following", "--mostly-zero", "2", "--seeds", "init", "--shield", "s.txt",
        "--episodes", "2", "--log", "x.jsonl",
    ];
    let out = dcshield(dir.path(), &wrong);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("mismatch"));
}

#[test]
fn delay_estimation_from_csv() {
    let dir = tempfile::tempdir().unwrap();
    let trace = "timestamp_ms,delay_ms\n0,10\n100,120\n200,250\n300,20\n400,30\n500,150\n600,40\n";
    std::fs::write(dir.path().join("t.csv"), trace).unwrap();
    let r = json(dir.path(), &["estimate-delay-model", "--trace", "t.csv", "--out", "m.txt"]);
    assert_eq!(r["tau_max"], 2);
    assert_eq!(r["transitions"], 6);
    let m = json(dir.path(), &["build-dcmdp", "--env", "car-following", "--delay-model", "m.txt", "--seeds", "init"]);
    assert!(m["states"].as_u64().unwrap() > 484);
}

#[test]
fn served_sessions_accept_shields_from_the_cli() {
    use std::io::{BufRead, BufReader};
    use std::process::Stdio;

    use dcshield::teleop::{Message, SessionMode, TeleopClient};

    let dir = tempfile::tempdir().unwrap();
    json(
        dir.path(),
        &["synthesize-shield", "--env", "car-following", "--constant", "1", "--delta", "0.9", "--mode", "policy-free", "--out", "s.json"],
    );
    let mut child = Command::new(env!("CARGO_BIN_EXE_dcshield"))
        .current_dir(dir.path())
        .args(["serve", "--addr", "127.0.0.1:0", "--env", "car=car-following", "--channel", "c1=constant:1", "--shield", "s=s.json"])
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stderr.take().unwrap()).read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").expect("address line").to_string();

    let mut client = TeleopClient::connect(addr.as_str()).unwrap();
    client.set_timeout(Some(std::time::Duration::from_secs(60))).unwrap();
    let reply = client.request(&Message::Create {
        env: "car".into(),
        channel: "c1".into(),
        shield: "s".into(),
        mode: SessionMode::TurnBased,
        seed: Some(3),
        horizon: None,
    });
    child.kill().unwrap();
    child.wait().unwrap();
    match reply.unwrap() {
        Message::Created { guarantee, .. } => assert!(guarantee.unwrap().certified >= 0.9),
        other => panic!("expected a session, got {other:?}"),
    }
}
