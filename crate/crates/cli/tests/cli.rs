use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_softbellman"))
}

fn run(out: &Path, args: &[&str]) -> Output {
    bin()
        .arg("--log-level")
        .arg("error")
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("spawn softbellman")
}

fn ok(out: &Path, args: &[&str]) -> Output {
    let o = run(out, args);
    assert!(
        o.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let key = path.strip_prefix(dir).unwrap().display().to_string();
                files.insert(key, fs::read(&path).unwrap());
            }
        }
    }
    files
}

#[test]
fn pipeline_from_simulation_to_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["simulate", "--grid", "3x3", "--predators", "1", "--full-episodes", "30", "--seed", "4"]);
    let traj = d.join("trajectories.jsonl");
    ok(d, &["estimate", "--trajectories", traj.to_str().unwrap()]);
    let game = d.join("game.json");
    ok(d, &["forward", "--game", game.to_str().unwrap(), "--policy-csv"]);
    let solution: serde_json::Value = serde_json::from_slice(&fs::read(d.join("solution.json")).unwrap()).unwrap();
    assert!(solution["residual_norm"].as_f64().unwrap() <= 1e-8);
    assert!(d.join("policy_player2.csv").exists());

    let obs = d.join("observations.json");
    ok(d, &["inverse", "--observations", obs.to_str().unwrap(), "--kmax", "3", "--seed", "7"]);
    let loss = fs::read_to_string(d.join("loss_seed7.csv")).unwrap();
    assert!(loss.starts_with("iter,loss\n1,"));

    let result = d.join("inverse_seed7.json");
    let o = ok(
        d,
        &[
            "evaluate",
            "--observations",
            obs.to_str().unwrap(),
            "--result",
            result.to_str().unwrap(),
            "--heatmap-grid",
            "3x3",
        ],
    );
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("mean_kl "));
    assert!(d.join("kl.csv").exists());
    assert!(d.join("kl_player1.csv").exists());
}

#[test]
fn experiment_outputs_are_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["experiment", "--grid", "3x3", "--predators", "1", "--seeds", "1,2", "--kmax", "5"];
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&a, &args);
    ok(&b, &args);
    let ta = read_tree(&a);
    let tb = read_tree(&b);
    assert!(ta.contains_key("proposed/summary.csv"));
    assert!(ta.contains_key("baseline/loss_seed2.csv"));
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (name, bytes) in &ta {
        assert!(bytes == &tb[name], "{name} differs between runs");
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let missing = d.join("missing.json");
    let o = run(d, &["forward", "--game", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));

    let bad = d.join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    let o = run(d, &["forward", "--game", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(d, &["simulate", "--grid", "0x3"]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(d, &["experiment", "--seeds", "one"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn forward_reports_non_convergence() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["simulate", "--grid", "3x3", "--predators", "1", "--episodes", "2"]);
    let config = d.join("config.json");
    fs::write(&config, r#"{"forward": {"max_iterations": 1}}"#).unwrap();
    let game = d.join("game.json");
    let o = bin()
        .args(["--log-level", "error", "--config"])
        .arg(&config)
        .arg("--out")
        .arg(d)
        .args(["forward", "--game", game.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}
