use std::path::Path;
use std::process::{Command, Output};

fn conveyor(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_conveyor"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = conveyor(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn short_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("short.toml");
    std::fs::write(&path, "[sim]\nhorizon = 120.0\n").unwrap();
    path
}

fn manifest(path: &Path) -> serde_json::Value {
    let text = std::fs::read_to_string(format!("{}.manifest.json", path.display())).unwrap();
    serde_json::from_str(&text).unwrap()
}

#[test]
fn eval_writes_csv_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path());
    let out = dir.path().join("eval.csv");
    ok(&[
        "eval",
        "--config",
        p(&cfg),
        "--policy",
        "high",
        "--episodes",
        "2",
        "--seeds",
        "2",
        "--seed",
        "7",
        "--out",
        p(&out),
    ]);

    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    assert!(lines[0].starts_with("seed,episode,throughput"));
    assert!(lines[1].starts_with("7,0,") && lines[4].starts_with("8,1,"));

    let m = manifest(&out);
    assert_eq!(m["policy"], "high");
    assert_eq!(m["config"]["sim"]["horizon"], 120.0);
    let hash = m["config_hash"].as_str().unwrap();
    assert_eq!(hash.len(), 16);

    // Same inputs, same outputs.
    let again = dir.path().join("again.csv");
    ok(&[
        "eval",
        "--config",
        p(&cfg),
        "--policy",
        "high",
        "--episodes",
        "2",
        "--seeds",
        "2",
        "--seed",
        "7",
        "--out",
        p(&again),
    ]);
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(&again).unwrap());
    assert_eq!(manifest(&again)["config_hash"], hash);
}

#[test]
fn data_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path());
    let (low, sll, mix) = (
        dir.path().join("low.dat"),
        dir.path().join("sll.dat"),
        dir.path().join("mix.dat"),
    );
    ok(&[
        "gen-data",
        "--config",
        p(&cfg),
        "--policy",
        "low",
        "--episodes",
        "3",
        "--seed",
        "1",
        "--out",
        p(&low),
    ]);
    ok(&[
        "gen-data",
        "--config",
        p(&cfg),
        "--policy",
        "sll",
        "--episodes",
        "3",
        "--seed",
        "2",
        "--out",
        p(&sll),
    ]);
    assert_eq!(manifest(&low)["source"]["policy"], "low");
    assert_eq!(manifest(&low)["counts"]["n_trajectories"], 12);

    let inputs = format!("{},{}", p(&low), p(&sll));
    ok(&[
        "mix",
        "--inputs",
        &inputs,
        "--per-source",
        "2",
        "--seed",
        "5",
        "--out",
        p(&mix),
    ]);
    assert_eq!(manifest(&mix)["counts"]["n_trajectories"], 16);

    let stats = dir.path().join("stats.csv");
    let printed = ok(&["stats", "--data", p(&mix), "--out", p(&stats)]);
    assert!(printed.contains("16 trajectories"));
    let csv = std::fs::read_to_string(&stats).unwrap();
    assert!(csv.starts_with("metric,min,q1,median,q3,max\nreturn,"));
    assert!(manifest(&stats)["config_hash"].is_string());
}

#[test]
fn dt_eval_and_sweep_from_initialized_weights() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = short_config(dir.path());
    let w = dir.path().join("w.dtw");
    ok(&[
        "init-weights",
        "--config",
        p(&cfg),
        "--embed-dim",
        "16",
        "--n-layers",
        "1",
        "--seed",
        "3",
        "--out",
        p(&w),
    ]);

    let eval = dir.path().join("dt.csv");
    ok(&[
        "eval",
        "--config",
        p(&cfg),
        "--policy",
        "dt",
        "--weights",
        p(&w),
        "--target-return",
        "auto-median:medium",
        "--episodes",
        "1",
        "--seeds",
        "2",
        "--out",
        p(&eval),
    ]);
    let m = manifest(&eval);
    assert_eq!(m["policy"], "dt");
    assert!(m["target_return"].as_i64().unwrap() > 0);

    let sweep = dir.path().join("sweep.csv");
    ok(&[
        "sweep",
        "--config",
        p(&cfg),
        "--weights",
        p(&w),
        "--target-return",
        "300",
        "--offsets=-50,50",
        "--episodes",
        "1",
        "--seeds",
        "1",
        "--temperature",
        "1.0",
        "--out",
        p(&sweep),
    ]);
    let text = std::fs::read_to_string(&sweep).unwrap();
    let targets: Vec<&str> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap())
        .collect();
    assert_eq!(targets, ["250", "350"]);
}

#[test]
fn errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.csv");
    let missing = dir.path().join("missing.toml");
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[sim]\nn_loops = 0\n").unwrap();

    let cases: Vec<Vec<&str>> = vec![
        vec!["eval", "--policy", "greedy", "--out", p(&out)],
        vec!["eval", "--policy", "dt", "--out", p(&out)],
        vec![
            "eval",
            "--policy",
            "high",
            "--weights",
            "w.dtw",
            "--out",
            p(&out),
        ],
        vec![
            "eval",
            "--policy",
            "high",
            "--config",
            p(&missing),
            "--out",
            p(&out),
        ],
        vec![
            "eval",
            "--policy",
            "high",
            "--config",
            p(&bad),
            "--out",
            p(&out),
        ],
        vec![
            "eval",
            "--policy",
            "high",
            "--episodes",
            "0",
            "--out",
            p(&out),
        ],
        vec![
            "sweep",
            "--weights",
            "nope.dtw",
            "--target-return",
            "10",
            "--out",
            p(&out),
        ],
        vec!["stats", "--data", "nope.dat"],
        vec!["frobnicate"],
    ];
    for args in cases {
        let o = conveyor(&args);
        assert!(!o.status.success(), "{args:?} should fail");
        assert!(!o.stderr.is_empty());
    }
}
