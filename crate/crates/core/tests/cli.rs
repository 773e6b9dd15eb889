use std::path::Path;
use std::process::{Command, Output};

use vortex::metrics::dominated_flags;

fn vortex(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vortex")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, seed: u64) -> String {
    let path = dir.join(format!("c{seed}.json"));
    let cfg = serde_json::json!({
        "env": "builtin:conservation",
        "directive": "density=Low",
        "horizon": 12,
        "episodes": 4,
        "seed": seed,
    });
    std::fs::write(&path, cfg.to_string()).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn validate_env_reports_armman() {
    let o = vortex(&["validate-env", "builtin:armman"]);
    assert!(o.status.success());
    let first = stdout(&o).lines().next().unwrap().to_string();
    assert!(first.contains("N=800, B=400, T=50, 8 types"), "{first}");
    assert!(first.contains("all rows valid"));
}

#[test]
fn validate_env_rejects_bad_rows() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    let spec = include_str!("../envs/conservation.json").replacen("0.85,", "0.95,", 1);
    std::fs::write(&path, spec).unwrap();
    let o = vortex(&["validate-env", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert_eq!(err.trim().lines().count(), 1, "{err}");
    assert!(err.contains("type 0"), "{err}");
}

#[test]
fn run_twice_gives_identical_logs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 9);
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = vortex(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let read = |n: &str| std::fs::read(dir.path().join(n).join("episodes.jsonl")).unwrap();
    assert_eq!(read("a"), read("b"));

    let o = vortex(&["replay", dir.path().join("a").to_str().unwrap()]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("identical"));
}

#[test]
fn flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 1);
    let out = dir.path().join("o");
    let o = vortex(&[
        "run", "--config", &cfg, "--episodes", "2", "--seed", "5", "--lambda", "0.9", "--no-crn", "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success());
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["config"]["episodes"], 2);
    assert_eq!(m["config"]["seed"], 5);
    assert_eq!(m["config"]["crn"], false);
    assert_eq!(m["lambda"], 0.9);
}

#[test]
fn pareto_merges_runs() {
    let dir = tempfile::tempdir().unwrap();
    let mut dirs = Vec::new();
    for seed in [1, 2] {
        let cfg = write_config(dir.path(), seed);
        let out = dir.path().join(format!("run{seed}"));
        assert!(vortex(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]).status.success());
        dirs.push(out);
    }
    let merged = dir.path().join("merged.csv");
    let mut args = vec!["pareto".to_string()];
    args.extend(dirs.iter().map(|d| d.to_string_lossy().into_owned()));
    args.extend(["--out".into(), merged.to_string_lossy().into_owned()]);
    let o = Command::new(env!("CARGO_BIN_EXE_vortex")).args(&args).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    // Pairwise oracle over every input point.
    let mut all = Vec::new();
    for d in &dirs {
        let mut r = csv::Reader::from_path(d.join("pareto.csv")).unwrap();
        for row in r.records() {
            let row = row.unwrap();
            all.push((row[1].parse::<f64>().unwrap(), row[2].parse::<f64>().unwrap()));
        }
    }
    let dominated = |p: (f64, f64)| {
        all.iter()
            .any(|q| q.0 >= p.0 && q.1 <= p.1 && (q.0 > p.0 || q.1 < p.1))
    };
    let mut expected: Vec<(f64, f64)> = all.iter().copied().filter(|&p| !dominated(p)).collect();
    expected.sort_by(|a, b| a.partial_cmp(b).unwrap());
    expected.dedup();

    let mut r = csv::Reader::from_path(&merged).unwrap();
    assert_eq!(r.headers().unwrap(), vec!["source", "k", "U", "C"]);
    let mut got: Vec<(f64, f64)> = r
        .records()
        .map(|row| {
            let row = row.unwrap();
            (row[2].parse().unwrap(), row[3].parse().unwrap())
        })
        .collect();
    got.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(got, expected);
    assert!(dominated_flags(&got).iter().all(|d| !d));
}

#[test]
fn sweep_writes_per_lambda_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), 3);
    let out = dir.path().join("sweep");
    let o = vortex(&["sweep", "--config", &cfg, "--lambdas", "0.4,0.8", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("lambda-00").join("episodes.jsonl").is_file());
    assert!(out.join("lambda-01").join("episodes.jsonl").is_file());
    assert!(out.join("sweep_pareto.csv").is_file());
    assert_eq!(stdout(&o).lines().count(), 3);
}

#[test]
fn usage_and_runtime_errors() {
    let o = vortex(&[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));

    let o = vortex(&["run", "--episodes", "0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: "));

    let o = vortex(&["run", "--backend", "scripted"]);
    assert_eq!(o.status.code(), Some(1));

    let o = vortex(&["replay", "/no/such/run"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn remote_without_credential_fails_cleanly() {
    let o = Command::new(env!("CARGO_BIN_EXE_vortex"))
        .args(["run", "--backend", "remote", "--episodes", "1"])
        .env_remove("VORTEX_LLM_API_KEY")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("VORTEX_LLM_API_KEY"));
}
