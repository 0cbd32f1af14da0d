use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_homog-mlmc"));
    c.env_remove("MLMC_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

const SMALL_1D: &str = r#"
experiment = "coeff-1d"
nb = 4
base_seed = 9
[coeff_1d]
family = "ex3"
m_last = 5
"#;

#[test]
fn shipped_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for e in std::fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        let out = run(&["validate", "--config", p.to_str().unwrap()]);
        assert!(out.status.success(), "{}: {}", p.display(), String::from_utf8_lossy(&out.stdout));
        n += 1;
    }
    assert!(n >= 6);
}

#[test]
fn invalid_config_exits_2_and_names_field() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(
        d.path(),
        "bad.toml",
        "base_seed = 1\n[coeff_2d]\nfamily = \"product\"\neta = [0.5, 0.25, 0.125]\n",
    );
    let out = run(&["validate", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stdout).contains("coeff_2d.eta"));
    let out = run(&["coeff-2d", "--config", &cfg, "--out", d.path().join("o").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("coeff_2d.eta"));
}

#[test]
fn unknown_key_and_missing_seed_exit_2() {
    let d = tempfile::tempdir().unwrap();
    let unknown = write(d.path(), "u.toml", "base_seed = 1\n[coeff_1d]\nfamily = \"ex2\"\nbogus = 3\n");
    assert_eq!(run(&["coeff-1d", "--config", &unknown]).status.code(), Some(2));
    let noseed = write(d.path(), "n.toml", "[coeff_1d]\nfamily = \"ex2\"\n");
    let out = run(&["coeff-1d", "--config", &noseed]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("base_seed"));
}

#[test]
fn experiment_mismatch_exits_2() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "c.toml", SMALL_1D);
    assert_eq!(run(&["solution-1d", "--config", &cfg]).status.code(), Some(2));
}

#[test]
fn artifacts_and_reruns_are_identical() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "c.toml", SMALL_1D);
    let (a, b) = (d.path().join("a"), d.path().join("b"));
    for (dir, threads) in [(&a, "1"), (&b, "3")] {
        let out = bin()
            .args(["coeff-1d", "--config", &cfg, "--out", dir.to_str().unwrap()])
            .env("MLMC_THREADS", threads)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["summary.csv", "repetitions.csv", "levels.csv", "plot.py"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(b.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["threads"], 3);
    assert_eq!(m["base_seed"], 9);
    assert!(m["derived"]["m_hat"].as_u64().unwrap() > 0);
    let summary = std::fs::read_to_string(a.join("summary.csv")).unwrap();
    assert!(summary.starts_with("estimator,quantity,measure,value,ci_low,ci_high,nb,samples,cost\n"));
}

#[test]
fn flags_override_config() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write(d.path(), "c.toml", SMALL_1D);
    let out_dir = d.path().join("o");
    let out = bin()
        .args(["coeff-1d", "--config", &cfg, "--seed", "77", "--threads", "2", "--out", out_dir.to_str().unwrap()])
        .env("MLMC_THREADS", "5")
        .output()
        .unwrap();
    assert!(out.status.success());
    let m: serde_json::Value = serde_json::from_slice(&std::fs::read(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["base_seed"], 77);
    assert_eq!(m["threads"], 2);
}

#[test]
fn weighted_cost_runs_without_config() {
    let d = tempfile::tempdir().unwrap();
    let out = run(&["weighted-cost", "--out", d.path().to_str().unwrap()]);
    assert!(out.status.success());
    let rows = std::fs::read_to_string(d.path().join("summary.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 3 * 3 * 15);
}
