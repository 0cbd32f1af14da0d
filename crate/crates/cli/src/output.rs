//! Artifact files: CSV tables, a matplotlib script and a JSON manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, ExperimentKind};
use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<String, CliError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).map_err(io_err)?;
        for r in &self.rows {
            w.write_record(r).map_err(io_err)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

fn io_err(e: csv::Error) -> CliError {
    CliError::Io(e.to_string())
}

/// Shortest round-trip decimal representation.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}

/// Results of one experiment run, independent of where they are written.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub summary: Table,
    pub repetitions: Table,
    pub levels: Table,
    /// Derived quantities recorded in the manifest (m̂, M̂, references, fits).
    pub derived: BTreeMap<String, serde_json::Value>,
    /// Scalar results by key, e.g. `mean/mlmc/relative_mse`.
    pub metrics: BTreeMap<String, f64>,
    /// Per-repetition errors by key, e.g. `mean/mlmc`.
    pub errors: BTreeMap<String, Vec<f64>>,
}

impl Report {
    pub fn metric(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).copied()
    }
}

#[derive(Serialize)]
struct Manifest<'a> {
    experiment: &'a str,
    config_sha256: String,
    base_seed: u64,
    threads: usize,
    nb: usize,
    package: &'static str,
    version: &'static str,
    created_unix: u64,
    files: Vec<&'static str>,
    derived: &'a BTreeMap<String, serde_json::Value>,
    config: &'a ExperimentConfig,
}

pub fn config_hash(config: &ExperimentConfig) -> String {
    let mut h = Sha256::new();
    h.update(config.to_toml().as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub const CSV_FILES: [&str; 3] = ["summary.csv", "repetitions.csv", "levels.csv"];

/// Writes the CSVs, `plot.py` and `manifest.json` into `dir`.
pub fn write_artifacts(
    dir: &Path,
    kind: ExperimentKind,
    config: &ExperimentConfig,
    threads: usize,
    report: &Report,
) -> Result<Vec<PathBuf>, CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    let mut written = Vec::new();
    let mut put = |name: &str, body: String| -> Result<(), CliError> {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
        written.push(p);
        Ok(())
    };
    put("summary.csv", report.summary.to_csv()?)?;
    put("repetitions.csv", report.repetitions.to_csv()?)?;
    put("levels.csv", report.levels.to_csv()?)?;
    put("plot.py", plot_script(kind))?;
    let manifest = Manifest {
        experiment: kind.name(),
        config_sha256: config_hash(config),
        base_seed: config.base_seed.unwrap_or(0),
        threads,
        nb: config.nb(),
        package: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        files: vec!["summary.csv", "repetitions.csv", "levels.csv", "plot.py"],
        derived: &report.derived,
        config,
    };
    put("manifest.json", serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n")?;
    Ok(written)
}

const PLOT_HEADER: &str = r#"#!/usr/bin/env python3
import csv
import os
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

HERE = os.path.dirname(os.path.abspath(__file__))


def read(name):
    with open(os.path.join(HERE, name), newline="") as f:
        return list(csv.DictReader(f))


summary = read("summary.csv")
reps = read("repetitions.csv")
levels = read("levels.csv")
"#;

const PLOT_ERRORS: &str = r#"
quantities = sorted({r["quantity"] for r in summary})
fig, axes = plt.subplots(1, len(quantities), figsize=(5 * len(quantities), 4), squeeze=False)
for ax, q in zip(axes[0], quantities):
    rows = [r for r in summary if r["quantity"] == q]
    names = [r["estimator"] for r in rows]
    mean = [float(r["value"]) for r in rows]
    lo = [float(r["value"]) - float(r["ci_low"]) for r in rows]
    hi = [float(r["ci_high"]) - float(r["value"]) for r in rows]
    ax.bar(names, mean, yerr=[lo, hi], capsize=6, color=["tab:blue", "tab:orange", "tab:green"][: len(rows)])
    ax.set_title(q)
    ax.set_ylabel(rows[0]["measure"] if rows else "")
fig.tight_layout()
fig.savefig(os.path.join(HERE, "errors.png"), dpi=150)

by = {}
for r in reps:
    by.setdefault((r["quantity"], r["estimator"]), []).append(float(r["value"]))
fig, ax = plt.subplots(figsize=(6, 4))
for (q, e), v in sorted(by.items()):
    ax.plot(range(len(v)), v, ".", label=f"{e} ({q})")
ax.set_xlabel("repetition")
ax.set_yscale("log")
ax.legend()
fig.tight_layout()
fig.savefig(os.path.join(HERE, "repetitions.png"), dpi=150)
"#;

const PLOT_BETA: &str = r#"
pts = [r for r in levels if r["repetition"] == "0"]
x = [float(r["ln_eps_over_eta"]) for r in pts]
y = [float(r["ln_msd"]) for r in pts]
err = [float(r["ln_msd_err"]) for r in pts]
fit = {r["quantity"]: float(r["value"]) for r in summary if r["estimator"] == "fit"}
fig, ax = plt.subplots(figsize=(6, 4))
ax.errorbar(x, y, yerr=err, fmt="o", capsize=4, label="data")
xs = [min(x), max(x)]
ax.plot(xs, [fit["beta"] * t + fit["ln_c"] for t in xs], "-", label=f"slope {fit['beta']:.3f}")
ax.set_xlabel("ln(eps/eta)")
ax.set_ylabel("ln mean |A*_eta - A*_ref|^2")
ax.legend()
fig.tight_layout()
fig.savefig(os.path.join(HERE, "beta.png"), dpi=150)
"#;

const PLOT_COST: &str = r#"
fig, ax = plt.subplots(figsize=(6, 4))
series = {}
for r in summary:
    series.setdefault((r["estimator"], r["quantity"]), []).append((int(r["levels"]), float(r["value"])))
for (kind, beta), v in sorted(series.items()):
    v.sort()
    ax.plot([a for a, _ in v], [b for _, b in v], marker="o", label=f"{kind}, beta={beta}")
ax.axhline(1.0, color="gray", lw=0.8)
ax.set_xlabel("L")
ax.set_ylabel("W_MLMC / W_MC")
ax.set_yscale("log")
ax.legend(fontsize=7)
fig.tight_layout()
fig.savefig(os.path.join(HERE, "cost_ratio.png"), dpi=150)
"#;

pub fn plot_script(kind: ExperimentKind) -> String {
    let body = match kind {
        ExperimentKind::EstimateBeta => PLOT_BETA,
        ExperimentKind::WeightedCost => PLOT_COST,
        _ => PLOT_ERRORS,
    };
    format!("{PLOT_HEADER}{body}\nif \"--show\" in sys.argv:\n    plt.show()\n")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let mut t = Table::new(&["a", "b"]);
        t.push(vec![num(0.1), num(1e-300)]);
        assert_eq!(t.to_csv().unwrap(), "a,b\n0.1,1e-300\n");
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::defaults_for(ExperimentKind::WeightedCost);
        let mut b = a.clone();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.base_seed = Some(2);
        assert_ne!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 64);
    }

    #[test]
    fn artifacts_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::defaults_for(ExperimentKind::Coeff1d);
        let mut r = Report::default();
        r.summary = Table::new(&["x"]);
        let files = write_artifacts(dir.path(), ExperimentKind::Coeff1d, &cfg, 1, &r).unwrap();
        assert_eq!(files.len(), 5);
        let m: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(m["experiment"], "coeff-1d");
        assert!(std::fs::read_to_string(dir.path().join("plot.py")).unwrap().contains("matplotlib"));
    }
}
