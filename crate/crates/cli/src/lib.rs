//! Configuration, experiment runners and artifact output for the
//! `homog-mlmc` command line tool.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod experiments;
pub mod output;

use std::path::{Path, PathBuf};

use config::{has_errors, validate, Diagnostic, ExperimentConfig, ExperimentKind, Severity};
use output::Report;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid configuration:\n{}", render(.0))]
    Invalid(Vec<Diagnostic>),
    #[error("{experiment} failed: {source}")]
    Numerical {
        experiment: ExperimentKind,
        #[source]
        source: homog_mlmc::Error,
    },
    #[error("i/o error: {0}")]
    Io(String),
}

fn render(d: &[Diagnostic]) -> String {
    d.iter().map(|d| format!("  {d}")).collect::<Vec<_>>().join("\n")
}

fn root_cause(e: &homog_mlmc::Error) -> &homog_mlmc::Error {
    match e {
        homog_mlmc::Error::Sample { source, .. } => root_cause(source),
        other => other,
    }
}

impl CliError {
    /// 2 for configuration problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        use homog_mlmc::Error as E;
        match self {
            CliError::Config(_) | CliError::Invalid(_) => 2,
            CliError::Numerical { source, .. } => match root_cause(source) {
                E::Parameter(_) | E::Resolution { .. } | E::Plan(_) | E::Dimension(_) => 2,
                _ => 3,
            },
            CliError::Io(_) => 3,
        }
    }
}

/// Command line overrides; each takes precedence over the config file.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
}

/// Applies overrides, fills in a missing experiment table and validates.
/// Returns the effective config together with any warnings.
pub fn resolve(
    kind: ExperimentKind,
    mut config: ExperimentConfig,
    opts: &RunOptions,
) -> Result<(ExperimentConfig, Vec<Diagnostic>), CliError> {
    if let Some(k) = config.experiment {
        if k != kind {
            return Err(CliError::Config(format!(
                "config declares experiment = \"{k}\" but the subcommand is {kind}"
            )));
        }
    }
    config.experiment = Some(kind);
    if opts.seed.is_some() {
        config.base_seed = opts.seed;
    }
    if opts.threads.is_some() {
        config.threads = opts.threads;
    }
    if opts.out.is_some() {
        config.out.clone_from(&opts.out);
    }
    let defaults = ExperimentConfig::defaults_for(kind);
    match kind {
        ExperimentKind::EstimateBeta => config.estimate_beta = config.estimate_beta.or(defaults.estimate_beta),
        ExperimentKind::Coeff1d => config.coeff_1d = config.coeff_1d.or(defaults.coeff_1d),
        ExperimentKind::Coeff2d => config.coeff_2d = config.coeff_2d.or(defaults.coeff_2d),
        ExperimentKind::Solution1d => config.solution_1d = config.solution_1d.or(defaults.solution_1d),
        ExperimentKind::Solution2d => config.solution_2d = config.solution_2d.or(defaults.solution_2d),
        ExperimentKind::WeightedCost => config.weighted_cost = config.weighted_cost.or(defaults.weighted_cost),
    }
    let diagnostics = validate(&config);
    if has_errors(&diagnostics) {
        return Err(CliError::Invalid(
            diagnostics.into_iter().filter(|d| d.severity == Severity::Error).collect(),
        ));
    }
    Ok((config, diagnostics))
}

pub fn effective_threads(config: &ExperimentConfig) -> usize {
    config
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Runs `kind` on a dedicated pool of `threads` workers.
pub fn run_experiment(kind: ExperimentKind, config: &ExperimentConfig, threads: usize) -> Result<Report, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Io(e.to_string()))?;
    pool.install(|| experiments::run(kind, config))
        .map_err(|source| CliError::Numerical { experiment: kind, source })
}

/// Resolves, runs and writes artifacts. Returns the output directory and report.
pub fn run(
    kind: ExperimentKind,
    config: ExperimentConfig,
    opts: &RunOptions,
) -> Result<(PathBuf, Report, Vec<Diagnostic>), CliError> {
    let (config, warnings) = resolve(kind, config, opts)?;
    let threads = effective_threads(&config);
    let report = run_experiment(kind, &config, threads)?;
    let dir = config
        .out
        .clone()
        .unwrap_or_else(|| Path::new("out").join(kind.name()));
    output::write_artifacts(&dir, kind, &config, threads, &report)?;
    Ok((dir, report, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;
    use homog_mlmc::Error;

    #[test]
    fn exit_codes() {
        let num = |source| CliError::Numerical {
            experiment: ExperimentKind::Coeff2d,
            source,
        };
        assert_eq!(CliError::Config("x".into()).exit_code(), 2);
        assert_eq!(num(Error::Coercivity { cell: 0, value: -1.0 }).exit_code(), 3);
        assert_eq!(num(Error::Plan("x".into())).exit_code(), 2);
        let nested = Error::Sample {
            level: 1,
            index: 2,
            source: Box::new(Error::Coercivity { cell: 0, value: 0.0 }),
        };
        assert_eq!(num(nested).exit_code(), 3);
    }

    #[test]
    fn resolve_fills_section_and_applies_overrides() {
        let opts = RunOptions {
            seed: Some(4),
            threads: Some(2),
            out: None,
        };
        let (c, _) = resolve(ExperimentKind::WeightedCost, ExperimentConfig::default(), &opts).unwrap();
        assert_eq!(c.base_seed, Some(4));
        assert_eq!(c.threads, Some(2));
        assert!(c.weighted_cost.is_some());
        let bad = ExperimentConfig {
            experiment: Some(ExperimentKind::Coeff1d),
            ..ExperimentConfig::default()
        };
        assert!(matches!(resolve(ExperimentKind::Solution1d, bad, &opts), Err(CliError::Config(_))));
    }
}
