use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use homog_mlmc_cli::config::{has_errors, validate, ExperimentConfig, ExperimentKind};
use homog_mlmc_cli::{run, CliError, RunOptions};

#[derive(Parser)]
#[command(name = "homog-mlmc", version, about = "Multilevel Monte Carlo for random homogenization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment configuration
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed; overrides `base_seed`
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; overrides `threads`
    #[arg(long, env = "MLMC_THREADS")]
    threads: Option<usize>,
    /// Output directory (default out/<experiment>)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the convergence rate of the apparent tensor
    EstimateBeta(Common),
    /// MLMC vs MC for 1D effective coefficients
    #[command(name = "coeff-1d")]
    Coeff1d(Common),
    /// MLMC vs MC for 2D effective coefficients
    #[command(name = "coeff-2d")]
    Coeff2d(Common),
    /// MLMC vs MC for the 1D homogenized solution
    #[command(name = "solution-1d")]
    Solution1d(Common),
    /// MLMC vs MC for the 2D homogenized solution
    #[command(name = "solution-2d")]
    Solution2d(Common),
    /// Cost ratio tables for the dyadic and weighted estimators
    WeightedCost(Common),
    /// Check a configuration file without running it
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load(path: Option<&PathBuf>) -> Result<ExperimentConfig, CliError> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn execute(kind: ExperimentKind, common: Common) -> Result<(), CliError> {
    let mut config = load(common.config.as_ref())?;
    if common.config.is_none() && common.seed.is_none() {
        config.base_seed = ExperimentConfig::defaults_for(kind).base_seed;
    }
    let opts = RunOptions {
        seed: common.seed,
        threads: common.threads,
        out: common.out,
    };
    let (dir, report, warnings) = run(kind, config, &opts)?;
    for w in &warnings {
        eprintln!("{w}");
    }
    print!("{}", report.summary.to_csv()?);
    eprintln!("artifacts written to {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::EstimateBeta(c) => execute(ExperimentKind::EstimateBeta, c),
        Command::Coeff1d(c) => execute(ExperimentKind::Coeff1d, c),
        Command::Coeff2d(c) => execute(ExperimentKind::Coeff2d, c),
        Command::Solution1d(c) => execute(ExperimentKind::Solution1d, c),
        Command::Solution2d(c) => execute(ExperimentKind::Solution2d, c),
        Command::WeightedCost(c) => execute(ExperimentKind::WeightedCost, c),
        Command::Validate { config } => match ExperimentConfig::load(&config) {
            Ok(cfg) => {
                let d = validate(&cfg);
                for x in &d {
                    println!("{x}");
                }
                if has_errors(&d) {
                    return ExitCode::from(2);
                }
                println!("ok");
                Ok(())
            }
            Err(e) => Err(e),
        },
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
