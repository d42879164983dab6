#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tvq::approx::report;
use tvq::compare::{compare, Tolerances};
use tvq::fluid::{solve_fluid, FluidSolution};
use tvq::gaussian::{propagate, GaussianSolution};
use tvq::sim::{estimate, SimConfig};
use tvq::table::Table;
use tvq::{Error, ModelSpec};

const EXIT_CONFIG: u8 = 2;
const EXIT_MODEL: u8 = 3;
const EXIT_STAFFING: u8 = 4;
const EXIT_ACCEPTANCE: u8 = 5;

#[derive(Parser)]
#[command(
    name = "tvq",
    version,
    about = "Fluid and Gaussian approximations for time-varying many-server queues"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fluid model on the grid (fluid.csv).
    Fluid(Common),
    /// Gaussian variances on the grid (variance.csv).
    Variance(Common),
    /// Performance predictions for the n-th system (approx.csv).
    Approx {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: f64,
    },
    /// Discrete-event simulation estimates (sim.csv).
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sim: SimArgs,
    },
    /// Approximation against simulation (compare.csv, summary.txt).
    Compare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sim: SimArgs,
        /// Sup relative error allowed on the mean of X.
        #[arg(long, default_value_t = 0.05)]
        tol_mean: f64,
        /// Variance ratios must lie in [1/(1+Y), 1+Y].
        #[arg(long, default_value_t = 0.25)]
        tol_var: f64,
        /// Sup relative error allowed on the means of W and V.
        #[arg(long, default_value_t = 0.07)]
        tol_wait: f64,
    },
}

#[derive(Args)]
struct Common {
    /// Model file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long, default_value_t = 1e-3)]
    grid_step: f64,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long)]
    n: f64,
    #[arg(long, default_value_t = 400)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Worker threads for replications.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
    /// Observation step; a multiple of the grid step for `compare`.
    #[arg(long, default_value_t = 0.05)]
    obs_step: f64,
}

/// Raised when compare finishes but a metric is out of bounds.
#[derive(Debug)]
struct AcceptanceFailed;

impl std::fmt::Display for AcceptanceFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "acceptance failed (see summary.txt)")
    }
}

impl std::error::Error for AcceptanceFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<AcceptanceFailed>().is_some() {
        return EXIT_ACCEPTANCE;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::InfeasibleStaffing { .. }) => EXIT_STAFFING,
        Some(
            Error::InvalidModel(_)
            | Error::ScvBelowOne(_)
            | Error::PatienceExhausted(_)
            | Error::CriticalLoading(_)
            | Error::BoundaryDensityVanished(_)
            | Error::NotSmooth(..),
        ) => EXIT_MODEL,
        Some(Error::Config(_) | Error::Io(_) | Error::InvalidArgument(_)) => EXIT_CONFIG,
        _ => 1,
    }
}

fn load(common: &Common) -> Result<ModelSpec> {
    if !(common.grid_step > 0.0) {
        bail!(Error::InvalidArgument(format!(
            "--grid-step must be positive (got {})",
            common.grid_step
        )));
    }
    let spec = ModelSpec::from_path(&common.config)
        .with_context(|| format!("reading {}", common.config.display()))?;
    fs::create_dir_all(&common.out)
        .map_err(Error::from)
        .with_context(|| format!("creating {}", common.out.display()))?;
    Ok(spec)
}

fn write(dir: &Path, name: &str, table: &Table) -> Result<()> {
    let path = dir.join(name);
    table
        .save(&path)
        .with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn analyse(spec: &ModelSpec, step: f64) -> Result<(FluidSolution, GaussianSolution)> {
    let fluid = solve_fluid(spec, step)?;
    let gauss = propagate(spec, &fluid)?;
    Ok((fluid, gauss))
}

fn sim_config(spec: ModelSpec, sim: &SimArgs) -> Result<SimConfig> {
    let mut cfg = SimConfig::new(spec, sim.n, sim.reps, sim.seed, sim.obs_step)?;
    cfg.parallel = sim.parallel.max(1);
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fluid(common) => {
            let spec = load(&common)?;
            let fluid = solve_fluid(&spec, common.grid_step)?;
            for s in &fluid.switches {
                println!("switch at t = {s}");
            }
            write(&common.out, "fluid.csv", &fluid.table())
        }
        Command::Variance(common) => {
            let spec = load(&common)?;
            let (_, gauss) = analyse(&spec, common.grid_step)?;
            write(&common.out, "variance.csv", &gauss.table())
        }
        Command::Approx { common, n } => {
            let spec = load(&common)?;
            if !(n >= 1.0) {
                bail!(Error::InvalidArgument(format!(
                    "--n must be at least 1 (got {n})"
                )));
            }
            let (fluid, gauss) = analyse(&spec, common.grid_step)?;
            write(
                &common.out,
                "approx.csv",
                &report(&spec, n, &fluid, &gauss).table(),
            )
        }
        Command::Simulate { common, sim } => {
            let spec = load(&common)?;
            let est = estimate(&sim_config(spec, &sim)?)?;
            if est.conservation_gap != 0 {
                bail!("flow conservation violated by {}", est.conservation_gap);
            }
            write(&common.out, "sim.csv", &est.table())
        }
        Command::Compare {
            common,
            sim,
            tol_mean,
            tol_var,
            tol_wait,
        } => {
            let spec = load(&common)?;
            let (fluid, gauss) = analyse(&spec, common.grid_step)?;
            let rep = report(&spec, sim.n, &fluid, &gauss);
            let est = estimate(&sim_config(spec, &sim)?)?;
            let tol = Tolerances {
                mean: tol_mean,
                var: tol_var,
                wait: tol_wait,
                ..Tolerances::default()
            };
            let cmp = compare(&fluid, &rep, &est, tol)?;
            write(&common.out, "compare.csv", &cmp.table())?;
            let summary = format!(
                "n={} reps={} seed={} grid_step={} obs_step={} window={}\n{}",
                sim.n,
                sim.reps,
                sim.seed,
                common.grid_step,
                sim.obs_step,
                tol.window,
                cmp.summary()
            );
            let path = common.out.join("summary.txt");
            fs::write(&path, &summary)
                .map_err(Error::from)
                .with_context(|| format!("writing {}", path.display()))?;
            print!("{summary}");
            if cmp.pass() {
                Ok(())
            } else {
                Err(AcceptanceFailed.into())
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
