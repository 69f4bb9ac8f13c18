//! Command-line experiments: closed-loop rollouts, episodic learning and
//! feasibility maps for the adaptive cruise control study.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use serde::Serialize;

use gpcbf_core::config::{Experiment, ExperimentConfig};
use gpcbf_core::controller::ControllerKind;
use gpcbf_core::dynamics::{ControlAffine, ResidualSample};
use gpcbf_core::gp::ResidualGp;
use gpcbf_core::io::{self, LearningSummary, RolloutSummary};
use gpcbf_core::simulation::{
    episodic_learning, feasibility_map, feasible_fraction, fit_gps, rollout, GridAxis, RolloutLog,
    Termination,
};

/// Process exit codes.
pub mod exit {
    pub const OK: i32 = 0;
    /// Configuration, dataset or I/O error.
    pub const CONFIG: i32 = 1;
    /// Command-line usage error.
    pub const USAGE: i32 = 2;
    /// Rollout reached a state with `B < 0`.
    pub const UNSAFE: i32 = 10;
    /// Rollout stopped at a step that did not solve to optimality.
    pub const INFEASIBLE: i32 = 11;
    /// Episode budget spent without a fully feasible rollout.
    pub const BUDGET_EXHAUSTED: i32 = 12;
}

#[derive(Debug, Parser)]
#[command(
    name = "gpcbf",
    version,
    about = "GP-based CBF/CLF control experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one closed-loop rollout on the true plant.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "cbf-clf-qp-nominal")]
        controller: ControllerKind,
        /// Residual dataset for the GP controllers; omitted means the prior.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write programs of non-optimal steps as JSON.
        #[arg(long)]
        dump_socp: bool,
    },
    /// Run the episodic learning protocol.
    Episodes {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Map grid size per axis, e.g. `29x31`.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        dump_socp: bool,
    },
    /// Classify the CBF chance constraint over the configured state window.
    FeasibilityMap {
        #[arg(long)]
        config: PathBuf,
        /// Residual dataset; omitted means the prior.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        grid: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the default configuration.
    DefaultConfig {
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `AxB` (or a single count for every axis).
pub fn parse_grid(text: &str, axes: usize) -> anyhow::Result<Vec<usize>> {
    let parts: Vec<usize> = text
        .split(['x', 'X', ','])
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("invalid grid {text:?}"))?;
    let parts = match parts.len() {
        1 => vec![parts[0]; axes],
        n if n == axes => parts,
        n => bail!("grid {text:?} has {n} axes, expected {axes}"),
    };
    if parts.contains(&0) {
        bail!("grid {text:?} has an empty axis");
    }
    Ok(parts)
}

fn load(config: &Path, seed: Option<u64>, grid: Option<&str>) -> anyhow::Result<Experiment> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(seed) = seed {
        cfg.simulation.seed = seed;
    }
    if let Some(g) = grid {
        cfg.map.points = parse_grid(g, cfg.map.lo.len())?;
    }
    Ok(Experiment::new(cfg)?)
}

fn out_dir(exp: &Experiment, out: Option<PathBuf>) -> anyhow::Result<PathBuf> {
    let dir = out.unwrap_or_else(|| exp.config.output_dir.clone());
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn load_samples(exp: &Experiment, path: Option<&Path>) -> anyhow::Result<Vec<ResidualSample>> {
    let Some(path) = path else {
        return Ok(Vec::new());
    };
    let file = io::read_dataset_csv(path)?;
    let (n, m) = dims(exp);
    if file.state_dim != n || file.control_dim != m {
        bail!(
            "{}: dataset has {} states and {} controls, configuration needs {n} and {m}",
            path.display(),
            file.state_dim,
            file.control_dim
        );
    }
    Ok(file.samples)
}

fn dims(exp: &Experiment) -> (usize, usize) {
    (exp.nominal.state_dim(), exp.nominal.control_dim())
}

#[derive(Serialize)]
struct DumpedProgram<'a> {
    t: f64,
    program: &'a gpcbf_core::conic::SocProgram,
}

fn dump_programs(path: &Path, log: &RolloutLog) -> anyhow::Result<()> {
    let items: Vec<DumpedProgram> = log
        .failed_programs
        .iter()
        .map(|(t, program)| DumpedProgram { t: *t, program })
        .collect();
    std::fs::write(path, serde_json::to_string_pretty(&items)?)?;
    Ok(())
}

fn termination_code(t: Termination) -> i32 {
    match t {
        Termination::Horizon => exit::OK,
        Termination::Infeasible => exit::INFEASIBLE,
        Termination::Unsafe => exit::UNSAFE,
    }
}

fn map_axes(exp: &Experiment) -> anyhow::Result<Vec<GridAxis>> {
    Ok(exp.config.map.axes()?)
}

fn write_map(exp: &Experiment, gp_b: &ResidualGp, path: &Path) -> anyhow::Result<f64> {
    let cells = feasibility_map(gp_b, &exp.nominal, &exp.cbf, &map_axes(exp)?)?;
    io::write_map_csv(path, &cells)?;
    Ok(feasible_fraction(&cells))
}

fn simulate(
    exp: &Experiment,
    kind: ControllerKind,
    dataset: Option<&Path>,
    dir: &Path,
    dump: bool,
) -> anyhow::Result<i32> {
    let samples = load_samples(exp, dataset)?;
    let gps = if kind.uses_gp() {
        Some(fit_gps(&exp.learning_setup(), &samples)?)
    } else {
        None
    };
    let controller = exp.controller(kind, gps.as_ref().map(|g| &g.0), gps.as_ref().map(|g| &g.1));
    let log = rollout(&exp.config.episode_config(), &exp.true_plant, &controller)?;
    io::write_rollout_csv(&dir.join("rollout.csv"), &log)?;
    let (n, m) = dims(exp);
    io::write_dataset_csv(&dir.join("dataset.csv"), &log.samples, n, m)?;
    let summary = RolloutSummary::from_log(&log);
    io::write_toml(&dir.join("summary.toml"), &summary)?;
    if dump {
        dump_programs(&dir.join("socp_dump.json"), &log)?;
    }
    println!(
        "{}: {} after {} steps, min B = {:.6}{}",
        summary.controller,
        summary.termination,
        summary.steps,
        summary.min_barrier,
        summary
            .violation_time
            .map_or_else(String::new, |t| format!(", violation at t = {t:.2} s"))
    );
    Ok(termination_code(log.termination))
}

fn episodes(exp: &Experiment, dir: &Path, dump: bool) -> anyhow::Result<i32> {
    let setup = exp.learning_setup();
    let result = episodic_learning(&setup)?;
    let (n, m) = dims(exp);
    let prior_b = fit_gps(&setup, &[])?.1;
    let mut fractions = Vec::new();
    for e in &result.episodes {
        let k = e.index;
        io::write_rollout_csv(&dir.join(format!("episode_{k}_rollout.csv")), &e.log)?;
        let upto = &result.samples[..e.data_total];
        io::write_dataset_csv(&dir.join(format!("episode_{k}_dataset.csv")), upto, n, m)?;
        let gp_b = e.gp_b.as_ref().unwrap_or(&prior_b);
        fractions.push(Some(write_map(
            exp,
            gp_b,
            &dir.join(format!("episode_{k}_map.csv")),
        )?));
        if dump {
            dump_programs(&dir.join(format!("episode_{k}_socp_dump.json")), &e.log)?;
        }
    }
    io::write_dataset_csv(&dir.join("dataset.csv"), &result.samples, n, m)?;
    let summary = LearningSummary::new(&result, &fractions);
    io::write_toml(&dir.join("summary.toml"), &summary)?;
    for e in &summary.episodes {
        println!(
            "episode {}: {} after {} steps, N = {}, feasible fraction {:.3}",
            e.index,
            e.rollout.termination,
            e.rollout.steps,
            e.data_total,
            e.feasible_fraction.unwrap_or(f64::NAN)
        );
    }
    println!(
        "{} after {} episodes, final N = {}",
        if summary.converged {
            "converged"
        } else {
            "budget exhausted"
        },
        summary.episodes_run,
        summary.final_dataset_size
    );
    Ok(if result.converged {
        exit::OK
    } else {
        exit::BUDGET_EXHAUSTED
    })
}

#[derive(Serialize)]
struct MapSummary {
    points: usize,
    dataset_size: usize,
    feasible_fraction: f64,
}

fn map_command(exp: &Experiment, dataset: Option<&Path>, dir: &Path) -> anyhow::Result<i32> {
    let samples = load_samples(exp, dataset)?;
    let gp_b = fit_gps(&exp.learning_setup(), &samples)?.1;
    let cells = feasibility_map(&gp_b, &exp.nominal, &exp.cbf, &map_axes(exp)?)?;
    io::write_map_csv(&dir.join("map.csv"), &cells)?;
    let summary = MapSummary {
        points: cells.len(),
        dataset_size: samples.len(),
        feasible_fraction: feasible_fraction(&cells),
    };
    io::write_toml(&dir.join("map_summary.toml"), &summary)?;
    println!(
        "{} grid points, feasible fraction {:.3}",
        summary.points, summary.feasible_fraction
    );
    Ok(exit::OK)
}

/// Runs a parsed command and returns the process exit code. Errors map to
/// [`exit::CONFIG`].
pub fn run(cli: Cli) -> anyhow::Result<i32> {
    match cli.command {
        Command::Simulate {
            config,
            controller,
            dataset,
            out,
            seed,
            dump_socp,
        } => {
            let exp = load(&config, seed, None)?;
            let dir = out_dir(&exp, out)?;
            simulate(&exp, controller, dataset.as_deref(), &dir, dump_socp)
        }
        Command::Episodes {
            config,
            out,
            seed,
            grid,
            dump_socp,
        } => {
            let exp = load(&config, seed, grid.as_deref())?;
            let dir = out_dir(&exp, out)?;
            episodes(&exp, &dir, dump_socp)
        }
        Command::FeasibilityMap {
            config,
            dataset,
            grid,
            out,
        } => {
            let exp = load(&config, None, grid.as_deref())?;
            let dir = out_dir(&exp, out)?;
            map_command(&exp, dataset.as_deref(), &dir)
        }
        Command::DefaultConfig { out } => {
            let text = ExperimentConfig::default().to_toml_string();
            match out {
                Some(path) => {
                    std::fs::write(&path, text).map_err(|e| anyhow!("{}: {e}", path.display()))?
                }
                None => print!("{text}"),
            }
            Ok(exit::OK)
        }
    }
}
