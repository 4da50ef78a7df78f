use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedcost_cli::config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "fedcost", version, about = "Cost-aware federated learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides `out_dir` in the configuration.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Choose (K, E) per the control mode, train, and write traces.
    Run(Common),
    /// Choose (K, E) without training.
    Optimize(Common),
    /// Run the pilot plan and estimate rho.
    Estimate(Common),
    /// Time one trajectory per sweep point under every scheduling policy.
    CompareSchedulers(Common),
    /// Check the monotonicity and shape properties of the optimum.
    ValidateProperties(Common),
    /// Tabulate the cost objective over a (K, E) grid.
    CostSurface(Common),
}

fn load(common: &Common) -> anyhow::Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    let out = common
        .out
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    Ok((cfg, out))
}

fn report(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn dispatch(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run(c) => {
            let (cfg, out) = load(&c)?;
            let (result, paths) = fedcost_cli::run(&cfg, &out)?;
            let last = result.traces.last();
            println!(
                "{} rounds, final loss {:.6}, time {:.3} s, energy {:.3} J{}",
                result.rounds(),
                last.map_or(result.initial_loss, |t| t.loss),
                result.total_time(),
                result.total_energy(),
                if result.reached_target { ", target reached" } else { "" }
            );
            report(&paths);
        }
        Command::Optimize(c) => {
            let (cfg, out) = load(&c)?;
            let (plan, paths) = fedcost_cli::optimize(&cfg, &out)?;
            let s = plan.solution.as_ref().expect("optimize always yields a solution");
            println!("K* = {}, E* = {}, R* = {}, predicted cost {:.6}", s.k_star, s.e_star, s.r_star, s.predicted_cost);
            report(&paths);
        }
        Command::Estimate(c) => {
            let (cfg, out) = load(&c)?;
            let (rho, paths) = fedcost_cli::estimate(&cfg, &out)?;
            println!("rho = {rho:.3}");
            report(&paths);
        }
        Command::CompareSchedulers(c) => {
            let (cfg, out) = load(&c)?;
            let (rows, paths) = fedcost_cli::run_comparison(&cfg, &out)?;
            let unreached = rows.iter().filter(|r| !r.reached_target).count();
            if unreached > 0 {
                println!("{unreached} rows did not reach the target loss within the round cap");
            }
            report(&paths);
        }
        Command::ValidateProperties(c) => {
            let (cfg, out) = load(&c)?;
            let (rep, paths) = fedcost_cli::validate_properties(&cfg, &out)?;
            for check in &rep.checks {
                println!("{:<55} {}", check.name, if check.passed { "ok" } else { "VIOLATED" });
            }
            report(&paths);
        }
        Command::CostSurface(c) => {
            let (cfg, out) = load(&c)?;
            report(&fedcost_cli::write_cost_surface(&cfg, &out)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
