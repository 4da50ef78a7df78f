//! Pipelines behind the `fedcost` command-line tool.

pub mod config;

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rayon::prelude::*;
use serde::Serialize;

use fedcost::costmodel::{cost_surface, write_surface_csv, ConvergenceCoeffs};
use fedcost::datagen::{gen_synthetic, load_idx, partition_by_label, FederatedDataset};
use fedcost::learner::{run_fedavg, write_traces_csv, FedAvgRun, TrainConfig};
use fedcost::optimizer::{
    acs_optimize, estimate_rho, estimation_overhead, grid_search, verify_properties,
    write_estimation_csv, write_solution_csv, PilotRecord, PropertyReport, Solution,
};
use fedcost::system::{sample_profile, AveragedCosts, SystemProfile};
use fedcost::Strategy;

use config::{ControlConfig, DatasetConfig, ExperimentConfig};

/// Writes `name` inside `dir` through a temporary file that is renamed
/// into place once complete.
pub fn write_atomic(
    dir: &Path,
    name: &str,
    body: impl FnOnce(&mut dyn Write) -> anyhow::Result<()>,
) -> anyhow::Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = BufWriter::new(tmp.as_file_mut());
        body(&mut w)?;
        w.flush()?;
    }
    let path = dir.join(name);
    tmp.persist(&path).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// The dataset and device profile an experiment runs on.
pub struct Inputs {
    pub dataset: FederatedDataset,
    pub profile: SystemProfile,
}

pub fn build_inputs(cfg: &ExperimentConfig) -> anyhow::Result<Inputs> {
    let dataset = match &cfg.dataset {
        DatasetConfig::Synthetic(spec) => gen_synthetic(spec, cfg.seed)?,
        DatasetConfig::Idx {
            images,
            labels,
            n_clients,
            labels_per_client,
            samples_per_client,
        } => {
            let pool = load_idx(images, labels)?;
            partition_by_label(&pool, *n_clients, *labels_per_client, *samples_per_client, cfg.seed)?
        }
    };
    let n = dataset.n_clients();
    let profile = match cfg.system.spec(n) {
        Some(spec) => sample_profile(&spec, cfg.seed)?,
        None => {
            let config::SystemConfig::File { path } = &cfg.system else {
                unreachable!("only stored profiles lack a generator spec")
            };
            let p = SystemProfile::load(path)?;
            if p.n_clients != n {
                bail!("profile {} describes {} clients, dataset has {n}", path.display(), p.n_clients);
            }
            p
        }
    };
    Ok(Inputs { dataset, profile })
}

pub fn train_config(cfg: &ExperimentConfig, k: usize, e: usize) -> TrainConfig {
    TrainConfig {
        k,
        e,
        batch_size: cfg.training.batch_size,
        eta0: cfg.training.eta0,
        max_rounds: cfg.training.max_rounds,
        target_loss: cfg.training.target_loss,
        seed: cfg.seed,
    }
}

/// `rho` from the configuration, or estimated from pilots when only a plan
/// is given.
pub fn resolve_coeffs(
    cfg: &ExperimentConfig,
    inputs: &Inputs,
) -> anyhow::Result<(ConvergenceCoeffs, Option<Vec<PilotRecord>>)> {
    if let Some(c) = cfg.convergence {
        return Ok((c, None));
    }
    let Some(plan) = &cfg.estimation else {
        bail!("no `convergence.rho` and no `estimation` plan");
    };
    let (est, records) = estimate_rho(plan, &inputs.dataset, &inputs.profile, &train_config(cfg, 1, 1), cfg.strategy)?;
    Ok((ConvergenceCoeffs::new(est.rho), Some(records)))
}

fn costs(cfg: &ExperimentConfig, inputs: &Inputs) -> anyhow::Result<AveragedCosts> {
    Ok(inputs.profile.averaged(cfg.gamma)?)
}

/// The chosen `(K, E)` plus what produced it.
pub struct Plan {
    pub k: usize,
    pub e: usize,
    pub solution: Option<Solution>,
    pub pilots: Option<Vec<PilotRecord>>,
}

impl Plan {
    pub fn overhead(&self) -> Option<f64> {
        match (&self.solution, &self.pilots) {
            (Some(s), Some(p)) => Some(estimation_overhead(p, s)),
            _ => None,
        }
    }
}

pub fn plan_control(cfg: &ExperimentConfig, inputs: &Inputs) -> anyhow::Result<Plan> {
    if let ControlConfig::Fixed { k, e } = cfg.control {
        return Ok(Plan { k, e, solution: None, pilots: None });
    }
    let (coeffs, pilots) = resolve_coeffs(cfg, inputs)?;
    let costs = costs(cfg, inputs)?;
    let solution = match cfg.control {
        ControlConfig::Optimize { acs } => acs_optimize(&costs, &coeffs, &acs.unwrap_or_default())?,
        ControlConfig::Grid { k_min, k_max, e_min, e_max } => {
            grid_search(&costs, &coeffs, k_min..=k_max, e_min..=e_max)?
        }
        ControlConfig::Fixed { .. } => unreachable!(),
    };
    Ok(Plan {
        k: solution.k_star,
        e: solution.e_star,
        solution: Some(solution),
        pilots,
    })
}

fn write_plan(out: &Path, plan: &Plan) -> anyhow::Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    if let Some(s) = &plan.solution {
        written.push(write_atomic(out, "solution.csv", |w| Ok(write_solution_csv(s, plan.overhead(), w)?))?);
    }
    if let Some(p) = &plan.pilots {
        written.push(write_atomic(out, "estimation.csv", |w| Ok(write_estimation_csv(p, w)?))?);
    }
    Ok(written)
}

/// Plans `(K, E)`, trains, and writes the traces.
pub fn run(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<(FedAvgRun, Vec<PathBuf>)> {
    let inputs = build_inputs(cfg)?;
    let plan = plan_control(cfg, &inputs)?;
    let result = run_fedavg(&inputs.dataset, &inputs.profile, &train_config(cfg, plan.k, plan.e), cfg.strategy)?;
    let mut written = write_plan(out, &plan)?;
    written.push(write_atomic(out, "traces.csv", |w| Ok(write_traces_csv(&result.traces, w)?))?);
    Ok((result, written))
}

/// Plans `(K, E)` without the final training run.
pub fn optimize(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<(Plan, Vec<PathBuf>)> {
    let inputs = build_inputs(cfg)?;
    let plan = plan_control(cfg, &inputs)?;
    if plan.solution.is_none() {
        bail!("control mode `fixed` has nothing to optimise; use mode = \"optimize\" or \"grid\"");
    }
    let written = write_plan(out, &plan)?;
    Ok((plan, written))
}

/// Runs the pilot plan and reports the estimate.
pub fn estimate(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<(f64, Vec<PathBuf>)> {
    let Some(plan) = &cfg.estimation else {
        bail!("`estimate` needs an [estimation] section");
    };
    let inputs = build_inputs(cfg)?;
    let (est, records) = estimate_rho(plan, &inputs.dataset, &inputs.profile, &train_config(cfg, 1, 1), cfg.strategy)?;
    let path = write_atomic(out, "estimation.csv", |w| Ok(write_estimation_csv(&records, w)?))?;
    Ok((est.rho, vec![path]))
}

pub fn validate_properties(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<(PropertyReport, Vec<PathBuf>)> {
    let inputs = build_inputs(cfg)?;
    let (coeffs, _) = resolve_coeffs(cfg, &inputs)?;
    let report = verify_properties(&costs(cfg, &inputs)?, &coeffs, &cfg.properties)?;
    let path = write_atomic(out, "properties.csv", |w| Ok(report.write_csv(w)?))?;
    Ok((report, vec![path]))
}

pub fn write_cost_surface(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let inputs = build_inputs(cfg)?;
    let (coeffs, _) = resolve_coeffs(cfg, &inputs)?;
    let n = inputs.dataset.n_clients();
    let (ks, es) = match &cfg.surface {
        Some(s) => (s.k_values.clone(), s.e_values.clone()),
        None => ((1..=n).collect(), (1..=100).collect()),
    };
    let points = cost_surface(&costs(cfg, &inputs)?, &coeffs, &ks, &es)?;
    Ok(vec![write_atomic(out, "cost_surface.csv", |w| Ok(write_surface_csv(&points, w)?))?])
}

/// One strategy at one sweep point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    /// `"E"` or `"K"`: which control varies along this sweep.
    pub sweep: &'static str,
    pub k: usize,
    pub e: usize,
    pub strategy: Strategy,
    /// Simulated wall-clock until the target loss (or the round cap).
    pub total_time: f64,
    pub rounds: usize,
    pub reached_target: bool,
}

/// Trains once per sweep point and times the identical trajectory under
/// each scheduling policy. Sweep points run in parallel.
pub fn compare_schedulers(cfg: &ExperimentConfig, inputs: &Inputs) -> anyhow::Result<Vec<ComparisonRow>> {
    let Some(sweep) = &cfg.sweep else {
        bail!("`compare-schedulers` needs a [sweep] section");
    };
    let mut points: Vec<(&'static str, usize, usize)> = Vec::new();
    points.extend(sweep.e_values.iter().map(|&e| ("E", sweep.k_at, e)));
    points.extend(sweep.k_values.iter().map(|&k| ("K", k, sweep.e_at)));
    let per_point: Vec<Vec<ComparisonRow>> = points
        .par_iter()
        .map(|&(label, k, e)| {
            let run = run_fedavg(&inputs.dataset, &inputs.profile, &train_config(cfg, k, e), Strategy::OptimalTs)?;
            Strategy::ALL
                .iter()
                .map(|&s| {
                    Ok(ComparisonRow {
                        sweep: label,
                        k,
                        e,
                        strategy: s,
                        total_time: run.total_time_under(s)?,
                        rounds: run.rounds(),
                        reached_target: run.reached_target || cfg.training.target_loss.is_none(),
                    })
                })
                .collect::<anyhow::Result<Vec<_>>>()
        })
        .collect::<anyhow::Result<_>>()?;
    Ok(per_point.into_iter().flatten().collect())
}

pub fn write_comparison_csv(rows: &[ComparisonRow], out: &mut dyn Write) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["sweep", "K", "E", "strategy", "total_time_s", "rounds", "reached_target"])?;
    for r in rows {
        w.write_record([
            r.sweep.to_string(),
            r.k.to_string(),
            r.e.to_string(),
            r.strategy.name().to_string(),
            r.total_time.to_string(),
            r.rounds.to_string(),
            r.reached_target.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn run_comparison(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<(Vec<ComparisonRow>, Vec<PathBuf>)> {
    let inputs = build_inputs(cfg)?;
    let rows = compare_schedulers(cfg, &inputs)?;
    let path = write_atomic(out, "scheduler_comparison.csv", |w| write_comparison_csv(&rows, w))?;
    Ok((rows, vec![path]))
}
