//! Estimating `rho` from short pilot runs.
//!
//! A pilot trains with a fixed `(K_i, E_i)` and records the first rounds
//! `R_a`, `R_b` at which the global loss falls to `F_a` and then `F_b`.
//! The bound predicts `E_i (R_b - R_a)` proportional to
//! `rho + phi(K_i) E_i^2` with a factor shared by all pilots, so any two
//! pilots give one estimate of `rho`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Solution;
use crate::costmodel::sampling_penalty;
use crate::datagen::FederatedDataset;
use crate::error::{ensure_finite, invalid, Error, Result};
use crate::learner::{run_fedavg, FedAvgRun, TrainConfig};
use crate::scheduler::Strategy;
use crate::system::SystemProfile;

/// Pilot pairs and loss thresholds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimationPlan {
    /// Distinct `(K, E)` pairs; use a wide spread of `phi(K) E^2`.
    pub pilots: Vec<(usize, usize)>,
    pub f_a: f64,
    pub f_b: f64,
    /// Rounds each pilot may use to reach `f_b`.
    pub round_cap: usize,
}

impl EstimationPlan {
    pub fn validate(&self, n_clients: usize) -> Result<()> {
        if self.pilots.len() < 2 {
            return Err(invalid("pilots", "need at least two pilot pairs"));
        }
        for (i, &(k, e)) in self.pilots.iter().enumerate() {
            if k == 0 || k > n_clients || e == 0 {
                return Err(invalid(
                    "pilots",
                    format!("pair ({k}, {e}) needs 1 <= K <= {n_clients} and E >= 1"),
                ));
            }
            if self.pilots[..i].contains(&(k, e)) {
                return Err(invalid("pilots", format!("pair ({k}, {e}) is repeated")));
            }
        }
        ensure_finite("f_a", self.f_a)?;
        ensure_finite("f_b", self.f_b)?;
        if self.f_a <= self.f_b {
            return Err(invalid("f_a", format!("must exceed f_b ({} <= {})", self.f_a, self.f_b)));
        }
        if self.round_cap == 0 {
            return Err(invalid("round_cap", "must be at least 1"));
        }
        Ok(())
    }
}

/// Rounds at which one pilot first reached `F_a` and `F_b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PilotRecord {
    pub k: usize,
    pub e: usize,
    pub r_a: usize,
    pub r_b: usize,
}

/// A pilot reduced to its round increment, which may be fractional.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PilotIncrement {
    pub k: f64,
    pub e: f64,
    pub delta_rounds: f64,
}

impl From<PilotRecord> for PilotIncrement {
    fn from(r: PilotRecord) -> Self {
        Self {
            k: r.k as f64,
            e: r.e as f64,
            delta_rounds: r.r_b as f64 - r.r_a as f64,
        }
    }
}

/// The estimate from pilots `i < j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairEstimate {
    pub i: usize,
    pub j: usize,
    /// `E_i dR_i / (E_j dR_j)`.
    pub ratio: f64,
    pub rho: f64,
    /// False when the pair was ill-conditioned or gave a non-positive value.
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RhoEstimate {
    /// Mean of the kept pair estimates.
    pub rho: f64,
    pub pairs: Vec<PairEstimate>,
}

/// Pairs whose ratio is this close to 1 carry no information.
const MIN_RATIO_GAP: f64 = 0.05;

/// Averages the pairwise estimates over all pilot pairs.
pub fn rho_from_increments(pilots: &[PilotIncrement], n_clients: usize) -> Result<RhoEstimate> {
    if pilots.len() < 2 {
        return Err(invalid("pilots", "need at least two pilots"));
    }
    let mut pairs = Vec::new();
    for i in 0..pilots.len() {
        for j in i + 1..pilots.len() {
            let (p, q) = (pilots[i], pilots[j]);
            let ratio = p.e * p.delta_rounds / (q.e * q.delta_rounds);
            let si = sampling_penalty(p.k, n_clients) * p.e * p.e;
            let sj = sampling_penalty(q.k, n_clients) * q.e * q.e;
            let rho = (ratio * sj - si) / (1.0 - ratio);
            let kept = ratio.is_finite() && (1.0 - ratio).abs() >= MIN_RATIO_GAP && rho > 0.0 && rho.is_finite();
            pairs.push(PairEstimate { i, j, ratio, rho, kept });
        }
    }
    let kept: Vec<f64> = pairs.iter().filter(|p| p.kept).map(|p| p.rho).collect();
    if kept.is_empty() {
        return Err(Error::EstimationFailed);
    }
    Ok(RhoEstimate {
        rho: kept.iter().sum::<f64>() / kept.len() as f64,
        pairs,
    })
}

pub fn rho_from_records(records: &[PilotRecord], n_clients: usize) -> Result<RhoEstimate> {
    let inc: Vec<PilotIncrement> = records.iter().map(|&r| r.into()).collect();
    rho_from_increments(&inc, n_clients)
}

/// Reads the two crossing rounds off a finished run.
pub fn pilot_record(run: &FedAvgRun, k: usize, e: usize, f_a: f64, f_b: f64, cap: usize) -> Result<PilotRecord> {
    let timeout = |threshold| Error::PilotTimeout { k, e, threshold, cap };
    let r_a = run.first_round_below(f_a).ok_or_else(|| timeout(f_a))?;
    let r_b = run.first_round_below(f_b).ok_or_else(|| timeout(f_b))?;
    Ok(PilotRecord { k, e, r_a, r_b })
}

/// Trains every pilot until it reaches `f_b`; pilot `i` uses seed
/// `base.seed + i`. Pilots run in parallel.
pub fn run_pilots(
    plan: &EstimationPlan,
    dataset: &FederatedDataset,
    profile: &SystemProfile,
    base: &TrainConfig,
    strategy: Strategy,
) -> Result<Vec<(PilotRecord, FedAvgRun)>> {
    plan.validate(dataset.n_clients())?;
    plan.pilots
        .par_iter()
        .enumerate()
        .map(|(i, &(k, e))| {
            let cfg = TrainConfig {
                k,
                e,
                max_rounds: plan.round_cap,
                target_loss: Some(plan.f_b),
                seed: base.seed.wrapping_add(i as u64),
                ..base.clone()
            };
            let run = run_fedavg(dataset, profile, &cfg, strategy)?;
            let rec = pilot_record(&run, k, e, plan.f_a, plan.f_b, plan.round_cap)?;
            Ok((rec, run))
        })
        .collect()
}

/// Runs the pilots and averages their pairwise estimates.
pub fn estimate_rho(
    plan: &EstimationPlan,
    dataset: &FederatedDataset,
    profile: &SystemProfile,
    base: &TrainConfig,
    strategy: Strategy,
) -> Result<(RhoEstimate, Vec<PilotRecord>)> {
    let records: Vec<PilotRecord> = run_pilots(plan, dataset, profile, base, strategy)?
        .into_iter()
        .map(|(r, _)| r)
        .collect();
    Ok((rho_from_records(&records, dataset.n_clients())?, records))
}

/// Local iterations spent on pilots relative to the final run,
/// `sum K_i E_i R_b,i / (K* E* R*)`.
pub fn estimation_overhead(records: &[PilotRecord], solution: &Solution) -> f64 {
    let pilots: usize = records.iter().map(|r| r.k * r.e * r.r_b).sum();
    pilots as f64 / (solution.k_star * solution.e_star * solution.r_star) as f64
}

/// Writes `pilot_K, pilot_E, R_a, R_b`.
pub fn write_estimation_csv<W: Write>(records: &[PilotRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["pilot_K", "pilot_E", "R_a", "R_b"])?;
    for r in records {
        w.write_record([r.k, r.e, r.r_a, r.r_b].map(|v| v.to_string()))?;
    }
    w.flush().map_err(|source| Error::Io {
        path: "<csv>".into(),
        source,
    })?;
    Ok(())
}
