//! Choosing `(K, E)` for the cost objective.
//!
//! The relaxed objective is convex in `K` for fixed `E` and convex in `E`
//! for fixed `K`. Each one-dimensional minimiser has a cheap form: `K` in
//! closed form, `E` as the positive root of a cubic. Alternating the two
//! ([`acs_optimize`]) and rounding gives an integer pair; [`grid_search`] is
//! the exhaustive reference.

mod estimate;
mod properties;

pub use estimate::{
    estimate_rho, estimation_overhead, pilot_record, rho_from_increments, rho_from_records,
    run_pilots, write_estimation_csv, EstimationPlan, PairEstimate, PilotIncrement, PilotRecord,
    RhoEstimate,
};
pub use properties::{verify_properties, PropertyCheck, PropertyGrid, PropertyReport};

use std::io::Write;
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};

use crate::costmodel::{p3_objective, p3_value, rounds_needed, sampling_penalty, ConvergenceCoeffs};
use crate::error::{ensure_finite, invalid, Error, Result};
use crate::system::AveragedCosts;

fn check_inputs(costs: &AveragedCosts, coeffs: &ConvergenceCoeffs) -> Result<()> {
    costs.validate()?;
    coeffs.validate()
}

/// Minimiser of the relaxed objective over `K in [1, N]` at fixed `E`.
///
/// With `c = (1-g) t_m + g (e_p E + e_m)` and
/// `a = rho / E + (N-2) E / (N-1)`, the stationary point is
/// `K'^2 = (1-g) N t_p E^2 / ((N-1) c a)`. At `g = 1` the objective is
/// increasing in `K` and the answer is 1.
pub fn solve_k_given_e(e: f64, costs: &AveragedCosts, coeffs: &ConvergenceCoeffs) -> Result<f64> {
    check_inputs(costs, coeffs)?;
    ensure_finite("E", e)?;
    if e < 1.0 {
        return Err(invalid("E", format!("must be >= 1, got {e}")));
    }
    let n = costs.n_clients as f64;
    if costs.gamma == 1.0 || costs.n_clients == 1 {
        return Ok(1.0);
    }
    let g = costs.gamma;
    let c = (1.0 - g) * costs.t_m + g * (costs.e_p * e + costs.e_m);
    let a = coeffs.rho / e + (n - 2.0) * e / (n - 1.0);
    let k2 = (1.0 - g) * n * costs.t_p * e * e / ((n - 1.0) * c * a);
    Ok(k2.sqrt().clamp(1.0, n))
}

/// Minimiser of the relaxed objective over `E in [1, e_max]` at fixed `K`.
///
/// Solves `phi(K) (2 a E^3 + b E^2) = rho b` with
/// `a = (1-g) t_p + g K e_p` and `b = K ((1-g) t_m + g e_m)` by bisection.
/// The left side is increasing in `E`, so the root is unique; it is clamped
/// below at 1. A root above `e_max` is reported as
/// [`Error::RootAboveCeiling`].
pub fn solve_e_given_k(
    k: f64,
    costs: &AveragedCosts,
    coeffs: &ConvergenceCoeffs,
    e_max: f64,
) -> Result<f64> {
    check_inputs(costs, coeffs)?;
    ensure_finite("K", k)?;
    let n = costs.n_clients as f64;
    if !(1.0..=n).contains(&k) {
        return Err(invalid("K", format!("must lie in [1, {n}], got {k}")));
    }
    if !(e_max >= 1.0) {
        return Err(invalid("e_max", format!("must be >= 1, got {e_max}")));
    }
    let g = costs.gamma;
    let a = (1.0 - g) * costs.t_p + g * k * costs.e_p;
    let b = k * ((1.0 - g) * costs.t_m + g * costs.e_m);
    let phi = sampling_penalty(k, costs.n_clients);
    let h = |e: f64| phi * (2.0 * a * e + b) * e * e - coeffs.rho * b;

    let (mut lo, mut hi) = (1e-6, e_max);
    if h(hi) < 0.0 {
        return Err(Error::RootAboveCeiling { ceiling: e_max });
    }
    if h(lo) >= 0.0 {
        return Ok(1.0);
    }
    while hi - lo > 1e-9 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if h(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((0.5 * (lo + hi)).max(1.0))
}

/// Settings of the alternating search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AcsConfig {
    #[serde(default = "one")]
    pub k0: f64,
    #[serde(default = "one")]
    pub e0: f64,
    /// Stop once successive iterates move less than this (Euclidean).
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_sweeps")]
    pub max_sweeps: usize,
    /// Upper limit on `E`; the `E` step projects onto it.
    #[serde(default = "default_e_max")]
    pub e_max: f64,
}

fn one() -> f64 {
    1.0
}

fn default_tolerance() -> f64 {
    1e-3
}

fn default_sweeps() -> usize {
    100
}

fn default_e_max() -> f64 {
    1e4
}

impl Default for AcsConfig {
    fn default() -> Self {
        Self {
            k0: 1.0,
            e0: 1.0,
            tolerance: default_tolerance(),
            max_sweeps: default_sweeps(),
            e_max: default_e_max(),
        }
    }
}

impl AcsConfig {
    pub fn with_start(self, k0: f64, e0: f64) -> Self {
        Self { k0, e0, ..self }
    }

    pub fn with_e_max(self, e_max: f64) -> Self {
        Self { e_max, ..self }
    }

    fn validate(&self, n: usize) -> Result<()> {
        ensure_finite("e_max", self.e_max)?;
        if self.e_max < 1.0 {
            return Err(invalid("e_max", format!("must be >= 1, got {}", self.e_max)));
        }
        if !(1.0..=n as f64).contains(&self.k0) {
            return Err(invalid("k0", format!("must lie in [1, {n}], got {}", self.k0)));
        }
        if !(1.0..=self.e_max).contains(&self.e0) {
            return Err(invalid("e0", format!("must lie in [1, {}], got {}", self.e_max, self.e0)));
        }
        if !(self.tolerance > 0.0) {
            return Err(invalid("tolerance", "must be > 0"));
        }
        if self.max_sweeps == 0 {
            return Err(invalid("max_sweeps", "must be at least 1"));
        }
        Ok(())
    }
}

/// An integer `(K*, E*, R*)` with its predicted cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub k_star: usize,
    pub e_star: usize,
    pub r_star: usize,
    /// Relaxed objective at `(K*, E*)`.
    pub predicted_cost: f64,
    /// Iterates `(K_j, E_j)` of the alternating search, starting point first.
    pub acs_trajectory: Vec<(f64, f64)>,
    /// False when the sweep cap was hit before the iterates settled.
    pub converged: bool,
}

impl Solution {
    fn at(k: usize, e: usize, costs: &AveragedCosts, coeffs: &ConvergenceCoeffs) -> Self {
        let rounds = rounds_needed(k as f64, e as f64, costs.n_clients, coeffs);
        Self {
            k_star: k,
            e_star: e,
            r_star: rounds.ceil() as usize,
            predicted_cost: p3_value(k as f64, e as f64, costs, coeffs),
            acs_trajectory: Vec::new(),
            converged: true,
        }
    }

    /// The continuous point the search settled on.
    pub fn continuous(&self) -> Option<(f64, f64)> {
        self.acs_trajectory.last().copied()
    }
}

fn e_step(k: f64, costs: &AveragedCosts, coeffs: &ConvergenceCoeffs, e_max: f64) -> Result<f64> {
    match solve_e_given_k(k, costs, coeffs, e_max) {
        Err(Error::RootAboveCeiling { .. }) => Ok(e_max),
        other => other,
    }
}

/// Alternating search over `K` and `E`, then the best of the four
/// floor/ceil roundings of the final iterate.
pub fn acs_optimize(costs: &AveragedCosts, coeffs: &ConvergenceCoeffs, config: &AcsConfig) -> Result<Solution> {
    check_inputs(costs, coeffs)?;
    config.validate(costs.n_clients)?;
    let mut z = (config.k0, config.e0);
    let mut trajectory = vec![z];
    let mut converged = false;
    for _ in 0..config.max_sweeps {
        let k = solve_k_given_e(z.1, costs, coeffs)?;
        let e = e_step(k, costs, coeffs, config.e_max)?;
        let step = ((k - z.0).powi(2) + (e - z.1).powi(2)).sqrt();
        z = (k, e);
        trajectory.push(z);
        if step <= config.tolerance {
            converged = true;
            break;
        }
    }

    let n = costs.n_clients;
    let e_cap = config.e_max.floor().max(1.0) as usize;
    let ks = [(z.0.floor() as usize).clamp(1, n), (z.0.ceil() as usize).clamp(1, n)];
    let es = [(z.1.floor() as usize).clamp(1, e_cap), (z.1.ceil() as usize).clamp(1, e_cap)];
    let mut best: Option<(usize, usize, f64)> = None;
    for &k in &ks {
        for &e in &es {
            let v = p3_value(k as f64, e as f64, costs, coeffs);
            let better = match best {
                None => true,
                Some((bk, be, bv)) => v < bv || (v == bv && (k, e) < (bk, be)),
            };
            if better {
                best = Some((k, e, v));
            }
        }
    }
    let (k, e, _) = best.expect("four candidates");
    Ok(Solution {
        acs_trajectory: trajectory,
        converged,
        ..Solution::at(k, e, costs, coeffs)
    })
}

/// Exact minimiser of the objective over an integer grid.
///
/// Ties go to the smaller `K`, then the smaller `E`.
pub fn grid_search(
    costs: &AveragedCosts,
    coeffs: &ConvergenceCoeffs,
    k_range: RangeInclusive<usize>,
    e_range: RangeInclusive<usize>,
) -> Result<Solution> {
    check_inputs(costs, coeffs)?;
    if k_range.is_empty() || e_range.is_empty() {
        return Err(Error::EmptyGrid);
    }
    // domain check on the corners
    p3_objective(*k_range.start() as f64, *e_range.start() as f64, costs, coeffs)?;
    p3_objective(*k_range.end() as f64, *e_range.end() as f64, costs, coeffs)?;
    let mut best = (0, 0, f64::INFINITY);
    for k in k_range {
        for e in e_range.clone() {
            let v = p3_value(k as f64, e as f64, costs, coeffs);
            if v < best.2 {
                best = (k, e, v);
            }
        }
    }
    Ok(Solution::at(best.0, best.1, costs, coeffs))
}

/// Writes `K_star, E_star, R_star, predicted_cost, overhead_ratio`; the
/// overhead column is empty when no estimation was run.
pub fn write_solution_csv<W: Write>(solution: &Solution, overhead: Option<f64>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["K_star", "E_star", "R_star", "predicted_cost", "overhead_ratio"])?;
    w.write_record([
        solution.k_star.to_string(),
        solution.e_star.to_string(),
        solution.r_star.to_string(),
        solution.predicted_cost.to_string(),
        overhead.map(|o| o.to_string()).unwrap_or_default(),
    ])?;
    w.flush().map_err(|source| Error::Io {
        path: "<csv>".into(),
        source,
    })?;
    Ok(())
}
