//! Expected time and energy of a training run and the convergence-constrained
//! cost objective.
//!
//! With `K` clients sampled per round, `E` local iterations and `R` rounds:
//!
//! * expected energy is `K (e_p E + e_m) R`;
//! * expected time, when uploads dominate, is
//!   `(E[min comp over the sampled set] E + t_m K) R`, where the first client
//!   to finish is the `i`-th fastest of all `N` with probability
//!   `C(N-i, K-1) / C(N, K)`;
//! * the tractable surrogate replaces that minimum by the population mean,
//!   `(t_p E + t_m K) R`;
//! * the optimality gap after `R` rounds is bounded by
//!   `(rho + phi(K) E^2) / (E R)` with `phi(K) = 1 + (N-K) / (K (N-1))`,
//!   the bound's constants normalised so that only `rho = A0 / B0` remains.
//!
//! Setting the bound equal to the precision `epsilon` gives the number of
//! rounds, and substituting it into the weighted cost gives the objective
//! minimised over `(K, E)`:
//!
//! ```text
//! [(1-g)(t_p E + t_m K) + g K (e_p E + e_m)] * (rho + phi(K) E^2) / (epsilon E)
//! ```

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_positive, invalid, Error, Result};
use crate::system::{AveragedCosts, SystemProfile};

/// A choice of sampled clients `k`, local iterations `e` and rounds `r`.
///
/// Values are real so the relaxed problem can be evaluated; integer
/// decisions are represented exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlDecision {
    pub k: f64,
    pub e: f64,
    pub r: f64,
}

/// Constants of the convergence bound.
///
/// `rho` is `A0 / B0` with `B0` normalised to one. `epsilon` is the target
/// precision; it only rescales the round count and defaults to `1`, which
/// folds it into `rho`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceCoeffs {
    pub rho: f64,
    #[serde(default = "one")]
    pub epsilon: f64,
}

fn one() -> f64 {
    1.0
}

impl ConvergenceCoeffs {
    pub fn new(rho: f64) -> Self {
        Self { rho, epsilon: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_positive("rho", self.rho)?;
        ensure_positive("epsilon", self.epsilon)?;
        Ok(())
    }
}

/// Expected time, energy and weighted cost of one decision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub expected_time: f64,
    pub expected_energy: f64,
    pub total_cost: f64,
    pub rounds: f64,
}

impl CostReport {
    pub fn new(expected_time: f64, expected_energy: f64, rounds: f64, gamma: f64) -> Self {
        Self {
            expected_time,
            expected_energy,
            total_cost: gamma * expected_energy + (1.0 - gamma) * expected_time,
            rounds,
        }
    }
}

/// Sampling penalty `phi(K) = 1 + (N - K) / (K (N - 1))`.
///
/// For a single-client federation the penalty is `1`.
pub fn sampling_penalty(k: f64, n: usize) -> f64 {
    if n <= 1 {
        return 1.0;
    }
    let n = n as f64;
    1.0 + (n - k) / (k * (n - 1.0))
}

fn check_decision(k: f64, e: f64, n: usize) -> Result<()> {
    if !(k.is_finite() && k >= 1.0 && k <= n as f64) {
        return Err(invalid("K", format!("must lie in [1, {n}], got {k}")));
    }
    if !(e.is_finite() && e >= 1.0) {
        return Err(invalid("E", format!("must be >= 1, got {e}")));
    }
    Ok(())
}

/// Expected total energy `K (e_p E + e_m) R`.
pub fn expected_energy(k: f64, e: f64, r: f64, costs: &AveragedCosts) -> f64 {
    k * (costs.e_p * e + costs.e_m) * r
}

/// Surrogate expected total time `(t_p E + t_m K) R`.
pub fn expected_time_approx(k: f64, e: f64, r: f64, costs: &AveragedCosts) -> f64 {
    (costs.t_p * e + costs.t_m * k) * r
}

/// Probability that the `i`-th fastest of `n` clients (1-based) is the
/// fastest member of a uniformly drawn `k`-subset, for `i = 1..=n-k+1`.
///
/// The ratios `C(n-i, k-1) / C(n, k)` are built by telescoping products:
/// the first is `k / n` and each next one multiplies by
/// `(n - i - k + 1) / (n - i)`.
pub fn first_finisher_probabilities(n: usize, k: usize) -> Result<Vec<f64>> {
    if k == 0 || k > n {
        return Err(invalid("K", format!("must lie in [1, {n}], got {k}")));
    }
    let terms = n - k + 1;
    let mut probs = Vec::with_capacity(terms);
    let mut p = k as f64 / n as f64;
    for i in 1..=terms {
        probs.push(p);
        if i < terms {
            p *= (n - i - k + 1) as f64 / (n - i) as f64;
        }
    }
    Ok(probs)
}

/// Expected total time with the first-finisher expectation computed exactly
/// from the profile's per-iteration times.
///
/// `t_comp` is sorted internally, so the profile may list clients in any
/// order.
pub fn expected_time_exact(k: usize, e: f64, r: f64, profile: &SystemProfile) -> Result<f64> {
    let n = profile.n_clients;
    let probs = first_finisher_probabilities(n, k)?;
    let mut sorted = profile.t_comp.clone();
    sorted.sort_by(f64::total_cmp);
    let first: f64 = probs.iter().zip(&sorted).map(|(p, t)| p * t).sum();
    let t_m = profile.comm_time_mean.iter().sum::<f64>() / n as f64;
    Ok((first * e + t_m * k as f64) * r)
}

/// Optimality-gap bound `(rho + phi(K) E^2) / (E R)`, divided by `epsilon`.
///
/// With the default `epsilon = 1` this is the bound itself; in general it
/// returns the bound measured in units of the target precision.
pub fn convergence_bound(k: f64, e: f64, r: f64, n: usize, coeffs: &ConvergenceCoeffs) -> f64 {
    (coeffs.rho + sampling_penalty(k, n) * e * e) / (e * r * coeffs.epsilon)
}

/// Rounds needed for the bound to reach the target precision,
/// `(rho + phi(K) E^2) / (epsilon E)`. Continuous; callers take the ceiling.
pub fn rounds_needed(k: f64, e: f64, n: usize, coeffs: &ConvergenceCoeffs) -> f64 {
    (coeffs.rho + sampling_penalty(k, n) * e * e) / (coeffs.epsilon * e)
}

/// Relaxed objective for any positive `k`, `e` (no domain checks).
///
/// Used by the solvers and by finite-difference probes that step slightly
/// outside the feasible box.
pub fn p3_value(k: f64, e: f64, costs: &AveragedCosts, coeffs: &ConvergenceCoeffs) -> f64 {
    let g = costs.gamma;
    let per_round = (1.0 - g) * (costs.t_p * e + costs.t_m * k) + g * k * (costs.e_p * e + costs.e_m);
    per_round * rounds_needed(k, e, costs.n_clients, coeffs)
}

/// Expected weighted cost of reaching the target precision with `(K, E)`,
/// for `1 <= K <= N` and `E >= 1`.
pub fn p3_objective(k: f64, e: f64, costs: &AveragedCosts, coeffs: &ConvergenceCoeffs) -> Result<f64> {
    costs.validate()?;
    coeffs.validate()?;
    check_decision(k, e, costs.n_clients)?;
    Ok(p3_value(k, e, costs, coeffs))
}

/// Time, energy and weighted cost of `(K, E)` at the rounds the bound requires.
pub fn cost_report(k: f64, e: f64, costs: &AveragedCosts, coeffs: &ConvergenceCoeffs) -> Result<CostReport> {
    costs.validate()?;
    coeffs.validate()?;
    check_decision(k, e, costs.n_clients)?;
    let r = rounds_needed(k, e, costs.n_clients, coeffs);
    Ok(CostReport::new(
        expected_time_approx(k, e, r, costs),
        expected_energy(k, e, r, costs),
        r,
        costs.gamma,
    ))
}

/// One point of a cost surface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfacePoint {
    pub k: usize,
    pub e: usize,
    pub objective: f64,
    pub time_term: f64,
    pub energy_term: f64,
}

/// Evaluates the objective on an integer `(K, E)` grid.
///
/// `time_term` and `energy_term` are the unweighted expected time and energy
/// at the required number of rounds; `objective` is their `gamma` blend.
pub fn cost_surface(
    costs: &AveragedCosts,
    coeffs: &ConvergenceCoeffs,
    k_values: &[usize],
    e_values: &[usize],
) -> Result<Vec<SurfacePoint>> {
    if k_values.is_empty() || e_values.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let mut out = Vec::with_capacity(k_values.len() * e_values.len());
    for &k in k_values {
        for &e in e_values {
            let rep = cost_report(k as f64, e as f64, costs, coeffs)?;
            out.push(SurfacePoint {
                k,
                e,
                objective: rep.total_cost,
                time_term: rep.expected_time,
                energy_term: rep.expected_energy,
            });
        }
    }
    Ok(out)
}

/// Writes a surface as CSV `(K, E, objective, time_term, energy_term)`.
pub fn write_surface_csv<W: Write>(points: &[SurfacePoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["K", "E", "objective", "time_term", "energy_term"])?;
    for p in points {
        w.write_record([
            p.k.to_string(),
            p.e.to_string(),
            p.objective.to_string(),
            p.time_term.to_string(),
            p.energy_term.to_string(),
        ])?;
    }
    w.flush().map_err(|source| Error::Io {
        path: "<csv>".into(),
        source,
    })?;
    Ok(())
}
