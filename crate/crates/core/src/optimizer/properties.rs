//! Numerical checks of how the optimal `(K, E)` responds to prices and
//! system parameters.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{solve_e_given_k, solve_k_given_e};
use crate::costmodel::{p3_value, ConvergenceCoeffs};
use crate::error::{Error, Result};
use crate::system::AveragedCosts;

/// Where the checks are evaluated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PropertyGrid {
    /// Price weights, ascending.
    pub gammas: Vec<f64>,
    /// Factors applied to one parameter at a time, ascending.
    pub multipliers: Vec<f64>,
    /// Fixed `E` values at which `K'` is examined.
    pub e_values: Vec<f64>,
    /// Fixed `K` values at which `E'` and the shape in `E` are examined;
    /// values above `N` are skipped.
    pub k_values: Vec<f64>,
    /// Integer `E` range `1..=e_max` for the shape check.
    pub e_max: usize,
    /// The interior price weight used for the sign checks.
    pub mid_gamma: f64,
    /// `E` at which `K'` must fall when `t_p` is divided by `drop_factor`.
    pub movement_e: f64,
    pub drop_factor: f64,
}

impl Default for PropertyGrid {
    fn default() -> Self {
        Self {
            gammas: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            multipliers: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            e_values: vec![1.0, 5.0, 10.0, 26.0, 50.0, 100.0],
            k_values: vec![1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0],
            e_max: 100,
            mid_gamma: 0.5,
            movement_e: 26.0,
            drop_factor: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PropertyReport {
    pub checks: Vec<PropertyCheck>,
}

impl PropertyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &PropertyCheck> {
        self.checks.iter().filter(|c| !c.passed)
    }

    /// Writes `property, passed, detail`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["property", "passed", "detail"])?;
        for c in &self.checks {
            w.write_record([c.name.as_str(), if c.passed { "true" } else { "false" }, c.detail.as_str()])?;
        }
        w.flush().map_err(|source| Error::Io {
            path: "<csv>".into(),
            source,
        })?;
        Ok(())
    }

    fn push(&mut self, name: &str, violations: Vec<String>, evaluated: usize) {
        let passed = violations.is_empty();
        let detail = if passed {
            format!("{evaluated} cases")
        } else {
            format!("{} of {evaluated} cases violated; first: {}", violations.len(), violations[0])
        };
        self.checks.push(PropertyCheck {
            name: name.to_string(),
            passed,
            detail,
        });
    }
}

const E_CEILING: f64 = 1e9;

fn e_star(k: f64, costs: &AveragedCosts, coeffs: &ConvergenceCoeffs) -> Result<f64> {
    match solve_e_given_k(k, costs, coeffs, E_CEILING) {
        Err(Error::RootAboveCeiling { .. }) => Ok(E_CEILING),
        other => other,
    }
}

/// Relative slack for monotonicity comparisons.
fn slack(x: f64) -> f64 {
    1e-9 * x.abs().max(1.0)
}

#[derive(Clone, Copy)]
enum Param {
    TP,
    TM,
    EP,
    EM,
}

fn scaled(costs: &AveragedCosts, p: Param, m: f64) -> AveragedCosts {
    let mut c = *costs;
    match p {
        Param::TP => c.t_p *= m,
        Param::TM => c.t_m *= m,
        Param::EP => c.e_p *= m,
        Param::EM => c.e_m *= m,
    }
    c
}

/// Collects violations of monotonicity of `f` over the multipliers.
/// `increasing` selects non-decreasing versus non-increasing.
fn monotone_in(
    multipliers: &[f64],
    increasing: bool,
    label: &str,
    f: impl Fn(f64) -> Result<f64>,
) -> Result<Vec<String>> {
    let vals: Vec<f64> = multipliers.iter().map(|&m| f(m)).collect::<Result<_>>()?;
    let mut out = Vec::new();
    for (w, m) in vals.windows(2).zip(multipliers.windows(2)) {
        let ok = if increasing {
            w[1] >= w[0] - slack(w[0])
        } else {
            w[1] <= w[0] + slack(w[0])
        };
        if !ok {
            out.push(format!("{label}: x{} -> {}, x{} -> {}", m[0], w[0], m[1], w[1]));
        }
    }
    Ok(out)
}

/// Number of sign changes in the successive differences of `vals`,
/// ignoring exact zeros.
fn sign_changes(vals: &[f64]) -> usize {
    let mut last = 0i8;
    let mut changes = 0;
    for w in vals.windows(2) {
        let d = w[1] - w[0];
        let s = if d > 0.0 {
            1
        } else if d < 0.0 {
            -1
        } else {
            0
        };
        if s != 0 {
            if last != 0 && s != last {
                changes += 1;
            }
            last = s;
        }
    }
    changes
}

/// Evaluates the monotonicity and shape properties of the minimisers on
/// `grid`. Violations are reported, not raised; errors only come from
/// invalid inputs.
pub fn verify_properties(
    costs: &AveragedCosts,
    coeffs: &ConvergenceCoeffs,
    grid: &PropertyGrid,
) -> Result<PropertyReport> {
    costs.validate()?;
    coeffs.validate()?;
    let n = costs.n_clients as f64;
    let ks: Vec<f64> = grid.k_values.iter().copied().filter(|&k| (1.0..=n).contains(&k)).collect();
    let mut report = PropertyReport::default();

    // K' against the price weight
    let mut v = Vec::new();
    let mut count = 0;
    for &e in &grid.e_values {
        let seq: Vec<f64> = grid
            .gammas
            .iter()
            .map(|&g| solve_k_given_e(e, &costs.with_gamma(g), coeffs))
            .collect::<Result<_>>()?;
        count += seq.len();
        for (w, g) in seq.windows(2).zip(grid.gammas.windows(2)) {
            if w[1] > w[0] + slack(w[0]) {
                v.push(format!("E={e}: K'({})={} < K'({})={}", g[0], w[0], g[1], w[1]));
            }
        }
    }
    report.push("k_star_nonincreasing_in_gamma", v, count);

    let mut v = Vec::new();
    for &e in &grid.e_values {
        let k = solve_k_given_e(e, &costs.with_gamma(1.0), coeffs)?;
        if k != 1.0 {
            v.push(format!("E={e}: K'={k}"));
        }
    }
    report.push("k_star_is_one_at_gamma_one", v, grid.e_values.len());

    // K' against each parameter at an interior price weight
    let mid = costs.with_gamma(grid.mid_gamma);
    for (name, p, increasing) in [
        ("k_star_increases_with_t_p", Param::TP, true),
        ("k_star_decreases_with_t_m", Param::TM, false),
        ("k_star_decreases_with_e_p", Param::EP, false),
        ("k_star_decreases_with_e_m", Param::EM, false),
    ] {
        let mut v = Vec::new();
        for &e in &grid.e_values {
            v.extend(monotone_in(&grid.multipliers, increasing, &format!("E={e}"), |m| {
                solve_k_given_e(e, &scaled(&mid, p, m), coeffs)
            })?);
        }
        report.push(name, v, grid.e_values.len() * grid.multipliers.len());
    }

    // at g = 0 only t_p / t_m matters
    let zero = costs.with_gamma(0.0);
    let mut v = Vec::new();
    for &e in &grid.e_values {
        v.extend(monotone_in(&grid.multipliers, true, &format!("E={e}, t_p scaled"), |m| {
            solve_k_given_e(e, &scaled(&zero, Param::TP, m), coeffs)
        })?);
        v.extend(monotone_in(&grid.multipliers, true, &format!("E={e}, t_m divided"), |m| {
            solve_k_given_e(e, &scaled(&zero, Param::TM, 1.0 / m), coeffs)
        })?);
    }
    report.push("k_star_increases_with_t_p_over_t_m_at_gamma_zero", v, 2 * grid.e_values.len() * grid.multipliers.len());

    let before = solve_k_given_e(grid.movement_e, &zero, coeffs)?;
    let after = solve_k_given_e(grid.movement_e, &scaled(&zero, Param::TP, 1.0 / grid.drop_factor), coeffs)?;
    let v = if after < before {
        vec![]
    } else {
        vec![format!("E={}: K' {before} -> {after}", grid.movement_e)]
    };
    report.push("k_star_drops_when_t_p_falls_at_gamma_zero", v, 1);

    // shape of the objective in E
    let mut v = Vec::new();
    let mut count = 0;
    for &g in &grid.gammas {
        let c = costs.with_gamma(g);
        for &k in &ks {
            let vals: Vec<f64> = (1..=grid.e_max).map(|e| p3_value(k, e as f64, &c, coeffs)).collect();
            count += 1;
            let changes = sign_changes(&vals);
            let rises_then_falls = changes == 1 && vals[1] > vals[0];
            if changes > 1 || rises_then_falls {
                v.push(format!("gamma={g}, K={k}: {changes} sign changes"));
            }
        }
    }
    report.push("objective_unimodal_in_e", v, count);

    // E' against each parameter
    for (name, p, increasing) in [
        ("e_star_increases_as_t_p_decreases", Param::TP, false),
        ("e_star_increases_as_e_p_decreases", Param::EP, false),
    ] {
        let mut v = Vec::new();
        for &k in &ks {
            v.extend(monotone_in(&grid.multipliers, increasing, &format!("K={k}"), |m| {
                e_star(k, &scaled(&mid, p, m), coeffs)
            })?);
        }
        report.push(name, v, ks.len() * grid.multipliers.len());
    }

    let one = costs.with_gamma(1.0);
    for (name, c, p) in [
        ("e_star_increases_with_t_m_over_t_p_at_gamma_zero", zero, Param::TM),
        ("e_star_increases_with_e_m_over_e_p_at_gamma_one", one, Param::EM),
    ] {
        let mut v = Vec::new();
        for &k in &ks {
            v.extend(monotone_in(&grid.multipliers, true, &format!("K={k}"), |m| {
                e_star(k, &scaled(&c, p, m), coeffs)
            })?);
        }
        report.push(name, v, ks.len() * grid.multipliers.len());
    }

    let before = e_star(1.0, &one, coeffs)?;
    let after = e_star(1.0, &scaled(&one, Param::EP, 1.0 / grid.drop_factor), coeffs)?;
    let v = if after > before {
        vec![]
    } else {
        vec![format!("K=1: E' {before} -> {after}")]
    };
    report.push("e_star_rises_when_e_p_falls_at_gamma_one", v, 1);

    Ok(report)
}
