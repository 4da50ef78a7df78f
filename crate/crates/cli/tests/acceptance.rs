//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.
//!
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --release --test acceptance -- 4 7`.

use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fedcost::costmodel::{
    expected_time_approx, expected_time_exact, p3_value, sampling_penalty,
};
use fedcost::datagen::{gen_synthetic, partition_by_label, DataSample};
use fedcost::learner::{global_loss, run_fedavg, FedAvgRun};
use fedcost::optimizer::{
    acs_optimize, estimate_rho, grid_search, rho_from_increments, rho_from_records, run_pilots, verify_properties,
    AcsConfig, EstimationPlan, PilotIncrement, PropertyGrid,
};
use fedcost::scheduler::{brute_force_min_time, round_time};
use fedcost::system::sample_profile;
use fedcost::{
    AveragedCosts, ConvergenceCoeffs, FederatedDataset, ModelParams, ProfileSpec, RoundJob, Strategy,
    SyntheticSpec, SystemProfile, TrainConfig,
};
use fedcost_cli::config::ExperimentConfig;
use fedcost_cli::{build_inputs, compare_schedulers, ComparisonRow};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn log_uniform(r: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (r.random_range(lo.ln()..hi.ln())).exp()
}

fn random_costs(r: &mut ChaCha8Rng, gamma: f64) -> AveragedCosts {
    AveragedCosts {
        n_clients: r.random_range(20..=200),
        t_p: log_uniform(r, 1e-3, 1.0),
        t_m: log_uniform(r, 1e-2, 1.0),
        e_p: log_uniform(r, 1e-3, 1.0),
        e_m: log_uniform(r, 1e-2, 1.0),
        gamma,
    }
}

// ---------------------------------------------------------------------------

fn scheduling_optimality() -> Outcome {
    let start = Instant::now();
    let mut r = rng(1);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let k = r.random_range(2..=7);
        // multiples of 1/64 keep every sum and max exact
        let comp = (0..k).map(|_| r.random_range(0..2048) as f64 / 64.0).collect();
        let comm = (0..k).map(|_| r.random_range(1..512) as f64 / 64.0).collect();
        let job = RoundJob::new(comp, comm).unwrap();
        let ours = round_time(&job, Strategy::OptimalTs).unwrap();
        let (brute, _) = brute_force_min_time(&job).unwrap();
        if ours != brute {
            mismatches += 1;
        }
    }
    let took = start.elapsed();
    outcome(
        mismatches == 0 && took < Duration::from_secs(10),
        format!("{mismatches} mismatches in 1000 jobs, {:.2}s", took.as_secs_f64()),
    )
}

fn expected_time_exactness() -> Outcome {
    let start = Instant::now();
    let n = 20;
    let profile = sample_profile(&ProfileSpec::simulation(n), 11).unwrap();
    let t_m = profile.comm_time_mean.iter().sum::<f64>() / n as f64;
    let mut r = rng(2);
    let mut details = Vec::new();
    let mut pass = true;
    for k in [1, 5, 10] {
        // first-finisher term only: E = R = 1 and the upload part removed
        let exact = expected_time_exact(k, 1.0, 1.0, &profile).unwrap() - t_m * k as f64;
        let draws = 100_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..draws {
            let m = sample(&mut r, n, k)
                .iter()
                .map(|i| profile.t_comp[i])
                .fold(f64::INFINITY, f64::min);
            sum += m;
            sq += m * m;
        }
        let mean = sum / draws as f64;
        let se = ((sq / draws as f64 - mean * mean) / draws as f64).sqrt();
        let z = (mean - exact).abs() / se;
        pass &= z <= 3.0;
        details.push(format!("K={k}: {z:.2} SE"));
    }
    let homogeneous = SystemProfile {
        t_comp: vec![0.37; n],
        ..profile.clone()
    };
    let avg_h = homogeneous.averaged(0.0).unwrap();
    let avg = profile.averaged(0.0).unwrap();
    let mut worst: f64 = 0.0;
    for k in 1..=n {
        let (e, rr) = (13.0, 41.0);
        let exact = expected_time_exact(k, e, rr, &homogeneous).unwrap();
        let approx = expected_time_approx(k as f64, e, rr, &avg_h);
        worst = worst.max((exact - approx).abs() / approx);
    }
    let exact1 = expected_time_exact(1, 13.0, 41.0, &profile).unwrap();
    let approx1 = expected_time_approx(1.0, 13.0, 41.0, &avg);
    worst = worst.max((exact1 - approx1).abs() / approx1);
    pass &= worst <= 1e-9;
    let took = start.elapsed();
    pass &= took < Duration::from_secs(30);
    details.push(format!("closed-form cases rel err {worst:.1e}, {:.2}s", took.as_secs_f64()));
    outcome(pass, details.join("; "))
}

fn biconvexity() -> Outcome {
    let mut r = rng(3);
    let mut failures = 0;
    let mut checked = 0;
    for _ in 0..20 {
        let gamma = r.random_range(0.0..0.9);
        let costs = random_costs(&mut r, gamma);
        let coeffs = ConvergenceCoeffs::new(log_uniform(&mut r, 1e2, 1e5));
        let n = costs.n_clients as f64;
        for i in 0..50 {
            let k = 1.0 + (n - 1.0) * i as f64 / 49.0;
            for j in 0..50 {
                let e = 1.0 + 99.0 * j as f64 / 49.0;
                let f = |k, e| p3_value(k, e, &costs, &coeffs);
                let (hk, he) = (0.05 * k, 0.05 * e);
                let f0 = f(k, e);
                let dkk = f(k + hk, e) - 2.0 * f0 + f(k - hk, e);
                let dee = f(k, e + he) - 2.0 * f0 + f(k, e - he);
                checked += 1;
                if !(dkk > 0.0 && dee > 0.0) {
                    failures += 1;
                }
            }
        }
    }
    outcome(failures == 0, format!("{failures} of {checked} grid points without positive curvature"))
}

fn acs_near_optimality() -> Outcome {
    let start = Instant::now();
    let mut r = rng(4);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let gamma = r.random_range(0.0..=1.0);
        let costs = random_costs(&mut r, gamma);
        let coeffs = ConvergenceCoeffs::new(log_uniform(&mut r, 1e2, 1e5));
        let acs = acs_optimize(&costs, &coeffs, &AcsConfig::default().with_e_max(100.0)).unwrap();
        let grid = grid_search(&costs, &coeffs, 1..=costs.n_clients, 1..=100).unwrap();
        worst = worst.max(acs.predicted_cost / grid.predicted_cost - 1.0);
    }
    let took = start.elapsed();
    outcome(
        worst <= 0.01 && took < Duration::from_secs(60),
        format!("worst excess over grid {:.3}%, {:.2}s", 100.0 * worst, took.as_secs_f64()),
    )
}

/// Rounds until the first trace at or below `level`, linearly interpolated.
fn crossing(run: &FedAvgRun, level: f64) -> Option<f64> {
    let mut prev = (0.0, run.initial_loss);
    for t in &run.traces {
        let cur = (t.round as f64, t.loss);
        if cur.1 <= level {
            let frac = if prev.1 > cur.1 { (prev.1 - level) / (prev.1 - cur.1) } else { 1.0 };
            return Some(prev.0 + frac.clamp(0.0, 1.0) * (cur.0 - prev.0));
        }
        prev = cur;
    }
    None
}

/// Ordinary least squares `y = a + b x`.
fn fit_line(points: &[(f64, f64)]) -> (f64, f64) {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let b = sxy / sxx;
    (my - b * mx, b)
}

fn estimator_recovery() -> Outcome {
    let mut r = rng(5);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let n = r.random_range(10..=200);
        let rho = log_uniform(&mut r, 10.0, 1e5);
        let scale = log_uniform(&mut r, 1e-3, 1.0);
        let pilots: Vec<PilotIncrement> = (0..r.random_range(2..=6))
            .map(|i| {
                // well separated: phi E^2 spans rho
                let k = (1 + (i * 7) % n) as f64;
                let e = rho.sqrt() * (0.3 + 1.2 * i as f64);
                let dr = scale * (rho + sampling_penalty(k, n) * e * e) / e;
                PilotIncrement { k, e, delta_rounds: dr }
            })
            .collect();
        let est = rho_from_increments(&pilots, n).unwrap();
        worst = worst.max((est.rho - rho).abs() / rho);
    }
    let mut pass = worst <= 1e-6;
    let mut detail = format!("noiseless rel err {worst:.1e}");

    let desk = DeskSetup::new();
    let runs = match run_pilots(&desk.plan(), &desk.data, &desk.profile, &desk.pilot_base(), Strategy::OptimalTs) {
        Ok(runs) => runs,
        Err(e) => return outcome(false, format!("{detail}; pilots failed: {e}")),
    };
    let n = desk.data.n_clients();
    let records: Vec<_> = runs.iter().map(|(rec, _)| *rec).collect();
    let estimate = match rho_from_records(&records, n) {
        Ok(est) => est.rho,
        Err(e) => return outcome(false, format!("{detail}; estimator failed: {e}")),
    };
    // Back-fit: between successive loss levels from the start down to the
    // target, E dR is affine in phi E^2 with intercept / slope = rho.
    let (top, bottom) = (desk.initial_loss, desk.target);
    let levels: Vec<f64> = (0..=10).map(|i| top - (top - bottom) * i as f64 / 10.0).collect();
    let mut fits = Vec::new();
    for w in levels.windows(2) {
        let w = [w[0], w[1].max(bottom)];
        let pts: Option<Vec<(f64, f64)>> = runs
            .iter()
            .map(|(rec, run)| {
                let d = crossing(run, w[1])? - crossing(run, w[0])?;
                let e = rec.e as f64;
                Some((sampling_penalty(rec.k as f64, n) * e * e, e * d))
            })
            .collect();
        if let Some(pts) = pts {
            let (a, b) = fit_line(&pts);
            if a > 0.0 && b > 0.0 {
                fits.push(a / b);
            }
        }
    }
    if fits.is_empty() {
        return outcome(false, format!("{detail}; no usable back-fit window"));
    }
    fits.sort_by(f64::total_cmp);
    let backfit = fits[fits.len() / 2];
    let ratio = estimate / backfit;
    pass &= (0.5..=2.0).contains(&ratio);
    detail += &format!("; pilots {estimate:.0} vs back-fit {backfit:.0} (ratio {ratio:.2})");
    outcome(pass, detail)
}

fn property_suite() -> Outcome {
    let costs = AveragedCosts {
        n_clients: 100,
        t_p: 0.5,
        t_m: 0.2,
        e_p: 0.01,
        e_m: 0.02,
        gamma: 0.5,
    };
    let report = verify_properties(&costs, &ConvergenceCoeffs::new(1850.0), &PropertyGrid::default()).unwrap();
    let failed: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
    outcome(
        report.all_passed(),
        format!("{} checks, failed: {:?}", report.checks.len(), failed),
    )
}

fn zero_model_and_gradient() -> Outcome {
    let mut datasets: Vec<FederatedDataset> = [(0.0, 0.0), (0.5, 0.5), (1.0, 1.0)]
        .iter()
        .enumerate()
        .map(|(i, &(a, b))| gen_synthetic(&SyntheticSpec::new(a, b, 12, 40.0, 30.0), i as u64).unwrap())
        .collect();
    let mut r = rng(9);
    let pool: Vec<DataSample> = (0..600)
        .map(|i| DataSample {
            features: (0..16).map(|_| r.random_range(0.0..1.0)).collect(),
            label: i % 10,
        })
        .collect();
    datasets.push(partition_by_label(&pool, 10, 2, 40, 9).unwrap());

    let mut worst_zero: f64 = 0.0;
    for d in &datasets {
        let loss = global_loss(&ModelParams::zeros(d.classes, d.dim), d).unwrap();
        worst_zero = worst_zero.max((loss - (d.classes as f64).ln()).abs());
    }

    let d = &datasets[2];
    let shard = &d.shards[0];
    let mut worst_grad: f64 = 0.0;
    for _ in 0..10 {
        let mut m = ModelParams::zeros(d.classes, d.dim);
        m.weights.iter_mut().for_each(|w| *w = r.random_range(-0.5..0.5));
        m.bias.iter_mut().for_each(|b| *b = r.random_range(-0.5..0.5));
        let (_, g) = m.loss_and_grad(shard.features.view(), &shard.labels);
        let h = 1e-5;
        let (mut num, mut den) = (0.0, 0.0);
        for c in 0..d.classes {
            for j in 0..=d.dim {
                let mut plus = m.clone();
                let mut minus = m.clone();
                let analytic = if j < d.dim {
                    plus.weights[[c, j]] += h;
                    minus.weights[[c, j]] -= h;
                    g.weights[[c, j]]
                } else {
                    plus.bias[c] += h;
                    minus.bias[c] -= h;
                    g.bias[c]
                };
                let fd = (plus.loss(shard).unwrap() - minus.loss(shard).unwrap()) / (2.0 * h);
                num += (fd - analytic).powi(2);
                den += analytic * analytic;
            }
        }
        worst_grad = worst_grad.max((num / den).sqrt());
    }
    outcome(
        worst_zero <= 1e-12 && worst_grad <= 1e-5,
        format!("|F(0) - ln C| <= {worst_zero:.1e}; gradient rel err {worst_grad:.1e}"),
    )
}

// ---------------------------------------------------------------------------

/// Mean time and energy over the evaluation seeds, or `None` when some seed
/// misses the target within the round cap.
fn mean_cost(
    data: &FederatedDataset,
    profile: &SystemProfile,
    k: usize,
    e: usize,
    target: f64,
) -> Option<(f64, f64)> {
    const SEEDS: [u64; 2] = [100, 101];
    let mut acc = (0.0, 0.0);
    for seed in SEEDS {
        let cfg = TrainConfig::new(k, e, 800, seed).with_target(target);
        let run = run_fedavg(data, profile, &cfg, Strategy::OptimalTs).unwrap();
        if !run.reached_target {
            return None;
        }
        acc.0 += run.total_time();
        acc.1 += run.total_energy();
    }
    Some((acc.0 / SEEDS.len() as f64, acc.1 / SEEDS.len() as f64))
}

/// Synthetic(1, 1) over 20 prototype-like clients with the target at 1.1x
/// the best loss of a 300-round full-participation run.
struct DeskSetup {
    data: FederatedDataset,
    profile: SystemProfile,
    initial_loss: f64,
    target: f64,
}

impl DeskSetup {
    fn new() -> Self {
        let n = 20;
        let data = gen_synthetic(&SyntheticSpec::new(1.0, 1.0, n, 150.0, 195.0), 7).unwrap();
        let profile = sample_profile(&ProfileSpec::prototype(n), 7).unwrap();
        let reference = run_fedavg(&data, &profile, &TrainConfig::new(n, 80, 300, 1), Strategy::OptimalTs).unwrap();
        let best = reference.traces.iter().map(|t| t.loss).fold(f64::INFINITY, f64::min);
        Self {
            data,
            profile,
            initial_loss: reference.initial_loss,
            target: 1.1 * best,
        }
    }

    /// Pilots keep `E >= 40` and measure the last stretch before the target.
    fn plan(&self) -> EstimationPlan {
        EstimationPlan {
            pilots: vec![(1, 40), (4, 60), (10, 100), (20, 160), (2, 120)],
            f_a: self.target + 0.1 * (self.initial_loss - self.target),
            f_b: self.target,
            round_cap: 800,
        }
    }

    fn pilot_base(&self) -> TrainConfig {
        TrainConfig::new(1, 1, 1, 55)
    }
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let desk = DeskSetup::new();
    let (data, profile, target) = (&desk.data, &desk.profile, desk.target);

    let mut grid = Vec::new();
    for k in [1, 2, 4, 8, 12, 20] {
        for e in [10, 20, 40, 60, 80, 120] {
            if let Some(c) = mean_cost(data, profile, k, e, target) {
                grid.push(c);
            }
        }
    }

    let rho = match estimate_rho(&desk.plan(), data, profile, &desk.pilot_base(), Strategy::OptimalTs) {
        Ok((est, _)) => est.rho,
        Err(e) => return outcome(false, format!("estimation failed: {e}")),
    };

    let mut pass = true;
    let mut details = vec![format!("target {target:.4}, rho {rho:.0}")];
    for gamma in [0.0, 0.5, 1.0] {
        let blend = |(t, j): (f64, f64)| (1.0 - gamma) * t + gamma * j;
        let grid_best = grid.iter().map(|&c| blend(c)).fold(f64::INFINITY, f64::min);
        let costs = profile.averaged(gamma).unwrap();
        let s = acs_optimize(&costs, &ConvergenceCoeffs::new(rho), &AcsConfig::default()).unwrap();
        match mean_cost(data, profile, s.k_star, s.e_star, target) {
            Some(c) => {
                let ratio = blend(c) / grid_best;
                pass &= ratio <= 1.25;
                details.push(format!("gamma {gamma}: (K*, E*) = ({}, {}) at {ratio:.3}x grid best", s.k_star, s.e_star));
            }
            None => {
                pass = false;
                details.push(format!("gamma {gamma}: ({}, {}) missed the target", s.k_star, s.e_star));
            }
        }
    }
    let took = start.elapsed();
    pass &= took < Duration::from_secs(15 * 60);
    details.push(format!("{:.0}s", took.as_secs_f64()));
    outcome(pass, details.join("; "))
}

const COMPARISON: &str = r#"
seed = 21
gamma = 0.0

[dataset]
kind = "synthetic"
alpha = 1.0
beta = 1.0
n_clients = 20
size_mean = 150.0
size_std = 195.0

[system]
preset = "prototype"

[control]
mode = "fixed"
k = 10
e = 70

[training]
max_rounds = 1500
target_loss = 0.6

[sweep]
e_values = [10, 20, 40, 80, 160, 320, 640, 1000]
k_at = 10
k_values = [1, 2, 4, 7, 10, 15, 20]
e_at = 70
"#;

/// Non-decreasing apart from at most one dip, higher at the end than at the
/// start, and growing by at most 10% over the final step.
fn rises_then_plateaus(curve: &[f64]) -> (bool, usize, f64) {
    let dips = curve.windows(2).filter(|w| w[1] < w[0]).count();
    let n = curve.len();
    let last_step = curve[n - 1] / curve[n - 2] - 1.0;
    (dips <= 1 && curve[n - 1] > curve[0] && last_step <= 0.10, dips, last_step)
}

fn scheduler_comparison() -> Outcome {
    let cfg = ExperimentConfig::from_toml(COMPARISON).unwrap();
    let inputs = build_inputs(&cfg).unwrap();
    let rows = compare_schedulers(&cfg, &inputs).unwrap();
    let mut pass = rows.iter().all(|r| r.reached_target);
    let mut details = Vec::new();
    for sweep in ["E", "K"] {
        let points: Vec<&[ComparisonRow]> = rows
            .chunks(3)
            .filter(|c| c[0].sweep == sweep)
            .collect();
        let time = |c: &[ComparisonRow], s: Strategy| c.iter().find(|r| r.strategy == s).unwrap().total_time;
        let dominated = points.iter().all(|c| {
            let opt = time(c, Strategy::OptimalTs);
            opt <= time(c, Strategy::WaitAllTs) && opt <= time(c, Strategy::StaticFs)
        });
        let gaps: Vec<f64> = points
            .iter()
            .map(|c| time(c, Strategy::WaitAllTs) - time(c, Strategy::OptimalTs))
            .collect();
        let per_round: Vec<f64> = points.iter().zip(&gaps).map(|(c, g)| g / c[0].rounds as f64).collect();
        let (shape, dips, last_step) = rises_then_plateaus(&gaps);
        pass &= dominated && shape;
        let fmt = |v: &[f64], p: usize| v.iter().map(|g| format!("{g:.p$}")).collect::<Vec<_>>().join(", ");
        details.push(format!(
            "{sweep}-sweep: dominance {dominated}, gaps [{}] ({dips} dips, last step {:+.0}%), per round [{}]",
            fmt(&gaps, 1),
            100.0 * last_step,
            fmt(&per_round, 2)
        ));
    }
    outcome(pass, details.join("; "))
}

// ---------------------------------------------------------------------------

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("scheduling optimality", scheduling_optimality),
        ("expected-time exactness", expected_time_exactness),
        ("biconvexity", biconvexity),
        ("ACS near-optimality", acs_near_optimality),
        ("estimator recovery", estimator_recovery),
        ("property suite", property_suite),
        ("end-to-end cost", end_to_end),
        ("scheduler comparison shape", scheduler_comparison),
        ("zero-model loss and gradient", zero_model_and_gradient),
    ];
    let selected: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !selected.is_empty() && !selected.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(f))
            .unwrap_or_else(|_| outcome(false, "panicked"));
        if !result.pass {
            failed += 1;
        }
        println!(
            "criterion {id} {name:<30} {} ({}) [{:.1}s]",
            if result.pass { "PASS" } else { "FAIL" },
            result.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
