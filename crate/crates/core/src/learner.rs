//! Multinomial logistic regression trained with federated averaging.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{ClientShard, FederatedDataset};
use crate::error::{ensure_finite, invalid, Error, Result};
use crate::rng::{round_client_stream, stream, Purpose};
use crate::scheduler::{round_time, RoundJob, Strategy};
use crate::system::{draw_round_costs, SystemProfile};

/// Weights (`C x d`) and bias (`C`) of a linear softmax classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ModelParams {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        Self {
            weights: Array2::zeros((classes, dim)),
            bias: Array1::zeros(classes),
        }
    }

    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn dim(&self) -> usize {
        self.weights.ncols()
    }

    fn check_shard(&self, shard: &ClientShard) -> Result<()> {
        if shard.features.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} features", self.dim()),
                actual: format!("{} features", shard.features.ncols()),
            });
        }
        if let Some(&bad) = shard.labels.iter().find(|&&l| l >= self.classes()) {
            return Err(Error::DimensionMismatch {
                expected: format!("labels below {}", self.classes()),
                actual: format!("label {bad}"),
            });
        }
        Ok(())
    }

    /// Row-wise softmax probabilities and the mean cross-entropy.
    fn forward(&self, x: ArrayView2<f64>, labels: &[usize]) -> (Array2<f64>, f64) {
        let mut z = x.dot(&self.weights.t()) + &self.bias;
        let mut loss = 0.0;
        for (mut row, &y) in z.axis_iter_mut(Axis(0)).zip(labels) {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let zy = row[y];
            row.mapv_inplace(|v| (v - m).exp());
            let s = row.sum();
            loss += s.ln() + m - zy;
            row /= s;
        }
        (z, loss / labels.len() as f64)
    }

    /// Mean cross-entropy over `shard`.
    pub fn loss(&self, shard: &ClientShard) -> Result<f64> {
        self.check_shard(shard)?;
        if shard.is_empty() {
            return Err(Error::EmptyShard(shard.client_id));
        }
        Ok(self.forward(shard.features.view(), &shard.labels).1)
    }

    /// Mean cross-entropy and its gradient over the given rows.
    pub fn loss_and_grad(&self, x: ArrayView2<f64>, labels: &[usize]) -> (f64, ModelParams) {
        let (mut p, loss) = self.forward(x, labels);
        for (mut row, &y) in p.axis_iter_mut(Axis(0)).zip(labels) {
            row[y] -= 1.0;
        }
        let b = labels.len() as f64;
        let weights = p.t().dot(&x) / b;
        let bias = p.sum_axis(Axis(0)) / b;
        (loss, ModelParams { weights, bias })
    }

    fn step(&mut self, grad: &ModelParams, lr: f64) {
        self.weights.scaled_add(-lr, &grad.weights);
        self.bias.scaled_add(-lr, &grad.bias);
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }
}

/// Global objective `sum_k p_k F_k(w)`.
pub fn global_loss(model: &ModelParams, dataset: &FederatedDataset) -> Result<f64> {
    let parts: Vec<f64> = dataset
        .shards
        .par_iter()
        .map(|s| model.loss(s))
        .collect::<Result<_>>()?;
    Ok(parts.iter().zip(&dataset.weights).map(|(f, p)| p * f).sum())
}

/// Runs `steps` mini-batch SGD steps on one shard.
///
/// Each step draws `batch_size` rows uniformly with replacement. When
/// `batch_size >= n_k` every step uses the full shard instead.
pub fn local_sgd<R: Rng>(
    model: &ModelParams,
    shard: &ClientShard,
    steps: usize,
    lr: f64,
    batch_size: usize,
    rng: &mut R,
) -> Result<ModelParams> {
    model.check_shard(shard)?;
    if shard.is_empty() {
        return Err(Error::EmptyShard(shard.client_id));
    }
    if batch_size == 0 {
        return Err(invalid("batch_size", "must be at least 1"));
    }
    ensure_finite("lr", lr)?;
    if lr < 0.0 {
        return Err(invalid("lr", format!("must be >= 0, got {lr}")));
    }
    let n = shard.len();
    let mut w = model.clone();
    for _ in 0..steps {
        let grad = if batch_size >= n {
            w.loss_and_grad(shard.features.view(), &shard.labels).1
        } else {
            let idx: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..n)).collect();
            let x = shard.features.select(Axis(0), &idx);
            let y: Vec<usize> = idx.iter().map(|&i| shard.labels[i]).collect();
            w.loss_and_grad(x.view(), &y).1
        };
        w.step(&grad, lr);
    }
    Ok(w)
}

/// Weighted average of client models with weights `n_k / sum n_j` over the
/// contributing clients.
///
/// Sums run in increasing client id so the result does not depend on the
/// order of `updates`.
pub fn aggregate(updates: &[(usize, ModelParams)], dataset: &FederatedDataset) -> Result<ModelParams> {
    if updates.is_empty() {
        return Err(Error::EmptyUpdates);
    }
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by_key(|&i| updates[i].0);
    for pair in order.windows(2) {
        if updates[pair[0]].0 == updates[pair[1]].0 {
            return Err(Error::DuplicateClient(updates[pair[0]].0));
        }
    }
    let mut total = 0usize;
    for &(id, _) in updates {
        let shard = dataset.shards.get(id).ok_or(Error::UnknownClient(id))?;
        total += shard.len();
    }
    let first = &updates[0].1;
    let mut out = ModelParams::zeros(first.classes(), first.dim());
    for i in order {
        let (id, m) = &updates[i];
        if m.weights.dim() != out.weights.dim() {
            return Err(Error::DimensionMismatch {
                expected: format!("{:?}", out.weights.dim()),
                actual: format!("{:?}", m.weights.dim()),
            });
        }
        let w = dataset.shards[*id].len() as f64 / total as f64;
        out.weights.scaled_add(w, &m.weights);
        out.bias.scaled_add(w, &m.bias);
    }
    Ok(out)
}

/// Settings of one FedAvg run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Clients sampled per round.
    pub k: usize,
    /// Local SGD steps per round.
    pub e: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Initial learning rate; round `r` (from 0) uses `eta0 / (1 + r)`.
    #[serde(default = "default_eta0")]
    pub eta0: f64,
    pub max_rounds: usize,
    /// Stop after the first round whose global loss is at or below this.
    #[serde(default)]
    pub target_loss: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

fn default_batch() -> usize {
    64
}

fn default_eta0() -> f64 {
    0.1
}

impl TrainConfig {
    pub fn new(k: usize, e: usize, max_rounds: usize, seed: u64) -> Self {
        Self {
            k,
            e,
            batch_size: default_batch(),
            eta0: default_eta0(),
            max_rounds,
            target_loss: None,
            seed,
        }
    }

    pub fn with_target(mut self, target: f64) -> Self {
        self.target_loss = Some(target);
        self
    }
}

/// What happened in one round (rounds are numbered from 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    pub loss: f64,
    pub round_time: f64,
    pub round_energy: f64,
    pub sampled: Vec<usize>,
}

/// Result of [`run_fedavg`].
#[derive(Debug, Clone)]
pub struct FedAvgRun {
    pub model: ModelParams,
    /// Global loss of the initial all-zero model.
    pub initial_loss: f64,
    pub traces: Vec<RoundTrace>,
    /// Per-round computation and upload times, for re-timing the same
    /// trajectory under another scheduling policy.
    pub jobs: Vec<RoundJob>,
    pub reached_target: bool,
}

impl FedAvgRun {
    pub fn rounds(&self) -> usize {
        self.traces.len()
    }

    pub fn total_time(&self) -> f64 {
        self.traces.iter().map(|t| t.round_time).sum()
    }

    pub fn total_energy(&self) -> f64 {
        self.traces.iter().map(|t| t.round_energy).sum()
    }

    /// Total time of the recorded rounds had they been served by `strategy`.
    pub fn total_time_under(&self, strategy: Strategy) -> Result<f64> {
        self.jobs.iter().map(|j| round_time(j, strategy)).sum()
    }

    /// First round whose loss is at or below `threshold`.
    pub fn first_round_below(&self, threshold: f64) -> Option<usize> {
        self.traces.iter().find(|t| t.loss <= threshold).map(|t| t.round)
    }
}

/// Samples `k` distinct clients for `round`, in increasing id order.
pub fn sample_clients(n: usize, k: usize, seed: u64, round: usize) -> Vec<usize> {
    let mut rng = stream(seed, Purpose::ClientSampling, round as u64);
    let mut ids = sample_indices(&mut rng, n, k).into_vec();
    ids.sort_unstable();
    ids
}

/// Federated averaging with time and energy accounting.
///
/// Each round samples `K` clients, runs `E` local steps on each (in
/// parallel), aggregates, and charges the round's wall-clock time under
/// `strategy` plus the summed computation and upload energy.
pub fn run_fedavg(
    dataset: &FederatedDataset,
    profile: &SystemProfile,
    config: &TrainConfig,
    strategy: Strategy,
) -> Result<FedAvgRun> {
    let n = dataset.n_clients();
    if profile.n_clients != n {
        return Err(invalid(
            "profile",
            format!("describes {} clients but the dataset has {n}", profile.n_clients),
        ));
    }
    if config.k == 0 || config.k > n {
        return Err(invalid("k", format!("must lie in [1, {n}], got {}", config.k)));
    }
    if config.e == 0 {
        return Err(invalid("e", "must be at least 1"));
    }
    ensure_finite("eta0", config.eta0)?;
    if config.eta0 < 0.0 {
        return Err(invalid("eta0", "must be >= 0"));
    }

    let mut model = ModelParams::zeros(dataset.classes, dataset.dim);
    let initial_loss = global_loss(&model, dataset)?;
    let mut traces = Vec::new();
    let mut jobs = Vec::new();
    let mut reached_target = false;
    let e = config.e as f64;

    for r in 0..config.max_rounds {
        let sampled = sample_clients(n, config.k, config.seed, r);
        let lr = config.eta0 / (1.0 + r as f64);
        let updates: Vec<(usize, ModelParams)> = sampled
            .par_iter()
            .map(|&k| {
                let mut rng = round_client_stream(config.seed, r, k);
                local_sgd(&model, &dataset.shards[k], config.e, lr, config.batch_size, &mut rng)
                    .map(|m| (k, m))
            })
            .collect::<Result<_>>()?;
        model = aggregate(&updates, dataset)?;

        let mut cost_rng = stream(config.seed, Purpose::RoundCosts, r as u64);
        let comm = draw_round_costs(profile, &sampled, &mut cost_rng)?;
        let job = RoundJob::with_ids(
            sampled.clone(),
            sampled.iter().map(|&k| profile.t_comp[k] * e).collect(),
            comm.iter().map(|c| c.time).collect(),
        )?;
        let round_energy: f64 = sampled
            .iter()
            .zip(&comm)
            .map(|(&k, c)| profile.e_comp[k] * e + c.energy)
            .sum();

        let loss = global_loss(&model, dataset)?;
        if !loss.is_finite() || !model.is_finite() {
            return Err(Error::Divergence { round: r + 1, loss });
        }
        traces.push(RoundTrace {
            round: r + 1,
            loss,
            round_time: round_time(&job, strategy)?,
            round_energy,
            sampled,
        });
        jobs.push(job);
        if config.target_loss.is_some_and(|t| loss <= t) {
            reached_target = true;
            break;
        }
    }
    Ok(FedAvgRun {
        model,
        initial_loss,
        traces,
        jobs,
        reached_target,
    })
}

/// Writes `round, loss, round_time_s, round_energy_J, sampled_ids`; the ids
/// are joined with `;`.
pub fn write_traces_csv<W: Write>(traces: &[RoundTrace], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["round", "loss", "round_time_s", "round_energy_J", "sampled_ids"])?;
    for t in traces {
        let ids: Vec<String> = t.sampled.iter().map(usize::to_string).collect();
        w.write_record([
            t.round.to_string(),
            t.loss.to_string(),
            t.round_time.to_string(),
            t.round_energy.to_string(),
            ids.join(";"),
        ])?;
    }
    w.flush().map_err(|source| Error::Io {
        path: "<csv>".into(),
        source,
    })?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_synthetic, DataSample, SyntheticSpec};
    use crate::system::{sample_profile, ProfileSpec};
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shard(id: usize, rows: &[(&[f64], usize)]) -> ClientShard {
        let samples: Vec<DataSample> = rows
            .iter()
            .map(|(x, y)| DataSample {
                features: x.to_vec(),
                label: *y,
            })
            .collect();
        ClientShard::new(id, &samples, rows[0].0.len()).unwrap()
    }

    #[test]
    fn zero_model_loss_is_log_classes() {
        let ds = gen_synthetic(&SyntheticSpec::new(1.0, 1.0, 4, 30.0, 5.0), 0).unwrap();
        let l = global_loss(&ModelParams::zeros(10, 60), &ds).unwrap();
        assert_abs_diff_eq!(l, 10f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn two_class_gradient_example() {
        let s = shard(0, &[(&[1.0], 0)]);
        let m = ModelParams::zeros(2, 1);
        let (loss, g) = m.loss_and_grad(s.features.view(), &s.labels);
        assert_abs_diff_eq!(loss, 2f64.ln(), epsilon = 1e-15);
        assert_eq!(g.weights, array![[-0.5], [0.5]]);
        let next = local_sgd(&m, &s, 1, 0.1, 64, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(next.weights, array![[0.05], [-0.05]]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let ds = gen_synthetic(&SyntheticSpec { dim: 5, classes: 4, ..SyntheticSpec::new(1.0, 1.0, 1, 40.0, 0.0) }, 3).unwrap();
        let s = &ds.shards[0];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut m = ModelParams::zeros(4, 5);
        m.weights.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        m.bias.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        let (_, g) = m.loss_and_grad(s.features.view(), &s.labels);
        let h = 1e-6;
        for c in 0..4 {
            for j in 0..5 {
                let mut p = m.clone();
                p.weights[[c, j]] += h;
                let mut q = m.clone();
                q.weights[[c, j]] -= h;
                let fd = (p.loss(s).unwrap() - q.loss(s).unwrap()) / (2.0 * h);
                let rel = (fd - g.weights[[c, j]]).abs() / fd.abs().max(g.weights[[c, j]].abs()).max(1e-8);
                assert!(rel < 1e-4, "weight ({c},{j}): fd {fd} vs {}", g.weights[[c, j]]);
            }
            let mut p = m.clone();
            p.bias[c] += h;
            let mut q = m.clone();
            q.bias[c] -= h;
            let fd = (p.loss(s).unwrap() - q.loss(s).unwrap()) / (2.0 * h);
            assert!((fd - g.bias[c]).abs() < 1e-4 * fd.abs().max(1e-4));
        }
    }

    #[test]
    fn local_sgd_edge_cases() {
        let ds = gen_synthetic(&SyntheticSpec::new(1.0, 1.0, 1, 100.0, 0.0), 2).unwrap();
        let s = &ds.shards[0];
        let m = ModelParams::zeros(10, 60);
        let same = local_sgd(&m, s, 0, 0.1, 16, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(same, m);
        let same = local_sgd(&m, s, 5, 0.0, 16, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(same, m);

        let mut a = ChaCha8Rng::seed_from_u64(9);
        let two = local_sgd(&m, s, 2, 0.1, 16, &mut a).unwrap();
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let one = local_sgd(&m, s, 1, 0.1, 16, &mut b).unwrap();
        let one_more = local_sgd(&one, s, 1, 0.1, 16, &mut b).unwrap();
        assert_eq!(two, one_more);
    }

    #[test]
    fn local_sgd_rejects_mismatched_dimension() {
        let s = shard(0, &[(&[1.0, 2.0], 0)]);
        let err = local_sgd(&ModelParams::zeros(2, 3), &s, 1, 0.1, 1, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(err, Err(Error::DimensionMismatch { .. })));
    }

    fn scalar_dataset(sizes: &[usize]) -> FederatedDataset {
        let shards = sizes
            .iter()
            .enumerate()
            .map(|(k, &n)| {
                let rows: Vec<(&[f64], usize)> = (0..n).map(|_| (&[0.0][..], 0)).collect();
                shard(k, &rows)
            })
            .collect();
        FederatedDataset::from_shards(shards, 1, 2).unwrap()
    }

    fn scalar_model(v: f64) -> ModelParams {
        ModelParams {
            weights: array![[v], [v]],
            bias: array![v, v],
        }
    }

    #[test]
    fn aggregate_examples() {
        let ds = scalar_dataset(&[1, 1, 2]);
        let ups = vec![(0, scalar_model(1.0)), (1, scalar_model(1.0)), (2, scalar_model(4.0))];
        let agg = aggregate(&ups, &ds).unwrap();
        assert_abs_diff_eq!(agg.weights[[0, 0]], 2.5, epsilon = 1e-15);

        let single = aggregate(&[(1, scalar_model(3.0))], &ds).unwrap();
        assert_eq!(single, scalar_model(3.0));

        let mut rev = ups.clone();
        rev.reverse();
        assert_eq!(aggregate(&rev, &ds).unwrap(), agg);

        assert!(matches!(aggregate(&[], &ds), Err(Error::EmptyUpdates)));
        assert!(matches!(
            aggregate(&[(0, scalar_model(1.0)), (0, scalar_model(2.0))], &ds),
            Err(Error::DuplicateClient(0))
        ));
        assert!(matches!(aggregate(&[(7, scalar_model(1.0))], &ds), Err(Error::UnknownClient(7))));
    }

    #[test]
    fn identical_shards_reduce_to_centralised_descent() {
        let base = gen_synthetic(&SyntheticSpec::new(1.0, 1.0, 1, 50.0, 0.0), 6).unwrap();
        let s = base.shards[0].clone();
        let shards = (0..4)
            .map(|k| ClientShard {
                client_id: k,
                ..s.clone()
            })
            .collect();
        let ds = FederatedDataset::from_shards(shards, 60, 10).unwrap();
        let profile = sample_profile(&ProfileSpec::simulation(4), 0).unwrap();
        let mut cfg = TrainConfig::new(4, 1, 3, 1);
        cfg.batch_size = 1000;
        let run = run_fedavg(&ds, &profile, &cfg, Strategy::OptimalTs).unwrap();

        let mut central = ModelParams::zeros(10, 60);
        for r in 0..3 {
            let (_, g) = central.loss_and_grad(s.features.view(), &s.labels);
            central.step(&g, 0.1 / (1.0 + r as f64));
        }
        for (a, b) in run.model.weights.iter().zip(central.weights.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn fedavg_is_deterministic_and_makes_progress() {
        let ds = gen_synthetic(&SyntheticSpec::new(1.0, 1.0, 10, 80.0, 40.0), 4).unwrap();
        let profile = sample_profile(&ProfileSpec::simulation(10), 4).unwrap();
        let cfg = TrainConfig::new(4, 5, 15, 8);
        let a = run_fedavg(&ds, &profile, &cfg, Strategy::OptimalTs).unwrap();
        let b = run_fedavg(&ds, &profile, &cfg, Strategy::OptimalTs).unwrap();
        assert_eq!(a.traces, b.traces);
        assert!(a.traces.last().unwrap().loss < a.initial_loss);
        for t in &a.traces {
            assert_eq!(t.sampled.len(), 4);
            assert!(t.round_time > 0.0 && t.round_energy > 0.0);
        }
    }

    #[test]
    fn target_loss_stops_early() {
        let ds = gen_synthetic(&SyntheticSpec::new(0.5, 0.5, 6, 60.0, 20.0), 1).unwrap();
        let profile = sample_profile(&ProfileSpec::simulation(6), 1).unwrap();
        let cfg = TrainConfig::new(3, 5, 200, 2).with_target(1.5);
        let run = run_fedavg(&ds, &profile, &cfg, Strategy::OptimalTs).unwrap();
        assert!(run.reached_target);
        assert!(run.traces.last().unwrap().loss <= 1.5);
        assert!(run.traces[..run.rounds() - 1].iter().all(|t| t.loss > 1.5));
    }

    #[test]
    fn traces_csv_layout() {
        let t = RoundTrace {
            round: 1,
            loss: 0.5,
            round_time: 2.0,
            round_energy: 3.0,
            sampled: vec![1, 4],
        };
        let mut buf = Vec::new();
        write_traces_csv(&[t], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "round,loss,round_time_s,round_energy_J,sampled_ids\n1,0.5,2,3,1;4\n"
        );
    }
}
