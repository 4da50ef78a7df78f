//! Per-round uplink scheduling.
//!
//! Sampled clients compute in parallel and then upload over a single shared
//! channel. Three policies are modelled:
//!
//! * [`Strategy::OptimalTs`]: time sharing where each client uploads as soon
//!   as it has finished computing and the channel is free, with clients
//!   served in ascending order of computation time. With `T_0 = 0`,
//!   `T_k = max(comp_k, T_{k-1}) + comm_k` and the round ends at `T_K`. This
//!   order minimises the round time over all service orders.
//! * [`Strategy::WaitAllTs`]: time sharing that starts uploading only after
//!   every sampled client has finished, `max_k comp_k + sum_k comm_k`.
//! * [`Strategy::StaticFs`]: frequency sharing with a static equal split of
//!   the band, so each upload takes `K` times its full-band duration and the
//!   round ends at `max_k (comp_k + K * comm_k)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest job accepted by [`brute_force_min_time`] (`9! = 362_880` orders).
pub const MAX_ENUMERATION: usize = 9;

/// Uplink scheduling policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    OptimalTs,
    WaitAllTs,
    StaticFs,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::OptimalTs, Strategy::WaitAllTs, Strategy::StaticFs];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::OptimalTs => "optimal-ts",
            Strategy::WaitAllTs => "wait-all-ts",
            Strategy::StaticFs => "static-fs",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "optimal-ts" | "optimalts" => Ok(Strategy::OptimalTs),
            "wait-all-ts" | "waitallts" => Ok(Strategy::WaitAllTs),
            "static-fs" | "staticfs" => Ok(Strategy::StaticFs),
            other => Err(crate::error::invalid(
                "strategy",
                format!("unknown strategy `{other}` (expected optimal-ts, wait-all-ts or static-fs)"),
            )),
        }
    }
}

/// One round's worth of work for the sampled clients.
///
/// `comp[i]` is the computation time for all `E` local iterations of the
/// `i`-th sampled client (already multiplied by `E`), `comm[i]` its full-band
/// upload time in this round and `ids[i]` its client id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundJob {
    pub ids: Vec<usize>,
    pub comp: Vec<f64>,
    pub comm: Vec<f64>,
}

impl RoundJob {
    /// Builds a job with ids `0..K`.
    pub fn new(comp: Vec<f64>, comm: Vec<f64>) -> Result<Self> {
        let ids = (0..comp.len()).collect();
        Self::with_ids(ids, comp, comm)
    }

    pub fn with_ids(ids: Vec<usize>, comp: Vec<f64>, comm: Vec<f64>) -> Result<Self> {
        if comp.len() != comm.len() || ids.len() != comp.len() {
            return Err(Error::DimensionMismatch {
                expected: format!("{} ids", ids.len()),
                actual: format!("{} comp / {} comm entries", comp.len(), comm.len()),
            });
        }
        if comp.is_empty() {
            return Err(Error::EmptyJob);
        }
        for (&c, &m) in comp.iter().zip(&comm) {
            if !(c.is_finite() && m.is_finite() && c >= 0.0 && m >= 0.0) {
                return Err(crate::error::invalid(
                    "round job",
                    format!("times must be finite and non-negative, got comp={c}, comm={m}"),
                ));
            }
        }
        Ok(Self { ids, comp, comm })
    }

    pub fn len(&self) -> usize {
        self.comp.len()
    }

    pub fn is_empty(&self) -> bool {
        self.comp.is_empty()
    }

    /// Job positions in ascending computation time, ties by client id.
    pub fn service_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            self.comp[a]
                .total_cmp(&self.comp[b])
                .then(self.ids[a].cmp(&self.ids[b]))
        });
        order
    }

    /// Completion time of a sequential upload in the given order.
    pub fn sequential_time(&self, order: &[usize]) -> f64 {
        order.iter().fold(0.0_f64, |prev, &i| self.comp[i].max(prev) + self.comm[i])
    }
}

/// Wall-clock duration of one round under `strategy`.
pub fn round_time(job: &RoundJob, strategy: Strategy) -> Result<f64> {
    if job.is_empty() {
        return Err(Error::EmptyJob);
    }
    let t = match strategy {
        Strategy::OptimalTs => job.sequential_time(&job.service_order()),
        Strategy::WaitAllTs => {
            let slowest = job.comp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            // summed in service order so the result ignores input order
            slowest + job.service_order().iter().map(|&i| job.comm[i]).sum::<f64>()
        }
        Strategy::StaticFs => {
            let k = job.len() as f64;
            job.comp
                .iter()
                .zip(&job.comm)
                .map(|(c, m)| c + k * m)
                .fold(f64::NEG_INFINITY, f64::max)
        }
    };
    Ok(t)
}

/// Minimum sequential round time over every service order, by enumeration.
///
/// Returns the minimum and one order achieving it (as job positions). The
/// enumeration starts from the ascending-computation order and only replaces
/// the incumbent on a strict improvement, so when that order is optimal it is
/// the one returned.
pub fn brute_force_min_time(job: &RoundJob) -> Result<(f64, Vec<usize>)> {
    if job.is_empty() {
        return Err(Error::EmptyJob);
    }
    if job.len() > MAX_ENUMERATION {
        return Err(Error::TooManyForEnumeration {
            k: job.len(),
            max: MAX_ENUMERATION,
        });
    }
    let mut current = job.service_order();
    let mut best_order = current.clone();
    let mut best = job.sequential_time(&current);
    // Positions relative to the starting order, permuted lexicographically.
    let start = current.clone();
    let mut rank: Vec<usize> = (0..job.len()).collect();
    while next_permutation(&mut rank) {
        for (slot, &r) in current.iter_mut().zip(&rank) {
            *slot = start[r];
        }
        let t = job.sequential_time(&current);
        if t < best {
            best = t;
            best_order.clone_from(&current);
        }
    }
    Ok((best, best_order))
}

fn next_permutation(v: &mut [usize]) -> bool {
    if v.len() < 2 {
        return false;
    }
    let mut i = v.len() - 1;
    while i > 0 && v[i - 1] >= v[i] {
        i -= 1;
    }
    if i == 0 {
        return false;
    }
    let mut j = v.len() - 1;
    while v[j] <= v[i - 1] {
        j -= 1;
    }
    v.swap(i - 1, j);
    v[i..].reverse();
    true
}

/// Writes jobs as CSV rows `(job, client_id, comp, comm)`.
pub fn write_jobs_csv<W: std::io::Write>(jobs: &[RoundJob], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["job", "client_id", "comp", "comm"])?;
    for (j, job) in jobs.iter().enumerate() {
        for i in 0..job.len() {
            w.write_record([
                j.to_string(),
                job.ids[i].to_string(),
                job.comp[i].to_string(),
                job.comm[i].to_string(),
            ])?;
        }
    }
    w.flush().map_err(|source| Error::Io {
        path: "<csv>".into(),
        source,
    })?;
    Ok(())
}

/// Reads jobs written by [`write_jobs_csv`].
pub fn read_jobs_csv<R: std::io::Read>(input: R) -> Result<Vec<RoundJob>> {
    let mut r = csv::Reader::from_reader(input);
    let mut grouped: Vec<(Vec<usize>, Vec<f64>, Vec<f64>)> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parse_err = |what: &str| Error::Config(format!("bad {what} in job CSV row {:?}", rec));
        let j: usize = rec[0].parse().map_err(|_| parse_err("job"))?;
        let id: usize = rec[1].parse().map_err(|_| parse_err("client_id"))?;
        let c: f64 = rec[2].parse().map_err(|_| parse_err("comp"))?;
        let m: f64 = rec[3].parse().map_err(|_| parse_err("comm"))?;
        if grouped.len() <= j {
            grouped.resize_with(j + 1, Default::default);
        }
        grouped[j].0.push(id);
        grouped[j].1.push(c);
        grouped[j].2.push(m);
    }
    grouped
        .into_iter()
        .map(|(ids, comp, comm)| RoundJob::with_ids(ids, comp, comm))
        .collect()
}
