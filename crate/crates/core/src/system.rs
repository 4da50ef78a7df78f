//! Heterogeneous per-client computation and communication costs.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, ensure_positive, invalid, Error, Result};
use crate::rng::{stream, Purpose};

/// Per-client cost parameters for `N` clients.
///
/// `t_comp`/`e_comp` are the time (s) and energy (J) of one local iteration;
/// `comm_time_mean`/`comm_energy_mean` are the mean per-round upload time and
/// energy. Per-round uploads are drawn around those means with relative
/// standard deviation `jitter`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemProfile {
    pub n_clients: usize,
    pub t_comp: Vec<f64>,
    pub e_comp: Vec<f64>,
    pub comm_time_mean: Vec<f64>,
    pub comm_energy_mean: Vec<f64>,
    pub jitter: f64,
}

/// Population averages of a [`SystemProfile`] plus the price weight `gamma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AveragedCosts {
    pub n_clients: usize,
    pub t_p: f64,
    pub t_m: f64,
    pub e_p: f64,
    pub e_m: f64,
    pub gamma: f64,
}

/// Parameters for [`sample_profile`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSpec {
    pub n_clients: usize,
    pub t_p_mean: f64,
    pub t_p_std: f64,
    pub e_p_mean: f64,
    pub t_m_mean: f64,
    pub e_m_mean: f64,
    #[serde(default)]
    pub jitter: f64,
    /// Log-scale spread of per-client mean upload costs.
    #[serde(default = "default_comm_spread")]
    pub comm_spread: f64,
}

fn default_comm_spread() -> f64 {
    0.2
}

impl ProfileSpec {
    /// Simulated cellular deployment: slow clients with `t_p = 0.5 s`,
    /// `t_m = 0.2 s`, `e_p = 0.01 J`, `e_m = 0.02 J`.
    pub fn simulation(n_clients: usize) -> Self {
        Self {
            n_clients,
            t_p_mean: 0.5,
            t_p_std: 0.1,
            e_p_mean: 0.01,
            t_m_mean: 0.2,
            e_m_mean: 0.02,
            jitter: 0.1,
            comm_spread: default_comm_spread(),
        }
    }

    /// Wi-Fi prototype timings: `t_p = 4.9 ms ± 1.43 ms`, `t_m = 0.16 s ± 0.03 s`.
    ///
    /// Energies assume compute and radio both draw about 2 W, giving
    /// `e_p ≈ 0.01 J` and `e_m = 0.32 J`.
    pub fn prototype(n_clients: usize) -> Self {
        Self {
            n_clients,
            t_p_mean: 4.9e-3,
            t_p_std: 1.43e-3,
            e_p_mean: 0.01,
            t_m_mean: 0.16,
            e_m_mean: 0.32,
            jitter: 0.03 / 0.16,
            comm_spread: default_comm_spread(),
        }
    }
}

impl SystemProfile {
    /// Checks array lengths and positivity.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_clients;
        if n == 0 {
            return Err(invalid("n_clients", "must be at least 1"));
        }
        for (name, v) in [
            ("t_comp", &self.t_comp),
            ("e_comp", &self.e_comp),
            ("comm_time_mean", &self.comm_time_mean),
            ("comm_energy_mean", &self.comm_energy_mean),
        ] {
            if v.len() != n {
                return Err(invalid(name, format!("has {} entries, expected {n}", v.len())));
            }
            if let Some(bad) = v.iter().find(|x| !(x.is_finite() && **x > 0.0)) {
                return Err(invalid(name, format!("entries must be positive, found {bad}")));
            }
        }
        if !(self.jitter.is_finite() && self.jitter >= 0.0) {
            return Err(invalid("jitter", format!("must be >= 0, got {}", self.jitter)));
        }
        Ok(())
    }

    /// Population means with the given price weight.
    pub fn averaged(&self, gamma: f64) -> Result<AveragedCosts> {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let costs = AveragedCosts {
            n_clients: self.n_clients,
            t_p: mean(&self.t_comp),
            t_m: mean(&self.comm_time_mean),
            e_p: mean(&self.e_comp),
            e_m: mean(&self.comm_energy_mean),
            gamma,
        };
        costs.validate()?;
        Ok(costs)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("profile serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let p: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        p.validate()?;
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }
}

impl AveragedCosts {
    pub fn validate(&self) -> Result<()> {
        if self.n_clients == 0 {
            return Err(invalid("n_clients", "must be at least 1"));
        }
        ensure_positive("t_p", self.t_p)?;
        ensure_positive("t_m", self.t_m)?;
        ensure_positive("e_p", self.e_p)?;
        ensure_positive("e_m", self.e_m)?;
        ensure_finite("gamma", self.gamma)?;
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(invalid("gamma", format!("must lie in [0, 1], got {}", self.gamma)));
        }
        Ok(())
    }

    pub fn with_gamma(self, gamma: f64) -> Self {
        Self { gamma, ..self }
    }
}

/// Draws a normal variate truncated to `(0, inf)` by rejection.
fn truncated_normal<R: Rng>(rng: &mut R, mean: f64, std: f64) -> f64 {
    if std == 0.0 {
        return mean;
    }
    let dist = Normal::new(mean, std).expect("finite normal parameters");
    loop {
        let x = dist.sample(rng);
        if x > 0.0 {
            return x;
        }
    }
}

/// Generates a heterogeneous profile.
///
/// Per-iteration times come from a normal law truncated to positive values;
/// per-iteration energies use the same relative spread around `e_p_mean`.
/// Per-client mean upload costs are log-normal around `t_m_mean` (and
/// `e_m_mean` for energy, with the same per-client factor) and are then
/// rescaled so the population means are exactly `t_m_mean` and `e_m_mean`.
pub fn sample_profile(spec: &ProfileSpec, seed: u64) -> Result<SystemProfile> {
    if spec.n_clients == 0 {
        return Err(invalid("n_clients", "must be at least 1"));
    }
    ensure_positive("t_p_mean", spec.t_p_mean)?;
    ensure_positive("e_p_mean", spec.e_p_mean)?;
    ensure_positive("t_m_mean", spec.t_m_mean)?;
    ensure_positive("e_m_mean", spec.e_m_mean)?;
    for (name, v) in [
        ("t_p_std", spec.t_p_std),
        ("jitter", spec.jitter),
        ("comm_spread", spec.comm_spread),
    ] {
        ensure_finite(name, v)?;
        if v < 0.0 {
            return Err(invalid(name, format!("must be >= 0, got {v}")));
        }
    }

    let n = spec.n_clients;
    let rel = spec.t_p_std / spec.t_p_mean;
    let mut rng = stream(seed, Purpose::Profile, 0);
    let mut t_comp = Vec::with_capacity(n);
    let mut e_comp = Vec::with_capacity(n);
    let mut comm_scale = Vec::with_capacity(n);
    let spread = Normal::new(0.0, spec.comm_spread).expect("finite spread");
    for _ in 0..n {
        t_comp.push(truncated_normal(&mut rng, spec.t_p_mean, spec.t_p_std));
        e_comp.push(truncated_normal(&mut rng, spec.e_p_mean, rel * spec.e_p_mean));
        comm_scale.push(spread.sample(&mut rng).exp());
    }
    let mean_scale = comm_scale.iter().sum::<f64>() / n as f64;
    let comm_time_mean = comm_scale
        .iter()
        .map(|s| spec.t_m_mean * s / mean_scale)
        .collect();
    let comm_energy_mean = comm_scale
        .iter()
        .map(|s| spec.e_m_mean * s / mean_scale)
        .collect();

    let profile = SystemProfile {
        n_clients: n,
        t_comp,
        e_comp,
        comm_time_mean,
        comm_energy_mean,
        jitter: spec.jitter,
    };
    profile.validate()?;
    Ok(profile)
}

/// Upload time and energy of one client in one round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CommDraw {
    pub time: f64,
    pub energy: f64,
}

/// Draws this round's upload costs for the sampled clients.
///
/// Each client gets an independent multiplier from `N(1, jitter^2)`
/// truncated to positive values; it scales both the client's mean upload
/// time and its mean upload energy.
pub fn draw_round_costs<R: Rng>(
    profile: &SystemProfile,
    sampled: &[usize],
    rng: &mut R,
) -> Result<Vec<CommDraw>> {
    sampled
        .iter()
        .map(|&k| {
            if k >= profile.n_clients {
                return Err(Error::UnknownClient(k));
            }
            let factor = truncated_normal(rng, 1.0, profile.jitter);
            Ok(CommDraw {
                time: profile.comm_time_mean[k] * factor,
                energy: profile.comm_energy_mean[k] * factor,
            })
        })
        .collect()
}

/// Upload time `bits / (bandwidth * log2(1 + tx_power * gain / noise))`.
pub fn shannon_comm_time(
    model_bits: f64,
    bandwidth_hz: f64,
    tx_power: f64,
    channel_gain: f64,
    noise_power: f64,
) -> Result<f64> {
    ensure_positive("model_bits", model_bits)?;
    ensure_positive("bandwidth_hz", bandwidth_hz)?;
    ensure_finite("tx_power", tx_power)?;
    ensure_finite("channel_gain", channel_gain)?;
    ensure_positive("noise_power", noise_power)?;
    let snr = tx_power * channel_gain / noise_power;
    if snr <= 0.0 {
        return Err(invalid("snr", format!("signal-to-noise ratio must be > 0, got {snr}")));
    }
    Ok(model_bits / (bandwidth_hz * (1.0 + snr).log2()))
}
