//! Experiment configuration files (TOML).

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::Deserialize;

use fedcost::costmodel::ConvergenceCoeffs;
use fedcost::datagen::SyntheticSpec;
use fedcost::optimizer::{AcsConfig, EstimationPlan, PropertyGrid};
use fedcost::system::ProfileSpec;
use fedcost::Strategy;

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    /// Price weight between time (0) and energy (1).
    pub gamma: f64,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub system: SystemConfig,
    #[serde(default)]
    pub convergence: Option<ConvergenceCoeffs>,
    #[serde(default)]
    pub estimation: Option<EstimationPlan>,
    pub control: ControlConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub properties: PropertyGrid,
    #[serde(default)]
    pub surface: Option<SurfaceConfig>,
}

fn default_strategy() -> Strategy {
    Strategy::OptimalTs
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic(SyntheticSpec),
    /// An IDX image/label pair split by label.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        n_clients: usize,
        labels_per_client: usize,
        samples_per_client: usize,
    },
}

impl DatasetConfig {
    pub fn n_clients(&self) -> usize {
        match self {
            Self::Synthetic(s) => s.n_clients,
            Self::Idx { n_clients, .. } => *n_clients,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "preset", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SystemConfig {
    Simulation {
        #[serde(default)]
        jitter: Option<f64>,
    },
    Prototype {
        #[serde(default)]
        jitter: Option<f64>,
    },
    Custom {
        t_p_mean: f64,
        t_p_std: f64,
        e_p_mean: f64,
        t_m_mean: f64,
        e_m_mean: f64,
        #[serde(default)]
        jitter: f64,
        #[serde(default = "default_comm_spread")]
        comm_spread: f64,
    },
    /// A stored per-client profile.
    File { path: PathBuf },
}

fn default_comm_spread() -> f64 {
    0.2
}

impl SystemConfig {
    /// The generator parameters, or `None` for a stored profile.
    pub fn spec(&self, n_clients: usize) -> Option<ProfileSpec> {
        match *self {
            Self::Simulation { jitter } => {
                let s = ProfileSpec::simulation(n_clients);
                Some(ProfileSpec { jitter: jitter.unwrap_or(s.jitter), ..s })
            }
            Self::Prototype { jitter } => {
                let s = ProfileSpec::prototype(n_clients);
                Some(ProfileSpec { jitter: jitter.unwrap_or(s.jitter), ..s })
            }
            Self::Custom {
                t_p_mean,
                t_p_std,
                e_p_mean,
                t_m_mean,
                e_m_mean,
                jitter,
                comm_spread,
            } => Some(ProfileSpec {
                n_clients,
                t_p_mean,
                t_p_std,
                e_p_mean,
                t_m_mean,
                e_m_mean,
                jitter,
                comm_spread,
            }),
            Self::File { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ControlConfig {
    Fixed {
        k: usize,
        e: usize,
    },
    Optimize {
        #[serde(default)]
        acs: Option<AcsConfig>,
    },
    Grid {
        k_min: usize,
        k_max: usize,
        e_min: usize,
        e_max: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub eta0: f64,
    pub max_rounds: usize,
    pub target_loss: Option<f64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            eta0: 0.1,
            max_rounds: 300,
            target_loss: None,
        }
    }
}

/// Sweep points for the scheduler comparison: `E` varies at `k_at`, then
/// `K` varies at `e_at`.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub e_values: Vec<usize>,
    #[serde(default)]
    pub k_at: usize,
    #[serde(default)]
    pub k_values: Vec<usize>,
    #[serde(default)]
    pub e_at: usize,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurfaceConfig {
    pub k_values: Vec<usize>,
    pub e_values: Vec<usize>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(text).context("parsing configuration")?;
        let problems = cfg.violations();
        if !problems.is_empty() {
            bail!("invalid configuration:\n  - {}", problems.join("\n  - "));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Every problem with field values, one message per violated field.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        let n = self.dataset.n_clients();
        if !(0.0..=1.0).contains(&self.gamma) {
            v.push(format!("gamma: must lie in [0, 1], got {}", self.gamma));
        }
        if n == 0 {
            v.push("dataset.n_clients: must be at least 1".into());
        }
        if let DatasetConfig::Idx {
            labels_per_client,
            samples_per_client,
            ..
        } = self.dataset
        {
            if labels_per_client == 0 {
                v.push("dataset.labels_per_client: must be at least 1".into());
            }
            if samples_per_client < labels_per_client {
                v.push("dataset.samples_per_client: must be at least labels_per_client".into());
            }
        }
        if let Some(c) = &self.convergence {
            if !(c.rho > 0.0 && c.rho.is_finite()) {
                v.push(format!("convergence.rho: must be positive, got {}", c.rho));
            }
            if !(c.epsilon > 0.0 && c.epsilon.is_finite()) {
                v.push(format!("convergence.epsilon: must be positive, got {}", c.epsilon));
            }
        }
        if let Some(plan) = &self.estimation {
            if let Err(e) = plan.validate(n) {
                v.push(format!("estimation: {e}"));
            }
        }
        match self.control {
            ControlConfig::Fixed { k, e } => {
                if k == 0 || k > n {
                    v.push(format!("control.k: must lie in [1, {n}], got {k}"));
                }
                if e == 0 {
                    v.push("control.e: must be at least 1".into());
                }
            }
            ControlConfig::Grid {
                k_min,
                k_max,
                e_min,
                e_max,
            } => {
                if k_min == 0 || k_min > k_max || k_max > n {
                    v.push(format!("control.k_min/k_max: need 1 <= k_min <= k_max <= {n}"));
                }
                if e_min == 0 || e_min > e_max {
                    v.push("control.e_min/e_max: need 1 <= e_min <= e_max".into());
                }
            }
            ControlConfig::Optimize { .. } => {}
        }
        if !matches!(self.control, ControlConfig::Fixed { .. })
            && self.convergence.is_none()
            && self.estimation.is_none()
        {
            v.push("convergence: optimize and grid modes need `convergence.rho` or an `estimation` plan".into());
        }
        let t = &self.training;
        if t.batch_size == 0 {
            v.push("training.batch_size: must be at least 1".into());
        }
        if !(t.eta0 > 0.0 && t.eta0.is_finite()) {
            v.push(format!("training.eta0: must be positive, got {}", t.eta0));
        }
        if t.max_rounds == 0 {
            v.push("training.max_rounds: must be at least 1".into());
        }
        if let Some(s) = &self.sweep {
            if s.e_values.is_empty() && s.k_values.is_empty() {
                v.push("sweep: give e_values or k_values".into());
            }
            if !s.e_values.is_empty() && (s.k_at == 0 || s.k_at > n) {
                v.push(format!("sweep.k_at: must lie in [1, {n}]"));
            }
            if !s.k_values.is_empty() && s.e_at == 0 {
                v.push("sweep.e_at: must be at least 1".into());
            }
            if s.k_values.iter().any(|&k| k == 0 || k > n) {
                v.push(format!("sweep.k_values: every value must lie in [1, {n}]"));
            }
            if s.e_values.contains(&0) {
                v.push("sweep.e_values: every value must be at least 1".into());
            }
        }
        if let Some(s) = &self.surface {
            if s.k_values.is_empty() || s.e_values.is_empty() {
                v.push("surface: k_values and e_values must be non-empty".into());
            }
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
seed = 3
gamma = 0.5

[dataset]
kind = "synthetic"
alpha = 1.0
beta = 1.0
n_clients = 10
size_mean = 50.0
size_std = 40.0

[system]
preset = "prototype"

[convergence]
rho = 500.0

[control]
mode = "fixed"
k = 4
e = 10
"#;

    #[test]
    fn parses_a_minimal_config() {
        let c = ExperimentConfig::from_toml(BASE).unwrap();
        assert_eq!(c.control, ControlConfig::Fixed { k: 4, e: 10 });
        assert_eq!(c.strategy, Strategy::OptimalTs);
        assert_eq!(c.training.batch_size, 64);
        assert_eq!(c.convergence.unwrap().epsilon, 1.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = BASE.replace("seed = 3", "seed = 3\nsede = 4");
        assert!(ExperimentConfig::from_toml(&text).is_err());
        let text = BASE.replace("alpha = 1.0", "alpha = 1.0\nalhpa = 2.0");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn every_violation_is_listed() {
        let text = BASE.replace("gamma = 0.5", "gamma = 1.5").replace("k = 4", "k = 40");
        let err = format!("{:#}", ExperimentConfig::from_toml(&text).unwrap_err());
        assert!(err.contains("gamma"), "{err}");
        assert!(err.contains("control.k"), "{err}");
    }

    #[test]
    fn optimize_without_rho_is_rejected() {
        let text = BASE
            .replace("[convergence]\nrho = 500.0\n", "")
            .replace("mode = \"fixed\"\nk = 4\ne = 10", "mode = \"optimize\"");
        let err = format!("{:#}", ExperimentConfig::from_toml(&text).unwrap_err());
        assert!(err.contains("convergence"), "{err}");
    }
}
