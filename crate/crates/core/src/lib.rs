//! Cost-aware federated learning: a FedAvg simulator with per-client time
//! and energy accounting, round scheduling on a shared uplink, a closed-form
//! cost model over the number of sampled clients `K` and local steps `E`,
//! and solvers that pick `(K, E)` to minimise a weighted time/energy cost.

pub mod costmodel;
pub mod datagen;
pub mod error;
pub mod learner;
pub mod optimizer;
pub mod rng;
pub mod scheduler;
pub mod system;

pub use costmodel::{ConvergenceCoeffs, CostReport};
pub use datagen::{ClientShard, DataSample, FederatedDataset, SyntheticSpec};
pub use error::{Error, Result};
pub use learner::{ModelParams, RoundTrace, TrainConfig};
pub use scheduler::{RoundJob, Strategy};
pub use system::{AveragedCosts, ProfileSpec, SystemProfile};

#[cfg(doctest)]
mod guide {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/simulator.md")]
    mod simulator {}
    #[doc = include_str!("../../../book/src/scheduling.md")]
    mod scheduling {}
    #[doc = include_str!("../../../book/src/cost-model.md")]
    mod cost_model {}
    #[doc = include_str!("../../../book/src/optimizer.md")]
    mod optimizer {}
    #[doc = include_str!("../../../book/src/estimation.md")]
    mod estimation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
