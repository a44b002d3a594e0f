//! Federated protocol state machines.
//!
//! Three algorithms share one client trainer:
//!
//! * **FedDWA**: control-variate corrected local training; each client's
//!   contribution to the global control variate is weighted by the mean
//!   divergence between the previous global model's predictions and its own.
//! * **SCAFFOLD-style baseline**: the same protocol with every per-sample
//!   divergence weight forced to one ([`KldWeighting::Unit`]).
//! * **FedAvg**: plain local SGD and sample-count weighted averaging.
//!
//! The server only ever sees [`ClientUpload`]s (model, control contribution
//! and sample count). Raw samples never leave [`ClientState`].

mod client;
mod server;
mod sim;

pub use client::{local_round_fedavg, local_round_feddwa, ClientState, LocalStats};
pub use server::{fedavg_aggregate, server_update_feddwa, ServerState};
pub use sim::{
    evaluate, run_experiment, run_experiment_with, run_fedavg_round, run_feddwa_round,
    run_scaffold_round, Federation, RoundOutcome, SimConfig,
};

use serde::{Deserialize, Serialize};

use crate::divergence::KldReduction;
use crate::error::{Error, Result};
use crate::losses::DaLossConfig;
use crate::params::Params;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    FedAvg,
    Scaffold,
    FedDwa,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::FedAvg => "fedavg",
            Algorithm::Scaffold => "scaffold",
            Algorithm::FedDwa => "feddwa",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedavg" => Ok(Algorithm::FedAvg),
            "scaffold" => Ok(Algorithm::Scaffold),
            "feddwa" => Ok(Algorithm::FedDwa),
            other => Err(Error::InvalidArgument(format!(
                "unknown algorithm {other:?} (expected fedavg, scaffold or feddwa)"
            ))),
        }
    }
}

impl std::fmt::Display for Algorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What each sample adds to a client's `O_m` accumulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KldWeighting {
    /// The sample's divergence from the previous global prediction.
    #[default]
    Divergence,
    /// Always one, so `O_m = |N_m|` and `T_m = c_m`.
    Unit,
}

/// Direction of the global model step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlobalStep {
    /// `G_g = G_g⁻ + η_g/M · Σ (G_m − G_g⁻)`; with `η_g = 1` this is averaging.
    #[default]
    Convergent,
    /// `G_g = G_g⁻ + η_g/M · Σ (G_g⁻ − G_m)`, which steps away from the clients.
    Literal,
}

/// Step-decay schedule for the local learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule<T> {
    pub decay: T,
    /// Rounds between decays; 0 disables decay.
    pub period: usize,
}

impl<T: Scalar> Default for LrSchedule<T> {
    fn default() -> Self {
        Self {
            decay: T::of(0.5),
            period: 20,
        }
    }
}

impl<T: Scalar> LrSchedule<T> {
    /// Decay factor to apply once `completed` rounds have finished, if any.
    pub fn factor_after(&self, completed: usize) -> Option<T> {
        (self.period > 0 && completed > 0 && completed.is_multiple_of(self.period)).then_some(self.decay)
    }
}

/// Client-side training knobs shared by every client in a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalConfig<T> {
    pub loss: DaLossConfig<T>,
    pub weighting: KldWeighting,
    pub reduction: KldReduction,
    pub epochs: usize,
    pub batch_size: usize,
    /// Accumulate `U_m` from gradients at the round-start parameters instead
    /// of reusing the working-parameter gradients.
    pub strict_u_at_round_start: bool,
}

impl<T: Scalar> Default for LocalConfig<T> {
    fn default() -> Self {
        Self {
            loss: DaLossConfig::default(),
            weighting: KldWeighting::Divergence,
            reduction: KldReduction::Mean,
            epochs: 1,
            batch_size: 1,
            strict_u_at_round_start: false,
        }
    }
}

impl<T: Scalar> LocalConfig<T> {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "local epochs and batch size must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Everything a client sends to the server after a round.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpload<T> {
    pub client_id: usize,
    pub n_samples: usize,
    /// Post-round local model `G_m`.
    pub model: Params<T>,
    /// Weighted control contribution `T_m`; FedAvg sends none.
    pub control: Option<Params<T>>,
}
