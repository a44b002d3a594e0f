//! Federated learning simulator for divergence-weighted aggregation.
//!
//! The numerical core is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix it to `f64`, which is what the experiment tooling uses.

pub mod divergence;
pub mod error;
pub mod fed;
pub mod grid;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod scalar;
pub mod synth;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type ParamVector = params::Params<f64>;
pub type MlpModel = nn::Mlp<f64>;
pub type FeatureGrid = grid::Grid<f64>;
pub type LogProbGrid = divergence::LogProbGrid<f64>;
pub type Sample = synth::Sample<f64>;
pub type DaLossConfig = losses::DaLossConfig<f64>;
pub type ClientState = fed::ClientState<f64>;
pub type ServerState = fed::ServerState<f64>;
pub type SimConfig = fed::SimConfig<f64>;
pub type Federation = fed::Federation<f64>;
