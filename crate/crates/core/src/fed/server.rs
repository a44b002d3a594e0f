use super::{ClientUpload, GlobalStep, LrSchedule};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::params::Params;
use crate::scalar::Scalar;

#[derive(Debug, Clone)]
pub struct ServerState<T> {
    /// `G_g`
    pub model: Mlp<T>,
    /// `c_g`
    pub c_global: Params<T>,
    /// `η_g`
    pub eta_global: T,
    /// Completed rounds.
    pub round: usize,
    pub schedule: LrSchedule<T>,
    pub step: GlobalStep,
}

impl<T: Scalar> ServerState<T> {
    pub fn new(model: Mlp<T>, eta_global: T, schedule: LrSchedule<T>, step: GlobalStep) -> Self {
        let n = model.params().len();
        Self {
            model,
            c_global: Params::zeros(n),
            eta_global,
            round: 0,
            schedule,
            step,
        }
    }

    /// Closes a round; returns the local learning-rate decay due now, if any.
    pub fn finish_round(&mut self) -> Option<T> {
        self.round += 1;
        self.schedule.factor_after(self.round)
    }
}

fn sorted<T>(uploads: &[ClientUpload<T>]) -> Result<Vec<&ClientUpload<T>>> {
    if uploads.is_empty() {
        return Err(Error::InvalidArgument(
            "no client uploads to aggregate".into(),
        ));
    }
    let mut v: Vec<&ClientUpload<T>> = uploads.iter().collect();
    v.sort_by_key(|u| u.client_id);
    Ok(v)
}

/// Global control and model update:
///
/// ```text
/// c_g = c_g⁻ + (1/M) Σ T_m
/// G_g = G_g⁻ ± (η_g/M) Σ (G_m − G_g⁻)
/// ```
///
/// Sums run in ascending client id. Does not advance the round counter.
pub fn server_update_feddwa<T: Scalar>(
    server: &mut ServerState<T>,
    uploads: &[ClientUpload<T>],
) -> Result<()> {
    let uploads = sorted(uploads)?;
    let m = T::of_usize(uploads.len());
    let g_prev = server.model.params().clone();

    let mut control_sum = Params::zeros(g_prev.len());
    let mut drift_sum = Params::zeros(g_prev.len());
    for u in &uploads {
        let t_m = u.control.as_ref().ok_or_else(|| {
            Error::InvalidArgument(format!(
                "client {} sent no control contribution",
                u.client_id
            ))
        })?;
        control_sum.add_assign(t_m)?;
        drift_sum.add_assign(&u.model.sub(&g_prev)?)?;
    }
    server.c_global.add_scaled(T::one() / m, &control_sum)?;

    let sign = match server.step {
        GlobalStep::Convergent => T::one(),
        GlobalStep::Literal => -T::one(),
    };
    let next = Params::axpy(sign * server.eta_global / m, &drift_sum, &g_prev)?;
    if !next.is_finite() || !server.c_global.is_finite() {
        return Err(Error::NonFinite("global model"));
    }
    server.model.set_params(next)
}

/// Sample-count weighted parameter average.
pub fn fedavg_aggregate<T: Scalar>(
    server: &mut ServerState<T>,
    uploads: &[ClientUpload<T>],
) -> Result<()> {
    let uploads = sorted(uploads)?;
    let total: usize = uploads.iter().map(|u| u.n_samples).sum();
    if total == 0 {
        return Err(Error::InvalidArgument("uploads carry zero samples".into()));
    }
    let mut avg = Params::zeros(server.model.params().len());
    for u in &uploads {
        avg.add_scaled(T::of_usize(u.n_samples) / T::of_usize(total), &u.model)?;
    }
    if !avg.is_finite() {
        return Err(Error::NonFinite("global model"));
    }
    server.model.set_params(avg)
}
