//! Log-softmax predictive distributions and the KL divergence used both to
//! weight client contributions to the global control variate and to scale
//! the proximal penalty of the local loss.
//!
//! The divergence is always `D_KL(global ‖ local)`: the previous-round global
//! model's prediction is the reference distribution.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scalar::Scalar;

/// Floor applied to log-probabilities inside the divergence, `ln(1e-12)`.
pub const LOG_PROB_FLOOR: f64 = -27.631_021_115_928_547;

/// How per-pixel divergences are reduced to one value per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KldReduction {
    #[default]
    Mean,
    Sum,
}

/// `H×W×K` grid of per-pixel log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct LogProbGrid<T>(Grid<T>);

impl<T: Scalar> LogProbGrid<T> {
    pub fn grid(&self) -> &Grid<T> {
        &self.0
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.0.shape()
    }

    pub fn into_grid(self) -> Grid<T> {
        self.0
    }
}

/// Max-subtracted log-softmax over the class axis of every pixel.
pub fn log_softmax<T: Scalar>(logits: &Grid<T>) -> Result<LogProbGrid<T>> {
    if !logits.is_finite() {
        return Err(Error::NonFinite("logits"));
    }
    let mut out = logits.clone();
    for p in 0..out.pixels() {
        log_softmax_in_place(out.pixel_mut(p));
    }
    Ok(LogProbGrid(out))
}

pub(crate) fn log_softmax_in_place<T: Scalar>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = v.iter().map(|&z| (z - max).exp()).sum();
    let log_sum = sum.ln();
    for z in v.iter_mut() {
        *z = *z - max - log_sum;
    }
}

fn floor<T: Scalar>() -> T {
    T::of(LOG_PROB_FLOOR)
}

fn pixel_kld<T: Scalar>(pg: &[T], pl: &[T]) -> T {
    let lo = floor::<T>();
    let total: T = pg
        .iter()
        .zip(pl)
        .map(|(&g, &l)| g.exp() * (g.max(lo) - l.max(lo)))
        .sum();
    // Gibbs' inequality holds up to rounding and the floor clamp.
    total.max(T::zero())
}

/// `D_KL(p_global ‖ p_local)` averaged over pixels.
pub fn kld<T: Scalar>(p_global: &LogProbGrid<T>, p_local: &LogProbGrid<T>) -> Result<T> {
    kld_with(p_global, p_local, KldReduction::Mean)
}

pub fn kld_with<T: Scalar>(
    p_global: &LogProbGrid<T>,
    p_local: &LogProbGrid<T>,
    reduction: KldReduction,
) -> Result<T> {
    p_global.0.check_shape(&p_local.0)?;
    let n = p_global.0.pixels();
    let total: T = (0..n)
        .map(|p| pixel_kld(p_global.0.pixel(p), p_local.0.pixel(p)))
        .sum();
    Ok(match reduction {
        KldReduction::Mean if n > 0 => total / T::of_usize(n),
        _ => total,
    })
}

/// Gradient of [`kld_with`] with respect to the local model's logits.
///
/// Classes whose local log-probability sits below the floor contribute no
/// gradient, matching the clamped value.
pub fn kld_logit_grad<T: Scalar>(
    p_global: &LogProbGrid<T>,
    p_local: &LogProbGrid<T>,
    reduction: KldReduction,
) -> Result<Grid<T>> {
    p_global.0.check_shape(&p_local.0)?;
    let (h, w, k) = p_global.shape();
    let scale = match reduction {
        KldReduction::Mean => T::one() / T::of_usize(h * w),
        KldReduction::Sum => T::one(),
    };
    let lo = floor::<T>();
    let mut out = Grid::zeros(h, w, k);
    for p in 0..h * w {
        let pg = p_global.0.pixel(p);
        let pl = p_local.0.pixel(p);
        let live_mass: T = pg
            .iter()
            .zip(pl)
            .filter(|(_, &l)| l >= lo)
            .map(|(&g, _)| g.exp())
            .sum();
        for (j, d) in out.pixel_mut(p).iter_mut().enumerate() {
            let own = if pl[j] >= lo { pg[j].exp() } else { T::zero() };
            *d = scale * (pl[j].exp() * live_mass - own);
        }
    }
    Ok(out)
}

/// `O_m`: sum of per-sample divergences over a client's samples.
pub fn accumulate_o_m<T: Scalar>(
    global_preds: &[LogProbGrid<T>],
    local_preds: &[LogProbGrid<T>],
) -> Result<T> {
    if global_preds.len() != local_preds.len() {
        return Err(Error::LengthMismatch {
            expected: global_preds.len(),
            actual: local_preds.len(),
        });
    }
    global_preds
        .iter()
        .zip(local_preds)
        .try_fold(T::zero(), |acc, (g, l)| Ok(acc + kld(g, l)?))
}
