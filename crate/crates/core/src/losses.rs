//! Pixel-averaged cross-entropy and the divergence-adjusted loss
//!
//! ```text
//! L = CE(logits, mask) + C · kld · ‖G_global_prev − G_local‖²
//! ```
//!
//! The divergence factor acts as a detached weight unless
//! [`DaLossConfig::kld_detached`] is cleared.

use serde::{Deserialize, Serialize};

use crate::divergence::{self, KldReduction, LogProbGrid};
use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::params::Params;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DaLossConfig<T> {
    /// Regularization constant scaling the divergence-weighted penalty.
    pub c: T,
    pub kld_detached: bool,
    pub enabled: bool,
}

impl<T: Scalar> Default for DaLossConfig<T> {
    fn default() -> Self {
        Self {
            c: T::of(0.1),
            kld_detached: true,
            enabled: true,
        }
    }
}

impl<T: Scalar> DaLossConfig<T> {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c >= T::zero()) || !self.c.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "DALoss constant must be finite and non-negative, got {}",
                self.c
            )));
        }
        Ok(())
    }
}

fn check_mask<T: Scalar>(logits: &Grid<T>, mask: &Mask) -> Result<()> {
    let (h, w, k) = logits.shape();
    if mask.height() != h || mask.width() != w {
        return Err(Error::ShapeMismatch {
            expected: (h, w, 1),
            actual: (mask.height(), mask.width(), 1),
        });
    }
    mask.validate(k)
}

/// Mean over pixels of `-log softmax(logits)[true class]`, with its
/// gradient `(softmax - onehot) / (H·W)`.
pub fn cross_entropy<T: Scalar>(logits: &Grid<T>, mask: &Mask) -> Result<(T, Grid<T>)> {
    check_mask(logits, mask)?;
    let n = logits.pixels();
    let inv_n = T::one() / T::of_usize(n.max(1));
    let mut grad = logits.clone();
    let mut total = T::zero();
    for (p, &label) in mask.labels().iter().enumerate() {
        let px = grad.pixel_mut(p);
        divergence::log_softmax_in_place(px);
        total -= px[label];
        for (k, v) in px.iter_mut().enumerate() {
            let onehot = if k == label { T::one() } else { T::zero() };
            *v = (v.exp() - onehot) * inv_n;
        }
    }
    Ok((total * inv_n, grad))
}

#[derive(Debug, Clone)]
pub struct DaLossOutput<T> {
    pub loss: T,
    pub dlogits: Grid<T>,
    /// Direct gradient of the penalty with respect to the local parameters,
    /// `2·C·kld·(G_local − G_global_prev)`. `None` when the penalty vanishes.
    pub dparams_extra: Option<Params<T>>,
}

/// Divergence-adjusted loss with `kld_value` supplied as a fixed weight.
///
/// Reduces to [`cross_entropy`] bit-for-bit when `C = 0`, `kld_value = 0`
/// or the config is disabled.
pub fn daloss<T: Scalar>(
    logits: &Grid<T>,
    mask: &Mask,
    kld_value: T,
    g_global_prev: &Params<T>,
    g_local: &Params<T>,
    cfg: &DaLossConfig<T>,
) -> Result<DaLossOutput<T>> {
    if g_global_prev.len() != g_local.len() {
        return Err(Error::LengthMismatch {
            expected: g_global_prev.len(),
            actual: g_local.len(),
        });
    }
    if !(kld_value >= T::zero()) {
        return Err(Error::InvalidArgument(format!(
            "kld weight must be non-negative, got {kld_value}"
        )));
    }
    let (ce, dlogits) = cross_entropy(logits, mask)?;
    if !cfg.enabled || cfg.c == T::zero() || kld_value == T::zero() {
        return Ok(DaLossOutput {
            loss: ce,
            dlogits,
            dparams_extra: None,
        });
    }
    let weight = cfg.c * kld_value;
    let dist = g_global_prev.dist_sq(g_local)?;
    let diff = g_local.sub(g_global_prev)?;
    Ok(DaLossOutput {
        loss: ce + weight * dist,
        dlogits,
        dparams_extra: Some(diff.scaled(T::of(2.0) * weight)),
    })
}

#[derive(Debug, Clone)]
pub struct DaLossEval<T> {
    pub output: DaLossOutput<T>,
    pub kld: T,
}

/// Computes the sample divergence from the current logits, then evaluates
/// [`daloss`]. When the divergence is not detached, its own logit gradient
/// `C·‖Δ‖²·∂kld/∂logits` is added to `dlogits`.
pub fn daloss_against<T: Scalar>(
    logits: &Grid<T>,
    mask: &Mask,
    global_log_probs: &LogProbGrid<T>,
    g_global_prev: &Params<T>,
    g_local: &Params<T>,
    cfg: &DaLossConfig<T>,
    reduction: KldReduction,
) -> Result<DaLossEval<T>> {
    let local = divergence::log_softmax(logits)?;
    let kld = divergence::kld_with(global_log_probs, &local, reduction)?;
    let mut output = daloss(logits, mask, kld, g_global_prev, g_local, cfg)?;
    if cfg.enabled && !cfg.kld_detached && cfg.c != T::zero() {
        let dist = g_global_prev.dist_sq(g_local)?;
        let dk = divergence::kld_logit_grad(global_log_probs, &local, reduction)?;
        let scale = cfg.c * dist;
        for (d, &g) in output.dlogits.as_mut_slice().iter_mut().zip(dk.as_slice()) {
            *d += scale * g;
        }
    }
    Ok(DaLossEval { output, kld })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(h: usize, w: usize, k: usize, v: Vec<f64>) -> Grid<f64> {
        Grid::from_vec(h, w, k, v).unwrap()
    }

    #[test]
    fn uniform_two_class_pixel() {
        let (loss, g) =
            cross_entropy(&grid(1, 1, 2, vec![0.0, 0.0]), &Mask::filled(1, 1, 0)).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-15);
        assert_eq!(g.as_slice(), &[-0.5, 0.5]);
    }

    #[test]
    fn saturated_margin() {
        let (loss, _) =
            cross_entropy(&grid(1, 1, 3, vec![30.0, 0.0, 0.0]), &Mask::filled(1, 1, 0)).unwrap();
        assert!(loss < 1e-12);
    }

    #[test]
    fn invalid_class_rejected() {
        let r = cross_entropy(&grid(1, 1, 2, vec![0.0, 0.0]), &Mask::filled(1, 1, 2));
        assert!(matches!(
            r,
            Err(Error::InvalidClass {
                index: 2,
                classes: 2
            })
        ));
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let z = vec![
            0.3, -1.2, 0.7, 2.0, 0.1, -0.4, 1.5, 0.0, -2.2, 0.9, 0.4, -0.6,
        ];
        let mask = Mask::new(2, 2, vec![0, 2, 1, 2]).unwrap();
        let (_, g) = cross_entropy(&grid(2, 2, 3, z.clone()), &mask).unwrap();
        let h = 1e-6;
        for i in 0..z.len() {
            let mut zp = z.clone();
            zp[i] += h;
            let mut zm = z.clone();
            zm[i] -= h;
            let fd = (cross_entropy(&grid(2, 2, 3, zp), &mask).unwrap().0
                - cross_entropy(&grid(2, 2, 3, zm), &mask).unwrap().0)
                / (2.0 * h);
            assert!((fd - g.as_slice()[i]).abs() < 1e-6, "coord {i}");
        }
    }

    #[test]
    fn penalty_arithmetic() {
        // CE = ln 2 here; use the difference to isolate the penalty term.
        let logits = grid(1, 1, 2, vec![0.0, 0.0]);
        let mask = Mask::filled(1, 1, 1);
        let g = Params::from_vec(vec![0.0, 0.0]);
        let l = Params::from_vec(vec![2.0, 0.0]);
        let cfg = DaLossConfig {
            c: 0.1,
            ..Default::default()
        };
        let out = daloss(&logits, &mask, 0.2, &g, &l, &cfg).unwrap();
        let ce = cross_entropy(&logits, &mask).unwrap().0;
        assert!((out.loss - ce - 0.1 * 0.2 * 4.0).abs() < 1e-15);
        // 0.5 + 0.08
        assert!((0.5 + 0.1 * 0.2 * 4.0 - 0.58f64).abs() < 1e-15);
        let extra = out.dparams_extra.unwrap();
        assert!((extra[0] - 2.0 * 0.1 * 0.2 * 2.0).abs() < 1e-15);
        assert_eq!(extra[1], 0.0);
    }

    #[test]
    fn degenerate_cases_are_plain_ce() {
        let logits = grid(1, 2, 3, vec![0.1, 0.5, -0.2, 1.0, 0.0, 0.3]);
        let mask = Mask::new(1, 2, vec![2, 0]).unwrap();
        let g = Params::from_vec(vec![1.0, -1.0, 0.5]);
        let l = Params::from_vec(vec![0.0, 2.0, 0.25]);
        let (ce, dce) = cross_entropy(&logits, &mask).unwrap();
        let zero_c = DaLossConfig {
            c: 0.0,
            ..Default::default()
        };
        for (kld, cfg) in [(0.7, zero_c), (0.0, DaLossConfig::default())] {
            let out = daloss(&logits, &mask, kld, &g, &l, &cfg).unwrap();
            assert_eq!(out.loss.to_bits(), ce.to_bits());
            assert_eq!(out.dlogits, dce);
            assert!(out.dparams_extra.is_none());
        }
    }

    #[test]
    fn mismatched_params_rejected() {
        let logits = grid(1, 1, 2, vec![0.0, 0.0]);
        let r = daloss(
            &logits,
            &Mask::filled(1, 1, 0),
            0.1,
            &Params::zeros(2),
            &Params::zeros(3),
            &DaLossConfig::default(),
        );
        assert!(matches!(r, Err(Error::LengthMismatch { .. })));
    }

    proptest! {
        #[test]
        fn extra_gradient_pulls_toward_global(
            g in prop::collection::vec(-3.0f64..3.0, 6),
            l in prop::collection::vec(-3.0f64..3.0, 6),
            kld in 1e-3f64..2.0,
            c in 1e-3f64..1.0,
        ) {
            let g = Params::from_vec(g);
            let l = Params::from_vec(l);
            prop_assume!(g.dist_sq(&l).unwrap() > 1e-9);
            let cfg = DaLossConfig { c, ..Default::default() };
            let logits = grid(1, 1, 2, vec![0.0, 1.0]);
            let out = daloss(&logits, &Mask::filled(1, 1, 0), kld, &g, &l, &cfg).unwrap();
            let extra = out.dparams_extra.unwrap();
            // a descent step on the extra term moves local toward global
            let toward = g.sub(&l).unwrap();
            prop_assert!(extra.dot(&toward).unwrap() < 0.0);
            let expected = l.sub(&g).unwrap().scaled(2.0 * c * kld);
            for i in 0..6 {
                prop_assert!((extra[i] - expected[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn loss_monotone_in_kld(k1 in 0.0f64..5.0, k2 in 0.0f64..5.0) {
            let (lo, hi) = if k1 <= k2 { (k1, k2) } else { (k2, k1) };
            let logits = grid(1, 1, 3, vec![0.2, -0.1, 0.4]);
            let mask = Mask::filled(1, 1, 1);
            let g = Params::from_vec(vec![0.5, 0.5]);
            let l = Params::from_vec(vec![-0.5, 1.0]);
            let cfg = DaLossConfig::default();
            let a = daloss(&logits, &mask, lo, &g, &l, &cfg).unwrap().loss;
            let b = daloss(&logits, &mask, hi, &g, &l, &cfg).unwrap().loss;
            prop_assert!(a <= b);
        }
    }
}
