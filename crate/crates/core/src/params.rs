//! Flat parameter-shaped vectors.
//!
//! Models, control variates and the per-round accumulators all live in the
//! same layout, so arithmetic between them is plain elementwise algebra over
//! equal-length buffers.

use std::ops::Index;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params<T> {
    values: Vec<T>,
}

impl<T: Scalar> Params<T> {
    pub fn zeros(len: usize) -> Self {
        Self {
            values: vec![T::zero(); len],
        }
    }

    pub fn from_vec(values: Vec<T>) -> Self {
        Self { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<T> {
        self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    fn check_len(&self, other: &Self) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                actual: other.len(),
            });
        }
        Ok(())
    }

    /// `a * x + y`.
    pub fn axpy(a: T, x: &Self, y: &Self) -> Result<Self> {
        x.check_len(y)?;
        Ok(Self {
            values: x
                .values
                .iter()
                .zip(&y.values)
                .map(|(&xi, &yi)| a * xi + yi)
                .collect(),
        })
    }

    /// In-place `self += a * x`.
    pub fn add_scaled(&mut self, a: T, x: &Self) -> Result<()> {
        self.check_len(x)?;
        for (s, &xi) in self.values.iter_mut().zip(&x.values) {
            *s += a * xi;
        }
        Ok(())
    }

    pub fn add_assign(&mut self, x: &Self) -> Result<()> {
        self.check_len(x)?;
        for (s, &xi) in self.values.iter_mut().zip(&x.values) {
            *s += xi;
        }
        Ok(())
    }

    /// `self - other`.
    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_len(other)?;
        Ok(Self {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| a - b)
                .collect(),
        })
    }

    pub fn scale(&mut self, a: T) {
        for v in &mut self.values {
            *v *= a;
        }
    }

    pub fn scaled(&self, a: T) -> Self {
        let mut out = self.clone();
        out.scale(a);
        out
    }

    pub fn norm_sq(&self) -> T {
        self.values.iter().map(|&v| v * v).sum()
    }

    /// `‖self - other‖²` without allocating the difference.
    pub fn dist_sq(&self, other: &Self) -> Result<T> {
        self.check_len(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum())
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        self.check_len(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            values: self.values.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

impl<T> Index<usize> for Params<T> {
    type Output = T;

    fn index(&self, i: usize) -> &T {
        &self.values[i]
    }
}

pub fn param_axpy<T: Scalar>(a: T, x: &Params<T>, y: &Params<T>) -> Result<Params<T>> {
    Params::axpy(a, x, y)
}

pub fn param_norm_sq<T: Scalar>(x: &Params<T>) -> T {
    x.norm_sq()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axpy_zero_scale_returns_y() {
        let x = Params::from_vec(vec![1.5, -2.0, 7.0]);
        let y = Params::from_vec(vec![3.0, 4.0, -1.25]);
        assert_eq!(param_axpy(0.0, &x, &y).unwrap(), y);
    }

    #[test]
    fn axpy_arithmetic() {
        let x = Params::from_vec(vec![1.0, 2.0]);
        let y = Params::from_vec(vec![3.0, 4.0]);
        assert_eq!(param_axpy(2.0, &x, &y).unwrap().as_slice(), &[5.0, 8.0]);
    }

    #[test]
    fn norm_of_zero_is_zero() {
        assert_eq!(param_norm_sq(&Params::<f64>::zeros(17)), 0.0);
    }

    #[test]
    fn length_mismatch_rejected() {
        let x = Params::<f64>::zeros(2);
        let y = Params::<f64>::zeros(3);
        assert_eq!(
            param_axpy(1.0, &x, &y),
            Err(Error::LengthMismatch {
                expected: 2,
                actual: 3
            })
        );
        assert!(x.dist_sq(&y).is_err());
    }

    #[test]
    fn works_in_single_precision() {
        let x = Params::from_vec(vec![1.0f32, 2.0]);
        assert_eq!(x.norm_sq(), 5.0f32);
        assert_eq!(x.cast::<f64>().as_slice(), &[1.0, 2.0]);
    }
}
