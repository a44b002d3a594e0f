//! Dense `H×W×C` grids (row-major, channel fastest) and class-index masks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> Grid<T> {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            data: vec![T::zero(); height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        let expected = height * width * channels;
        if data.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Channel vector of pixel `p` (row-major pixel index).
    pub fn pixel(&self, p: usize) -> &[T] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    pub fn pixel_mut(&mut self, p: usize) -> &mut [T] {
        &mut self.data[p * self.channels..(p + 1) * self.channels]
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn set(&mut self, y: usize, x: usize, c: usize, v: T) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape(),
                actual: other.shape(),
            });
        }
        Ok(())
    }

    /// Per-pixel argmax; ties resolve to the lowest class index.
    pub fn argmax(&self) -> Mask {
        let labels = (0..self.pixels())
            .map(|p| {
                let px = self.pixel(p);
                let mut best = 0;
                for (k, &v) in px.iter().enumerate().skip(1) {
                    if v > px[best] {
                        best = k;
                    }
                }
                best
            })
            .collect();
        Mask {
            height: self.height,
            width: self.width,
            labels,
        }
    }
}

/// `H×W` grid of class indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    height: usize,
    width: usize,
    labels: Vec<usize>,
}

impl Mask {
    pub fn new(height: usize, width: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::LengthMismatch {
                expected: height * width,
                actual: labels.len(),
            });
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, class: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![class; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> usize {
        self.labels[y * self.width + x]
    }

    pub fn validate(&self, classes: usize) -> Result<()> {
        match self.labels.iter().find(|&&l| l >= classes) {
            Some(&index) => Err(Error::InvalidClass { index, classes }),
            None => Ok(()),
        }
    }

    pub fn histogram(&self, classes: usize) -> Vec<usize> {
        let mut h = vec![0; classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}
