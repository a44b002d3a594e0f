//! Per-pixel multilayer perceptron.
//!
//! The same MLP is applied independently at every pixel of an `H×W×F`
//! feature grid, producing an `H×W×K` grid of class logits. Hidden layers use
//! `tanh`; the output layer is linear.
//!
//! Parameter layout: layers in order from input to output; within a layer
//! the weight matrix comes first, row-major with shape `[out][in]`, followed
//! by the `out` biases.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::divergence::{KldReduction, LogProbGrid};
use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};
use crate::losses::{self, DaLossConfig};
use crate::params::Params;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    layer_sizes: Vec<usize>,
    params: Params<T>,
}

/// Borrowed view of one dense layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerView<'a, T> {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: &'a [T],
    pub bias: &'a [T],
}

pub fn param_count(layer_sizes: &[usize]) -> usize {
    layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "layer sizes must list at least input and output, all positive; got {layer_sizes:?}"
        )));
    }
    Ok(())
}

/// Loss attached to a backward pass.
#[derive(Debug, Clone, Copy)]
pub enum LossSpec<'a, T> {
    CrossEntropy,
    DaLoss {
        config: &'a DaLossConfig<T>,
        /// Previous-round global parameters.
        global_params: &'a Params<T>,
        /// Previous-round global prediction on the same sample.
        global_log_probs: &'a LogProbGrid<T>,
        reduction: KldReduction,
    },
}

#[derive(Debug, Clone)]
pub struct Backward<T> {
    pub loss: T,
    pub grad: Params<T>,
    pub logits: Grid<T>,
    /// Sample divergence against the global prediction, when the loss used one.
    pub kld: Option<T>,
}

impl<T: Scalar> Mlp<T> {
    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            params: Params::zeros(param_count(layer_sizes)),
        })
    }

    pub fn from_params(layer_sizes: &[usize], params: Params<T>) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let expected = param_count(layer_sizes);
        if params.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                actual: params.len(),
            });
        }
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            params,
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        let mut model = Self::zeros(layer_sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut offset = 0;
        for w in layer_sizes.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let limit = (6.0 / (n_in + n_out) as f64).sqrt();
            let values = model.params.as_mut_slice();
            for v in &mut values[offset..offset + n_in * n_out] {
                *v = T::of(rng.random_range(-limit..limit));
            }
            offset += n_in * n_out + n_out;
        }
        Ok(model)
    }

    /// Rebuilds a model from per-layer `(weights, bias)` pairs.
    pub fn from_layers(layer_sizes: &[usize], layers: &[(Vec<T>, Vec<T>)]) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        if layers.len() != layer_sizes.len() - 1 {
            return Err(Error::LengthMismatch {
                expected: layer_sizes.len() - 1,
                actual: layers.len(),
            });
        }
        let mut values = Vec::with_capacity(param_count(layer_sizes));
        for (w, (weights, bias)) in layer_sizes.windows(2).zip(layers) {
            if weights.len() != w[0] * w[1] {
                return Err(Error::LengthMismatch {
                    expected: w[0] * w[1],
                    actual: weights.len(),
                });
            }
            if bias.len() != w[1] {
                return Err(Error::LengthMismatch {
                    expected: w[1],
                    actual: bias.len(),
                });
            }
            values.extend_from_slice(weights);
            values.extend_from_slice(bias);
        }
        Self::from_params(layer_sizes, Params::from_vec(values))
    }

    pub fn to_layers(&self) -> Vec<(Vec<T>, Vec<T>)> {
        self.layers()
            .map(|l| (l.weights.to_vec(), l.bias.to_vec()))
            .collect()
    }

    pub fn layers(&self) -> impl Iterator<Item = LayerView<'_, T>> + '_ {
        let values = self.params.as_slice();
        let mut offset = 0;
        self.layer_sizes.windows(2).map(move |w| {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &values[offset..offset + n_in * n_out];
            let bias = &values[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_in * n_out + n_out;
            LayerView {
                inputs: n_in,
                outputs: n_out,
                weights,
                bias,
            }
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn inputs(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn classes(&self) -> usize {
        *self.layer_sizes.last().expect("validated non-empty")
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<T> {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Params<T>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::LengthMismatch {
                expected: self.params.len(),
                actual: params.len(),
            });
        }
        self.params = params;
        Ok(())
    }

    fn check_input(&self, input: &Grid<T>) -> Result<()> {
        if input.channels() != self.inputs() {
            return Err(Error::ShapeMismatch {
                expected: (input.height(), input.width(), self.inputs()),
                actual: input.shape(),
            });
        }
        Ok(())
    }

    /// Activations of every layer for one pixel, written into `acts`
    /// (one buffer per layer, input first).
    fn forward_pixel(&self, x: &[T], acts: &mut [Vec<T>]) {
        acts[0].copy_from_slice(x);
        let last = self.layer_sizes.len() - 2;
        for (l, layer) in self.layers().enumerate() {
            let (prev, next) = acts.split_at_mut(l + 1);
            let a_in = &prev[l];
            let a_out = &mut next[0];
            for (o, out) in a_out.iter_mut().enumerate() {
                let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                let z = row
                    .iter()
                    .zip(a_in.iter())
                    .fold(layer.bias[o], |acc, (&w, &a)| acc + w * a);
                *out = if l < last { z.tanh() } else { z };
            }
        }
    }

    fn activation_buffers(&self) -> Vec<Vec<T>> {
        self.layer_sizes
            .iter()
            .map(|&n| vec![T::zero(); n])
            .collect()
    }

    pub fn forward(&self, input: &Grid<T>) -> Result<Grid<T>> {
        self.check_input(input)?;
        let k = self.classes();
        let mut out = Grid::zeros(input.height(), input.width(), k);
        let mut acts = self.activation_buffers();
        for p in 0..input.pixels() {
            self.forward_pixel(input.pixel(p), &mut acts);
            out.pixel_mut(p).copy_from_slice(&acts[acts.len() - 1]);
        }
        Ok(out)
    }

    /// Pulls a logit-space gradient back to the parameters.
    pub fn backprop(&self, input: &Grid<T>, dlogits: &Grid<T>) -> Result<Params<T>> {
        self.check_input(input)?;
        let expected = (input.height(), input.width(), self.classes());
        if dlogits.shape() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                actual: dlogits.shape(),
            });
        }
        let mut grad = Params::zeros(self.params.len());
        let g = grad.as_mut_slice();
        let offsets: Vec<usize> = self
            .layer_sizes
            .windows(2)
            .scan(0, |off, w| {
                let here = *off;
                *off += w[0] * w[1] + w[1];
                Some(here)
            })
            .collect();
        let views: Vec<LayerView<'_, T>> = self.layers().collect();
        let mut acts = self.activation_buffers();
        let widest = self.layer_sizes.iter().copied().max().unwrap_or(0);
        let mut delta = vec![T::zero(); widest];
        let mut delta_prev = vec![T::zero(); widest];

        for p in 0..input.pixels() {
            self.forward_pixel(input.pixel(p), &mut acts);
            let k = self.classes();
            delta[..k].copy_from_slice(dlogits.pixel(p));
            for l in (0..views.len()).rev() {
                let layer = views[l];
                let a_in = &acts[l];
                let off = offsets[l];
                for o in 0..layer.outputs {
                    let d = delta[o];
                    if d == T::zero() {
                        continue;
                    }
                    let row = &mut g[off + o * layer.inputs..off + (o + 1) * layer.inputs];
                    for (gw, &a) in row.iter_mut().zip(a_in.iter()) {
                        *gw += d * a;
                    }
                    g[off + layer.inputs * layer.outputs + o] += d;
                }
                if l > 0 {
                    for i in 0..layer.inputs {
                        let mut s = T::zero();
                        for o in 0..layer.outputs {
                            s += layer.weights[o * layer.inputs + i] * delta[o];
                        }
                        // a_in is tanh output of the previous layer
                        let a = a_in[i];
                        delta_prev[i] = s * (T::one() - a * a);
                    }
                    std::mem::swap(&mut delta, &mut delta_prev);
                }
            }
        }
        Ok(grad)
    }

    /// Loss and full parameter gradient for one sample.
    pub fn backward(
        &self,
        input: &Grid<T>,
        mask: &Mask,
        loss: &LossSpec<'_, T>,
    ) -> Result<Backward<T>> {
        let logits = self.forward(input)?;
        match *loss {
            LossSpec::CrossEntropy => {
                let (value, dlogits) = losses::cross_entropy(&logits, mask)?;
                let grad = self.backprop(input, &dlogits)?;
                Ok(Backward {
                    loss: value,
                    grad,
                    logits,
                    kld: None,
                })
            }
            LossSpec::DaLoss {
                config,
                global_params,
                global_log_probs,
                reduction,
            } => {
                let eval = losses::daloss_against(
                    &logits,
                    mask,
                    global_log_probs,
                    global_params,
                    &self.params,
                    config,
                    reduction,
                )?;
                let mut grad = self.backprop(input, &eval.output.dlogits)?;
                if let Some(extra) = &eval.output.dparams_extra {
                    grad.add_assign(extra)?;
                }
                Ok(Backward {
                    loss: eval.output.loss,
                    grad,
                    logits,
                    kld: Some(eval.kld),
                })
            }
        }
    }
}
