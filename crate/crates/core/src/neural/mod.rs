//! A small MLP velocity model with hand-written backpropagation.
//!
//! Inputs are `[x_1, .., x_d, t]`; time is a raw scalar feature. Hidden layers
//! use the chosen activation and the output layer is linear.

mod checkpoint;
mod train;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{train_otcfm, train_otcfm_on, Adam, LossTrace, TSampling, TrainConfig};

use crate::error::{check_dim, Error, Result};
use crate::rng::{self, SeededRng};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Silu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Silu => z / (1.0 + (-z).exp()),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layer_dims: Vec<usize>,
    weights: Vec<DMatrix<f64>>,
    biases: Vec<DVector<f64>>,
    activation: Activation,
}

/// Per-layer values kept by [`Mlp::forward_batch_cached`] for backpropagation.
struct Cache {
    /// Layer inputs; `inputs[0]` is the batch itself.
    inputs: Vec<DMatrix<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<DMatrix<f64>>,
}

impl Mlp {
    /// Uniform `(-1/sqrt(fan_in), 1/sqrt(fan_in))` initialisation of weights and biases.
    pub fn new_seeded(layer_dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        let mut r = rng::substream(seed, 0);
        Self::init(layer_dims, activation, &mut r)
    }

    fn init(layer_dims: &[usize], activation: Activation, r: &mut SeededRng) -> Result<Self> {
        Self::check_dims(layer_dims)?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in layer_dims.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            let mut draw = || bound * (2.0 * r.random::<f64>() - 1.0);
            weights.push(DMatrix::from_fn(w[1], w[0], |_, _| draw()));
            biases.push(DVector::from_fn(w[1], |_, _| draw()));
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            activation,
        })
    }

    fn check_dims(layer_dims: &[usize]) -> Result<()> {
        if layer_dims.len() < 2 || layer_dims.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "layer dims must list at least two positive sizes, got {layer_dims:?}"
            )));
        }
        if layer_dims[0] != layer_dims[layer_dims.len() - 1] + 1 {
            return Err(Error::InvalidArgument(format!(
                "input width must be output width + 1 for the time feature, got {layer_dims:?}"
            )));
        }
        Ok(())
    }

    /// All-zero parameters.
    pub fn zeros(layer_dims: &[usize], activation: Activation) -> Result<Self> {
        Self::check_dims(layer_dims)?;
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights: layer_dims.windows(2).map(|w| DMatrix::zeros(w[1], w[0])).collect(),
            biases: layer_dims.windows(2).map(|w| DVector::zeros(w[1])).collect(),
            activation,
        })
    }

    /// Single linear layer returning a fixed vector.
    pub fn constant_output(dim: usize, value: &[f64]) -> Self {
        let mut m = Self::zeros(&[dim + 1, dim], Activation::Tanh).expect("valid dims");
        m.biases[0].copy_from_slice(value);
        m
    }

    /// Builds a model from explicit layers `(W, b)` with `W` of shape out x in.
    pub fn from_layers(layers: Vec<(DMatrix<f64>, DVector<f64>)>, activation: Activation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("model needs at least one layer".into()));
        }
        let mut dims = vec![layers[0].0.ncols()];
        for (w, b) in &layers {
            check_dim(*dims.last().unwrap(), w.ncols())?;
            check_dim(w.nrows(), b.len())?;
            dims.push(w.nrows());
        }
        Self::check_dims(&dims)?;
        let (weights, biases) = layers.into_iter().unzip();
        let m = Self {
            layer_dims: dims,
            weights,
            biases,
            activation,
        };
        if !m.params().iter().all(|p| p.is_finite()) {
            return Err(Error::NonFinite("model parameters".into()));
        }
        Ok(m)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.layer_dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Flat parameters: per layer the weight matrix (column-major) then its bias.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b.as_slice());
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_dim(self.n_params(), params.len())?;
        let mut at = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let nw = w.len();
            w.as_mut_slice().copy_from_slice(&params[at..at + nw]);
            at += nw;
            let nb = b.len();
            b.as_mut_slice().copy_from_slice(&params[at..at + nb]);
            at += nb;
        }
        Ok(())
    }

    pub fn forward(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.output_dim(), x.len())?;
        let mut a = DVector::from_iterator(x.len() + 1, x.iter().copied().chain(std::iter::once(t)));
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w * &a + b;
            if l < last {
                z.apply(|v| *v = self.activation.apply(*v));
            }
            a = z;
        }
        Ok(a.as_slice().to_vec())
    }

    /// Forward pass on a batch stored column-wise (`input_dim x batch`).
    pub fn forward_batch(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.forward_batch_cached(inputs)?.0)
    }

    fn forward_batch_cached(&self, inputs: &DMatrix<f64>) -> Result<(DMatrix<f64>, Cache)> {
        check_dim(self.input_dim(), inputs.nrows())?;
        let last = self.weights.len() - 1;
        let mut cache = Cache {
            inputs: vec![inputs.clone()],
            pre: Vec::with_capacity(last),
        };
        let mut out = DMatrix::zeros(0, 0);
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w * cache.inputs.last().unwrap();
            for mut col in z.column_iter_mut() {
                col += b;
            }
            if l < last {
                let a = z.map(|v| self.activation.apply(v));
                cache.pre.push(z);
                cache.inputs.push(a);
            } else {
                out = z;
            }
        }
        Ok((out, cache))
    }

    /// Mean squared error over all batch entries and its gradient with respect
    /// to the flat parameters (same layout as [`Mlp::params`]).
    pub fn loss_and_grad(&self, inputs: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<(f64, Vec<f64>)> {
        check_dim(self.output_dim(), targets.nrows())?;
        check_dim(inputs.ncols(), targets.ncols())?;
        let (out, cache) = self.forward_batch_cached(inputs)?;
        let diff = out - targets;
        let count = diff.len() as f64;
        let loss = diff.norm_squared() / count;
        let mut delta = diff * (2.0 / count);
        let n_layers = self.weights.len();
        let mut grads: Vec<(DMatrix<f64>, DVector<f64>)> = Vec::with_capacity(n_layers);
        for l in (0..n_layers).rev() {
            let gw = &delta * cache.inputs[l].transpose();
            let gb = DVector::from_iterator(delta.nrows(), delta.row_iter().map(|r| r.sum()));
            grads.push((gw, gb));
            if l > 0 {
                let mut back = self.weights[l].transpose() * &delta;
                back.zip_apply(&cache.pre[l - 1], |g, z| *g *= self.activation.derivative(z));
                delta = back;
            }
        }
        grads.reverse();
        let mut flat = Vec::with_capacity(self.n_params());
        for (gw, gb) in &grads {
            flat.extend_from_slice(gw.as_slice());
            flat.extend_from_slice(gb.as_slice());
        }
        Ok((loss, flat))
    }
}
