//! Fully-connected feature extractor with explicit forward and backward
//! passes.
//!
//! Hidden layers use leaky ReLU (slope 0.01); the output layer is linear.
//! `forward` returns a cache tagged with the parameter version; `backward`
//! refuses a cache built from different parameters, which catches the
//! classic stale-cache bug when an optimizer updates weights between the
//! two passes.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::SeededRng;
use crate::scalar::Scalar;

const LEAKY_SLOPE: f64 = 0.01;

/// Multi-layer perceptron mapping inputs to feature vectors.
#[derive(Debug, Clone)]
pub struct MlpExtractor<T> {
    layer_sizes: Vec<usize>,
    /// `weights[l]` has shape (layer_sizes[l+1] x layer_sizes[l]).
    weights: Vec<Matrix<T>>,
    biases: Vec<Vec<T>>,
    version: u64,
}

/// Intermediate activations retained for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    version: u64,
    /// Input to each layer: `layer_inputs[l]` feeds `weights[l]`.
    layer_inputs: Vec<Matrix<T>>,
    pre_activations: Vec<Matrix<T>>,
}

impl<T: Scalar> ForwardCache<T> {
    /// Smallest absolute pre-activation over the hidden layers, or infinity
    /// for a purely linear net. Entries at zero sit on the leaky ReLU fold.
    pub fn min_hidden_preactivation(&self) -> T {
        let mut min = T::infinity();
        for z in self.pre_activations.iter().take(self.pre_activations.len().saturating_sub(1)) {
            for &v in z.data() {
                if v.abs() < min {
                    min = v.abs();
                }
            }
        }
        min
    }
}

/// Parameter gradients in the same shapes as the extractor.
#[derive(Debug, Clone)]
pub struct MlpGradients<T> {
    pub weights: Vec<Matrix<T>>,
    pub biases: Vec<Vec<T>>,
}

impl<T: Scalar> MlpGradients<T> {
    /// Serializes gradients in the extractor's flat parameter order.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
        out
    }
}

fn validate_sizes(layer_sizes: &[usize]) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::invalid("an extractor needs at least input and output sizes"));
    }
    if layer_sizes.iter().any(|&s| s == 0) {
        return Err(Error::invalid("layer sizes must be positive"));
    }
    Ok(())
}

impl<T: Scalar> MlpExtractor<T> {
    /// Builds an extractor with He-style seeded Gaussian weights and zero
    /// biases. `layer_sizes` runs input first, feature dimension last.
    pub fn seeded(layer_sizes: &[usize], rng: &mut SeededRng) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for window in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (window[0], window[1]);
            let scale = T::from((2.0 / fan_in as f64).sqrt()).unwrap();
            let data: Vec<T> = (0..fan_in * fan_out).map(|_| rng.normal::<T>() * scale).collect();
            weights.push(Matrix::from_vec(fan_out, fan_in, data)?);
            biases.push(vec![T::zero(); fan_out]);
        }
        Ok(MlpExtractor { layer_sizes: layer_sizes.to_vec(), weights, biases, version: 0 })
    }

    /// Rebuilds an extractor from explicit tensors, validating the chain of
    /// shapes.
    pub fn from_parts(weights: Vec<Matrix<T>>, biases: Vec<Vec<T>>) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(Error::invalid("need one bias vector per weight matrix"));
        }
        let mut layer_sizes = vec![weights[0].cols()];
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.rows() == 0 || w.cols() == 0 {
                return Err(Error::invalid(format!("layer {l} has an empty weight matrix")));
            }
            if w.cols() != layer_sizes[l] {
                return Err(Error::invalid(format!(
                    "layer {l} expects input size {}, got {}",
                    layer_sizes[l],
                    w.cols()
                )));
            }
            if b.len() != w.rows() {
                return Err(Error::invalid(format!("layer {l} bias length mismatch")));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("layer {l} bias not finite")));
            }
            layer_sizes.push(w.rows());
        }
        Ok(MlpExtractor { layer_sizes, weights, biases, version: 0 })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn feature_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.weights.len()
    }

    pub fn weight(&self, layer: usize) -> &Matrix<T> {
        &self.weights[layer]
    }

    pub fn bias(&self, layer: usize) -> &[T] {
        &self.biases[layer]
    }

    /// Monotone counter bumped by every parameter mutation.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().zip(&self.biases).map(|(w, b)| w.data().len() + b.len()).sum()
    }

    /// Parameters in a fixed flat order: weights then bias, layer by layer.
    pub fn flatten_params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
        out
    }

    /// Overwrites all parameters from the flat order of `flatten_params`.
    pub fn assign_params(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameters must be finite".into()));
        }
        let mut offset = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            let len = w.data().len();
            w.data_mut().copy_from_slice(&flat[offset..offset + len]);
            offset += len;
            let blen = b.len();
            b.copy_from_slice(&flat[offset..offset + blen]);
            offset += blen;
        }
        self.version += 1;
        Ok(())
    }

    /// Forward pass over a batch (rows are samples). Returns the feature
    /// matrix and the cache required by [`MlpExtractor::backward`].
    pub fn forward(&self, inputs: &Matrix<T>) -> Result<(Matrix<T>, ForwardCache<T>)> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input dimension {} does not match extractor input {}",
                inputs.cols(),
                self.input_dim()
            )));
        }
        if inputs.rows() == 0 {
            return Err(Error::invalid("empty input batch"));
        }
        inputs.ensure_finite("extractor inputs")?;

        let slope = T::from(LEAKY_SLOPE).unwrap();
        let layers = self.weights.len();
        let mut layer_inputs = Vec::with_capacity(layers);
        let mut pre_activations = Vec::with_capacity(layers);
        let mut x = inputs.clone();
        for l in 0..layers {
            let mut z = x.matmul_nt(&self.weights[l])?;
            for row in 0..z.rows() {
                let zr = z.row_mut(row);
                for (v, &b) in zr.iter_mut().zip(&self.biases[l]) {
                    *v += b;
                }
            }
            layer_inputs.push(x);
            pre_activations.push(z.clone());
            if l + 1 < layers {
                for v in z.data_mut() {
                    if *v < T::zero() {
                        *v *= slope;
                    }
                }
            }
            x = z;
        }
        x.ensure_finite("extractor features")?;
        Ok((x, ForwardCache { version: self.version, layer_inputs, pre_activations }))
    }

    /// Backward pass: gradient of a scalar loss with respect to every
    /// parameter, given the loss gradient at the output features.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_output: &Matrix<T>) -> Result<MlpGradients<T>> {
        if cache.version != self.version {
            return Err(Error::InvalidState(
                "forward cache is stale: parameters changed since the forward pass".into(),
            ));
        }
        let layers = self.weights.len();
        let batch = cache.layer_inputs[0].rows();
        if grad_output.rows() != batch || grad_output.cols() != self.feature_dim() {
            return Err(Error::invalid("output gradient shape mismatch"));
        }

        let slope = T::from(LEAKY_SLOPE).unwrap();
        let mut grad_weights = vec![Matrix::zeros(0, 0); layers];
        let mut grad_biases = vec![Vec::new(); layers];
        let mut delta = grad_output.clone();
        for l in (0..layers).rev() {
            grad_weights[l] = delta.matmul_tn(&cache.layer_inputs[l])?;
            let mut gb = vec![T::zero(); self.biases[l].len()];
            for row in delta.row_iter() {
                for (g, &d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
            grad_biases[l] = gb;
            if l > 0 {
                let mut upstream = delta.matmul(&self.weights[l])?;
                let z = &cache.pre_activations[l - 1];
                for (v, &pre) in upstream.data_mut().iter_mut().zip(z.data()) {
                    if pre < T::zero() {
                        *v *= slope;
                    }
                }
                delta = upstream;
            }
        }
        Ok(MlpGradients { weights: grad_weights, biases: grad_biases })
    }
}
