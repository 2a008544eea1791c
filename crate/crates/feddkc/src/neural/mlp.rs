//! Dense ReLU stack with explicit batch forward/backward passes.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// One dense layer; weights are `in_dim x out_dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub biases: Vec<f64>,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.cols()
    }
}

/// Gradients for one layer, same shapes as the layer itself.
pub(crate) struct LayerGrad {
    weights: Matrix,
    biases: Vec<f64>,
}

/// A feed-forward stack of dense layers with ReLU between them.
/// `relu_on_output` selects whether the final layer is also rectified
/// (feature extractors) or linear (predictors emitting logits).
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<DenseLayer>,
    relu_on_output: bool,
}

impl Mlp {
    /// He-initialized network: weights ~ N(0, 2 / fan_in), zero biases.
    /// Draw order is layer-major then row-major, so identical seeds yield
    /// identical networks.
    pub fn random<R: Rng>(dims: &[usize], relu_on_output: bool, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "need at least input and output dims");
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("valid std");
            let data: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| normal.sample(rng))
                .collect();
            layers.push(DenseLayer {
                weights: Matrix::from_vec(fan_in, fan_out, data).expect("sized above"),
                biases: vec![0.0; fan_out],
            });
        }
        Self {
            layers,
            relu_on_output,
        }
    }

    pub fn zeros(dims: &[usize], relu_on_output: bool) -> Self {
        assert!(dims.len() >= 2);
        let layers = dims
            .windows(2)
            .map(|w| DenseLayer {
                weights: Matrix::zeros(w[0], w[1]),
                biases: vec![0.0; w[1]],
            })
            .collect();
        Self {
            layers,
            relu_on_output,
        }
    }

    pub fn from_layers(layers: Vec<DenseLayer>, relu_on_output: bool) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidCheckpoint("no layers".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::DimensionMismatch {
                    expected: pair[0].out_dim(),
                    got: pair[1].in_dim(),
                });
            }
        }
        Ok(Self {
            layers,
            relu_on_output,
        })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn relu_on_output(&self) -> bool {
        self.relu_on_output
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(DenseLayer::out_dim));
        dims
    }

    fn relu_applied_at(&self, layer_idx: usize) -> bool {
        layer_idx + 1 < self.layers.len() || self.relu_on_output
    }

    /// Batch forward; returns the final activation.
    pub fn forward(&self, x: &Matrix) -> Matrix {
        let mut activ = x.clone();
        for (idx, layer) in self.layers.iter().enumerate() {
            activ = self.layer_forward(layer, &activ, self.relu_applied_at(idx));
        }
        activ
    }

    fn layer_forward(&self, layer: &DenseLayer, input: &Matrix, relu: bool) -> Matrix {
        let mut out = input.matmul(&layer.weights);
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            for (v, &b) in row.iter_mut().zip(&layer.biases) {
                *v += b;
                if relu && *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        out
    }

    /// Forward pass keeping each layer's post-activation output (the last
    /// entry is the network output).
    pub(crate) fn forward_cached(&self, x: &Matrix) -> Vec<Matrix> {
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut current = x;
        for (idx, layer) in self.layers.iter().enumerate() {
            let out = self.layer_forward(layer, current, self.relu_applied_at(idx));
            acts.push(out);
            current = acts.last().unwrap();
        }
        acts
    }

    /// Backpropagates `grad_out` (gradient w.r.t. the network output) given
    /// the cached activations; returns per-layer gradients and the gradient
    /// w.r.t. the network input.
    pub(crate) fn backward(
        &self,
        x: &Matrix,
        acts: &[Matrix],
        grad_out: &Matrix,
    ) -> (Vec<LayerGrad>, Matrix) {
        let mut grads: Vec<Option<LayerGrad>> = (0..self.layers.len()).map(|_| None).collect();
        let mut grad = grad_out.clone();
        for idx in (0..self.layers.len()).rev() {
            let layer = &self.layers[idx];
            if self.relu_applied_at(idx) {
                // post > 0 iff pre > 0 for ReLU, so the cached output doubles
                // as the mask.
                let post = &acts[idx];
                for (g, &a) in grad.data_mut().iter_mut().zip(post.data()) {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let input = if idx == 0 { x } else { &acts[idx - 1] };
            let grad_w = input.transpose_matmul(&grad);
            let mut grad_b = vec![0.0; layer.out_dim()];
            for r in 0..grad.rows() {
                for (gb, &g) in grad_b.iter_mut().zip(grad.row(r)) {
                    *gb += g;
                }
            }
            let grad_in = grad.matmul_transpose(&layer.weights);
            grads[idx] = Some(LayerGrad {
                weights: grad_w,
                biases: grad_b,
            });
            grad = grad_in;
        }
        (grads.into_iter().map(Option::unwrap).collect(), grad)
    }

    /// w -= lr * (grad + wd * w); b -= lr * grad_b. Weight decay applies to
    /// weights only. Fails if any parameter leaves the finite range.
    pub(crate) fn sgd_step(
        &mut self,
        grads: &[LayerGrad],
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        for (layer, grad) in self.layers.iter_mut().zip(grads) {
            for (w, &g) in layer.weights.data_mut().iter_mut().zip(grad.weights.data()) {
                *w -= lr * (g + weight_decay * *w);
            }
            for (b, &g) in layer.biases.iter_mut().zip(&grad.biases) {
                *b -= lr * g;
            }
            if !layer.weights.all_finite() || layer.biases.iter().any(|b| !b.is_finite()) {
                return Err(Error::NumericalDivergence(
                    "non-finite weight after SGD step".into(),
                ));
            }
        }
        Ok(())
    }

    /// Flattened parameters in checkpoint order (per layer: weights row-major
    /// then biases).
    pub fn flat_weights(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.extend_from_slice(layer.weights.data());
            out.extend_from_slice(&layer.biases);
        }
        out
    }
}
