//! Feedforward network, exact backpropagation and the training loop.
//!
//! The network is a stack of dense layers with rectifier activations on
//! every hidden layer and a linear head that produces either `C` logits or an
//! `ED`-dimensional embedding.

mod checkpoint;
mod optim;
mod train;

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use optim::{cosine_lr, OptimizerConfig, SgdMomentum, DEFAULT_MOMENTUM, DEFAULT_WEIGHT_DECAY};
pub use train::{train, ObjectiveState, TrainedModel, TrainingDiagnostics};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::numerics::{ensure_finite, numerical, Matrix, RngState};
use crate::objectives::HeadFamily;

/// Floor on the embedding norm when normalizing outputs.
const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Head {
    Logits { classes: usize },
    Embedding { dim: usize },
}

impl Head {
    pub fn width(self) -> usize {
        match self {
            Head::Logits { classes } => classes,
            Head::Embedding { dim } => dim,
        }
    }

    pub fn family(self) -> HeadFamily {
        match self {
            Head::Logits { .. } => HeadFamily::Logits,
            Head::Embedding { .. } => HeadFamily::Embedding,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    pub head: Head,
    /// L2-normalize embedding outputs. Ignored for logit heads.
    #[serde(default)]
    pub normalize_embeddings: bool,
}

impl NetworkConfig {
    /// `d-64-64-head`.
    pub fn desk_scale(input_dim: usize, head: Head) -> Self {
        NetworkConfig {
            input_dim,
            hidden: vec![64, 64],
            activation: Activation::Relu,
            head,
            normalize_embeddings: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.head.width() == 0 || self.hidden.contains(&0) {
            return Err(invalid("all layer sizes must be at least 1"));
        }
        Ok(())
    }

    fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut sizes = vec![self.input_dim];
        sizes.extend(&self.hidden);
        sizes.push(self.head.width());
        sizes.windows(2).map(|w| (w[1], w[0])).collect()
    }

    fn normalizes(&self) -> bool {
        self.normalize_embeddings && matches!(self.head, Head::Embedding { .. })
    }
}

/// Dense layer `y = W x + b` with `W` stored as `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    config: NetworkConfig,
    layers: Vec<Layer>,
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input to each layer (the batch itself for layer 0).
    inputs: Vec<Matrix>,
    /// Pre-activation output of each hidden layer.
    pre_activations: Vec<Matrix>,
    /// Head output before normalization, when normalization is on.
    raw_head: Option<Matrix>,
    output: Matrix,
}

impl ForwardCache {
    pub fn output(&self) -> &Matrix {
        &self.output
    }
}

/// Gradients shaped like the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.is_finite() && l.bias.iter().all(|v| v.is_finite()))
    }
}

fn flatten_layers(layers: &[Layer]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend_from_slice(l.weights.as_slice());
        out.extend_from_slice(&l.bias);
    }
    out
}

impl Network {
    /// Uniform Glorot initialisation `±√(6/(fan_in+fan_out))`, zero biases.
    pub fn init(config: NetworkConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|(out, inp)| {
                let limit = (6.0 / (inp + out) as f64).sqrt();
                let data = (0..out * inp).map(|_| rng.uniform_range(-limit, limit)).collect();
                Layer {
                    weights: Matrix::from_vec(out, inp, data).expect("shape computed above"),
                    bias: vec![0.0; out],
                }
            })
            .collect();
        Ok(Network { config, layers })
    }

    pub fn zeros(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|(out, inp)| Layer {
                weights: Matrix::zeros(out, inp),
                bias: vec![0.0; out],
            })
            .collect();
        Ok(Network { config, layers })
    }

    pub fn from_layers(config: NetworkConfig, layers: Vec<Layer>) -> Result<Self> {
        config.validate()?;
        let shapes = config.layer_shapes();
        if shapes.len() != layers.len() {
            return Err(invalid(format!("expected {} layers, got {}", shapes.len(), layers.len())));
        }
        for (i, ((out, inp), l)) in shapes.iter().zip(&layers).enumerate() {
            if l.weights.shape() != (*out, *inp) || l.bias.len() != *out {
                return Err(invalid(format!("layer {i} does not match shape {out}x{inp}")));
            }
            if !l.weights.is_finite() {
                return Err(invalid(format!("layer {i} has non-finite weights")));
            }
            ensure_finite(&l.bias, "bias")?;
        }
        Ok(Network { config, layers })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn output_width(&self) -> usize {
        self.config.head.width()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.as_slice().len() + l.bias.len()).sum()
    }

    /// All parameters, layer by layer: row-major weights then bias.
    pub fn flat_parameters(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    pub fn set_flat_parameters(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.parameter_count() {
            return Err(invalid("flat parameter vector has the wrong length"));
        }
        ensure_finite(values, "parameters")?;
        let mut offset = 0;
        for l in &mut self.layers {
            let w = l.weights.as_mut_slice();
            w.copy_from_slice(&values[offset..offset + w.len()]);
            offset += w.len();
            let nb = l.bias.len();
            l.bias.copy_from_slice(&values[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    pub fn forward(&self, batch: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(batch)?.output)
    }

    pub fn forward_cached(&self, batch: &Matrix) -> Result<ForwardCache> {
        if batch.cols() != self.config.input_dim {
            return Err(invalid(format!(
                "batch has {} features, network expects {}",
                batch.cols(),
                self.config.input_dim
            )));
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(last);
        let mut current = batch.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = current.matmul_transposed(&layer.weights);
            for r in 0..z.rows() {
                for (v, b) in z.row_mut(r).iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            inputs.push(current);
            if i == last {
                current = z;
            } else {
                let mut a = z.clone();
                for v in a.as_mut_slice() {
                    *v = v.max(0.0);
                }
                pre_activations.push(z);
                current = a;
            }
        }
        let (raw_head, output) = if self.config.normalizes() {
            let mut normed = current.clone();
            for r in 0..normed.rows() {
                let row = normed.row_mut(r);
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
                for v in row.iter_mut() {
                    *v /= norm;
                }
            }
            (Some(current), normed)
        } else {
            (None, current)
        };
        Ok(ForwardCache {
            inputs,
            pre_activations,
            raw_head,
            output,
        })
    }

    /// Parameter gradients of `Σ_ij grad_outputs[i][j] · output[i][j]`.
    pub fn backward(&self, cache: &ForwardCache, grad_outputs: &Matrix) -> Result<Gradients> {
        if grad_outputs.shape() != cache.output.shape() {
            return Err(invalid("output gradient shape differs from forward output"));
        }
        let mut delta = match &cache.raw_head {
            Some(raw) => normalize_backward(raw, &cache.output, grad_outputs),
            None => grad_outputs.clone(),
        };
        let mut grads: Vec<Layer> = Vec::with_capacity(self.layers.len());
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            let input = &cache.inputs[i];
            let gw = delta.transposed_matmul(input);
            let mut gb = vec![0.0; layer.bias.len()];
            for row in delta.iter_rows() {
                for (g, v) in gb.iter_mut().zip(row) {
                    *g += v;
                }
            }
            grads.push(Layer { weights: gw, bias: gb });
            if i > 0 {
                let mut upstream = delta.matmul(&layer.weights);
                let pre = &cache.pre_activations[i - 1];
                for (g, z) in upstream.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                    if *z <= 0.0 {
                        *g = 0.0;
                    }
                }
                delta = upstream;
            }
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }

    /// Backpropagates `grad_outputs` and applies one momentum-SGD step.
    pub fn backward_apply(
        &mut self,
        cache: &ForwardCache,
        grad_outputs: &Matrix,
        optimizer: &mut SgdMomentum,
        lr: f64,
    ) -> Result<()> {
        if !grad_outputs.is_finite() {
            return Err(numerical("non-finite gradient on network outputs"));
        }
        let grads = self.backward(cache, grad_outputs)?;
        if !grads.is_finite() {
            return Err(numerical("non-finite parameter gradient after backpropagation"));
        }
        let mut params = self.flat_parameters();
        optimizer.step(&mut params, &grads.flatten(), lr)?;
        self.set_flat_parameters(&params)
            .map_err(|_| numerical(format!("parameters became non-finite at lr {lr}")))
    }
}

/// Backward through `y = h/‖h‖`: `∂h = (g − y (y·g)) / ‖h‖`.
fn normalize_backward(raw: &Matrix, normed: &Matrix, grad: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(raw.rows(), raw.cols());
    for r in 0..raw.rows() {
        let norm = raw.row(r).iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_FLOOR);
        let y = normed.row(r);
        let g = grad.row(r);
        let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
        for (k, dst) in out.row_mut(r).iter_mut().enumerate() {
            *dst = (g[k] - y[k] * dot) / norm;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;

    fn small(head: Head, normalize: bool) -> NetworkConfig {
        NetworkConfig {
            input_dim: 3,
            hidden: vec![5, 4],
            activation: Activation::Relu,
            head,
            normalize_embeddings: normalize,
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Network::zeros(small(Head::Logits { classes: 4 }, false)).unwrap();
        let x = Matrix::from_rows(&[[1.0, -2.0, 3.0], [0.5, 0.5, 0.5]]).unwrap();
        let out = net.forward(&x).unwrap();
        assert_eq!(out.shape(), (2, 4));
        assert!(out.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_layers_rectify() {
        let cfg = NetworkConfig {
            input_dim: 3,
            hidden: vec![3],
            activation: Activation::Relu,
            head: Head::Embedding { dim: 3 },
            normalize_embeddings: false,
        };
        let layers = vec![
            Layer { weights: Matrix::identity(3), bias: vec![0.0; 3] },
            Layer { weights: Matrix::identity(3), bias: vec![0.0; 3] },
        ];
        let net = Network::from_layers(cfg, layers).unwrap();
        let x = Matrix::from_rows(&[[1.0, -2.0, 0.5]]).unwrap();
        assert_eq!(net.forward(&x).unwrap().as_slice(), &[1.0, 0.0, 0.5]);
    }

    #[test]
    fn forward_is_deterministic_and_checks_width() {
        let net = Network::init(small(Head::Embedding { dim: 2 }, false), &mut RngState::new(1)).unwrap();
        let x = Matrix::from_rows(&[[0.1, 0.2, 0.3]]).unwrap();
        assert_eq!(net.forward(&x).unwrap(), net.forward(&x).unwrap());
        assert!(net.forward(&Matrix::from_rows(&[[0.1, 0.2]]).unwrap()).is_err());
    }

    #[test]
    fn glorot_bounds() {
        let net = Network::init(small(Head::Logits { classes: 2 }, false), &mut RngState::new(5)).unwrap();
        for l in net.layers() {
            let (out, inp) = l.weights.shape();
            let limit = (6.0 / (inp + out) as f64).sqrt();
            assert!(l.weights.as_slice().iter().all(|w| w.abs() <= limit));
        }
    }

    fn check_param_gradient(cfg: NetworkConfig, seed: u64) -> f64 {
        let mut rng = RngState::new(seed);
        let mut net = Network::init(cfg, &mut rng).unwrap();
        // Zero biases put dead rows exactly on the rectifier kink.
        for l in net.layers_mut() {
            for b in &mut l.bias {
                *b = rng.uniform_range(-0.5, 0.5);
            }
        }
        let x = Matrix::from_vec(4, 3, (0..12).map(|_| rng.normal()).collect()).unwrap();
        let width = net.output_width();
        // Loss Σ c_ij·out_ij + ½Σ out_ij² exercises the full Jacobian.
        let coeffs: Vec<f64> = (0..4 * width).map(|_| rng.normal()).collect();
        let params = net.flat_parameters();
        let f = |w: &[f64]| {
            let mut n = net.clone();
            n.set_flat_parameters(w)?;
            let cache = n.forward_cached(&x)?;
            let out = cache.output();
            let loss: f64 = out
                .as_slice()
                .iter()
                .zip(&coeffs)
                .map(|(o, c)| c * o + 0.5 * o * o)
                .sum();
            let g: Vec<f64> = out.as_slice().iter().zip(&coeffs).map(|(o, c)| c + o).collect();
            let grads = n.backward(&cache, &Matrix::from_vec(4, width, g)?)?;
            Ok((loss, grads.flatten()))
        };
        grad_check(f, &params, 1e-5).unwrap()
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        for seed in 0..10 {
            let e = check_param_gradient(small(Head::Logits { classes: 3 }, false), seed);
            assert!(e <= 1e-5, "seed {seed}: {e}");
        }
    }

    #[test]
    fn normalized_embedding_gradients_match_finite_differences() {
        for seed in 0..10 {
            let e = check_param_gradient(small(Head::Embedding { dim: 3 }, true), seed);
            assert!(e <= 1e-5, "seed {seed}: {e}");
        }
    }

    #[test]
    fn normalized_outputs_have_unit_norm() {
        let net = Network::init(small(Head::Embedding { dim: 4 }, true), &mut RngState::new(2)).unwrap();
        let x = Matrix::from_rows(&[[1.0, 2.0, 3.0], [-1.0, 0.3, 0.2]]).unwrap();
        let out = net.forward(&x).unwrap();
        for row in out.iter_rows() {
            let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12 || n == 0.0);
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        let cfg = small(Head::Logits { classes: 2 }, false);
        assert!(Network::from_layers(cfg.clone(), vec![]).is_err());
        let mut bad = cfg;
        bad.hidden = vec![0];
        assert!(Network::zeros(bad).is_err());
    }

    #[test]
    fn nonfinite_output_gradient_is_reported() {
        let mut net = Network::init(small(Head::Logits { classes: 2 }, false), &mut RngState::new(0)).unwrap();
        let x = Matrix::from_rows(&[[0.0, 0.0, 0.0]]).unwrap();
        let cache = net.forward_cached(&x).unwrap();
        let mut g = Matrix::zeros(1, 2);
        g.as_mut_slice()[0] = f64::NAN;
        let mut opt = SgdMomentum::new(net.parameter_count(), 0.9, 5e-4);
        let err = net.backward_apply(&cache, &g, &mut opt, 0.1).unwrap_err();
        assert!(matches!(err, crate::Error::Numerical(_)));
    }
}
