//! Minimal dense feedforward networks with explicit reverse-mode gradients
//! for both parameters and inputs.
//!
//! The protocol needs input gradients (the host differentiates its global
//! model with respect to the guest outputs it received), so layers carry
//! their own backward pass instead of relying on an autodiff framework.

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Activation applied after a layer's affine map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Linear,
}

impl Activation {
    fn apply(self, x: &mut Array2<f64>) {
        if self == Activation::Relu {
            x.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
        }
    }

    /// Multiplies `grad` by the activation derivative evaluated at the
    /// pre-activation output `post` (ReLU derivative is recoverable from the
    /// post-activation value).
    fn chain(self, post: &Array2<f64>, grad: &mut Array2<f64>) {
        if self == Activation::Relu {
            grad.zip_mut_with(post, |g, &p| {
                if p <= 0.0 {
                    *g = 0.0;
                }
            });
        }
    }
}

/// One affine layer: `out = act(x · Wᵀ + b)` with `W: (out_dim, in_dim)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub biases: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }
}

/// A dense feedforward network. Hidden layers default to ReLU, the output
/// layer to linear, but arbitrary per-layer activations are allowed so that
/// two networks can be concatenated into one (used by the centralized
/// training oracle).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DenseNet {
    pub layers: Vec<Layer>,
}

/// Gradients produced by one backward pass. Parameter gradients match the
/// network's layer shapes; `input_grad` is the upstream cotangent pulled back
/// to the network input.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub weight_grads: Vec<Array2<f64>>,
    pub bias_grads: Vec<Array1<f64>>,
    pub input_grad: Array2<f64>,
}

impl GradientBundle {
    pub fn zeros_like(net: &DenseNet, batch: usize) -> Self {
        GradientBundle {
            weight_grads: net.layers.iter().map(|l| Array2::zeros(l.weights.dim())).collect(),
            bias_grads: net.layers.iter().map(|l| Array1::zeros(l.biases.len())).collect(),
            input_grad: Array2::zeros((batch, net.input_dim())),
        }
    }

    pub fn add_assign(&mut self, other: &GradientBundle) {
        for (a, b) in self.weight_grads.iter_mut().zip(&other.weight_grads) {
            *a += b;
        }
        for (a, b) in self.bias_grads.iter_mut().zip(&other.bias_grads) {
            *a += b;
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in &mut self.weight_grads {
            g.mapv_inplace(|v| v * c);
        }
        for g in &mut self.bias_grads {
            g.mapv_inplace(|v| v * c);
        }
        self.input_grad.mapv_inplace(|v| v * c);
    }
}

/// Intermediate activations kept between a forward and its backward pass.
pub struct ForwardTrace {
    /// `post[0]` is the input batch, `post[i]` the output of layer `i-1`.
    post: Vec<Array2<f64>>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Array2<f64> {
        self.post.last().expect("trace holds at least the input")
    }

    pub fn into_output(mut self) -> Array2<f64> {
        self.post.pop().expect("trace holds at least the input")
    }
}

impl DenseNet {
    /// He-uniform initialization: weights uniform in ±sqrt(6/fan_in), biases
    /// zero. Hidden layers get ReLU, the last layer is linear. Deterministic
    /// for a fixed seed.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Config(
                "a network needs at least input and output sizes".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(layer_sizes.len() - 1);
        for (i, w) in layer_sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            if fan_in == 0 || fan_out == 0 {
                return Err(Error::Config("layer sizes must be positive".into()));
            }
            let limit = (6.0 / fan_in as f64).sqrt();
            let weights =
                Array2::from_shape_fn((fan_out, fan_in), |_| rng.gen_range(-limit..limit));
            let activation = if i + 2 == layer_sizes.len() {
                Activation::Linear
            } else {
                Activation::Relu
            };
            layers.push(Layer {
                weights,
                biases: Array1::zeros(fan_out),
                activation,
            });
        }
        Ok(DenseNet { layers })
    }

    /// Concatenates `self` followed by `other` into a single network.
    /// `other`'s first layer must accept `self`'s output dimension.
    pub fn compose(&self, other: &DenseNet) -> Result<DenseNet> {
        if self.output_dim() != other.input_dim() {
            return Err(Error::Dimension(format!(
                "cannot compose: output {} vs input {}",
                self.output_dim(),
                other.input_dim()
            )));
        }
        let mut layers = self.layers.clone();
        layers.extend(other.layers.iter().cloned());
        Ok(DenseNet { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map(|l| l.in_dim()).unwrap_or(0)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim()).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.biases.len())
            .sum()
    }

    /// Forward pass over a batch (rows are samples), keeping the trace needed
    /// for a backward pass.
    pub fn forward_trace(&self, input: &Array2<f64>) -> Result<ForwardTrace> {
        if input.ncols() != self.input_dim() {
            return Err(Error::Dimension(format!(
                "input has {} features, network expects {}",
                input.ncols(),
                self.input_dim()
            )));
        }
        let mut post = Vec::with_capacity(self.layers.len() + 1);
        post.push(input.clone());
        for layer in &self.layers {
            let mut z = post.last().unwrap().dot(&layer.weights.t());
            z += &layer.biases;
            layer.activation.apply(&mut z);
            post.push(z);
        }
        Ok(ForwardTrace { post })
    }

    /// Forward pass returning only the output batch.
    pub fn forward(&self, input: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_trace(input)?.into_output())
    }

    /// Reverse-mode pass: pulls `cotangent` (shape batch × out_dim) back
    /// through the trace, producing parameter gradients summed over the batch
    /// and the gradient with respect to the input batch.
    pub fn backward(&self, trace: &ForwardTrace, cotangent: &Array2<f64>) -> Result<GradientBundle> {
        let out = trace.output();
        if cotangent.dim() != out.dim() {
            return Err(Error::Dimension(format!(
                "cotangent shape {:?} does not match output {:?}",
                cotangent.dim(),
                out.dim()
            )));
        }
        let n_layers = self.layers.len();
        let mut weight_grads = vec![Array2::zeros((0, 0)); n_layers];
        let mut bias_grads = vec![Array1::zeros(0); n_layers];
        let mut grad = cotangent.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            layer.activation.chain(&trace.post[i + 1], &mut grad);
            weight_grads[i] = grad.t().dot(&trace.post[i]);
            bias_grads[i] = grad.sum_axis(Axis(0));
            grad = grad.dot(&layer.weights);
        }
        Ok(GradientBundle {
            weight_grads,
            bias_grads,
            input_grad: grad,
        })
    }

    /// Plain gradient-descent update: `θ ← θ − η·grad`.
    pub fn sgd_update(&mut self, grads: &GradientBundle, eta: f64) -> Result<()> {
        if grads.weight_grads.len() != self.layers.len() {
            return Err(Error::Dimension("gradient layer count mismatch".into()));
        }
        for (layer, (wg, bg)) in self
            .layers
            .iter_mut()
            .zip(grads.weight_grads.iter().zip(&grads.bias_grads))
        {
            if wg.dim() != layer.weights.dim() || bg.len() != layer.biases.len() {
                return Err(Error::Dimension("gradient shape mismatch".into()));
            }
            layer.weights.zip_mut_with(wg, |w, &g| *w -= eta * g);
            layer.biases.zip_mut_with(bg, |b, &g| *b -= eta * g);
        }
        Ok(())
    }

    /// Per-sample Jacobians of the output with respect to all parameters
    /// (flattened layer-by-layer, weights row-major then biases) and the
    /// input. One reverse sweep propagates all output rows together.
    pub fn output_jacobians(&self, input_row: &Array1<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let d_out = self.output_dim();
        let input = input_row
            .clone()
            .into_shape_with_order((1, input_row.len()))
            .map_err(|e| Error::Dimension(e.to_string()))?;
        let trace = self.forward_trace(&input)?;
        let mut theta_jac = Array2::zeros((d_out, self.param_count()));
        // parameter offsets per layer in the flat layout
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for layer in &self.layers {
            offsets.push(off);
            off += layer.weights.len() + layer.biases.len();
        }
        // upstream[s, i] = ∂y_s / ∂(post-activation i of the current layer)
        let mut upstream = Array2::eye(d_out);
        for (l, layer) in self.layers.iter().enumerate().rev() {
            // pull back through the activation
            if layer.activation == Activation::Relu {
                let post = &trace.post[l + 1];
                for mut row in upstream.rows_mut() {
                    for (u, &p) in row.iter_mut().zip(post.row(0)) {
                        if p <= 0.0 {
                            *u = 0.0;
                        }
                    }
                }
            }
            let a_prev = trace.post[l].row(0);
            let (w_rows, w_cols) = layer.weights.dim();
            let base = offsets[l];
            for srow in 0..d_out {
                for i in 0..w_rows {
                    let u = upstream[(srow, i)];
                    if u != 0.0 {
                        for (j, &a) in a_prev.iter().enumerate() {
                            theta_jac[(srow, base + i * w_cols + j)] = u * a;
                        }
                    }
                    theta_jac[(srow, base + w_rows * w_cols + i)] = u;
                }
            }
            upstream = upstream.dot(&layer.weights);
        }
        Ok((theta_jac, upstream))
    }

    /// Per-sample Jacobian of the output with respect to the input only
    /// (the parameter part skipped): a chain of weight matrices through the
    /// active ReLU pattern.
    pub fn input_jacobian(&self, input_row: &Array1<f64>) -> Result<Array2<f64>> {
        let input = input_row
            .clone()
            .into_shape_with_order((1, input_row.len()))
            .map_err(|e| Error::Dimension(e.to_string()))?;
        let trace = self.forward_trace(&input)?;
        let mut upstream = Array2::eye(self.output_dim());
        for (l, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation == Activation::Relu {
                let post = &trace.post[l + 1];
                for mut row in upstream.rows_mut() {
                    for (u, &p) in row.iter_mut().zip(post.row(0)) {
                        if p <= 0.0 {
                            *u = 0.0;
                        }
                    }
                }
            }
            upstream = upstream.dot(&layer.weights);
        }
        Ok(upstream)
    }

    /// Reassembles a flat parameter-gradient vector (the `output_jacobians`
    /// layout) into per-layer shapes.
    pub fn unflatten_gradient(&self, flat: &[f64]) -> Result<GradientBundle> {
        if flat.len() != self.param_count() {
            return Err(Error::Dimension(format!(
                "flat gradient has {} entries, network has {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut weight_grads = Vec::with_capacity(self.layers.len());
        let mut bias_grads = Vec::with_capacity(self.layers.len());
        let mut offset = 0;
        for layer in &self.layers {
            let w_len = layer.weights.len();
            let w = Array2::from_shape_vec(layer.weights.dim(), flat[offset..offset + w_len].to_vec())
                .map_err(|e| Error::Dimension(e.to_string()))?;
            offset += w_len;
            let b_len = layer.biases.len();
            let b = Array1::from_vec(flat[offset..offset + b_len].to_vec());
            offset += b_len;
            weight_grads.push(w);
            bias_grads.push(b);
        }
        Ok(GradientBundle {
            weight_grads,
            bias_grads,
            input_grad: Array2::zeros((0, self.input_dim())),
        })
    }

    /// Adds `2λθ` (the gradient of λ‖θ‖²) into `grads`.
    pub fn add_l2_gradient(&self, grads: &mut GradientBundle, lambda: f64) {
        if lambda == 0.0 {
            return;
        }
        for (layer, (wg, bg)) in self
            .layers
            .iter()
            .zip(grads.weight_grads.iter_mut().zip(&mut grads.bias_grads))
        {
            wg.zip_mut_with(&layer.weights, |g, &w| *g += 2.0 * lambda * w);
            bg.zip_mut_with(&layer.biases, |g, &b| *g += 2.0 * lambda * b);
        }
    }

    /// Squared parameter norm ‖θ‖².
    pub fn l2_norm_sq(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| {
                l.weights.iter().map(|w| w * w).sum::<f64>()
                    + l.biases.iter().map(|b| b * b).sum::<f64>()
            })
            .sum()
    }

    /// Serializes to the checkpoint format: a shape header plus flat
    /// parameter arrays. JSON round-trips f64 exactly.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), &self.to_checkpoint())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let chk: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
        Self::from_checkpoint(&chk)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            shapes: self
                .layers
                .iter()
                .map(|l| LayerShape {
                    out_dim: l.out_dim(),
                    in_dim: l.in_dim(),
                    activation: l.activation,
                })
                .collect(),
            weights: self
                .layers
                .iter()
                .map(|l| l.weights.iter().copied().collect())
                .collect(),
            biases: self
                .layers
                .iter()
                .map(|l| l.biases.to_vec())
                .collect(),
        }
    }

    pub fn from_checkpoint(chk: &Checkpoint) -> Result<Self> {
        if chk.shapes.len() != chk.weights.len() || chk.shapes.len() != chk.biases.len() {
            return Err(Error::Config("checkpoint layer count mismatch".into()));
        }
        let mut layers = Vec::with_capacity(chk.shapes.len());
        for (shape, (w, b)) in chk.shapes.iter().zip(chk.weights.iter().zip(&chk.biases)) {
            let weights = Array2::from_shape_vec((shape.out_dim, shape.in_dim), w.clone())
                .map_err(|e| Error::Config(format!("bad checkpoint weights: {e}")))?;
            if b.len() != shape.out_dim {
                return Err(Error::Config("bad checkpoint biases".into()));
            }
            layers.push(Layer {
                weights,
                biases: Array1::from_vec(b.clone()),
                activation: shape.activation,
            });
        }
        Ok(DenseNet { layers })
    }
}

/// Concatenates parameter gradients in the flat layout used by
/// `output_jacobians`.
pub fn flatten_gradients(grads: &GradientBundle) -> Vec<f64> {
    let mut flat = Vec::new();
    for (w, b) in grads.weight_grads.iter().zip(&grads.bias_grads) {
        flat.extend(w.iter().copied());
        flat.extend(b.iter().copied());
    }
    flat
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerShape {
    pub out_dim: usize,
    pub in_dim: usize,
    pub activation: Activation,
}

/// On-disk parameter format: shape header + flat arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub shapes: Vec<LayerShape>,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}
