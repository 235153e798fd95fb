//! Trainable encoder: a stack of affine layers with ReLU tags, hand-derived
//! reverse-mode gradients, and the parametric softmax head used by the
//! baseline comparison.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::embedding::RawFeature;

#[derive(Debug, Error, PartialEq)]
pub enum EncoderError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("activation tape does not match this network ({0})")]
    TapeMismatch(String),
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    /// ReLU with subgradient 0 at exactly 0.
    Relu,
    /// No nonlinearity.
    Identity,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

/// One affine layer: `y = act(W x + b)`, weights row-major `out x in`.
#[derive(Debug, Clone)]
pub struct AffineLayer {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl AffineLayer {
    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// The map from raw input to a pre-normalization feature.
#[derive(Debug, Clone)]
pub struct EncoderNetwork {
    layers: Vec<AffineLayer>,
}

impl EncoderNetwork {
    /// MLP with ReLU hidden layers and a linear output projection, Kaiming
    /// initialized, deterministic per seed.
    pub fn mlp(in_dim: usize, hidden: &[usize], out_dim: usize, seed: u64) -> Self {
        Self::mlp_with(in_dim, hidden, out_dim, Activation::Identity, seed)
    }

    /// MLP with a chosen output nonlinearity (the baseline trunk keeps ReLU
    /// on its last layer; the embedding head projects linearly).
    pub fn mlp_with(
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        output_activation: Activation,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut prev = in_dim;
        for &width in hidden {
            layers.push(init_layer(prev, width, Activation::Relu, &mut rng));
            prev = width;
        }
        layers.push(init_layer(prev, out_dim, output_activation, &mut rng));
        EncoderNetwork { layers }
    }

    pub fn from_layers(layers: Vec<AffineLayer>) -> Result<Self, EncoderError> {
        if layers.is_empty() {
            return Err(EncoderError::InvalidArchitecture("no layers".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(EncoderError::InvalidArchitecture(format!(
                    "layer widths do not chain: {} -> {}",
                    pair[0].out_dim, pair[1].in_dim
                )));
            }
        }
        Ok(EncoderNetwork { layers })
    }

    pub fn layers(&self) -> &[AffineLayer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [AffineLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(AffineLayer::param_count).sum()
    }

    /// Forward pass, keeping the activations needed for [`Self::backward`].
    pub fn forward(&self, input: &[f32]) -> Result<(RawFeature, ActivationTape), EncoderError> {
        let x: Vec<f64> = input.iter().map(|&v| v as f64).collect();
        self.forward_f64(x)
    }

    /// Forward pass from an f64 input (gradient-check harnesses perturb f64).
    pub fn forward_f64(&self, input: Vec<f64>) -> Result<(RawFeature, ActivationTape), EncoderError> {
        if input.len() != self.input_dim() {
            return Err(EncoderError::ShapeMismatch {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre_acts = Vec::with_capacity(self.layers.len());
        let mut x = input;
        for layer in &self.layers {
            let mut pre = layer.bias.clone();
            for (o, pre_o) in pre.iter_mut().enumerate() {
                let row = &layer.weight[o * layer.in_dim..(o + 1) * layer.in_dim];
                *pre_o += crate::kernels::dot_f64(row, &x);
            }
            let post: Vec<f64> = pre.iter().map(|&p| layer.activation.apply(p)).collect();
            inputs.push(x);
            pre_acts.push(pre);
            x = post;
        }
        Ok((RawFeature(x), ActivationTape { inputs, pre_acts }))
    }

    /// Output only, when no gradient is needed.
    pub fn embed_raw(&self, input: &[f32]) -> Result<RawFeature, EncoderError> {
        let (raw, _) = self.forward(input)?;
        Ok(raw)
    }

    /// Reverse-mode gradients for every parameter given the gradient w.r.t.
    /// the pre-normalization output. Also returns the gradient w.r.t. the
    /// network input (unused by training, handy for diagnostics).
    pub fn backward(
        &self,
        tape: &ActivationTape,
        grad_wrt_output: &[f64],
    ) -> Result<ParameterGradients, EncoderError> {
        if tape.inputs.len() != self.layers.len() {
            return Err(EncoderError::TapeMismatch(format!(
                "tape has {} layers, network has {}",
                tape.inputs.len(),
                self.layers.len()
            )));
        }
        if grad_wrt_output.len() != self.output_dim() {
            return Err(EncoderError::ShapeMismatch {
                expected: self.output_dim(),
                got: grad_wrt_output.len(),
            });
        }
        let mut grads = ParameterGradients::zeros_like(self);
        let mut g = grad_wrt_output.to_vec();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let input = &tape.inputs[l];
            let pre = &tape.pre_acts[l];
            if input.len() != layer.in_dim || pre.len() != layer.out_dim {
                return Err(EncoderError::TapeMismatch(format!(
                    "layer {l} tape shapes {}x{} vs {}x{}",
                    pre.len(),
                    input.len(),
                    layer.out_dim,
                    layer.in_dim
                )));
            }
            let layer_grad = &mut grads.layers[l];
            let mut g_input = vec![0.0f64; layer.in_dim];
            for o in 0..layer.out_dim {
                let g_pre = g[o] * layer.activation.derivative(pre[o]);
                if g_pre != 0.0 {
                    let w_row = &layer.weight[o * layer.in_dim..(o + 1) * layer.in_dim];
                    let gw_row = &mut layer_grad.weight[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for i in 0..layer.in_dim {
                        gw_row[i] += g_pre * input[i];
                        g_input[i] += g_pre * w_row[i];
                    }
                }
                layer_grad.bias[o] += g_pre;
            }
            g = g_input;
        }
        grads.input = g;
        Ok(grads)
    }
}

fn init_layer(
    in_dim: usize,
    out_dim: usize,
    activation: Activation,
    rng: &mut ChaCha8Rng,
) -> AffineLayer {
    // Kaiming-style scaled Gaussian; gain 2 ahead of ReLU, 1 otherwise.
    let gain = match activation {
        Activation::Relu => 2.0f64,
        Activation::Identity => 1.0,
    };
    let std = (gain / in_dim as f64).sqrt();
    let weight = (0..in_dim * out_dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    AffineLayer { weight, bias: vec![0.0; out_dim], in_dim, out_dim, activation }
}

/// Activations recorded by a forward pass.
#[derive(Debug, Clone)]
pub struct ActivationTape {
    inputs: Vec<Vec<f64>>,
    pre_acts: Vec<Vec<f64>>,
}

/// Per-layer gradient tensors, shape-congruent with a network.
#[derive(Debug, Clone)]
pub struct ParameterGradients {
    pub layers: Vec<LayerGradient>,
    /// Gradient w.r.t. the network input.
    pub input: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct LayerGradient {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ParameterGradients {
    pub fn zeros_like(net: &EncoderNetwork) -> Self {
        let layers = net
            .layers
            .iter()
            .map(|l| LayerGradient {
                weight: vec![0.0; l.weight.len()],
                bias: vec![0.0; l.bias.len()],
            })
            .collect();
        ParameterGradients { layers, input: vec![0.0; net.input_dim()] }
    }

    pub fn add_scaled(&mut self, other: &ParameterGradients, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.weight.iter_mut().zip(&b.weight) {
                *x += scale * y;
            }
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for l in self.layers.iter_mut() {
            for x in l.weight.iter_mut() {
                *x *= factor;
            }
            for x in l.bias.iter_mut() {
                *x *= factor;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        let mut m = 0.0f64;
        for l in &self.layers {
            for &x in l.weight.iter().chain(&l.bias) {
                m = m.max(x.abs());
            }
        }
        m
    }
}

/// One learned prototype per category (the parametric softmax baseline head).
#[derive(Debug, Clone)]
pub struct SoftmaxHead {
    prototypes: Vec<f64>,
    classes: usize,
    feature_dim: usize,
}

/// Loss and gradients of one softmax cross-entropy term.
#[derive(Debug, Clone)]
pub struct CrossEntropyGrad {
    pub loss: f64,
    /// Gradient w.r.t. the prototype matrix, row-major `classes x feature_dim`.
    pub prototypes: Vec<f64>,
    /// Gradient w.r.t. the input feature.
    pub feature: Vec<f64>,
}

impl SoftmaxHead {
    pub fn init(classes: usize, feature_dim: usize, seed: u64) -> Result<Self, EncoderError> {
        if classes < 2 {
            return Err(EncoderError::InvalidArchitecture(format!(
                "softmax head needs >= 2 classes, got {classes}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let std = (1.0 / feature_dim as f64).sqrt();
        let prototypes = (0..classes * feature_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * std
            })
            .collect();
        Ok(SoftmaxHead { prototypes, classes, feature_dim })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn prototypes(&self) -> &[f64] {
        &self.prototypes
    }

    pub fn prototypes_mut(&mut self) -> &mut [f64] {
        &mut self.prototypes
    }

    pub(crate) fn from_parts(prototypes: Vec<f64>, classes: usize, feature_dim: usize) -> Self {
        SoftmaxHead { prototypes, classes, feature_dim }
    }

    /// Max-subtracted softmax over prototype scores (Eq. 7 shape).
    pub fn forward(&self, feature: &[f64]) -> Result<Vec<f64>, EncoderError> {
        if feature.len() != self.feature_dim {
            return Err(EncoderError::ShapeMismatch {
                expected: self.feature_dim,
                got: feature.len(),
            });
        }
        let mut logits = vec![0.0f64; self.classes];
        for (c, l) in logits.iter_mut().enumerate() {
            let row = &self.prototypes[c * self.feature_dim..(c + 1) * self.feature_dim];
            *l = crate::kernels::dot_f64(row, feature);
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0f64;
        for l in logits.iter_mut() {
            *l = (*l - max).exp();
            sum += *l;
        }
        for l in logits.iter_mut() {
            *l /= sum;
        }
        Ok(logits)
    }

    /// Cross-entropy loss and its gradients: `p - onehot(label)` pushed into
    /// the prototypes and the feature.
    pub fn cross_entropy_grad(
        &self,
        feature: &[f64],
        label: usize,
    ) -> Result<CrossEntropyGrad, EncoderError> {
        if label >= self.classes {
            return Err(EncoderError::ShapeMismatch { expected: self.classes, got: label });
        }
        let probs = self.forward(feature)?;
        let loss = -probs[label].max(f64::MIN_POSITIVE).ln();
        let mut grad_proto = vec![0.0f64; self.prototypes.len()];
        let mut grad_feature = vec![0.0f64; self.feature_dim];
        for c in 0..self.classes {
            let delta = probs[c] - if c == label { 1.0 } else { 0.0 };
            if delta != 0.0 {
                let w_row = &self.prototypes[c * self.feature_dim..(c + 1) * self.feature_dim];
                let g_row = &mut grad_proto[c * self.feature_dim..(c + 1) * self.feature_dim];
                for i in 0..self.feature_dim {
                    g_row[i] += delta * feature[i];
                    grad_feature[i] += delta * w_row[i];
                }
            }
        }
        Ok(CrossEntropyGrad { loss, prototypes: grad_proto, feature: grad_feature })
    }
}
