//! Network assembly: layer specs, shape validation, initialization and the
//! forward/backward drivers used by training and finite-difference checks.

pub mod layers;
pub mod loss;
pub mod tensor;

use crate::error::{LpssError, Result};
use crate::geometry::LpConstraint;
use layers::{
    BatchNormLayer, ConvLayer, DenseLayer, GapLayer, LayerGrads, MaxPoolLayer, NeuronBank,
    ReluLayer,
};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use tensor::Tensor;

fn default_true() -> bool {
    true
}

fn default_p() -> f64 {
    2.0
}

fn default_stride() -> usize {
    1
}

/// One layer in a network description. Trainable layers carry their own
/// sphere exponent `p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LayerSpec {
    Dense {
        neurons: usize,
        #[serde(default = "default_true")]
        bias: bool,
        #[serde(default = "default_p")]
        p: f64,
    },
    Conv2d {
        filters: usize,
        kernel: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default)]
        padding: usize,
        #[serde(default)]
        bias: bool,
        #[serde(default = "default_p")]
        p: f64,
    },
    Relu,
    MaxPool {
        kernel: usize,
        #[serde(default)]
        stride: Option<usize>,
    },
    Gap,
    BatchNorm,
}

/// A full network description: input shape `(channels, height, width)`
/// followed by the layer stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Shape after each layer, or a config error naming the first layer
    /// whose geometry does not fit its input.
    pub fn output_shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let (mut c, mut h, mut w) = (self.input[0], self.input[1], self.input[2]);
        if c == 0 || h == 0 || w == 0 {
            return Err(LpssError::Config("input shape has a zero dimension".into()));
        }
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            let bad = |msg: String| Err(LpssError::Config(format!("layer {li}: {msg}")));
            match *layer {
                LayerSpec::Dense { neurons, p, .. } => {
                    if neurons == 0 {
                        return bad("dense layer needs at least one neuron".into());
                    }
                    LpConstraint::new(p)?;
                    (c, h, w) = (neurons, 1, 1);
                }
                LayerSpec::Conv2d {
                    filters,
                    kernel,
                    stride,
                    padding,
                    p,
                    ..
                } => {
                    if filters == 0 || kernel == 0 || stride == 0 {
                        return bad("conv filters, kernel and stride must be positive".into());
                    }
                    LpConstraint::new(p)?;
                    if h + 2 * padding < kernel || w + 2 * padding < kernel {
                        return bad(format!(
                            "kernel {kernel} does not fit {h}x{w} input with padding {padding}"
                        ));
                    }
                    h = (h + 2 * padding - kernel) / stride + 1;
                    w = (w + 2 * padding - kernel) / stride + 1;
                    c = filters;
                }
                LayerSpec::Relu | LayerSpec::BatchNorm => {}
                LayerSpec::MaxPool { kernel, stride } => {
                    let stride = stride.unwrap_or(kernel);
                    if kernel == 0 || stride == 0 {
                        return bad("pool kernel and stride must be positive".into());
                    }
                    if h < kernel || w < kernel {
                        return bad(format!("pool window {kernel} does not fit {h}x{w}").into());
                    }
                    h = (h - kernel) / stride + 1;
                    w = (w - kernel) / stride + 1;
                }
                LayerSpec::Gap => {
                    (h, w) = (1, 1);
                }
            }
            shapes.push((c, h, w));
        }
        Ok(shapes)
    }

    /// Number of output features (logit count for a classifier head).
    pub fn output_features(&self) -> Result<usize> {
        let shapes = self.output_shapes()?;
        let (c, h, w) = *shapes.last().ok_or_else(|| {
            LpssError::Config("network needs at least one layer".into())
        })?;
        Ok(c * h * w)
    }
}

/// Runtime layer holding parameters and backprop caches.
#[derive(Debug, Clone)]
pub enum Layer {
    Dense(DenseLayer),
    Conv(ConvLayer),
    Relu(ReluLayer),
    MaxPool(MaxPoolLayer),
    Gap(GapLayer),
    BatchNorm(BatchNormLayer),
}

impl Layer {
    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        match self {
            Layer::Dense(l) => l.forward(x, train),
            Layer::Conv(l) => l.forward(x, train),
            Layer::Relu(l) => l.forward(x, train),
            Layer::MaxPool(l) => l.forward(x, train),
            Layer::Gap(l) => l.forward(x, train),
            Layer::BatchNorm(l) => l.forward(x, train),
        }
    }

    pub fn backward(&mut self, gout: &Tensor) -> Tensor {
        match self {
            Layer::Dense(l) => l.backward(gout),
            Layer::Conv(l) => l.backward(gout),
            Layer::Relu(l) => l.backward(gout),
            Layer::MaxPool(l) => l.backward(gout),
            Layer::Gap(l) => l.backward(gout),
            Layer::BatchNorm(l) => l.backward(gout),
        }
    }

    pub fn bank(&self) -> Option<&NeuronBank> {
        match self {
            Layer::Dense(l) => Some(&l.bank),
            Layer::Conv(l) => Some(&l.bank),
            _ => None,
        }
    }

    pub fn bank_mut(&mut self) -> Option<&mut NeuronBank> {
        match self {
            Layer::Dense(l) => Some(&mut l.bank),
            Layer::Conv(l) => Some(&mut l.bank),
            _ => None,
        }
    }

    pub fn grads(&self) -> Option<&LayerGrads> {
        match self {
            Layer::Dense(l) => l.grads.as_ref(),
            Layer::Conv(l) => l.grads.as_ref(),
            Layer::BatchNorm(l) => l.grads.as_ref(),
            _ => None,
        }
    }

    /// Number of scalar parameters, in the fixed enumeration order used by
    /// `get_param`/`set_param`: weights then bias for dense and conv
    /// (masked slots included), scale then shift for batchnorm.
    pub fn param_count(&self) -> usize {
        match self {
            Layer::Dense(l) => {
                l.bank.weights.len() + l.bank.bias.as_ref().map_or(0, Vec::len)
            }
            Layer::Conv(l) => {
                l.bank.weights.len() + l.bank.bias.as_ref().map_or(0, Vec::len)
            }
            Layer::BatchNorm(l) => 2 * l.channels(),
            _ => 0,
        }
    }

    pub fn get_param(&self, k: usize) -> f64 {
        match self {
            Layer::Dense(DenseLayer { bank, .. }) | Layer::Conv(ConvLayer { bank, .. }) => {
                let nw = bank.weights.len();
                if k < nw {
                    bank.weights[k]
                } else {
                    bank.bias.as_ref().expect("no bias")[k - nw]
                }
            }
            Layer::BatchNorm(l) => {
                let c = l.channels();
                if k < c {
                    l.scale[k]
                } else {
                    l.shift[k - c]
                }
            }
            _ => panic!("layer has no parameters"),
        }
    }

    pub fn set_param(&mut self, k: usize, v: f64) {
        match self {
            Layer::Dense(DenseLayer { bank, .. }) | Layer::Conv(ConvLayer { bank, .. }) => {
                let nw = bank.weights.len();
                if k < nw {
                    bank.weights[k] = v;
                } else {
                    bank.bias.as_mut().expect("no bias")[k - nw] = v;
                }
            }
            Layer::BatchNorm(l) => {
                let c = l.channels();
                if k < c {
                    l.scale[k] = v;
                } else {
                    l.shift[k - c] = v;
                }
            }
            _ => panic!("layer has no parameters"),
        }
    }

    /// Gradient for parameter `k` from the most recent backward pass.
    pub fn get_grad(&self, k: usize) -> f64 {
        let grads = self.grads().expect("no gradients recorded");
        match self {
            Layer::Dense(DenseLayer { bank, .. }) | Layer::Conv(ConvLayer { bank, .. }) => {
                let nw = bank.weights.len();
                if k < nw {
                    grads.weights[k]
                } else {
                    grads.bias[k - nw]
                }
            }
            Layer::BatchNorm(l) => {
                let c = l.channels();
                if k < c {
                    grads.scale[k]
                } else {
                    grads.shift[k - c]
                }
            }
            _ => panic!("layer has no parameters"),
        }
    }
}

/// A built network: layers in order plus the validated input shape.
#[derive(Debug, Clone)]
pub struct Network {
    pub layers: Vec<Layer>,
    input_shape: (usize, usize, usize),
}

impl Network {
    /// Builds the network from a spec: validates shapes, draws He-scaled
    /// Gaussian weights (sigma = sqrt(2 / fan_in)) in a fixed layer-major
    /// order from `rng`, then projects every neuron onto its unit
    /// p-sphere.
    pub fn build(spec: &NetworkSpec, rng: &mut impl Rng) -> Result<Self> {
        let shapes = spec.output_shapes()?;
        let mut layers = Vec::with_capacity(spec.layers.len());
        let mut in_shape = (spec.input[0], spec.input[1], spec.input[2]);
        for (layer_spec, &out_shape) in spec.layers.iter().zip(&shapes) {
            let layer = match *layer_spec {
                LayerSpec::Dense { neurons, bias, p } => {
                    let inputs = in_shape.0 * in_shape.1 * in_shape.2;
                    let bank = init_bank(neurons, inputs, bias, p, rng)?;
                    Layer::Dense(DenseLayer::new(bank))
                }
                LayerSpec::Conv2d {
                    filters,
                    kernel,
                    stride,
                    padding,
                    bias,
                    p,
                } => {
                    let inputs = in_shape.0 * kernel * kernel;
                    let bank = init_bank(filters, inputs, bias, p, rng)?;
                    Layer::Conv(ConvLayer::new(bank, in_shape.0, kernel, stride, padding))
                }
                LayerSpec::Relu => Layer::Relu(ReluLayer::default()),
                LayerSpec::MaxPool { kernel, stride } => {
                    Layer::MaxPool(MaxPoolLayer::new(kernel, stride.unwrap_or(kernel)))
                }
                LayerSpec::Gap => Layer::Gap(GapLayer::default()),
                LayerSpec::BatchNorm => Layer::BatchNorm(BatchNormLayer::new(in_shape.0)),
            };
            layers.push(layer);
            in_shape = out_shape;
        }
        Ok(Network {
            layers,
            input_shape: (spec.input[0], spec.input[1], spec.input[2]),
        })
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn forward(&mut self, x: &Tensor, train: bool) -> Tensor {
        let mut cur = x.clone();
        for layer in &mut self.layers {
            cur = layer.forward(&cur, train);
        }
        cur
    }

    /// Backpropagates a loss gradient through every layer, filling each
    /// trainable layer's gradient record, and returns the input gradient.
    pub fn backward(&mut self, loss_grad: &Tensor) -> Tensor {
        let mut cur = loss_grad.clone();
        for layer in self.layers.iter_mut().rev() {
            cur = layer.backward(&cur);
        }
        cur
    }

    /// Projects every neuron back onto its sphere; returns how many dead
    /// neurons were re-seeded.
    pub fn renormalize(&mut self, rng: &mut impl Rng) -> Result<usize> {
        let mut dead = 0;
        for layer in &mut self.layers {
            if let Some(bank) = layer.bank_mut() {
                dead += bank.renormalize(rng)?;
            }
        }
        Ok(dead)
    }

    /// Worst per-neuron deviation from unit p-norm across all banks.
    pub fn max_constraint_error(&self) -> f64 {
        self.layers
            .iter()
            .filter_map(Layer::bank)
            .map(NeuronBank::constraint_error)
            .fold(0.0, f64::max)
    }

    /// True when every masked-out weight slot is exactly zero.
    pub fn masked_slots_are_zero(&self) -> bool {
        self.layers
            .iter()
            .filter_map(Layer::bank)
            .all(NeuronBank::masked_slots_are_zero)
    }

    /// Total parameters across all layers (for reporting).
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }
}

fn init_bank(
    neurons: usize,
    inputs: usize,
    bias: bool,
    p: f64,
    rng: &mut impl Rng,
) -> Result<NeuronBank> {
    let constraint = LpConstraint::new(p)?;
    let mut bank = NeuronBank::new(neurons, inputs, bias, constraint);
    let sigma = (2.0 / inputs as f64).sqrt();
    let normal = Normal::new(0.0, sigma).expect("sigma is positive");
    for w in &mut bank.weights {
        *w = normal.sample(rng);
    }
    bank.renormalize(rng)?;
    Ok(bank)
}
