//! Layer descriptions, their parameters, and the forward rule for each kind.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Activation, Graph, Mode, NodeId};
use crate::params::{BufferId, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Slope of every leaky ReLU in the models.
pub const LEAKY_SLOPE: f64 = 0.01;
pub const BN_EPS: f64 = 1e-5;
/// Running statistics keep this fraction of their previous value per update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize },
    Conv2d { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize },
    /// Output side is `(H - 1) * stride - 2 * pad + kernel + out_pad`.
    ConvTranspose2d { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize, out_pad: usize },
    BatchNorm { channels: usize },
    LeakyRelu { slope: f64 },
    Relu,
    Tanh,
    Sigmoid,
    Dropout { p: f64 },
    Softmax,
    MaxPool { size: usize },
    AvgPool { size: usize },
    Flatten,
    /// `relu(x + bn(conv(relu(bn(conv(x))))))` with 3x3 same-padding convolutions.
    ResidualBlock { channels: usize },
}

impl LayerSpec {
    /// Output shape (batch axis included) or the reason the input is rejected.
    pub fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, Vec<usize>> {
        use LayerSpec::*;
        let image = |c: usize| input.len() == 4 && input[1] == c;
        match *self {
            Dense { inputs, outputs } => {
                if input.len() == 2 && input[1] == inputs {
                    Ok(vec![input[0], outputs])
                } else {
                    Err(vec![input.first().copied().unwrap_or(0), inputs])
                }
            }
            Conv2d { in_ch, out_ch, kernel, stride, pad } => {
                if image(in_ch) && stride > 0 && input[2] + 2 * pad >= kernel && input[3] + 2 * pad >= kernel {
                    Ok(vec![
                        input[0],
                        out_ch,
                        (input[2] + 2 * pad - kernel) / stride + 1,
                        (input[3] + 2 * pad - kernel) / stride + 1,
                    ])
                } else {
                    Err(vec![input.first().copied().unwrap_or(0), in_ch, kernel.max(1), kernel.max(1)])
                }
            }
            ConvTranspose2d { in_ch, out_ch, kernel, stride, pad, out_pad } => {
                let side = |s: usize| ((s.max(1) - 1) * stride + kernel + out_pad).checked_sub(2 * pad).filter(|&v| v > 0);
                match (image(in_ch), input.get(2).and_then(|&h| side(h)), input.get(3).and_then(|&w| side(w))) {
                    (true, Some(h), Some(w)) if out_pad < stride.max(1) => Ok(vec![input[0], out_ch, h, w]),
                    _ => Err(vec![input.first().copied().unwrap_or(0), in_ch, 1, 1]),
                }
            }
            BatchNorm { channels } => {
                if input.len() >= 2 && input[1] == channels {
                    Ok(input.to_vec())
                } else {
                    Err(vec![input.first().copied().unwrap_or(0), channels])
                }
            }
            LeakyRelu { .. } | Relu | Tanh | Sigmoid | Dropout { .. } => Ok(input.to_vec()),
            Softmax => {
                if input.len() == 2 {
                    Ok(input.to_vec())
                } else {
                    Err(vec![input.first().copied().unwrap_or(0), 0])
                }
            }
            MaxPool { size } | AvgPool { size } => {
                if input.len() == 4 && size > 0 && input[2] >= size && input[3] >= size {
                    Ok(vec![input[0], input[1], input[2] / size, input[3] / size])
                } else {
                    Err(vec![input.first().copied().unwrap_or(0), input.get(1).copied().unwrap_or(0), size, size])
                }
            }
            Flatten => {
                if input.is_empty() {
                    Err(vec![0])
                } else {
                    Ok(vec![input[0], input[1..].iter().product()])
                }
            }
            ResidualBlock { channels } => {
                if image(channels) {
                    Ok(input.to_vec())
                } else {
                    Err(vec![input.first().copied().unwrap_or(0), channels, 1, 1])
                }
            }
        }
    }
}

/// Handles of whatever a layer owns inside a [`ParamStore`].
#[derive(Clone, Debug, Default)]
struct Handles {
    weight: Option<ParamId>,
    bias: Option<ParamId>,
    running: Option<(BufferId, BufferId)>,
    inner: Vec<Layer>,
}

#[derive(Clone, Debug)]
pub struct Layer {
    pub name: String,
    pub spec: LayerSpec,
    handles: Box<Handles>,
}

impl Layer {
    /// Creates the layer and registers its parameters (He-uniform weights,
    /// zero biases, unit/zero batch-norm affine terms).
    pub fn new<T: Scalar, R: Rng + ?Sized>(name: impl Into<String>, spec: LayerSpec, store: &mut ParamStore<T>, rng: &mut R) -> Self {
        let name = name.into();
        let mut h = Handles::default();
        match spec {
            LayerSpec::Dense { inputs, outputs } => {
                let bound = (6.0 / inputs as f64).sqrt();
                h.weight = Some(store.add(format!("{name}.weight"), Tensor::uniform(vec![outputs, inputs], bound, rng)));
                h.bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(vec![outputs])));
            }
            LayerSpec::Conv2d { in_ch, out_ch, kernel, .. } => {
                let bound = (6.0 / (in_ch * kernel * kernel) as f64).sqrt();
                h.weight = Some(store.add(
                    format!("{name}.weight"),
                    Tensor::uniform(vec![out_ch, in_ch, kernel, kernel], bound, rng),
                ));
                h.bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(vec![out_ch])));
            }
            LayerSpec::ConvTranspose2d { in_ch, out_ch, kernel, stride, .. } => {
                // Each output pixel sees about in_ch * k^2 / stride^2 inputs.
                let fan = (in_ch * kernel * kernel) as f64 / (stride * stride) as f64;
                let bound = (6.0 / fan.max(1.0)).sqrt();
                h.weight = Some(store.add(
                    format!("{name}.weight"),
                    Tensor::uniform(vec![in_ch, out_ch, kernel, kernel], bound, rng),
                ));
                h.bias = Some(store.add(format!("{name}.bias"), Tensor::zeros(vec![out_ch])));
            }
            LayerSpec::BatchNorm { channels } => {
                h.weight = Some(store.add(format!("{name}.gamma"), Tensor::full(vec![channels], T::one())));
                h.bias = Some(store.add(format!("{name}.beta"), Tensor::zeros(vec![channels])));
                h.running = Some((
                    store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(vec![channels])),
                    store.add_buffer(format!("{name}.running_var"), Tensor::full(vec![channels], T::one())),
                ));
            }
            LayerSpec::ResidualBlock { channels } => {
                let conv = LayerSpec::Conv2d { in_ch: channels, out_ch: channels, kernel: 3, stride: 1, pad: 1 };
                h.inner.push(Layer::new(format!("{name}.conv1"), conv.clone(), store, rng));
                h.inner.push(Layer::new(format!("{name}.bn1"), LayerSpec::BatchNorm { channels }, store, rng));
                h.inner.push(Layer::new(format!("{name}.conv2"), conv, store, rng));
                h.inner.push(Layer::new(format!("{name}.bn2"), LayerSpec::BatchNorm { channels }, store, rng));
            }
            _ => {}
        }
        Self { name, spec, handles: Box::new(h) }
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.spec
            .output_shape(input)
            .map_err(|expected| Error::shape(&self.name, &expected, input))
    }

    pub fn weight(&self) -> Option<ParamId> {
        self.handles.weight
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.handles.bias
    }
}

/// Applies one layer. In eval mode dropout is the identity and batch
/// normalization reads running statistics; in train mode batch
/// normalization uses batch statistics and queues a running update.
pub fn forward_layer<T: Scalar>(g: &mut Graph<T>, x: NodeId, layer: &Layer, params: &ParamStore<T>, mode: Mode) -> Result<NodeId> {
    layer.output_shape(g.shape(x))?;
    if mode == Mode::Train && g.mode() != Mode::Train {
        return Err(Error::ModeMismatch(format!("train-mode layer `{}`", layer.name)));
    }
    let h = &layer.handles;
    let p = |g: &mut Graph<T>, id: Option<ParamId>| id.map(|id| g.param(params, id));
    match layer.spec {
        LayerSpec::Dense { .. } => {
            let (w, b) = (p(g, h.weight).unwrap(), p(g, h.bias));
            g.linear(x, w, b)
        }
        LayerSpec::Conv2d { stride, pad, .. } => {
            let (w, b) = (p(g, h.weight).unwrap(), p(g, h.bias));
            g.conv2d(x, w, b, stride, pad)
        }
        LayerSpec::ConvTranspose2d { stride, pad, out_pad, .. } => {
            let (w, b) = (p(g, h.weight).unwrap(), p(g, h.bias));
            g.conv_transpose2d(x, w, b, stride, pad, out_pad)
        }
        LayerSpec::BatchNorm { .. } => {
            let (gamma, beta) = (p(g, h.weight).unwrap(), p(g, h.bias).unwrap());
            let (mid, vid) = h.running.expect("batch norm owns running statistics");
            match mode {
                Mode::Train => g.batch_norm(x, gamma, beta, BN_EPS, None, Some((params.id(), mid, vid))),
                Mode::Eval => {
                    let (rm, rv) = (params.buffer(mid).data().to_vec(), params.buffer(vid).data().to_vec());
                    g.batch_norm(x, gamma, beta, BN_EPS, Some((&rm, &rv)), None)
                }
            }
        }
        LayerSpec::LeakyRelu { slope } => Ok(g.activation(x, Activation::LeakyRelu(slope))),
        LayerSpec::Relu => Ok(g.activation(x, Activation::Relu)),
        LayerSpec::Tanh => Ok(g.activation(x, Activation::Tanh)),
        LayerSpec::Sigmoid => Ok(g.activation(x, Activation::Sigmoid)),
        LayerSpec::Dropout { p } => match mode {
            Mode::Train if p > 0.0 => g.dropout(x, p),
            _ => Ok(x),
        },
        LayerSpec::Softmax => g.softmax(x),
        LayerSpec::MaxPool { size } => g.max_pool2d(x, size),
        LayerSpec::AvgPool { size } => g.avg_pool2d(x, size),
        LayerSpec::Flatten => g.flatten(x),
        LayerSpec::ResidualBlock { .. } => {
            let a = forward_layer(g, x, &h.inner[0], params, mode)?;
            let a = forward_layer(g, a, &h.inner[1], params, mode)?;
            let a = g.relu(a);
            let b = forward_layer(g, a, &h.inner[2], params, mode)?;
            let b = forward_layer(g, b, &h.inner[3], params, mode)?;
            let s = g.add(x, b)?;
            Ok(g.relu(s))
        }
    }
}

/// Ordered stack of layers.
#[derive(Clone, Debug, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push<T: Scalar, R: Rng + ?Sized>(&mut self, name: impl Into<String>, spec: LayerSpec, store: &mut ParamStore<T>, rng: &mut R) -> &mut Self {
        self.layers.push(Layer::new(name, spec, store, rng));
        self
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: NodeId, params: &ParamStore<T>, mode: Mode) -> Result<NodeId> {
        self.layers.iter().try_fold(x, |x, l| forward_layer(g, x, l, params, mode))
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.layers.iter().try_fold(input.to_vec(), |s, l| l.output_shape(&s))
    }
}
