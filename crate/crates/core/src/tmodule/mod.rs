//! Throttleable modules and the networks composed from them.
//!
//! A gated module computes `a(g ⊙ f(x))`: `f` is a list of components (channel
//! groups of one layer, parallel branches, or residual blocks), `g` is the
//! gate vector and `a` concatenates or sums the gated outputs. Networks mix
//! gated modules with ordinary layers.

mod forward;
mod presets;
mod sliced;

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::{Dimension, Discretization, GatingStrategy};
use crate::tensor::{Real, Tensor};

pub use forward::{confidences, forward_depthwise, forward_gated, gate_tensor};
pub use presets::{branch_net, c3d_w_style, resnet_d, vgg_w};
pub use sliced::nested_conv_sliced;
pub use sliced::MacCount;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Aggregation {
    Concat,
    Sum,
}

/// Architecture description without parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    /// Per-sample input shape, `[c, h, w]` or `[d]`.
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv {
        out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Dense {
        out: usize,
    },
    Relu,
    MaxPool {
        size: usize,
        stride: usize,
    },
    Flatten,
    Gated(ModuleSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleSpec {
    pub body: BodySpec,
    pub strategy: GatingStrategy,
    pub min_active: usize,
    #[serde(default)]
    pub discretization: Discretization,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum BodySpec {
    /// One convolution whose output channels form `groups` equal components.
    ConvGroups {
        out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        groups: usize,
    },
    /// One dense layer whose output units form `groups` equal components.
    DenseGroups { out: usize, groups: usize },
    /// Parallel sub-networks fed the same input.
    Branches {
        aggregation: Aggregation,
        branches: Vec<Vec<LayerSpec>>,
    },
    /// Residual blocks applied in sequence, each `x + block(x)`.
    Residual { blocks: Vec<Vec<LayerSpec>> },
}

/// NCHW convolution, weights `[out, in, k, k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv<F: Real = f32> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
    pub stride: usize,
    pub pad: usize,
}

impl<F: Real> Conv<F> {
    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }

    fn out_shape(&self, s: &[usize]) -> Result<Vec<usize>> {
        let k = self.kernel();
        if s.len() != 3 || s[0] != self.in_channels() || s[1] + 2 * self.pad < k || s[2] + 2 * self.pad < k {
            return Err(Error::ShapeMismatch {
                op: "conv layer",
                left: s.to_vec(),
                right: self.weight.shape().to_vec(),
            });
        }
        let o = |d: usize| (d + 2 * self.pad - k) / self.stride + 1;
        Ok(vec![self.out_channels(), o(s[1]), o(s[2])])
    }

    fn macs(&self, out: &[usize], out_c: usize, in_c: usize) -> u64 {
        let k = self.kernel() as u64;
        (out_c as u64) * (in_c as u64) * k * k * (out[1] * out[2]) as u64
    }
}

/// Fully connected layer, weights `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense<F: Real = f32> {
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

impl<F: Real> Dense<F> {
    pub fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }

    fn out_shape(&self, s: &[usize]) -> Result<Vec<usize>> {
        if s != [self.in_features()] {
            return Err(Error::ShapeMismatch {
                op: "dense layer",
                left: s.to_vec(),
                right: self.weight.shape().to_vec(),
            });
        }
        Ok(vec![self.out_features()])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Layer<F: Real = f32> {
    Conv(Conv<F>),
    Dense(Dense<F>),
    Relu,
    MaxPool { size: usize, stride: usize },
    Flatten,
    Gated(TModule<F>),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Body<F: Real = f32> {
    ConvGroups {
        conv: Conv<F>,
        groups: usize,
    },
    DenseGroups {
        dense: Dense<F>,
        groups: usize,
    },
    Branches {
        aggregation: Aggregation,
        branches: Vec<Vec<Layer<F>>>,
    },
    Residual {
        blocks: Vec<Vec<Layer<F>>>,
    },
}

/// A gated module.
#[derive(Clone, Debug, PartialEq)]
pub struct TModule<F: Real = f32> {
    pub body: Body<F>,
    pub strategy: GatingStrategy,
    pub min_active: usize,
    pub discretization: Discretization,
}

impl<F: Real> TModule<F> {
    /// Number of gated components `n`.
    pub fn components(&self) -> usize {
        match &self.body {
            Body::ConvGroups { groups, .. } | Body::DenseGroups { groups, .. } => *groups,
            Body::Branches { branches, .. } => branches.len(),
            Body::Residual { blocks } => blocks.len(),
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn out_shape(&self, s: &[usize]) -> Result<Vec<usize>> {
        match &self.body {
            Body::ConvGroups { conv, .. } => conv.out_shape(s),
            Body::DenseGroups { dense, .. } => dense.out_shape(s),
            Body::Branches { aggregation, branches } => {
                let shapes = branches
                    .iter()
                    .map(|b| out_shape_of(b, s))
                    .collect::<Result<Vec<_>>>()?;
                let first = shapes[0].clone();
                match aggregation {
                    Aggregation::Sum => Ok(first),
                    Aggregation::Concat => {
                        let mut out = first;
                        out[0] = shapes.iter().map(|s| s[0]).sum();
                        Ok(out)
                    }
                }
            }
            Body::Residual { .. } => Ok(s.to_vec()),
        }
    }

    /// Multiply-accumulate cost of every component at full input width.
    pub fn component_macs(&self, s: &[usize]) -> Result<Vec<u64>> {
        let n = self.components();
        match &self.body {
            Body::ConvGroups { conv, .. } => {
                let out = conv.out_shape(s)?;
                let per = conv.out_channels() / n;
                Ok(vec![conv.macs(&out, per, conv.in_channels()); n])
            }
            Body::DenseGroups { dense, .. } => {
                let per = dense.out_features() / n;
                Ok(vec![(per * dense.in_features()) as u64; n])
            }
            Body::Branches { branches: parts, .. } | Body::Residual { blocks: parts } => {
                parts.iter().map(|p| plain_macs(p, s)).collect()
            }
        }
    }
}

/// Output shape of a layer for a per-sample input shape.
pub fn layer_out_shape<F: Real>(layer: &Layer<F>, s: &[usize]) -> Result<Vec<usize>> {
    match layer {
        Layer::Conv(c) => c.out_shape(s),
        Layer::Dense(d) => d.out_shape(s),
        Layer::Relu => Ok(s.to_vec()),
        Layer::MaxPool { size, stride } => {
            if s.len() != 3 || s[1] < *size || s[2] < *size || *size == 0 || *stride == 0 {
                return Err(Error::ShapeMismatch {
                    op: "max pool layer",
                    left: s.to_vec(),
                    right: vec![*size, *stride],
                });
            }
            Ok(vec![s[0], (s[1] - size) / stride + 1, (s[2] - size) / stride + 1])
        }
        Layer::Flatten => Ok(vec![s.iter().product()]),
        Layer::Gated(m) => m.out_shape(s),
    }
}

fn out_shape_of<F: Real>(layers: &[Layer<F>], s: &[usize]) -> Result<Vec<usize>> {
    layers.iter().try_fold(s.to_vec(), |s, l| layer_out_shape(l, &s))
}

/// Full cost of a sequence of ungated layers.
fn plain_macs<F: Real>(layers: &[Layer<F>], s: &[usize]) -> Result<u64> {
    let mut shape = s.to_vec();
    let mut total = 0;
    for l in layers {
        let out = layer_out_shape(l, &shape)?;
        total += match l {
            Layer::Conv(c) => c.macs(&out, c.out_channels(), c.in_channels()),
            Layer::Dense(d) => (d.in_features() * d.out_features()) as u64,
            Layer::Gated(_) => return Err(Error::InvalidConfig("gated module nested in a component".into())),
            _ => 0,
        };
        shape = out;
    }
    Ok(total)
}

/// A network of gated modules and ordinary layers.
#[derive(Clone, Debug, PartialEq)]
pub struct TNetwork<F: Real = f32> {
    input: Vec<usize>,
    layers: Vec<Layer<F>>,
}

impl<F: Real> TNetwork<F> {
    /// Builds a network with He-uniform weights and zero biases.
    pub fn build(spec: &ArchSpec, rng: &mut impl Rng) -> Result<Self> {
        let layers = build_layers(&spec.layers, &spec.input, false, rng)?.0;
        TNetwork::from_layers(spec.input.clone(), layers)
    }

    /// Wraps existing layers after checking that shapes line up.
    pub fn from_layers(input: Vec<usize>, layers: Vec<Layer<F>>) -> Result<Self> {
        if input.is_empty() || input.contains(&0) {
            return Err(Error::InvalidConfig(format!("bad input shape {input:?}")));
        }
        validate(&layers, &input, false)?;
        Ok(TNetwork { input, layers })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input
    }

    pub fn layers(&self) -> &[Layer<F>] {
        &self.layers
    }

    pub fn output_shape(&self) -> Vec<usize> {
        out_shape_of(&self.layers, &self.input).expect("validated at construction")
    }

    pub fn num_classes(&self) -> usize {
        self.output_shape().iter().product()
    }

    /// Gated modules in forward order.
    pub fn modules(&self) -> Vec<&TModule<F>> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Gated(m) => Some(m),
                _ => None,
            })
            .collect()
    }

    pub fn module_sizes(&self) -> Vec<usize> {
        self.modules().iter().map(|m| m.components()).collect()
    }

    /// Per-sample input shape of every gated module.
    pub fn module_inputs(&self) -> Vec<Vec<usize>> {
        let mut shape = self.input.clone();
        let mut out = Vec::new();
        for l in &self.layers {
            if let Layer::Gated(_) = l {
                out.push(shape.clone());
            }
            shape = layer_out_shape(l, &shape).expect("validated at construction");
        }
        out
    }

    /// Component cost weights of every gated module.
    pub fn module_weights(&self) -> Vec<Vec<f64>> {
        self.modules()
            .iter()
            .zip(self.module_inputs())
            .map(|(m, s)| {
                m.component_macs(&s)
                    .expect("validated at construction")
                    .into_iter()
                    .map(|c| c as f64)
                    .collect()
            })
            .collect()
    }

    pub fn spec(&self) -> ArchSpec {
        ArchSpec {
            input: self.input.clone(),
            layers: self.layers.iter().map(layer_spec).collect(),
        }
    }

    /// Parameters in a fixed depth-first order, weight before bias.
    pub fn params(&self) -> Vec<&Tensor<F>> {
        let mut out = Vec::new();
        for l in &self.layers {
            collect_params(l, &mut out);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<F>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            collect_params_mut(l, &mut out);
        }
        out
    }

    /// Names matching [`TNetwork::params`] one to one.
    pub fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            collect_names(l, &format!("l{i}"), &mut out);
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// The same network with every element converted to `G`.
    pub fn cast<G: Real>(&self) -> TNetwork<G> {
        TNetwork {
            input: self.input.clone(),
            layers: self.layers.iter().map(cast_layer).collect(),
        }
    }

    /// Ungated network with identical parameters: gated groups become plain
    /// layers. Only defined for networks whose modules are channel groups.
    pub fn ungated_twin(&self) -> Result<TNetwork<F>> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Gated(m) => match &m.body {
                    Body::ConvGroups { conv, .. } => Ok(Layer::Conv(conv.clone())),
                    Body::DenseGroups { dense, .. } => Ok(Layer::Dense(dense.clone())),
                    _ => Err(Error::InvalidConfig(
                        "no ungated twin for branch or residual modules".into(),
                    )),
                },
                other => Ok(other.clone()),
            })
            .collect::<Result<Vec<_>>>()?;
        TNetwork::from_layers(self.input.clone(), layers)
    }
}

fn validate<F: Real>(layers: &[Layer<F>], input: &[usize], in_component: bool) -> Result<Vec<usize>> {
    let mut shape = input.to_vec();
    for l in layers {
        if let Layer::Gated(m) = l {
            if in_component {
                return Err(Error::InvalidConfig("gated module nested in a component".into()));
            }
            validate_module(m, &shape)?;
        }
        shape = layer_out_shape(l, &shape)?;
    }
    Ok(shape)
}

fn validate_module<F: Real>(m: &TModule<F>, s: &[usize]) -> Result<()> {
    let n = m.components();
    let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
    if n == 0 {
        return bad("module has no components");
    }
    if m.min_active > n {
        return bad("min_active exceeds the component count");
    }
    let widthwise = m.strategy.dimension == Dimension::Widthwise;
    match &m.body {
        Body::ConvGroups { conv, groups } => {
            if conv.out_channels() % groups != 0 {
                return bad("output channels must split evenly into groups");
            }
            if m.min_active == 0 || !widthwise {
                return bad("channel-group modules are widthwise with at least one active group");
            }
        }
        Body::DenseGroups { dense, groups } => {
            if dense.out_features() % groups != 0 {
                return bad("output units must split evenly into groups");
            }
            if m.min_active == 0 || !widthwise {
                return bad("unit-group modules are widthwise with at least one active group");
            }
        }
        Body::Branches { aggregation, branches } => {
            if !widthwise {
                return bad("branch modules are widthwise");
            }
            let shapes = branches
                .iter()
                .map(|b| validate(b, s, true))
                .collect::<Result<Vec<_>>>()?;
            let ok = match aggregation {
                Aggregation::Sum => shapes.iter().all(|x| *x == shapes[0]),
                Aggregation::Concat => shapes
                    .iter()
                    .all(|x| x.len() == shapes[0].len() && x[1..] == shapes[0][1..]),
            };
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "branch aggregation",
                    left: shapes[0].clone(),
                    right: shapes.last().cloned().unwrap_or_default(),
                });
            }
        }
        Body::Residual { blocks } => {
            if widthwise {
                return bad("residual modules are depthwise");
            }
            for b in blocks {
                let out = validate(b, s, true)?;
                if out != s {
                    return Err(Error::ShapeMismatch {
                        op: "residual block",
                        left: s.to_vec(),
                        right: out,
                    });
                }
            }
        }
    }
    Ok(())
}

fn he_uniform<F: Real>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<F> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    Tensor::from_fn(shape, |_| F::from_f64_lossy(dist.sample(rng)))
}

fn build_conv<F: Real>(
    s: &[usize],
    out: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    rng: &mut impl Rng,
) -> Result<Conv<F>> {
    if s.len() != 3 || out == 0 || kernel == 0 || stride == 0 {
        return Err(Error::InvalidConfig(format!("conv layer cannot take input {s:?}")));
    }
    let fan_in = s[0] * kernel * kernel;
    Ok(Conv {
        weight: he_uniform(&[out, s[0], kernel, kernel], fan_in, rng),
        bias: Tensor::zeros(&[out]),
        stride,
        pad,
    })
}

fn build_dense<F: Real>(s: &[usize], out: usize, rng: &mut impl Rng) -> Result<Dense<F>> {
    if s.len() != 1 || out == 0 {
        return Err(Error::InvalidConfig(format!("dense layer cannot take input {s:?}")));
    }
    Ok(Dense {
        weight: he_uniform(&[s[0], out], s[0], rng),
        bias: Tensor::zeros(&[out]),
    })
}

fn build_layers<F: Real>(
    specs: &[LayerSpec],
    input: &[usize],
    in_component: bool,
    rng: &mut impl Rng,
) -> Result<(Vec<Layer<F>>, Vec<usize>)> {
    let mut shape = input.to_vec();
    let mut layers = Vec::with_capacity(specs.len());
    for spec in specs {
        let layer = match spec {
            LayerSpec::Conv {
                out,
                kernel,
                stride,
                pad,
            } => Layer::Conv(build_conv(&shape, *out, *kernel, *stride, *pad, rng)?),
            LayerSpec::Dense { out } => Layer::Dense(build_dense(&shape, *out, rng)?),
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::MaxPool { size, stride } => Layer::MaxPool {
                size: *size,
                stride: *stride,
            },
            LayerSpec::Flatten => Layer::Flatten,
            LayerSpec::Gated(m) => {
                if in_component {
                    return Err(Error::InvalidConfig("gated module nested in a component".into()));
                }
                let body = match &m.body {
                    BodySpec::ConvGroups {
                        out,
                        kernel,
                        stride,
                        pad,
                        groups,
                    } => Body::ConvGroups {
                        conv: build_conv(&shape, *out, *kernel, *stride, *pad, rng)?,
                        groups: *groups,
                    },
                    BodySpec::DenseGroups { out, groups } => Body::DenseGroups {
                        dense: build_dense(&shape, *out, rng)?,
                        groups: *groups,
                    },
                    BodySpec::Branches { aggregation, branches } => Body::Branches {
                        aggregation: *aggregation,
                        branches: branches
                            .iter()
                            .map(|b| build_layers(b, &shape, true, rng).map(|r| r.0))
                            .collect::<Result<_>>()?,
                    },
                    BodySpec::Residual { blocks } => Body::Residual {
                        blocks: blocks
                            .iter()
                            .map(|b| build_layers(b, &shape, true, rng).map(|r| r.0))
                            .collect::<Result<_>>()?,
                    },
                };
                Layer::Gated(TModule {
                    body,
                    strategy: m.strategy,
                    min_active: m.min_active,
                    discretization: m.discretization,
                })
            }
        };
        shape = layer_out_shape(&layer, &shape)?;
        layers.push(layer);
    }
    Ok((layers, shape))
}

fn conv_spec<F: Real>(c: &Conv<F>) -> (usize, usize, usize, usize) {
    (c.out_channels(), c.kernel(), c.stride, c.pad)
}

fn layer_spec<F: Real>(l: &Layer<F>) -> LayerSpec {
    match l {
        Layer::Conv(c) => {
            let (out, kernel, stride, pad) = conv_spec(c);
            LayerSpec::Conv {
                out,
                kernel,
                stride,
                pad,
            }
        }
        Layer::Dense(d) => LayerSpec::Dense { out: d.out_features() },
        Layer::Relu => LayerSpec::Relu,
        Layer::MaxPool { size, stride } => LayerSpec::MaxPool {
            size: *size,
            stride: *stride,
        },
        Layer::Flatten => LayerSpec::Flatten,
        Layer::Gated(m) => {
            let body = match &m.body {
                Body::ConvGroups { conv, groups } => {
                    let (out, kernel, stride, pad) = conv_spec(conv);
                    BodySpec::ConvGroups {
                        out,
                        kernel,
                        stride,
                        pad,
                        groups: *groups,
                    }
                }
                Body::DenseGroups { dense, groups } => BodySpec::DenseGroups {
                    out: dense.out_features(),
                    groups: *groups,
                },
                Body::Branches { aggregation, branches } => BodySpec::Branches {
                    aggregation: *aggregation,
                    branches: branches.iter().map(|b| b.iter().map(layer_spec).collect()).collect(),
                },
                Body::Residual { blocks } => BodySpec::Residual {
                    blocks: blocks.iter().map(|b| b.iter().map(layer_spec).collect()).collect(),
                },
            };
            LayerSpec::Gated(ModuleSpec {
                body,
                strategy: m.strategy,
                min_active: m.min_active,
                discretization: m.discretization,
            })
        }
    }
}

fn collect_params<'a, F: Real>(l: &'a Layer<F>, out: &mut Vec<&'a Tensor<F>>) {
    match l {
        Layer::Conv(c) => out.extend([&c.weight, &c.bias]),
        Layer::Dense(d) => out.extend([&d.weight, &d.bias]),
        Layer::Gated(m) => match &m.body {
            Body::ConvGroups { conv, .. } => out.extend([&conv.weight, &conv.bias]),
            Body::DenseGroups { dense, .. } => out.extend([&dense.weight, &dense.bias]),
            Body::Branches { branches: parts, .. } | Body::Residual { blocks: parts } => {
                for l in parts.iter().flatten() {
                    collect_params(l, out);
                }
            }
        },
        _ => {}
    }
}

fn collect_params_mut<'a, F: Real>(l: &'a mut Layer<F>, out: &mut Vec<&'a mut Tensor<F>>) {
    match l {
        Layer::Conv(c) => out.extend([&mut c.weight, &mut c.bias]),
        Layer::Dense(d) => out.extend([&mut d.weight, &mut d.bias]),
        Layer::Gated(m) => match &mut m.body {
            Body::ConvGroups { conv, .. } => out.extend([&mut conv.weight, &mut conv.bias]),
            Body::DenseGroups { dense, .. } => out.extend([&mut dense.weight, &mut dense.bias]),
            Body::Branches { branches: parts, .. } | Body::Residual { blocks: parts } => {
                for l in parts.iter_mut().flatten() {
                    collect_params_mut(l, out);
                }
            }
        },
        _ => {}
    }
}

fn collect_names<F: Real>(l: &Layer<F>, prefix: &str, out: &mut Vec<String>) {
    let pair = |out: &mut Vec<String>| {
        out.push(format!("{prefix}.weight"));
        out.push(format!("{prefix}.bias"));
    };
    match l {
        Layer::Conv(_) | Layer::Dense(_) => pair(out),
        Layer::Gated(m) => match &m.body {
            Body::ConvGroups { .. } | Body::DenseGroups { .. } => pair(out),
            Body::Branches { branches: parts, .. } | Body::Residual { blocks: parts } => {
                for (j, part) in parts.iter().enumerate() {
                    for (k, l) in part.iter().enumerate() {
                        collect_names(l, &format!("{prefix}.c{j}.l{k}"), out);
                    }
                }
            }
        },
        _ => {}
    }
}

fn cast_conv<F: Real, G: Real>(c: &Conv<F>) -> Conv<G> {
    Conv {
        weight: c.weight.cast(),
        bias: c.bias.cast(),
        stride: c.stride,
        pad: c.pad,
    }
}

fn cast_dense<F: Real, G: Real>(d: &Dense<F>) -> Dense<G> {
    Dense {
        weight: d.weight.cast(),
        bias: d.bias.cast(),
    }
}

fn cast_layer<F: Real, G: Real>(l: &Layer<F>) -> Layer<G> {
    let cast_parts = |parts: &Vec<Vec<Layer<F>>>| -> Vec<Vec<Layer<G>>> {
        parts.iter().map(|p| p.iter().map(cast_layer).collect()).collect()
    };
    match l {
        Layer::Conv(c) => Layer::Conv(cast_conv(c)),
        Layer::Dense(d) => Layer::Dense(cast_dense(d)),
        Layer::Relu => Layer::Relu,
        Layer::MaxPool { size, stride } => Layer::MaxPool {
            size: *size,
            stride: *stride,
        },
        Layer::Flatten => Layer::Flatten,
        Layer::Gated(m) => Layer::Gated(TModule {
            body: match &m.body {
                Body::ConvGroups { conv, groups } => Body::ConvGroups {
                    conv: cast_conv(conv),
                    groups: *groups,
                },
                Body::DenseGroups { dense, groups } => Body::DenseGroups {
                    dense: cast_dense(dense),
                    groups: *groups,
                },
                Body::Branches { aggregation, branches } => Body::Branches {
                    aggregation: *aggregation,
                    branches: cast_parts(branches),
                },
                Body::Residual { blocks } => Body::Residual {
                    blocks: cast_parts(blocks),
                },
            },
            strategy: m.strategy,
            min_active: m.min_active,
            discretization: m.discretization,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gating::Ordering;
    use crate::rng::seeded;

    #[test]
    fn vgg_preset_shapes_and_size() {
        let spec = vgg_w(&[1, 8, 8], 16, 8, 10, Ordering::Nested);
        let net: TNetwork = TNetwork::build(&spec, &mut seeded(0)).unwrap();
        assert_eq!(net.output_shape(), vec![10]);
        assert_eq!(net.module_sizes(), vec![8, 8, 8, 8]);
        assert_eq!(net.params().len(), net.param_names().len());
        assert_eq!(net.spec(), spec);
    }

    #[test]
    fn biases_start_at_zero() {
        let net: TNetwork = TNetwork::build(&vgg_w(&[1, 8, 8], 16, 8, 10, Ordering::Nested), &mut seeded(1)).unwrap();
        for (name, p) in net.param_names().iter().zip(net.params()) {
            if name.ends_with("bias") {
                assert!(p.data().iter().all(|&v| v == 0.0));
            } else {
                assert!(p.data().iter().any(|&v| v != 0.0));
            }
        }
    }

    #[test]
    fn uneven_groups_rejected() {
        let spec = ArchSpec {
            input: vec![1, 4, 4],
            layers: vec![LayerSpec::Gated(ModuleSpec {
                body: BodySpec::ConvGroups {
                    out: 6,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                    groups: 4,
                },
                strategy: GatingStrategy::WIDTH_NESTED,
                min_active: 1,
                discretization: Discretization::Floor,
            })],
        };
        assert!(TNetwork::<f32>::build(&spec, &mut seeded(0)).is_err());
    }

    #[test]
    fn residual_blocks_must_preserve_shape() {
        let spec = ArchSpec {
            input: vec![2, 4, 4],
            layers: vec![LayerSpec::Gated(ModuleSpec {
                body: BodySpec::Residual {
                    blocks: vec![vec![LayerSpec::Conv {
                        out: 3,
                        kernel: 3,
                        stride: 1,
                        pad: 1,
                    }]],
                },
                strategy: GatingStrategy::DEPTH_NESTED,
                min_active: 0,
                discretization: Discretization::Floor,
            })],
        };
        assert!(TNetwork::<f32>::build(&spec, &mut seeded(0)).is_err());
    }

    #[test]
    fn module_weights_are_component_macs() {
        let net: TNetwork = TNetwork::build(&vgg_w(&[1, 8, 8], 16, 8, 10, Ordering::Nested), &mut seeded(0)).unwrap();
        let w = net.module_weights();
        // first layer: 2 channels per group, 1 input channel, 3x3 kernel, 8x8 output
        assert_eq!(w[0], vec![2.0 * 9.0 * 64.0; 8]);
    }

    #[test]
    fn cast_round_trip() {
        let net: TNetwork = TNetwork::build(&resnet_d(&[1, 8, 8], 4, &[2, 2], 10), &mut seeded(3)).unwrap();
        let back: TNetwork<f32> = net.cast::<f64>().cast();
        assert_eq!(back, net);
    }
}
