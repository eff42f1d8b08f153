//! Masked execution on the autodiff tape, plus gate drawing.

use rand::Rng;

use super::{Aggregation, Body, Layer, TModule, TNetwork};
use crate::error::{Error, Result};
use crate::gating::{
    independent_gate_with, nested_depthwise_plan, nested_gate_with, Dimension, GateVector, Ordering, Utilization,
};
use crate::tensor::{kernels, Graph, Real, Tensor, Var};

/// `[batch, n]` tensor repeating one gate vector for every example.
pub fn gate_tensor<F: Real>(g: &GateVector, batch: usize) -> Tensor<F> {
    let row: Vec<F> = g.as_f32().iter().map(|&v| F::from_f32(v).unwrap()).collect();
    Tensor::from_fn(&[batch, g.len()], |i| row[i % g.len()])
}

fn layer_graph<F: Real>(
    layer: &Layer<F>,
    g: &mut Graph<F>,
    x: Var,
    gate: Option<Var>,
    params: &mut Vec<Var>,
    trainable: bool,
) -> Result<Var> {
    let conv = |g: &mut Graph<F>, c: &super::Conv<F>, params: &mut Vec<Var>| {
        let w = g.param(&c.weight, trainable);
        let b = g.param(&c.bias, trainable);
        params.extend([w, b]);
        g.conv2d(x, w, Some(b), c.stride, c.pad)
    };
    let dense = |g: &mut Graph<F>, d: &super::Dense<F>, params: &mut Vec<Var>| {
        let w = g.param(&d.weight, trainable);
        let b = g.param(&d.bias, trainable);
        params.extend([w, b]);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    };
    match layer {
        Layer::Conv(c) => conv(g, c, params),
        Layer::Dense(d) => dense(g, d, params),
        Layer::Relu => Ok(g.relu(x)),
        Layer::MaxPool { size, stride } => g.max_pool2d(x, *size, *stride),
        Layer::Flatten => g.flatten(x),
        Layer::Gated(m) => {
            let gate = gate.expect("gated layer needs a gate");
            match &m.body {
                Body::ConvGroups { conv: c, .. } => {
                    let y = conv(g, c, params)?;
                    g.group_gate(y, gate)
                }
                Body::DenseGroups { dense: d, .. } => {
                    let y = dense(g, d, params)?;
                    g.group_gate(y, gate)
                }
                Body::Branches { aggregation, branches } => {
                    let mut outs = Vec::with_capacity(branches.len());
                    for (j, branch) in branches.iter().enumerate() {
                        let y = plain_graph(branch, g, x, params, trainable)?;
                        let gj = g.slice(gate, 1, j, j + 1)?;
                        outs.push(g.group_gate(y, gj)?);
                    }
                    match aggregation {
                        Aggregation::Concat => g.concat(&outs, 1),
                        Aggregation::Sum => {
                            let mut acc = outs[0];
                            for &o in &outs[1..] {
                                acc = g.add(acc, o)?;
                            }
                            Ok(acc)
                        }
                    }
                }
                Body::Residual { blocks } => {
                    let mut cur = x;
                    for (j, block) in blocks.iter().enumerate() {
                        let y = plain_graph(block, g, cur, params, trainable)?;
                        let gj = g.slice(gate, 1, j, j + 1)?;
                        let y = g.group_gate(y, gj)?;
                        cur = g.add(cur, y)?;
                    }
                    Ok(cur)
                }
            }
        }
    }
}

fn plain_graph<F: Real>(
    layers: &[Layer<F>],
    g: &mut Graph<F>,
    x: Var,
    params: &mut Vec<Var>,
    trainable: bool,
) -> Result<Var> {
    let mut cur = x;
    for l in layers {
        cur = layer_graph(l, g, cur, None, params, trainable)?;
    }
    Ok(cur)
}

/// Forward through one module with a single gate vector shared by the batch.
pub fn forward_gated<F: Real>(m: &TModule<F>, x: &Tensor<F>, gate: &GateVector) -> Result<Tensor<F>> {
    check_gate(0, m, gate)?;
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let gv = g.constant(gate_tensor(gate, x.shape()[0]));
    let layer = Layer::Gated(m.clone());
    let y = layer_graph(&layer, &mut g, xv, Some(gv), &mut Vec::new(), false)?;
    Ok(g.value(y).clone())
}

/// One residual block with its skip path: `x + block(x)` when on, `x` when off.
pub fn forward_depthwise<F: Real>(block: &[Layer<F>], x: &Tensor<F>, on: bool) -> Result<Tensor<F>> {
    if !on {
        return Ok(x.clone());
    }
    let y = super::sliced::plain_forward(block, x)?;
    if y.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            op: "residual block",
            left: x.shape().to_vec(),
            right: y.shape().to_vec(),
        });
    }
    let mut out = x.clone();
    for (o, v) in out.data_mut().iter_mut().zip(y.data()) {
        *o += *v;
    }
    Ok(out)
}

fn check_gate<F: Real>(module: usize, m: &TModule<F>, gate: &GateVector) -> Result<()> {
    if gate.len() != m.components() {
        return Err(Error::GateMismatch {
            module,
            expected: m.components(),
            got: gate.len(),
        });
    }
    if gate.popcount() < m.min_active {
        return Err(Error::TooFewActive {
            module,
            active: gate.popcount(),
            min_active: m.min_active,
        });
    }
    Ok(())
}

impl<F: Real> TNetwork<F> {
    /// Checks gate count, lengths and per-module minimum activity.
    pub fn check_gates(&self, gates: &[GateVector]) -> Result<()> {
        let modules = self.modules();
        if gates.len() != modules.len() {
            return Err(Error::InvalidConfig(format!(
                "{} gate vectors for {} gated modules",
                gates.len(),
                modules.len()
            )));
        }
        for (i, (m, g)) in modules.iter().zip(gates).enumerate() {
            check_gate(i, m, g)?;
        }
        Ok(())
    }

    /// Masked forward on a tape. `gates[i]` is a `[batch, n_i]` variable for
    /// gated module `i`, so gates may differ per example and may be soft.
    /// Returns the logits and the parameter variables in [`TNetwork::params`] order.
    pub fn forward_graph(&self, g: &mut Graph<F>, x: Var, gates: &[Var], trainable: bool) -> Result<(Var, Vec<Var>)> {
        let sizes = self.module_sizes();
        if gates.len() != sizes.len() {
            return Err(Error::InvalidConfig(format!(
                "{} gate variables for {} gated modules",
                gates.len(),
                sizes.len()
            )));
        }
        let batch = g.shape(x)[0];
        for (i, (&gv, &n)) in gates.iter().zip(&sizes).enumerate() {
            if g.shape(gv) != [batch, n] {
                return Err(Error::GateMismatch {
                    module: i,
                    expected: n,
                    got: g.shape(gv).get(1).copied().unwrap_or(0),
                });
            }
        }
        let mut params = Vec::new();
        let mut cur = x;
        let mut next_gate = gates.iter();
        for l in &self.layers {
            let gate = match l {
                Layer::Gated(_) => next_gate.next().copied(),
                _ => None,
            };
            cur = layer_graph(l, g, cur, gate, &mut params, trainable)?;
        }
        Ok((cur, params))
    }

    /// Adds one hard gate vector per module to the tape as constants.
    pub fn gate_constants(&self, g: &mut Graph<F>, gates: &[GateVector], batch: usize) -> Vec<Var> {
        gates.iter().map(|gv| g.constant(gate_tensor(gv, batch))).collect()
    }

    /// Masked forward without gradients.
    pub fn forward(&self, x: &Tensor<F>, gates: &[GateVector]) -> Result<Tensor<F>> {
        self.check_gates(gates)?;
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let gv = self.gate_constants(&mut g, gates, x.shape()[0]);
        let (y, _) = self.forward_graph(&mut g, xv, &gv, false)?;
        Ok(g.value(y).clone())
    }

    pub fn full_gates(&self) -> Vec<GateVector> {
        self.modules()
            .iter()
            .zip(self.module_weights())
            .map(|(m, w)| {
                GateVector::all_on(m.components())
                    .reweighted(w)
                    .expect("one weight per component")
            })
            .collect()
    }

    /// Draws a gate vector per module at utilization `u` following each
    /// module's strategy. Nested depthwise modules share one plan.
    pub fn draw_gates(&self, u: Utilization, rng: &mut impl Rng) -> Result<Vec<GateVector>> {
        let modules = self.modules();
        let weights = self.module_weights();
        let depth_nested: Vec<usize> = modules
            .iter()
            .enumerate()
            .filter(|(_, m)| m.strategy.dimension == Dimension::Depthwise && m.strategy.ordering == Ordering::Nested)
            .map(|(i, _)| i)
            .collect();
        let mut plan = if depth_nested.is_empty() {
            Vec::new()
        } else {
            let sizes: Vec<usize> = depth_nested.iter().map(|&i| modules[i].components()).collect();
            let floor = depth_nested.iter().map(|&i| modules[i].min_active).min().unwrap_or(0);
            nested_depthwise_plan(&sizes, u, floor)?
        }
        .into_iter();
        let mut out = Vec::with_capacity(modules.len());
        for (i, m) in modules.iter().enumerate() {
            let n = m.components();
            let mut gate = match (m.strategy.dimension, m.strategy.ordering) {
                (Dimension::Depthwise, Ordering::Nested) => plan.next().expect("one plan entry per module"),
                (Dimension::Widthwise, Ordering::Nested) => nested_gate_with(n, u, m.discretization),
                (_, Ordering::Independent) => independent_gate_with(n, u, m.discretization, rng),
                (_, Ordering::Learned) => {
                    return Err(Error::InvalidConfig(format!(
                        "module {i} uses learned gating; its gates come from a gate policy"
                    )))
                }
            };
            if gate.popcount() < m.min_active {
                if m.strategy.ordering == Ordering::Nested {
                    gate.ensure_min_active(m.min_active);
                } else {
                    let mut bits = gate.bits().to_vec();
                    while bits.iter().filter(|&&b| b).count() < m.min_active {
                        let off: Vec<usize> = (0..n).filter(|&j| !bits[j]).collect();
                        bits[off[rng.gen_range(0..off.len())]] = true;
                    }
                    gate = GateVector::new(bits)?;
                }
            }
            out.push(gate.reweighted(weights[i].clone())?);
        }
        Ok(out)
    }

    /// Draws gates at `u` and runs the masked forward.
    pub fn forward_network(
        &self,
        x: &Tensor<F>,
        u: Utilization,
        rng: &mut impl Rng,
    ) -> Result<(Tensor<F>, Vec<GateVector>)> {
        let gates = self.draw_gates(u, rng)?;
        let y = self.forward(x, &gates)?;
        Ok((y, gates))
    }

    /// Predicted class of every row.
    pub fn predict(&self, x: &Tensor<F>, gates: &[GateVector]) -> Result<Vec<usize>> {
        Ok(self.forward(x, gates)?.argmax_rows())
    }
}

/// Softmax probability of the argmax class, per row.
pub fn confidences<F: Real>(logits: &Tensor<F>) -> Vec<f64> {
    let cols = logits.shape()[1];
    logits
        .data()
        .chunks(cols)
        .map(|row| {
            let mut r = row.to_vec();
            kernels::softmax_in_place(&mut r);
            r.iter().fold(F::zero(), |a, &b| a.max(b)).to_f64_lossy()
        })
        .collect()
}
