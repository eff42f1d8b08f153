//! Sliced inference: only active components are computed, on plain kernels.
//!
//! Nested gates make the active channels of a layer a contiguous prefix, so
//! the layer runs on a prefix of its weights. Without input-slice propagation
//! the output is zero-padded back to full width after every gated layer. With
//! propagation the truncated tensor is carried forward and the next layer also
//! slices its input dimension; it is padded back before residual or branch
//! modules and before the network output.

use super::{layer_out_shape, Aggregation, Body, Layer, TNetwork};
use crate::error::{Error, Result};
use crate::gating::{active_count, Discretization, GateVector, Utilization};
use crate::tensor::{kernels, Real, Tensor};

/// Batch tensor whose axis 1 may hold only a prefix of `full` entries.
struct Carry<F: Real> {
    t: Tensor<F>,
    full: usize,
}

impl<F: Real> Carry<F> {
    fn full(t: Tensor<F>) -> Self {
        let full = t.shape()[1];
        Carry { t, full }
    }

    fn active(&self) -> usize {
        self.t.shape()[1]
    }

    fn padded(self) -> Result<Tensor<F>> {
        let a = self.active();
        if a == self.full {
            Ok(self.t)
        } else {
            self.t.pad_axis(1, 0, self.full - a)
        }
    }
}

fn prefix<F: Real>(t: &Tensor<F>, axis: usize, len: usize) -> Result<Tensor<F>> {
    if t.shape()[axis] == len {
        Ok(t.clone())
    } else {
        t.slice_axis(axis, 0, len)
    }
}

fn dense_forward<F: Real>(x: &Tensor<F>, w: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let y = kernels::matmul(x, w)?;
    kernels::add_channel_bias(&y, b)
}

/// Ungated layers on a full-width input.
pub(crate) fn plain_forward<F: Real>(layers: &[Layer<F>], x: &Tensor<F>) -> Result<Tensor<F>> {
    let mut cur = x.clone();
    for l in layers {
        cur = match l {
            Layer::Conv(c) => kernels::conv2d(&cur, &c.weight, Some(&c.bias), c.stride, c.pad)?,
            Layer::Dense(d) => dense_forward(&cur, &d.weight, &d.bias)?,
            Layer::Relu => kernels::relu(&cur),
            Layer::MaxPool { size, stride } => kernels::max_pool2d(&cur, *size, *stride)?.0,
            Layer::Flatten => {
                let b = cur.shape()[0];
                cur.reshape(&[b, cur.numel() / b])?
            }
            Layer::Gated(_) => return Err(Error::InvalidConfig("gated module nested in a component".into())),
        };
    }
    Ok(cur)
}

fn nested_prefix(module: usize, gate: &GateVector) -> Result<usize> {
    if !gate.is_nested() {
        return Err(Error::NotNested { module });
    }
    Ok(gate.popcount())
}

/// Multiply-accumulates (active, full) for the given gates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacCount {
    pub active: u64,
    pub full: u64,
}

impl MacCount {
    pub fn ratio(&self) -> f64 {
        if self.full == 0 {
            1.0
        } else {
            self.active as f64 / self.full as f64
        }
    }
}

impl<F: Real> TNetwork<F> {
    /// Sliced forward. Channel-group modules need nested gates; branch and
    /// residual modules skip whichever components are off.
    pub fn forward_sliced(&self, x: &Tensor<F>, gates: &[GateVector], propagate: bool) -> Result<Tensor<F>> {
        self.check_gates(gates)?;
        let mut cur = Carry::full(x.clone());
        let mut gi = 0;
        for l in &self.layers {
            cur = match l {
                Layer::Conv(c) => {
                    let w = prefix(&c.weight, 1, cur.active())?;
                    Carry::full(kernels::conv2d(&cur.t, &w, Some(&c.bias), c.stride, c.pad)?)
                }
                Layer::Dense(d) => {
                    let w = prefix(&d.weight, 0, cur.active())?;
                    Carry::full(dense_forward(&cur.t, &w, &d.bias)?)
                }
                Layer::Relu => Carry {
                    t: kernels::relu(&cur.t),
                    full: cur.full,
                },
                Layer::MaxPool { size, stride } => Carry {
                    t: kernels::max_pool2d(&cur.t, *size, *stride)?.0,
                    full: cur.full,
                },
                Layer::Flatten => {
                    let s = cur.t.shape().to_vec();
                    let inner: usize = s[2..].iter().product();
                    Carry {
                        t: cur.t.reshape(&[s[0], s[1] * inner])?,
                        full: cur.full * inner,
                    }
                }
                Layer::Gated(m) => {
                    let gate = &gates[gi];
                    gi += 1;
                    let n = m.components();
                    match &m.body {
                        Body::ConvGroups { conv: c, .. } => {
                            let o = c.out_channels();
                            let k = nested_prefix(gi - 1, gate)? * (o / n);
                            let w = prefix(&prefix(&c.weight, 0, k)?, 1, cur.active())?;
                            let b = prefix(&c.bias, 0, k)?;
                            let y = Carry {
                                t: kernels::conv2d(&cur.t, &w, Some(&b), c.stride, c.pad)?,
                                full: o,
                            };
                            if propagate {
                                y
                            } else {
                                Carry::full(y.padded()?)
                            }
                        }
                        Body::DenseGroups { dense: d, .. } => {
                            let o = d.out_features();
                            let k = nested_prefix(gi - 1, gate)? * (o / n);
                            let w = prefix(&prefix(&d.weight, 1, k)?, 0, cur.active())?;
                            let b = prefix(&d.bias, 0, k)?;
                            let y = Carry {
                                t: dense_forward(&cur.t, &w, &b)?,
                                full: o,
                            };
                            if propagate {
                                y
                            } else {
                                Carry::full(y.padded()?)
                            }
                        }
                        Body::Branches { aggregation, branches } => {
                            let x = cur.padded()?;
                            let sample = &x.shape()[1..];
                            let mut outs = Vec::with_capacity(n);
                            for (j, branch) in branches.iter().enumerate() {
                                if gate.is_on(j) {
                                    outs.push(Some(plain_forward(branch, &x)?));
                                } else {
                                    outs.push(None);
                                }
                            }
                            let zeros = |branch: &[Layer<F>]| -> Result<Tensor<F>> {
                                let mut s = super::out_shape_of(branch, sample)?;
                                s.insert(0, x.shape()[0]);
                                Ok(Tensor::zeros(&s))
                            };
                            let y = match aggregation {
                                Aggregation::Concat => {
                                    let parts = outs
                                        .into_iter()
                                        .zip(branches)
                                        .map(|(o, b)| o.map_or_else(|| zeros(b), Ok))
                                        .collect::<Result<Vec<_>>>()?;
                                    kernels::concat(&parts.iter().collect::<Vec<_>>(), 1)?
                                }
                                Aggregation::Sum => {
                                    let mut acc: Option<Tensor<F>> = None;
                                    for o in outs.into_iter().flatten() {
                                        acc = Some(match acc {
                                            None => o,
                                            Some(mut a) => {
                                                a.data_mut().iter_mut().zip(o.data()).for_each(|(p, q)| *p += *q);
                                                a
                                            }
                                        });
                                    }
                                    match acc {
                                        Some(a) => a,
                                        None => zeros(&branches[0])?,
                                    }
                                }
                            };
                            Carry::full(y)
                        }
                        Body::Residual { blocks } => {
                            let mut x = cur.padded()?;
                            for (j, block) in blocks.iter().enumerate() {
                                if gate.is_on(j) {
                                    let y = plain_forward(block, &x)?;
                                    x.data_mut().iter_mut().zip(y.data()).for_each(|(p, q)| *p += *q);
                                }
                            }
                            Carry::full(x)
                        }
                    }
                }
            };
        }
        cur.padded()
    }

    /// Analytic multiply-accumulate count of [`TNetwork::forward_sliced`]
    /// (active) and of the ungated network (full). Data path only.
    pub fn mac_count(&self, gates: &[GateVector], propagate: bool) -> Result<MacCount> {
        self.check_gates(gates)?;
        let mut shape = self.input.clone();
        // entries of axis 0 of the per-sample shape actually computed
        let mut active = shape[0];
        let mut count = MacCount::default();
        let mut gi = 0;
        for l in &self.layers {
            let out = layer_out_shape(l, &shape)?;
            match l {
                Layer::Conv(c) => {
                    count.active += c.macs(&out, c.out_channels(), active);
                    count.full += c.macs(&out, c.out_channels(), c.in_channels());
                    active = out[0];
                }
                Layer::Dense(d) => {
                    count.active += (active * d.out_features()) as u64;
                    count.full += (d.in_features() * d.out_features()) as u64;
                    active = out[0];
                }
                Layer::Flatten => active *= shape[1..].iter().product::<usize>(),
                Layer::Relu | Layer::MaxPool { .. } => {}
                Layer::Gated(m) => {
                    let gate = &gates[gi];
                    gi += 1;
                    let n = m.components();
                    match &m.body {
                        Body::ConvGroups { conv: c, .. } => {
                            let k = gate.popcount() * (c.out_channels() / n);
                            count.active += c.macs(&out, k, active);
                            count.full += c.macs(&out, c.out_channels(), c.in_channels());
                            active = if propagate { k } else { out[0] };
                        }
                        Body::DenseGroups { dense: d, .. } => {
                            let k = gate.popcount() * (d.out_features() / n);
                            count.active += (k * active) as u64;
                            count.full += (d.out_features() * d.in_features()) as u64;
                            active = if propagate { k } else { out[0] };
                        }
                        Body::Branches { .. } | Body::Residual { .. } => {
                            let costs = m.component_macs(&shape)?;
                            for (j, c) in costs.iter().enumerate() {
                                count.full += c;
                                if gate.is_on(j) {
                                    count.active += c;
                                }
                            }
                            active = out[0];
                        }
                    }
                }
            }
            shape = out;
        }
        Ok(count)
    }
}

/// One convolution computing only its first `⌈u·C⌉` (ceiling mode) or
/// `min(C, ⌊u·(C+1)⌋)` (floor mode) output channels, zero-padded to `C`.
#[allow(clippy::too_many_arguments)]
pub fn nested_conv_sliced<F: Real>(
    x: &Tensor<F>,
    u: Utilization,
    weight: &Tensor<F>,
    bias: &Tensor<F>,
    stride: usize,
    pad: usize,
    mode: Discretization,
    min_active: usize,
) -> Result<Tensor<F>> {
    let c = weight.shape()[0];
    let k = active_count(c, u, mode);
    if k < min_active {
        return Err(Error::TooFewActive {
            module: 0,
            active: k,
            min_active,
        });
    }
    if k == 0 {
        let (s, kh) = (x.shape(), weight.shape()[2]);
        if s.len() != 4 || s[2] + 2 * pad < kh || s[3] + 2 * pad < kh || stride == 0 {
            return Err(Error::ShapeMismatch {
                op: "nested_conv_sliced",
                left: s.to_vec(),
                right: weight.shape().to_vec(),
            });
        }
        let o = |d: usize| (d + 2 * pad - kh) / stride + 1;
        return Ok(Tensor::zeros(&[s[0], c, o(s[2]), o(s[3])]));
    }
    let y = kernels::conv2d(x, &prefix(weight, 0, k)?, Some(&prefix(bias, 0, k)?), stride, pad)?;
    if k == c {
        Ok(y)
    } else {
        y.pad_axis(1, 0, c - k)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gating::{GatingStrategy, Ordering};
    use crate::rng::seeded;
    use crate::tensor::{forward_macs, reset_forward_macs};
    use crate::tmodule::{c3d_w_style, resnet_d, vgg_w, ArchSpec, BodySpec, LayerSpec, ModuleSpec};
    use rand::Rng;

    fn rand_input(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = seeded(seed);
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn max_abs(a: &Tensor, b: &Tensor) -> f32 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f32::max)
    }

    fn grid() -> Vec<Utilization> {
        (0..=10).map(|i| Utilization::new(i as f64 / 10.0).unwrap()).collect()
    }

    #[test]
    fn single_conv_mac_example() {
        let spec = ArchSpec {
            input: vec![3, 10, 10],
            layers: vec![LayerSpec::Gated(ModuleSpec {
                body: BodySpec::ConvGroups {
                    out: 8,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                    groups: 8,
                },
                strategy: GatingStrategy::WIDTH_NESTED,
                min_active: 1,
                discretization: Discretization::Floor,
            })],
        };
        let net: TNetwork = TNetwork::build(&spec, &mut seeded(0)).unwrap();
        let gates = net.draw_gates(Utilization::new(0.5).unwrap(), &mut seeded(0)).unwrap();
        let macs = net.mac_count(&gates, false).unwrap();
        assert_eq!(
            macs,
            MacCount {
                active: 10800,
                full: 21600
            }
        );
        let full = net.mac_count(&net.full_gates(), false).unwrap();
        assert_eq!(full.active, full.full);
    }

    #[test]
    fn sliced_equals_masked_on_presets() {
        let specs = [
            vgg_w(&[1, 8, 8], 16, 8, 10, Ordering::Nested),
            c3d_w_style(&[1, 8, 8], 8, 10),
            resnet_d(&[1, 8, 8], 4, &[2, 2], 10),
        ];
        for (s, spec) in specs.iter().enumerate() {
            let net: TNetwork = TNetwork::build(spec, &mut seeded(s as u64)).unwrap();
            let x = rand_input(&[3, 1, 8, 8], 10 + s as u64);
            for u in grid() {
                let gates = net.draw_gates(u, &mut seeded(0)).unwrap();
                let masked = net.forward(&x, &gates).unwrap();
                for propagate in [false, true] {
                    let sliced = net.forward_sliced(&x, &gates, propagate).unwrap();
                    assert!(max_abs(&masked, &sliced) <= 1e-5, "preset {s} u {u:?}");
                }
            }
        }
    }

    #[test]
    fn instrumented_counter_matches_analytic() {
        let nets = [
            vgg_w(&[1, 8, 8], 16, 8, 10, Ordering::Nested),
            c3d_w_style(&[1, 8, 8], 8, 10),
            resnet_d(&[1, 8, 8], 4, &[2, 2], 10),
        ];
        for (s, spec) in nets.iter().enumerate() {
            let net: TNetwork = TNetwork::build(spec, &mut seeded(s as u64)).unwrap();
            let x = rand_input(&[1, 1, 8, 8], 0);
            for u in grid() {
                let gates = net.draw_gates(u, &mut seeded(0)).unwrap();
                for propagate in [false, true] {
                    reset_forward_macs();
                    net.forward_sliced(&x, &gates, propagate).unwrap();
                    assert_eq!(forward_macs(), net.mac_count(&gates, propagate).unwrap().active);
                }
            }
        }
    }

    #[test]
    fn independent_gates_cannot_be_sliced() {
        let net: TNetwork = TNetwork::build(&vgg_w(&[1, 8, 8], 16, 8, 10, Ordering::Nested), &mut seeded(0)).unwrap();
        let mut gates = net.full_gates();
        gates[1] = GateVector::new(vec![false, true, true, true, true, true, true, true]).unwrap();
        let err = net
            .forward_sliced(&rand_input(&[1, 1, 8, 8], 0), &gates, false)
            .unwrap_err();
        assert_eq!(err, Error::NotNested { module: 1 });
    }

    #[test]
    fn nested_conv_sliced_examples() {
        let mut rng = seeded(3);
        let w: Tensor = Tensor::from_fn(&[8, 2, 3, 3], |_| rng.gen_range(-1.0..1.0));
        let b: Tensor = Tensor::from_fn(&[8], |_| rng.gen_range(-1.0..1.0));
        let x = rand_input(&[2, 2, 6, 6], 4);
        let full = kernels::conv2d(&x, &w, Some(&b), 1, 1).unwrap();
        let at_one = nested_conv_sliced(&x, Utilization::FULL, &w, &b, 1, 1, Discretization::Ceiling, 1).unwrap();
        assert_eq!(at_one, full);
        let half = nested_conv_sliced(
            &x,
            Utilization::new(0.5).unwrap(),
            &w,
            &b,
            1,
            1,
            Discretization::Ceiling,
            1,
        )
        .unwrap();
        assert!(max_abs(&half.slice_axis(1, 0, 4).unwrap(), &full.slice_axis(1, 0, 4).unwrap()) <= 1e-5);
        assert!(half.slice_axis(1, 4, 8).unwrap().data().iter().all(|&v| v == 0.0));
        let err = nested_conv_sliced(
            &x,
            Utilization::new(0.0).unwrap(),
            &w,
            &b,
            1,
            1,
            Discretization::Ceiling,
            1,
        );
        assert!(matches!(err, Err(Error::TooFewActive { .. })));
    }

    #[test]
    fn chained_sliced_convs_match_masked() {
        let mut rng = seeded(8);
        let w1: Tensor = Tensor::from_fn(&[8, 2, 3, 3], |_| rng.gen_range(-1.0..1.0));
        let b1: Tensor = Tensor::from_fn(&[8], |_| rng.gen_range(-1.0..1.0));
        let w2: Tensor = Tensor::from_fn(&[8, 8, 3, 3], |_| rng.gen_range(-1.0..1.0));
        let b2: Tensor = Tensor::from_fn(&[8], |_| rng.gen_range(-1.0..1.0));
        let x = rand_input(&[2, 2, 6, 6], 5);
        let mask = |t: Tensor, k: usize| -> Tensor {
            let mut t = t;
            let hw = 36;
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                if (i / hw) % 8 >= k {
                    *v = 0.0;
                }
            }
            t
        };
        for _ in 0..20 {
            let (u1, u2) = (rng.gen_range(0.05..1.0), rng.gen_range(0.05..1.0));
            let (u1, u2) = (Utilization::new(u1).unwrap(), Utilization::new(u2).unwrap());
            let mode = Discretization::Ceiling;
            let s = nested_conv_sliced(&x, u1, &w1, &b1, 1, 1, mode, 1).unwrap();
            let s = nested_conv_sliced(&s, u2, &w2, &b2, 1, 1, mode, 1).unwrap();
            let m = mask(
                kernels::conv2d(&x, &w1, Some(&b1), 1, 1).unwrap(),
                active_count(8, u1, mode),
            );
            let m = mask(
                kernels::conv2d(&m, &w2, Some(&b2), 1, 1).unwrap(),
                active_count(8, u2, mode),
            );
            assert!(max_abs(&s, &m) <= 1e-5);
        }
    }

    #[test]
    fn macs_monotone_in_u() {
        let net: TNetwork = TNetwork::build(&vgg_w(&[1, 8, 8], 16, 8, 10, Ordering::Nested), &mut seeded(0)).unwrap();
        for propagate in [false, true] {
            let mut last = 0;
            for u in grid() {
                let gates = net.draw_gates(u, &mut seeded(0)).unwrap();
                let m = net.mac_count(&gates, propagate).unwrap().active;
                assert!(m >= last);
                last = m;
            }
        }
    }

    #[test]
    fn depthwise_off_is_identity() {
        let net: TNetwork = TNetwork::build(&resnet_d(&[1, 8, 8], 4, &[2], 10), &mut seeded(0)).unwrap();
        let Layer::Gated(m) = &net.layers()[2] else {
            panic!("expected residual stage")
        };
        let Body::Residual { blocks } = &m.body else {
            panic!("expected residual stage")
        };
        let x = rand_input(&[2, 4, 8, 8], 1);
        assert_eq!(crate::tmodule::forward_depthwise(&blocks[0], &x, false).unwrap(), x);
        let y = crate::tmodule::forward_depthwise(&blocks[0], &x, true).unwrap();
        let f = plain_forward(&blocks[0], &x).unwrap();
        for ((a, b), c) in y.data().iter().zip(x.data()).zip(f.data()) {
            assert_eq!(*a, b + c);
        }
        let mut zeroed = blocks[0].clone();
        for l in &mut zeroed {
            if let Layer::Conv(c) = l {
                c.weight.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        assert_eq!(crate::tmodule::forward_depthwise(&zeroed, &x, true).unwrap(), x);
    }
}
