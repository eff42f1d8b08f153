//! Central finite differences in `f64` against reverse-mode gradients.
//!
//! Perturbations that change the graph's kink signature (a relu mask, a
//! pooling argmax, a clamp bound) are skipped rather than compared, since the
//! function is not differentiable across them.

use std::fmt;

use rand::Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;
use crate::gating::{Discretization, GatingStrategy};
use crate::rng::seeded;
use crate::tmodule::{ArchSpec, BodySpec, LayerSpec, ModuleSpec, TNetwork};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tolerance {
    /// Finite-difference step.
    pub h: f64,
    pub rtol: f64,
    /// Absolute floor under the relative tolerance.
    pub atol: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            h: 1e-5,
            rtol: 1e-4,
            atol: 1e-6,
        }
    }
}

impl Tolerance {
    pub fn accepts(&self, analytic: f64, numeric: f64) -> bool {
        (analytic - numeric).abs() <= self.atol.max(self.rtol * analytic.abs().max(numeric.abs()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mismatch {
    pub case: String,
    pub seed: u64,
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl fmt::Display for Mismatch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} seed {}: input {} coord {}: analytic {}, numeric {}",
            self.case, self.seed, self.input, self.coord, self.analytic, self.numeric
        )
    }
}

impl std::error::Error for Mismatch {}

pub type Build = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

/// One graph operation under test: input shapes and how to apply it.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: Box<Build>,
}

impl OpCase {
    fn new(
        name: &'static str,
        shapes: &[&[usize]],
        build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        OpCase {
            name,
            shapes: shapes.iter().map(|s| s.to_vec()).collect(),
            build: Box::new(build),
        }
    }
}

/// Every differentiable graph operation, with small random-friendly shapes.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase::new("matmul", &[&[3, 4], &[4, 2]], |g, v| g.matmul(v[0], v[1])),
        OpCase::new("conv2d", &[&[2, 2, 5, 5], &[3, 2, 3, 3], &[3]], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 1, 1)
        }),
        OpCase::new("conv2d stride 2", &[&[1, 2, 6, 6], &[2, 2, 3, 3]], |g, v| {
            g.conv2d(v[0], v[1], None, 2, 0)
        }),
        OpCase::new("relu", &[&[4, 5]], |g, v| Ok(g.relu(v[0]))),
        OpCase::new("max_pool2d", &[&[2, 2, 4, 4]], |g, v| g.max_pool2d(v[0], 2, 2)),
        OpCase::new("concat", &[&[2, 3, 2], &[2, 1, 2]], |g, v| g.concat(&[v[0], v[1]], 1)),
        OpCase::new("add", &[&[3, 3], &[3, 3]], |g, v| g.add(v[0], v[1])),
        OpCase::new("mul", &[&[3, 3], &[3, 3]], |g, v| g.mul(v[0], v[1])),
        OpCase::new("slice", &[&[2, 5, 3]], |g, v| g.slice(v[0], 1, 1, 4)),
        OpCase::new("pad", &[&[2, 2, 3]], |g, v| g.pad(v[0], 1, 1, 2)),
        OpCase::new("add_bias dense", &[&[3, 4], &[4]], |g, v| g.add_bias(v[0], v[1])),
        OpCase::new("add_bias conv", &[&[2, 3, 2, 2], &[3]], |g, v| g.add_bias(v[0], v[1])),
        OpCase::new("reshape", &[&[2, 6]], |g, v| g.reshape(v[0], &[3, 4])),
        OpCase::new("flatten", &[&[2, 2, 2, 3]], |g, v| g.flatten(v[0])),
        OpCase::new("sigmoid", &[&[3, 4]], |g, v| Ok(g.sigmoid(v[0]))),
        OpCase::new("scale", &[&[3, 4]], |g, v| Ok(g.scale(v[0], -1.7))),
        OpCase::new("add_scalar", &[&[3, 4]], |g, v| Ok(g.add_scalar(v[0], 0.3))),
        OpCase::new("abs", &[&[3, 4]], |g, v| Ok(g.abs(v[0]))),
        OpCase::new("clamp", &[&[3, 4]], |g, v| Ok(g.clamp(v[0], -0.5, 0.4))),
        OpCase::new("sum", &[&[3, 4]], |g, v| Ok(g.sum(v[0]))),
        OpCase::new("mean", &[&[3, 4]], |g, v| Ok(g.mean(v[0]))),
        OpCase::new("group_gate conv", &[&[2, 4, 2, 2], &[2, 2]], |g, v| {
            g.group_gate(v[0], v[1])
        }),
        OpCase::new("group_gate dense", &[&[3, 6], &[3, 3]], |g, v| g.group_gate(v[0], v[1])),
        OpCase::new("softmax_cross_entropy", &[&[4, 5]], |g, v| {
            g.softmax_cross_entropy(v[0], &[0, 3, 4, 1], None)
        }),
        OpCase::new("weighted softmax_cross_entropy", &[&[4, 5]], |g, v| {
            g.softmax_cross_entropy(v[0], &[2, 2, 0, 1], Some(&[0.5, -1.0, 2.0, 0.0]))
        }),
        OpCase::new("bce_with_logits", &[&[3, 2]], |g, v| {
            g.bce_with_logits(v[0], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0], &[0.3, -0.7, 1.0])
        }),
    ]
}

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Reduces any output to a scalar with fixed random weights so that every
/// output coordinate contributes a distinct amount.
fn scalarize(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    if g.value(y).numel() == 1 {
        return Ok(y);
    }
    let w = random(g.shape(y), &mut seeded(seed ^ 0xabcd));
    let wv = g.constant(w);
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

struct Evaluated {
    value: f64,
    signature: Vec<u64>,
    graph: Graph<f64>,
    vars: Vec<Var>,
    loss: Var,
}

fn evaluate(build: &Build, inputs: &[Tensor<f64>], seed: u64) -> Result<Evaluated> {
    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| graph.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let y = build(&mut graph, &vars)?;
    let loss = scalarize(&mut graph, y, seed)?;
    Ok(Evaluated {
        value: graph.value(loss).data()[0],
        signature: graph.kink_signature(),
        graph,
        vars,
        loss,
    })
}

/// Checks every input coordinate of `case` on inputs drawn from `seed`.
/// Returns how many coordinates were compared.
pub fn check_op(case: &OpCase, seed: u64, tol: Tolerance) -> std::result::Result<usize, Mismatch> {
    let mut rng = seeded(seed);
    let inputs: Vec<Tensor<f64>> = case.shapes.iter().map(|s| random(s, &mut rng)).collect();
    let fail = |input, coord, analytic, numeric| Mismatch {
        case: case.name.to_string(),
        seed,
        input,
        coord,
        analytic,
        numeric,
    };
    let ev = evaluate(&*case.build, &inputs, seed).map_err(|_| fail(0, 0, f64::NAN, f64::NAN))?;
    let mut graph = ev.graph;
    graph.backward(ev.loss).map_err(|_| fail(0, 0, f64::NAN, f64::NAN))?;
    let analytic: Vec<Vec<f64>> = ev
        .vars
        .iter()
        .zip(&inputs)
        .map(|(&v, t)| {
            graph
                .grad(v)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; t.numel()])
        })
        .collect();
    let mut checked = 0;
    for (i, t) in inputs.iter().enumerate() {
        for j in 0..t.numel() {
            let at = |delta: f64| {
                let mut moved = inputs.clone();
                moved[i].data_mut()[j] += delta;
                evaluate(&*case.build, &moved, seed)
            };
            let (Ok(plus), Ok(minus)) = (at(tol.h), at(-tol.h)) else {
                return Err(fail(i, j, analytic[i][j], f64::NAN));
            };
            if plus.signature != ev.signature || minus.signature != ev.signature {
                continue;
            }
            let numeric = (plus.value - minus.value) / (2.0 * tol.h);
            if !tol.accepts(analytic[i][j], numeric) {
                return Err(fail(i, j, analytic[i][j], numeric));
            }
            checked += 1;
        }
    }
    Ok(checked)
}

/// Two nested-width gated convolutions and a dense head.
pub fn small_gated_net(seed: u64) -> TNetwork<f64> {
    let gated = |out, groups| {
        LayerSpec::Gated(ModuleSpec {
            body: BodySpec::ConvGroups {
                out,
                kernel: 3,
                stride: 1,
                pad: 1,
                groups,
            },
            strategy: GatingStrategy::WIDTH_NESTED,
            min_active: 1,
            discretization: Discretization::Floor,
        })
    };
    let spec = ArchSpec {
        input: vec![2, 4, 4],
        layers: vec![
            gated(4, 2),
            LayerSpec::Relu,
            LayerSpec::MaxPool { size: 2, stride: 2 },
            gated(6, 3),
            LayerSpec::Relu,
            LayerSpec::Flatten,
            LayerSpec::Dense { out: 3 },
        ],
    };
    let net: TNetwork<f32> = TNetwork::build(&spec, &mut seeded(seed)).expect("valid spec");
    net.cast()
}

/// Loss of the network as a function of (input, soft gates, parameters), its
/// kink signature, and the gradient for each of those slots in that order.
fn net_loss(
    net: &TNetwork<f64>,
    x: &Tensor<f64>,
    gates: &[Tensor<f64>],
    labels: &[usize],
) -> Result<(f64, Vec<u64>, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let xv = g.leaf(x.clone().with_requires_grad(true));
    let gv: Vec<Var> = gates
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let (logits, params) = net.forward_graph(&mut g, xv, &gv, true)?;
    let loss = g.softmax_cross_entropy(logits, labels, None)?;
    let value = g.value(loss).data()[0];
    let sig = g.kink_signature();
    g.backward(loss)?;
    let grad = |g: &Graph<f64>, v: Var| {
        g.grad(v)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; g.value(v).numel()])
    };
    let mut grads = vec![grad(&g, xv)];
    grads.extend(gv.iter().map(|&v| grad(&g, v)));
    grads.extend(params.iter().map(|&p| grad(&g, p)));
    Ok((value, sig, grads))
}

/// Checks input, soft-gate and parameter gradients of [`small_gated_net`]
/// with parameters and gates drawn from `seed`.
pub fn check_gated_network(seed: u64, tol: Tolerance) -> std::result::Result<usize, Mismatch> {
    let mut rng = seeded(1000 + seed);
    let net = small_gated_net(seed);
    let x = random(&[2, 2, 4, 4], &mut rng);
    let gates = vec![
        Tensor::from_fn(&[2, 2], |_| rng.gen_range(0.0..1.0)),
        Tensor::from_fn(&[2, 3], |_| rng.gen_range(0.0..1.0)),
    ];
    let labels = [0usize, 2];
    let fail = |input, coord, analytic, numeric| Mismatch {
        case: "gated network".to_string(),
        seed,
        input,
        coord,
        analytic,
        numeric,
    };
    let (_, sig, grads) = net_loss(&net, &x, &gates, &labels).map_err(|_| fail(0, 0, f64::NAN, f64::NAN))?;
    let mut checked = 0;
    for (slot, slot_grads) in grads.iter().enumerate() {
        for (j, &a) in slot_grads.iter().enumerate() {
            let at = |delta: f64| {
                let (mut x2, mut g2, mut n2) = (x.clone(), gates.clone(), net.clone());
                if slot == 0 {
                    x2.data_mut()[j] += delta;
                } else if slot <= gates.len() {
                    g2[slot - 1].data_mut()[j] += delta;
                } else {
                    n2.params_mut()[slot - 1 - gates.len()].data_mut()[j] += delta;
                }
                net_loss(&n2, &x2, &g2, &labels)
            };
            let (Ok((fp, sp, _)), Ok((fm, sm, _))) = (at(tol.h), at(-tol.h)) else {
                return Err(fail(slot, j, a, f64::NAN));
            };
            if sp != sig || sm != sig {
                continue;
            }
            let numeric = (fp - fm) / (2.0 * tol.h);
            if !tol.accepts(a, numeric) {
                return Err(fail(slot, j, a, numeric));
            }
            checked += 1;
        }
    }
    Ok(checked)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tolerance_has_absolute_floor() {
        let t = Tolerance::default();
        assert!(t.accepts(0.0, 5e-7));
        assert!(!t.accepts(0.0, 2e-6));
        assert!(t.accepts(1000.0, 1000.05));
        assert!(!t.accepts(1000.0, 1000.2));
    }

    #[test]
    fn zero_tolerance_trips_on_rounding() {
        // |x| composed from two relus: correct gradients, but the central
        // difference still carries rounding noise
        let case = OpCase::new("abs from relus", &[&[4]], |g, v| {
            let r = g.relu(v[0]);
            let n = g.scale(v[0], -1.0);
            let rn = g.relu(n);
            let s = g.add(r, rn)?;
            Ok(g.scale(s, 0.3))
        });
        assert!(check_op(&case, 3, Tolerance::default()).is_ok());
        let strict = Tolerance {
            h: 1e-5,
            rtol: 0.0,
            atol: 0.0,
        };
        assert!(check_op(&case, 3, strict).is_err());
    }
}
