use super::kernels::{self, gemm_nt, gemm_tn};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F: Real> {
    Leaf,
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Relu(Var),
    MaxPool {
        x: Var,
        arg: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Pad {
        x: Var,
        axis: usize,
        before: usize,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Reshape(Var),
    Sigmoid(Var),
    Scale(Var, F),
    AddScalar(Var),
    Clamp {
        x: Var,
        lo: F,
        hi: F,
    },
    Sum(Var),
    Mean(Var),
    Abs(Var),
    GroupGate {
        x: Var,
        g: Var,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        weights: Vec<F>,
        probs: Vec<F>,
    },
    BceLogits {
        z: Var,
        targets: Vec<F>,
        row_weights: Vec<F>,
    },
}

struct Node<F: Real> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Define-by-run computation tape.
///
/// Every op appends its output; the op itself is only recorded when one of
/// its inputs needs a gradient. Backward replays the recorded rules in
/// reverse order, so inputs always precede their consumers.
pub struct Graph<F: Real = f32> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a tensor; it receives a gradient iff `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        let needs_grad = t.requires_grad();
        self.push(t, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, mut t: Tensor<F>) -> Var {
        t.set_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    /// Copies a parameter onto the tape.
    pub fn param(&mut self, t: &Tensor<F>, trainable: bool) -> Var {
        let mut t = t.clone();
        t.zero_grad();
        t.set_requires_grad(trainable);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.nodes[v.0].value.grad()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Indices of every node that is the output of a rectifier or max-pool,
    /// together with a signature of its non-smooth decision (active mask or
    /// selected index). Gradient checks use this to skip perturbations that
    /// cross a kink.
    pub fn kink_signature(&self) -> Vec<u64> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    let bits = self.nodes[x.0].value.data().iter().map(|v| (*v > F::zero()) as u64);
                    sig.extend(bits);
                }
                Op::MaxPool { arg, .. } => sig.extend(arg.iter().map(|&a| a as u64)),
                Op::Abs(x) => {
                    let bits = self.nodes[x.0].value.data().iter().map(|v| (*v > F::zero()) as u64);
                    sig.extend(bits);
                }
                Op::Clamp { x, lo, hi } => {
                    let bits = self.nodes[x.0]
                        .value
                        .data()
                        .iter()
                        .map(|v| ((*v > *lo) as u64) | (((*v < *hi) as u64) << 1));
                    sig.extend(bits);
                }
                _ => {}
            }
        }
        sig
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let out = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.any_grad(&deps);
        Ok(self.push(out, Op::Conv2d { x, w, b, stride, pad }, ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = kernels::relu(self.value(x));
        let ng = self.any_grad(&[x]);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn max_pool2d(&mut self, x: Var, size: usize, stride: usize) -> Result<Var> {
        let (out, arg) = kernels::max_pool2d(self.value(x), size, stride)?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(out, Op::MaxPool { x, arg }, ng))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor<F>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = kernels::concat(&tensors, axis)?;
        let ng = self.any_grad(parts);
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        ))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let ng = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let out = kernels::slice_axis(self.value(x), axis, start, end)?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(out, Op::Slice { x, axis, start }, ng))
    }

    pub fn pad(&mut self, x: Var, axis: usize, before: usize, after: usize) -> Result<Var> {
        let out = kernels::pad_axis(self.value(x), axis, before, after)?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(out, Op::Pad { x, axis, before }, ng))
    }

    /// Broadcast add of a per-channel bias along axis 1.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let out = kernels::add_channel_bias(self.value(x), self.value(b))?;
        let ng = self.any_grad(&[x, b]);
        Ok(self.push(out, Op::AddBias { x, b }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let ng = self.any_grad(&[x]);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Collapses all but the leading axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let rows = s[0];
        let cols = s[1..].iter().product();
        self.reshape(x, &[rows, cols])
    }

    fn map(&mut self, x: Var, op: Op<F>, f: impl Fn(F) -> F) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
            .expect("elementwise map keeps shape");
        let ng = self.any_grad(&[x]);
        self.push(out, op, ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), kernels::sigmoid)
    }

    pub fn scale(&mut self, x: Var, c: F) -> Var {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: F) -> Var {
        self.map(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.map(x, Op::Abs(x), |v| v.abs())
    }

    pub fn clamp(&mut self, x: Var, lo: F, hi: F) -> Var {
        self.map(x, Op::Clamp { x, lo, hi }, |v| v.max(lo).min(hi))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: F = self.value(x).data().iter().copied().sum();
        let ng = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s: F = t.data().iter().copied().sum::<F>() / F::from_usize(t.numel()).unwrap();
        let ng = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Multiplies `x` (`[batch, channels, ...]`) by per-example gates
    /// `g` (`[batch, groups]`); gate `j` covers `channels / groups`
    /// consecutive channels.
    pub fn group_gate(&mut self, x: Var, g: Var) -> Result<Var> {
        let (tx, tg) = (self.value(x), self.value(g));
        let (sx, sg) = (tx.shape(), tg.shape());
        if sx.len() < 2 || sg.len() != 2 || sx[0] != sg[0] || sg[1] == 0 || sx[1] % sg[1] != 0 {
            return Err(mismatch("group_gate", sx, sg));
        }
        let (groups, per) = (sg[1], sx[1] / sg[1]);
        let inner: usize = sx[2..].iter().product();
        let block = per * inner;
        let mut out = tx.data().to_vec();
        for (i, chunk) in out.chunks_mut(block).enumerate() {
            let gate = tg.data()[i];
            debug_assert!(i / groups < sx[0]);
            for v in chunk {
                *v *= gate;
            }
        }
        let out = Tensor::new(sx.to_vec(), out)?;
        let ng = self.any_grad(&[x, g]);
        Ok(self.push(out, Op::GroupGate { x, g }, ng))
    }

    /// Mean over the batch of `weights[i] * cross_entropy(softmax(logits[i]), labels[i])`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize], weights: Option<&[F]>) -> Result<Var> {
        let t = self.value(logits);
        let s = t.shape();
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&l| l >= s[1]) {
            return Err(mismatch("softmax_cross_entropy", s, &[labels.len()]));
        }
        if let Some(w) = weights {
            if w.len() != labels.len() {
                return Err(mismatch("softmax_cross_entropy weights", s, &[w.len()]));
            }
        }
        let (rows, cols) = (s[0], s[1]);
        let weights: Vec<F> = weights.map(|w| w.to_vec()).unwrap_or_else(|| vec![F::one(); rows]);
        let mut probs = t.data().to_vec();
        let mut loss = F::zero();
        for (i, row) in probs.chunks_mut(cols).enumerate() {
            kernels::softmax_in_place(row);
            let p = row[labels[i]].max(F::min_positive_value());
            loss += -weights[i] * p.ln();
        }
        loss = loss / F::from_usize(rows).unwrap();
        let ng = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                weights,
                probs,
            },
            ng,
        ))
    }

    /// `sum_i row_weights[i] * sum_j bce(sigmoid(z[i,j]), targets[i,j])`.
    pub fn bce_with_logits(&mut self, z: Var, targets: &[F], row_weights: &[F]) -> Result<Var> {
        let t = self.value(z);
        let s = t.shape();
        if s.len() != 2 || targets.len() != t.numel() || row_weights.len() != s[0] {
            return Err(mismatch("bce_with_logits", s, &[targets.len(), row_weights.len()]));
        }
        let cols = s[1];
        let mut loss = F::zero();
        for (k, (&zv, &tv)) in t.data().iter().zip(targets).enumerate() {
            let l = zv.max(F::zero()) - zv * tv + (F::one() + (-zv.abs()).exp()).ln();
            loss += row_weights[k / cols] * l;
        }
        let ng = self.any_grad(&[z]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                z,
                targets: targets.to_vec(),
                row_weights: row_weights.to_vec(),
            },
            ng,
        ))
    }

    /// Reverse pass from a scalar `loss`. Gradients are written into (and
    /// accumulate onto) the grad slot of every leaf that requires one.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                self.nodes[i].value.accumulate_grad(&dy);
                continue;
            }
            for (input, g) in self.local_grads(i, &dy)? {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    fn local_grads(&self, i: usize, dy: &[F]) -> Result<Vec<(Var, Vec<F>)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut out = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if wants(*a) {
                    let mut da = vec![F::zero(); m * k];
                    gemm_nt(m, n, k, dy, tb.data(), &mut da);
                    out.push((*a, da));
                }
                if wants(*b) {
                    let mut db = vec![F::zero(); k * n];
                    gemm_tn(k, m, n, ta.data(), dy, &mut db);
                    out.push((*b, db));
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = kernels::conv2d_backward(val(*x), val(*w), dy, *stride, *pad, wants(*x))?;
                if let Some(dx) = dx {
                    out.push((*x, dx));
                }
                out.push((*w, dw));
                if let Some(b) = b {
                    out.push((*b, db));
                }
            }
            Op::Relu(x) => {
                let g = val(*x)
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&v, &d)| if v > F::zero() { d } else { F::zero() })
                    .collect();
                out.push((*x, g));
            }
            Op::MaxPool { x, arg } => {
                let mut g = vec![F::zero(); val(*x).numel()];
                for (&a, &d) in arg.iter().zip(dy) {
                    g[a] += d;
                }
                out.push((*x, g));
            }
            Op::Concat { parts, axis } => {
                let shape = self.nodes[i].value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let len = val(*p).shape()[*axis] * inner;
                    let mut g = Vec::with_capacity(outer * len);
                    for o in 0..outer {
                        g.extend_from_slice(&dy[o * total + offset..o * total + offset + len]);
                    }
                    offset += len;
                    out.push((*p, g));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, dy.to_vec()));
                out.push((*b, dy.to_vec()));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                out.push((*a, dy.iter().zip(tb.data()).map(|(&d, &v)| d * v).collect()));
                out.push((*b, dy.iter().zip(ta.data()).map(|(&d, &v)| d * v).collect()));
            }
            Op::Slice { x, axis, start } => {
                let dyt = Tensor::new(self.nodes[i].value.shape().to_vec(), dy.to_vec())?;
                let full = val(*x).shape()[*axis];
                let after = full - start - dyt.shape()[*axis];
                out.push((*x, kernels::pad_axis(&dyt, *axis, *start, after)?.into_data()));
            }
            Op::Pad { x, axis, before } => {
                let dyt = Tensor::new(self.nodes[i].value.shape().to_vec(), dy.to_vec())?;
                let len = val(*x).shape()[*axis];
                out.push((*x, kernels::slice_axis(&dyt, *axis, *before, before + len)?.into_data()));
            }
            Op::AddBias { x, b } => {
                let s = val(*x).shape();
                let inner: usize = s[2..].iter().product();
                let mut db = vec![F::zero(); s[1]];
                for (k, &d) in dy.iter().enumerate() {
                    db[(k / inner) % s[1]] += d;
                }
                out.push((*x, dy.to_vec()));
                out.push((*b, db));
            }
            Op::Reshape(x) => out.push((*x, dy.to_vec())),
            Op::Sigmoid(x) => {
                let y = self.nodes[i].value.data();
                out.push((*x, y.iter().zip(dy).map(|(&s, &d)| d * s * (F::one() - s)).collect()));
            }
            Op::Scale(x, c) => out.push((*x, dy.iter().map(|&d| d * *c).collect())),
            Op::AddScalar(x) => out.push((*x, dy.to_vec())),
            Op::Clamp { x, lo, hi } => {
                let g = val(*x)
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&v, &d)| if v > *lo && v < *hi { d } else { F::zero() })
                    .collect();
                out.push((*x, g));
            }
            Op::Sum(x) => out.push((*x, vec![dy[0]; val(*x).numel()])),
            Op::Mean(x) => {
                let n = val(*x).numel();
                out.push((*x, vec![dy[0] / F::from_usize(n).unwrap(); n]));
            }
            Op::Abs(x) => {
                let g = val(*x)
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(&v, &d)| {
                        if v > F::zero() {
                            d
                        } else if v < F::zero() {
                            -d
                        } else {
                            F::zero()
                        }
                    })
                    .collect();
                out.push((*x, g));
            }
            Op::GroupGate { x, g } => {
                let (tx, tg) = (val(*x), val(*g));
                let s = tx.shape();
                let per = s[1] / tg.shape()[1];
                let block = per * s[2..].iter().product::<usize>();
                let mut dx = dy.to_vec();
                let mut dg = vec![F::zero(); tg.numel()];
                for (k, chunk) in dx.chunks_mut(block).enumerate() {
                    let gate = tg.data()[k];
                    let xs = &tx.data()[k * block..(k + 1) * block];
                    let mut acc = F::zero();
                    for (d, &xv) in chunk.iter_mut().zip(xs) {
                        acc += *d * xv;
                        *d *= gate;
                    }
                    dg[k] = acc;
                }
                out.push((*x, dx));
                out.push((*g, dg));
            }
            Op::SoftmaxXent {
                logits,
                labels,
                weights,
                probs,
            } => {
                let rows = labels.len();
                let cols = probs.len() / rows;
                let scale = dy[0] / F::from_usize(rows).unwrap();
                let mut g = probs.clone();
                for (r, row) in g.chunks_mut(cols).enumerate() {
                    row[labels[r]] -= F::one();
                    for v in row.iter_mut() {
                        *v *= weights[r] * scale;
                    }
                }
                out.push((*logits, g));
            }
            Op::BceLogits {
                z,
                targets,
                row_weights,
            } => {
                let tz = val(*z);
                let cols = tz.shape()[1];
                let g = tz
                    .data()
                    .iter()
                    .zip(targets)
                    .enumerate()
                    .map(|(k, (&zv, &tv))| dy[0] * row_weights[k / cols] * (kernels::sigmoid(zv) - tv))
                    .collect();
                out.push((*z, g));
            }
        }
        Ok(out)
    }
}
