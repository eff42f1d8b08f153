//! Plain numeric kernels shared by the taped graph and the sliced inference path.

use std::cell::Cell;

use super::{Real, Tensor};
use crate::error::{Error, Result};

thread_local! {
    static FORWARD_MACS: Cell<u64> = const { Cell::new(0) };
}

/// Multiply-accumulates executed by forward matrix products on this thread
/// since the last [`reset_forward_macs`].
pub fn forward_macs() -> u64 {
    FORWARD_MACS.with(|c| c.get())
}

pub fn reset_forward_macs() {
    FORWARD_MACS.with(|c| c.set(0));
}

/// `c[m,n] += a[m,k] * b[k,n]`. This is the only product used by forward
/// passes, and it counts every multiply-accumulate it executes.
pub fn gemm_nn<F: Real>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut executed = 0u64;
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
            executed += brow.len() as u64;
        }
    }
    FORWARD_MACS.with(|cnt| cnt.set(cnt.get() + executed));
}

/// `c[m,n] += a[m,k] * b[n,k]^T`
pub fn gemm_nt<F: Real>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

/// `c[m,n] += a[k,m]^T * b[k,n]`
pub fn gemm_tn<F: Real>(m: usize, k: usize, n: usize, a: &[F], b: &[F], c: &mut [F]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

pub fn matmul<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: sa.to_vec(),
            right: sb.to_vec(),
        });
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let mut out = vec![F::zero(); m * n];
    gemm_nn(m, k, n, a.data(), b.data(), &mut out);
    Tensor::new(vec![m, n], out)
}

/// Geometry of a 2-D convolution over one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.pad - self.kh) / self.stride + 1,
            (self.width + 2 * self.pad - self.kw) / self.stride + 1,
        )
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }
}

fn im2col<F: Real>(img: &[F], g: &ConvGeom, col: &mut [F]) {
    let (ho, wo) = g.out_hw();
    let cols = ho * wo;
    for c in 0..g.channels {
        let plane = &img[c * g.height * g.width..(c + 1) * g.height * g.width];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oh in 0..ho {
                    let ih = (oh * g.stride + i) as isize - g.pad as isize;
                    for ow in 0..wo {
                        let iw = (ow * g.stride + j) as isize - g.pad as isize;
                        dst[oh * wo + ow] = if ih >= 0 && iw >= 0 && (ih as usize) < g.height && (iw as usize) < g.width
                        {
                            plane[ih as usize * g.width + iw as usize]
                        } else {
                            F::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<F: Real>(col: &[F], g: &ConvGeom, img: &mut [F]) {
    let (ho, wo) = g.out_hw();
    let cols = ho * wo;
    for c in 0..g.channels {
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &col[row * cols..(row + 1) * cols];
                for oh in 0..ho {
                    let ih = (oh * g.stride + i) as isize - g.pad as isize;
                    if ih < 0 || ih as usize >= g.height {
                        continue;
                    }
                    for ow in 0..wo {
                        let iw = (ow * g.stride + j) as isize - g.pad as isize;
                        if iw < 0 || iw as usize >= g.width {
                            continue;
                        }
                        img[(c * g.height + ih as usize) * g.width + iw as usize] += src[oh * wo + ow];
                    }
                }
            }
        }
    }
}

fn conv_geom<F: Real>(x: &Tensor<F>, w: &Tensor<F>, stride: usize, pad: usize) -> Result<ConvGeom> {
    let (sx, sw) = (x.shape(), w.shape());
    let mismatch = || Error::ShapeMismatch {
        op: "conv2d",
        left: sx.to_vec(),
        right: sw.to_vec(),
    };
    if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || stride == 0 {
        return Err(mismatch());
    }
    if sx[2] + 2 * pad < sw[2] || sx[3] + 2 * pad < sw[3] {
        return Err(mismatch());
    }
    Ok(ConvGeom {
        channels: sx[1],
        height: sx[2],
        width: sx[3],
        kh: sw[2],
        kw: sw[3],
        stride,
        pad,
    })
}

/// NCHW convolution with weights `[out, in, kh, kw]` and optional bias `[out]`.
pub fn conv2d<F: Real>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    bias: Option<&Tensor<F>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<F>> {
    let g = conv_geom(x, w, stride, pad)?;
    let out_c = w.shape()[0];
    if let Some(b) = bias {
        if b.shape() != [out_c] {
            return Err(Error::ShapeMismatch {
                op: "conv2d bias",
                left: w.shape().to_vec(),
                right: b.shape().to_vec(),
            });
        }
    }
    let batch = x.shape()[0];
    let (ho, wo) = g.out_hw();
    let hw = ho * wo;
    let img_len = g.channels * g.height * g.width;
    let mut col = vec![F::zero(); g.col_rows() * hw];
    let mut out = vec![F::zero(); batch * out_c * hw];
    for b in 0..batch {
        im2col(&x.data()[b * img_len..(b + 1) * img_len], &g, &mut col);
        let dst = &mut out[b * out_c * hw..(b + 1) * out_c * hw];
        gemm_nn(out_c, g.col_rows(), hw, w.data(), &col, dst);
        if let Some(bias) = bias {
            for (o, plane) in dst.chunks_mut(hw).enumerate() {
                let bv = bias.data()[o];
                for v in plane {
                    *v += bv;
                }
            }
        }
    }
    Tensor::new(vec![batch, out_c, ho, wo], out)
}

/// Gradients of [`conv2d`] with respect to input, weights and bias.
pub fn conv2d_backward<F: Real>(
    x: &Tensor<F>,
    w: &Tensor<F>,
    dy: &[F],
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> Result<(Option<Vec<F>>, Vec<F>, Vec<F>)> {
    let g = conv_geom(x, w, stride, pad)?;
    let out_c = w.shape()[0];
    let batch = x.shape()[0];
    let (ho, wo) = g.out_hw();
    let hw = ho * wo;
    let rows = g.col_rows();
    let img_len = g.channels * g.height * g.width;
    let mut col = vec![F::zero(); rows * hw];
    let mut dcol = vec![F::zero(); rows * hw];
    let mut dw = vec![F::zero(); w.numel()];
    let mut db = vec![F::zero(); out_c];
    let mut dx = need_dx.then(|| vec![F::zero(); x.numel()]);
    for b in 0..batch {
        let dyb = &dy[b * out_c * hw..(b + 1) * out_c * hw];
        im2col(&x.data()[b * img_len..(b + 1) * img_len], &g, &mut col);
        gemm_nt(out_c, hw, rows, dyb, &col, &mut dw);
        for (o, plane) in dyb.chunks(hw).enumerate() {
            db[o] += plane.iter().copied().sum::<F>();
        }
        if let Some(dx) = dx.as_mut() {
            dcol.iter_mut().for_each(|v| *v = F::zero());
            gemm_tn(rows, out_c, hw, w.data(), dyb, &mut dcol);
            col2im(&dcol, &g, &mut dx[b * img_len..(b + 1) * img_len]);
        }
    }
    Ok((dx, dw, db))
}

/// Max pooling over `size x size` windows. Returns the output and the flat
/// input index selected for every output element.
pub fn max_pool2d<F: Real>(x: &Tensor<F>, size: usize, stride: usize) -> Result<(Tensor<F>, Vec<usize>)> {
    let s = x.shape();
    if s.len() != 4 || size == 0 || stride == 0 || s[2] < size || s[3] < size {
        return Err(Error::ShapeMismatch {
            op: "max_pool2d",
            left: s.to_vec(),
            right: vec![size, size],
        });
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let ho = (h - size) / stride + 1;
    let wo = (w - size) / stride + 1;
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oh in 0..ho {
            for ow in 0..wo {
                let mut best = base + oh * stride * w + ow * stride;
                for i in 0..size {
                    for j in 0..size {
                        let idx = base + (oh * stride + i) * w + ow * stride + j;
                        if x.data()[idx] > x.data()[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x.data()[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, ho, wo], out)?, arg))
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

pub fn slice_axis<F: Real>(x: &Tensor<F>, axis: usize, start: usize, end: usize) -> Result<Tensor<F>> {
    let s = x.shape();
    if axis >= s.len() || start >= end || end > s[axis] {
        return Err(Error::ShapeMismatch {
            op: "slice",
            left: s.to_vec(),
            right: vec![axis, start, end],
        });
    }
    let (outer, inner) = outer_inner(s, axis);
    let len = end - start;
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * s[axis] * inner;
        out.extend_from_slice(&x.data()[base + start * inner..base + end * inner]);
    }
    let mut shape = s.to_vec();
    shape[axis] = len;
    Tensor::new(shape, out)
}

pub fn pad_axis<F: Real>(x: &Tensor<F>, axis: usize, before: usize, after: usize) -> Result<Tensor<F>> {
    let s = x.shape();
    if axis >= s.len() {
        return Err(Error::ShapeMismatch {
            op: "pad",
            left: s.to_vec(),
            right: vec![axis],
        });
    }
    let (outer, inner) = outer_inner(s, axis);
    let total = before + s[axis] + after;
    let mut out = vec![F::zero(); outer * total * inner];
    for o in 0..outer {
        let src = &x.data()[o * s[axis] * inner..(o + 1) * s[axis] * inner];
        let dst = o * total * inner + before * inner;
        out[dst..dst + src.len()].copy_from_slice(src);
    }
    let mut shape = s.to_vec();
    shape[axis] = total;
    Tensor::new(shape, out)
}

pub fn concat<F: Real>(parts: &[&Tensor<F>], axis: usize) -> Result<Tensor<F>> {
    let first = parts.first().ok_or(Error::ShapeMismatch {
        op: "concat",
        left: vec![],
        right: vec![],
    })?;
    let rank = first.shape().len();
    for p in parts {
        let ok =
            axis < rank && p.shape().len() == rank && (0..rank).all(|d| d == axis || p.shape()[d] == first.shape()[d]);
        if !ok {
            return Err(Error::ShapeMismatch {
                op: "concat",
                left: first.shape().to_vec(),
                right: p.shape().to_vec(),
            });
        }
    }
    let (outer, inner) = outer_inner(first.shape(), axis);
    let total: usize = parts.iter().map(|p| p.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let len = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * len..(o + 1) * len]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Tensor::new(shape, out)
}

pub fn relu<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    let mut out = x.clone();
    out.set_requires_grad(false);
    out.zero_grad();
    for v in out.data_mut() {
        if !(*v > F::zero()) {
            *v = F::zero();
        }
    }
    out
}

/// Adds `bias[c]` to every element of channel `c` (axis 1).
pub fn add_channel_bias<F: Real>(x: &Tensor<F>, bias: &Tensor<F>) -> Result<Tensor<F>> {
    let s = x.shape();
    if s.len() < 2 || bias.shape() != [s[1]] {
        return Err(Error::ShapeMismatch {
            op: "add_bias",
            left: s.to_vec(),
            right: bias.shape().to_vec(),
        });
    }
    let inner: usize = s[2..].iter().product();
    let mut out = x.clone();
    out.set_requires_grad(false);
    out.zero_grad();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v += bias.data()[(i / inner) % s[1]];
    }
    Ok(out)
}

pub fn softmax_in_place<F: Real>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

pub fn sigmoid<F: Real>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}
