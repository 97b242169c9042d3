//! Tape of differentiable operations with hand-written adjoints.
//!
//! Every op appends a node holding its output value. Nodes are created in
//! execution order, so walking the tape backwards is a valid topological
//! order for reverse-mode accumulation.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 2-d convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
}

impl Default for ConvGeom {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
        }
    }
}

/// Output extent of a convolution or pooling window along one axis.
pub fn window_out(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = len + 2 * padding;
    if stride == 0 || kernel == 0 || padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Per-channel statistics of a training-mode batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Log { x: Var, floor: T },
    Softmax(Var),
    LogSoftmax(Var),
    MatMul(Var, Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    MaxPool { x: Var, argmax: Vec<usize> },
    Upsample { x: Var, factor: usize },
    ConcatChannels(Var, Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    BatchNormEval { x: Var, gamma: Var, beta: Var, mean: Vec<T>, inv_std: Vec<T> },
    L2Normalize { x: Var, norm: Vec<T>, eps: T },
    Narrow0 { x: Var, start: usize },
    Sum(Var),
    Mean(Var),
    ChannelSum(Var),
    FlipW(Var),
    FlipH(Var),
    Rot90(Var, u8),
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Recorded computation plus, after [`Graph::backward`], the gradients of its leaves.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// `[outer, channels, inner]` view of a tensor whose axis 1 is the channel axis.
fn channel_view(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::InvalidShape {
            op,
            msg: format!("needs a channel axis, got {shape:?}"),
        });
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

fn dims4(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::InvalidShape {
            op,
            msg: format!("expected [N, C, H, W], got {shape:?}"),
        }),
    }
}

/// Output columns `[lo, hi)` whose input column `ox + shift` lies in `0..w`.
fn unit_stride_span(shift: isize, w: usize, wo: usize) -> (usize, usize) {
    let lo = (-shift).clamp(0, wo as isize) as usize;
    let hi = (w as isize - shift).clamp(0, wo as isize) as usize;
    (lo, hi.max(lo))
}

fn im2col<T: Scalar>(
    img: &[T],
    (cin, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    geom: ConvGeom,
    (ho, wo): (usize, usize),
    cols: &mut [T],
) {
    let (s, p) = (geom.stride as isize, geom.padding as isize);
    let plane = ho * wo;
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = oy as isize * s + ky as isize - p;
                    let out_row = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &img[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    if s == 1 {
                        let (lo, hi) = unit_stride_span(kx as isize - p, w, wo);
                        out_row[..lo].fill(T::zero());
                        out_row[hi..].fill(T::zero());
                        if lo < hi {
                            let off = (lo as isize + kx as isize - p) as usize;
                            out_row[lo..hi].copy_from_slice(&src[off..off + hi - lo]);
                        }
                        continue;
                    }
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = ox as isize * s + kx as isize - p;
                        *o = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(
    cols: &[T],
    (cin, h, w): (usize, usize, usize),
    (kh, kw): (usize, usize),
    geom: ConvGeom,
    (ho, wo): (usize, usize),
    img: &mut [T],
) {
    let (s, p) = (geom.stride as isize, geom.padding as isize);
    let plane = ho * wo;
    for ci in 0..cin {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = oy as isize * s + ky as isize - p;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    if s == 1 {
                        let (lo, hi) = unit_stride_span(kx as isize - p, w, wo);
                        if lo < hi {
                            let off = base + (lo as isize + kx as isize - p) as usize;
                            for (d, &v) in img[off..off + hi - lo].iter_mut().zip(&src[oy * wo + lo..oy * wo + hi]) {
                                *d += v;
                            }
                        }
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = ox as isize * s + kx as isize - p;
                        if ix >= 0 && ix < w as isize {
                            img[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn grad_buf<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Trainable input; receives a gradient on backward.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient accumulated on `v` by the last backward pass.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let data = self.grads.get(v.0)?.as_ref()?;
        Tensor::new(self.nodes[v.0].value.shape().to_vec(), data.clone()).ok()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip(a, b, |x, y| x + y);
        self.push("add", v, &[a, b], Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip(a, b, |x, y| x - y);
        self.push("sub", v, &[a, b], Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip(a, b, |x, y| x * y);
        self.push("mul", v, &[a, b], Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let v = self.zip(a, b, |x, y| x / y);
        self.push("div", v, &[a, b], Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.push("scale", v, &[a], Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let v = self.value(a).map(|x| x + c);
        self.push("add_scalar", v, &[a], Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(T::zero()));
        self.push("relu", v, &[a], Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(T::exp);
        self.push("exp", v, &[a], Op::Exp(a))
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn log(&mut self, a: Var, floor: T) -> Result<Var> {
        let v = self.value(a).map(|x| x.max(floor).ln());
        self.push("log", v, &[a], Op::Log { x: a, floor })
    }

    /// Softmax along axis 1.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = softmax_channels(self.value(a), false)?;
        self.push("softmax", v, &[a], Op::Softmax(a))
    }

    /// Log-softmax along axis 1.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let v = softmax_channels(self.value(a), true)?;
        self.push("log_softmax", v, &[a], Op::LogSoftmax(a))
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (m, k, n) = match (&sa[..], &sb[..]) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::shape("matmul", &sa, &sb)),
        };
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
            n as isize,
            1,
        );
        let v = Tensor::new(vec![m, n], out)?;
        self.push("matmul", v, &[a, b], Op::MatMul(a, b))
    }

    /// Cross-correlation of `x: [N, Cin, H, W]` with `w: [Cout, Cin, kh, kw]`
    /// plus optional `b: [Cout]`.
    ///
    /// Output extent per axis is `(len + 2 * padding - kernel) / stride + 1`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (n, cin, h, wd) = dims4(self.shape(x), "conv2d")?;
        let (cout, wcin, kh, kw) = dims4(self.shape(w), "conv2d")?;
        if wcin != cin {
            return Err(Error::shape("conv2d", &[cout, cin, kh, kw], self.shape(w)));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv2d", &[cout], self.shape(b)));
            }
        }
        let bad = || Error::InvalidShape {
            op: "conv2d",
            msg: format!("kernel {kh}x{kw} does not fit {h}x{wd} with {geom:?}"),
        };
        let ho = window_out(h, kh, geom.stride, geom.padding).ok_or_else(bad)?;
        let wo = window_out(wd, kw, geom.stride, geom.padding).ok_or_else(bad)?;
        let kdim = cin * kh * kw;
        let plane = ho * wo;
        let direct = kh == 1 && kw == 1 && geom.stride == 1 && geom.padding == 0;
        let mut out = vec![T::zero(); n * cout * plane];
        let mut cols = if direct { Vec::new() } else { vec![T::zero(); kdim * plane] };
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for i in 0..n {
            let img = &xv[i * cin * h * wd..(i + 1) * cin * h * wd];
            let rhs: &[T] = if direct {
                img
            } else {
                im2col(img, (cin, h, wd), (kh, kw), geom, (ho, wo), &mut cols);
                &cols
            };
            let dst = &mut out[i * cout * plane..(i + 1) * cout * plane];
            T::gemm(
                cout, kdim, plane, T::one(), wv, kdim as isize, 1, rhs, plane as isize, 1, T::zero(), dst,
                plane as isize, 1,
            );
            if let Some(b) = b {
                let bv = self.value(b).data();
                for (co, chunk) in dst.chunks_mut(plane).enumerate() {
                    for o in chunk {
                        *o += bv[co];
                    }
                }
            }
        }
        let v = Tensor::new(vec![n, cout, ho, wo], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push("conv2d", v, &inputs, Op::Conv2d { x, w, b, geom })
    }

    /// Max pooling with a square `kernel` window and `stride`, no padding.
    /// Ties resolve to the first maximal element in row-major window order.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x), "max_pool2d")?;
        let bad = || Error::InvalidShape {
            op: "max_pool2d",
            msg: format!("window {kernel}/{stride} does not fit {h}x{w}"),
        };
        let ho = window_out(h, kernel, stride, 0).ok_or_else(bad)?;
        let wo = window_out(w, kernel, stride, 0).ok_or_else(bad)?;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut argmax = Vec::with_capacity(n * c * ho * wo);
        for p in 0..n * c {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + oy * stride * w + ox * stride;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                            if xv[idx] > xv[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let v = Tensor::new(vec![n, c, ho, wo], out)?;
        self.push("max_pool2d", v, &[x], Op::MaxPool { x, argmax })
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x), "upsample_nearest")?;
        if factor == 0 {
            return Err(Error::InvalidArgument("upsample factor must be positive".into()));
        }
        let (ho, wo) = (h * factor, w * factor);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for p in 0..n * c {
            let src = &xv[p * h * w..(p + 1) * h * w];
            for oy in 0..ho {
                let row = &src[(oy / factor) * w..(oy / factor + 1) * w];
                for ox in 0..wo {
                    out.push(row[ox / factor]);
                }
            }
        }
        let v = Tensor::new(vec![n, c, ho, wo], out)?;
        self.push("upsample_nearest", v, &[x], Op::Upsample { x, factor })
    }

    /// Concatenates along axis 1.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (na, ca, ia) = channel_view(&sa, "concat_channels")?;
        let (nb, cb, ib) = channel_view(&sb, "concat_channels")?;
        if na != nb || ia != ib || sa[2..] != sb[2..] {
            return Err(Error::shape("concat_channels", &sa, &sb));
        }
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(va.len() + vb.len());
        for i in 0..na {
            out.extend_from_slice(&va[i * ca * ia..(i + 1) * ca * ia]);
            out.extend_from_slice(&vb[i * cb * ib..(i + 1) * cb * ib]);
        }
        let mut shape = sa.clone();
        shape[1] = ca + cb;
        let v = Tensor::new(shape, out)?;
        self.push("concat_channels", v, &[a, b], Op::ConcatChannels(a, b))
    }

    /// Batch normalization over every axis except 1, using the current batch's
    /// biased statistics. Returns the statistics alongside the output.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let shape = self.shape(x).to_vec();
        let (n, c, inner) = channel_view(&shape, "batch_norm")?;
        self.check_affine("batch_norm", c, gamma, beta)?;
        let m = T::lit((n * inner) as f64);
        let xv = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for i in 0..n {
            for ch in 0..c {
                let s: T = xv[(i * c + ch) * inner..(i * c + ch + 1) * inner].iter().copied().sum();
                mean[ch] += s;
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for i in 0..n {
            for ch in 0..c {
                let mu = mean[ch];
                let s: T = xv[(i * c + ch) * inner..(i * c + ch + 1) * inner]
                    .iter()
                    .map(|&v| (v - mu) * (v - mu))
                    .sum();
                var[ch] += s;
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for i in 0..n {
            for ch in 0..c {
                for &v in &xv[(i * c + ch) * inner..(i * c + ch + 1) * inner] {
                    let xh = (v - mean[ch]) * inv_std[ch];
                    xhat.push(xh);
                    out.push(gv[ch] * xh + bv[ch]);
                }
            }
        }
        let v = Tensor::new(shape, out)?;
        let var_out = self.push(
            "batch_norm",
            v,
            &[x, gamma, beta],
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )?;
        Ok((var_out, BatchStats { mean, var }))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, c, inner) = channel_view(&shape, "batch_norm_eval")?;
        self.check_affine("batch_norm_eval", c, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm_eval", &[c], &[mean.len()]));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (xv, gv, bv) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let mut out = Vec::with_capacity(xv.len());
        for i in 0..n {
            for ch in 0..c {
                let (mu, is, g, b) = (mean[ch], inv_std[ch], gv[ch], bv[ch]);
                out.extend(
                    xv[(i * c + ch) * inner..(i * c + ch + 1) * inner]
                        .iter()
                        .map(|&v| g * (v - mu) * is + b),
                );
            }
        }
        let v = Tensor::new(shape, out)?;
        self.push(
            "batch_norm_eval",
            v,
            &[x, gamma, beta],
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
            },
        )
    }

    fn check_affine(&self, op: &'static str, c: usize, gamma: Var, beta: Var) -> Result<()> {
        if self.shape(gamma) != [c] {
            return Err(Error::shape(op, &[c], self.shape(gamma)));
        }
        if self.shape(beta) != [c] {
            return Err(Error::shape(op, &[c], self.shape(beta)));
        }
        Ok(())
    }

    /// Divides each position's channel vector by `max(||v||, eps)`.
    pub fn l2_normalize_channels(&mut self, x: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (n, c, inner) = channel_view(&shape, "l2_normalize_channels")?;
        let xv = self.value(x).data();
        let mut norm = vec![T::zero(); n * inner];
        for i in 0..n {
            for ch in 0..c {
                let row = &xv[(i * c + ch) * inner..(i * c + ch + 1) * inner];
                for (k, &v) in row.iter().enumerate() {
                    norm[i * inner + k] += v * v;
                }
            }
        }
        norm.iter_mut().for_each(|v| *v = v.sqrt());
        let mut out = vec![T::zero(); xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * inner;
                for k in 0..inner {
                    out[off + k] = xv[off + k] / norm[i * inner + k].max(eps);
                }
            }
        }
        let v = Tensor::new(shape, out)?;
        self.push("l2_normalize_channels", v, &[x], Op::L2Normalize { x, norm, eps })
    }

    /// Rows `[start, start + count)` along axis 0.
    pub fn narrow0(&mut self, x: Var, start: usize, count: usize) -> Result<Var> {
        let v = self.value(x).narrow0(start, count)?;
        self.push("narrow0", v, &[x], Op::Narrow0 { x, start })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).sum());
        self.push("sum", v, &[a], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = Tensor::scalar(self.value(a).mean());
        self.push("mean", v, &[a], Op::Mean(a))
    }

    /// Sums `[N, C, ...]` over every axis except 1, giving `[C]`.
    pub fn channel_sum(&mut self, a: Var) -> Result<Var> {
        let (n, c, inner) = channel_view(self.shape(a), "channel_sum")?;
        let av = self.value(a).data();
        let mut out = vec![T::zero(); c];
        for i in 0..n {
            for (ch, o) in out.iter_mut().enumerate() {
                *o += av[(i * c + ch) * inner..(i * c + ch + 1) * inner].iter().copied().sum::<T>();
            }
        }
        let v = Tensor::new(vec![c], out)?;
        self.push("channel_sum", v, &[a], Op::ChannelSum(a))
    }

    pub fn flip_w(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).flip_w();
        self.push("flip_w", v, &[a], Op::FlipW(a))
    }

    pub fn flip_h(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() < 2 {
            return Err(Error::InvalidShape {
                op: "flip_h",
                msg: "needs at least 2 axes".into(),
            });
        }
        let v = self.value(a).flip_h();
        self.push("flip_h", v, &[a], Op::FlipH(a))
    }

    pub fn rot90(&mut self, a: Var, k: u8) -> Result<Var> {
        if self.shape(a).len() < 2 {
            return Err(Error::InvalidShape {
                op: "rot90",
                msg: "needs at least 2 axes".into(),
            });
        }
        let v = self.value(a).rot90(k);
        self.push("rot90", v, &[a], Op::Rot90(a, k % 4))
    }

    /// Reverse-mode sweep from a scalar `loss`, filling leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.nodes.is_empty() {
            return Err(Error::EmptyGraph);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NotScalar(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(gy) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &gy);
        }
        Ok(())
    }

    fn propagate(&mut self, idx: usize, gy: &[T]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let val = |v: Var| nodes[v.0].value.data();
        let wants = |v: Var| nodes[v.0].requires_grad;
        let y = nodes[idx].value.data();
        macro_rules! acc {
            ($v:expr, |$i:ident| $e:expr) => {{
                let v = $v;
                if wants(v) {
                    let buf = grad_buf(grads, v, nodes[v.0].value.len());
                    for ($i, g) in buf.iter_mut().enumerate() {
                        *g += $e;
                    }
                }
            }};
        }
        match &nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc!(*a, |i| gy[i]);
                acc!(*b, |i| gy[i]);
            }
            Op::Sub(a, b) => {
                acc!(*a, |i| gy[i]);
                acc!(*b, |i| -gy[i]);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc!(*a, |i| gy[i] * vb[i]);
                acc!(*b, |i| gy[i] * va[i]);
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc!(*a, |i| gy[i] / vb[i]);
                acc!(*b, |i| -gy[i] * va[i] / (vb[i] * vb[i]));
            }
            Op::Scale(a, c) => acc!(*a, |i| gy[i] * *c),
            Op::AddScalar(a) => acc!(*a, |i| gy[i]),
            Op::Relu(a) => {
                let va = val(*a);
                acc!(*a, |i| if va[i] > T::zero() { gy[i] } else { T::zero() });
            }
            Op::Exp(a) => acc!(*a, |i| gy[i] * y[i]),
            Op::Log { x, floor } => {
                let vx = val(*x);
                acc!(*x, |i| if vx[i] > *floor { gy[i] / vx[i] } else { T::zero() });
            }
            Op::Softmax(a) => {
                let (n, c, inner) = channel_view(nodes[a.0].value.shape(), "softmax").expect("checked");
                let mut dx = vec![T::zero(); y.len()];
                for i in 0..n {
                    for k in 0..inner {
                        let at = |ch: usize| (i * c + ch) * inner + k;
                        let dot: T = (0..c).map(|ch| gy[at(ch)] * y[at(ch)]).sum();
                        for ch in 0..c {
                            dx[at(ch)] = y[at(ch)] * (gy[at(ch)] - dot);
                        }
                    }
                }
                acc!(*a, |i| dx[i]);
            }
            Op::LogSoftmax(a) => {
                let (n, c, inner) = channel_view(nodes[a.0].value.shape(), "log_softmax").expect("checked");
                let mut dx = vec![T::zero(); y.len()];
                for i in 0..n {
                    for k in 0..inner {
                        let at = |ch: usize| (i * c + ch) * inner + k;
                        let total: T = (0..c).map(|ch| gy[at(ch)]).sum();
                        for ch in 0..c {
                            dx[at(ch)] = gy[at(ch)] - y[at(ch)].exp() * total;
                        }
                    }
                }
                acc!(*a, |i| dx[i]);
            }
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                let n = nodes[b.0].value.shape()[1];
                if wants(*a) {
                    // dA = dY * B^T
                    let vb = val(*b);
                    let buf = grad_buf(grads, *a, m * k);
                    T::gemm(m, n, k, T::one(), gy, n as isize, 1, vb, 1, n as isize, T::one(), buf, k as isize, 1);
                }
                if wants(*b) {
                    // dB = A^T * dY
                    let va = val(*a);
                    let buf = grad_buf(grads, *b, k * n);
                    T::gemm(k, m, n, T::one(), va, 1, k as isize, gy, n as isize, 1, T::one(), buf, n as isize, 1);
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let (n, cin, h, wd) = dims4(nodes[x.0].value.shape(), "conv2d").expect("checked");
                let (cout, _, kh, kw) = dims4(nodes[w.0].value.shape(), "conv2d").expect("checked");
                let (ho, wo) = (nodes[idx].value.shape()[2], nodes[idx].value.shape()[3]);
                let (kdim, plane) = (cin * kh * kw, ho * wo);
                let direct = kh == 1 && kw == 1 && geom.stride == 1 && geom.padding == 0;
                let (xv, wv) = (val(*x), val(*w));
                if let Some(b) = b {
                    if wants(*b) {
                        let buf = grad_buf(grads, *b, cout);
                        for i in 0..n {
                            for (co, g) in buf.iter_mut().enumerate() {
                                let off = (i * cout + co) * plane;
                                *g += gy[off..off + plane].iter().copied().sum::<T>();
                            }
                        }
                    }
                }
                if wants(*w) {
                    let mut cols = if direct { Vec::new() } else { vec![T::zero(); kdim * plane] };
                    let buf = grad_buf(grads, *w, cout * kdim);
                    for i in 0..n {
                        let img = &xv[i * cin * h * wd..(i + 1) * cin * h * wd];
                        let rhs: &[T] = if direct {
                            img
                        } else {
                            im2col(img, (cin, h, wd), (kh, kw), *geom, (ho, wo), &mut cols);
                            &cols
                        };
                        let g = &gy[i * cout * plane..(i + 1) * cout * plane];
                        // dW += dY_i * cols^T
                        T::gemm(
                            cout, plane, kdim, T::one(), g, plane as isize, 1, rhs, 1, plane as isize, T::one(), buf,
                            kdim as isize, 1,
                        );
                    }
                }
                if wants(*x) {
                    let mut dcols = vec![T::zero(); kdim * plane];
                    let buf = grad_buf(grads, *x, n * cin * h * wd);
                    for i in 0..n {
                        let g = &gy[i * cout * plane..(i + 1) * cout * plane];
                        let dst = &mut buf[i * cin * h * wd..(i + 1) * cin * h * wd];
                        if direct {
                            // dX_i += W^T * dY_i
                            T::gemm(
                                kdim, cout, plane, T::one(), wv, 1, kdim as isize, g, plane as isize, 1, T::one(),
                                dst, plane as isize, 1,
                            );
                        } else {
                            T::gemm(
                                kdim, cout, plane, T::one(), wv, 1, kdim as isize, g, plane as isize, 1, T::zero(),
                                &mut dcols, plane as isize, 1,
                            );
                            col2im(&dcols, (cin, h, wd), (kh, kw), *geom, (ho, wo), dst);
                        }
                    }
                }
            }
            Op::MaxPool { x, argmax } => {
                if wants(*x) {
                    let buf = grad_buf(grads, *x, nodes[x.0].value.len());
                    for (o, &src) in argmax.iter().enumerate() {
                        buf[src] += gy[o];
                    }
                }
            }
            Op::Upsample { x, factor } => {
                if wants(*x) {
                    let (n, c, h, w) = dims4(nodes[x.0].value.shape(), "upsample").expect("checked");
                    let (ho, wo) = (h * factor, w * factor);
                    let buf = grad_buf(grads, *x, n * c * h * w);
                    for p in 0..n * c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                buf[p * h * w + (oy / factor) * w + ox / factor] += gy[p * ho * wo + oy * wo + ox];
                            }
                        }
                    }
                }
            }
            Op::ConcatChannels(a, b) => {
                let (_, ca, inner) = channel_view(nodes[a.0].value.shape(), "concat").expect("checked");
                let cb = nodes[b.0].value.shape()[1];
                let ct = ca + cb;
                acc!(*a, |j| {
                    let (i, r) = (j / (ca * inner), j % (ca * inner));
                    gy[i * ct * inner + r]
                });
                acc!(*b, |j| {
                    let (i, r) = (j / (cb * inner), j % (cb * inner));
                    gy[i * ct * inner + ca * inner + r]
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c, inner) = channel_view(nodes[x.0].value.shape(), "batch_norm").expect("checked");
                let m = T::lit((n * inner) as f64);
                let gv = val(*gamma);
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let off = (i * c + ch) * inner;
                        for k in off..off + inner {
                            sum_dy[ch] += gy[k];
                            sum_dy_xhat[ch] += gy[k] * xhat[k];
                        }
                    }
                }
                acc!(*beta, |ch| sum_dy[ch]);
                acc!(*gamma, |ch| sum_dy_xhat[ch]);
                if wants(*x) {
                    let buf = grad_buf(grads, *x, n * c * inner);
                    for i in 0..n {
                        for ch in 0..c {
                            let scale = gv[ch] * inv_std[ch] / m;
                            let (sd, sdx) = (sum_dy[ch], sum_dy_xhat[ch]);
                            let off = (i * c + ch) * inner;
                            for k in off..off + inner {
                                buf[k] += scale * (m * gy[k] - sd - xhat[k] * sdx);
                            }
                        }
                    }
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (n, c, inner) = channel_view(nodes[x.0].value.shape(), "batch_norm_eval").expect("checked");
                let (xv, gv) = (val(*x), val(*gamma));
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let off = (i * c + ch) * inner;
                        for k in off..off + inner {
                            sum_dy[ch] += gy[k];
                            sum_dy_xhat[ch] += gy[k] * (xv[k] - mean[ch]) * inv_std[ch];
                        }
                    }
                }
                acc!(*beta, |ch| sum_dy[ch]);
                acc!(*gamma, |ch| sum_dy_xhat[ch]);
                if wants(*x) {
                    let buf = grad_buf(grads, *x, n * c * inner);
                    for i in 0..n {
                        for ch in 0..c {
                            let scale = gv[ch] * inv_std[ch];
                            let off = (i * c + ch) * inner;
                            for k in off..off + inner {
                                buf[k] += gy[k] * scale;
                            }
                        }
                    }
                }
            }
            Op::L2Normalize { x, norm, eps } => {
                let (n, c, inner) = channel_view(nodes[x.0].value.shape(), "l2_normalize").expect("checked");
                let mut dx = vec![T::zero(); y.len()];
                for i in 0..n {
                    for k in 0..inner {
                        let at = |ch: usize| (i * c + ch) * inner + k;
                        let nv = norm[i * inner + k];
                        if nv > *eps {
                            let dot: T = (0..c).map(|ch| gy[at(ch)] * y[at(ch)]).sum();
                            for ch in 0..c {
                                dx[at(ch)] = (gy[at(ch)] - y[at(ch)] * dot) / nv;
                            }
                        } else {
                            for ch in 0..c {
                                dx[at(ch)] = gy[at(ch)] / *eps;
                            }
                        }
                    }
                }
                acc!(*x, |i| dx[i]);
            }
            Op::Narrow0 { x, start } => {
                if wants(*x) {
                    let shape = nodes[x.0].value.shape();
                    let inner: usize = shape[1..].iter().product();
                    let buf = grad_buf(grads, *x, nodes[x.0].value.len());
                    for (d, g) in buf[start * inner..start * inner + gy.len()].iter_mut().zip(gy) {
                        *d += *g;
                    }
                }
            }
            Op::Sum(a) => acc!(*a, |_i| gy[0]),
            Op::Mean(a) => {
                let inv = T::one() / T::lit(nodes[a.0].value.len() as f64);
                acc!(*a, |_i| gy[0] * inv)
            }
            Op::ChannelSum(a) => {
                let (_, c, inner) = channel_view(nodes[a.0].value.shape(), "channel_sum").expect("checked");
                acc!(*a, |k| gy[(k / inner) % c]);
            }
            Op::FlipW(a) => {
                let gt = Tensor::new(nodes[idx].value.shape().to_vec(), gy.to_vec()).expect("shape");
                let back = gt.flip_w();
                acc!(*a, |i| back.data()[i]);
            }
            Op::FlipH(a) => {
                let gt = Tensor::new(nodes[idx].value.shape().to_vec(), gy.to_vec()).expect("shape");
                let back = gt.flip_h();
                acc!(*a, |i| back.data()[i]);
            }
            Op::Rot90(a, k) => {
                let gt = Tensor::new(nodes[idx].value.shape().to_vec(), gy.to_vec()).expect("shape");
                let back = gt.rot90((4 - k) % 4);
                acc!(*a, |i| back.data()[i]);
            }
        }
    }
}

/// Numerically stable (log-)softmax along axis 1.
pub fn softmax_channels<T: Scalar>(x: &Tensor<T>, log: bool) -> Result<Tensor<T>> {
    let (n, c, inner) = channel_view(x.shape(), if log { "log_softmax" } else { "softmax" })?;
    let xv = x.data();
    let mut out = vec![T::zero(); xv.len()];
    for i in 0..n {
        for k in 0..inner {
            let at = |ch: usize| (i * c + ch) * inner + k;
            let mx = (0..c).map(|ch| xv[at(ch)]).fold(T::neg_infinity(), T::max);
            let z: T = (0..c).map(|ch| (xv[at(ch)] - mx).exp()).sum();
            let lz = z.ln();
            for ch in 0..c {
                out[at(ch)] = if log {
                    xv[at(ch)] - mx - lz
                } else {
                    (xv[at(ch)] - mx).exp() / z
                };
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}
