//! Eager reverse-mode graph.
//!
//! Every op computes its value when it is added, so a [`NodeId`] is always
//! backed by a finished tensor. Parents always precede their children in
//! the node list, which makes the list itself a topological order and the
//! graph acyclic by construction; [`Graph::backward`] walks it in reverse.

use std::f64::consts::{LN_2, SQRT_2};

use super::gemm::gemm;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    },
    UpsampleNearest {
        input: NodeId,
        factor: usize,
    },
    PixelShuffle {
        input: NodeId,
        factor: usize,
    },
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
    },
    LeakyRelu {
        input: NodeId,
        slope: f64,
    },
    Sigmoid(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    MaskMul {
        input: NodeId,
        mask: NodeId,
    },
    Scale {
        input: NodeId,
        factor: f64,
    },
    AddScalar(NodeId),
    Abs(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Reshape(NodeId),
    GaussianBits {
        symbols: NodeId,
        mean: NodeId,
        log_scale: NodeId,
        floor: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::UpsampleNearest { .. } => "upsample_nearest",
            Op::PixelShuffle { .. } => "pixel_shuffle",
            Op::Linear { .. } => "linear",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::MaskMul { .. } => "mask_mul",
            Op::Scale { .. } => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Abs(_) => "abs",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Reshape(_) => "reshape",
            Op::GaussianBits { .. } => "gaussian_bits",
        }
    }

    fn parents(&self) -> Vec<NodeId> {
        match *self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            }
            | Op::Linear {
                input,
                weight,
                bias,
            } => {
                let mut p = vec![input, weight];
                p.extend(bias);
                p
            }
            Op::UpsampleNearest { input, .. }
            | Op::PixelShuffle { input, .. }
            | Op::LeakyRelu { input, .. }
            | Op::Scale { input, .. } => vec![input],
            Op::AddScalar(a)
            | Op::Sigmoid(a)
            | Op::Abs(a)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a) => vec![a],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => vec![a, b],
            Op::MaskMul { input, mask } => vec![input, mask],
            Op::GaussianBits {
                symbols,
                mean,
                log_scale,
                ..
            } => vec![symbols, mean, log_scale],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// A recorded computation. Build one per forward pass.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every node that needed one.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient of `id`, or `None` if it was never reached.
    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, lhs: &Tensor, rhs: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

fn conv_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = size + 2 * padding;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let p = self.cols();
        for ci in 0..self.c {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let drow = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            drow.fill(0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            *d = if ix >= 0 && ix < self.w as isize {
                                src[ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let p = self.cols();
        for ci in 0..self.c {
            let plane = &mut dx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let drow =
                            &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let srow = &src[oy * self.wo..(oy + 1) * self.wo];
                        for (ox, &v) in srow.iter().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                drow[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / SQRT_2)
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Probability mass of the unit-width bin centred on `v` under N(mean, scale²).
pub(crate) fn gaussian_bin_mass(v: f64, mean: f64, scale: f64) -> f64 {
    let upper = (v + 0.5 - mean) / scale;
    let lower = (v - 0.5 - mean) / scale;
    // Evaluate in whichever tail keeps the difference away from 1 - 1.
    if upper + lower > 0.0 {
        std_normal_cdf(-lower) - std_normal_cdf(-upper)
    } else {
        std_normal_cdf(upper) - std_normal_cdf(lower)
    }
}

struct BitsTerms {
    bits: f64,
    d_symbol: f64,
    d_log_scale: f64,
}

fn gaussian_bits_terms(v: f64, mean: f64, log_scale: f64, floor: f64) -> BitsTerms {
    let scale = log_scale.exp();
    let p = gaussian_bin_mass(v, mean, scale);
    if p < floor || !p.is_finite() {
        return BitsTerms {
            bits: -floor.log2(),
            d_symbol: 0.0,
            d_log_scale: 0.0,
        };
    }
    let upper = (v + 0.5 - mean) / scale;
    let lower = (v - 0.5 - mean) / scale;
    let pu = std_normal_pdf(upper);
    let pl = std_normal_pdf(lower);
    BitsTerms {
        bits: -p.log2(),
        d_symbol: -(pu - pl) / (scale * p * LN_2),
        d_log_scale: (upper * pu - lower * pl) / (p * LN_2),
    }
}

fn channel_axis_len(shape: &[usize]) -> Option<(usize, usize)> {
    // (channels, spatial size) for [C, h, w] or [N, C, h, w]
    match shape.len() {
        3 => Some((shape[0], shape[1] * shape[2])),
        4 => Some((shape[1], shape[2] * shape[3])),
        _ => None,
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A constant input; no gradient is computed for it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// A differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            needs_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Which side of every non-smooth point the recorded forward pass sits
    /// on: leaky-relu and abs inputs above zero, and rate bins whose mass is
    /// above the floor. Two passes with equal patterns share one smooth piece.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::LeakyRelu { input, .. } | Op::Abs(input) => {
                    out.extend(self.nodes[input.0].value.data().iter().map(|&v| v > 0.0));
                }
                Op::GaussianBits {
                    symbols,
                    mean,
                    log_scale,
                    floor,
                } => {
                    let y = &self.nodes[symbols.0].value;
                    let (mu, ls) = (self.nodes[mean.0].value.data(), self.nodes[log_scale.0].value.data());
                    if let Some((c, plane)) = channel_axis_len(y.shape()) {
                        out.extend(y.data().iter().enumerate().map(|(i, &v)| {
                            let ch = (i / plane) % c;
                            gaussian_bin_mass(v, mu[ch], ls[ch].exp()) >= floor
                        }));
                    }
                }
                _ => {}
            }
        }
        out
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Scalar value of `id`, failing if it is not a finite scalar.
    pub fn scalar(&self, id: NodeId, what: &str) -> Result<f64> {
        let v = self.value(id);
        if !v.is_scalar() {
            return Err(Error::contract(format!(
                "{what} must be scalar, got shape {:?}",
                v.shape()
            )));
        }
        if !v.item().is_finite() {
            return Err(Error::Numeric(format!("{what} = {}", v.item())));
        }
        Ok(v.item())
    }

    // ---- forward ops -------------------------------------------------------

    /// 2-D convolution of `[N, C, H, W]` by `[O, C, kh, kw]` with symmetric
    /// zero padding.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let x = self.value(input);
        let w = self.value(weight);
        if x.rank() != 4 || w.rank() != 4 || x.shape()[1] != w.shape()[1] {
            return Err(shape_err("conv2d", x, w));
        }
        let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        if let Some(b) = bias {
            let bt = self.value(b);
            if bt.shape() != [o] {
                return Err(shape_err("conv2d bias", w, bt));
            }
        }
        let (ho, wo) = match (
            conv_out(h, kh, stride, padding),
            conv_out(wd, kw, stride, padding),
        ) {
            (Some(ho), Some(wo)) => (ho, wo),
            _ => return Err(shape_err("conv2d", x, w)),
        };
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad: padding,
            ho,
            wo,
        };
        let (rows, p) = (geom.rows(), geom.cols());
        let mut out = vec![0.0; n * o * p];
        let mut cols = vec![0.0; rows * p];
        let xin = x.data();
        for ni in 0..n {
            geom.im2col(&xin[ni * c * h * wd..(ni + 1) * c * h * wd], &mut cols);
            let dst = &mut out[ni * o * p..(ni + 1) * o * p];
            gemm(o, rows, p, w.data(), false, &cols, false, 0.0, dst);
            if let Some(b) = bias {
                let bd = self.value(b).data();
                for (oi, chunk) in dst.chunks_mut(p).enumerate() {
                    for v in chunk {
                        *v += bd[oi];
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, o, ho, wo], out)?;
        Ok(self.push(
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            value,
        ))
    }

    pub fn upsample_nearest(&mut self, input: NodeId, factor: usize) -> Result<NodeId> {
        let x = self.value(input);
        if x.rank() != 4 || factor == 0 {
            return Err(Error::contract(format!(
                "upsample_nearest needs a rank-4 input and factor > 0, got {:?} x{factor}",
                x.shape()
            )));
        }
        let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (h2, w2) = (h * factor, w * factor);
        let xd = x.data();
        let mut out = vec![0.0; n * c * h2 * w2];
        for plane in 0..n * c {
            let src = &xd[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * h2 * w2..(plane + 1) * h2 * w2];
            for y in 0..h2 {
                let srow = &src[(y / factor) * w..(y / factor + 1) * w];
                for (xo, d) in dst[y * w2..(y + 1) * w2].iter_mut().enumerate() {
                    *d = srow[xo / factor];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h2, w2], out)?;
        Ok(self.push(Op::UpsampleNearest { input, factor }, value))
    }

    /// `[N, C·r², H, W] → [N, C, H·r, W·r]`.
    pub fn pixel_shuffle(&mut self, input: NodeId, factor: usize) -> Result<NodeId> {
        let x = self.value(input);
        let r2 = factor * factor;
        if x.rank() != 4 || factor == 0 || x.shape()[1] % r2 != 0 {
            return Err(Error::contract(format!(
                "pixel_shuffle x{factor} needs rank-4 input with channels divisible by {r2}, got {:?}",
                x.shape()
            )));
        }
        let (n, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let c = cin / r2;
        let mut out = vec![0.0; x.numel()];
        let xd = x.data();
        for ni in 0..n {
            for ci in 0..c {
                for i in 0..factor {
                    for j in 0..factor {
                        let src_c = ci * r2 + i * factor + j;
                        let src = &xd[((ni * cin + src_c) * h) * w..((ni * cin + src_c + 1) * h) * w];
                        for y in 0..h {
                            for xx in 0..w {
                                let oy = y * factor + i;
                                let ox = xx * factor + j;
                                out[((ni * c + ci) * h * factor + oy) * w * factor + ox] =
                                    src[y * w + xx];
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, c, h * factor, w * factor], out)?;
        Ok(self.push(Op::PixelShuffle { input, factor }, value))
    }

    /// `[N, I] · [O, I]ᵀ + b`.
    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: Option<NodeId>) -> Result<NodeId> {
        let x = self.value(input);
        let w = self.value(weight);
        if x.rank() != 2 || w.rank() != 2 || x.shape()[1] != w.shape()[1] {
            return Err(shape_err("linear", x, w));
        }
        let (n, i, o) = (x.shape()[0], x.shape()[1], w.shape()[0]);
        let mut out = vec![0.0; n * o];
        gemm(n, i, o, x.data(), false, w.data(), true, 0.0, &mut out);
        if let Some(b) = bias {
            let bt = self.value(b);
            if bt.shape() != [o] {
                return Err(shape_err("linear bias", w, bt));
            }
            for row in out.chunks_mut(o) {
                for (v, bv) in row.iter_mut().zip(bt.data()) {
                    *v += bv;
                }
            }
        }
        let value = Tensor::new(vec![n, o], out)?;
        Ok(self.push(
            Op::Linear {
                input,
                weight,
                bias,
            },
            value,
        ))
    }

    pub fn leaky_relu(&mut self, input: NodeId, slope: f64) -> NodeId {
        let value = self
            .value(input)
            .map(|v| if v > 0.0 { v } else { slope * v });
        self.push(Op::LeakyRelu { input, slope }, value)
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let value = self.value(input).map(sigmoid);
        self.push(Op::Sigmoid(input), value)
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.same_shape(tb, op.name())?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(op, value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// Pixelwise product with an `[H, W]` mask broadcast over every leading
    /// axis (channels and batch).
    pub fn mask_mul(&mut self, input: NodeId, mask: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let m = self.value(mask);
        let r = x.rank();
        if m.rank() != 2 || r < 2 || x.shape()[r - 2..] != *m.shape() {
            return Err(shape_err("mask_mul", x, m));
        }
        let plane = m.numel();
        let md = m.data();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * md[i % plane])
            .collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        Ok(self.push(Op::MaskMul { input, mask }, value))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let value = self.value(input).map(|v| v * factor);
        self.push(Op::Scale { input, factor }, value)
    }

    pub fn add_scalar(&mut self, input: NodeId, value: f64) -> NodeId {
        let out = self.value(input).map(|v| v + value);
        self.push(Op::AddScalar(input), out)
    }

    pub fn abs(&mut self, input: NodeId) -> NodeId {
        let value = self.value(input).map(f64::abs);
        self.push(Op::Abs(input), value)
    }

    pub fn square(&mut self, input: NodeId) -> NodeId {
        let value = self.value(input).map(|v| v * v);
        self.push(Op::Square(input), value)
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let s = self.value(input).data().iter().sum();
        self.push(Op::Sum(input), Tensor::scalar(s))
    }

    pub fn mean(&mut self, input: NodeId) -> NodeId {
        let t = self.value(input);
        let s: f64 = t.data().iter().sum();
        let m = s / t.numel() as f64;
        self.push(Op::Mean(input), Tensor::scalar(m))
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(input).reshape(shape)?;
        Ok(self.push(Op::Reshape(input), value))
    }

    /// Total bits `Σ −log₂ p(v)` of a `[C, h, w]` or `[N, C, h, w]` tensor
    /// under a per-channel discretized Gaussian with unit-width bins,
    /// `p(v) = Φ((v + ½ − μ)/σ) − Φ((v − ½ − μ)/σ)`, `σ = exp(log_scale)`.
    /// Masses below `floor` are clamped to it and pass no gradient.
    pub fn gaussian_bits(
        &mut self,
        symbols: NodeId,
        mean: NodeId,
        log_scale: NodeId,
        floor: f64,
    ) -> Result<NodeId> {
        let y = self.value(symbols);
        let (mu, ls) = (self.value(mean), self.value(log_scale));
        let (c, plane) = channel_axis_len(y.shape()).ok_or_else(|| {
            Error::contract(format!(
                "gaussian_bits needs a [C,h,w] or [N,C,h,w] tensor, got {:?}",
                y.shape()
            ))
        })?;
        if mu.shape() != [c] {
            return Err(shape_err("gaussian_bits mean", y, mu));
        }
        if ls.shape() != [c] {
            return Err(shape_err("gaussian_bits log_scale", y, ls));
        }
        let (mu, ls) = (mu.data(), ls.data());
        let total = y
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / plane) % c;
                gaussian_bits_terms(v, mu[ch], ls[ch], floor).bits
            })
            .sum();
        Ok(self.push(
            Op::GaussianBits {
                symbols,
                mean,
                log_scale,
                floor,
            },
            Tensor::scalar(total),
        ))
    }

    // ---- backward ----------------------------------------------------------

    /// Gradients of the scalar `root` with respect to every node on a path to
    /// a differentiable leaf. Fan-out contributions accumulate additively.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(rv.shape(), 1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            for p in node.op.parents() {
                if p.0 >= idx {
                    return Err(Error::Structure(format!(
                        "node {idx} ({}) has parent {} that does not precede it",
                        node.op.name(),
                        p.0
                    )));
                }
            }
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[idx];
        let gd = g.data();
        match node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let x = self.value(input);
                let w = self.value(weight);
                let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
                let (ho, wo) = (node.value.shape()[2], node.value.shape()[3]);
                let geom = ConvGeom {
                    c,
                    h,
                    w: wd,
                    kh,
                    kw,
                    stride,
                    pad: padding,
                    ho,
                    wo,
                };
                let (rows, p) = (geom.rows(), geom.cols());
                let want_x = self.wants(input);
                let want_w = self.wants(weight);
                let mut dw = vec![0.0; w.numel()];
                let mut dx = vec![0.0; if want_x { x.numel() } else { 0 }];
                let mut cols = vec![0.0; rows * p];
                for ni in 0..n {
                    let gn = &gd[ni * o * p..(ni + 1) * o * p];
                    if want_w {
                        geom.im2col(&x.data()[ni * c * h * wd..(ni + 1) * c * h * wd], &mut cols);
                        gemm(o, p, rows, gn, false, &cols, true, 1.0, &mut dw);
                    }
                    if want_x {
                        gemm(rows, o, p, w.data(), true, gn, false, 0.0, &mut cols);
                        geom.col2im(&cols, &mut dx[ni * c * h * wd..(ni + 1) * c * h * wd]);
                    }
                }
                if want_w {
                    self.accumulate(grads, weight, Tensor::new(w.shape().to_vec(), dw)?);
                }
                if want_x {
                    self.accumulate(grads, input, Tensor::new(x.shape().to_vec(), dx)?);
                }
                if let Some(b) = bias {
                    if self.wants(b) {
                        let mut db = vec![0.0; o];
                        for ni in 0..n {
                            for (oi, d) in db.iter_mut().enumerate() {
                                let start = (ni * o + oi) * p;
                                *d += gd[start..start + p].iter().sum::<f64>();
                            }
                        }
                        self.accumulate(grads, b, Tensor::new(vec![o], db)?);
                    }
                }
            }
            Op::UpsampleNearest { input, factor } => {
                let x = self.value(input);
                let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                let (h2, w2) = (h * factor, w * factor);
                let mut dx = vec![0.0; x.numel()];
                for plane in 0..n * c {
                    let src = &gd[plane * h2 * w2..(plane + 1) * h2 * w2];
                    let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for y in 0..h2 {
                        for xo in 0..w2 {
                            dst[(y / factor) * w + xo / factor] += src[y * w2 + xo];
                        }
                    }
                }
                self.accumulate(grads, input, Tensor::new(x.shape().to_vec(), dx)?);
            }
            Op::PixelShuffle { input, factor } => {
                let x = self.value(input);
                let (n, cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                let r2 = factor * factor;
                let c = cin / r2;
                let mut dx = vec![0.0; x.numel()];
                for ni in 0..n {
                    for ci in 0..c {
                        for i in 0..factor {
                            for j in 0..factor {
                                let src_c = ci * r2 + i * factor + j;
                                for y in 0..h {
                                    for xx in 0..w {
                                        let oy = y * factor + i;
                                        let ox = xx * factor + j;
                                        dx[((ni * cin + src_c) * h + y) * w + xx] += gd
                                            [((ni * c + ci) * h * factor + oy) * w * factor + ox];
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, input, Tensor::new(x.shape().to_vec(), dx)?);
            }
            Op::Linear {
                input,
                weight,
                bias,
            } => {
                let x = self.value(input);
                let w = self.value(weight);
                let (n, i, o) = (x.shape()[0], x.shape()[1], w.shape()[0]);
                if self.wants(input) {
                    let mut dx = vec![0.0; n * i];
                    gemm(n, o, i, gd, false, w.data(), false, 0.0, &mut dx);
                    self.accumulate(grads, input, Tensor::new(vec![n, i], dx)?);
                }
                if self.wants(weight) {
                    let mut dw = vec![0.0; o * i];
                    gemm(o, n, i, gd, true, x.data(), false, 0.0, &mut dw);
                    self.accumulate(grads, weight, Tensor::new(vec![o, i], dw)?);
                }
                if let Some(b) = bias {
                    if self.wants(b) {
                        let mut db = vec![0.0; o];
                        for row in gd.chunks(o) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        self.accumulate(grads, b, Tensor::new(vec![o], db)?);
                    }
                }
            }
            Op::LeakyRelu { input, slope } => {
                let x = self.value(input);
                let dx = Tensor::from_fn(x.shape(), |k| {
                    if x.data()[k] > 0.0 {
                        gd[k]
                    } else {
                        slope * gd[k]
                    }
                });
                self.accumulate(grads, input, dx);
            }
            Op::Sigmoid(input) => {
                let s = node.value.data();
                let dx = Tensor::from_fn(node.value.shape(), |k| gd[k] * s[k] * (1.0 - s[k]));
                self.accumulate(grads, input, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                if self.wants(b) {
                    self.accumulate(grads, b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                if self.wants(a) {
                    let da = Tensor::from_fn(ta.shape(), |k| gd[k] * tb.data()[k]);
                    self.accumulate(grads, a, da);
                }
                if self.wants(b) {
                    let db = Tensor::from_fn(tb.shape(), |k| gd[k] * ta.data()[k]);
                    self.accumulate(grads, b, db);
                }
            }
            Op::Div(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                if self.wants(a) {
                    let da = Tensor::from_fn(ta.shape(), |k| gd[k] / tb.data()[k]);
                    self.accumulate(grads, a, da);
                }
                if self.wants(b) {
                    let db = Tensor::from_fn(tb.shape(), |k| {
                        let d = tb.data()[k];
                        -gd[k] * ta.data()[k] / (d * d)
                    });
                    self.accumulate(grads, b, db);
                }
            }
            Op::MaskMul { input, mask } => {
                let x = self.value(input);
                let m = self.value(mask);
                let plane = m.numel();
                if self.wants(input) {
                    let dx = Tensor::from_fn(x.shape(), |k| gd[k] * m.data()[k % plane]);
                    self.accumulate(grads, input, dx);
                }
                if self.wants(mask) {
                    let mut dm = vec![0.0; plane];
                    for (k, (&gv, &xv)) in gd.iter().zip(x.data()).enumerate() {
                        dm[k % plane] += gv * xv;
                    }
                    self.accumulate(grads, mask, Tensor::new(m.shape().to_vec(), dm)?);
                }
            }
            Op::Scale { input, factor } => {
                self.accumulate(grads, input, g.map(|v| v * factor));
            }
            Op::AddScalar(input) => {
                self.accumulate(grads, input, g.clone());
            }
            Op::Abs(input) => {
                let x = self.value(input);
                let dx = Tensor::from_fn(x.shape(), |k| {
                    let v = x.data()[k];
                    if v > 0.0 {
                        gd[k]
                    } else if v < 0.0 {
                        -gd[k]
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, input, dx);
            }
            Op::Square(input) => {
                let x = self.value(input);
                let dx = Tensor::from_fn(x.shape(), |k| 2.0 * x.data()[k] * gd[k]);
                self.accumulate(grads, input, dx);
            }
            Op::Sum(input) => {
                let x = self.value(input);
                self.accumulate(grads, input, Tensor::full(x.shape(), gd[0]));
            }
            Op::Mean(input) => {
                let x = self.value(input);
                let v = gd[0] / x.numel() as f64;
                self.accumulate(grads, input, Tensor::full(x.shape(), v));
            }
            Op::Reshape(input) => {
                let x = self.value(input);
                self.accumulate(grads, input, g.reshape(x.shape())?);
            }
            Op::GaussianBits {
                symbols,
                mean,
                log_scale,
                floor,
            } => {
                let y = self.value(symbols);
                let (mu, ls) = (self.value(mean).data(), self.value(log_scale).data());
                let (c, plane) = channel_axis_len(y.shape()).expect("validated at forward");
                let mut dy = vec![0.0; y.numel()];
                let mut dmu = vec![0.0; c];
                let mut dls = vec![0.0; c];
                for (i, &v) in y.data().iter().enumerate() {
                    let ch = (i / plane) % c;
                    let t = gaussian_bits_terms(v, mu[ch], ls[ch], floor);
                    dy[i] = gd[0] * t.d_symbol;
                    dmu[ch] -= gd[0] * t.d_symbol;
                    dls[ch] += gd[0] * t.d_log_scale;
                }
                if self.wants(symbols) {
                    self.accumulate(grads, symbols, Tensor::new(y.shape().to_vec(), dy)?);
                }
                if self.wants(mean) {
                    self.accumulate(grads, mean, Tensor::new(vec![c], dmu)?);
                }
                if self.wants(log_scale) {
                    self.accumulate(grads, log_scale, Tensor::new(vec![c], dls)?);
                }
            }
        }
        Ok(())
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn mask_multiply_definition() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let m = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = g.mask_mul(x, m).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 0.0, 0.0, 4.0]);
    }

    #[test]
    fn mask_broadcasts_over_channels() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[3, 2, 2], 2.0));
        let m = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let y = g.mask_mul(x, m).unwrap();
        assert_eq!(
            g.value(y).data(),
            &[2.0, 0.0, 0.0, 2.0, 2.0, 0.0, 0.0, 2.0, 2.0, 0.0, 0.0, 2.0]
        );
        let bad = g.constant(Tensor::zeros(&[3, 3]));
        assert!(matches!(g.mask_mul(x, bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn leaky_relu_definition() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.leaky_relu(x, 0.2);
        assert_eq!(g.value(y).data(), &[-0.2, 0.0, 2.0]);
    }

    #[test]
    fn conv_ones_oracle() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 4, 4], 1.0));
        let k = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = g.conv2d(x, k, None, 1, 1).unwrap();
        let v = g.value(y);
        assert_eq!(v.shape(), &[1, 1, 4, 4]);
        #[rustfmt::skip]
        let want = [
            4.0, 6.0, 6.0, 4.0,
            6.0, 9.0, 9.0, 6.0,
            6.0, 9.0, 9.0, 6.0,
            4.0, 6.0, 6.0, 4.0,
        ];
        assert_eq!(v.data(), &want);
    }

    #[test]
    fn conv_stride_two_shape() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 3, 64, 64], 0.5));
        let k = g.constant(Tensor::full(&[32, 3, 5, 5], 0.01));
        let y = g.conv2d(x, k, None, 2, 2).unwrap();
        assert_eq!(g.shape(y), &[2, 32, 32, 32]);
    }

    #[test]
    fn conv_channel_mismatch_is_shape_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let k = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let err = g.conv2d(x, k, None, 1, 1).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "conv2d", .. }));
    }

    #[test]
    fn mean_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[3], &[1.0, 2.0, 3.0]));
        let sq = g.square(x);
        let root = g.mean(sq);
        let grads = g.backward(root).unwrap();
        let gx = grads.get(x).unwrap().data();
        let want = [2.0 / 3.0, 4.0 / 3.0, 2.0];
        for (a, b) in gx.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_mask_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]));
        let m = g.constant(Tensor::zeros(&[2, 2]));
        let y = g.mask_mul(x, m).unwrap();
        let root = g.mean(y);
        let grads = g.backward(root).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(t(&[2, 3], &[0.1, -4.0, 2.5, 7.0, 0.0, 1.0]));
        let root = g.sum(x);
        let grads = g.backward(root).unwrap();
        assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.param(t(&[1], &[3.0]));
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn pixel_shuffle_layout() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 4, 1, 1], &[0.0, 1.0, 2.0, 3.0]));
        let y = g.pixel_shuffle(x, 2).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).data(), &[0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn upsample_repeats() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 1, 2], &[1.0, 2.0]));
        let y = g.upsample_nearest(x, 2).unwrap();
        assert_eq!(g.value(y).data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn gaussian_bits_at_mean_unit_scale() {
        let mut g = Graph::new();
        let y = g.constant(Tensor::zeros(&[1, 1, 1]));
        let mu = g.constant(Tensor::zeros(&[1]));
        let ls = g.constant(Tensor::zeros(&[1]));
        let bits = g.gaussian_bits(y, mu, ls, 1e-12).unwrap();
        // -log2(Φ(0.5) - Φ(-0.5)) with Φ(0.5) = 0.691462461274013
        let p: f64 = 2.0 * 0.691_462_461_274_013 - 1.0;
        assert!((g.value(bits).item() - (-p.log2())).abs() < 1e-12);
    }

    #[test]
    fn gaussian_bits_tail_clamps() {
        let mut g = Graph::new();
        let y = g.param(Tensor::full(&[1, 1, 1], 100.0));
        let mu = g.constant(Tensor::zeros(&[1]));
        let ls = g.constant(Tensor::zeros(&[1]));
        let bits = g.gaussian_bits(y, mu, ls, 1e-12).unwrap();
        assert!((g.value(bits).item() - 39.863_137_138_648_35).abs() < 1e-9);
        let grads = g.backward(bits).unwrap();
        assert_eq!(grads.get(y).unwrap().data(), &[0.0]);
    }
}
