//! Reverse-mode differentiation over a closed set of tensor operations.
//!
//! A [`Tape`] records every operation as an append-only node list, so node
//! ids are already a topological order. [`Tape::backward`] walks the ids in
//! reverse and accumulates input gradients in that fixed order, which keeps
//! results bitwise reproducible.
//!
//! Feature maps are `[N, H, W, C]` (batch, rows, cols, channels).

use std::sync::Arc;

use crate::error::{invalid, shape_mismatch, Result};
use crate::tensor::{build_upsample_op, Tensor, UpsampleOp};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { param: bool },
    Conv2d { input: NodeId, kernel: NodeId, stride: usize, padding: usize },
    Depthwise3x3 { input: NodeId, kernel: NodeId },
    Pointwise { input: NodeId, kernel: NodeId },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Relu(NodeId),
    Upsample { input: NodeId, op: Arc<UpsampleOp> },
    Mse(NodeId, NodeId),
    SqNorm(NodeId),
    Scale(NodeId, f64),
    Sum(Vec<NodeId>),
    StopGradient,
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`; zero when no path reached it.
    pub fn get(&self, tape: &Tape, id: NodeId) -> Tensor {
        self.grads
            .get(id.0)
            .and_then(|g| g.clone())
            .unwrap_or_else(|| Tensor::zeros(tape.value(id).shape()))
    }

    pub fn raw(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

fn dims4(t: &Tensor, what: &str) -> Result<[usize; 4]> {
    match t.shape() {
        &[n, h, w, c] => Ok([n, h, w, c]),
        other => Err(shape_mismatch(format!(
            "{what}: expected [N, H, W, C], got {other:?}"
        ))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Scalar value of a `[1]` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data()[0]
    }

    /// Ids of all trainable leaves, in creation order.
    pub fn param_ids(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf { param: true }))
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { param: true }, value)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { param: false }, value)
    }

    /// General 2-D convolution with zero padding.
    /// Kernel layout `[kh, kw, C_in, C_out]`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let [n, h, w, ci] = dims4(self.value(input), "conv2d input")?;
        let (kh, kw, co) = match self.value(kernel).shape() {
            &[kh, kw, kci, co] if kci == ci => (kh, kw, co),
            other => {
                return Err(shape_mismatch(format!(
                    "conv2d kernel {other:?} incompatible with {ci} input channels"
                )))
            }
        };
        if stride == 0 {
            return Err(invalid("conv2d stride must be positive"));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(shape_mismatch("conv2d kernel larger than padded input"));
        }
        let geo = ConvGeom {
            n,
            h,
            w,
            ci,
            co,
            kh,
            kw,
            stride,
            padding,
        };
        let out = conv2d_forward(&geo, self.value(input).data(), self.value(kernel).data());
        let value = Tensor::new(vec![n, geo.oh(), geo.ow(), co], out)?;
        Ok(self.push(
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
            value,
        ))
    }

    /// 3×3 depthwise convolution, stride 1, zero padding 1. Kernel `[3, 3, C]`.
    pub fn depthwise_conv3x3(&mut self, input: NodeId, kernel: NodeId) -> Result<NodeId> {
        let [n, h, w, c] = dims4(self.value(input), "depthwise input")?;
        if self.value(kernel).shape() != [3, 3, c] {
            return Err(shape_mismatch(format!(
                "depthwise kernel {:?} incompatible with {c} channels",
                self.value(kernel).shape()
            )));
        }
        let out = depthwise_forward([n, h, w, c], self.value(input).data(), self.value(kernel).data());
        let value = Tensor::new(vec![n, h, w, c], out)?;
        Ok(self.push(Op::Depthwise3x3 { input, kernel }, value))
    }

    /// 1×1 convolution. Kernel `[C_in, C_out]`.
    pub fn pointwise_conv1x1(&mut self, input: NodeId, kernel: NodeId) -> Result<NodeId> {
        let [n, h, w, ci] = dims4(self.value(input), "pointwise input")?;
        let co = match self.value(kernel).shape() {
            &[kci, co] if kci == ci => co,
            other => {
                return Err(shape_mismatch(format!(
                    "pointwise kernel {other:?} incompatible with {ci} channels"
                )))
            }
        };
        let rows = n * h * w;
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let mut out = vec![0.0; rows * co];
        for p in 0..rows {
            let o = &mut out[p * co..(p + 1) * co];
            for (c, &v) in x[p * ci..(p + 1) * ci].iter().enumerate() {
                for (oo, kk) in o.iter_mut().zip(&k[c * co..(c + 1) * co]) {
                    *oo += v * kk;
                }
            }
        }
        let value = Tensor::new(vec![n, h, w, co], out)?;
        Ok(self.push(Op::Pointwise { input, kernel }, value))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_mismatch(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let data = zip_data(self.value(a), self.value(b), |x, y| x + y);
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(Op::Add(a, b), value))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "sub")?;
        let data = zip_data(self.value(a), self.value(b), |x, y| x - y);
        let value = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(Op::Sub(a, b), value))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(Op::Relu(a), value)
    }

    /// Apply a fixed upsampling operator to every image and channel of `input`.
    pub fn upsample(&mut self, input: NodeId, op: Arc<UpsampleOp>) -> Result<NodeId> {
        let [n, h, w, c] = dims4(self.value(input), "upsample input")?;
        if op.src_extent() != (h, w) {
            return Err(shape_mismatch(format!(
                "operator expects {:?} grid, input is {h}x{w}",
                op.src_extent()
            )));
        }
        let (dh, dw) = op.dst_extent();
        let src = self.value(input).data();
        let (src_len, dst_len) = (h * w * c, dh * dw * c);
        let mut out = vec![0.0; n * dst_len];
        for b in 0..n {
            op.apply_slice(
                &src[b * src_len..(b + 1) * src_len],
                c,
                &mut out[b * dst_len..(b + 1) * dst_len],
            );
        }
        let value = Tensor::new(vec![n, dh, dw, c], out)?;
        Ok(self.push(Op::Upsample { input, op }, value))
    }

    /// Bilinear upsampling by an integer factor in both axes.
    pub fn bilinear_upsample(&mut self, input: NodeId, factor: usize) -> Result<NodeId> {
        let [_, h, w, _] = dims4(self.value(input), "upsample input")?;
        if factor == 0 {
            return Err(invalid("upsample factor must be positive"));
        }
        let op = build_upsample_op(h, w, h * factor, w * factor)?;
        self.upsample(input, Arc::new(op))
    }

    /// `(1/n) Σ_j ‖a_j − b_j‖²` where `n` is the leading (batch) extent;
    /// rank ≤ 1 inputs count as a single sample.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mse")?;
        let n = batch_extent(self.value(a));
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(Op::Mse(a, b), Tensor::scalar(s / n as f64)))
    }

    /// `Σ a²` over all elements.
    pub fn sq_norm(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sq_norm();
        self.push(Op::SqNorm(a), Tensor::scalar(s))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).map(|v| v * c);
        self.push(Op::Scale(a, c), value)
    }

    /// Sum of scalar nodes, accumulated left to right.
    pub fn sum(&mut self, items: &[NodeId]) -> Result<NodeId> {
        if items.is_empty() {
            return Err(invalid("sum of no terms"));
        }
        let mut s = 0.0;
        for &i in items {
            if self.value(i).len() != 1 {
                return Err(shape_mismatch("sum expects scalar nodes"));
            }
            s += self.scalar(i);
        }
        Ok(self.push(Op::Sum(items.to_vec()), Tensor::scalar(s)))
    }

    /// Forward identity whose backward pass sends nothing to `x`.
    pub fn stop_gradient(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).clone();
        self.push(Op::StopGradient, value)
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(invalid(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf { .. } | Op::StopGradient => {}
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            } => {
                let x = self.value(*input);
                let k = self.value(*kernel);
                let [n, h, w, ci] = dims4(x, "").expect("checked at forward");
                let ks = k.shape();
                let geo = ConvGeom {
                    n,
                    h,
                    w,
                    ci,
                    co: ks[3],
                    kh: ks[0],
                    kw: ks[1],
                    stride: *stride,
                    padding: *padding,
                };
                let (gx, gk) = conv2d_backward(&geo, x.data(), k.data(), g.data());
                accumulate(grads, *input, x.shape(), gx);
                accumulate(grads, *kernel, k.shape(), gk);
            }
            Op::Depthwise3x3 { input, kernel } => {
                let x = self.value(*input);
                let k = self.value(*kernel);
                let dims = dims4(x, "").expect("checked at forward");
                let (gx, gk) = depthwise_backward(dims, x.data(), k.data(), g.data());
                accumulate(grads, *input, x.shape(), gx);
                accumulate(grads, *kernel, k.shape(), gk);
            }
            Op::Pointwise { input, kernel } => {
                let x = self.value(*input);
                let k = self.value(*kernel);
                let ks = k.shape();
                let (ci, co) = (ks[0], ks[1]);
                let rows = x.len() / ci;
                let (xd, kd, gd) = (x.data(), k.data(), g.data());
                let mut gx = vec![0.0; x.len()];
                let mut gk = vec![0.0; k.len()];
                for p in 0..rows {
                    let go = &gd[p * co..(p + 1) * co];
                    let xi = &xd[p * ci..(p + 1) * ci];
                    let gxi = &mut gx[p * ci..(p + 1) * ci];
                    for c in 0..ci {
                        let krow = &kd[c * co..(c + 1) * co];
                        let mut s = 0.0;
                        for (a, b) in go.iter().zip(krow) {
                            s += a * b;
                        }
                        gxi[c] = s;
                        let v = xi[c];
                        for (gkk, gg) in gk[c * co..(c + 1) * co].iter_mut().zip(go) {
                            *gkk += v * gg;
                        }
                    }
                }
                accumulate(grads, *input, x.shape(), gx);
                accumulate(grads, *kernel, k.shape(), gk);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.shape(), g.data().to_vec());
                accumulate(grads, *b, g.shape(), g.data().to_vec());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.shape(), g.data().to_vec());
                accumulate(grads, *b, g.shape(), g.data().iter().map(|v| -v).collect());
            }
            Op::Relu(a) => {
                let gx = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gg)| if x > 0.0 { gg } else { 0.0 })
                    .collect();
                accumulate(grads, *a, g.shape(), gx);
            }
            Op::Upsample { input, op } => {
                let x = self.value(*input);
                let [n, h, w, c] = dims4(x, "").expect("checked at forward");
                let (dh, dw) = op.dst_extent();
                let (src_len, dst_len) = (h * w * c, dh * dw * c);
                let mut gx = vec![0.0; x.len()];
                for b in 0..n {
                    op.adjoint_add(
                        &g.data()[b * dst_len..(b + 1) * dst_len],
                        c,
                        &mut gx[b * src_len..(b + 1) * src_len],
                    );
                }
                accumulate(grads, *input, x.shape(), gx);
            }
            Op::Mse(a, b) => {
                let xa = self.value(*a);
                let xb = self.value(*b);
                let coef = 2.0 * g.data()[0] / batch_extent(xa) as f64;
                let ga: Vec<f64> = xa
                    .data()
                    .iter()
                    .zip(xb.data())
                    .map(|(x, y)| coef * (x - y))
                    .collect();
                let gb = ga.iter().map(|v| -v).collect();
                accumulate(grads, *a, xa.shape(), ga);
                accumulate(grads, *b, xb.shape(), gb);
            }
            Op::SqNorm(a) => {
                let x = self.value(*a);
                let coef = 2.0 * g.data()[0];
                accumulate(grads, *a, x.shape(), x.data().iter().map(|v| coef * v).collect());
            }
            Op::Scale(a, c) => {
                accumulate(grads, *a, g.shape(), g.data().iter().map(|v| v * c).collect());
            }
            Op::Sum(items) => {
                for &i in items {
                    accumulate(grads, i, g.shape(), g.data().to_vec());
                }
            }
        }
    }
}

fn batch_extent(t: &Tensor) -> usize {
    if t.shape().len() >= 2 {
        t.shape()[0]
    } else {
        1
    }
}

fn zip_data(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, shape: &[usize], g: Vec<f64>) {
    match &mut grads[id.0] {
        Some(acc) => {
            for (a, v) in acc.data_mut().iter_mut().zip(&g) {
                *a += v;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), g).expect("gradient shape matches value"));
        }
    }
}

struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    ci: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn oh(&self) -> usize {
        (self.h + 2 * self.padding - self.kh) / self.stride + 1
    }

    fn ow(&self) -> usize {
        (self.w + 2 * self.padding - self.kw) / self.stride + 1
    }

    /// Input row/col for output position `o` and kernel tap `k`, if inside.
    fn src(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let p = (o * self.stride + k) as isize - self.padding as isize;
        (p >= 0 && (p as usize) < extent).then_some(p as usize)
    }
}

fn conv2d_forward(geo: &ConvGeom, x: &[f64], k: &[f64]) -> Vec<f64> {
    let (oh, ow) = (geo.oh(), geo.ow());
    let (ci, co) = (geo.ci, geo.co);
    let mut out = vec![0.0; geo.n * oh * ow * co];
    for b in 0..geo.n {
        for oy in 0..oh {
            for ox in 0..ow {
                let o = &mut out[((b * oh + oy) * ow + ox) * co..][..co];
                for ky in 0..geo.kh {
                    let Some(iy) = geo.src(oy, ky, geo.h) else { continue };
                    for kx in 0..geo.kw {
                        let Some(ix) = geo.src(ox, kx, geo.w) else { continue };
                        let xi = &x[((b * geo.h + iy) * geo.w + ix) * ci..][..ci];
                        let kbase = (ky * geo.kw + kx) * ci;
                        for (c, &v) in xi.iter().enumerate() {
                            let krow = &k[(kbase + c) * co..][..co];
                            for (oo, kk) in o.iter_mut().zip(krow) {
                                *oo += v * kk;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_backward(geo: &ConvGeom, x: &[f64], k: &[f64], g: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (oh, ow) = (geo.oh(), geo.ow());
    let (ci, co) = (geo.ci, geo.co);
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    for b in 0..geo.n {
        for oy in 0..oh {
            for ox in 0..ow {
                let go = &g[((b * oh + oy) * ow + ox) * co..][..co];
                for ky in 0..geo.kh {
                    let Some(iy) = geo.src(oy, ky, geo.h) else { continue };
                    for kx in 0..geo.kw {
                        let Some(ix) = geo.src(ox, kx, geo.w) else { continue };
                        let xoff = ((b * geo.h + iy) * geo.w + ix) * ci;
                        let kbase = (ky * geo.kw + kx) * ci;
                        for c in 0..ci {
                            let koff = (kbase + c) * co;
                            let krow = &k[koff..koff + co];
                            let mut s = 0.0;
                            for (a, bb) in go.iter().zip(krow) {
                                s += a * bb;
                            }
                            gx[xoff + c] += s;
                            let v = x[xoff + c];
                            for (gkk, gg) in gk[koff..koff + co].iter_mut().zip(go) {
                                *gkk += v * gg;
                            }
                        }
                    }
                }
            }
        }
    }
    (gx, gk)
}

fn depthwise_forward([n, h, w, c]: [usize; 4], x: &[f64], k: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let o = &mut out[((b * h + y) * w + xx) * c..][..c];
                for dy in 0..3 {
                    let iy = y as isize + dy as isize - 1;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for dx in 0..3 {
                        let ix = xx as isize + dx as isize - 1;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        let xi = &x[((b * h + iy as usize) * w + ix as usize) * c..][..c];
                        let kk = &k[(dy * 3 + dx) * c..][..c];
                        for ((oo, a), bb) in o.iter_mut().zip(xi).zip(kk) {
                            *oo += a * bb;
                        }
                    }
                }
            }
        }
    }
    out
}

fn depthwise_backward(
    [n, h, w, c]: [usize; 4],
    x: &[f64],
    k: &[f64],
    g: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; x.len()];
    let mut gk = vec![0.0; k.len()];
    for b in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let go = &g[((b * h + y) * w + xx) * c..][..c];
                for dy in 0..3 {
                    let iy = y as isize + dy as isize - 1;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for dx in 0..3 {
                        let ix = xx as isize + dx as isize - 1;
                        if ix < 0 || ix as usize >= w {
                            continue;
                        }
                        let off = ((b * h + iy as usize) * w + ix as usize) * c;
                        let koff = (dy * 3 + dx) * c;
                        for ch in 0..c {
                            gx[off + ch] += go[ch] * k[koff + ch];
                            gk[koff + ch] += x[off + ch] * go[ch];
                        }
                    }
                }
            }
        }
    }
    (gx, gk)
}
