//! Reverse-mode differentiation over a fixed operation set.
//!
//! A [`Tape`] is an append-only list of nodes. Every node stores its forward
//! value and the ids of its inputs, which always precede it, so the graph is
//! acyclic by construction and [`Tape::backward`] is a single reverse sweep.
//! The tape is rebuilt for each forward pass.
//!
//! Subgradient conventions: soft-thresholding passes zero gradient inside its
//! dead zone (`|x| ≤ t`), PReLU uses slope 1 at `x = 0` for the input and
//! contributes nothing to the slope there, and `sqrt` has zero gradient at 0.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linear::LinearOperator;
use crate::tensor::{dot, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Linear {
        op: Arc<dyn LinearOperator>,
        x: NodeId,
    },
    Conv2d {
        x: NodeId,
        kernel: NodeId,
        bias: NodeId,
    },
    Prelu {
        x: NodeId,
        slope: NodeId,
    },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, f64),
    Reshape(NodeId),
    ScaleBy(NodeId, NodeId),
    AddScalar(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Dot(NodeId, NodeId),
    SoftThreshold {
        x: NodeId,
        thresholds: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    is_param: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`. Always `Some` for
    /// parameters (zero when the loss does not depend on them).
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{}: {:?} vs {:?}",
            what,
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_raw(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn accumulate(slot: &mut Option<Vec<f64>>, contribution: impl IntoIterator<Item = f64>, len: usize) {
    match slot {
        Some(acc) => {
            for (a, c) in acc.iter_mut().zip(contribution) {
                *a += c;
            }
        }
        None => {
            let v: Vec<f64> = contribution.into_iter().collect();
            debug_assert_eq!(v.len(), len);
            *slot = Some(v);
        }
    }
}

/// Size of the per-channel block of a tensor whose leading axis is channels.
fn channel_block(t: &Tensor, channels: usize) -> Result<usize> {
    if channels == 1 {
        return Ok(t.len());
    }
    match t.shape().first() {
        Some(&c) if c == channels => Ok(t.len() / channels),
        _ => Err(Error::shape(format!(
            "{} per-channel values for tensor of shape {:?}",
            channels,
            t.shape()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            is_param: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        let id = self.push(value, Op::Leaf, true);
        self.nodes[id.0].is_param = true;
        id
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Records `op(x)`; the backward rule is `op.adjoint`.
    pub fn linear(&mut self, op: Arc<dyn LinearOperator>, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.shape() != op.input_shape().as_slice() {
            return Err(Error::shape(format!(
                "linear operator expects {:?}, got {:?}",
                op.input_shape(),
                xv.shape()
            )));
        }
        let out = Tensor::from_raw(op.output_shape(), op.apply(xv.data()));
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Linear { op, x }, rg))
    }

    /// Same-padded 2D cross-correlation plus per-channel bias.
    ///
    /// `x`: `[C_in, H, W]`, `kernel`: `[C_out, C_in, kh, kw]` with odd `kh`,
    /// `kw`, `bias`: `[C_out]`.
    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, kv, bv) = (self.value(x), self.value(kernel), self.value(bias));
        let dims = conv_dims(xv, kv, bv)?;
        let out = conv_forward(&dims, xv.data(), kv.data(), bv.data());
        let rg = self.rg(&[x, kernel, bias]);
        Ok(self.push(
            Tensor::from_raw(vec![dims.c_out, dims.h, dims.w], out),
            Op::Conv2d { x, kernel, bias },
            rg,
        ))
    }

    /// Parametric ReLU with one slope per leading-axis channel.
    pub fn prelu(&mut self, x: NodeId, slope: NodeId) -> Result<NodeId> {
        let (xv, av) = (self.value(x), self.value(slope));
        let block = channel_block(xv, av.len())?;
        let a = av.data();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if v >= 0.0 { v } else { a[i / block] * v })
            .collect();
        let out = Tensor::from_raw(xv.shape().to_vec(), data);
        let rg = self.rg(&[x, slope]);
        Ok(self.push(out, Op::Prelu { x, slope }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape(self.value(a), self.value(b), "add")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape(self.value(a), self.value(b), "sub")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape(self.value(a), self.value(b), "mul")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape(self.value(a), self.value(b), "div")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x / y);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Div(a, b), rg))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let out = self.value(x).map(|v| c * v);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    /// Same data under a new shape.
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// `s · x` for a single-element node `s`.
    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        if !self.value(s).is_scalar() {
            return Err(Error::shape(format!(
                "scale_by needs a scalar factor, got {:?}",
                self.value(s).shape()
            )));
        }
        let sv = self.value(s).item();
        let out = self.value(x).map(|v| sv * v);
        let rg = self.rg(&[x, s]);
        Ok(self.push(out, Op::ScaleBy(x, s), rg))
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        let out = self.value(x).map(|v| v + c);
        let rg = self.rg(&[x]);
        self.push(out, Op::AddScalar(x), rg)
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| v * v);
        let rg = self.rg(&[x]);
        self.push(out, Op::Square(x), rg)
    }

    pub fn sqrt(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(f64::sqrt);
        let rg = self.rg(&[x]);
        self.push(out, Op::Sqrt(x), rg)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        same_shape(self.value(a), self.value(b), "dot")?;
        let d = dot(self.value(a).data(), self.value(b).data());
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::scalar(d), Op::Dot(a, b), rg))
    }

    /// `sign(x)·max(|x| − t, 0)` with one threshold per leading-axis channel
    /// (or a single shared threshold).
    pub fn soft_threshold(&mut self, x: NodeId, thresholds: Vec<f64>) -> Result<NodeId> {
        if thresholds.iter().any(|&t| !(t >= 0.0)) {
            return Err(Error::invalid("soft-threshold levels must be nonnegative"));
        }
        let xv = self.value(x);
        let block = channel_block(xv, thresholds.len())?;
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| shrink(v, thresholds[i / block]))
            .collect();
        let out = Tensor::from_raw(xv.shape().to_vec(), data);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SoftThreshold { x, thresholds }, rg))
    }

    /// Reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match g {
                Some(g) => Some(Tensor::from_raw(node.value.shape().to_vec(), g)),
                None if node.is_param => Some(Tensor::zeros(node.value.shape())),
                None => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |id: NodeId| self.nodes[id.0].value.data();
        let n = g.len();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { op, x } => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], op.adjoint(g), op.input_len());
                }
            }
            Op::Conv2d { x, kernel, bias } => {
                let (xv, kv, bv) = (self.value(*x), self.value(*kernel), self.value(*bias));
                let dims = conv_dims(xv, kv, bv).expect("shapes checked at record time");
                if self.wants(*x) {
                    let gx = conv_grad_input(&dims, kv.data(), g);
                    accumulate(&mut grads[x.0], gx, xv.len());
                }
                if self.wants(*kernel) {
                    let gk = conv_grad_kernel(&dims, xv.data(), g);
                    accumulate(&mut grads[kernel.0], gk, kv.len());
                }
                if self.wants(*bias) {
                    let plane = dims.h * dims.w;
                    let gb = g.chunks(plane).map(|c| c.iter().sum::<f64>());
                    accumulate(&mut grads[bias.0], gb, dims.c_out);
                }
            }
            Op::Prelu { x, slope } => {
                let xv = val(*x);
                let a = val(*slope);
                let block = if a.len() == 1 { n } else { n / a.len() };
                if self.wants(*x) {
                    let gx = xv
                        .iter()
                        .zip(g)
                        .enumerate()
                        .map(|(i, (&v, &gi))| if v >= 0.0 { gi } else { a[i / block] * gi });
                    accumulate(&mut grads[x.0], gx, n);
                }
                if self.wants(*slope) {
                    let mut ga = vec![0.0; a.len()];
                    for (i, (&v, &gi)) in xv.iter().zip(g).enumerate() {
                        if v < 0.0 {
                            ga[i / block] += gi * v;
                        }
                    }
                    accumulate(&mut grads[slope.0], ga, a.len());
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.iter().copied(), n);
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.iter().copied(), n);
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.iter().copied(), n);
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.iter().map(|v| -v), n);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.iter().zip(bv).map(|(x, y)| x * y), n);
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], g.iter().zip(av).map(|(x, y)| x * y), n);
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], g.iter().zip(bv).map(|(x, y)| x / y), n);
                }
                if self.wants(*b) {
                    let gb = g
                        .iter()
                        .zip(av.iter().zip(bv))
                        .map(|(gi, (x, y))| -gi * x / (y * y));
                    accumulate(&mut grads[b.0], gb, n);
                }
            }
            Op::Scale(x, c) => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], g.iter().map(|v| c * v), n);
                }
            }
            Op::Reshape(x) => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], g.iter().copied(), n);
                }
            }
            Op::ScaleBy(x, s) => {
                let sv = val(*s)[0];
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], g.iter().map(|v| sv * v), n);
                }
                if self.wants(*s) {
                    accumulate(&mut grads[s.0], [dot(g, val(*x))], 1);
                }
            }
            Op::AddScalar(x) => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.0], g.iter().copied(), n);
                }
            }
            Op::Square(x) => {
                if self.wants(*x) {
                    let gx = g.iter().zip(val(*x)).map(|(gi, v)| 2.0 * v * gi);
                    accumulate(&mut grads[x.0], gx, n);
                }
            }
            Op::Sqrt(x) => {
                if self.wants(*x) {
                    let out = node.value.data();
                    let gx = g
                        .iter()
                        .zip(out)
                        .map(|(gi, r)| if *r > 0.0 { 0.5 * gi / r } else { 0.0 });
                    accumulate(&mut grads[x.0], gx, n);
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                if self.wants(*x) {
                    let len = self.nodes[x.0].value.len();
                    let scale = match node.op {
                        Op::Mean(_) => 1.0 / len as f64,
                        _ => 1.0,
                    };
                    let gi = g[0] * scale;
                    accumulate(&mut grads[x.0], std::iter::repeat(gi).take(len), len);
                }
            }
            Op::Dot(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let len = av.len();
                if self.wants(*a) {
                    accumulate(&mut grads[a.0], bv.iter().map(|v| g[0] * v), len);
                }
                if self.wants(*b) {
                    accumulate(&mut grads[b.0], av.iter().map(|v| g[0] * v), len);
                }
            }
            Op::SoftThreshold { x, thresholds } => {
                if self.wants(*x) {
                    let block = n / thresholds.len().max(1);
                    let block = if thresholds.len() == 1 { n } else { block };
                    let gx = g.iter().zip(val(*x)).enumerate().map(|(i, (gi, v))| {
                        if v.abs() > thresholds[i / block] {
                            *gi
                        } else {
                            0.0
                        }
                    });
                    accumulate(&mut grads[x.0], gx, n);
                }
            }
        }
    }
}

/// Scalar soft-threshold `sign(x)·max(|x| − t, 0)`.
pub fn shrink(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

struct ConvDims {
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
}

fn conv_dims(x: &Tensor, k: &Tensor, b: &Tensor) -> Result<ConvDims> {
    let (xs, ks) = (x.shape(), k.shape());
    if xs.len() != 3 || ks.len() != 4 {
        return Err(Error::shape(format!(
            "conv2d expects [C,H,W] input and [Co,Ci,kh,kw] kernel, got {:?} and {:?}",
            xs, ks
        )));
    }
    if ks[1] != xs[0] {
        return Err(Error::shape(format!(
            "conv2d channel mismatch: input has {}, kernel expects {}",
            xs[0], ks[1]
        )));
    }
    if ks[2] % 2 == 0 || ks[3] % 2 == 0 {
        return Err(Error::shape(format!("conv2d kernel {}x{} is not odd", ks[2], ks[3])));
    }
    if b.len() != ks[0] {
        return Err(Error::shape(format!(
            "conv2d bias has {} entries for {} output channels",
            b.len(),
            ks[0]
        )));
    }
    Ok(ConvDims {
        c_in: xs[0],
        c_out: ks[0],
        h: xs[1],
        w: xs[2],
        kh: ks[2],
        kw: ks[3],
    })
}

/// Adds `weight · src[y + oy, x + ox]` into `dst[y, x]` wherever the source
/// index lies inside the plane (zero padding).
#[inline]
fn shifted_axpy(dst: &mut [f64], src: &[f64], h: usize, w: usize, oy: isize, ox: isize, weight: f64) {
    if weight == 0.0 {
        return;
    }
    let y0 = (-oy).max(0) as usize;
    let y1 = (h as isize - oy).min(h as isize).max(0) as usize;
    let x0 = (-ox).max(0) as usize;
    let x1 = (w as isize - ox).min(w as isize).max(0) as usize;
    if x0 >= x1 {
        return;
    }
    for y in y0..y1 {
        let sy = (y as isize + oy) as usize;
        let d = &mut dst[y * w + x0..y * w + x1];
        let s = &src[sy * w + (x0 as isize + ox) as usize..sy * w + (x1 as isize + ox) as usize];
        for (a, b) in d.iter_mut().zip(s) {
            *a += weight * b;
        }
    }
}

fn conv_forward(d: &ConvDims, x: &[f64], k: &[f64], b: &[f64]) -> Vec<f64> {
    let plane = d.h * d.w;
    let (ph, pw) = ((d.kh / 2) as isize, (d.kw / 2) as isize);
    let mut out = vec![0.0; d.c_out * plane];
    out.par_chunks_mut(plane).enumerate().for_each(|(co, o)| {
        for ci in 0..d.c_in {
            let src = &x[ci * plane..(ci + 1) * plane];
            for dy in 0..d.kh {
                for dx in 0..d.kw {
                    let wgt = k[((co * d.c_in + ci) * d.kh + dy) * d.kw + dx];
                    shifted_axpy(o, src, d.h, d.w, dy as isize - ph, dx as isize - pw, wgt);
                }
            }
        }
        for v in o.iter_mut() {
            *v += b[co];
        }
    });
    out
}

fn conv_grad_input(d: &ConvDims, k: &[f64], g: &[f64]) -> Vec<f64> {
    let plane = d.h * d.w;
    let (ph, pw) = ((d.kh / 2) as isize, (d.kw / 2) as isize);
    let mut gx = vec![0.0; d.c_in * plane];
    gx.par_chunks_mut(plane).enumerate().for_each(|(ci, o)| {
        for co in 0..d.c_out {
            let src = &g[co * plane..(co + 1) * plane];
            for dy in 0..d.kh {
                for dx in 0..d.kw {
                    let wgt = k[((co * d.c_in + ci) * d.kh + dy) * d.kw + dx];
                    shifted_axpy(o, src, d.h, d.w, ph - dy as isize, pw - dx as isize, wgt);
                }
            }
        }
    });
    gx
}

fn conv_grad_kernel(d: &ConvDims, x: &[f64], g: &[f64]) -> Vec<f64> {
    let plane = d.h * d.w;
    let (ph, pw) = ((d.kh / 2) as isize, (d.kw / 2) as isize);
    let per_out = d.c_in * d.kh * d.kw;
    let mut gk = vec![0.0; d.c_out * per_out];
    gk.par_chunks_mut(per_out).enumerate().for_each(|(co, gko)| {
        let go = &g[co * plane..(co + 1) * plane];
        for ci in 0..d.c_in {
            let src = &x[ci * plane..(ci + 1) * plane];
            for dy in 0..d.kh {
                let oy = dy as isize - ph;
                for dx in 0..d.kw {
                    let ox = dx as isize - pw;
                    let y0 = (-oy).max(0) as usize;
                    let y1 = (d.h as isize - oy).min(d.h as isize).max(0) as usize;
                    let x0 = (-ox).max(0) as usize;
                    let x1 = (d.w as isize - ox).min(d.w as isize).max(0) as usize;
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + oy) as usize;
                        for xx in x0..x1 {
                            acc += go[y * d.w + xx] * src[sy * d.w + (xx as isize + ox) as usize];
                        }
                    }
                    gko[(ci * d.kh + dy) * d.kw + dx] = acc;
                }
            }
        }
    });
    gk
}
