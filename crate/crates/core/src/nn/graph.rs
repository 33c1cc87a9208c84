//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation of one forward pass as a node.
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients of
//! a scalar output into a [`ParamGrads`] buffer aligned with the
//! [`ParamStore`] the graph reads its parameters from.

use super::params::{ParamGrads, ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Param(ParamId),
    Input,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Silu(NodeId),
    Concat(NodeId, NodeId),
    AddChannel {
        x: NodeId,
        v: NodeId,
    },
    Upsample2x(NodeId),
    MseLoss {
        x: NodeId,
        target: Tensor,
    },
    Dot {
        x: NodeId,
        weights: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Option<Tensor>,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.params.get(*p),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Option<Tensor>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> NodeId {
        self.push(Some(t), Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.push(None, Op::Param(id))
    }

    /// Parameter leaf looked up by name.
    pub fn named(&mut self, name: &str) -> Result<NodeId> {
        let id = self
            .params
            .id(name)
            .ok_or_else(|| Error::Model(format!("unknown parameter {name}")))?;
        Ok(self.param(id))
    }

    /// 2-D convolution with zero padding `(k - 1) / 2`. `w` is
    /// `[Cout, Cin, k, k]`, `b` is `[Cout]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> Result<NodeId> {
        let out = conv2d_forward(self.value(x), self.value(w), self.value(b), stride)?;
        Ok(self.push(Some(out), Op::Conv2d { x, w, b, stride }))
    }

    /// `w · x + b` with `w` of shape `[Out, In]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (out, inp) = match wv.shape() {
            [o, i] => (*o, *i),
            s => return Err(Error::Shape(format!("linear weight {s:?}"))),
        };
        if xv.len() != inp || bv.len() != out {
            return Err(Error::Shape(format!(
                "linear {:?} x {:?} + {:?}",
                wv.shape(),
                xv.shape(),
                bv.shape()
            )));
        }
        let mut y = bv.data().to_vec();
        gemm(out, inp, 1, wv.data(), false, xv.data(), false, &mut y, 1.0);
        Ok(self.push(Some(Tensor::vector(y)), Op::Linear { x, w, b }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(Error::Shape(format!(
                "add {:?} + {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = av.clone();
        out.add_assign(bv);
        Ok(self.push(Some(out), Op::Add(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let mut out = self.value(a).clone();
        out.scale_assign(s);
        self.push(Some(out), Op::Scale(a, s))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let data = av.data().iter().map(|&v| v * sigmoid(v)).collect();
        let out = Tensor::from_vec(av.shape(), data).expect("same shape");
        self.push(Some(out), Op::Silu(a))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = Tensor::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(Some(out), Op::Concat(a, b)))
    }

    /// Adds the vector `v` (`[C]`) to every pixel of channel `c` of `x`.
    pub fn add_channel(&mut self, x: NodeId, v: NodeId) -> Result<NodeId> {
        let (xv, vv) = (self.value(x), self.value(v));
        let (c, h, w) = xv.dims3()?;
        if vv.len() != c {
            return Err(Error::Shape(format!(
                "channel bias {:?} for {:?}",
                vv.shape(),
                xv.shape()
            )));
        }
        let mut out = xv.clone();
        let plane = h * w;
        for (ch, bias) in vv.data().iter().enumerate() {
            out.data_mut()[ch * plane..(ch + 1) * plane]
                .iter_mut()
                .for_each(|p| *p += bias);
        }
        Ok(self.push(Some(out), Op::AddChannel { x, v }))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(&mut self, a: NodeId) -> Result<NodeId> {
        let av = self.value(a);
        let (c, h, w) = av.dims3()?;
        let mut out = Tensor::zeros(&[c, 2 * h, 2 * w]);
        let src = av.data();
        let dst = out.data_mut();
        for ch in 0..c {
            for y in 0..2 * h {
                let srow = &src[(ch * h + y / 2) * w..(ch * h + y / 2 + 1) * w];
                let drow = &mut dst[(ch * 2 * h + y) * 2 * w..(ch * 2 * h + y + 1) * 2 * w];
                for (x, d) in drow.iter_mut().enumerate() {
                    *d = srow[x / 2];
                }
            }
        }
        Ok(self.push(Some(out), Op::Upsample2x(a)))
    }

    /// Mean squared error against a constant target; scalar output.
    pub fn mse_loss(&mut self, x: NodeId, target: Tensor) -> Result<NodeId> {
        let xv = self.value(x);
        if !xv.same_shape(&target) {
            return Err(Error::Shape(format!(
                "mse {:?} vs {:?}",
                xv.shape(),
                target.shape()
            )));
        }
        let n = xv.len() as f64;
        let s: f64 = xv
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(self.push(Some(Tensor::scalar(s / n)), Op::MseLoss { x, target }))
    }

    /// `Σ x_i · weights_i`; scalar output. Used to probe gradients of
    /// non-scalar nodes.
    pub fn dot(&mut self, x: NodeId, weights: Tensor) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.len() != weights.len() {
            return Err(Error::Shape("dot length mismatch".into()));
        }
        let s = xv.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum();
        Ok(self.push(Some(Tensor::scalar(s)), Op::Dot { x, weights }))
    }

    /// Accumulates `d output / d param` into `grads` for every parameter
    /// reachable from the scalar node `output`.
    pub fn backward(&self, output: NodeId, grads: &mut ParamGrads) -> Result<()> {
        if self.value(output).len() != 1 {
            return Err(Error::Shape("backward needs a scalar output".into()));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        adj[output.0] = Some(Tensor::scalar(1.0));
        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Input => {}
                Op::Param(p) => grads.get_mut(*p).add_assign(&g),
                Op::Conv2d { x, w, b, stride } => {
                    let (dx, dw, db) =
                        conv2d_backward(self.value(*x), self.value(*w), *stride, &g);
                    accumulate(&mut adj, *x, dx);
                    accumulate(&mut adj, *w, dw);
                    accumulate(&mut adj, *b, db);
                }
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (out, inp) = (wv.shape()[0], wv.shape()[1]);
                    let mut dw = vec![0.0; out * inp];
                    gemm(out, 1, inp, g.data(), false, xv.data(), false, &mut dw, 0.0);
                    let mut dx = vec![0.0; inp];
                    gemm(inp, out, 1, wv.data(), true, g.data(), false, &mut dx, 0.0);
                    accumulate(&mut adj, *x, Tensor::vector(dx));
                    accumulate(&mut adj, *w, Tensor::from_vec(&[out, inp], dw)?);
                    accumulate(&mut adj, *b, g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::Scale(a, s) => {
                    let mut g = g;
                    g.scale_assign(*s);
                    accumulate(&mut adj, *a, g);
                }
                Op::Silu(a) => {
                    let av = self.value(*a);
                    let mut g = g;
                    for (gd, &v) in g.data_mut().iter_mut().zip(av.data()) {
                        let s = sigmoid(v);
                        *gd *= s * (1.0 + v * (1.0 - s));
                    }
                    accumulate(&mut adj, *a, g);
                }
                Op::Concat(a, b) => {
                    let ca = self.value(*a).dims3()?.0;
                    let (c, _, _) = g.dims3()?;
                    accumulate(&mut adj, *a, g.channels(0, ca)?);
                    accumulate(&mut adj, *b, g.channels(ca, c)?);
                }
                Op::AddChannel { x, v } => {
                    let (c, h, w) = g.dims3()?;
                    let plane = h * w;
                    let dv = (0..c)
                        .map(|ch| g.data()[ch * plane..(ch + 1) * plane].iter().sum())
                        .collect();
                    accumulate(&mut adj, *v, Tensor::vector(dv));
                    accumulate(&mut adj, *x, g);
                }
                Op::Upsample2x(a) => {
                    let (c, h, w) = self.value(*a).dims3()?;
                    let mut da = Tensor::zeros(&[c, h, w]);
                    let src = g.data();
                    let dst = da.data_mut();
                    for ch in 0..c {
                        for y in 0..2 * h {
                            for x in 0..2 * w {
                                dst[(ch * h + y / 2) * w + x / 2] +=
                                    src[(ch * 2 * h + y) * 2 * w + x];
                            }
                        }
                    }
                    accumulate(&mut adj, *a, da);
                }
                Op::MseLoss { x, target } => {
                    let xv = self.value(*x);
                    let k = 2.0 * g.data()[0] / xv.len() as f64;
                    let d = xv
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(a, b)| k * (a - b))
                        .collect();
                    accumulate(&mut adj, *x, Tensor::from_vec(xv.shape(), d)?);
                }
                Op::Dot { x, weights } => {
                    let mut d = weights.clone();
                    d.scale_assign(g.data()[0]);
                    let shape = self.value(*x).shape().to_vec();
                    accumulate(&mut adj, *x, Tensor::from_vec(&shape, d.into_data())?);
                }
            }
        }
        Ok(())
    }
}

fn accumulate(adj: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut adj[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    stride: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(x: &Tensor, w: &Tensor, stride: usize) -> Result<(Self, usize)> {
        let (cin, h, wd) = x.dims3()?;
        let (cout, wcin, k) = match w.shape() {
            [o, i, k1, k2] if k1 == k2 => (*o, *i, *k1),
            s => return Err(Error::Shape(format!("conv weight {s:?}"))),
        };
        if wcin != cin || k % 2 == 0 || stride == 0 {
            return Err(Error::Shape(format!(
                "conv weight {:?} on input {:?}",
                w.shape(),
                x.shape()
            )));
        }
        let pad = (k - 1) / 2;
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (wd + 2 * pad - k) / stride + 1;
        Ok((
            Self {
                cin,
                h,
                w: wd,
                k,
                pad,
                stride,
                oh,
                ow,
            },
            cout,
        ))
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1
    }

    /// Unfolds input patches into a `[Cin*k*k, OH*OW]` matrix.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let n = self.oh * self.ow;
        let mut col = vec![0.0; self.cin * self.k * self.k * n];
        for c in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let dst = &mut col[row * n..(row + 1) * n];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &x[(c * self.h + iy as usize) * self.w..][..self.w];
                        let drow = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f64]) -> Vec<f64> {
        let n = self.oh * self.ow;
        let mut x = vec![0.0; self.cin * self.h * self.w];
        for c in 0..self.cin {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (c * self.k + ky) * self.k + kx;
                    let src = &col[row * n..(row + 1) * n];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut x[(c * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize) -> Result<Tensor> {
    let (geom, cout) = ConvGeom::new(x, w, stride)?;
    if b.len() != cout {
        return Err(Error::Shape(format!("conv bias {:?}", b.shape())));
    }
    let n = geom.oh * geom.ow;
    let kdim = geom.cin * geom.k * geom.k;
    let mut out = vec![0.0; cout * n];
    for (o, bias) in b.data().iter().enumerate() {
        out[o * n..(o + 1) * n].fill(*bias);
    }
    if geom.is_pointwise() {
        gemm(cout, kdim, n, w.data(), false, x.data(), false, &mut out, 1.0);
    } else {
        let col = geom.im2col(x.data());
        gemm(cout, kdim, n, w.data(), false, &col, false, &mut out, 1.0);
    }
    Tensor::from_vec(&[cout, geom.oh, geom.ow], out)
}

fn conv2d_backward(x: &Tensor, w: &Tensor, stride: usize, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (geom, cout) = ConvGeom::new(x, w, stride).expect("validated in forward");
    let n = geom.oh * geom.ow;
    let kdim = geom.cin * geom.k * geom.k;
    let gd = g.data();

    let db: Vec<f64> = (0..cout).map(|o| gd[o * n..(o + 1) * n].iter().sum()).collect();

    let mut dw = vec![0.0; cout * kdim];
    let mut dcol = vec![0.0; kdim * n];
    if geom.is_pointwise() {
        gemm(cout, n, kdim, gd, false, x.data(), true, &mut dw, 0.0);
        gemm(kdim, cout, n, w.data(), true, gd, false, &mut dcol, 0.0);
        let dx = Tensor::from_vec(x.shape(), dcol).expect("shape");
        return (
            dx,
            Tensor::from_vec(w.shape(), dw).expect("shape"),
            Tensor::vector(db),
        );
    }
    let col = geom.im2col(x.data());
    gemm(cout, n, kdim, gd, false, &col, true, &mut dw, 0.0);
    gemm(kdim, cout, n, w.data(), true, gd, false, &mut dcol, 0.0);
    let dx = geom.col2im(&dcol);
    (
        Tensor::from_vec(x.shape(), dx).expect("shape"),
        Tensor::from_vec(w.shape(), dw).expect("shape"),
        Tensor::vector(db),
    )
}
