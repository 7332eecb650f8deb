//! Tape-based reverse-mode autodiff over NCHW tensors.
//!
//! A [`Graph`] records every op of one forward pass. Parameters are read in
//! place from the borrowed [`ParamSet`]; [`Graph::backward`] walks the tape
//! once in reverse and returns per-node gradients.

use alloc::vec;
use alloc::vec::Vec;

use super::params::{ParamId, ParamSet};
use crate::tensor::{gemm, MatRef, Real, Shape, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Sigmoid,
    Relu,
    Tanh,
}

enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Affine { x: Var, scale: T },
    Act { x: Var, kind: Activation },
    GroupNorm { x: Var, groups: usize, rstd: Vec<T> },
    Concat { parts: Vec<Var> },
    Narrow { x: Var, start: usize },
    SpaceToDepth { x: Var, f: usize },
    DepthToSpace { x: Var, f: usize },
    AvgPool { x: Var, f: usize },
    Upsample { x: Var, f: usize },
    Sinusoidal { x: Var, scale: T },
}

enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'p, T: Real> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
    param_nodes: Vec<Option<Var>>,
    grad_enabled: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Adds parameter gradients into `acc` (indexed like the param set).
    pub fn accumulate_params(&self, acc: &mut [Vec<T>]) {
        for (pid, node) in &self.params {
            if let Some(g) = &self.grads[*node] {
                for (a, b) in acc[pid.0].iter_mut().zip(g) {
                    *a += *b;
                }
            }
        }
    }
}

fn add_into<T: Real>(slot: &mut Option<Vec<T>>, g: &[T]) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += *b;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

fn add_owned<T: Real>(slot: &mut Option<Vec<T>>, g: Vec<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Index map from a full shape into a broadcast operand: each dim of `b`
/// equals the matching dim of `a` or is 1.
fn broadcast_ok(a: Shape, b: Shape) -> bool {
    a.dims().iter().zip(b.dims().iter()).all(|(x, y)| x == y || *y == 1)
}

/// Calls `f(i_full, i_b)` for every element of the full shape.
fn for_each_broadcast(a: Shape, b: Shape, mut f: impl FnMut(usize, usize)) {
    if a == b {
        for i in 0..a.len() {
            f(i, i);
        }
        return;
    }
    let plane = a.plane();
    if b.h == 1 && b.w == 1 {
        for n in 0..a.n {
            let bn = if b.n == 1 { 0 } else { n };
            for c in 0..a.c {
                let bc = if b.c == 1 { 0 } else { c };
                let bi = bn * b.c + bc;
                let base = (n * a.c + c) * plane;
                for p in 0..plane {
                    f(base + p, bi);
                }
            }
        }
        return;
    }
    for n in 0..a.n {
        let bn = if b.n == 1 { 0 } else { n };
        for c in 0..a.c {
            let bc = if b.c == 1 { 0 } else { c };
            for y in 0..a.h {
                let by = if b.h == 1 { 0 } else { y };
                for x in 0..a.w {
                    let bx = if b.w == 1 { 0 } else { x };
                    let i = ((n * a.c + c) * a.h + y) * a.w + x;
                    let j = ((bn * b.c + bc) * b.h + by) * b.w + bx;
                    f(i, j);
                }
            }
        }
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

/// Unfolds one `c x h x w` sample into a `(c*k*k) x (oh*ow)` row-major
/// matrix. Every element of `dst` is written.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(src: &[T], s: Shape, k: usize, stride: usize, pad: usize, oh: usize, ow: usize, dst: &mut [T]) {
    let plane = oh * ow;
    for c in 0..s.c {
        let chan = &src[c * s.h * s.w..(c + 1) * s.h * s.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst_row = &mut dst[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    let d = &mut dst_row[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= s.h as isize {
                        d.fill(T::zero());
                        continue;
                    }
                    let src_row = &chan[iy as usize * s.w..(iy as usize + 1) * s.w];
                    if stride == 1 {
                        // contiguous span of valid ox
                        let lo = pad.saturating_sub(kj).min(ow);
                        let hi = (s.w + pad).saturating_sub(kj).min(ow).max(lo);
                        d[..lo].fill(T::zero());
                        d[hi..].fill(T::zero());
                        if lo < hi {
                            let ix0 = lo + kj - pad;
                            d[lo..hi].copy_from_slice(&src_row[ix0..ix0 + (hi - lo)]);
                        }
                    } else {
                        for (ox, v) in d.iter_mut().enumerate() {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            *v = if ix >= 0 && ix < s.w as isize { src_row[ix as usize] } else { T::zero() };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds columns into one sample of `dx`.
#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(cols: &[T], s: Shape, k: usize, stride: usize, pad: usize, oh: usize, ow: usize, dx: &mut [T]) {
    let plane = oh * ow;
    for c in 0..s.c {
        let dst = &mut dx[c * s.h * s.w..(c + 1) * s.h * s.w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src_row = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= s.h as isize {
                        continue;
                    }
                    let src = &src_row[oy * ow..(oy + 1) * ow];
                    let dst_row = &mut dst[iy as usize * s.w..(iy as usize + 1) * s.w];
                    for (ox, v) in src.iter().enumerate() {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < s.w as isize {
                            dst_row[ix as usize] += *v;
                        }
                    }
                }
            }
        }
    }
}

/// Kernel geometry of a convolution node.
#[derive(Clone, Copy)]
struct ConvGeom {
    xs: Shape,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn kk(&self) -> usize {
        self.xs.c * self.k * self.k
    }
    fn plane(&self) -> usize {
        self.oh * self.ow
    }
    /// 1x1, stride 1, unpadded: the input sample already is the column matrix.
    fn pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

impl<'p, T: Real> Graph<'p, T> {
    /// Graph that records gradients for parameters.
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Self::with_grad(params, true)
    }

    /// Inference-only graph.
    pub fn inference(params: &'p ParamSet<T>) -> Self {
        Self::with_grad(params, false)
    }

    fn with_grad(params: &'p ParamSet<T>, grad_enabled: bool) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(512),
            param_nodes: vec![None; params.len()],
            grad_enabled,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.value(v).shape
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Constant input.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is wanted (used by gradient checks).
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        let track = self.grad_enabled;
        self.push(t, Op::Leaf, track)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            needs_grad: self.grad_enabled,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    /// 2-d convolution, weights `[cout, cin, k, k]`, optional bias `[1, cout, 1, 1]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x);
        let ws = self.shape(w);
        assert_eq!(xs.c, ws.c, "conv input channels");
        assert_eq!(ws.h, ws.w, "square kernels only");
        let k = ws.h;
        let (oh, ow) = (conv_out(xs.h, k, stride, pad), conv_out(xs.w, k, stride, pad));
        let geo = ConvGeom { xs, cout: ws.n, k, stride, pad, oh, ow };
        let cout = ws.n;
        let plane = oh * ow;
        let out_shape = Shape::new(xs.n, cout, oh, ow);
        let mut y = vec![T::zero(); out_shape.len()];
        conv_forward(&self.value(x).data, &self.value(w).data, geo, &mut y);
        if let Some(b) = b {
            let bias = &self.value(b).data;
            assert_eq!(bias.len(), cout);
            for n in 0..xs.n {
                for (co, bv) in bias.iter().enumerate() {
                    for v in &mut y[(n * cout + co) * plane..(n * cout + co + 1) * plane] {
                        *v += *bv;
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(Tensor::from_vec(out_shape, y), Op::Conv { x, w, b, stride, pad }, needs)
    }

    /// `a + b` with `b` broadcast over unit dims.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(broadcast_ok(sa, sb), "add: cannot broadcast {sb:?} to {sa:?}");
        let mut out = self.value(a).data.clone();
        let bd = &self.value(b).data;
        for_each_broadcast(sa, sb, |i, j| out[i] += bd[j]);
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::from_vec(sa, out), Op::Add { a, b }, needs)
    }

    /// `a * b` with `b` broadcast over unit dims.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(broadcast_ok(sa, sb), "mul: cannot broadcast {sb:?} to {sa:?}");
        let mut out = self.value(a).data.clone();
        let bd = &self.value(b).data;
        for_each_broadcast(sa, sb, |i, j| out[i] *= bd[j]);
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::from_vec(sa, out), Op::Mul { a, b }, needs)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let t = self.value(x);
        let out = t.data.iter().map(|v| scale * *v + shift).collect();
        let needs = self.needs(x);
        self.push(Tensor::from_vec(t.shape, out), Op::Affine { x, scale }, needs)
    }

    pub fn act(&mut self, x: Var, kind: Activation) -> Var {
        let t = self.value(x);
        let out = t
            .data
            .iter()
            .map(|&v| match kind {
                Activation::Silu => v * sigmoid(v),
                Activation::Sigmoid => sigmoid(v),
                Activation::Relu => v.max(T::zero()),
                Activation::Tanh => v.tanh(),
            })
            .collect();
        let needs = self.needs(x);
        self.push(Tensor::from_vec(t.shape, out), Op::Act { x, kind }, needs)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.act(x, Activation::Silu)
    }

    /// Standardizes each of `groups` channel groups per sample over
    /// (channels-in-group x space): `(x - mean) / sqrt(var + eps)`.
    /// `groups == c` is per-channel instance normalization.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: T) -> Var {
        let t = self.value(x);
        let s = t.shape;
        assert!(groups > 0 && s.c % groups == 0, "group_norm: {} channels into {groups} groups", s.c);
        let m = (s.c / groups) * s.plane();
        let mut out = vec![T::zero(); s.len()];
        let mut rstd = Vec::with_capacity(s.n * groups);
        for (gi, chunk) in t.data.chunks(m).enumerate() {
            // statistics in f64: a constant group gives exactly zero deviations
            let mut mean64 = chunk.iter().map(|v| v.as_f64()).sum::<f64>() / m as f64;
            mean64 += chunk.iter().map(|v| v.as_f64() - mean64).sum::<f64>() / m as f64;
            let var = chunk.iter().map(|v| (v.as_f64() - mean64) * (v.as_f64() - mean64)).sum::<f64>() / m as f64;
            let mean = T::from_f64(mean64);
            let r = T::from_f64(1.0 / num_traits::Float::sqrt(var + eps.as_f64()));
            rstd.push(r);
            for (o, v) in out[gi * m..(gi + 1) * m].iter_mut().zip(chunk) {
                *o = (*v - mean) * r;
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::from_vec(s, out), Op::GroupNorm { x, groups, rstd }, needs)
    }

    /// Channel concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let s0 = self.shape(parts[0]);
        let c: usize = parts.iter().map(|p| self.shape(*p).c).sum();
        let out_shape = Shape::new(s0.n, c, s0.h, s0.w);
        let plane = s0.plane();
        let mut out = Vec::with_capacity(out_shape.len());
        for n in 0..s0.n {
            for p in parts {
                let t = self.value(*p);
                assert_eq!((t.shape.n, t.shape.h, t.shape.w), (s0.n, s0.h, s0.w), "concat shapes");
                let per = t.shape.c * plane;
                out.extend_from_slice(&t.data[n * per..(n + 1) * per]);
            }
        }
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push(Tensor::from_vec(out_shape, out), Op::Concat { parts: parts.to_vec() }, needs)
    }

    /// Channels `start..start + len`.
    pub fn narrow(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = self.value(x);
        let s = t.shape;
        assert!(start + len <= s.c);
        let plane = s.plane();
        let mut out = Vec::with_capacity(s.n * len * plane);
        for n in 0..s.n {
            let off = (n * s.c + start) * plane;
            out.extend_from_slice(&t.data[off..off + len * plane]);
        }
        let needs = self.needs(x);
        self.push(Tensor::from_vec(Shape::new(s.n, len, s.h, s.w), out), Op::Narrow { x, start }, needs)
    }

    /// Folds each `f x f` patch into channels: `[n, c, h, w] -> [n, c*f*f, h/f, w/f]`.
    pub fn space_to_depth(&mut self, x: Var, f: usize) -> Var {
        let t = self.value(x);
        let out = space_to_depth(t, f);
        let needs = self.needs(x);
        self.push(out, Op::SpaceToDepth { x, f }, needs)
    }

    /// Inverse of [`Graph::space_to_depth`].
    pub fn depth_to_space(&mut self, x: Var, f: usize) -> Var {
        let t = self.value(x);
        let out = depth_to_space(t, f);
        let needs = self.needs(x);
        self.push(out, Op::DepthToSpace { x, f }, needs)
    }

    /// Mean over non-overlapping `f x f` windows.
    pub fn avg_pool(&mut self, x: Var, f: usize) -> Var {
        let t = self.value(x);
        let out = avg_pool(t, f);
        let needs = self.needs(x);
        self.push(out, Op::AvgPool { x, f }, needs)
    }

    /// Global average over space: `[n, c, h, w] -> [n, c, 1, 1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        assert_eq!(s.h, s.w, "global_avg_pool expects square maps");
        self.avg_pool(x, s.h)
    }

    pub fn upsample_nearest(&mut self, x: Var, f: usize) -> Var {
        let t = self.value(x);
        let s = t.shape;
        let os = Shape::new(s.n, s.c, s.h * f, s.w * f);
        let mut out = vec![T::zero(); os.len()];
        for nc in 0..s.n * s.c {
            let src = &t.data[nc * s.plane()..(nc + 1) * s.plane()];
            let dst = &mut out[nc * os.plane()..(nc + 1) * os.plane()];
            for y in 0..os.h {
                for x2 in 0..os.w {
                    dst[y * os.w + x2] = src[(y / f) * s.w + x2 / f];
                }
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::from_vec(os, out), Op::Upsample { x, f }, needs)
    }

    /// Sinusoidal embedding of a scalar per sample: `[n, 1, 1, 1] -> [n, dim, 1, 1]`,
    /// first half `sin(scale * x * w_k)`, second half `cos`, `w_k = 10000^(-k/half)`.
    pub fn sinusoidal(&mut self, x: Var, dim: usize, scale: T) -> Var {
        let t = self.value(x);
        assert_eq!(t.shape.c * t.shape.plane(), 1, "sinusoidal expects one scalar per sample");
        assert!(dim % 2 == 0);
        let half = dim / 2;
        let n = t.shape.n;
        let mut out = vec![T::zero(); n * dim];
        for i in 0..n {
            let xv = t.data[i] * scale;
            for k in 0..half {
                let a = xv * freq::<T>(k, half);
                out[i * dim + k] = a.sin();
                out[i * dim + half + k] = a.cos();
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::from_vec(Shape::vector(n, dim), out), Op::Sinusoidal { x, scale }, needs)
    }

    /// Reverse pass seeded with `d(loss)/d(var)` for each listed output.
    pub fn backward(&self, seeds: &[(Var, &[T])]) -> Gradients<T> {
        assert!(self.grad_enabled, "backward on an inference graph");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(g.len(), self.shape(*v).len(), "seed gradient length");
            add_into(&mut grads[v.0], g);
        }
        let mut params = Vec::new();
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if let Op::Param(id) = node.op {
                params.push((id, i));
                continue;
            }
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            // intermediate grads are released once propagated
            let Some(g) = grads[i].take() else { continue };
            self.backward_op(i, &g, &mut grads);
        }
        Gradients { grads, params }
    }

    fn backward_op(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = self.value(Var(i));
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Conv { x, w, b, stride, pad } => {
                let xt = self.value(*x);
                let wt = self.value(*w);
                let geo = ConvGeom {
                    xs: xt.shape,
                    cout: wt.shape.n,
                    k: wt.shape.h,
                    stride: *stride,
                    pad: *pad,
                    oh: out.shape.h,
                    ow: out.shape.w,
                };
                if let Some(b) = b {
                    if self.needs(*b) {
                        let plane = geo.plane();
                        let mut db = vec![T::zero(); geo.cout];
                        for (i, chunk) in g.chunks(plane).enumerate() {
                            db[i % geo.cout] += chunk.iter().copied().sum::<T>();
                        }
                        add_owned(&mut grads[b.0], db);
                    }
                }
                let dw = self.needs(*w).then(|| conv_grad_weight(&xt.data, g, geo));
                let dx = self.needs(*x).then(|| conv_grad_input(&wt.data, g, geo));
                if let Some(dw) = dw {
                    add_owned(&mut grads[w.0], dw);
                }
                if let Some(dx) = dx {
                    add_owned(&mut grads[x.0], dx);
                }
            }
            Op::Add { a, b } => {
                if self.needs(*a) {
                    add_into(&mut grads[a.0], g);
                }
                if self.needs(*b) {
                    let sb = self.shape(*b);
                    let mut db = vec![T::zero(); sb.len()];
                    for_each_broadcast(out.shape, sb, |i, j| db[j] += g[i]);
                    add_owned(&mut grads[b.0], db);
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let mut da = vec![T::zero(); av.shape.len()];
                    for_each_broadcast(av.shape, bv.shape, |i, j| da[i] = g[i] * bv.data[j]);
                    add_owned(&mut grads[a.0], da);
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); bv.shape.len()];
                    for_each_broadcast(av.shape, bv.shape, |i, j| db[j] += g[i] * av.data[i]);
                    add_owned(&mut grads[b.0], db);
                }
            }
            Op::Affine { x, scale } => {
                if self.needs(*x) {
                    add_owned(&mut grads[x.0], g.iter().map(|v| *v * *scale).collect());
                }
            }
            Op::Act { x, kind } => {
                if self.needs(*x) {
                    let xv = &self.value(*x).data;
                    let dx = g
                        .iter()
                        .zip(xv.iter().zip(&out.data))
                        .map(|(gv, (xi, yi))| {
                            *gv * match kind {
                                Activation::Silu => {
                                    let s = sigmoid(*xi);
                                    s * (T::one() + *xi * (T::one() - s))
                                }
                                Activation::Sigmoid => *yi * (T::one() - *yi),
                                Activation::Relu => {
                                    if *xi > T::zero() {
                                        T::one()
                                    } else {
                                        T::zero()
                                    }
                                }
                                Activation::Tanh => T::one() - *yi * *yi,
                            }
                        })
                        .collect();
                    add_owned(&mut grads[x.0], dx);
                }
            }
            Op::GroupNorm { x, groups, rstd } => {
                if self.needs(*x) {
                    let s = out.shape;
                    let m = (s.c / groups) * s.plane();
                    let inv_m = T::one() / T::from_f64(m as f64);
                    let mut dx = vec![T::zero(); s.len()];
                    for (gi, r) in rstd.iter().enumerate() {
                        let ys = &out.data[gi * m..(gi + 1) * m];
                        let gs = &g[gi * m..(gi + 1) * m];
                        let mean_g = gs.iter().copied().sum::<T>() * inv_m;
                        let mean_gy = gs.iter().zip(ys).map(|(a, b)| *a * *b).sum::<T>() * inv_m;
                        for ((d, gv), yv) in dx[gi * m..(gi + 1) * m].iter_mut().zip(gs).zip(ys) {
                            *d = *r * (*gv - mean_g - *yv * mean_gy);
                        }
                    }
                    add_owned(&mut grads[x.0], dx);
                }
            }
            Op::Concat { parts } => {
                let s = out.shape;
                let plane = s.plane();
                let mut c_off = 0;
                for p in parts {
                    let pc = self.shape(*p).c;
                    if self.needs(*p) {
                        let mut dp = Vec::with_capacity(s.n * pc * plane);
                        for n in 0..s.n {
                            let off = (n * s.c + c_off) * plane;
                            dp.extend_from_slice(&g[off..off + pc * plane]);
                        }
                        add_owned(&mut grads[p.0], dp);
                    }
                    c_off += pc;
                }
            }
            Op::Narrow { x, start } => {
                if self.needs(*x) {
                    let xs = self.shape(*x);
                    let plane = xs.plane();
                    let len = out.shape.c;
                    let mut dx = vec![T::zero(); xs.len()];
                    for n in 0..xs.n {
                        let off = (n * xs.c + start) * plane;
                        dx[off..off + len * plane].copy_from_slice(&g[n * len * plane..(n + 1) * len * plane]);
                    }
                    add_owned(&mut grads[x.0], dx);
                }
            }
            Op::SpaceToDepth { x, f } => {
                if self.needs(*x) {
                    let gt = Tensor::from_vec(out.shape, g.to_vec());
                    add_owned(&mut grads[x.0], depth_to_space(&gt, *f).data);
                }
            }
            Op::DepthToSpace { x, f } => {
                if self.needs(*x) {
                    let gt = Tensor::from_vec(out.shape, g.to_vec());
                    add_owned(&mut grads[x.0], space_to_depth(&gt, *f).data);
                }
            }
            Op::AvgPool { x, f } => {
                if self.needs(*x) {
                    let xs = self.shape(*x);
                    let os = out.shape;
                    let inv = T::one() / T::from_f64((f * f) as f64);
                    let mut dx = vec![T::zero(); xs.len()];
                    for nc in 0..xs.n * xs.c {
                        for y in 0..xs.h {
                            for x2 in 0..xs.w {
                                dx[nc * xs.plane() + y * xs.w + x2] =
                                    g[nc * os.plane() + (y / f) * os.w + x2 / f] * inv;
                            }
                        }
                    }
                    add_owned(&mut grads[x.0], dx);
                }
            }
            Op::Upsample { x, f } => {
                if self.needs(*x) {
                    let xs = self.shape(*x);
                    let os = out.shape;
                    let mut dx = vec![T::zero(); xs.len()];
                    for nc in 0..xs.n * xs.c {
                        for y in 0..os.h {
                            for x2 in 0..os.w {
                                dx[nc * xs.plane() + (y / f) * xs.w + x2 / f] += g[nc * os.plane() + y * os.w + x2];
                            }
                        }
                    }
                    add_owned(&mut grads[x.0], dx);
                }
            }
            Op::Sinusoidal { x, scale } => {
                if self.needs(*x) {
                    let xv = &self.value(*x).data;
                    let dim = out.shape.c;
                    let half = dim / 2;
                    let dx = xv
                        .iter()
                        .enumerate()
                        .map(|(i, v)| {
                            let mut acc = T::zero();
                            for k in 0..half {
                                let w = *scale * freq::<T>(k, half);
                                let a = *v * w;
                                acc += g[i * dim + k] * w * a.cos() - g[i * dim + half + k] * w * a.sin();
                            }
                            acc
                        })
                        .collect();
                    add_owned(&mut grads[x.0], dx);
                }
            }
        }
    }
}

#[inline]
fn conv_forward<T: Real>(x: &[T], w: &[T], geo: ConvGeom, y: &mut [T]) {
    let (xs, cout, kk, plane) = (geo.xs, geo.cout, geo.kk(), geo.plane());
    if geo.pointwise() && plane == 1 {
        // batch of vectors: Y (n x cout) = X (n x cin) * W^T
        gemm(MatRef::new(x, xs.n, xs.c), MatRef::t(w, xs.c, cout), y, false);
        return;
    }
    let per_in = xs.c * xs.plane();
    let mut cols = if geo.pointwise() { Vec::new() } else { vec![T::zero(); kk * plane] };
    for n in 0..xs.n {
        let src = &x[n * per_in..(n + 1) * per_in];
        let colm: &[T] = if geo.pointwise() {
            src
        } else {
            im2col(src, xs, geo.k, geo.stride, geo.pad, geo.oh, geo.ow, &mut cols);
            &cols
        };
        gemm(
            MatRef::new(w, cout, kk),
            MatRef::new(colm, kk, plane),
            &mut y[n * cout * plane..(n + 1) * cout * plane],
            false,
        );
    }
}

fn conv_grad_weight<T: Real>(x: &[T], g: &[T], geo: ConvGeom) -> Vec<T> {
    let (xs, cout, kk, plane) = (geo.xs, geo.cout, geo.kk(), geo.plane());
    let mut dw = vec![T::zero(); cout * kk];
    if geo.pointwise() && plane == 1 {
        gemm(MatRef::t(g, cout, xs.n), MatRef::new(x, xs.n, xs.c), &mut dw, false);
        return dw;
    }
    let per_in = xs.c * xs.plane();
    let mut cols = if geo.pointwise() { Vec::new() } else { vec![T::zero(); kk * plane] };
    for n in 0..xs.n {
        let src = &x[n * per_in..(n + 1) * per_in];
        let colm: &[T] = if geo.pointwise() {
            src
        } else {
            im2col(src, xs, geo.k, geo.stride, geo.pad, geo.oh, geo.ow, &mut cols);
            &cols
        };
        let gn = &g[n * cout * plane..(n + 1) * cout * plane];
        gemm(MatRef::new(gn, cout, plane), MatRef::t(colm, plane, kk), &mut dw, n > 0);
    }
    dw
}

fn conv_grad_input<T: Real>(w: &[T], g: &[T], geo: ConvGeom) -> Vec<T> {
    let (xs, cout, kk, plane) = (geo.xs, geo.cout, geo.kk(), geo.plane());
    let mut dx = vec![T::zero(); xs.len()];
    if geo.pointwise() && plane == 1 {
        gemm(MatRef::new(g, xs.n, cout), MatRef::new(w, cout, xs.c), &mut dx, false);
        return dx;
    }
    let per_in = xs.c * xs.plane();
    let mut dcols = if geo.pointwise() { Vec::new() } else { vec![T::zero(); kk * plane] };
    for n in 0..xs.n {
        let gn = &g[n * cout * plane..(n + 1) * cout * plane];
        let dxn = &mut dx[n * per_in..(n + 1) * per_in];
        if geo.pointwise() {
            gemm(MatRef::t(w, kk, cout), MatRef::new(gn, cout, plane), dxn, false);
        } else {
            gemm(MatRef::t(w, kk, cout), MatRef::new(gn, cout, plane), &mut dcols, false);
            col2im(&dcols, xs, geo.k, geo.stride, geo.pad, geo.oh, geo.ow, dxn);
        }
    }
    dx
}

fn freq<T: Real>(k: usize, half: usize) -> T {
    use num_traits::Float;
    T::from_f64(Float::exp(-Float::ln(10000f64) * k as f64 / half as f64))
}

pub fn space_to_depth<T: Real>(t: &Tensor<T>, f: usize) -> Tensor<T> {
    let s = t.shape;
    assert!(s.h % f == 0 && s.w % f == 0, "space_to_depth: {s:?} not divisible by {f}");
    let os = Shape::new(s.n, s.c * f * f, s.h / f, s.w / f);
    let mut out = vec![T::zero(); os.len()];
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                for x in 0..s.w {
                    let oc = (c * f + y % f) * f + x % f;
                    out[((n * os.c + oc) * os.h + y / f) * os.w + x / f] = t.data[((n * s.c + c) * s.h + y) * s.w + x];
                }
            }
        }
    }
    Tensor::from_vec(os, out)
}

pub fn depth_to_space<T: Real>(t: &Tensor<T>, f: usize) -> Tensor<T> {
    let s = t.shape;
    assert!(s.c % (f * f) == 0, "depth_to_space: {} channels not divisible by {}", s.c, f * f);
    let os = Shape::new(s.n, s.c / (f * f), s.h * f, s.w * f);
    let mut out = vec![T::zero(); os.len()];
    for n in 0..os.n {
        for c in 0..os.c {
            for y in 0..os.h {
                for x in 0..os.w {
                    let ic = (c * f + y % f) * f + x % f;
                    out[((n * os.c + c) * os.h + y) * os.w + x] = t.data[((n * s.c + ic) * s.h + y / f) * s.w + x / f];
                }
            }
        }
    }
    Tensor::from_vec(os, out)
}

pub fn avg_pool<T: Real>(t: &Tensor<T>, f: usize) -> Tensor<T> {
    let s = t.shape;
    assert!(s.h % f == 0 && s.w % f == 0, "avg_pool: {s:?} not divisible by {f}");
    let os = Shape::new(s.n, s.c, s.h / f, s.w / f);
    let inv = T::one() / T::from_f64((f * f) as f64);
    let mut out = vec![T::zero(); os.len()];
    for nc in 0..s.n * s.c {
        for y in 0..s.h {
            for x in 0..s.w {
                out[nc * os.plane() + (y / f) * os.w + x / f] += t.data[nc * s.plane() + y * s.w + x] * inv;
            }
        }
    }
    Tensor::from_vec(os, out)
}
