//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node holding its output value. `backward` walks the
//! tape in reverse and only propagates into nodes that transitively depend on
//! a parameter leaf.

use std::cell::RefCell;
use std::rc::Rc;

use super::kernels::{conv2d_backward, conv2d_forward, ConvGeom};
use super::tensor::{gemm, Float, Tensor};

type Id = usize;

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    Scale(Id, T),
    AddScalar(Id),
    Relu(Id),
    LeakyRelu(Id, T),
    Sigmoid(Id),
    Softplus(Id),
    Abs(Id),
    Reshape(Id),
    Conv2d {
        x: Id,
        w: Id,
        b: Option<Id>,
        geom: ConvGeom,
        n: usize,
        c_out: usize,
    },
    PadReplicate {
        x: Id,
        pad: usize,
    },
    Upsample2x(Id),
    InstanceNorm {
        x: Id,
        inv_std: Vec<T>,
    },
    MeanInner {
        x: Id,
        inner: usize,
    },
    SumInner {
        x: Id,
        inner: usize,
    },
    ChannelScale {
        x: Id,
        s: Id,
    },
    ChannelBias {
        x: Id,
        b: Id,
    },
    Linear {
        x: Id,
        w: Id,
        b: Option<Id>,
    },
    SoftmaxLast(Id),
    SelectLast {
        x: Id,
        k: usize,
    },
    ConcatCols(Vec<Id>),
    SumChannels(Id),
    MeanAll(Id),
    NormalizeChannels {
        x: Id,
        norms: Vec<T>,
    },
    LocalSimilarity {
        y: Id,
        patch: usize,
    },
}

struct Node<T> {
    value: Rc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// A computation tape. Create one per forward/backward pass.
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, T> {
    graph: &'g Graph<T>,
    id: Id,
}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Float> Gradients<T> {
    pub fn get(&self, v: &Var<'_, T>) -> Option<&Tensor<T>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: &Var<'_, T>) -> Option<Tensor<T>> {
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
        }
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: Id) -> Rc<Tensor<T>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn needs(&self, id: Id) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// A leaf that is not differentiated.
    pub fn constant(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push(t, Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn param(&self, t: Tensor<T>) -> Var<'_, T> {
        self.push(t, Op::Leaf, true)
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, out: &Var<'_, T>) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[out.id].value.numel(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; nodes.len()];
        grads[out.id] = Some(Tensor::full(&nodes[out.id].value.shape, T::one()));
        for id in (0..=out.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
        }
        Gradients { grads }
    }
}

fn accumulate<T: Float>(grads: &mut [Option<Tensor<T>>], id: Id, t: Tensor<T>) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

fn zip_map<T: Float>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

#[inline]
fn sigmoid<T: Float>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus<T: Float>(x: T) -> T {
    // log(1 + e^x) = max(x, 0) + log1p(e^-|x|)
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn backprop<T: Float>(nodes: &[Node<T>], id: Id, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
    let need = |i: Id| nodes[i].needs_grad;
    let val = |i: Id| nodes[i].value.as_ref();
    let out = nodes[id].value.as_ref();
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            if need(*a) {
                accumulate(grads, *a, g.clone());
            }
            if need(*b) {
                accumulate(grads, *b, g.clone());
            }
        }
        Op::Sub(a, b) => {
            if need(*a) {
                accumulate(grads, *a, g.clone());
            }
            if need(*b) {
                accumulate(grads, *b, g.map(|v| -v));
            }
        }
        Op::Mul(a, b) => {
            if need(*a) {
                accumulate(grads, *a, zip_map(g, val(*b), |x, y| x * y));
            }
            if need(*b) {
                accumulate(grads, *b, zip_map(g, val(*a), |x, y| x * y));
            }
        }
        Op::Scale(a, s) => {
            let s = *s;
            accumulate(grads, *a, g.map(|v| v * s));
        }
        Op::AddScalar(a) | Op::Reshape(a) => {
            let shape = val(*a).shape.clone();
            accumulate(grads, *a, Tensor { shape, data: g.data.clone() });
        }
        Op::Relu(a) => {
            accumulate(grads, *a, zip_map(g, out, |gv, y| if y > T::zero() { gv } else { T::zero() }));
        }
        Op::LeakyRelu(a, slope) => {
            let slope = *slope;
            accumulate(
                grads,
                *a,
                zip_map(g, val(*a), |gv, x| if x > T::zero() { gv } else { gv * slope }),
            );
        }
        Op::Sigmoid(a) => {
            accumulate(grads, *a, zip_map(g, out, |gv, y| gv * y * (T::one() - y)));
        }
        Op::Softplus(a) => {
            accumulate(grads, *a, zip_map(g, val(*a), |gv, x| gv * sigmoid(x)));
        }
        Op::Abs(a) => {
            accumulate(
                grads,
                *a,
                zip_map(g, val(*a), |gv, x| {
                    if x > T::zero() {
                        gv
                    } else if x < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                }),
            );
        }
        Op::Conv2d { x, w, b, geom, n, c_out } => {
            let xv = val(*x);
            let wv = val(*w);
            let mut dx = need(*x).then(|| Tensor::zeros(&xv.shape));
            let mut dw = need(*w).then(|| Tensor::zeros(&wv.shape));
            let mut db = b.filter(|&b| need(b)).map(|b| Tensor::zeros(&val(b).shape));
            conv2d_backward(
                &xv.data,
                *n,
                geom,
                &wv.data,
                *c_out,
                &g.data,
                dx.as_mut().map(|t| t.data.as_mut_slice()),
                dw.as_mut().map(|t| t.data.as_mut_slice()),
                db.as_mut().map(|t| t.data.as_mut_slice()),
            );
            if let Some(dx) = dx {
                accumulate(grads, *x, dx);
            }
            if let Some(dw) = dw {
                accumulate(grads, *w, dw);
            }
            if let (Some(db), Some(b)) = (db, b) {
                accumulate(grads, *b, db);
            }
        }
        Op::PadReplicate { x, pad } => {
            let (n, c, h, w) = val(*x).dims4();
            let (ph, pw) = (h + 2 * pad, w + 2 * pad);
            let mut dx = Tensor::zeros(&[n, c, h, w]);
            for plane in 0..n * c {
                for i in 0..ph {
                    let si = i.saturating_sub(*pad).min(h - 1);
                    for j in 0..pw {
                        let sj = j.saturating_sub(*pad).min(w - 1);
                        dx.data[plane * h * w + si * w + sj] += g.data[plane * ph * pw + i * pw + j];
                    }
                }
            }
            accumulate(grads, *x, dx);
        }
        Op::Upsample2x(x) => {
            let (n, c, h, w) = val(*x).dims4();
            let mut dx = Tensor::zeros(&[n, c, h, w]);
            let ow = 2 * w;
            for plane in 0..n * c {
                for i in 0..2 * h {
                    for j in 0..ow {
                        dx.data[plane * h * w + (i / 2) * w + j / 2] += g.data[plane * 4 * h * w + i * ow + j];
                    }
                }
            }
            accumulate(grads, *x, dx);
        }
        Op::InstanceNorm { x, inv_std } => {
            let (n, c, h, w) = val(*x).dims4();
            let hw = h * w;
            let mut dx = Tensor::zeros(&[n, c, h, w]);
            let m = T::of(hw as f64);
            for p in 0..n * c {
                let gs = &g.data[p * hw..(p + 1) * hw];
                let ys = &out.data[p * hw..(p + 1) * hw];
                let mean_g = gs.iter().copied().sum::<T>() / m;
                let mean_gy = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<T>() / m;
                let inv = inv_std[p];
                for ((d, &gv), &yv) in dx.data[p * hw..(p + 1) * hw].iter_mut().zip(gs).zip(ys) {
                    *d = inv * (gv - mean_g - yv * mean_gy);
                }
            }
            accumulate(grads, *x, dx);
        }
        Op::MeanInner { x, inner } | Op::SumInner { x, inner } => {
            let scale = if matches!(nodes[id].op, Op::MeanInner { .. }) {
                T::one() / T::of(*inner as f64)
            } else {
                T::one()
            };
            let xs = &val(*x).shape;
            let mut data = Vec::with_capacity(g.numel() * inner);
            for &gv in &g.data {
                data.extend(std::iter::repeat_n(gv * scale, *inner));
            }
            accumulate(grads, *x, Tensor { shape: xs.clone(), data });
        }
        Op::ChannelScale { x, s } => {
            let xv = val(*x);
            let sv = val(*s);
            let (n, c, h, w) = xv.dims4();
            let hw = h * w;
            if need(*x) {
                let mut dx = Tensor::zeros(&xv.shape);
                for p in 0..n * c {
                    let sc = sv.data[p];
                    for (d, &gv) in dx.data[p * hw..(p + 1) * hw].iter_mut().zip(&g.data[p * hw..(p + 1) * hw]) {
                        *d = gv * sc;
                    }
                }
                accumulate(grads, *x, dx);
            }
            if need(*s) {
                let mut ds = Tensor::zeros(&sv.shape);
                for p in 0..n * c {
                    ds.data[p] = g.data[p * hw..(p + 1) * hw]
                        .iter()
                        .zip(&xv.data[p * hw..(p + 1) * hw])
                        .map(|(&a, &b)| a * b)
                        .sum();
                }
                accumulate(grads, *s, ds);
            }
        }
        Op::ChannelBias { x, b } => {
            if need(*x) {
                accumulate(grads, *x, g.clone());
            }
            if need(*b) {
                let bv = val(*b);
                let hw = g.numel() / bv.numel();
                let mut db = Tensor::zeros(&bv.shape);
                for (p, d) in db.data.iter_mut().enumerate() {
                    *d = g.data[p * hw..(p + 1) * hw].iter().copied().sum();
                }
                accumulate(grads, *b, db);
            }
        }
        Op::Linear { x, w, b } => {
            let xv = val(*x);
            let wv = val(*w);
            let (n, fin) = xv.dims2();
            let (fout, _) = wv.dims2();
            if need(*x) {
                let mut dx = Tensor::zeros(&xv.shape);
                gemm(false, false, n, fin, fout, T::one(), &g.data, &wv.data, T::zero(), &mut dx.data);
                accumulate(grads, *x, dx);
            }
            if need(*w) {
                let mut dw = Tensor::zeros(&wv.shape);
                gemm(true, false, fout, fin, n, T::one(), &g.data, &xv.data, T::zero(), &mut dw.data);
                accumulate(grads, *w, dw);
            }
            if let Some(b) = b.filter(|&b| need(b)) {
                let mut db = Tensor::zeros(&[fout]);
                for row in g.data.chunks(fout) {
                    for (d, &v) in db.data.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                accumulate(grads, b, db);
            }
        }
        Op::SoftmaxLast(x) => {
            let k = *out.shape.last().expect("non-empty shape");
            let mut dx = Tensor::zeros(&out.shape);
            for ((d, gs), ys) in dx.data.chunks_mut(k).zip(g.data.chunks(k)).zip(out.data.chunks(k)) {
                let dot: T = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum();
                for ((dv, &gv), &yv) in d.iter_mut().zip(gs).zip(ys) {
                    *dv = yv * (gv - dot);
                }
            }
            accumulate(grads, *x, dx);
        }
        Op::SelectLast { x, k } => {
            let xs = &val(*x).shape;
            let kk = *xs.last().expect("non-empty shape");
            let mut dx = Tensor::zeros(xs);
            for (i, &gv) in g.data.iter().enumerate() {
                dx.data[i * kk + k] = gv;
            }
            accumulate(grads, *x, dx);
        }
        Op::ConcatCols(parts) => {
            let (n, total) = g.dims2();
            let mut offset = 0;
            for &p in parts {
                let (_, cols) = val(p).dims2();
                if need(p) {
                    let mut dp = Tensor::zeros(&[n, cols]);
                    for r in 0..n {
                        dp.data[r * cols..(r + 1) * cols]
                            .copy_from_slice(&g.data[r * total + offset..r * total + offset + cols]);
                    }
                    accumulate(grads, p, dp);
                }
                offset += cols;
            }
        }
        Op::SumChannels(x) => {
            let (n, c, h, w) = val(*x).dims4();
            let hw = h * w;
            let mut dx = Tensor::zeros(&[n, c, h, w]);
            for b in 0..n {
                let gs = &g.data[b * hw..(b + 1) * hw];
                for ch in 0..c {
                    dx.data[(b * c + ch) * hw..(b * c + ch + 1) * hw].copy_from_slice(gs);
                }
            }
            accumulate(grads, *x, dx);
        }
        Op::MeanAll(x) => {
            let xv = val(*x);
            let v = g.data[0] / T::of(xv.numel() as f64);
            accumulate(grads, *x, Tensor::full(&xv.shape, v));
        }
        Op::NormalizeChannels { x, norms } => {
            let (n, c, h, w) = out.dims4();
            let hw = h * w;
            let mut dx = Tensor::zeros(&out.shape);
            for b in 0..n {
                for p in 0..hw {
                    let idx = |ch: usize| (b * c + ch) * hw + p;
                    let dot: T = (0..c).map(|ch| g.data[idx(ch)] * out.data[idx(ch)]).sum();
                    let inv = T::one() / norms[b * hw + p];
                    for ch in 0..c {
                        dx.data[idx(ch)] = (g.data[idx(ch)] - out.data[idx(ch)] * dot) * inv;
                    }
                }
            }
            accumulate(grads, *x, dx);
        }
        Op::LocalSimilarity { y, patch } => {
            let yv = val(*y);
            let (n, c, h, w) = yv.dims4();
            let hw = h * w;
            let pp = patch * patch;
            let mut dy = Tensor::zeros(&yv.shape);
            for b in 0..n {
                let base = b * c * hw;
                for qi in 0..h {
                    let si = window_start(qi, *patch, h);
                    for qj in 0..w {
                        let sj = window_start(qj, *patch, w);
                        let q = qi * w + qj;
                        for t in 0..pp {
                            let gv = g.data[(b * hw + q) * pp + t];
                            if gv == T::zero() {
                                continue;
                            }
                            let r = (si + t / patch) * w + sj + t % patch;
                            for ch in 0..c {
                                let yq = yv.data[base + ch * hw + q];
                                let yr = yv.data[base + ch * hw + r];
                                dy.data[base + ch * hw + q] += gv * yr;
                                dy.data[base + ch * hw + r] += gv * yq;
                            }
                        }
                    }
                }
            }
            accumulate(grads, *y, dy);
        }
    }
}

/// First row/column of the `patch`-wide window around `center`, shifted to
/// stay inside `[0, len)`.
pub(crate) fn window_start(center: usize, patch: usize, len: usize) -> usize {
    center.saturating_sub(patch / 2).min(len - patch)
}

impl<'g, T: Float> Var<'g, T> {
    pub fn value(&self) -> Rc<Tensor<T>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape.clone()
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    fn needs(&self) -> bool {
        self.graph.needs(self.id)
    }

    fn unary(&self, value: Tensor<T>, op: Op<T>) -> Var<'g, T> {
        self.graph.push(value, op, self.needs())
    }

    fn binary(&self, other: &Var<'g, T>, value: Tensor<T>, op: Op<T>) -> Var<'g, T> {
        let needs = self.needs() || other.needs();
        self.graph.push(value, op, needs)
    }

    fn same_shape(&self, other: &Var<'g, T>, what: &str) -> (Rc<Tensor<T>>, Rc<Tensor<T>>) {
        let a = self.value();
        let b = other.value();
        assert_eq!(a.shape, b.shape, "{what}: shape mismatch");
        (a, b)
    }

    pub fn add(&self, other: &Var<'g, T>) -> Var<'g, T> {
        let (a, b) = self.same_shape(other, "add");
        self.binary(other, zip_map(&a, &b, |x, y| x + y), Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: &Var<'g, T>) -> Var<'g, T> {
        let (a, b) = self.same_shape(other, "sub");
        self.binary(other, zip_map(&a, &b, |x, y| x - y), Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: &Var<'g, T>) -> Var<'g, T> {
        let (a, b) = self.same_shape(other, "mul");
        self.binary(other, zip_map(&a, &b, |x, y| x * y), Op::Mul(self.id, other.id))
    }

    pub fn scale(&self, s: f64) -> Var<'g, T> {
        let s = T::of(s);
        self.unary(self.value().map(|v| v * s), Op::Scale(self.id, s))
    }

    pub fn add_scalar(&self, s: f64) -> Var<'g, T> {
        let s = T::of(s);
        self.unary(self.value().map(|v| v + s), Op::AddScalar(self.id))
    }

    pub fn relu(&self) -> Var<'g, T> {
        self.unary(self.value().map(|v| v.max(T::zero())), Op::Relu(self.id))
    }

    pub fn leaky_relu(&self, slope: f64) -> Var<'g, T> {
        let s = T::of(slope);
        self.unary(
            self.value().map(|v| if v > T::zero() { v } else { v * s }),
            Op::LeakyRelu(self.id, s),
        )
    }

    pub fn sigmoid(&self) -> Var<'g, T> {
        self.unary(self.value().map(sigmoid), Op::Sigmoid(self.id))
    }

    /// `log(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&self) -> Var<'g, T> {
        self.unary(self.value().map(softplus), Op::Softplus(self.id))
    }

    pub fn abs(&self) -> Var<'g, T> {
        self.unary(self.value().map(|v| v.abs()), Op::Abs(self.id))
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'g, T> {
        let v = self.value();
        assert_eq!(shape.iter().product::<usize>(), v.numel(), "reshape size mismatch");
        self.unary(Tensor::new(shape, v.data.clone()), Op::Reshape(self.id))
    }

    /// 2D convolution of an `N×C×H×W` input with a `O×C×k×k` kernel.
    pub fn conv2d(&self, w: &Var<'g, T>, b: Option<&Var<'g, T>>, stride: usize, pad: usize) -> Var<'g, T> {
        let x = self.value();
        let wv = w.value();
        let (n, c, h, wd) = x.dims4();
        let (c_out, wc, k, k2) = wv.dims4();
        assert_eq!(wc, c, "conv2d: kernel expects {wc} input channels, got {c}");
        assert_eq!(k, k2, "conv2d: square kernels only");
        let geom = ConvGeom { c_in: c, h, w: wd, k, stride, pad };
        let bias = b.map(|b| b.value());
        let data = conv2d_forward(&x.data, n, &geom, &wv.data, bias.as_ref().map(|t| t.data.as_slice()), c_out);
        let (oh, ow) = geom.out_hw();
        let needs = self.needs() || w.needs() || b.is_some_and(|b| b.needs());
        self.graph.push(
            Tensor::new(&[n, c_out, oh, ow], data),
            Op::Conv2d {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
                geom,
                n,
                c_out,
            },
            needs,
        )
    }

    /// Edge-replicating spatial padding.
    pub fn pad_replicate(&self, pad: usize) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let mut data = Vec::with_capacity(n * c * ph * pw);
        for plane in 0..n * c {
            for i in 0..ph {
                let si = i.saturating_sub(pad).min(h - 1);
                for j in 0..pw {
                    let sj = j.saturating_sub(pad).min(w - 1);
                    data.push(x.data[plane * h * w + si * w + sj]);
                }
            }
        }
        self.unary(Tensor::new(&[n, c, ph, pw], data), Op::PadReplicate { x: self.id, pad })
    }

    /// Nearest-neighbour 2× spatial upsampling.
    pub fn upsample2x(&self) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let mut data = Vec::with_capacity(n * c * 4 * h * w);
        for plane in 0..n * c {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    data.push(x.data[plane * h * w + (i / 2) * w + j / 2]);
                }
            }
        }
        self.unary(Tensor::new(&[n, c, 2 * h, 2 * w], data), Op::Upsample2x(self.id))
    }

    /// Per-instance, per-channel standardization with `σ = sqrt(var + eps)`.
    pub fn instance_norm(&self, eps: f64) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let m = T::of(hw as f64);
        let eps = T::of(eps);
        let mut data = vec![T::zero(); x.numel()];
        let mut inv_std = Vec::with_capacity(n * c);
        for p in 0..n * c {
            let xs = &x.data[p * hw..(p + 1) * hw];
            let mean = xs.iter().copied().sum::<T>() / m;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
            let inv = T::one() / (var + eps).sqrt();
            for (o, &v) in data[p * hw..(p + 1) * hw].iter_mut().zip(xs) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.unary(Tensor::new(&x.shape, data), Op::InstanceNorm { x: self.id, inv_std })
    }

    fn reduce_inner(&self, inner: usize, out_shape: &[usize], mean: bool) -> Var<'g, T> {
        let x = self.value();
        assert_eq!(x.numel() % inner, 0, "reduce: inner size does not divide input");
        let div = if mean { T::of(inner as f64) } else { T::one() };
        let data: Vec<T> = x.data.chunks(inner).map(|c| c.iter().copied().sum::<T>() / div).collect();
        let op = if mean {
            Op::MeanInner { x: self.id, inner }
        } else {
            Op::SumInner { x: self.id, inner }
        };
        self.unary(Tensor::new(out_shape, data), op)
    }

    /// Global average pooling `N×C×H×W → N×C`.
    pub fn global_avg_pool(&self) -> Var<'g, T> {
        let (n, c, h, w) = self.value().dims4();
        self.reduce_inner(h * w, &[n, c], true)
    }

    /// Mean over all but the leading axis: `N×… → N`.
    pub fn mean_per_sample(&self) -> Var<'g, T> {
        let shape = self.shape();
        let n = shape[0];
        let inner = shape[1..].iter().product();
        self.reduce_inner(inner, &[n], true)
    }

    /// Sum over all but the leading axis: `N×… → N`.
    pub fn sum_per_sample(&self) -> Var<'g, T> {
        let shape = self.shape();
        let n = shape[0];
        let inner = shape[1..].iter().product();
        self.reduce_inner(inner, &[n], false)
    }

    /// `x[n, c, :, :] * s[n, c]`.
    pub fn channel_scale(&self, s: &Var<'g, T>) -> Var<'g, T> {
        let x = self.value();
        let sv = s.value();
        let (n, c, h, w) = x.dims4();
        assert_eq!(sv.shape, vec![n, c], "channel_scale: scale must be N×C");
        let hw = h * w;
        let mut data = x.data.clone();
        for p in 0..n * c {
            for v in &mut data[p * hw..(p + 1) * hw] {
                *v *= sv.data[p];
            }
        }
        self.binary(s, Tensor::new(&x.shape, data), Op::ChannelScale { x: self.id, s: s.id })
    }

    /// `x[n, c, :, :] + b[n, c]`.
    pub fn channel_bias(&self, b: &Var<'g, T>) -> Var<'g, T> {
        let x = self.value();
        let bv = b.value();
        let (n, c, h, w) = x.dims4();
        assert_eq!(bv.shape, vec![n, c], "channel_bias: bias must be N×C");
        let hw = h * w;
        let mut data = x.data.clone();
        for p in 0..n * c {
            for v in &mut data[p * hw..(p + 1) * hw] {
                *v += bv.data[p];
            }
        }
        self.binary(b, Tensor::new(&x.shape, data), Op::ChannelBias { x: self.id, b: b.id })
    }

    /// `x Wᵀ + b` for `x: N×in`, `W: out×in`.
    pub fn linear(&self, w: &Var<'g, T>, b: Option<&Var<'g, T>>) -> Var<'g, T> {
        let x = self.value();
        let wv = w.value();
        let (n, fin) = x.dims2();
        let (fout, wfin) = wv.dims2();
        assert_eq!(fin, wfin, "linear: expected {wfin} features, got {fin}");
        let mut data = vec![T::zero(); n * fout];
        let beta = if let Some(b) = b {
            let bv = b.value();
            assert_eq!(bv.shape, vec![fout], "linear: bias size");
            for row in data.chunks_mut(fout) {
                row.copy_from_slice(&bv.data);
            }
            T::one()
        } else {
            T::zero()
        };
        gemm(false, true, n, fout, fin, T::one(), &x.data, &wv.data, beta, &mut data);
        let needs = self.needs() || w.needs() || b.is_some_and(|b| b.needs());
        self.graph.push(
            Tensor::new(&[n, fout], data),
            Op::Linear {
                x: self.id,
                w: w.id,
                b: b.map(|b| b.id),
            },
            needs,
        )
    }

    /// Softmax along the last axis.
    pub fn softmax_last(&self) -> Var<'g, T> {
        let x = self.value();
        let k = *x.shape.last().expect("non-empty shape");
        let mut data = x.data.clone();
        for row in data.chunks_mut(k) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        self.unary(Tensor::new(&x.shape, data), Op::SoftmaxLast(self.id))
    }

    /// Slice `[..., k]` of the last axis, dropping that axis.
    pub fn select_last(&self, k: usize) -> Var<'g, T> {
        let x = self.value();
        let kk = *x.shape.last().expect("non-empty shape");
        assert!(k < kk, "select_last: index out of range");
        let data: Vec<T> = x.data.chunks(kk).map(|row| row[k]).collect();
        let shape = &x.shape[..x.shape.len() - 1];
        self.unary(Tensor::new(shape, data), Op::SelectLast { x: self.id, k })
    }

    /// Sum over the channel axis: `N×C×H×W → N×1×H×W`.
    pub fn sum_channels(&self) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let mut data = vec![T::zero(); n * hw];
        for b in 0..n {
            for ch in 0..c {
                for (o, &v) in data[b * hw..(b + 1) * hw].iter_mut().zip(&x.data[(b * c + ch) * hw..(b * c + ch + 1) * hw]) {
                    *o += v;
                }
            }
        }
        self.unary(Tensor::new(&[n, 1, h, w], data), Op::SumChannels(self.id))
    }

    pub fn mean_all(&self) -> Var<'g, T> {
        let x = self.value();
        let m = x.data.iter().copied().sum::<T>() / T::of(x.numel() as f64);
        self.unary(Tensor::scalar(m), Op::MeanAll(self.id))
    }

    /// L2-normalizes the channel vector at every spatial location:
    /// `y = x / sqrt(Σ_c x² + eps)`.
    pub fn normalize_channels(&self, eps: f64) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = x.dims4();
        let hw = h * w;
        let eps = T::of(eps);
        let mut data = vec![T::zero(); x.numel()];
        let mut norms = Vec::with_capacity(n * hw);
        for b in 0..n {
            for p in 0..hw {
                let idx = |ch: usize| (b * c + ch) * hw + p;
                let ss: T = (0..c).map(|ch| x.data[idx(ch)] * x.data[idx(ch)]).sum();
                let nrm = (ss + eps).sqrt();
                for ch in 0..c {
                    data[idx(ch)] = x.data[idx(ch)] / nrm;
                }
                norms.push(nrm);
            }
        }
        self.unary(Tensor::new(&x.shape, data), Op::NormalizeChannels { x: self.id, norms })
    }

    /// Inner products of each location's channel vector with every location
    /// of its `patch × patch` window (shifted to stay inside the map).
    /// Output is `N × (H·W) × patch²`.
    pub fn local_similarity(&self, patch: usize) -> Var<'g, T> {
        let y = self.value();
        let (n, c, h, w) = y.dims4();
        assert!(patch >= 1 && patch <= h && patch <= w, "local_similarity: patch larger than map");
        let hw = h * w;
        let pp = patch * patch;
        let mut data = vec![T::zero(); n * hw * pp];
        for b in 0..n {
            let base = b * c * hw;
            for qi in 0..h {
                let si = window_start(qi, patch, h);
                for qj in 0..w {
                    let sj = window_start(qj, patch, w);
                    let q = qi * w + qj;
                    for t in 0..pp {
                        let r = (si + t / patch) * w + sj + t % patch;
                        data[(b * hw + q) * pp + t] =
                            (0..c).map(|ch| y.data[base + ch * hw + q] * y.data[base + ch * hw + r]).sum();
                    }
                }
            }
        }
        self.unary(Tensor::new(&[n, hw, pp], data), Op::LocalSimilarity { y: self.id, patch })
    }
}

/// Concatenates `N×c_i` matrices along the column axis.
pub fn concat_cols<'g, T: Float>(parts: &[Var<'g, T>]) -> Var<'g, T> {
    assert!(!parts.is_empty(), "concat of nothing");
    let graph = parts[0].graph;
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let n = values[0].dims2().0;
    let total: usize = values.iter().map(|v| v.dims2().1).sum();
    let mut data = Vec::with_capacity(n * total);
    for r in 0..n {
        for v in &values {
            let (vn, cols) = v.dims2();
            assert_eq!(vn, n, "concat_cols: row mismatch");
            data.extend_from_slice(&v.data[r * cols..(r + 1) * cols]);
        }
    }
    let needs = parts.iter().any(|p| p.needs());
    graph.push(
        Tensor::new(&[n, total], data),
        Op::ConcatCols(parts.iter().map(|p| p.id).collect()),
        needs,
    )
}
