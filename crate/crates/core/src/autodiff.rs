//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar walks the tape in reverse and returns the
//! gradient of that scalar with respect to every leaf that was marked as
//! requiring one. Nodes that do not depend on a gradient-requiring leaf are
//! never visited, so frozen sub-networks cost only their forward pass plus
//! the input-gradient path that actually reaches a trainable tensor.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::{gemm, Real};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One bilinear tap set: four flat source offsets and their weights.
pub type Taps<T> = [(u32, T); 4];

/// Linear interpolation coefficients along one axis.
#[derive(Clone, Copy, Debug)]
pub struct AxisTap<T> {
    pub i0: usize,
    pub i1: usize,
    pub frac: T,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBroadcast(Var, Var),
    MatMul(Var, Var),
    Conv2d { x: Var, w: Var, stride: usize, pad: usize },
    Silu(Var),
    Abs(Var),
    Square(Var),
    Clamp { x: Var, lo: T, hi: T },
    Upsample2(Var),
    Resize { x: Var, ty: Vec<AxisTap<T>>, tx: Vec<AxisTap<T>> },
    Concat0(Vec<Var>),
    ConcatLast(Vec<Var>),
    Slice0 { x: Var, start: usize },
    Reshape(Var),
    TimeShift { x: Var, offset: isize },
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    Warp { x: Var, taps: Vec<Taps<T>> },
    ChannelNorm { x: Var, norms: Vec<T> },
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    grad: bool,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

fn trailing(shape: &[usize]) -> Vec<usize> {
    shape[1..].to_vec()
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, grad: bool) -> Var {
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape(), data).unwrap();
        let grad = self.needs(&[a, b]);
        self.push(out, op, grad)
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let out = self.nodes[x.0].value.map(f);
        let grad = self.needs(&[x]);
        self.push(out, op, grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    /// `x + b` where `b` repeats over the leading elements of `x`.
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Var {
        let (vx, vb) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        let bl = vb.len();
        assert!(bl > 0 && vx.len() % bl == 0, "broadcast {:?} over {:?}", vb.shape(), vx.shape());
        let data = vx.data().iter().enumerate().map(|(i, &v)| v + vb.data()[i % bl]).collect();
        let out = Tensor::new(vx.shape(), data).unwrap();
        let grad = self.needs(&[x, b]);
        self.push(out, Op::AddBroadcast(x, b), grad)
    }

    /// Contracts the last axis of `x` (`[.., K]`) with `w` (`[K, N]`).
    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        assert_eq!(vw.shape().len(), 2, "matmul weight must be 2-D");
        let (k, n) = (vw.shape()[0], vw.shape()[1]);
        assert_eq!(vx.last_dim(), k, "matmul inner dims {:?} x {:?}", vx.shape(), vw.shape());
        let m = vx.len() / k;
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, vx.data(), false, vw.data(), false, &mut out, false);
        let mut shape = vx.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let out = Tensor::new(&shape, out).unwrap();
        let grad = self.needs(&[x, w]);
        self.push(out, Op::MatMul(x, w), grad)
    }

    /// 2-D convolution, `x: [N,H,W,Ci]`, `w: [kh,kw,Ci,Co]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let geo = ConvGeom::new(vx.shape(), vw.shape(), stride, pad);
        let mut out = vec![T::zero(); geo.n * geo.ho * geo.wo * geo.co];
        let rows_per = geo.ho * geo.wo;
        let mut cols = Vec::new();
        for (f0, nf) in geo.chunks() {
            let rows = nf * rows_per;
            let xs = &vx.data()[f0 * geo.frame_in()..(f0 + nf) * geo.frame_in()];
            let a: &[T] = if geo.is_pointwise() {
                xs
            } else {
                geo.im2col(xs, nf, &mut cols);
                &cols
            };
            gemm(rows, geo.kk(), geo.co, a, false, vw.data(), false, &mut out[f0 * rows_per * geo.co..][..rows * geo.co], false);
        }
        let out = Tensor::new(&[geo.n, geo.ho, geo.wo, geo.co], out).unwrap();
        let grad = self.needs(&[x, w]);
        self.push(out, Op::Conv2d { x, w, stride, pad }, grad)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Silu(x), |v| v / (T::one() + (-v).exp()))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// Clamp to `[lo, hi]`; gradient flows only inside the interval.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, Op::Clamp { x, lo, hi }, |v| v.max(lo).min(hi))
    }

    /// Nearest-neighbour ×2 upsampling of `[N,H,W,C]`.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let vx = &self.nodes[x.0].value;
        let s = vx.shape();
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let mut out = vec![T::zero(); n * 4 * h * w * c];
        for f in 0..n {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    let src = ((f * h + y / 2) * w + xx / 2) * c;
                    let dst = ((f * 2 * h + y) * 2 * w + xx) * c;
                    out[dst..dst + c].copy_from_slice(&vx.data()[src..src + c]);
                }
            }
        }
        let out = Tensor::new(&[n, 2 * h, 2 * w, c], out).unwrap();
        let grad = self.needs(&[x]);
        self.push(out, Op::Upsample2(x), grad)
    }

    /// Separable bilinear resampling of `[N,H,W,C]` with precomputed taps.
    pub fn resize(&mut self, x: Var, ty: Vec<AxisTap<T>>, tx: Vec<AxisTap<T>>) -> Var {
        let vx = &self.nodes[x.0].value;
        let s = vx.shape();
        let out = resize_forward(vx.data(), [s[0], s[1], s[2], s[3]], &ty, &tx);
        let out = Tensor::new(&[s[0], ty.len(), tx.len(), s[3]], out).unwrap();
        let grad = self.needs(&[x]);
        self.push(out, Op::Resize { x, ty, tx }, grad)
    }

    /// Concatenation along the leading axis.
    pub fn concat0(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let rest = trailing(self.shape(xs[0]));
        let mut lead = 0;
        let mut data = Vec::new();
        for v in xs {
            let t = &self.nodes[v.0].value;
            assert_eq!(trailing(t.shape()), rest, "concat0 trailing shape mismatch");
            lead += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&rest);
        let grad = self.needs(xs);
        self.push(Tensor::new(&shape, data).unwrap(), Op::Concat0(xs.to_vec()), grad)
    }

    /// Concatenation along the trailing (channel) axis.
    pub fn concat_last(&mut self, xs: &[Var]) -> Var {
        assert!(!xs.is_empty());
        let lead = self.value(xs[0]).len() / self.value(xs[0]).last_dim();
        let widths: Vec<usize> = xs.iter().map(|&v| self.value(v).last_dim()).collect();
        let total: usize = widths.iter().sum();
        let mut data = vec![T::zero(); lead * total];
        let mut off = 0;
        for (v, &cw) in xs.iter().zip(&widths) {
            let t = &self.nodes[v.0].value;
            assert_eq!(t.len(), lead * cw, "concat_last leading shape mismatch");
            for r in 0..lead {
                data[r * total + off..r * total + off + cw].copy_from_slice(&t.data()[r * cw..(r + 1) * cw]);
            }
            off += cw;
        }
        let mut shape = self.shape(xs[0]).to_vec();
        *shape.last_mut().unwrap() = total;
        let grad = self.needs(xs);
        self.push(Tensor::new(&shape, data).unwrap(), Op::ConcatLast(xs.to_vec()), grad)
    }

    /// Rows `start..start+len` of the leading axis.
    pub fn slice0(&mut self, x: Var, start: usize, len: usize) -> Var {
        let t = &self.nodes[x.0].value;
        assert!(start + len <= t.shape()[0], "slice0 out of range");
        let inner: usize = t.shape()[1..].iter().product();
        let data = t.data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = t.shape().to_vec();
        shape[0] = len;
        let grad = self.needs(&[x]);
        self.push(Tensor::new(&shape, data).unwrap(), Op::Slice0 { x, start }, grad)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.nodes[x.0].value.clone().reshaped(shape);
        let grad = self.needs(&[x]);
        self.push(t, Op::Reshape(x), grad)
    }

    /// `out[t] = x[t + offset]` along the leading axis, zero outside.
    pub fn time_shift(&mut self, x: Var, offset: isize) -> Var {
        let t = &self.nodes[x.0].value;
        let n = t.shape()[0] as isize;
        let inner = t.len() / t.shape()[0];
        let mut data = vec![T::zero(); t.len()];
        for i in 0..n {
            let src = i + offset;
            if (0..n).contains(&src) {
                data[i as usize * inner..(i as usize + 1) * inner]
                    .copy_from_slice(&t.data()[src as usize * inner..(src as usize + 1) * inner]);
            }
        }
        let out = Tensor::new(t.shape(), data).unwrap();
        let grad = self.needs(&[x]);
        self.push(out, Op::TimeShift { x, offset }, grad)
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q: [Lq, D]`, `k, v: [Lk, D]`; heads split `D` evenly, softmax runs
    /// over the key axis with scale `1/sqrt(D/heads)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (tq, tk, tv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        let d = tq.last_dim();
        assert!(heads > 0 && d % heads == 0, "heads must divide width");
        assert_eq!(tk.last_dim(), d);
        assert_eq!(tk.shape(), tv.shape());
        let (lq, lk, dh) = (tq.len() / d, tk.len() / d, d / heads);
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut probs = vec![T::zero(); heads * lq * lk];
        let mut out = vec![T::zero(); lq * d];
        let mut logits = vec![T::zero(); lk];
        for h in 0..heads {
            for i in 0..lq {
                let qi = &tq.data()[i * d + h * dh..i * d + (h + 1) * dh];
                let mut mx = T::neg_infinity();
                for (j, l) in logits.iter_mut().enumerate() {
                    let kj = &tk.data()[j * d + h * dh..j * d + (h + 1) * dh];
                    *l = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                    mx = mx.max(*l);
                }
                let p = &mut probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                let mut z = T::zero();
                for (pj, &l) in p.iter_mut().zip(&logits) {
                    *pj = (l - mx).exp();
                    z += *pj;
                }
                for pj in p.iter_mut() {
                    *pj /= z;
                }
                let o = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                for (j, &pj) in p.iter().enumerate() {
                    let vj = &tv.data()[j * d + h * dh..j * d + (h + 1) * dh];
                    for (oo, &vv) in o.iter_mut().zip(vj) {
                        *oo += pj * vv;
                    }
                }
            }
        }
        let mut shape = tq.shape().to_vec();
        *shape.last_mut().unwrap() = d;
        let out = Tensor::new(&shape, out).unwrap();
        let grad = self.needs(&[q, k, v]);
        self.push(out, Op::Attention { q, k, v, heads, probs }, grad)
    }

    /// Gathers `x` through precomputed bilinear taps (one tap set per output
    /// pixel; channels share taps). Used for backward warping.
    pub fn gather_bilinear(&mut self, x: Var, taps: Vec<Taps<T>>) -> Var {
        let t = &self.nodes[x.0].value;
        let c = t.last_dim();
        assert_eq!(taps.len() * c, t.len(), "one tap set per pixel");
        let mut out = vec![T::zero(); t.len()];
        for (p, tp) in taps.iter().enumerate() {
            let o = &mut out[p * c..(p + 1) * c];
            for &(src, wt) in tp {
                if wt == T::zero() {
                    continue;
                }
                let s = &t.data()[src as usize * c..(src as usize + 1) * c];
                for (oo, &v) in o.iter_mut().zip(s) {
                    *oo += wt * v;
                }
            }
        }
        let out = Tensor::new(t.shape(), out).unwrap();
        let grad = self.needs(&[x]);
        self.push(out, Op::Warp { x, taps }, grad)
    }

    /// Unit-normalises each trailing-axis vector: `x / sqrt(|x|² + eps)`.
    pub fn channel_norm(&mut self, x: Var, eps: T) -> Var {
        let t = &self.nodes[x.0].value;
        let c = t.last_dim();
        let mut norms = Vec::with_capacity(t.len() / c);
        let mut out = vec![T::zero(); t.len()];
        for (row, o) in t.data().chunks(c).zip(out.chunks_mut(c)) {
            let nrm = (row.iter().map(|&v| v * v).sum::<T>() + eps).sqrt();
            for (oo, &v) in o.iter_mut().zip(row) {
                *oo = v / nrm;
            }
            norms.push(nrm);
        }
        let out = Tensor::new(t.shape(), out).unwrap();
        let grad = self.needs(&[x]);
        self.push(out, Op::ChannelNorm { x, norms }, grad)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.sum();
        let grad = self.needs(&[x]);
        self.push(Tensor::new(&[1], vec![s]).unwrap(), Op::Sum(x), grad)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = &self.nodes[x.0].value;
        let s = t.sum() / T::of(t.len() as f64);
        let grad = self.needs(&[x]);
        self.push(Tensor::new(&[1], vec![s]).unwrap(), Op::Mean(x), grad)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].grad {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.backprop_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let want = |v: Var| self.nodes[v.0].grad;
        let acc = |v: Var, t: Tensor<T>, grads: &mut [Option<Tensor<T>>]| match &mut grads[v.0] {
            Some(e) => e.add_assign(&t),
            slot @ None => *slot = Some(t),
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if want(*a) {
                    acc(*a, g.clone(), grads);
                }
                if want(*b) {
                    acc(*b, g.clone(), grads);
                }
            }
            Op::Sub(a, b) => {
                if want(*a) {
                    acc(*a, g.clone(), grads);
                }
                if want(*b) {
                    acc(*b, g.map(|x| -x), grads);
                }
            }
            Op::Mul(a, b) => {
                if want(*a) {
                    let t = zip_map(g, val(*b), |x, y| x * y);
                    acc(*a, t, grads);
                }
                if want(*b) {
                    let t = zip_map(g, val(*a), |x, y| x * y);
                    acc(*b, t, grads);
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                acc(*x, g.map(|v| v * c), grads);
            }
            Op::AddBroadcast(x, b) => {
                if want(*x) {
                    acc(*x, g.clone(), grads);
                }
                if want(*b) {
                    let vb = val(*b);
                    let bl = vb.len();
                    let mut gb = vec![T::zero(); bl];
                    for (i, &v) in g.data().iter().enumerate() {
                        gb[i % bl] += v;
                    }
                    acc(*b, Tensor::new(vb.shape(), gb).unwrap(), grads);
                }
            }
            Op::MatMul(x, w) => {
                let (vx, vw) = (val(*x), val(*w));
                let (k, n) = (vw.shape()[0], vw.shape()[1]);
                let m = vx.len() / k;
                if want(*x) {
                    let mut gx = vec![T::zero(); m * k];
                    gemm(m, n, k, g.data(), false, vw.data(), true, &mut gx, false);
                    acc(*x, Tensor::new(vx.shape(), gx).unwrap(), grads);
                }
                if want(*w) {
                    let mut gw = vec![T::zero(); k * n];
                    gemm(k, m, n, vx.data(), true, g.data(), false, &mut gw, false);
                    acc(*w, Tensor::new(vw.shape(), gw).unwrap(), grads);
                }
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (vx, vw) = (val(*x), val(*w));
                let geo = ConvGeom::new(vx.shape(), vw.shape(), *stride, *pad);
                let rows_per = geo.ho * geo.wo;
                let kk = geo.kk();
                let mut gx = if want(*x) { Some(vec![T::zero(); vx.len()]) } else { None };
                let mut gw = if want(*w) { Some(vec![T::zero(); vw.len()]) } else { None };
                let mut cols = Vec::new();
                let mut gcols = Vec::new();
                for (f0, nf) in geo.chunks() {
                    let rows = nf * rows_per;
                    let gout = &g.data()[f0 * rows_per * geo.co..][..rows * geo.co];
                    let xs = &vx.data()[f0 * geo.frame_in()..(f0 + nf) * geo.frame_in()];
                    if let Some(gw) = gw.as_mut() {
                        let a: &[T] = if geo.is_pointwise() {
                            xs
                        } else {
                            geo.im2col(xs, nf, &mut cols);
                            &cols
                        };
                        gemm(kk, rows, geo.co, a, true, gout, false, gw, true);
                    }
                    if let Some(gx) = gx.as_mut() {
                        let dst = &mut gx[f0 * geo.frame_in()..(f0 + nf) * geo.frame_in()];
                        if geo.is_pointwise() {
                            gemm(rows, geo.co, kk, gout, false, vw.data(), true, dst, true);
                        } else {
                            gcols.clear();
                            gcols.resize(rows * kk, T::zero());
                            gemm(rows, geo.co, kk, gout, false, vw.data(), true, &mut gcols, false);
                            geo.col2im(&gcols, nf, dst);
                        }
                    }
                }
                if let Some(gx) = gx {
                    acc(*x, Tensor::new(vx.shape(), gx).unwrap(), grads);
                }
                if let Some(gw) = gw {
                    acc(*w, Tensor::new(vw.shape(), gw).unwrap(), grads);
                }
            }
            Op::Silu(x) => {
                let t = zip_map(g, val(*x), |gv, v| {
                    let s = T::one() / (T::one() + (-v).exp());
                    gv * (s + v * s * (T::one() - s))
                });
                acc(*x, t, grads);
            }
            Op::Abs(x) => {
                let t = zip_map(g, val(*x), |gv, v| {
                    if v > T::zero() {
                        gv
                    } else if v < T::zero() {
                        -gv
                    } else {
                        T::zero()
                    }
                });
                acc(*x, t, grads);
            }
            Op::Square(x) => {
                let two = T::of(2.0);
                acc(*x, zip_map(g, val(*x), |gv, v| two * v * gv), grads);
            }
            Op::Clamp { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                let t = zip_map(g, val(*x), |gv, v| if v >= lo && v <= hi { gv } else { T::zero() });
                acc(*x, t, grads);
            }
            Op::Upsample2(x) => {
                let vx = val(*x);
                let s = vx.shape();
                let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                let mut gx = vec![T::zero(); vx.len()];
                for f in 0..n {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            let dst = ((f * h + y / 2) * w + xx / 2) * c;
                            let src = ((f * 2 * h + y) * 2 * w + xx) * c;
                            for ch in 0..c {
                                gx[dst + ch] += g.data()[src + ch];
                            }
                        }
                    }
                }
                acc(*x, Tensor::new(s, gx).unwrap(), grads);
            }
            Op::Resize { x, ty, tx } => {
                let vx = val(*x);
                let s = vx.shape();
                let gx = resize_backward(g.data(), [s[0], s[1], s[2], s[3]], ty, tx);
                acc(*x, Tensor::new(s, gx).unwrap(), grads);
            }
            Op::Concat0(xs) => {
                let mut off = 0;
                for v in xs {
                    let n = val(*v).len();
                    if want(*v) {
                        acc(*v, Tensor::new(val(*v).shape(), g.data()[off..off + n].to_vec()).unwrap(), grads);
                    }
                    off += n;
                }
            }
            Op::ConcatLast(xs) => {
                let total = g.last_dim();
                let lead = g.len() / total;
                let mut off = 0;
                for v in xs {
                    let cw = val(*v).last_dim();
                    if want(*v) {
                        let mut part = Vec::with_capacity(lead * cw);
                        for r in 0..lead {
                            part.extend_from_slice(&g.data()[r * total + off..r * total + off + cw]);
                        }
                        acc(*v, Tensor::new(val(*v).shape(), part).unwrap(), grads);
                    }
                    off += cw;
                }
            }
            Op::Slice0 { x, start } => {
                let vx = val(*x);
                let inner: usize = vx.shape()[1..].iter().product();
                let mut gx = vec![T::zero(); vx.len()];
                gx[start * inner..start * inner + g.len()].copy_from_slice(g.data());
                acc(*x, Tensor::new(vx.shape(), gx).unwrap(), grads);
            }
            Op::Reshape(x) => {
                acc(*x, g.clone().reshaped(val(*x).shape()), grads);
            }
            Op::TimeShift { x, offset } => {
                let vx = val(*x);
                let n = vx.shape()[0] as isize;
                let inner = vx.len() / vx.shape()[0];
                let mut gx = vec![T::zero(); vx.len()];
                for i in 0..n {
                    let src = i + offset;
                    if (0..n).contains(&src) {
                        let (s, d) = (src as usize * inner, i as usize * inner);
                        for j in 0..inner {
                            gx[s + j] += g.data()[d + j];
                        }
                    }
                }
                acc(*x, Tensor::new(vx.shape(), gx).unwrap(), grads);
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (tq, tk, tv) = (val(*q), val(*k), val(*v));
                let d = tq.last_dim();
                let (lq, lk, dh) = (tq.len() / d, tk.len() / d, d / heads);
                let scale = T::one() / T::of(dh as f64).sqrt();
                let mut gq = vec![T::zero(); tq.len()];
                let mut gk = vec![T::zero(); tk.len()];
                let mut gv = vec![T::zero(); tv.len()];
                let mut ds = vec![T::zero(); lk];
                for h in 0..*heads {
                    for i in 0..lq {
                        let p = &probs[(h * lq + i) * lk..(h * lq + i + 1) * lk];
                        let go = &g.data()[i * d + h * dh..i * d + (h + 1) * dh];
                        let mut dot = T::zero();
                        for (j, dsj) in ds.iter_mut().enumerate() {
                            let vj = &tv.data()[j * d + h * dh..j * d + (h + 1) * dh];
                            *dsj = go.iter().zip(vj).map(|(&a, &b)| a * b).sum();
                            dot += p[j] * *dsj;
                            let gvj = &mut gv[j * d + h * dh..j * d + (h + 1) * dh];
                            for (gg, &o) in gvj.iter_mut().zip(go) {
                                *gg += p[j] * o;
                            }
                        }
                        let qi = &tq.data()[i * d + h * dh..i * d + (h + 1) * dh];
                        for (j, dsj) in ds.iter().enumerate() {
                            let w = p[j] * (*dsj - dot) * scale;
                            if w == T::zero() {
                                continue;
                            }
                            let kj = &tk.data()[j * d + h * dh..j * d + (h + 1) * dh];
                            let gqi = &mut gq[i * d + h * dh..i * d + (h + 1) * dh];
                            for (gg, &kv) in gqi.iter_mut().zip(kj) {
                                *gg += w * kv;
                            }
                            let gkj = &mut gk[j * d + h * dh..j * d + (h + 1) * dh];
                            for (gg, &qv) in gkj.iter_mut().zip(qi) {
                                *gg += w * qv;
                            }
                        }
                    }
                }
                if want(*q) {
                    acc(*q, Tensor::new(tq.shape(), gq).unwrap(), grads);
                }
                if want(*k) {
                    acc(*k, Tensor::new(tk.shape(), gk).unwrap(), grads);
                }
                if want(*v) {
                    acc(*v, Tensor::new(tv.shape(), gv).unwrap(), grads);
                }
            }
            Op::Warp { x, taps } => {
                let vx = val(*x);
                let c = vx.last_dim();
                let mut gx = vec![T::zero(); vx.len()];
                for (p, tp) in taps.iter().enumerate() {
                    let go = &g.data()[p * c..(p + 1) * c];
                    for &(src, wt) in tp {
                        if wt == T::zero() {
                            continue;
                        }
                        let dst = &mut gx[src as usize * c..(src as usize + 1) * c];
                        for (d, &o) in dst.iter_mut().zip(go) {
                            *d += wt * o;
                        }
                    }
                }
                acc(*x, Tensor::new(vx.shape(), gx).unwrap(), grads);
            }
            Op::ChannelNorm { x, norms } => {
                let vx = val(*x);
                let c = vx.last_dim();
                let out = &node.value;
                let mut gx = vec![T::zero(); vx.len()];
                for (r, &nrm) in norms.iter().enumerate() {
                    let y = &out.data()[r * c..(r + 1) * c];
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let dot: T = y.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for j in 0..c {
                        gx[r * c + j] = (gr[j] - y[j] * dot) / nrm;
                    }
                }
                acc(*x, Tensor::new(vx.shape(), gx).unwrap(), grads);
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                acc(*x, Tensor::full(val(*x).shape(), gv), grads);
            }
            Op::Mean(x) => {
                let vx = val(*x);
                let gv = g.data()[0] / T::of(vx.len() as f64);
                acc(*x, Tensor::full(vx.shape(), gv), grads);
            }
        }
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(b.shape(), data).unwrap()
}

/// Shapes for an NHWC convolution.
struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    ci: usize,
    kh: usize,
    kw: usize,
    co: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

const CONV_CHUNK_ROWS: usize = 16384;

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Self {
        assert_eq!(xs.len(), 4, "conv2d input must be [N,H,W,C]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [kh,kw,Ci,Co]");
        assert_eq!(xs[3], ws[2], "conv2d channel mismatch {:?} vs {:?}", xs, ws);
        assert!(stride >= 1);
        let (h, w) = (xs[1], xs[2]);
        assert!(h + 2 * pad >= ws[0] && w + 2 * pad >= ws[1], "conv2d kernel larger than padded input");
        let ho = (h + 2 * pad - ws[0]) / stride + 1;
        let wo = (w + 2 * pad - ws[1]) / stride + 1;
        Self { n: xs[0], h, w, ci: xs[3], kh: ws[0], kw: ws[1], co: ws[3], ho, wo, stride, pad }
    }

    fn kk(&self) -> usize {
        self.kh * self.kw * self.ci
    }

    fn frame_in(&self) -> usize {
        self.h * self.w * self.ci
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn chunks(&self) -> impl Iterator<Item = (usize, usize)> {
        let per = (CONV_CHUNK_ROWS / (self.ho * self.wo).max(1)).max(1);
        let n = self.n;
        (0..n).step_by(per).map(move |f0| (f0, per.min(n - f0)))
    }

    fn im2col<T: Real>(&self, xs: &[T], nf: usize, cols: &mut Vec<T>) {
        let kk = self.kk();
        cols.clear();
        cols.resize(nf * self.ho * self.wo * kk, T::zero());
        for f in 0..nf {
            let frame = &xs[f * self.frame_in()..(f + 1) * self.frame_in()];
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = &mut cols[((f * self.ho + oy) * self.wo + ox) * kk..][..kk];
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let src = (iy as usize * self.w + ix as usize) * self.ci;
                            let dst = (ky * self.kw + kx) * self.ci;
                            row[dst..dst + self.ci].copy_from_slice(&frame[src..src + self.ci]);
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], nf: usize, dst: &mut [T]) {
        let kk = self.kk();
        for f in 0..nf {
            let frame = &mut dst[f * self.frame_in()..(f + 1) * self.frame_in()];
            for oy in 0..self.ho {
                for ox in 0..self.wo {
                    let row = &cols[((f * self.ho + oy) * self.wo + ox) * kk..][..kk];
                    for ky in 0..self.kh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for kx in 0..self.kw {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let d = (iy as usize * self.w + ix as usize) * self.ci;
                            let s = (ky * self.kw + kx) * self.ci;
                            for c in 0..self.ci {
                                frame[d + c] += row[s + c];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Half-pixel-centre bilinear taps mapping `n_in` samples onto `n_out`.
pub fn axis_taps<T: Real>(n_in: usize, n_out: usize) -> Vec<AxisTap<T>> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = libm::floor(src) as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            AxisTap { i0, i1, frac: T::of(src - i0 as f64) }
        })
        .collect()
}

pub(crate) fn resize_forward<T: Real>(x: &[T], s: [usize; 4], ty: &[AxisTap<T>], tx: &[AxisTap<T>]) -> Vec<T> {
    let [n, h, w, c] = s;
    let (ho, wo) = (ty.len(), tx.len());
    // rows first, then columns
    let mut tmp = vec![T::zero(); n * ho * w * c];
    for f in 0..n {
        for (oy, t) in ty.iter().enumerate() {
            let r0 = &x[((f * h + t.i0) * w) * c..][..w * c];
            let r1 = &x[((f * h + t.i1) * w) * c..][..w * c];
            let dst = &mut tmp[((f * ho + oy) * w) * c..][..w * c];
            for j in 0..w * c {
                dst[j] = r0[j] + t.frac * (r1[j] - r0[j]);
            }
        }
    }
    let mut out = vec![T::zero(); n * ho * wo * c];
    for r in 0..n * ho {
        let src = &tmp[r * w * c..(r + 1) * w * c];
        let dst = &mut out[r * wo * c..(r + 1) * wo * c];
        for (ox, t) in tx.iter().enumerate() {
            for ch in 0..c {
                let a = src[t.i0 * c + ch];
                let b = src[t.i1 * c + ch];
                dst[ox * c + ch] = a + t.frac * (b - a);
            }
        }
    }
    out
}

fn resize_backward<T: Real>(g: &[T], s: [usize; 4], ty: &[AxisTap<T>], tx: &[AxisTap<T>]) -> Vec<T> {
    let [n, h, w, c] = s;
    let (ho, wo) = (ty.len(), tx.len());
    let mut tmp = vec![T::zero(); n * ho * w * c];
    for r in 0..n * ho {
        let src = &g[r * wo * c..(r + 1) * wo * c];
        let dst = &mut tmp[r * w * c..(r + 1) * w * c];
        for (ox, t) in tx.iter().enumerate() {
            for ch in 0..c {
                let v = src[ox * c + ch];
                dst[t.i0 * c + ch] += (T::one() - t.frac) * v;
                dst[t.i1 * c + ch] += t.frac * v;
            }
        }
    }
    let mut gx = vec![T::zero(); n * h * w * c];
    for f in 0..n {
        for (oy, t) in ty.iter().enumerate() {
            let src = &tmp[((f * ho + oy) * w) * c..][..w * c];
            for j in 0..w * c {
                gx[((f * h + t.i0) * w) * c + j] += (T::one() - t.frac) * src[j];
                gx[((f * h + t.i1) * w) * c + j] += t.frac * src[j];
            }
        }
    }
    gx
}
