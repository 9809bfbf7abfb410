//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the tape in reverse and accumulates gradients into the nodes that
//! require them. Ops are coarse (convolution, normalization, attention
//! matmuls) so the tape stays short and each backward rule is hand-written.
//!
//! Shape violations inside the graph are programming errors and panic; the
//! public model and loss entry points validate user input before building.

use crate::tensor::{Real, Tensor};

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const NORM_EPS: f64 = 1e-5;

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddSuffix(Var, Var),
    AddChannel(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: (usize, usize),
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        rstd: Vec<T>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        rstd: Vec<T>,
    },
    Silu(Var),
    Softmax(Var),
    L2Normalize {
        x: Var,
        eps: T,
        norms: Vec<T>,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Upsample2x(Var),
    AvgPool {
        x: Var,
        factor: usize,
    },
    SelectRow {
        table: Var,
        row: usize,
    },
    Mse(Var, Var),
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// The tape.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
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

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Row-major strides.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Returns `out` with `out.shape[i] = shape[perm[i]]`.
fn permute_data<T: Copy>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let nd = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = data.len();
    let mut out = Vec::with_capacity(total);
    if total == 0 {
        return (out_shape, out);
    }
    if nd == 0 {
        out.extend_from_slice(data);
        return (out_shape, out);
    }
    let last = nd - 1;
    let inner_len = out_shape[last];
    let inner_stride = src_strides[last];
    let mut idx = vec![0usize; nd];
    let mut base = 0usize;
    while out.len() < total {
        if inner_stride == 1 {
            out.extend_from_slice(&data[base..base + inner_len]);
        } else {
            let mut off = base;
            for _ in 0..inner_len {
                out.push(data[off]);
                off += inner_stride;
            }
        }
        // increment the outer multi-index
        let mut ax = last;
        loop {
            if ax == 0 {
                break;
            }
            ax -= 1;
            idx[ax] += 1;
            base += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

fn invert_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    ph: usize,
    pw: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize], stride: usize, pad: (usize, usize)) -> Self {
        assert_eq!(xs.len(), 4, "conv2d input must be [N, C, H, W], got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d weight must be 4-d, got {ws:?}");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch {xs:?} vs {ws:?}");
        assert!(stride >= 1);
        let (h, w) = (xs[2], xs[3]);
        let (kh, kw) = (ws[2], ws[3]);
        assert!(h + 2 * pad.0 >= kh && w + 2 * pad.1 >= kw, "conv2d kernel larger than input");
        Self {
            n: xs[0],
            cin: xs[1],
            h,
            w,
            cout: ws[0],
            kh,
            kw,
            ho: (h + 2 * pad.0 - kh) / stride + 1,
            wo: (w + 2 * pad.1 - kw) / stride + 1,
            stride,
            ph: pad.0,
            pw: pad.1,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.ph == 0 && self.pw == 0
    }

    fn ckk(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let hw_out = self.ho * self.wo;
        for c in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                    for oi in 0..self.ho {
                        let ii = (oi * self.stride + ki) as isize - self.ph as isize;
                        let drow = &mut dst[oi * self.wo..(oi + 1) * self.wo];
                        if ii < 0 || ii >= self.h as isize {
                            drow.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &x[(c * self.h + ii as usize) * self.w..][..self.w];
                        for (oj, d) in drow.iter_mut().enumerate() {
                            let jj = (oj * self.stride + kj) as isize - self.pw as isize;
                            *d = if jj < 0 || jj >= self.w as isize {
                                T::zero()
                            } else {
                                src[jj as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], dx: &mut [T]) {
        let hw_out = self.ho * self.wo;
        for c in 0..self.cin {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * hw_out..(row + 1) * hw_out];
                    for oi in 0..self.ho {
                        let ii = (oi * self.stride + ki) as isize - self.ph as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        let drow = &mut dx[(c * self.h + ii as usize) * self.w..][..self.w];
                        for oj in 0..self.wo {
                            let jj = (oj * self.stride + kj) as isize - self.pw as isize;
                            if jj >= 0 && jj < self.w as isize {
                                drow[jj as usize] += src[oi * self.wo + oj];
                            }
                        }
                    }
                }
            }
        }
    }
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf without gradient.
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
        self.nodes[v.0].needs_grad
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "{what}: shape mismatch");
        va.zip_map(vb, f).expect("shape checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, "add", |x, y| x + y);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, "sub", |x, y| x - y);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.binary(a, b, "mul", |x, y| x * y);
        let ng = self.ng(&[a, b]);
        self.push(v, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).map(|x| x * s);
        let ng = self.ng(&[a]);
        self.push(v, Op::Scale(a, s), ng)
    }

    /// `x + b` where `b`'s shape equals the trailing dims of `x`.
    pub fn add_suffix(&mut self, x: Var, b: Var) -> Var {
        let (xs, bs) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        assert!(
            bs.len() <= xs.len() && xs[xs.len() - bs.len()..] == bs[..],
            "add_suffix: {bs:?} is not a suffix of {xs:?}"
        );
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(bv.len().max(1)) {
            for (o, &bb) in chunk.iter_mut().zip(&bv) {
                *o += bb;
            }
        }
        let ng = self.ng(&[x, b]);
        self.push(out, Op::AddSuffix(x, b), ng)
    }

    /// `x[n, c, ...] + b[c]`.
    pub fn add_channel(&mut self, x: Var, b: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert!(xs.len() >= 2 && self.shape(b) == [xs[1]], "add_channel: {xs:?} vs {:?}", self.shape(b));
        let inner = numel(&xs[2..]);
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(inner.max(1)).enumerate() {
            let bb = bv[i % xs[1]];
            chunk.iter_mut().for_each(|o| *o += bb);
        }
        let ng = self.ng(&[x, b]);
        self.push(out, Op::AddChannel(x, b), ng)
    }

    /// `x @ w^T + b` over the last axis of `x`; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 2);
        let k = *xs.last().expect("linear on scalar");
        assert_eq!(k, ws[1], "linear: input dim {k} vs weight {ws:?}");
        let n = ws[0];
        let m = numel(&xs) / k.max(1);
        let mut out_shape = xs.clone();
        *out_shape.last_mut().unwrap() = n;
        let mut out = Tensor::zeros(&out_shape);
        if let Some(b) = b {
            assert_eq!(self.shape(b), [n]);
            let bv = self.value(b).data();
            for row in out.data_mut().chunks_mut(n) {
                row.copy_from_slice(bv);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(x).data(),
            k,
            1,
            self.value(w).data(),
            1,
            k,
            beta,
            out.data_mut(),
            n,
            1,
        );
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push(out, Op::Linear { x, w, b }, ng)
    }

    /// Batched matmul on 3-d tensors with optional transposes of either side.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(as_.len() == 3 && bs.len() == 3 && as_[0] == bs[0], "matmul: {as_:?} x {bs:?}");
        let (m, k) = if ta { (as_[2], as_[1]) } else { (as_[1], as_[2]) };
        let (k2, n) = if tb { (bs[2], bs[1]) } else { (bs[1], bs[2]) };
        assert_eq!(k, k2, "matmul inner dims: {as_:?}{ta} x {bs:?}{tb}");
        let batch = as_[0];
        let mut out = Tensor::zeros(&[batch, m, n]);
        let (rsa, csa) = if ta { (1, m) } else { (k, 1) };
        let (rsb, csb) = if tb { (1, k) } else { (n, 1) };
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for (bi, oc) in out.data_mut().chunks_mut((m * n).max(1)).enumerate().take(batch) {
                T::gemm(
                    m,
                    k,
                    n,
                    T::one(),
                    &av[bi * m * k..(bi + 1) * m * k],
                    rsa,
                    csa,
                    &bv[bi * k * n..(bi + 1) * k * n],
                    rsb,
                    csb,
                    T::zero(),
                    oc,
                    n,
                    1,
                );
            }
        }
        let ng = self.ng(&[a, b]);
        self.push(out, Op::MatMul { a, b, ta, tb }, ng)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: (usize, usize)) -> Var {
        let geo = ConvGeom::new(self.shape(x), self.shape(w), stride, pad);
        let hw_out = geo.ho * geo.wo;
        let ckk = geo.ckk();
        let mut out = Tensor::zeros(&[geo.n, geo.cout, geo.ho, geo.wo]);
        let mut cols = vec![T::zero(); if geo.is_pointwise() { 0 } else { ckk * hw_out }];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = b.map(|b| {
                assert_eq!(self.shape(b), [geo.cout]);
                self.value(b).data()
            });
            let in_sz = geo.cin * geo.h * geo.w;
            for (ni, oc) in out.data_mut().chunks_mut(geo.cout * hw_out).enumerate() {
                let xn = &xv[ni * in_sz..(ni + 1) * in_sz];
                let src: &[T] = if geo.is_pointwise() {
                    xn
                } else {
                    geo.im2col(xn, &mut cols);
                    &cols
                };
                if let Some(bv) = bv {
                    for (c, row) in oc.chunks_mut(hw_out).enumerate() {
                        row.iter_mut().for_each(|o| *o = bv[c]);
                    }
                }
                T::gemm(
                    geo.cout,
                    ckk,
                    hw_out,
                    T::one(),
                    wv,
                    ckk,
                    1,
                    src,
                    hw_out,
                    1,
                    if bv.is_some() { T::one() } else { T::zero() },
                    oc,
                    hw_out,
                    1,
                );
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push(out, Op::Conv2d { x, w, b, stride, pad }, ng)
    }

    /// Group normalization over `[N, C, ...]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let (n, c) = (xs[0], xs[1]);
        assert!(groups >= 1 && c % groups == 0, "group_norm: {c} channels, {groups} groups");
        assert_eq!(self.shape(gamma), [c]);
        assert_eq!(self.shape(beta), [c]);
        let spatial = numel(&xs[2..]);
        let cpg = c / groups;
        let gsize = cpg * spatial;
        let eps = T::lit(NORM_EPS);
        let mut out = self.value(x).clone();
        let mut rstd_all = Vec::with_capacity(n * groups);
        let (gv, bv) = (self.value(gamma).data().to_vec(), self.value(beta).data().to_vec());
        for (gi, chunk) in out.data_mut().chunks_mut(gsize).enumerate() {
            let cnt = T::lit(gsize as f64);
            let mean = chunk.iter().copied().sum::<T>() / cnt;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cnt;
            let rstd = T::one() / (var + eps).sqrt();
            rstd_all.push(rstd);
            let g0 = gi % groups;
            for (ci, seg) in chunk.chunks_mut(spatial).enumerate() {
                let ch = g0 * cpg + ci;
                for v in seg.iter_mut() {
                    *v = (*v - mean) * rstd * gv[ch] + bv[ch];
                }
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        self.push(
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                rstd: rstd_all,
            },
            ng,
        )
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let d = *self.shape(x).last().expect("layer_norm on scalar");
        assert_eq!(self.shape(gamma), [d]);
        assert_eq!(self.shape(beta), [d]);
        let eps = T::lit(NORM_EPS);
        let (gv, bv) = (self.value(gamma).data().to_vec(), self.value(beta).data().to_vec());
        let mut out = self.value(x).clone();
        let mut rstd_all = Vec::with_capacity(out.len() / d.max(1));
        let cnt = T::lit(d as f64);
        for row in out.data_mut().chunks_mut(d) {
            let mean = row.iter().copied().sum::<T>() / cnt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cnt;
            let rstd = T::one() / (var + eps).sqrt();
            rstd_all.push(rstd);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rstd * gv[j] + bv[j];
            }
        }
        let ng = self.ng(&[x, gamma, beta]);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                rstd: rstd_all,
            },
            ng,
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|a| a * sigmoid(a));
        let ng = self.ng(&[x]);
        self.push(v, Op::Silu(x), ng)
    }

    /// Softmax over the last axis, max-subtracted per row.
    pub fn softmax(&mut self, x: Var) -> Var {
        let d = *self.shape(x).last().expect("softmax on scalar");
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(d) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::Softmax(x), ng)
    }

    /// Scale each last-axis vector to unit L2 norm, `x / max(|x|, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: T) -> Var {
        let d = *self.shape(x).last().expect("l2_normalize on scalar");
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.len() / d.max(1));
        for row in out.data_mut().chunks_mut(d) {
            let nrm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            norms.push(nrm);
            let den = nrm.max(eps);
            row.iter_mut().for_each(|v| *v = *v / den);
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::L2Normalize { x, eps, norms }, ng)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(perm.len(), xs.len(), "permute rank");
        let (shape, data) = permute_data(self.value(x).data(), &xs, perm);
        let t = Tensor::from_vec(&shape, data).expect("permute size");
        let ng = self.ng(&[x]);
        self.push(
            t,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            ng,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self
            .value(x)
            .clone()
            .reshape(shape)
            .unwrap_or_else(|e| panic!("reshape: {e}"));
        let ng = self.ng(&[x]);
        self.push(t, Op::Reshape(x), ng)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let s0 = self.shape(parts[0]).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.len(), s0.len(), "concat rank");
            for (i, (&a, &b)) in s.iter().zip(&s0).enumerate() {
                assert!(i == axis || a == b, "concat: {s:?} vs {s0:?} on axis {axis}");
            }
            total += s[axis];
        }
        let mut shape = s0.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_at_axis(&s0, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let t = Tensor::from_vec(&shape, data).expect("concat size");
        let ng = self.ng(parts);
        self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            ng,
        )
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert!(start + len <= xs[axis], "slice {start}+{len} beyond {xs:?}[{axis}]");
        let (outer, alen, inner) = split_at_axis(&xs, axis);
        let mut shape = xs.clone();
        shape[axis] = len;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            let base = (o * alen + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let t = Tensor::from_vec(&shape, data).expect("slice size");
        let ng = self.ng(&[x]);
        self.push(t, Op::Slice { x, axis, start }, ng)
    }

    /// Nearest-neighbour 2x upsampling of `[N, C, H, W]`.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let xs = self.shape(x).to_vec();
        assert_eq!(xs.len(), 4);
        let (h, w) = (xs[2], xs[3]);
        let planes = xs[0] * xs[1];
        let mut out = Tensor::zeros(&[xs[0], xs[1], 2 * h, 2 * w]);
        let src = self.value(x).data();
        for (p, dst) in out.data_mut().chunks_mut(4 * h * w).enumerate().take(planes) {
            for i in 0..2 * h {
                for j in 0..2 * w {
                    dst[i * 2 * w + j] = src[p * h * w + (i / 2) * w + j / 2];
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::Upsample2x(x), ng)
    }

    /// Non-overlapping `factor x factor` average pooling of `[N, C, H, W]`.
    pub fn avg_pool(&mut self, x: Var, factor: usize) -> Var {
        let xs = self.shape(x).to_vec();
        assert!(xs.len() == 4 && xs[2].is_multiple_of(factor) && xs[3].is_multiple_of(factor), "avg_pool {xs:?}/{factor}");
        let (h, w) = (xs[2], xs[3]);
        let (ho, wo) = (h / factor, w / factor);
        let inv = T::one() / T::lit((factor * factor) as f64);
        let src = self.value(x).data();
        let mut out = Tensor::zeros(&[xs[0], xs[1], ho, wo]);
        for (p, dst) in out.data_mut().chunks_mut(ho * wo).enumerate() {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for i in 0..h {
                for j in 0..w {
                    dst[(i / factor) * wo + j / factor] += plane[i * w + j] * inv;
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(out, Op::AvgPool { x, factor }, ng)
    }

    pub fn select_row(&mut self, table: Var, row: usize) -> Var {
        let ts = self.shape(table).to_vec();
        assert!(ts.len() == 2 && row < ts[0], "select_row {row} of {ts:?}");
        let e = ts[1];
        let t = Tensor::from_vec(&[e], self.value(table).data()[row * e..(row + 1) * e].to_vec())
            .expect("row size");
        let ng = self.ng(&[table]);
        self.push(t, Op::SelectRow { table, row }, ng)
    }

    /// Mean squared difference, as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mse shape mismatch");
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let n = T::lit(va.len().max(1) as f64);
        let s: T = va.iter().zip(vb).map(|(&x, &y)| (x - y) * (x - y)).sum();
        let ng = self.ng(&[a, b]);
        self.push(Tensor::scalar(s / n), Op::Mse(a, b), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let s = self.value(x).mean();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).len(), 1, "backward root must be scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[root.0].needs_grad {
            return Gradients { grads };
        }
        grads[root.0] = Some(Tensor::full(self.shape(root), T::one()));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let is_leaf = matches!(node.op, Op::Leaf);
            let g = if is_leaf {
                continue;
            } else {
                match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                }
            };
            self.backward_node(i, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Get (creating zeros if needed) the gradient buffer for `v`.
    fn buf<'g>(&self, grads: &'g mut [Option<Tensor<T>>], v: Var) -> &'g mut [T] {
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        slot.as_mut().unwrap().data_mut()
    }

    fn acc_fn(&self, grads: &mut [Option<Tensor<T>>], v: Var, f: impl Fn(usize) -> T) {
        if !self.wants(v) {
            return;
        }
        for (k, b) in self.buf(grads, v).iter_mut().enumerate() {
            *b += f(k);
        }
    }

    fn acc_slice(&self, grads: &mut [Option<Tensor<T>>], v: Var, src: &[T]) {
        if !self.wants(v) {
            return;
        }
        for (b, &s) in self.buf(grads, v).iter_mut().zip(src) {
            *b += s;
        }
    }

    fn backward_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc_slice(grads, *a, gd);
                self.acc_slice(grads, *b, gd);
            }
            Op::Sub(a, b) => {
                self.acc_slice(grads, *a, gd);
                self.acc_fn(grads, *b, |k| -gd[k]);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc_fn(grads, *a, |k| gd[k] * vb[k]);
                self.acc_fn(grads, *b, |k| gd[k] * va[k]);
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc_fn(grads, *a, |k| gd[k] * s);
            }
            Op::AddSuffix(x, b) => {
                self.acc_slice(grads, *x, gd);
                if self.wants(*b) {
                    let blen = self.value(*b).len().max(1);
                    let buf = self.buf(grads, *b);
                    for chunk in gd.chunks(blen) {
                        for (o, &v) in buf.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                }
            }
            Op::AddChannel(x, b) => {
                self.acc_slice(grads, *x, gd);
                if self.wants(*b) {
                    let xs = self.shape(*x);
                    let c = xs[1];
                    let inner = numel(&xs[2..]).max(1);
                    let buf = self.buf(grads, *b);
                    for (k, chunk) in gd.chunks(inner).enumerate() {
                        buf[k % c] += chunk.iter().copied().sum::<T>();
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let k = *xs.last().unwrap();
                let n = self.shape(*w)[0];
                let m = numel(xs) / k.max(1);
                if self.wants(*x) {
                    let wv = self.value(*w).data();
                    let buf = self.buf(grads, *x);
                    T::gemm(m, n, k, T::one(), gd, n, 1, wv, k, 1, T::one(), buf, k, 1);
                }
                if self.wants(*w) {
                    let xv = self.value(*x).data();
                    let buf = self.buf(grads, *w);
                    T::gemm(n, m, k, T::one(), gd, 1, n, xv, k, 1, T::one(), buf, k, 1);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let buf = self.buf(grads, *b);
                        for row in gd.chunks(n) {
                            for (o, &v) in buf.iter_mut().zip(row) {
                                *o += v;
                            }
                        }
                    }
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let (as_, bs) = (self.shape(*a), self.shape(*b));
                let batch = as_[0];
                let (m, k) = if *ta { (as_[2], as_[1]) } else { (as_[1], as_[2]) };
                let n = if *tb { bs[1] } else { bs[2] };
                let (rsa, csa) = if *ta { (1, m) } else { (k, 1) };
                let (rsb, csb) = if *tb { (1, k) } else { (n, 1) };
                if self.wants(*a) {
                    let bv = self.value(*b).data();
                    let buf = self.buf(grads, *a);
                    for bi in 0..batch {
                        // dA = dC @ B^T, written through A's storage strides
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &gd[bi * m * n..(bi + 1) * m * n],
                            n,
                            1,
                            &bv[bi * k * n..(bi + 1) * k * n],
                            csb,
                            rsb,
                            T::one(),
                            &mut buf[bi * m * k..(bi + 1) * m * k],
                            rsa,
                            csa,
                        );
                    }
                }
                if self.wants(*b) {
                    let av = self.value(*a).data();
                    let buf = self.buf(grads, *b);
                    for bi in 0..batch {
                        // dB = A^T @ dC
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            &av[bi * m * k..(bi + 1) * m * k],
                            csa,
                            rsa,
                            &gd[bi * m * n..(bi + 1) * m * n],
                            n,
                            1,
                            T::one(),
                            &mut buf[bi * k * n..(bi + 1) * k * n],
                            rsb,
                            csb,
                        );
                    }
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let geo = ConvGeom::new(self.shape(*x), self.shape(*w), *stride, *pad);
                let hw_out = geo.ho * geo.wo;
                let ckk = geo.ckk();
                let in_sz = geo.cin * geo.h * geo.w;
                let out_sz = geo.cout * hw_out;
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let want_x = self.wants(*x);
                let want_w = self.wants(*w);
                let mut cols = vec![T::zero(); if geo.is_pointwise() { 0 } else { ckk * hw_out }];
                let mut dcols = vec![T::zero(); if geo.is_pointwise() || !want_x { 0 } else { ckk * hw_out }];
                if want_w {
                    // accumulate weight gradient first (needs cols of every sample)
                    let mut dw = vec![T::zero(); wv.len()];
                    for ni in 0..geo.n {
                        let xn = &xv[ni * in_sz..(ni + 1) * in_sz];
                        let src: &[T] = if geo.is_pointwise() {
                            xn
                        } else {
                            geo.im2col(xn, &mut cols);
                            &cols
                        };
                        let gn = &gd[ni * out_sz..(ni + 1) * out_sz];
                        T::gemm(geo.cout, hw_out, ckk, T::one(), gn, hw_out, 1, src, 1, hw_out, T::one(), &mut dw, ckk, 1);
                    }
                    self.acc_slice(grads, *w, &dw);
                }
                if want_x {
                    let buf = self.buf(grads, *x);
                    for ni in 0..geo.n {
                        let gn = &gd[ni * out_sz..(ni + 1) * out_sz];
                        let dxn = &mut buf[ni * in_sz..(ni + 1) * in_sz];
                        if geo.is_pointwise() {
                            T::gemm(ckk, geo.cout, hw_out, T::one(), wv, 1, ckk, gn, hw_out, 1, T::one(), dxn, hw_out, 1);
                        } else {
                            T::gemm(ckk, geo.cout, hw_out, T::one(), wv, 1, ckk, gn, hw_out, 1, T::zero(), &mut dcols, hw_out, 1);
                            geo.col2im(&dcols, dxn);
                        }
                    }
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let buf = self.buf(grads, *b);
                        for (k, chunk) in gd.chunks(hw_out).enumerate() {
                            buf[k % geo.cout] += chunk.iter().copied().sum::<T>();
                        }
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                rstd,
            } => {
                let xs = self.shape(*x);
                let c = xs[1];
                let spatial = numel(&xs[2..]);
                let cpg = c / groups;
                let gsize = cpg * spatial;
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); if self.wants(*x) { xv.len() } else { 0 }];
                let cnt = T::lit(gsize as f64);
                for (gi, &rs) in rstd.iter().enumerate() {
                    let base = gi * gsize;
                    let xg = &xv[base..base + gsize];
                    let gg = &gd[base..base + gsize];
                    let mean = xg.iter().copied().sum::<T>() / cnt;
                    let g0 = gi % groups;
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for k in 0..gsize {
                        let ch = g0 * cpg + k / spatial;
                        let xh = (xg[k] - mean) * rs;
                        dgamma[ch] += gg[k] * xh;
                        dbeta[ch] += gg[k];
                        let dxh = gg[k] * gv[ch];
                        s1 += dxh;
                        s2 += dxh * xh;
                    }
                    if !dx.is_empty() {
                        for k in 0..gsize {
                            let ch = g0 * cpg + k / spatial;
                            let xh = (xg[k] - mean) * rs;
                            let dxh = gg[k] * gv[ch];
                            dx[base + k] = rs * (dxh - s1 / cnt - xh * s2 / cnt);
                        }
                    }
                }
                self.acc_slice(grads, *gamma, &dgamma);
                self.acc_slice(grads, *beta, &dbeta);
                if !dx.is_empty() {
                    self.acc_slice(grads, *x, &dx);
                }
            }
            Op::LayerNorm { x, gamma, beta, rstd } => {
                let d = *self.shape(*x).last().unwrap();
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let want_x = self.wants(*x);
                let mut dx = vec![T::zero(); if want_x { xv.len() } else { 0 }];
                let cnt = T::lit(d as f64);
                for (r, &rs) in rstd.iter().enumerate() {
                    let xr = &xv[r * d..(r + 1) * d];
                    let gr = &gd[r * d..(r + 1) * d];
                    let mean = xr.iter().copied().sum::<T>() / cnt;
                    let mut s1 = T::zero();
                    let mut s2 = T::zero();
                    for j in 0..d {
                        let xh = (xr[j] - mean) * rs;
                        dgamma[j] += gr[j] * xh;
                        dbeta[j] += gr[j];
                        let dxh = gr[j] * gv[j];
                        s1 += dxh;
                        s2 += dxh * xh;
                    }
                    if want_x {
                        for j in 0..d {
                            let xh = (xr[j] - mean) * rs;
                            dx[r * d + j] = rs * (gr[j] * gv[j] - s1 / cnt - xh * s2 / cnt);
                        }
                    }
                }
                self.acc_slice(grads, *gamma, &dgamma);
                self.acc_slice(grads, *beta, &dbeta);
                if want_x {
                    self.acc_slice(grads, *x, &dx);
                }
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                self.acc_fn(grads, *x, |k| {
                    let s = sigmoid(xv[k]);
                    gd[k] * s * (T::one() + xv[k] * (T::one() - s))
                });
            }
            Op::Softmax(x) => {
                if self.wants(*x) {
                    let y = self.nodes[i].value.data();
                    let d = *self.shape(*x).last().unwrap();
                    let buf = self.buf(grads, *x);
                    for ((yr, gr), br) in y.chunks(d).zip(gd.chunks(d)).zip(buf.chunks_mut(d)) {
                        let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            br[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::L2Normalize { x, eps, norms } => {
                if self.wants(*x) {
                    let y = self.nodes[i].value.data();
                    let d = *self.shape(*x).last().unwrap();
                    let eps = *eps;
                    let buf = self.buf(grads, *x);
                    for (r, &nrm) in norms.iter().enumerate() {
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &gd[r * d..(r + 1) * d];
                        let br = &mut buf[r * d..(r + 1) * d];
                        if nrm > eps {
                            let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                            for j in 0..d {
                                br[j] += (gr[j] - yr[j] * dot) / nrm;
                            }
                        } else {
                            for j in 0..d {
                                br[j] += gr[j] / eps;
                            }
                        }
                    }
                }
            }
            Op::Permute { x, perm } => {
                if self.wants(*x) {
                    let inv = invert_perm(perm);
                    let (_, back) = permute_data(gd, g.shape(), &inv);
                    self.acc_slice(grads, *x, &back);
                }
            }
            Op::Reshape(x) => self.acc_slice(grads, *x, gd),
            Op::Concat { parts, axis } => {
                let out_shape = g.shape();
                let (outer, total, inner) = split_at_axis(out_shape, *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if self.wants(p) {
                        let buf = self.buf(grads, p);
                        for o in 0..outer {
                            let src = &gd[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            for (b, &s) in buf[o * len * inner..(o + 1) * len * inner].iter_mut().zip(src) {
                                *b += s;
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                if self.wants(*x) {
                    let xs = self.shape(*x);
                    let (outer, alen, inner) = split_at_axis(xs, *axis);
                    let len = g.shape()[*axis];
                    let buf = self.buf(grads, *x);
                    for o in 0..outer {
                        let base = (o * alen + start) * inner;
                        let src = &gd[o * len * inner..(o + 1) * len * inner];
                        for (b, &s) in buf[base..base + len * inner].iter_mut().zip(src) {
                            *b += s;
                        }
                    }
                }
            }
            Op::Upsample2x(x) => {
                if self.wants(*x) {
                    let xs = self.shape(*x);
                    let (h, w) = (xs[2], xs[3]);
                    let buf = self.buf(grads, *x);
                    for (p, src) in gd.chunks(4 * h * w).enumerate() {
                        for ii in 0..2 * h {
                            for jj in 0..2 * w {
                                buf[p * h * w + (ii / 2) * w + jj / 2] += src[ii * 2 * w + jj];
                            }
                        }
                    }
                }
            }
            Op::AvgPool { x, factor } => {
                if self.wants(*x) {
                    let xs = self.shape(*x);
                    let (h, w) = (xs[2], xs[3]);
                    let wo = w / factor;
                    let ho = h / factor;
                    let inv = T::one() / T::lit((factor * factor) as f64);
                    let buf = self.buf(grads, *x);
                    for (p, src) in gd.chunks(ho * wo).enumerate() {
                        for ii in 0..h {
                            for jj in 0..w {
                                buf[p * h * w + ii * w + jj] += src[(ii / factor) * wo + jj / factor] * inv;
                            }
                        }
                    }
                }
            }
            Op::SelectRow { table, row } => {
                if self.wants(*table) {
                    let e = self.shape(*table)[1];
                    let buf = self.buf(grads, *table);
                    for (b, &s) in buf[row * e..(row + 1) * e].iter_mut().zip(gd) {
                        *b += s;
                    }
                }
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let coef = gd[0] * T::lit(2.0) / T::lit(va.len().max(1) as f64);
                self.acc_fn(grads, *a, |k| coef * (va[k] - vb[k]));
                self.acc_fn(grads, *b, |k| coef * (vb[k] - va[k]));
            }
            Op::Sum(x) => {
                let s = gd[0];
                self.acc_fn(grads, *x, |_| s);
            }
            Op::Mean(x) => {
                let s = gd[0] / T::lit(self.value(*x).len().max(1) as f64);
                self.acc_fn(grads, *x, |_| s);
            }
        }
    }
}
