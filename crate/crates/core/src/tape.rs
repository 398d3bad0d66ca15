//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every forward operation as a node holding its value and
//! operand handles. Nodes are appended after their operands, so the node list
//! is already in topological order and [`Tape::backward`] is a single reverse
//! sweep that visits each node once. Adjoints accumulate additively, which is
//! what makes fan-out (`x + x`) differentiate to `2`.
//!
//! Parameters live outside the tape in a [`Params`] store. [`Tape::param`]
//! copies a parameter into the tape as a leaf; [`Tape::backward`] returns the
//! per-leaf gradients, and [`Params::accumulate`] folds them back in.
//!
//! Convolutions follow the cross-correlation convention (kernel not flipped).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::param::{ParamId, Params};
use crate::scalar::{gemm, MatRef, Scalar};
use crate::tensor::{numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Stride and zero padding of a 2D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    /// Stride 1 with "same" padding for an odd kernel.
    pub fn same(kernel: usize) -> Self {
        Self { stride: 1, pad: kernel / 2 }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn im2col<S: Scalar>(&self, x: &[S]) -> Vec<S> {
        let npix = self.ho * self.wo;
        let mut cols = vec![S::zero(); self.col_rows() * npix];
        for c in 0..self.c_in {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let dst = &mut cols[row * npix..(row + 1) * npix];
                    for oi in 0..self.ho {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        let src = &x[(c * self.h + ii as usize) * self.w..][..self.w];
                        for oj in 0..self.wo {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            if jj >= 0 && jj < self.w as isize {
                                dst[oi * self.wo + oj] = src[jj as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im_add<S: Scalar>(&self, cols: &[S], dx: &mut [S]) {
        let npix = self.ho * self.wo;
        for c in 0..self.c_in {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let src = &cols[row * npix..(row + 1) * npix];
                    for oi in 0..self.ho {
                        let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        let base = (c * self.h + ii as usize) * self.w;
                        for oj in 0..self.wo {
                            let jj = (oj * self.stride + kj) as isize - self.pad as isize;
                            if jj >= 0 && jj < self.w as isize {
                                dx[base + jj as usize] = dx[base + jj as usize] + src[oi * self.wo + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

enum Op<S> {
    Leaf(Option<ParamId>),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    ScaleBy(Var, Var),
    AddBias { x: Var, b: Var, inner: usize },
    Relu(Var),
    Map { x: Var, df: fn(S) -> S },
    Softmax { x: Var, len: usize, inner: usize },
    Transpose { x: Var, rows: usize, cols: usize },
    Reshape(Var),
    Concat { parts: Vec<(Var, usize)>, outer: usize, inner: usize },
    Slice { x: Var, outer: usize, len_in: usize, start: usize, inner: usize },
    Conv2d { x: Var, w: Var, g: ConvGeom },
    AvgPool { x: Var, c: usize, h: usize, w: usize, k: usize },
    Upsample { x: Var, c: usize, h: usize, w: usize, k: usize },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    GlobalAvgPool { x: Var, hw: usize },
    BatchedAffine(Var, Var),
}

struct Node<S> {
    shape: Vec<usize>,
    value: Vec<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Recorded computation graph for one forward pass.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    checked: bool,
}

impl<S: Scalar> Default for Tape<S> {
    /// Checked mode follows `debug_assertions`: on in tests, off in release training.
    fn default() -> Self {
        Self::with_checks(cfg!(debug_assertions))
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Creates a tape; with `checked` set, every op fails on NaN/Inf output.
    pub fn with_checks(checked: bool) -> Self {
        Self { nodes: Vec::new(), checked }
    }

    pub fn is_checked(&self) -> bool {
        self.checked
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> S {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor<S> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape invariant")
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, value: Vec<S>, op: Op<S>) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len(), "{op_name}");
        if self.checked && !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let needs_grad = match &op {
            Op::Leaf(_) => false,
            op => operands(op).iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node { shape, value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, t: Tensor<S>, param: Option<ParamId>, needs_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.nodes.push(Node { shape, value: t.into_data(), op: Op::Leaf(param), needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.leaf(t, None, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor<S>) -> Var {
        self.leaf(t, None, true)
    }

    /// Copies a parameter onto the tape as a trainable leaf.
    pub fn param(&mut self, params: &Params<S>, id: ParamId) -> Var {
        let p = params.get(id);
        let t = Tensor::new(p.shape(), p.data().to_vec()).expect("param shape");
        self.leaf(t, Some(id), true)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, op: Op<S>, f: impl Fn(S, S) -> S) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        self.push(name, shape, value, op)
    }

    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return shape_err("matmul", format!("{:?} x {:?}", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![S::zero(); m * n];
        gemm(MatRef::new(self.value(a), m, k), MatRef::new(self.value(b), k, n), &mut out, false);
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Multiplies by a fixed scalar (layer scale).
    pub fn scale(&mut self, x: Var, c: S) -> Result<Var> {
        let value = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale", shape, value, Op::Scale(x, c))
    }

    /// Multiplies every element of `x` by the single element of `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return shape_err("scale_by", format!("scale must hold one element, got {:?}", self.shape(s)));
        }
        let c = self.value(s)[0];
        let value = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        self.push("scale_by", shape, value, Op::ScaleBy(x, s))
    }

    /// Adds a 1-D bias broadcast along `axis` of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x);
        if axis >= sx.len() || self.shape(b) != [sx[axis]] {
            return shape_err("add_bias", format!("x {:?}, bias {:?}, axis {}", sx, self.shape(b), axis));
        }
        let inner: usize = sx[axis + 1..].iter().product();
        let nb = sx[axis];
        let bv = self.value(b);
        let value = self.value(x).iter().enumerate().map(|(i, &v)| v + bv[(i / inner) % nb]).collect();
        let shape = sx.to_vec();
        self.push("add_bias", shape, value, Op::AddBias { x, b, inner })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).iter().map(|&v| if v > S::zero() { v } else { S::zero() }).collect();
        let shape = self.shape(x).to_vec();
        self.push("relu", shape, value, Op::Relu(x))
    }

    /// Elementwise function `f` with derivative `df`, both evaluated on the input.
    pub fn map(&mut self, x: Var, f: fn(S) -> S, df: fn(S) -> S) -> Result<Var> {
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push("map", shape, value, Op::Map { x, df })
    }

    /// Softmax along `axis`, computed with the row maximum subtracted.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x);
        if axis >= sx.len() || sx[axis] == 0 {
            return shape_err("softmax", format!("axis {} of {:?}", axis, sx));
        }
        let len = sx[axis];
        let inner: usize = sx[axis + 1..].iter().product();
        let outer: usize = sx[..axis].iter().product();
        let xv = self.value(x);
        let mut out = vec![S::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut mx = S::neg_infinity();
                for j in 0..len {
                    mx = mx.max(xv[at(j)]);
                }
                let mut z = S::zero();
                for j in 0..len {
                    let e = (xv[at(j)] - mx).exp();
                    out[at(j)] = e;
                    z = z + e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / z;
                }
            }
        }
        let shape = sx.to_vec();
        self.push("softmax", shape, out, Op::Softmax { x, len, inner })
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 2 {
            return shape_err("transpose", format!("expected 2-D, got {:?}", sx));
        }
        let (rows, cols) = (sx[0], sx[1]);
        let out = transpose_buf(self.value(x), rows, cols);
        self.push("transpose", vec![cols, rows], out, Op::Transpose { x, rows, cols })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return shape_err("reshape", format!("{:?} -> {:?}", self.shape(x), shape));
        }
        let value = self.value(x).to_vec();
        self.push("reshape", shape.to_vec(), value, Op::Reshape(x))
    }

    /// Concatenates tensors along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Empty("concat"));
        };
        let s0 = self.shape(first).to_vec();
        if axis >= s0.len() {
            return shape_err("concat", format!("axis {} of {:?}", axis, s0));
        }
        let outer: usize = s0[..axis].iter().product();
        let inner: usize = s0[axis + 1..].iter().product();
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != s0.len() || sp[..axis] != s0[..axis] || sp[axis + 1..] != s0[axis + 1..] {
                return shape_err("concat", format!("{:?} vs {:?} on axis {}", s0, sp, axis));
            }
            lens.push((p, sp[axis]));
        }
        let total: usize = lens.iter().map(|&(_, l)| l).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &(p, l) in &lens {
                out.extend_from_slice(&self.value(p)[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        self.push("concat", shape, out, Op::Concat { parts: lens, outer, inner })
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || start + len > sx[axis] {
            return shape_err("slice", format!("[{}..{}) on axis {} of {:?}", start, start + len, axis, sx));
        }
        let outer: usize = sx[..axis].iter().product();
        let inner: usize = sx[axis + 1..].iter().product();
        let len_in = sx[axis];
        let xv = self.value(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * len_in + start) * inner;
            out.extend_from_slice(&xv[base..base + len * inner]);
        }
        let mut shape = sx;
        shape[axis] = len;
        self.push("slice", shape, out, Op::Slice { x, outer, len_in, start, inner })
    }

    /// 2-D cross-correlation of `x: [C_in, H, W]` with `w: [C_out, C_in, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, spec: ConvSpec) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 3 || sw.len() != 4 || sw[1] != sx[0] || sw[2] != sw[3] || spec.stride == 0 {
            return shape_err("conv2d", format!("input {:?}, kernel {:?}", sx, sw));
        }
        let (c_in, h, wd, c_out, k) = (sx[0], sx[1], sx[2], sw[0], sw[2]);
        if h + 2 * spec.pad < k || wd + 2 * spec.pad < k {
            return shape_err("conv2d", format!("kernel {} larger than padded input {:?}", k, sx));
        }
        let ho = (h + 2 * spec.pad - k) / spec.stride + 1;
        let wo = (wd + 2 * spec.pad - k) / spec.stride + 1;
        let g = ConvGeom { c_in, h, w: wd, c_out, k, stride: spec.stride, pad: spec.pad, ho, wo };
        let mut out = vec![S::zero(); c_out * ho * wo];
        let wm = MatRef::new(self.value(w), c_out, g.col_rows());
        if g.is_pointwise() {
            gemm(wm, MatRef::new(self.value(x), c_in, ho * wo), &mut out, false);
        } else {
            let cols = g.im2col(self.value(x));
            gemm(wm, MatRef::new(&cols, g.col_rows(), ho * wo), &mut out, false);
        }
        self.push("conv2d", vec![c_out, ho, wo], out, Op::Conv2d { x, w, g })
    }

    /// Non-overlapping `k x k` average pooling of `[C, H, W]`.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 3 || k == 0 || !sx[1].is_multiple_of(k) || !sx[2].is_multiple_of(k) {
            return shape_err("avg_pool", format!("{:?} by {}", sx, k));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let (ho, wo) = (h / k, w / k);
        let norm = S::from_f64(1.0 / (k * k) as f64);
        let xv = self.value(x);
        let mut out = vec![S::zero(); c * ho * wo];
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let o = (ch * ho + i / k) * wo + j / k;
                    out[o] = out[o] + xv[(ch * h + i) * w + j];
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v * norm);
        self.push("avg_pool", vec![c, ho, wo], out, Op::AvgPool { x, c, h, w, k })
    }

    /// Nearest-neighbour upsampling of `[C, H, W]` by an integer factor.
    pub fn upsample(&mut self, x: Var, k: usize) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 3 || k == 0 {
            return shape_err("upsample", format!("{:?} by {}", sx, k));
        }
        let (c, h, w) = (sx[0], sx[1], sx[2]);
        let (ho, wo) = (h * k, w * k);
        let xv = self.value(x);
        let mut out = vec![S::zero(); c * ho * wo];
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    out[(ch * ho + i) * wo + j] = xv[(ch * h + i / k) * w + j / k];
                }
            }
        }
        self.push("upsample", vec![c, ho, wo], out, Op::Upsample { x, c, h, w, k })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum();
        self.push("sum", Vec::new(), vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::Empty("mean"));
        }
        let s: S = self.value(x).iter().copied().sum();
        self.push("mean", Vec::new(), vec![s / S::from_f64(n as f64)], Op::Mean(x))
    }

    /// Mean of squared differences.
    pub fn mse_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse_loss", a, b)?;
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::Empty("mse_loss"));
        }
        let s: S = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| (x - y) * (x - y)).sum();
        self.push("mse_loss", Vec::new(), vec![s / S::from_f64(n as f64)], Op::Mse(a, b))
    }

    /// Spatial mean of `[C, H, W]`, giving `[C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x);
        if sx.len() != 3 || sx[1] * sx[2] == 0 {
            return shape_err("global_avg_pool", format!("{:?}", sx));
        }
        let (c, hw) = (sx[0], sx[1] * sx[2]);
        let norm = S::from_f64(1.0 / hw as f64);
        let out = self.value(x).chunks(hw).map(|ch| ch.iter().copied().sum::<S>() * norm).collect();
        self.push("global_avg_pool", vec![c], out, Op::GlobalAvgPool { x, hw })
    }

    /// Applies one 3x4 affine map per row: `out[n] = M[n] * [p[n]; 1]` with
    /// `m: [N, 12]` (row-major 3x4) and `p: [N, 3]`.
    pub fn batched_affine(&mut self, m: Var, p: Var) -> Result<Var> {
        let (sm, sp) = (self.shape(m), self.shape(p));
        if sm.len() != 2 || sp.len() != 2 || sm[1] != 12 || sp[1] != 3 || sm[0] != sp[0] {
            return shape_err("batched_affine", format!("maps {:?}, points {:?}", sm, sp));
        }
        let n = sp[0];
        let (mv, pv) = (self.value(m), self.value(p));
        let mut out = vec![S::zero(); n * 3];
        for r in 0..n {
            let a = &mv[r * 12..r * 12 + 12];
            let x = &pv[r * 3..r * 3 + 3];
            for i in 0..3 {
                out[r * 3 + i] = a[4 * i] * x[0] + a[4 * i + 1] * x[1] + a[4 * i + 2] * x[2] + a[4 * i + 3];
            }
        }
        self.push("batched_affine", vec![n, 3], out, Op::BatchedAffine(m, p))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::NonScalarLoss(root.shape.clone()));
        }
        let mut adj: Vec<Option<Vec<S>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![S::one()]);
        let mut grads = Gradients { leaves: Vec::new(), params: Vec::new() };

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf(param) = node.op {
                if let Some(id) = param {
                    grads.params.push((id, g.clone()));
                }
                grads.leaves.push((i, g));
                continue;
            }
            self.propagate(node, &g, &mut adj);
        }
        grads.leaves.reverse();
        grads.params.reverse();
        Ok(grads)
    }

    fn propagate(&self, node: &Node<S>, g: &[S], adj: &mut [Option<Vec<S>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [S])| {
            let n = &self.nodes[v.0];
            if !n.needs_grad {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![S::zero(); n.value.len()]);
            f(slot);
        };
        let add_into = |d: &mut [S], src: &[S]| d.iter_mut().zip(src).for_each(|(d, s)| *d = *d + *s);

        match &node.op {
            Op::Leaf(_) => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |d| gemm(MatRef::new(g, m, n), MatRef::new(bv, k, n).t(), d, true));
                acc(*b, &mut |d| gemm(MatRef::new(av, m, k).t(), MatRef::new(g, m, n), d, true));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, s)| *d = *d - *s));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, &mut |d| d.iter_mut().zip(g).zip(bv).for_each(|((d, g), y)| *d = *d + *g * *y));
                acc(*b, &mut |d| d.iter_mut().zip(g).zip(av).for_each(|((d, g), x)| *d = *d + *g * *x));
            }
            Op::Scale(x, c) => {
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d = *d + *g * *c));
            }
            Op::ScaleBy(x, s) => {
                let c = self.value(*s)[0];
                let xv = self.value(*x);
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d = *d + *g * c));
                acc(*s, &mut |d| d[0] = d[0] + g.iter().zip(xv).map(|(g, x)| *g * *x).sum());
            }
            Op::AddBias { x, b, inner } => {
                acc(*x, &mut |d| add_into(d, g));
                acc(*b, &mut |d| {
                    let nb = d.len();
                    for (i, gv) in g.iter().enumerate() {
                        let j = (i / inner) % nb;
                        d[j] = d[j] + *gv;
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                acc(*x, &mut |d| {
                    for ((d, g), x) in d.iter_mut().zip(g).zip(xv) {
                        if *x > S::zero() {
                            *d = *d + *g;
                        }
                    }
                });
            }
            Op::Map { x, df } => {
                let xv = self.value(*x);
                acc(*x, &mut |d| d.iter_mut().zip(g).zip(xv).for_each(|((d, g), x)| *d = *d + *g * df(*x)));
            }
            Op::Softmax { x, len, inner } => {
                let y = &node.value;
                let (len, inner) = (*len, *inner);
                let outer = y.len() / (len * inner);
                acc(*x, &mut |d| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: S = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                d[at(j)] = d[at(j)] + y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Transpose { x, rows, cols } => {
                let gt = transpose_buf(g, *cols, *rows);
                acc(*x, &mut |d| add_into(d, &gt));
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Concat { parts, outer, inner } => {
                let total: usize = parts.iter().map(|&(_, l)| l).sum();
                let mut offset = 0;
                for &(p, l) in parts {
                    acc(p, &mut |d| {
                        for o in 0..*outer {
                            let src = &g[(o * total + offset) * inner..][..l * inner];
                            add_into(&mut d[o * l * inner..(o + 1) * l * inner], src);
                        }
                    });
                    offset += l;
                }
            }
            Op::Slice { x, outer, len_in, start, inner } => {
                let len = g.len() / (outer * inner);
                acc(*x, &mut |d| {
                    for o in 0..*outer {
                        let base = (o * len_in + start) * inner;
                        add_into(&mut d[base..base + len * inner], &g[o * len * inner..(o + 1) * len * inner]);
                    }
                });
            }
            Op::Conv2d { x, w, g: geom } => {
                let npix = geom.ho * geom.wo;
                let gm = MatRef::new(g, geom.c_out, npix);
                let wv = self.value(*w);
                let xv = self.value(*x);
                if geom.is_pointwise() {
                    acc(*w, &mut |d| gemm(gm, MatRef::new(xv, geom.c_in, npix).t(), d, true));
                    acc(*x, &mut |d| gemm(MatRef::new(wv, geom.c_out, geom.c_in).t(), gm, d, true));
                } else {
                    if self.nodes[w.0].needs_grad {
                        let cols = geom.im2col(xv);
                        acc(*w, &mut |d| gemm(gm, MatRef::new(&cols, geom.col_rows(), npix).t(), d, true));
                    }
                    if self.nodes[x.0].needs_grad {
                        let mut dcols = vec![S::zero(); geom.col_rows() * npix];
                        gemm(MatRef::new(wv, geom.c_out, geom.col_rows()).t(), gm, &mut dcols, false);
                        acc(*x, &mut |d| geom.col2im_add(&dcols, d));
                    }
                }
            }
            Op::AvgPool { x, c, h, w, k } => {
                let (ho, wo) = (h / k, w / k);
                let norm = S::from_f64(1.0 / (k * k) as f64);
                acc(*x, &mut |d| {
                    for ch in 0..*c {
                        for i in 0..*h {
                            for j in 0..*w {
                                let idx = (ch * h + i) * w + j;
                                d[idx] = d[idx] + g[(ch * ho + i / k) * wo + j / k] * norm;
                            }
                        }
                    }
                });
            }
            Op::Upsample { x, c, h, w, k } => {
                let (ho, wo) = (h * k, w * k);
                acc(*x, &mut |d| {
                    for ch in 0..*c {
                        for i in 0..ho {
                            for j in 0..wo {
                                let idx = (ch * h + i / k) * w + j / k;
                                d[idx] = d[idx] + g[(ch * ho + i) * wo + j];
                            }
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d = *d + g[0])),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let s = g[0] / S::from_f64(n as f64);
                acc(*x, &mut |d| d.iter_mut().for_each(|d| *d = *d + s));
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let c = g[0] * S::from_f64(2.0 / av.len() as f64);
                acc(*a, &mut |d| {
                    d.iter_mut().zip(av.iter().zip(bv)).for_each(|(d, (x, y))| *d = *d + c * (*x - *y))
                });
                acc(*b, &mut |d| {
                    d.iter_mut().zip(av.iter().zip(bv)).for_each(|(d, (x, y))| *d = *d - c * (*x - *y))
                });
            }
            Op::GlobalAvgPool { x, hw } => {
                let norm = S::from_f64(1.0 / *hw as f64);
                acc(*x, &mut |d| {
                    for (i, dv) in d.iter_mut().enumerate() {
                        *dv = *dv + g[i / hw] * norm;
                    }
                });
            }
            Op::BatchedAffine(m, p) => {
                let (mv, pv) = (self.value(*m), self.value(*p));
                let n = pv.len() / 3;
                acc(*m, &mut |d| {
                    for r in 0..n {
                        for i in 0..3 {
                            let gi = g[r * 3 + i];
                            for c in 0..3 {
                                d[r * 12 + 4 * i + c] = d[r * 12 + 4 * i + c] + gi * pv[r * 3 + c];
                            }
                            d[r * 12 + 4 * i + 3] = d[r * 12 + 4 * i + 3] + gi;
                        }
                    }
                });
                acc(*p, &mut |d| {
                    for r in 0..n {
                        for c in 0..3 {
                            let s: S = (0..3).map(|i| g[r * 3 + i] * mv[r * 12 + 4 * i + c]).sum();
                            d[r * 3 + c] = d[r * 3 + c] + s;
                        }
                    }
                });
            }
        }
    }
}

fn operands<S>(op: &Op<S>) -> Vec<Var> {
    match op {
        Op::Leaf(_) => Vec::new(),
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Mse(a, b) => vec![*a, *b],
        Op::ScaleBy(x, s) => vec![*x, *s],
        Op::BatchedAffine(m, p) => vec![*m, *p],
        Op::AddBias { x, b, .. } => vec![*x, *b],
        Op::Conv2d { x, w, .. } => vec![*x, *w],
        Op::Concat { parts, .. } => parts.iter().map(|&(v, _)| v).collect(),
        Op::Scale(x, _)
        | Op::Relu(x)
        | Op::Map { x, .. }
        | Op::Softmax { x, .. }
        | Op::Transpose { x, .. }
        | Op::Reshape(x)
        | Op::Slice { x, .. }
        | Op::AvgPool { x, .. }
        | Op::Upsample { x, .. }
        | Op::Sum(x)
        | Op::Mean(x)
        | Op::GlobalAvgPool { x, .. } => vec![*x],
    }
}

pub(crate) fn transpose_buf<S: Copy>(x: &[S], rows: usize, cols: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(x.len());
    for j in 0..cols {
        for i in 0..rows {
            out.push(x[i * cols + j]);
        }
    }
    out
}

/// Gradients produced by one [`Tape::backward`] call.
#[derive(Clone, Debug)]
pub struct Gradients<S> {
    leaves: Vec<(usize, Vec<S>)>,
    params: Vec<(ParamId, Vec<S>)>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient with respect to an input or parameter leaf; `None` when the
    /// leaf did not influence the loss.
    pub fn wrt(&self, v: Var) -> Option<&[S]> {
        self.leaves.iter().find(|(i, _)| *i == v.0).map(|(_, g)| g.as_slice())
    }

    /// Per-leaf parameter gradients in tape order (a parameter copied onto the
    /// tape twice appears twice).
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[S])> {
        self.params.iter().map(|(id, g)| (*id, g.as_slice()))
    }

    /// Total gradient for one parameter, summed over all its tape copies.
    pub fn param(&self, id: ParamId) -> Option<Vec<S>> {
        let mut out: Option<Vec<S>> = None;
        for (_, g) in self.params.iter().filter(|(p, _)| *p == id) {
            match out.as_mut() {
                Some(o) => o.iter_mut().zip(g).for_each(|(o, g)| *o = *o + *g),
                None => out = Some(g.clone()),
            }
        }
        out
    }
}
