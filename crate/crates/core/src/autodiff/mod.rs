//! Reverse-mode automatic differentiation on a flat index-based tape.
//!
//! Every operation appends a node holding its output buffer and enough
//! metadata to run the backward rule. Nodes are identified by [`TensorId`]
//! handles; parents always precede children, so a single reverse sweep
//! propagates gradients. Gradients accumulate with `+=` across fan-out.
//!
//! The tape is generic over [`Scalar`]: `f64` for verification (finite
//! difference checks) and `f32` for training.

mod gradcheck;
mod optim;

pub use gradcheck::{check_gradients, GradCheck};
pub use optim::{
    load_checkpoint, lr_schedule, save_checkpoint, AdamParams, AdamState, Mounts, ParamId,
    ParamStore,
};

use crate::threads::par_rows;
use crate::{Error, Result};
use std::sync::Arc;

/// Element type of tape tensors.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + std::fmt::Debug
    + std::iter::Sum
    + Send
    + Sync
    + 'static
{
    const BYTES: usize;
    fn to_f64(self) -> f64;
    fn from_f32v(v: f32) -> Self;
    fn to_f32v(self) -> f32;
}

impl Scalar for f32 {
    const BYTES: usize = 4;
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn from_f32v(v: f32) -> Self {
        v
    }
    fn to_f32v(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;
    fn to_f64(self) -> f64 {
        self
    }
    fn from_f32v(v: f32) -> Self {
        v as f64
    }
    fn to_f32v(self) -> f32 {
        self as f32
    }
}

/// Converts an `f64` literal into the tape element type.
pub(crate) fn fl<E: Scalar>(x: f64) -> E {
    E::from_f64(x).expect("finite literal")
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct TensorId(pub(crate) usize);

/// Padding behavior for [`Tape::conv2d`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PadMode {
    /// Out-of-bounds taps contribute zero.
    Zero,
    /// Out-of-bounds taps clamp to the nearest edge pixel.
    Replicate,
}

/// Sparse row mixing plan: output row `r` is the weighted sum of input rows
/// `idx[starts[r]..starts[r+1]]` with weights `w`. Rows with an empty range
/// are zero. Used for barycentric/bilinear resampling with fixed
/// correspondences.
#[derive(Clone, Debug)]
pub struct RowPlan<E: Scalar> {
    pub starts: Vec<u32>,
    pub idx: Vec<u32>,
    pub w: Vec<E>,
    pub in_rows: usize,
}

impl<E: Scalar> RowPlan<E> {
    /// Builds a plan from per-output-row anchor lists `(input_row, weight)`.
    pub fn from_anchors(anchors: &[Vec<(usize, f64)>], in_rows: usize) -> Self {
        let mut starts = Vec::with_capacity(anchors.len() + 1);
        let mut idx = Vec::new();
        let mut w = Vec::new();
        starts.push(0u32);
        for row in anchors {
            for &(j, wj) in row {
                assert!(j < in_rows, "row plan anchor out of range");
                idx.push(j as u32);
                w.push(fl::<E>(wj));
            }
            starts.push(idx.len() as u32);
        }
        RowPlan {
            starts,
            idx,
            w,
            in_rows,
        }
    }

    pub fn out_rows(&self) -> usize {
        self.starts.len() - 1
    }
}

#[derive(Clone)]
enum Op<E: Scalar> {
    Leaf,
    Add,
    Sub,
    Mul,
    Sigmoid,
    Tanh,
    Relu,
    Sin,
    Cos,
    MatMul,
    Transpose2d,
    Conv2d { kernel: usize, pad: PadMode },
    Softmax { axis: usize },
    Concat { axis: usize },
    Slice { axis: usize, start: usize },
    Sum,
    Mean,
    Mse,
    Scale { c: E },
    BiasAdd,
    Gather { idx: Arc<Vec<u32>> },
    RowInterp { plan: Arc<RowPlan<E>> },
    ClampSt { lo: Arc<Vec<E>>, hi: Arc<Vec<E>> },
    Cross3,
    NormalizeRows { eps: E },
    AffineRows { mats: Arc<Vec<E>> },
    Reshape,
}

impl<E: Scalar> Op<E> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Relu => "relu",
            Op::Sin => "sin",
            Op::Cos => "cos",
            Op::MatMul => "matmul",
            Op::Transpose2d => "transpose2d",
            Op::Conv2d { .. } => "conv2d",
            Op::Softmax { .. } => "softmax",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::Mse => "mse",
            Op::Scale { .. } => "scale",
            Op::BiasAdd => "bias_add",
            Op::Gather { .. } => "gather",
            Op::RowInterp { .. } => "row_interp",
            Op::ClampSt { .. } => "clamp_st",
            Op::Cross3 => "cross3",
            Op::NormalizeRows { .. } => "normalize_rows",
            Op::AffineRows { .. } => "affine_rows",
            Op::Reshape => "reshape",
        }
    }
}

struct Node<E: Scalar> {
    op: Op<E>,
    inputs: Vec<TensorId>,
    shape: Vec<usize>,
    data: Vec<E>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`TensorId`].
pub struct Grads<E: Scalar> {
    g: Vec<Option<Vec<E>>>,
}

impl<E: Scalar> Grads<E> {
    /// Gradient buffer for `id`, if the node participates in the graph and
    /// requires gradients.
    pub fn get(&self, id: TensorId) -> Option<&[E]> {
        self.g.get(id.0).and_then(|o| o.as_deref())
    }
}

/// Append-only computation graph with eager forward evaluation.
pub struct Tape<E: Scalar> {
    nodes: Vec<Node<E>>,
}

impl<E: Scalar> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<E: Scalar> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn data(&self, id: TensorId) -> &[E] {
        &self.nodes[id.0].data
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self, id: TensorId) -> E {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(
        &mut self,
        op: Op<E>,
        inputs: Vec<TensorId>,
        shape: Vec<usize>,
        data: Vec<E>,
    ) -> TensorId {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            data,
            requires_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Adds a leaf tensor. `requires_grad` marks trainable parameters.
    pub fn leaf(&mut self, data: Vec<E>, shape: &[usize], requires_grad: bool) -> TensorId {
        assert_eq!(numel(shape), data.len(), "leaf data does not match shape");
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            shape: shape.to_vec(),
            data,
            requires_grad,
        });
        TensorId(self.nodes.len() - 1)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, data: Vec<E>, shape: &[usize]) -> TensorId {
        self.leaf(data, shape, false)
    }

    /// Constant filled with `v`.
    pub fn fill(&mut self, v: E, shape: &[usize]) -> TensorId {
        self.constant(vec![v; numel(shape)], shape)
    }

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("add", a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.push(Op::Add, vec![a, b], self.shape(a).to_vec(), data))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("sub", a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x - y)
            .collect();
        Ok(self.push(Op::Sub, vec![a, b], self.shape(a).to_vec(), data))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("mul", a, b)?;
        let data = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        Ok(self.push(Op::Mul, vec![a, b], self.shape(a).to_vec(), data))
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let data = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| fl::<E>(1.0) / (fl::<E>(1.0) + (-v).exp()))
            .collect();
        self.push(Op::Sigmoid, vec![x], self.shape(x).to_vec(), data)
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let data = self.nodes[x.0].data.iter().map(|&v| v.tanh()).collect();
        self.push(Op::Tanh, vec![x], self.shape(x).to_vec(), data)
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let z = E::zero();
        let data = self.nodes[x.0]
            .data
            .iter()
            .map(|&v| if v > z { v } else { z })
            .collect();
        self.push(Op::Relu, vec![x], self.shape(x).to_vec(), data)
    }

    pub fn sin(&mut self, x: TensorId) -> TensorId {
        let data = self.nodes[x.0].data.iter().map(|&v| v.sin()).collect();
        self.push(Op::Sin, vec![x], self.shape(x).to_vec(), data)
    }

    pub fn cos(&mut self, x: TensorId) -> TensorId {
        let data = self.nodes[x.0].data.iter().map(|&v| v.cos()).collect();
        self.push(Op::Cos, vec![x], self.shape(x).to_vec(), data)
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![E::zero(); m * n];
        {
            let da = &self.nodes[a.0].data;
            let db = &self.nodes[b.0].data;
            par_rows(&mut out, n, |row0, chunk| {
                for (r, orow) in chunk.chunks_mut(n).enumerate() {
                    let i = row0 + r;
                    for l in 0..k {
                        let av = da[i * k + l];
                        if av != E::zero() {
                            let brow = &db[l * n..l * n + n];
                            for (o, &bv) in orow.iter_mut().zip(brow) {
                                *o = *o + av * bv;
                            }
                        }
                    }
                }
            });
        }
        Ok(self.push(Op::MatMul, vec![a, b], vec![m, n], out))
    }

    /// `[m,n] -> [n,m]`.
    pub fn transpose2d(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape("transpose2d", format!("{s:?}")));
        }
        let (m, n) = (s[0], s[1]);
        let dx = &self.nodes[x.0].data;
        let mut out = vec![E::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = dx[i * n + j];
            }
        }
        Ok(self.push(Op::Transpose2d, vec![x], vec![n, m], out))
    }

    /// 2D convolution (cross-correlation) over a `[h,w,cin]` input with a
    /// `[k,k,cin,cout]` weight and `[cout]` bias; stride 1, same padding,
    /// odd square kernel.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: TensorId,
        pad: PadMode,
    ) -> Result<TensorId> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 3 || sw.len() != 4 || sb.len() != 1 {
            return Err(Error::shape(
                "conv2d",
                format!("input {sx:?}, weight {sw:?}, bias {sb:?}"),
            ));
        }
        let (h, wd, cin) = (sx[0], sx[1], sx[2]);
        let (k, cout) = (sw[0], sw[3]);
        if sw[1] != k || k % 2 == 0 || sw[2] != cin || sb[0] != cout {
            return Err(Error::shape(
                "conv2d",
                format!("input {sx:?}, weight {sw:?}, bias {sb:?}"),
            ));
        }
        let mut out = vec![E::zero(); h * wd * cout];
        {
            let dx = &self.nodes[x.0].data;
            let dw = &self.nodes[w.0].data;
            let db = &self.nodes[b.0].data;
            let p = (k / 2) as isize;
            par_rows(&mut out, wd * cout, |row0, chunk| {
                for (r, orow) in chunk.chunks_mut(wd * cout).enumerate() {
                    let y = (row0 + r) as isize;
                    for xcol in 0..wd as isize {
                        let acc = &mut orow[xcol as usize * cout..(xcol as usize + 1) * cout];
                        acc.copy_from_slice(db);
                        for dy in 0..k as isize {
                            let Some(yy) = pad_src(y + dy - p, h, pad) else {
                                continue;
                            };
                            for dxo in 0..k as isize {
                                let Some(xx) = pad_src(xcol + dxo - p, wd, pad) else {
                                    continue;
                                };
                                let px = &dx[(yy * wd + xx) * cin..(yy * wd + xx + 1) * cin];
                                let wbase = ((dy as usize * k + dxo as usize) * cin) * cout;
                                for (ci, &v) in px.iter().enumerate() {
                                    if v != E::zero() {
                                        let wrow = &dw[wbase + ci * cout..wbase + (ci + 1) * cout];
                                        for (o, &wv) in acc.iter_mut().zip(wrow) {
                                            *o = *o + v * wv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            });
        }
        Ok(self.push(
            Op::Conv2d { kernel: k, pad },
            vec![x, w, b],
            vec![h, wd, cout],
            out,
        ))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::shape(
                "softmax",
                format!("axis {axis} of {s:?}"),
            ));
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let dx = &self.nodes[x.0].data;
        let mut out = vec![E::zero(); dx.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = E::neg_infinity();
                for l in 0..len {
                    mx = mx.max(dx[base + l * inner]);
                }
                let mut denom = E::zero();
                for l in 0..len {
                    let e = (dx[base + l * inner] - mx).exp();
                    out[base + l * inner] = e;
                    denom = denom + e;
                }
                for l in 0..len {
                    out[base + l * inner] = out[base + l * inner] / denom;
                }
            }
        }
        Ok(self.push(Op::Softmax { axis }, vec![x], s, out))
    }

    /// Concatenates tensors along `axis`; all other extents must match.
    pub fn concat(&mut self, xs: &[TensorId], axis: usize) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(Error::shape("concat", "empty input list"));
        }
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {first:?}")));
        }
        let mut total = 0usize;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?} along axis {axis}", s, first),
                ));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = vec![E::zero(); numel(&shape)];
        let row = total * inner;
        let mut off = 0usize;
        for &x in xs {
            let len = self.shape(x)[axis];
            let dx = &self.nodes[x.0].data;
            for o in 0..outer {
                let dst = &mut out[o * row + off * inner..o * row + (off + len) * inner];
                dst.copy_from_slice(&dx[o * len * inner..(o + 1) * len * inner]);
            }
            off += len;
        }
        Ok(self.push(Op::Concat { axis }, xs.to_vec(), shape, out))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(Error::shape(
                "slice",
                format!("range {start}..{} along axis {axis} of {s:?}", start + len),
            ));
        }
        let (outer, full, inner) = axis_split(&s, axis);
        let mut shape = s.clone();
        shape[axis] = len;
        let dx = &self.nodes[x.0].data;
        let mut out = vec![E::zero(); outer * len * inner];
        for o in 0..outer {
            let src = &dx[(o * full + start) * inner..(o * full + start + len) * inner];
            out[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
        }
        Ok(self.push(Op::Slice { axis, start }, vec![x], shape, out))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let s: E = self.nodes[x.0].data.iter().copied().sum();
        self.push(Op::Sum, vec![x], vec![1], vec![s])
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, x: TensorId) -> TensorId {
        let n = self.nodes[x.0].data.len();
        let s: E = self.nodes[x.0].data.iter().copied().sum();
        let m = s / fl::<E>(n as f64);
        self.push(Op::Mean, vec![x], vec![1], vec![m])
    }

    /// Mean squared error between same-shape tensors, shape `[1]`.
    pub fn mse(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("mse", a, b)?;
        let n = self.nodes[a.0].data.len();
        let s: E = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let m = s / fl::<E>(n as f64);
        Ok(self.push(Op::Mse, vec![a, b], vec![1], vec![m]))
    }

    /// Multiplies every element by the constant `c`.
    pub fn scale(&mut self, x: TensorId, c: E) -> TensorId {
        let data = self.nodes[x.0].data.iter().map(|&v| v * c).collect();
        self.push(Op::Scale { c }, vec![x], self.shape(x).to_vec(), data)
    }

    /// Adds a `[c]` bias to every length-`c` row of `x` (last axis).
    pub fn bias_add(&mut self, x: TensorId, b: TensorId) -> Result<TensorId> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        let c = *sx.last().unwrap_or(&0);
        if sb.len() != 1 || sb[0] != c {
            return Err(Error::shape("bias_add", format!("{sx:?} + {sb:?}")));
        }
        let db = self.nodes[b.0].data.clone();
        let data = self.nodes[x.0]
            .data
            .chunks(c)
            .flat_map(|row| row.iter().zip(&db).map(|(&v, &bv)| v + bv))
            .collect();
        Ok(self.push(Op::BiasAdd, vec![x, b], sx.to_vec(), data))
    }

    /// Element gather: `out[i] = x[idx[i]]` over flattened `x`.
    pub fn gather(
        &mut self,
        x: TensorId,
        idx: Arc<Vec<u32>>,
        out_shape: &[usize],
    ) -> Result<TensorId> {
        let n = self.nodes[x.0].data.len();
        if numel(out_shape) != idx.len() {
            return Err(Error::shape(
                "gather",
                format!("{} indices for shape {out_shape:?}", idx.len()),
            ));
        }
        if idx.iter().any(|&i| i as usize >= n) {
            return Err(Error::shape("gather", format!("index out of range (len {n})")));
        }
        let dx = &self.nodes[x.0].data;
        let data = idx.iter().map(|&i| dx[i as usize]).collect();
        Ok(self.push(Op::Gather { idx }, vec![x], out_shape.to_vec(), data))
    }

    /// Sparse row resampling of a `[n,c]` tensor under a fixed plan.
    pub fn row_interp(&mut self, x: TensorId, plan: Arc<RowPlan<E>>) -> Result<TensorId> {
        let s = self.shape(x);
        if s.len() != 2 || s[0] != plan.in_rows {
            return Err(Error::shape(
                "row_interp",
                format!("{s:?} with plan over {} rows", plan.in_rows),
            ));
        }
        let c = s[1];
        let m = plan.out_rows();
        let dx = &self.nodes[x.0].data;
        let mut out = vec![E::zero(); m * c];
        for r in 0..m {
            let (s0, s1) = (plan.starts[r] as usize, plan.starts[r + 1] as usize);
            let orow = &mut out[r * c..(r + 1) * c];
            for a in s0..s1 {
                let j = plan.idx[a] as usize;
                let wj = plan.w[a];
                let src = &dx[j * c..(j + 1) * c];
                for (o, &v) in orow.iter_mut().zip(src) {
                    *o = *o + wj * v;
                }
            }
        }
        Ok(self.push(Op::RowInterp { plan }, vec![x], vec![m, c], out))
    }

    /// Per-element clamp to `[lo, hi]` with a straight-through gradient:
    /// the gradient passes wherever the input lies inside the bounds and is
    /// blocked where the clamp saturates.
    pub fn clamp_st(
        &mut self,
        x: TensorId,
        lo: Arc<Vec<E>>,
        hi: Arc<Vec<E>>,
    ) -> Result<TensorId> {
        let n = self.nodes[x.0].data.len();
        if lo.len() != n || hi.len() != n {
            return Err(Error::shape(
                "clamp_st",
                format!("bounds {}x{} for {n} elements", lo.len(), hi.len()),
            ));
        }
        let data = self.nodes[x.0]
            .data
            .iter()
            .zip(lo.iter().zip(hi.iter()))
            .map(|(&v, (&l, &h))| v.max(l).min(h))
            .collect();
        Ok(self.push(Op::ClampSt { lo, hi }, vec![x], self.shape(x).to_vec(), data))
    }

    /// Row-wise cross product of two `[n,3]` tensors.
    pub fn cross3(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("cross3", a, b)?;
        let s = self.shape(a);
        if s.len() != 2 || s[1] != 3 {
            return Err(Error::shape("cross3", format!("{s:?}")));
        }
        let da = &self.nodes[a.0].data;
        let db = &self.nodes[b.0].data;
        let mut out = vec![E::zero(); da.len()];
        for r in 0..s[0] {
            let (x, y) = (&da[r * 3..r * 3 + 3], &db[r * 3..r * 3 + 3]);
            out[r * 3] = x[1] * y[2] - x[2] * y[1];
            out[r * 3 + 1] = x[2] * y[0] - x[0] * y[2];
            out[r * 3 + 2] = x[0] * y[1] - x[1] * y[0];
        }
        Ok(self.push(Op::Cross3, vec![a, b], s.to_vec(), out))
    }

    /// Normalizes each row of a `[n,c]` tensor to unit length. Rows with
    /// norm below `eps` become zero (and receive zero gradient).
    pub fn normalize_rows(&mut self, x: TensorId, eps: E) -> Result<TensorId> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape("normalize_rows", format!("{s:?}")));
        }
        let c = s[1];
        let dx = &self.nodes[x.0].data;
        let mut out = vec![E::zero(); dx.len()];
        for r in 0..s[0] {
            let row = &dx[r * c..(r + 1) * c];
            let norm = row.iter().map(|&v| v * v).sum::<E>().sqrt();
            if norm >= eps {
                for (o, &v) in out[r * c..(r + 1) * c].iter_mut().zip(row) {
                    *o = v / norm;
                }
            }
        }
        Ok(self.push(Op::NormalizeRows { eps }, vec![x], s.to_vec(), out))
    }

    /// Applies a constant per-row affine map to a `[n,3]` tensor:
    /// `out[r] = M_r x[r] + t_r`, with `mats` holding the `M_r` flattened
    /// `n x 3 x 3` row-major and `offs` the `t_r` flattened `n x 3`. Used to
    /// pose canonical vertices inside the graph while skinning transforms
    /// stay fixed; gradients map back through `M_r^T`.
    pub fn affine_rows(
        &mut self,
        x: TensorId,
        mats: Arc<Vec<E>>,
        offs: Arc<Vec<E>>,
    ) -> Result<TensorId> {
        let s = self.shape(x);
        if s.len() != 2 || s[1] != 3 {
            return Err(Error::shape("affine_rows", format!("{s:?}")));
        }
        let n = s[0];
        if mats.len() != n * 9 || offs.len() != n * 3 {
            return Err(Error::shape(
                "affine_rows",
                format!("{n} rows with {} mat and {} off entries", mats.len(), offs.len()),
            ));
        }
        let dx = &self.nodes[x.0].data;
        let mut out = vec![E::zero(); n * 3];
        for r in 0..n {
            let xr = &dx[r * 3..r * 3 + 3];
            let m = &mats[r * 9..r * 9 + 9];
            let orow = &mut out[r * 3..r * 3 + 3];
            for i in 0..3 {
                orow[i] = m[i * 3] * xr[0] + m[i * 3 + 1] * xr[1] + m[i * 3 + 2] * xr[2]
                    + offs[r * 3 + i];
            }
        }
        Ok(self.push(Op::AffineRows { mats }, vec![x], vec![n, 3], out))
    }

    /// Reinterprets `x` with a new shape of equal element count.
    pub fn reshape(&mut self, x: TensorId, shape: &[usize]) -> Result<TensorId> {
        if numel(shape) != self.nodes[x.0].data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape(x)),
            ));
        }
        let data = self.nodes[x.0].data.clone();
        Ok(self.push(Op::Reshape, vec![x], shape.to_vec(), data))
    }

    /// Reverse sweep from a scalar `root`; returns per-node gradients.
    pub fn backward(&self, root: TensorId) -> Result<Grads<E>> {
        if self.nodes[root.0].data.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("root must be scalar, got {:?}", self.shape(root)),
            ));
        }
        let mut g: Vec<Option<Vec<E>>> = vec![None; self.nodes.len()];
        if !self.nodes[root.0].requires_grad {
            return Ok(Grads { g });
        }
        g[root.0] = Some(vec![E::one()]);
        for i in (0..=root.0).rev() {
            let Some(gout) = g[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(i, &gout, &mut g);
            g[i] = Some(gout);
        }
        Ok(Grads { g })
    }

    fn grad_buf<'a>(
        &self,
        g: &'a mut Vec<Option<Vec<E>>>,
        id: TensorId,
    ) -> Option<&'a mut Vec<E>> {
        if !self.nodes[id.0].requires_grad {
            return None;
        }
        Some(
            g[id.0].get_or_insert_with(|| vec![E::zero(); self.nodes[id.0].data.len()]),
        )
    }

    fn backprop_node(&self, i: usize, gout: &[E], g: &mut Vec<Option<Vec<E>>>) {
        let node = &self.nodes[i];
        let ins = &node.inputs;
        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                for &inp in ins {
                    if let Some(gi) = self.grad_buf(g, inp) {
                        for (d, &v) in gi.iter_mut().zip(gout) {
                            *d = *d + v;
                        }
                    }
                }
            }
            Op::Sub => {
                if let Some(gi) = self.grad_buf(g, ins[0]) {
                    for (d, &v) in gi.iter_mut().zip(gout) {
                        *d = *d + v;
                    }
                }
                if let Some(gi) = self.grad_buf(g, ins[1]) {
                    for (d, &v) in gi.iter_mut().zip(gout) {
                        *d = *d - v;
                    }
                }
            }
            Op::Mul => {
                let (a, b) = (ins[0], ins[1]);
                if self.nodes[a.0].requires_grad {
                    let db: Vec<E> = self.nodes[b.0].data.clone();
                    let gi = self.grad_buf(g, a).unwrap();
                    for ((d, &v), &bv) in gi.iter_mut().zip(gout).zip(&db) {
                        *d = *d + v * bv;
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let da: Vec<E> = self.nodes[a.0].data.clone();
                    let gi = self.grad_buf(g, b).unwrap();
                    for ((d, &v), &av) in gi.iter_mut().zip(gout).zip(&da) {
                        *d = *d + v * av;
                    }
                }
            }
            Op::Sigmoid => {
                let y: Vec<E> = node.data.clone();
                if let Some(gi) = self.grad_buf(g, ins[0]) {
                    for ((d, &v), &s) in gi.iter_mut().zip(gout).zip(&y) {
                        *d = *d + v * s * (E::one() - s);
                    }
                }
            }
            Op::Tanh => {
                let y: Vec<E> = node.data.clone();
                if let Some(gi) = self.grad_buf(g, ins[0]) {
                    for ((d, &v), &t) in gi.iter_mut().zip(gout).zip(&y) {
                        *d = *d + v * (E::one() - t * t);
                    }
                }
            }
            Op::Relu => {
                let x: Vec<E> = self.nodes[ins[0].0].data.clone();
                if let Some(gi) = self.grad_buf(g, ins[0]) {
                    for ((d, &v), &xv) in gi.iter_mut().zip(gout).zip(&x) {
                        if xv > E::zero() {
                            *d = *d + v;
                        }
                    }
                }
            }
            Op::Sin => {
                let x: Vec<E> = self.nodes[ins[0].0].data.clone();
                if let Some(gi) = self.grad_buf(g, ins[0]) {
                    for ((d, &v), &xv) in gi.iter_mut().zip(gout).zip(&x) {
                        *d = *d + v * xv.cos();
                    }
                }
            }
            Op::Cos => {
                let x: Vec<E> = self.nodes[ins[0].0].data.clone();
                if let Some(gi) = self.grad_buf(g, ins[0]) {
                    for ((d, &v), &xv) in gi.iter_mut().zip(gout).zip(&x) {
                        *d = *d - v * xv.sin();
                    }
                }
            }
            Op::MatMul => {
                let (a, b) = (ins[0], ins[1]);
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.nodes[a.0].requires_grad {
                    let db = self.nodes[b.0].data.clone();
                    let gi = self.grad_buf(g, a).unwrap();
                    par_rows(gi, k, |row0, chunk| {
                        for (r, arow) in chunk.chunks_mut(k).enumerate() {
                            let i2 = row0 + r;
                            let grow = &gout[i2 * n..(i2 + 1) * n];
                            for (l, d) in arow.iter_mut().enumerate() {
                                let brow = &db[l * n..(l + 1) * n];
                                let mut acc = E::zero();
                                for (&gv, &bv) in grow.iter().zip(brow) {
                                    acc = acc + gv * bv;
                                }
                                *d = *d + acc;
                            }
                        }
                    });
                }
                if self.nodes[b.0].requires_grad {
                    let da = self.nodes[a.0].data.clone();
                    let gi = self.grad_buf(g, b).unwrap();
                    par_rows(gi, n, |row0, chunk| {
                        for (r, brow) in chunk.chunks_mut(n).enumerate() {
                            let l = row0 + r;
                            for i2 in 0..m {
                                let av = da[i2 * k + l];
                                if av != E::zero() {
                                    let grow = &gout[i2 * n..(i2 + 1) * n];
                                    for (d, &gv) in brow.iter_mut().zip(grow) {
                                        *d = *d + av * gv;
                                    }
                                }
                            }
                        }
                    });
                }
            }
            Op::Transpose2d => {
                let (n, m) = (node.shape[0], node.shape[1]);
                if let Some(gi) = self.grad_buf(g, ins[0]) {
                    for j in 0..n {
                        for i2 in 0..m {
                            gi[i2 * n + j] = gi[i2 * n + j] + gout[j * m + i2];
                        }
                    }
                }
            }
            Op::Conv2d { kernel, pad } => {
                self.conv2d_backward(ins, node, *kernel, *pad, gout, g);
            }
            Op::Softmax { axis } => {
                let (outer, len, inner) = axis_split(&node.shape, *axis);
                let y = node.data.clone();
                if let Some(gi) = self.grad_buf(g, ins[0]) {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let base = o * len * inner + ii;
                            let mut dot = E::zero();
                            for l in 0..len {
                                let p = base + l * inner;
                                dot = dot + y[p] * gout[p];
                            }
                            for l in 0..len {
                                let p = base + l * inner;
                                gi[p] = gi[p] + y[p] * (gout[p] - dot);
                            }
                        }
                    }
                }
            }
            Op::Concat { axis } => {
                let (outer, total, inner) = axis_split(&node.shape, *axis);
                let row = total * inner;
                let mut off = 0usize;
                for &inp in ins {
                    let len = self.nodes[inp.0].shape[*axis];
                    if self.nodes[inp.0].requires_grad {
                        let gi = self.grad_buf(g, inp).unwrap();
                        for o in 0..outer {
                            let src = &gout[o * row + off * inner..o * row + (off + len) * inner];
                            let dst = &mut gi[o * len * inner..(o + 1) * len * inner];
                            for (d, &v) in dst.iter_mut().zip(src) {
                                *d = *d + v;
                            }
                        }
                    }
                    off += len;
                }
            }
            Op::Slice { axis, start } => {
                let src_shape = &self.nodes[ins[0].0].shape;
                let (outer, full, inner) = axis_split(src_shape, *axis);
                let len = node.shape[*axis];
                if let Some(gi) = self.grad_buf(g, ins[0]) {
                    for o in 0..outer {
                        let dst = &mut gi
                            [(o * full + start) * inner..(o * full + start + len) * inner];
                        let src = &gout[o * len * inner..(o + 1) * len * inner];
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d = *d + v;
                        }
                    }
                }
            }
            Op::Sum => {
                let v = gout[0];
                if let Some(gi) = self.grad_buf(g, ins[0]) {
                    for d in gi.iter_mut() {
                        *d = *d + v;
                    }
                }
            }
            Op::Mean => {
                let n = self.nodes[ins[0].0].data.len();
                let v = gout[0] / fl::<E>(n as f64);
                if let Some(gi) = self.grad_buf(g, ins[0]) {
                    for d in gi.iter_mut() {
                        *d = *d + v;
                    }
                }
            }
            Op::Mse => {
                let (a, b) = (ins[0], ins[1]);
                let n = self.nodes[a.0].data.len();
                let c = gout[0] * fl::<E>(2.0 / n as f64);
                let diff: Vec<E> = self.nodes[a.0]
                    .data
                    .iter()
                    .zip(&self.nodes[b.0].data)
                    .map(|(&x, &y)| x - y)
                    .collect();
                if let Some(gi) = self.grad_buf(g, a) {
                    for (d, &v) in gi.iter_mut().zip(&diff) {
                        *d = *d + c * v;
                    }
                }
                if let Some(gi) = self.grad_buf(g, b) {
                    for (d, &v) in gi.iter_mut().zip(&diff) {
                        *d = *d - c * v;
                    }
                }
            }
            Op::Scale { c } => {
                let c = *c;
                if let Some(gi) = self.grad_buf(g, ins[0]) {
                    for (d, &v) in gi.iter_mut().zip(gout) {
                        *d = *d + c * v;
                    }
                }
            }
            Op::BiasAdd => {
                let c = *node.shape.last().unwrap();
                if let Some(gi) = self.grad_buf(g, ins[0]) {
                    for (d, &v) in gi.iter_mut().zip(gout) {
                        *d = *d + v;
                    }
                }
                if let Some(gi) = self.grad_buf(g, ins[1]) {
                    for row in gout.chunks(c) {
                        for (d, &v) in gi.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                }
            }
            Op::Gather { idx } => {
                if let Some(gi) = self.grad_buf(g, ins[0]) {
                    for (&j, &v) in idx.iter().zip(gout) {
                        gi[j as usize] = gi[j as usize] + v;
                    }
                }
            }
            Op::RowInterp { plan } => {
                let c = node.shape[1];
                if let Some(gi) = self.grad_buf(g, ins[0]) {
                    for r in 0..plan.out_rows() {
                        let (s0, s1) = (plan.starts[r] as usize, plan.starts[r + 1] as usize);
                        let grow = &gout[r * c..(r + 1) * c];
                        for a in s0..s1 {
                            let j = plan.idx[a] as usize;
                            let wj = plan.w[a];
                            let dst = &mut gi[j * c..(j + 1) * c];
                            for (d, &v) in dst.iter_mut().zip(grow) {
                                *d = *d + wj * v;
                            }
                        }
                    }
                }
            }
            Op::ClampSt { lo, hi } => {
                let x: Vec<E> = self.nodes[ins[0].0].data.clone();
                if let Some(gi) = self.grad_buf(g, ins[0]) {
                    for (((d, &v), &xv), (&l, &h)) in gi
                        .iter_mut()
                        .zip(gout)
                        .zip(&x)
                        .zip(lo.iter().zip(hi.iter()))
                    {
                        if xv >= l && xv <= h {
                            *d = *d + v;
                        }
                    }
                }
            }
            Op::Cross3 => {
                let (a, b) = (ins[0], ins[1]);
                let rows = node.shape[0];
                let da = self.nodes[a.0].data.clone();
                let db = self.nodes[b.0].data.clone();
                if self.nodes[a.0].requires_grad {
                    let gi = self.grad_buf(g, a).unwrap();
                    for r in 0..rows {
                        let bv = &db[r * 3..r * 3 + 3];
                        let gv = &gout[r * 3..r * 3 + 3];
                        let d = &mut gi[r * 3..r * 3 + 3];
                        d[0] = d[0] + bv[1] * gv[2] - bv[2] * gv[1];
                        d[1] = d[1] + bv[2] * gv[0] - bv[0] * gv[2];
                        d[2] = d[2] + bv[0] * gv[1] - bv[1] * gv[0];
                    }
                }
                if self.nodes[b.0].requires_grad {
                    let gi = self.grad_buf(g, b).unwrap();
                    for r in 0..rows {
                        let av = &da[r * 3..r * 3 + 3];
                        let gv = &gout[r * 3..r * 3 + 3];
                        let d = &mut gi[r * 3..r * 3 + 3];
                        d[0] = d[0] + gv[1] * av[2] - gv[2] * av[1];
                        d[1] = d[1] + gv[2] * av[0] - gv[0] * av[2];
                        d[2] = d[2] + gv[0] * av[1] - gv[1] * av[0];
                    }
                }
            }
            Op::NormalizeRows { eps } => {
                let c = node.shape[1];
                let x = self.nodes[ins[0].0].data.clone();
                let y = node.data.clone();
                if let Some(gi) = self.grad_buf(g, ins[0]) {
                    for r in 0..node.shape[0] {
                        let xr = &x[r * c..(r + 1) * c];
                        let norm = xr.iter().map(|&v| v * v).sum::<E>().sqrt();
                        if norm < *eps {
                            continue;
                        }
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &gout[r * c..(r + 1) * c];
                        let dot: E = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        let d = &mut gi[r * c..(r + 1) * c];
                        for k in 0..c {
                            d[k] = d[k] + (gr[k] - yr[k] * dot) / norm;
                        }
                    }
                }
            }
            Op::AffineRows { mats } => {
                if let Some(gi) = self.grad_buf(g, ins[0]) {
                    for r in 0..node.shape[0] {
                        let m = &mats[r * 9..r * 9 + 9];
                        let gv = &gout[r * 3..r * 3 + 3];
                        let d = &mut gi[r * 3..r * 3 + 3];
                        for k in 0..3 {
                            d[k] = d[k] + m[k] * gv[0] + m[3 + k] * gv[1] + m[6 + k] * gv[2];
                        }
                    }
                }
            }
            Op::Reshape => {
                if let Some(gi) = self.grad_buf(g, ins[0]) {
                    for (d, &v) in gi.iter_mut().zip(gout) {
                        *d = *d + v;
                    }
                }
            }
        }
    }

    fn conv2d_backward(
        &self,
        ins: &[TensorId],
        node: &Node<E>,
        k: usize,
        pad: PadMode,
        gout: &[E],
        g: &mut Vec<Option<Vec<E>>>,
    ) {
        let (x, w, b) = (ins[0], ins[1], ins[2]);
        let sx = &self.nodes[x.0].shape;
        let (h, wd, cin) = (sx[0], sx[1], sx[2]);
        let cout = node.shape[2];
        let p = (k / 2) as isize;
        if self.nodes[b.0].requires_grad {
            let gi = self.grad_buf(g, b).unwrap();
            for row in gout.chunks(cout) {
                for (d, &v) in gi.iter_mut().zip(row) {
                    *d = *d + v;
                }
            }
        }
        if self.nodes[w.0].requires_grad {
            let dx = self.nodes[x.0].data.clone();
            let gi = self.grad_buf(g, w).unwrap();
            for y in 0..h as isize {
                for xc in 0..wd as isize {
                    let grow = &gout[((y as usize) * wd + xc as usize) * cout..][..cout];
                    for dy in 0..k as isize {
                        let Some(yy) = pad_src(y + dy - p, h, pad) else {
                            continue;
                        };
                        for dxo in 0..k as isize {
                            let Some(xx) = pad_src(xc + dxo - p, wd, pad) else {
                                continue;
                            };
                            let px = &dx[(yy * wd + xx) * cin..][..cin];
                            let wbase = (dy as usize * k + dxo as usize) * cin * cout;
                            for (ci, &v) in px.iter().enumerate() {
                                if v != E::zero() {
                                    let dst = &mut gi[wbase + ci * cout..][..cout];
                                    for (d, &gv) in dst.iter_mut().zip(grow) {
                                        *d = *d + v * gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if self.nodes[x.0].requires_grad {
            let dw = self.nodes[w.0].data.clone();
            let gi = self.grad_buf(g, x).unwrap();
            for y in 0..h as isize {
                for xc in 0..wd as isize {
                    let grow = &gout[((y as usize) * wd + xc as usize) * cout..][..cout];
                    for dy in 0..k as isize {
                        let Some(yy) = pad_src(y + dy - p, h, pad) else {
                            continue;
                        };
                        for dxo in 0..k as isize {
                            let Some(xx) = pad_src(xc + dxo - p, wd, pad) else {
                                continue;
                            };
                            let wbase = (dy as usize * k + dxo as usize) * cin * cout;
                            let dst = &mut gi[(yy * wd + xx) * cin..][..cin];
                            for (ci, d) in dst.iter_mut().enumerate() {
                                let wrow = &dw[wbase + ci * cout..][..cout];
                                let mut acc = E::zero();
                                for (&wv, &gv) in wrow.iter().zip(grow) {
                                    acc = acc + wv * gv;
                                }
                                *d = *d + acc;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn pad_src(i: isize, lim: usize, pad: PadMode) -> Option<usize> {
    if i >= 0 && (i as usize) < lim {
        Some(i as usize)
    } else {
        match pad {
            PadMode::Zero => None,
            PadMode::Replicate => Some(i.clamp(0, lim as isize - 1) as usize),
        }
    }
}

/// Splits a shape at `axis` into `(outer, axis_len, inner)` extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tape() -> Tape<f64> {
        Tape::new()
    }

    #[test]
    fn fanout_accumulates() {
        let mut t = tape();
        let x = t.leaf(vec![3.0], &[1], true);
        let y = t.add(x, x).unwrap();
        assert_eq!(t.data(y), &[6.0]);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut t = tape();
        let x = t.leaf(vec![1.0, 2.0], &[2], true);
        let c = t.constant(vec![4.0, 5.0], &[2]);
        let y = t.mul(x, c).unwrap();
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[4.0, 5.0]);
        assert!(g.get(c).is_none());
    }

    #[test]
    fn sin_cos_derivatives_are_exact() {
        let mut t = tape();
        let xs = vec![-2.0, -0.7, 0.0, 0.3, 1.9];
        let x = t.leaf(xs.clone(), &[5], true);
        let s = t.sin(x);
        let total = t.sum(s);
        let g = t.backward(total).unwrap();
        for (gv, &xv) in g.get(x).unwrap().iter().zip(&xs) {
            assert!((gv - xv.cos()).abs() < 1e-15);
        }

        let mut t = tape();
        let x = t.leaf(xs.clone(), &[5], true);
        let c = t.cos(x);
        let total = t.sum(c);
        let g = t.backward(total).unwrap();
        for (gv, &xv) in g.get(x).unwrap().iter().zip(&xs) {
            assert!((gv + xv.sin()).abs() < 1e-15);
        }
    }

    #[test]
    fn matmul_known_values() {
        let mut t = tape();
        let a = t.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3], true);
        let b = t.leaf(vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0], &[3, 2], true);
        let y = t.matmul(a, b).unwrap();
        assert_eq!(t.data(y), &[4.0, 5.0, 10.0, 11.0]);
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        // dA = G * B^T with G all ones.
        assert_eq!(g.get(a).unwrap(), &[1.0, 1.0, 2.0, 1.0, 1.0, 2.0]);
        // dB = A^T * G.
        assert_eq!(g.get(b).unwrap(), &[5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
    }

    #[test]
    fn conv2d_delta_reproduces_flipped_kernel() {
        let mut t = tape();
        // 5x5 single-channel delta at the center.
        let mut img = vec![0.0; 25];
        img[12] = 1.0;
        let x = t.leaf(img, &[5, 5, 1], false);
        let kern: Vec<f64> = (1..=9).map(|v| v as f64).collect();
        let w = t.leaf(kern, &[3, 3, 1, 1], false);
        let b = t.leaf(vec![0.0], &[1], false);
        let y = t.conv2d(x, w, b, PadMode::Zero).unwrap();
        // Correlation flips the stencil around the delta position.
        let d = t.data(y);
        let expect = [
            (6usize, 9.0),
            (7, 8.0),
            (8, 7.0),
            (11, 6.0),
            (12, 5.0),
            (13, 4.0),
            (16, 3.0),
            (17, 2.0),
            (18, 1.0),
        ];
        let mut dense = vec![0.0; 25];
        for (i, v) in expect {
            dense[i] = v;
        }
        assert_eq!(d, &dense[..]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = tape();
        let x = t.leaf(vec![0.0, 1.0, 2.0, -1.0, 0.5, 0.25], &[2, 3], true);
        let y = t.softmax(x, 1).unwrap();
        for row in t.data(y).chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_single_entry_is_one() {
        let mut t = tape();
        let x = t.leaf(vec![-3.7], &[1, 1], false);
        let y = t.softmax(x, 1).unwrap();
        assert_eq!(t.data(y), &[1.0]);
    }

    #[test]
    fn clamp_straight_through_blocks_saturated() {
        let mut t = tape();
        let x = t.leaf(vec![-2.0, 0.5, 3.0], &[3], true);
        let lo = Arc::new(vec![-1.0, -1.0, -1.0]);
        let hi = Arc::new(vec![1.0, 1.0, 1.0]);
        let y = t.clamp_st(x, lo, hi).unwrap();
        assert_eq!(t.data(y), &[-1.0, 0.5, 1.0]);
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_is_a_structured_error() {
        let mut t = tape();
        let a = t.leaf(vec![1.0, 2.0], &[2], false);
        let b = t.leaf(vec![1.0, 2.0, 3.0], &[3], false);
        match t.add(a, b) {
            Err(Error::Shape { op, .. }) => assert_eq!(op, "add"),
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn concat_slice_roundtrip() {
        let mut t = tape();
        let a = t.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2], true);
        let b = t.leaf(vec![5.0, 6.0, 7.0, 8.0], &[2, 2], true);
        let c = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.data(c), &[1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]);
        let back = t.slice(c, 1, 2, 2).unwrap();
        assert_eq!(t.data(back), &[5.0, 6.0, 7.0, 8.0]);
        let s = t.sum(back);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap(), &[0.0; 4]);
        assert_eq!(g.get(b).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn row_interp_mixes_rows() {
        let mut t = tape();
        let x = t.leaf(vec![1.0, 10.0, 2.0, 20.0, 3.0, 30.0], &[3, 2], true);
        let plan = Arc::new(RowPlan::from_anchors(
            &[vec![(0, 0.5), (2, 0.5)], vec![], vec![(1, 2.0)]],
            3,
        ));
        let y = t.row_interp(x, plan).unwrap();
        assert_eq!(t.data(y), &[2.0, 20.0, 0.0, 0.0, 4.0, 40.0]);
        let s = t.sum(y);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.5, 0.5, 2.0, 2.0, 0.5, 0.5]);
    }

    #[test]
    fn cross3_matches_hand_computation() {
        let mut t = tape();
        let a = t.leaf(vec![1.0, 0.0, 0.0], &[1, 3], false);
        let b = t.leaf(vec![0.0, 1.0, 0.0], &[1, 3], false);
        let y = t.cross3(a, b).unwrap();
        assert_eq!(t.data(y), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn normalize_rows_unit_length_and_zero_guard() {
        let mut t = tape();
        let x = t.leaf(vec![3.0, 4.0, 0.0, 1e-12, 0.0, 0.0], &[2, 3], false);
        let y = t.normalize_rows(x, 1e-9).unwrap();
        let d = t.data(y);
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
        assert_eq!(&d[3..6], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn replicate_padding_keeps_constant_images_constant() {
        let mut t = tape();
        let x = t.leaf(vec![2.0; 16], &[4, 4, 1], false);
        let w = t.leaf(vec![0.1; 9], &[3, 3, 1, 1], false);
        let b = t.leaf(vec![0.5], &[1], false);
        let y = t.conv2d(x, w, b, PadMode::Replicate).unwrap();
        let expect = 2.0 * 0.1 * 9.0 + 0.5;
        for &v in t.data(y) {
            assert!((v - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn affine_rows_values_and_transpose_gradient() {
        let mut t = tape();
        let x = t.leaf(vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0], &[2, 3], true);
        // Row 0: 90-degree rotation about z plus a shift; row 1: scaling.
        let mats = Arc::new(vec![
            0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, //
            2.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 4.0,
        ]);
        let offs = Arc::new(vec![10.0, 0.0, 0.0, 0.0, 0.0, -1.0]);
        let y = t.affine_rows(x, mats, offs).unwrap();
        assert_eq!(t.data(y), &[8.0, 1.0, 3.0, -2.0, 1.5, -1.0]);
        // d(sum of weighted outputs)/dx = M^T w per row.
        let w = t.constant(vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0], &[2, 3]);
        let p = t.mul(y, w).unwrap();
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, -1.0, 0.0, 0.0, 3.0, 0.0]);
    }
}
