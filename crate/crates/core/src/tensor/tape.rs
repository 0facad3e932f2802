//! Recording tape. Every op appends one node holding the output value plus
//! enough bookkeeping to run the backward sweep. Node ids grow monotonically,
//! so the record order is already a topological order and backward is a single
//! reverse scan. Replaying a tape with the same inputs is bitwise
//! deterministic: all kernels are sequential with fixed accumulation order.

use super::kernels::{matmul_acc, matmul_nt_acc, matmul_tn_acc, strides};
use super::{Parameter, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    ScalarLeft,
    ScalarRight,
    /// Right operand is a vector matching the trailing dim of the rank-2 left.
    RowRight,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Matmul { a: Var, b: Var },
    /// Per-group matmul: equal-sized row blocks of `x` against slices of the
    /// rank-3 weight `w`.
    GroupMatmul { x: Var, w: Var },
    Add { a: Var, b: Var, bc: Bcast },
    Sub { a: Var, b: Var, bc: Bcast },
    Mul { a: Var, b: Var, bc: Bcast },
    Scale { x: Var, c: f64 },
    Sigmoid { x: Var },
    Tanh { x: Var },
    Relu { x: Var },
    Abs { x: Var },
    RowSoftmax { x: Var },
    MaskedRowSoftmax { x: Var },
    Concat { xs: Vec<Var>, axis: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    SegmentSum { x: Var, dst: Vec<usize> },
    ScaleRows { x: Var, w: Vec<f64> },
    Transpose2d { x: Var },
    PermuteAxes { x: Var, perm: Vec<usize> },
    Reshape { x: Var },
    SumAll { x: Var },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul { .. } => "matmul",
            Op::GroupMatmul { .. } => "group_matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Tanh { .. } => "tanh",
            Op::Relu { .. } => "relu",
            Op::Abs { .. } => "abs",
            Op::RowSoftmax { .. } => "row_softmax",
            Op::MaskedRowSoftmax { .. } => "masked_row_softmax",
            Op::Concat { .. } => "concat",
            Op::GatherRows { .. } => "gather_rows",
            Op::SegmentSum { .. } => "segment_sum",
            Op::ScaleRows { .. } => "scale_rows",
            Op::Transpose2d { .. } => "transpose2d",
            Op::PermuteAxes { .. } => "permute_axes",
            Op::Reshape { .. } => "reshape",
            Op::SumAll { .. } => "sum_all",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

struct ParamBind {
    var: Var,
    /// One name for a plain leaf; several for a stacked leaf, each owning an
    /// equal-sized chunk of the buffer.
    names: Vec<String>,
}

/// Ordered record of primitive applications plus their values and, after
/// [`Tape::backward`], their gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    binds: Vec<ParamBind>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop all nodes and bindings, keeping allocations where possible.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.binds.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient buffer of a node, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var, TensorError> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name() });
        }
        let id = self.nodes.len();
        self.nodes.push(Node { value, op });
        Ok(Var(id))
    }

    /// Place a tensor on the tape as a gradient-free input.
    pub fn input(&mut self, t: Tensor) -> Var {
        let mut t = t;
        t.requires_grad = false;
        let id = self.nodes.len();
        self.nodes.push(Node { value: t, op: Op::Leaf });
        Var(id)
    }

    /// Place a trainable parameter on the tape; its gradient can be collected
    /// by name after backward.
    pub fn leaf_param(&mut self, p: &Parameter) -> Var {
        let mut t = p.tensor.clone();
        t.requires_grad = true;
        t.grad = None;
        let id = self.nodes.len();
        self.nodes.push(Node { value: t, op: Op::Leaf });
        let var = Var(id);
        self.binds.push(ParamBind {
            var,
            names: vec![p.name.clone()],
        });
        var
    }

    /// Stack same-shaped parameters along a new leading axis into one leaf.
    /// Gradients are split back per name on collection.
    pub fn leaf_params_stacked(&mut self, ps: &[&Parameter]) -> Result<Var, TensorError> {
        if ps.is_empty() {
            return Err(TensorError::EmptyInput { op: "leaf_params_stacked" });
        }
        let base = ps[0].tensor.shape().to_vec();
        let mut data = Vec::with_capacity(ps.len() * ps[0].tensor.numel());
        let mut names = Vec::with_capacity(ps.len());
        for p in ps {
            if p.tensor.shape() != base.as_slice() {
                return Err(TensorError::ShapeMismatch {
                    op: "leaf_params_stacked",
                    left: base,
                    right: p.tensor.shape().to_vec(),
                });
            }
            data.extend_from_slice(p.tensor.data());
            names.push(p.name.clone());
        }
        let mut shape = vec![ps.len()];
        shape.extend_from_slice(&base);
        let mut t = Tensor::new(shape, data)?;
        t.requires_grad = true;
        let id = self.nodes.len();
        self.nodes.push(Node { value: t, op: Op::Leaf });
        let var = Var(id);
        self.binds.push(ParamBind { var, names });
        Ok(var)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    // ---- primitives ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (m, ka) = self.value(a).dims2()?;
        let (kb, n) = self.value(b).dims2()?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.value(a).shape().to_vec(),
                right: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), m, ka, n, &mut out);
        let mut t = Tensor::matrix(m, n, out)?;
        t.requires_grad = self.requires(a) || self.requires(b);
        self.push(t, Op::Matmul { a, b })
    }

    /// x is [g·r × k] with rows grouped by leading block, w is [g, k, n];
    /// block i of the output is x_i · w_i.
    pub fn group_matmul(&mut self, x: Var, w: Var) -> Result<Var, TensorError> {
        let (rows, k) = self.value(x).dims2()?;
        let ws = self.value(w).shape().to_vec();
        if ws.len() != 3 || ws[1] != k || rows % ws[0] != 0 {
            return Err(TensorError::ShapeMismatch {
                op: "group_matmul",
                left: self.value(x).shape().to_vec(),
                right: ws,
            });
        }
        let (g, n) = (ws[0], ws[2]);
        let r = rows / g;
        let mut out = vec![0.0; rows * n];
        for gi in 0..g {
            matmul_acc(
                &self.value(x).data()[gi * r * k..(gi + 1) * r * k],
                &self.value(w).data()[gi * k * n..(gi + 1) * k * n],
                r,
                k,
                n,
                &mut out[gi * r * n..(gi + 1) * r * n],
            );
        }
        let mut t = Tensor::matrix(rows, n, out)?;
        t.requires_grad = self.requires(x) || self.requires(w);
        self.push(t, Op::GroupMatmul { x, w })
    }

    fn bcast_of(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
    ) -> Result<(Bcast, Vec<usize>), TensorError> {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sa == sb {
            return Ok((Bcast::Same, sa));
        }
        if self.value(b).numel() == 1 {
            return Ok((Bcast::ScalarRight, sa));
        }
        if self.value(a).numel() == 1 {
            return Ok((Bcast::ScalarLeft, sb));
        }
        if sa.len() == 2 && sb.len() == 1 && sa[1] == sb[0] {
            return Ok((Bcast::RowRight, sa));
        }
        Err(TensorError::Broadcast { op, left: sa, right: sb })
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, Bcast), TensorError> {
        let (bc, shape) = self.bcast_of(op, a, b)?;
        let da = self.value(a).data();
        let db = self.value(b).data();
        let out: Vec<f64> = match bc {
            Bcast::Same => da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::ScalarRight => {
                let y = db[0];
                da.iter().map(|&x| f(x, y)).collect()
            }
            Bcast::ScalarLeft => {
                let x = da[0];
                db.iter().map(|&y| f(x, y)).collect()
            }
            Bcast::RowRight => {
                let n = db.len();
                da.iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, db[i % n]))
                    .collect()
            }
        };
        let mut t = Tensor::new(shape, out)?;
        t.requires_grad = self.requires(a) || self.requires(b);
        Ok((t, bc))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (t, bc) = self.binary("add", a, b, |x, y| x + y)?;
        self.push(t, Op::Add { a, b, bc })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (t, bc) = self.binary("sub", a, b, |x, y| x - y)?;
        self.push(t, Op::Sub { a, b, bc })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (t, bc) = self.binary("mul", a, b, |x, y| x * y)?;
        self.push(t, Op::Mul { a, b, bc })
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        let v = self.value(x);
        let mut t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| e * c).collect())?;
        t.requires_grad = self.requires(x);
        self.push(t, Op::Scale { x, c })
    }

    fn unary(
        &mut self,
        x: Var,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let v = self.value(x);
        let mut t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| f(e)).collect())?;
        t.requires_grad = self.requires(x);
        self.push(t, op)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, |e| 1.0 / (1.0 + (-e).exp()), Op::Sigmoid { x })
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, f64::tanh, Op::Tanh { x })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, |e| e.max(0.0), Op::Relu { x })
    }

    pub fn abs(&mut self, x: Var) -> Result<Var, TensorError> {
        self.unary(x, f64::abs, Op::Abs { x })
    }

    /// Softmax over the trailing axis of a rank >= 1 tensor.
    pub fn row_softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = self.value(x);
        if v.rank() == 0 || v.numel() == 0 {
            return Err(TensorError::EmptyInput { op: "row_softmax" });
        }
        let n = *v.shape().last().expect("rank checked");
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for e in row.iter_mut() {
                *e = (*e - mx).exp();
                sum += *e;
            }
            for e in row.iter_mut() {
                *e /= sum;
            }
        }
        let mut t = Tensor::new(v.shape().to_vec(), out)?;
        t.requires_grad = self.requires(x);
        self.push(t, Op::RowSoftmax { x })
    }

    /// Row softmax of a rank-2 tensor with some entries excluded; excluded
    /// entries get probability exactly 0. Errors on a fully masked row.
    pub fn masked_row_softmax(&mut self, x: Var, masked: &[bool]) -> Result<Var, TensorError> {
        let (m, n) = self.value(x).dims2()?;
        if masked.len() != m * n {
            return Err(TensorError::ShapeMismatch {
                op: "masked_row_softmax",
                left: vec![m, n],
                right: vec![masked.len()],
            });
        }
        let v = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &v.data()[i * n..(i + 1) * n];
            let mrow = &masked[i * n..(i + 1) * n];
            let mut mx = f64::NEG_INFINITY;
            for j in 0..n {
                if !mrow[j] {
                    mx = mx.max(row[j]);
                }
            }
            if mx == f64::NEG_INFINITY {
                return Err(TensorError::EmptyInput { op: "masked_row_softmax" });
            }
            let mut sum = 0.0;
            for j in 0..n {
                if !mrow[j] {
                    let e = (row[j] - mx).exp();
                    out[i * n + j] = e;
                    sum += e;
                }
            }
            for j in 0..n {
                out[i * n + j] /= sum;
            }
        }
        let mut t = Tensor::matrix(m, n, out)?;
        t.requires_grad = self.requires(x);
        self.push(t, Op::MaskedRowSoftmax { x })
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, TensorError> {
        if xs.is_empty() {
            return Err(TensorError::EmptyInput { op: "concat" });
        }
        let first = self.value(xs[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(TensorError::BadAxis { op: "concat", axis, rank: first.len() });
        }
        let mut axis_total = 0usize;
        for &v in xs {
            let s = self.value(v).shape();
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: first,
                    right: s.to_vec(),
                });
            }
            axis_total += s[axis];
        }
        let inner: usize = first[axis + 1..].iter().product();
        let outer: usize = first[..axis].iter().product();
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let mut out = Vec::with_capacity(outer * axis_total * inner);
        for o in 0..outer {
            for &v in xs {
                let t = self.value(v);
                let span = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * span..(o + 1) * span]);
            }
        }
        let mut t = Tensor::new(shape, out)?;
        t.requires_grad = xs.iter().any(|&v| self.requires(v));
        self.push(t, Op::Concat { xs: xs.to_vec(), axis })
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let (rows, d) = self.value(x).dims2()?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(TensorError::IndexOutOfRange { op: "gather_rows", index: bad, bound: rows });
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            out.extend_from_slice(&v.data()[i * d..(i + 1) * d]);
        }
        let mut t = Tensor::matrix(idx.len(), d, out)?;
        t.requires_grad = self.requires(x);
        self.push(t, Op::GatherRows { x, idx: idx.to_vec() })
    }

    /// Sum rows of x into `segments` output rows according to `dst`;
    /// accumulation runs in row order, making results order-reproducible.
    pub fn segment_sum(
        &mut self,
        x: Var,
        dst: &[usize],
        segments: usize,
    ) -> Result<Var, TensorError> {
        let (rows, d) = self.value(x).dims2()?;
        if dst.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "segment_sum",
                left: vec![rows, d],
                right: vec![dst.len()],
            });
        }
        if let Some(&bad) = dst.iter().find(|&&i| i >= segments) {
            return Err(TensorError::IndexOutOfRange {
                op: "segment_sum",
                index: bad,
                bound: segments,
            });
        }
        let v = self.value(x);
        let mut out = vec![0.0; segments * d];
        for (e, &t) in dst.iter().enumerate() {
            let src = &v.data()[e * d..(e + 1) * d];
            let dst_row = &mut out[t * d..(t + 1) * d];
            for j in 0..d {
                dst_row[j] += src[j];
            }
        }
        let mut t = Tensor::matrix(segments, d, out)?;
        t.requires_grad = self.requires(x);
        self.push(t, Op::SegmentSum { x, dst: dst.to_vec() })
    }

    /// Scale each row of a rank-2 tensor by a fixed (non-differentiated) weight.
    pub fn scale_rows(&mut self, x: Var, w: &[f64]) -> Result<Var, TensorError> {
        let (rows, d) = self.value(x).dims2()?;
        if w.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "scale_rows",
                left: vec![rows, d],
                right: vec![w.len()],
            });
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(rows * d);
        for (e, row) in v.data().chunks(d).enumerate() {
            out.extend(row.iter().map(|&val| val * w[e]));
        }
        let mut t = Tensor::matrix(rows, d, out)?;
        t.requires_grad = self.requires(x);
        self.push(t, Op::ScaleRows { x, w: w.to_vec() })
    }

    pub fn transpose2d(&mut self, x: Var) -> Result<Var, TensorError> {
        let (m, n) = self.value(x).dims2()?;
        let v = self.value(x);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v.data()[i * n + j];
            }
        }
        let mut t = Tensor::matrix(n, m, out)?;
        t.requires_grad = self.requires(x);
        self.push(t, Op::Transpose2d { x })
    }

    pub fn permute_axes(&mut self, x: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let shape = self.value(x).shape().to_vec();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::BadAxis {
                op: "permute_axes",
                axis: perm.len(),
                rank,
            });
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let out = permute_data(self.value(x).data(), &shape, perm);
        let mut t = Tensor::new(out_shape, out)?;
        t.requires_grad = self.requires(x);
        self.push(t, Op::PermuteAxes { x, perm: perm.to_vec() })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let v = self.value(x);
        let want: usize = shape.iter().product();
        if want != v.numel() {
            return Err(TensorError::ShapeDataMismatch {
                shape,
                expected: want,
                got: v.numel(),
            });
        }
        let mut t = Tensor::new(shape, v.data().to_vec())?;
        t.requires_grad = self.requires(x);
        self.push(t, Op::Reshape { x })
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var, TensorError> {
        let s: f64 = self.value(x).data().iter().sum();
        let mut t = Tensor::scalar(s);
        t.requires_grad = self.requires(x);
        self.push(t, Op::SumAll { x })
    }

    // ---- backward ----

    /// Run the reverse sweep from a scalar loss. Fills gradient buffers for
    /// every node on the path; leaves off the path read back as zero when
    /// collected. The loss value is checked finite in every build profile.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NonScalarLoss { shape: lt.shape().to_vec() });
        }
        if !lt.is_finite() {
            return Err(TensorError::NonFinite { op: "loss" });
        }
        self.grads.clear();
        self.grads.resize(self.nodes.len(), None);
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() || !self.nodes[i].value.requires_grad {
                continue;
            }
            let gy = self.grads[i].take().expect("checked above");
            self.step_back(i, &gy);
            self.grads[i] = Some(gy);
        }
        Ok(())
    }

    fn grad_buf(&mut self, v: Var) -> &mut Vec<f64> {
        let n = self.nodes[v.0].value.numel();
        self.grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    fn step_back(&mut self, i: usize, gy: &[f64]) {
        let needs = |s: &Self, v: Var| s.nodes[v.0].value.requires_grad;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (a, b) = (*a, *b);
                let (m, k) = self.nodes[a.0].value.dims2().expect("recorded as 2-d");
                let n = self.nodes[i].value.shape()[1];
                if needs(self, a) {
                    let bd = self.nodes[b.0].value.data().to_vec();
                    matmul_nt_acc(gy, &bd, m, k, n, self.grad_buf(a));
                }
                if needs(self, b) {
                    let ad = self.nodes[a.0].value.data().to_vec();
                    matmul_tn_acc(&ad, gy, m, k, n, self.grad_buf(b));
                }
            }
            Op::GroupMatmul { x, w } => {
                let (x, w) = (*x, *w);
                let (rows, k) = self.nodes[x.0].value.dims2().expect("recorded as 2-d");
                let ws = self.nodes[w.0].value.shape().to_vec();
                let (g, n) = (ws[0], ws[2]);
                let r = rows / g;
                if needs(self, x) {
                    let wd = self.nodes[w.0].value.data().to_vec();
                    let gx = self.grad_buf(x);
                    for gi in 0..g {
                        matmul_nt_acc(
                            &gy[gi * r * n..(gi + 1) * r * n],
                            &wd[gi * k * n..(gi + 1) * k * n],
                            r,
                            k,
                            n,
                            &mut gx[gi * r * k..(gi + 1) * r * k],
                        );
                    }
                }
                if needs(self, w) {
                    let xd = self.nodes[x.0].value.data().to_vec();
                    let gw = self.grad_buf(w);
                    for gi in 0..g {
                        matmul_tn_acc(
                            &xd[gi * r * k..(gi + 1) * r * k],
                            &gy[gi * r * n..(gi + 1) * r * n],
                            r,
                            k,
                            n,
                            &mut gw[gi * k * n..(gi + 1) * k * n],
                        );
                    }
                }
            }
            Op::Add { a, b, bc } => {
                let (a, b, bc) = (*a, *b, *bc);
                if needs(self, a) {
                    accumulate_bcast_left(self.grad_buf(a), gy, bc, 1.0);
                }
                if needs(self, b) {
                    accumulate_bcast_right(self.grad_buf(b), gy, bc, 1.0);
                }
            }
            Op::Sub { a, b, bc } => {
                let (a, b, bc) = (*a, *b, *bc);
                if needs(self, a) {
                    accumulate_bcast_left(self.grad_buf(a), gy, bc, 1.0);
                }
                if needs(self, b) {
                    accumulate_bcast_right(self.grad_buf(b), gy, bc, -1.0);
                }
            }
            Op::Mul { a, b, bc } => {
                let (a, b, bc) = (*a, *b, *bc);
                if needs(self, a) {
                    let bd = self.nodes[b.0].value.data().to_vec();
                    let scaled = mul_bcast_by_right(gy, &bd, bc);
                    accumulate_bcast_left(self.grad_buf(a), &scaled, bc, 1.0);
                }
                if needs(self, b) {
                    let ad = self.nodes[a.0].value.data().to_vec();
                    let scaled = mul_bcast_by_left(gy, &ad, bc);
                    accumulate_bcast_right(self.grad_buf(b), &scaled, bc, 1.0);
                }
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                if needs(self, x) {
                    let gx = self.grad_buf(x);
                    for (g, &d) in gx.iter_mut().zip(gy) {
                        *g += c * d;
                    }
                }
            }
            Op::Sigmoid { x } => {
                let x = *x;
                if needs(self, x) {
                    let y = self.nodes[i].value.data().to_vec();
                    let gx = self.grad_buf(x);
                    for j in 0..y.len() {
                        gx[j] += gy[j] * y[j] * (1.0 - y[j]);
                    }
                }
            }
            Op::Tanh { x } => {
                let x = *x;
                if needs(self, x) {
                    let y = self.nodes[i].value.data().to_vec();
                    let gx = self.grad_buf(x);
                    for j in 0..y.len() {
                        gx[j] += gy[j] * (1.0 - y[j] * y[j]);
                    }
                }
            }
            Op::Relu { x } => {
                let x = *x;
                if needs(self, x) {
                    let xd = self.nodes[x.0].value.data().to_vec();
                    let gx = self.grad_buf(x);
                    for j in 0..xd.len() {
                        if xd[j] > 0.0 {
                            gx[j] += gy[j];
                        }
                    }
                }
            }
            Op::Abs { x } => {
                let x = *x;
                if needs(self, x) {
                    let xd = self.nodes[x.0].value.data().to_vec();
                    let gx = self.grad_buf(x);
                    for j in 0..xd.len() {
                        gx[j] += gy[j] * sign(xd[j]);
                    }
                }
            }
            Op::RowSoftmax { x } => {
                let x = *x;
                if needs(self, x) {
                    let y = self.nodes[i].value.data().to_vec();
                    let n = *self.nodes[i].value.shape().last().expect("rank >= 1");
                    let gx = self.grad_buf(x);
                    for (row, (yr, gr)) in y.chunks(n).zip(gy.chunks(n)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                        let out = &mut gx[row * n..(row + 1) * n];
                        for j in 0..n {
                            out[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::MaskedRowSoftmax { x } => {
                let x = *x;
                if needs(self, x) {
                    let y = self.nodes[i].value.data().to_vec();
                    let n = self.nodes[i].value.shape()[1];
                    let gx = self.grad_buf(x);
                    for (row, (yr, gr)) in y.chunks(n).zip(gy.chunks(n)).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                        let out = &mut gx[row * n..(row + 1) * n];
                        for j in 0..n {
                            out[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Concat { xs, axis } => {
                let xs = xs.clone();
                let axis = *axis;
                let out_shape = self.nodes[i].value.shape().to_vec();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let outer: usize = out_shape[..axis].iter().product();
                let spans: Vec<usize> = xs
                    .iter()
                    .map(|&v| self.nodes[v.0].value.shape()[axis] * inner)
                    .collect();
                let total_span: usize = spans.iter().sum();
                for (xi, &v) in xs.iter().enumerate() {
                    if !needs(self, v) {
                        continue;
                    }
                    let before: usize = spans[..xi].iter().sum();
                    let span = spans[xi];
                    let gx = self.grad_buf(v);
                    for o in 0..outer {
                        let src = &gy[o * total_span + before..o * total_span + before + span];
                        let dst = &mut gx[o * span..(o + 1) * span];
                        for j in 0..span {
                            dst[j] += src[j];
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let x = *x;
                let idx = idx.clone();
                if needs(self, x) {
                    let d = self.nodes[i].value.shape()[1];
                    let gx = self.grad_buf(x);
                    for (e, &row) in idx.iter().enumerate() {
                        let src = &gy[e * d..(e + 1) * d];
                        let dst = &mut gx[row * d..(row + 1) * d];
                        for j in 0..d {
                            dst[j] += src[j];
                        }
                    }
                }
            }
            Op::SegmentSum { x, dst } => {
                let x = *x;
                let dst = dst.clone();
                if needs(self, x) {
                    let d = self.nodes[i].value.shape()[1];
                    let gx = self.grad_buf(x);
                    for (e, &t) in dst.iter().enumerate() {
                        let src = &gy[t * d..(t + 1) * d];
                        let out = &mut gx[e * d..(e + 1) * d];
                        for j in 0..d {
                            out[j] += src[j];
                        }
                    }
                }
            }
            Op::ScaleRows { x, w } => {
                let x = *x;
                let w = w.clone();
                if needs(self, x) {
                    let d = self.nodes[i].value.shape()[1];
                    let gx = self.grad_buf(x);
                    for (e, &we) in w.iter().enumerate() {
                        let src = &gy[e * d..(e + 1) * d];
                        let out = &mut gx[e * d..(e + 1) * d];
                        for j in 0..d {
                            out[j] += we * src[j];
                        }
                    }
                }
            }
            Op::Transpose2d { x } => {
                let x = *x;
                if needs(self, x) {
                    let (n, m) = self.nodes[i].value.dims2().expect("recorded as 2-d");
                    let gx = self.grad_buf(x);
                    for r in 0..n {
                        for c in 0..m {
                            gx[c * n + r] += gy[r * m + c];
                        }
                    }
                }
            }
            Op::PermuteAxes { x, perm } => {
                let x = *x;
                let perm = perm.clone();
                if needs(self, x) {
                    let out_shape = self.nodes[i].value.shape().to_vec();
                    let mut inv = vec![0usize; perm.len()];
                    for (a, &p) in perm.iter().enumerate() {
                        inv[p] = a;
                    }
                    let back = permute_data(gy, &out_shape, &inv);
                    let gx = self.grad_buf(x);
                    for (g, b) in gx.iter_mut().zip(back) {
                        *g += b;
                    }
                }
            }
            Op::Reshape { x } => {
                let x = *x;
                if needs(self, x) {
                    let gx = self.grad_buf(x);
                    for (g, &d) in gx.iter_mut().zip(gy) {
                        *g += d;
                    }
                }
            }
            Op::SumAll { x } => {
                let x = *x;
                if needs(self, x) {
                    let g0 = gy[0];
                    let gx = self.grad_buf(x);
                    for g in gx.iter_mut() {
                        *g += g0;
                    }
                }
            }
        }
    }

    /// Collect gradients for every bound parameter, summed across bindings;
    /// parameters the backward sweep never reached get zeros.
    pub fn take_param_grads(&mut self) -> Vec<(String, Vec<f64>)> {
        let mut out: Vec<(String, Vec<f64>)> = Vec::new();
        for bind in &self.binds {
            let numel = self.nodes[bind.var.0].value.numel();
            let buf = self
                .grads
                .get(bind.var.0)
                .and_then(|g| g.clone())
                .unwrap_or_else(|| vec![0.0; numel]);
            let chunk = numel / bind.names.len();
            for (ni, name) in bind.names.iter().enumerate() {
                let slice = &buf[ni * chunk..(ni + 1) * chunk];
                match out.iter_mut().find(|(n, _)| n == name) {
                    Some((_, acc)) => {
                        for (a, &s) in acc.iter_mut().zip(slice) {
                            *a += s;
                        }
                    }
                    None => out.push((name.clone(), slice.to_vec())),
                }
            }
        }
        out
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Accumulate `gy` (already elementwise-scaled as needed) into the left
/// operand's gradient, reducing over broadcast dims.
fn accumulate_bcast_left(gx: &mut [f64], gy: &[f64], bc: Bcast, s: f64) {
    match bc {
        Bcast::Same | Bcast::ScalarRight | Bcast::RowRight => {
            for (g, &d) in gx.iter_mut().zip(gy) {
                *g += s * d;
            }
        }
        Bcast::ScalarLeft => {
            gx[0] += s * gy.iter().sum::<f64>();
        }
    }
}

fn accumulate_bcast_right(gx: &mut [f64], gy: &[f64], bc: Bcast, s: f64) {
    match bc {
        Bcast::Same | Bcast::ScalarLeft => {
            for (g, &d) in gx.iter_mut().zip(gy) {
                *g += s * d;
            }
        }
        Bcast::ScalarRight => {
            gx[0] += s * gy.iter().sum::<f64>();
        }
        Bcast::RowRight => {
            let n = gx.len();
            for (j, &d) in gy.iter().enumerate() {
                gx[j % n] += s * d;
            }
        }
    }
}

/// gy ⊙ b, expanding b across the broadcast (used for d/da of a*b).
fn mul_bcast_by_right(gy: &[f64], b: &[f64], bc: Bcast) -> Vec<f64> {
    match bc {
        Bcast::Same | Bcast::ScalarLeft => gy.iter().zip(b).map(|(&g, &v)| g * v).collect(),
        Bcast::ScalarRight => gy.iter().map(|&g| g * b[0]).collect(),
        Bcast::RowRight => {
            let n = b.len();
            gy.iter().enumerate().map(|(j, &g)| g * b[j % n]).collect()
        }
    }
}

/// gy ⊙ a, expanded to the output shape (used for d/db of a*b).
fn mul_bcast_by_left(gy: &[f64], a: &[f64], bc: Bcast) -> Vec<f64> {
    match bc {
        Bcast::Same | Bcast::ScalarRight | Bcast::RowRight => {
            gy.iter().zip(a).map(|(&g, &v)| g * v).collect()
        }
        Bcast::ScalarLeft => gy.iter().map(|&g| g * a[0]).collect(),
    }
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let out_strides_for_in: Vec<usize> = {
        // stride in the output for each input axis
        let out_strides = strides(&out_shape);
        let mut v = vec![0usize; rank];
        for (out_axis, &in_axis) in perm.iter().enumerate() {
            v[in_axis] = out_strides[out_axis];
        }
        v
    };
    let mut out = vec![0.0; data.len()];
    let mut idx = vec![0usize; rank];
    for (lin, &val) in data.iter().enumerate() {
        let mut rem = lin;
        let mut out_lin = 0usize;
        for a in 0..rank {
            idx[a] = rem / in_strides[a];
            rem %= in_strides[a];
            out_lin += idx[a] * out_strides_for_in[a];
        }
        out[out_lin] = val;
    }
    out
}
