//! Wengert-list reverse-mode autodiff over [`NdArray`] values.
//!
//! Ops are evaluated eagerly as the graph is built, so tape order is a
//! topological order and the backward pass is a single reverse scan that
//! visits each reachable node exactly once. Parameter leaves flush their
//! gradients into the owning [`ParamStore`]; repeated backward passes
//! accumulate there until `zero_grads` is called.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::array::{matmul, matmul_nt_acc, matmul_tn_acc, NdArray};
use super::fft;
use super::optim::{ParamId, ParamStore};
use crate::error::{invalid, CoreError, Result};
use crate::fmath;

/// Denominators below this magnitude are rejected (or zeroed by the
/// guarded variant), and sqrt gradients are clamped to zero below it.
pub const DIV_GUARD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Const,
    Param,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddBias { axis: usize },
    MulBias { axis: usize },
    Matmul,
    Tanh,
    Sin,
    Cos,
    Sqrt,
    Atan2,
    Div,
    GuardedDiv,
    Conv1d { kernel: usize },
    DftRe,
    DftIm,
    Sum { axis: Option<usize> },
    Mean { axis: Option<usize> },
    Concat { axis: usize },
    SelectRow { row: usize },
    Reshape,
    WrapHalf,
    Softmax,
    LogSoftmax,
    CumsumTime,
}

#[derive(Debug)]
struct Node {
    value: NdArray,
    grad: NdArray,
    op: Op,
    parents: Vec<NodeId>,
    needs_grad: bool,
    param: Option<ParamId>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &NdArray {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &NdArray {
        &self.nodes[id.0].grad
    }

    pub fn scalar_value(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data()[0]
    }

    fn push(&mut self, value: NdArray, op: Op, parents: Vec<NodeId>, param: Option<ParamId>) -> NodeId {
        let needs_grad =
            param.is_some() || parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let grad = NdArray::zeros(value.shape());
        self.nodes.push(Node {
            value,
            grad,
            op,
            parents,
            needs_grad,
            param,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        op_name: &'static str,
        value: NdArray,
        op: Op,
        parents: Vec<NodeId>,
    ) -> Result<NodeId> {
        value.require_finite(op_name)?;
        Ok(self.push(value, op, parents, None))
    }

    // ── Leaves ──────────────────────────────────────────────────────────

    pub fn constant(&mut self, value: NdArray) -> Result<NodeId> {
        value.require_finite("constant")?;
        Ok(self.push(value, Op::Const, vec![], None))
    }

    pub fn constant_scalar(&mut self, v: f64) -> Result<NodeId> {
        self.constant(NdArray::scalar(v))
    }

    /// Leaf holding a snapshot of a stored parameter; backward flushes the
    /// leaf gradient back into the store.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(store.value(id).clone(), Op::Param, vec![], Some(id))
    }

    // ── Elementwise ─────────────────────────────────────────────────────

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
        if sa != sb {
            return Err(CoreError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("add", a, b)?;
        let value = self.zip(a, b, |x, y| x + y);
        self.push_checked("add", value, Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("sub", a, b)?;
        let value = self.zip(a, b, |x, y| x - y);
        self.push_checked("sub", value, Op::Sub, vec![a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("mul", a, b)?;
        let value = self.zip(a, b, |x, y| x * y);
        self.push_checked("mul", value, Op::Mul, vec![a, b])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let value = self.map(a, |x| c * x);
        self.push_checked("scale", value, Op::Scale(c), vec![a])
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("div", a, b)?;
        if self.nodes[b.0].value.data().iter().any(|v| v.abs() < DIV_GUARD) {
            return Err(CoreError::DivisionByZero { op: "div" });
        }
        let value = self.zip(a, b, |x, y| x / y);
        self.push_checked("div", value, Op::Div, vec![a, b])
    }

    /// Division that outputs 0 (with zero gradient) wherever the
    /// denominator magnitude is below [`DIV_GUARD`].
    pub fn guarded_div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape("guarded_div", a, b)?;
        let value = self.zip(a, b, |x, y| if y.abs() < DIV_GUARD { 0.0 } else { x / y });
        self.push_checked("guarded_div", value, Op::GuardedDiv, vec![a, b])
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.map(a, fmath::tanh);
        self.push_checked("tanh", value, Op::Tanh, vec![a])
    }

    pub fn sin(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.map(a, fmath::sin);
        self.push_checked("sin", value, Op::Sin, vec![a])
    }

    pub fn cos(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.map(a, fmath::cos);
        self.push_checked("cos", value, Op::Cos, vec![a])
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.map(a, fmath::sqrt);
        self.push_checked("sqrt", value, Op::Sqrt, vec![a])
    }

    /// Elementwise atan2(y, x) in [−π, π]. (0, 0) is rejected, naming the
    /// offending element index.
    pub fn atan2(&mut self, y: NodeId, x: NodeId) -> Result<NodeId> {
        self.same_shape("atan2", y, x)?;
        let yv = self.nodes[y.0].value.data();
        let xv = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(yv.len());
        for (i, (&a, &b)) in yv.iter().zip(xv).enumerate() {
            if a == 0.0 && b == 0.0 {
                return Err(CoreError::AtanOrigin { channel: i });
            }
            out.push(fmath::atan2(a, b));
        }
        let shape = self.nodes[y.0].value.shape().to_vec();
        let value = NdArray::from_vec(shape, out)?;
        self.push_checked("atan2", value, Op::Atan2, vec![y, x])
    }

    /// Shift values in [−0.5, 0.5] into the half-open [−0.5, 0.5): exactly
    /// 0.5 wraps to −0.5. Gradient passes through unchanged.
    pub fn wrap_half(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.map(a, |x| if x >= 0.5 { x - 1.0 } else { x });
        self.push_checked("wrap_half", value, Op::WrapHalf, vec![a])
    }

    // ── Broadcast bias ──────────────────────────────────────────────────

    fn bias_len(&self, op: &'static str, a: NodeId, b: NodeId, axis: usize) -> Result<()> {
        let m = &self.nodes[a.0].value;
        let expect = if axis == 0 { m.rows() } else { m.cols() };
        if axis > 1 || self.nodes[b.0].value.len() != expect {
            return Err(CoreError::ShapeMismatch {
                op,
                lhs: m.shape().to_vec(),
                rhs: self.nodes[b.0].value.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// axis 0: out[i,j] = a[i,j] + b[i]; axis 1: out[i,j] = a[i,j] + b[j].
    pub fn add_bias(&mut self, a: NodeId, b: NodeId, axis: usize) -> Result<NodeId> {
        self.bias_len("add_bias", a, b, axis)?;
        let value = self.bias_apply(a, b, axis, |x, y| x + y);
        self.push_checked("add_bias", value, Op::AddBias { axis }, vec![a, b])
    }

    /// axis 0: out[i,j] = a[i,j] · b[i]; axis 1: out[i,j] = a[i,j] · b[j].
    pub fn mul_bias(&mut self, a: NodeId, b: NodeId, axis: usize) -> Result<NodeId> {
        self.bias_len("mul_bias", a, b, axis)?;
        let value = self.bias_apply(a, b, axis, |x, y| x * y);
        self.push_checked("mul_bias", value, Op::MulBias { axis }, vec![a, b])
    }

    // ── Linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = matmul(&self.nodes[a.0].value, &self.nodes[b.0].value, "matmul")?;
        self.push_checked("matmul", value, Op::Matmul, vec![a, b])
    }

    /// 1D convolution over the time axis, stride 1, "same" zero padding.
    /// Input [C_in, T], weight [C_out, C_in, k] with odd k.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        if xv.shape().len() != 2 || wv.shape().len() != 3 || wv.shape()[1] != xv.shape()[0] {
            return Err(CoreError::ShapeMismatch {
                op: "conv1d",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let kernel = wv.shape()[2];
        if kernel % 2 == 0 {
            return Err(invalid("conv1d", format!("kernel {kernel} must be odd")));
        }
        let (c_in, t) = (xv.shape()[0], xv.shape()[1]);
        let c_out = wv.shape()[0];
        let pad = kernel / 2;
        let mut out = NdArray::zeros(&[c_out, t]);
        conv1d_forward(
            out.data_mut(),
            xv.data(),
            wv.data(),
            c_out,
            c_in,
            t,
            kernel,
            pad,
        );
        self.push_checked("conv1d", out, Op::Conv1d { kernel }, vec![x, w])
    }

    // ── Spectral ────────────────────────────────────────────────────────

    /// Real parts of the row-wise DFT: [K, T] → [K, ⌊T/2⌋+1].
    pub fn dft_re(&mut self, h: NodeId) -> Result<NodeId> {
        let (k, t) = self.dft_dims(h)?;
        let (re, _) = fft::real_dft_rows(self.nodes[h.0].value.data(), k, t)?;
        let value = NdArray::from_vec(vec![k, t / 2 + 1], re)?;
        self.push_checked("dft_re", value, Op::DftRe, vec![h])
    }

    /// Imaginary parts of the row-wise DFT: [K, T] → [K, ⌊T/2⌋+1].
    pub fn dft_im(&mut self, h: NodeId) -> Result<NodeId> {
        let (k, t) = self.dft_dims(h)?;
        let (_, im) = fft::real_dft_rows(self.nodes[h.0].value.data(), k, t)?;
        let value = NdArray::from_vec(vec![k, t / 2 + 1], im)?;
        self.push_checked("dft_im", value, Op::DftIm, vec![h])
    }

    fn dft_dims(&self, h: NodeId) -> Result<(usize, usize)> {
        let v = &self.nodes[h.0].value;
        if v.shape().len() != 2 {
            return Err(invalid("real_dft", format!("want [K, T], got {:?}", v.shape())));
        }
        if v.shape()[1] < 2 {
            return Err(invalid("real_dft", format!("signal length {} < 2", v.shape()[1])));
        }
        Ok((v.shape()[0], v.shape()[1]))
    }

    // ── Reductions, shape ops ───────────────────────────────────────────

    pub fn sum(&mut self, a: NodeId, axis: Option<usize>) -> Result<NodeId> {
        let value = self.reduce(a, axis, false)?;
        self.push_checked("sum", value, Op::Sum { axis }, vec![a])
    }

    pub fn mean(&mut self, a: NodeId, axis: Option<usize>) -> Result<NodeId> {
        let value = self.reduce(a, axis, true)?;
        self.push_checked("mean", value, Op::Mean { axis }, vec![a])
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() || axis > 1 {
            return Err(invalid("concat", "needs at least one part and axis 0 or 1"));
        }
        let first = self.nodes[parts[0].0].value.shape().to_vec();
        if first.len() != 2 {
            return Err(invalid("concat", format!("want rank-2 parts, got {first:?}")));
        }
        let (mut rows, mut cols) = (first[0], first[1]);
        for &p in &parts[1..] {
            let s = self.nodes[p.0].value.shape();
            let ok = s.len() == 2 && if axis == 0 { s[1] == cols } else { s[0] == rows };
            if !ok {
                return Err(CoreError::ShapeMismatch {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            if axis == 0 {
                rows += s[0];
            } else {
                cols += s[1];
            }
        }
        let mut out = NdArray::zeros(&[rows, cols]);
        if axis == 0 {
            let mut offset = 0;
            for &p in parts {
                let v = &self.nodes[p.0].value;
                out.data_mut()[offset..offset + v.len()].copy_from_slice(v.data());
                offset += v.len();
            }
        } else {
            let mut col_off = 0;
            for &p in parts {
                let v = &self.nodes[p.0].value;
                let pc = v.cols();
                for r in 0..rows {
                    let dst = r * cols + col_off;
                    out.data_mut()[dst..dst + pc].copy_from_slice(v.row(r));
                }
                col_off += pc;
            }
        }
        self.push_checked("concat", out, Op::Concat { axis }, parts.to_vec())
    }

    pub fn select_row(&mut self, a: NodeId, row: usize) -> Result<NodeId> {
        let v = &self.nodes[a.0].value;
        if v.shape().len() != 2 || row >= v.rows() {
            return Err(invalid(
                "select_row",
                format!("row {row} out of range for shape {:?}", v.shape()),
            ));
        }
        let value = NdArray::from_vec(vec![1, v.cols()], v.row(row).to_vec())?;
        self.push_checked("select_row", value, Op::SelectRow { row }, vec![a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = &self.nodes[a.0].value;
        if shape.iter().product::<usize>() != v.len() {
            return Err(invalid(
                "reshape",
                format!("cannot reshape {:?} into {shape:?}", v.shape()),
            ));
        }
        let value = NdArray::from_vec(shape.to_vec(), v.data().to_vec())?;
        self.push_checked("reshape", value, Op::Reshape, vec![a])
    }

    /// Row-wise prefix sums along the time (last) axis.
    pub fn cumsum_time(&mut self, a: NodeId) -> Result<NodeId> {
        let v = &self.nodes[a.0].value;
        if v.shape().len() != 2 {
            return Err(invalid("cumsum_time", format!("want rank 2, got {:?}", v.shape())));
        }
        let (rows, cols) = (v.rows(), v.cols());
        let mut out = v.clone();
        for r in 0..rows {
            let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
            for j in 1..cols {
                row[j] += row[j - 1];
            }
        }
        self.push_checked("cumsum_time", out, Op::CumsumTime, vec![a])
    }

    // ── Probability heads ───────────────────────────────────────────────

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.rowwise_softmax(a, false)?;
        self.push_checked("softmax", value, Op::Softmax, vec![a])
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let value = self.rowwise_softmax(a, true)?;
        self.push_checked("log_softmax", value, Op::LogSoftmax, vec![a])
    }

    fn rowwise_softmax(&self, a: NodeId, log: bool) -> Result<NdArray> {
        let v = &self.nodes[a.0].value;
        if v.shape().is_empty() {
            return Err(invalid("softmax", "scalar input"));
        }
        let cols = v.cols();
        let rows = v.len() / cols;
        let mut out = v.clone();
        for r in 0..rows {
            let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for x in row.iter_mut() {
                *x -= max;
                denom += fmath::exp(*x);
            }
            let log_denom = fmath::ln(denom);
            for x in row.iter_mut() {
                *x = if log { *x - log_denom } else { fmath::exp(*x - log_denom) };
            }
        }
        Ok(out)
    }

    // ── Internals ───────────────────────────────────────────────────────

    fn map(&self, a: NodeId, f: impl Fn(f64) -> f64) -> NdArray {
        let v = &self.nodes[a.0].value;
        let data = v.data().iter().map(|&x| f(x)).collect();
        NdArray::from_vec(v.shape().to_vec(), data).expect("same length")
    }

    fn zip(&self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> NdArray {
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        NdArray::from_vec(va.shape().to_vec(), data).expect("same length")
    }

    fn bias_apply(&self, a: NodeId, b: NodeId, axis: usize, f: impl Fn(f64, f64) -> f64) -> NdArray {
        let m = &self.nodes[a.0].value;
        let bias = self.nodes[b.0].value.data();
        let (rows, cols) = (m.rows(), m.cols());
        let mut out = m.clone();
        for r in 0..rows {
            let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
            if axis == 0 {
                let bv = bias[r];
                for x in row.iter_mut() {
                    *x = f(*x, bv);
                }
            } else {
                for (x, &bv) in row.iter_mut().zip(bias) {
                    *x = f(*x, bv);
                }
            }
        }
        out
    }

    fn reduce(&self, a: NodeId, axis: Option<usize>, mean: bool) -> Result<NdArray> {
        let v = &self.nodes[a.0].value;
        match axis {
            None => {
                let n = v.len().max(1) as f64;
                let total: f64 = v.data().iter().sum();
                Ok(NdArray::scalar(if mean { total / n } else { total }))
            }
            Some(ax) => {
                if v.shape().len() > 2 || ax >= v.shape().len().max(1) {
                    return Err(invalid(
                        "reduce",
                        format!("axis {ax} invalid for shape {:?}", v.shape()),
                    ));
                }
                let (rows, cols) = (v.rows(), v.cols());
                if ax == 0 {
                    let mut out = vec![0.0; cols];
                    for r in 0..rows {
                        for (o, &x) in out.iter_mut().zip(v.row(r)) {
                            *o += x;
                        }
                    }
                    if mean {
                        for o in out.iter_mut() {
                            *o /= rows as f64;
                        }
                    }
                    NdArray::from_vec(vec![cols], out)
                } else {
                    let mut out = vec![0.0; rows];
                    for (r, o) in out.iter_mut().enumerate() {
                        *o = v.row(r).iter().sum();
                        if mean {
                            *o /= cols as f64;
                        }
                    }
                    NdArray::from_vec(vec![rows], out)
                }
            }
        }
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Node grads are recomputed from
    /// scratch; parameter grads accumulate into `store`.
    pub fn backward(&mut self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.nodes[loss.0].value.shape()),
            ));
        }
        for node in &mut self.nodes {
            node.grad.data_mut().fill(0.0);
        }
        let mut reachable = vec![false; self.nodes.len()];
        reachable[loss.0] = true;
        self.nodes[loss.0].grad.data_mut()[0] = 1.0;

        for i in (0..=loss.0).rev() {
            if !reachable[i] || !self.nodes[i].needs_grad {
                continue;
            }
            for p in self.nodes[i].parents.clone() {
                reachable[p.0] = true;
            }
            self.propagate(i)?;
            if let Some(pid) = self.nodes[i].param {
                store.accumulate_grad(pid, &self.nodes[i].grad);
            }
        }
        Ok(())
    }

    /// Split borrow: parent grad (mutable) plus this node's grad and value.
    fn parent_and_node(&mut self, parent: usize, node: usize) -> (&mut Node, &Node) {
        debug_assert!(parent < node);
        let (left, right) = self.nodes.split_at_mut(node);
        (&mut left[parent], &right[0])
    }

    /// Split borrows for a two-parent op: the target parent mutably, the
    /// other parent (None when both parents alias the same node), and the
    /// output node.
    fn triple(&mut self, target: usize, other: usize, i: usize) -> (&mut Node, Option<&Node>, &Node) {
        debug_assert!(target < i && other < i);
        if target == other {
            let (left, right) = self.nodes.split_at_mut(i);
            (&mut left[target], None, &right[0])
        } else if target < other {
            let (left, rest) = self.nodes.split_at_mut(other);
            let (mid, right) = rest.split_at_mut(i - other);
            (&mut left[target], Some(&mid[0]), &right[0])
        } else {
            let (left, rest) = self.nodes.split_at_mut(target);
            let (mid, right) = rest.split_at_mut(i - target);
            (&mut mid[0], Some(&left[other]), &right[0])
        }
    }

    fn propagate(&mut self, i: usize) -> Result<()> {
        let op = self.nodes[i].op.clone();
        let parents = self.nodes[i].parents.clone();
        match op {
            Op::Const | Op::Param => {}

            Op::Add => {
                for &p in &parents {
                    self.acc_identity(p.0, i, 1.0);
                }
            }
            Op::Sub => {
                self.acc_identity(parents[0].0, i, 1.0);
                self.acc_identity(parents[1].0, i, -1.0);
            }
            Op::Scale(c) => self.acc_identity(parents[0].0, i, c),
            Op::WrapHalf | Op::Reshape => self.acc_identity(parents[0].0, i, 1.0),

            Op::Mul => {
                let (a, b) = (parents[0].0, parents[1].0);
                self.acc_elementwise_other(a, b, i, |g, other, _self_v| g * other);
                self.acc_elementwise_other(b, a, i, |g, other, _self_v| g * other);
            }
            Op::Div => {
                let (a, b) = (parents[0].0, parents[1].0);
                self.acc_elementwise_other(a, b, i, |g, denom, _| g / denom);
                // d/db (a/b) = -a/b² = -out/b
                self.acc_div_denominator(b, i, false);
            }
            Op::GuardedDiv => {
                let (a, b) = (parents[0].0, parents[1].0);
                self.acc_elementwise_other(a, b, i, |g, denom, _| {
                    if denom.abs() < DIV_GUARD {
                        0.0
                    } else {
                        g / denom
                    }
                });
                self.acc_div_denominator(b, i, true);
            }

            Op::Tanh => self.acc_from_output(parents[0].0, i, |g, y| g * (1.0 - y * y)),
            Op::Sqrt => self.acc_from_output(parents[0].0, i, |g, y| {
                if y > DIV_GUARD {
                    g * 0.5 / y
                } else {
                    0.0
                }
            }),
            Op::Sin => self.acc_from_input(parents[0].0, i, |g, x| g * fmath::cos(x)),
            Op::Cos => self.acc_from_input(parents[0].0, i, |g, x| -g * fmath::sin(x)),

            Op::Atan2 => {
                let (y, x) = (parents[0].0, parents[1].0);
                self.acc_elementwise_other(y, x, i, |g, xv, yv| g * xv / (xv * xv + yv * yv));
                self.acc_elementwise_other(x, y, i, |g, yv, xv| -g * yv / (xv * xv + yv * yv));
            }

            Op::AddBias { axis } => {
                self.acc_identity(parents[0].0, i, 1.0);
                self.acc_bias_grad(parents[1].0, i, axis, None);
            }
            Op::MulBias { axis } => {
                // d/da: broadcast multiply by bias; d/db: row/col dot with a.
                let (a, b) = (parents[0].0, parents[1].0);
                self.acc_mulbias_main(a, b, i, axis);
                self.acc_bias_grad(b, i, axis, Some(a));
            }

            Op::Matmul => {
                // dA += G·Bᵀ, dB += Aᵀ·G, both via fused accumulate kernels.
                let (a, b) = (parents[0].0, parents[1].0);
                let (m, k) = {
                    let v = &self.nodes[a.0].value;
                    (v.rows(), v.cols())
                };
                let n = self.nodes[i].value.cols();
                if self.nodes[a.0].needs_grad {
                    let (target, other, node) = self.triple(a.0, b.0, i);
                    let Node { value, grad, .. } = target;
                    let other_val = other.map_or(&*value, |n| &n.value);
                    matmul_nt_acc(grad.data_mut(), node.grad.data(), other_val.data(), m, n, k);
                }
                if self.nodes[b.0].needs_grad {
                    let (target, other, node) = self.triple(b.0, a.0, i);
                    let Node { value, grad, .. } = target;
                    let other_val = other.map_or(&*value, |n| &n.value);
                    matmul_tn_acc(grad.data_mut(), other_val.data(), node.grad.data(), m, k, n);
                }
            }

            Op::Conv1d { kernel } => {
                let (x, w) = (parents[0].0, parents[1].0);
                let (c_in, t) = {
                    let v = &self.nodes[x.0].value;
                    (v.shape()[0], v.shape()[1])
                };
                let c_out = self.nodes[i].value.rows();
                let pad = kernel / 2;
                if self.nodes[x.0].needs_grad {
                    let (target, other, node) = self.triple(x.0, w.0, i);
                    let Node { value, grad, .. } = target;
                    let w_val = other.map_or(&*value, |n| &n.value);
                    conv1d_input_grad(
                        grad.data_mut(),
                        node.grad.data(),
                        w_val.data(),
                        c_out,
                        c_in,
                        t,
                        kernel,
                        pad,
                    );
                }
                if self.nodes[w.0].needs_grad {
                    let (target, other, node) = self.triple(w.0, x.0, i);
                    let Node { value, grad, .. } = target;
                    let x_val = other.map_or(&*value, |n| &n.value);
                    conv1d_weight_grad(
                        grad.data_mut(),
                        node.grad.data(),
                        x_val.data(),
                        c_out,
                        c_in,
                        t,
                        kernel,
                        pad,
                    );
                }
            }

            Op::DftRe => {
                let p = parents[0].0;
                let (parent, node) = self.parent_and_node(p, i);
                let (k, t) = (parent.value.shape()[0], parent.value.shape()[1]);
                fft::dft_re_adjoint_rows(node.grad.data(), parent.grad.data_mut(), k, t);
            }
            Op::DftIm => {
                let p = parents[0].0;
                let (parent, node) = self.parent_and_node(p, i);
                let (k, t) = (parent.value.shape()[0], parent.value.shape()[1]);
                fft::dft_im_adjoint_rows(node.grad.data(), parent.grad.data_mut(), k, t);
            }

            Op::Sum { axis } => self.acc_reduce_grad(parents[0].0, i, axis, false),
            Op::Mean { axis } => self.acc_reduce_grad(parents[0].0, i, axis, true),

            Op::Concat { axis } => {
                let g = core::mem::take(&mut self.nodes[i].grad);
                let cols = g.cols();
                if axis == 0 {
                    let mut offset = 0;
                    for &p in &parents {
                        let parent = &mut self.nodes[p.0];
                        let n = parent.value.len();
                        for (slot, &gv) in parent
                            .grad
                            .data_mut()
                            .iter_mut()
                            .zip(&g.data()[offset..offset + n])
                        {
                            *slot += gv;
                        }
                        offset += n;
                    }
                } else {
                    let mut col_off = 0;
                    for &p in &parents {
                        let parent = &mut self.nodes[p.0];
                        let (pr, pc) = (parent.value.rows(), parent.value.cols());
                        for r in 0..pr {
                            let src = &g.data()[r * cols + col_off..r * cols + col_off + pc];
                            let dst = &mut parent.grad.data_mut()[r * pc..(r + 1) * pc];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                        col_off += pc;
                    }
                }
                self.nodes[i].grad = g;
            }

            Op::SelectRow { row } => {
                let p = parents[0].0;
                let (parent, node) = self.parent_and_node(p, i);
                let cols = parent.value.cols();
                let dst = &mut parent.grad.data_mut()[row * cols..(row + 1) * cols];
                for (d, &s) in dst.iter_mut().zip(node.grad.data()) {
                    *d += s;
                }
            }

            Op::CumsumTime => {
                let p = parents[0].0;
                let (parent, node) = self.parent_and_node(p, i);
                let (rows, cols) = (parent.value.rows(), parent.value.cols());
                for r in 0..rows {
                    let g_row = &node.grad.data()[r * cols..(r + 1) * cols];
                    let dst = &mut parent.grad.data_mut()[r * cols..(r + 1) * cols];
                    let mut suffix = 0.0;
                    for j in (0..cols).rev() {
                        suffix += g_row[j];
                        dst[j] += suffix;
                    }
                }
            }

            Op::Softmax => {
                let p = parents[0].0;
                let (parent, node) = self.parent_and_node(p, i);
                let cols = node.value.cols();
                let rows = node.value.len() / cols;
                for r in 0..rows {
                    let y = &node.value.data()[r * cols..(r + 1) * cols];
                    let g = &node.grad.data()[r * cols..(r + 1) * cols];
                    let dot: f64 = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
                    let dst = &mut parent.grad.data_mut()[r * cols..(r + 1) * cols];
                    for ((d, &yv), &gv) in dst.iter_mut().zip(y).zip(g) {
                        *d += yv * (gv - dot);
                    }
                }
            }
            Op::LogSoftmax => {
                let p = parents[0].0;
                let (parent, node) = self.parent_and_node(p, i);
                let cols = node.value.cols();
                let rows = node.value.len() / cols;
                for r in 0..rows {
                    let logp = &node.value.data()[r * cols..(r + 1) * cols];
                    let g = &node.grad.data()[r * cols..(r + 1) * cols];
                    let gsum: f64 = g.iter().sum();
                    let dst = &mut parent.grad.data_mut()[r * cols..(r + 1) * cols];
                    for ((d, &lp), &gv) in dst.iter_mut().zip(logp).zip(g) {
                        *d += gv - fmath::exp(lp) * gsum;
                    }
                }
            }
        }
        Ok(())
    }

    /// parent.grad += c · node.grad (shapes may differ only by layout).
    fn acc_identity(&mut self, p: usize, i: usize, c: f64) {
        if !self.nodes[p].needs_grad {
            return;
        }
        let (parent, node) = self.parent_and_node(p, i);
        for (d, &g) in parent.grad.data_mut().iter_mut().zip(node.grad.data()) {
            *d += c * g;
        }
    }

    /// parent.grad += f(node.grad, other_parent.value, parent.value), elementwise.
    fn acc_elementwise_other(
        &mut self,
        target: usize,
        other: usize,
        i: usize,
        f: impl Fn(f64, f64, f64) -> f64,
    ) {
        if !self.nodes[target].needs_grad {
            return;
        }
        let (parent, other_node, node) = self.triple(target, other, i);
        let Node { value, grad, .. } = parent;
        let other_val = other_node.map_or(&*value, |n| &n.value);
        for (((d, &g), &ov), &sv) in grad
            .data_mut()
            .iter_mut()
            .zip(node.grad.data())
            .zip(other_val.data())
            .zip(value.data())
        {
            *d += f(g, ov, sv);
        }
    }

    /// Denominator gradient for div: db += -g·out/b.
    fn acc_div_denominator(&mut self, b: usize, i: usize, guarded: bool) {
        if !self.nodes[b].needs_grad {
            return;
        }
        let (parent, node) = self.parent_and_node(b, i);
        let Node { value, grad, .. } = parent;
        for (((d, &g), &out), &denom) in grad
            .data_mut()
            .iter_mut()
            .zip(node.grad.data())
            .zip(node.value.data())
            .zip(value.data())
        {
            if guarded && denom.abs() < DIV_GUARD {
                continue;
            }
            *d += -g * out / denom;
        }
    }

    /// parent.grad += f(node.grad, node.value) — derivative via the output.
    fn acc_from_output(&mut self, p: usize, i: usize, f: impl Fn(f64, f64) -> f64) {
        if !self.nodes[p].needs_grad {
            return;
        }
        let (parent, node) = self.parent_and_node(p, i);
        for ((d, &g), &y) in parent
            .grad
            .data_mut()
            .iter_mut()
            .zip(node.grad.data())
            .zip(node.value.data())
        {
            *d += f(g, y);
        }
    }

    /// parent.grad += f(node.grad, parent.value) — derivative via the input.
    fn acc_from_input(&mut self, p: usize, i: usize, f: impl Fn(f64, f64) -> f64) {
        if !self.nodes[p].needs_grad {
            return;
        }
        let (parent, node) = self.parent_and_node(p, i);
        let Node { value, grad, .. } = parent;
        for ((d, &g), &x) in grad
            .data_mut()
            .iter_mut()
            .zip(node.grad.data())
            .zip(value.data())
        {
            *d += f(g, x);
        }
    }

    /// Bias-parent gradient for Add/MulBias: reduce node grad over the
    /// broadcast axis; for MulBias multiply by the main parent first.
    fn acc_bias_grad(&mut self, b: usize, i: usize, axis: usize, mul_with: Option<usize>) {
        if !self.nodes[b].needs_grad {
            return;
        }
        let scaled = match mul_with {
            None => self.nodes[i].grad.clone(),
            Some(a) => {
                let mut g = self.nodes[i].grad.clone();
                for (gv, &av) in g.data_mut().iter_mut().zip(self.nodes[a].value.data()) {
                    *gv *= av;
                }
                g
            }
        };
        let (rows, cols) = (scaled.rows(), scaled.cols());
        let parent = &mut self.nodes[b];
        let dst = parent.grad.data_mut();
        for r in 0..rows {
            let row = &scaled.data()[r * cols..(r + 1) * cols];
            if axis == 0 {
                dst[r] += row.iter().sum::<f64>();
            } else {
                for (d, &g) in dst.iter_mut().zip(row) {
                    *d += g;
                }
            }
        }
    }

    /// Main-parent gradient for MulBias: g broadcast-multiplied by bias.
    fn acc_mulbias_main(&mut self, a: usize, b: usize, i: usize, axis: usize) {
        if !self.nodes[a].needs_grad {
            return;
        }
        let bias = self.nodes[b].value.clone();
        let (parent, node) = self.parent_and_node(a, i);
        let (rows, cols) = (node.grad.rows(), node.grad.cols());
        for r in 0..rows {
            let g_row = &node.grad.data()[r * cols..(r + 1) * cols];
            let dst = &mut parent.grad.data_mut()[r * cols..(r + 1) * cols];
            if axis == 0 {
                let bv = bias.data()[r];
                for (d, &g) in dst.iter_mut().zip(g_row) {
                    *d += g * bv;
                }
            } else {
                for ((d, &g), &bv) in dst.iter_mut().zip(g_row).zip(bias.data()) {
                    *d += g * bv;
                }
            }
        }
    }

    fn acc_reduce_grad(&mut self, p: usize, i: usize, axis: Option<usize>, mean: bool) {
        if !self.nodes[p].needs_grad {
            return;
        }
        let (parent, node) = self.parent_and_node(p, i);
        let (rows, cols) = (parent.value.rows(), parent.value.cols());
        match axis {
            None => {
                let scale = if mean { 1.0 / parent.value.len() as f64 } else { 1.0 };
                let g = node.grad.data()[0] * scale;
                for d in parent.grad.data_mut().iter_mut() {
                    *d += g;
                }
            }
            Some(0) => {
                let scale = if mean { 1.0 / rows as f64 } else { 1.0 };
                for r in 0..rows {
                    let dst = &mut parent.grad.data_mut()[r * cols..(r + 1) * cols];
                    for (d, &g) in dst.iter_mut().zip(node.grad.data()) {
                        *d += g * scale;
                    }
                }
            }
            Some(_) => {
                let scale = if mean { 1.0 / cols as f64 } else { 1.0 };
                for r in 0..rows {
                    let g = node.grad.data()[r] * scale;
                    let dst = &mut parent.grad.data_mut()[r * cols..(r + 1) * cols];
                    for d in dst.iter_mut() {
                        *d += g;
                    }
                }
            }
        }
    }
}

// ── Convolution kernels ─────────────────────────────────────────────────

#[allow(clippy::too_many_arguments)]
fn conv1d_forward(
    out: &mut [f64],
    x: &[f64],
    w: &[f64],
    c_out: usize,
    c_in: usize,
    t: usize,
    kernel: usize,
    pad: usize,
) {
    for o in 0..c_out {
        let out_row = &mut out[o * t..(o + 1) * t];
        for c in 0..c_in {
            let x_row = &x[c * t..(c + 1) * t];
            let w_base = (o * c_in + c) * kernel;
            for d in 0..kernel {
                let wv = w[w_base + d];
                if wv == 0.0 {
                    continue;
                }
                let shift = d as isize - pad as isize;
                let (t0, t1) = shift_range(t, shift);
                let src = &x_row[(t0 as isize + shift) as usize..(t1 as isize + shift) as usize];
                for (ov, &xv) in out_row[t0..t1].iter_mut().zip(src) {
                    *ov += wv * xv;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv1d_input_grad(
    dx: &mut [f64],
    g: &[f64],
    w: &[f64],
    c_out: usize,
    c_in: usize,
    t: usize,
    kernel: usize,
    pad: usize,
) {
    for o in 0..c_out {
        let g_row = &g[o * t..(o + 1) * t];
        for c in 0..c_in {
            let dx_row = &mut dx[c * t..(c + 1) * t];
            let w_base = (o * c_in + c) * kernel;
            for d in 0..kernel {
                let wv = w[w_base + d];
                if wv == 0.0 {
                    continue;
                }
                let shift = d as isize - pad as isize;
                let (t0, t1) = shift_range(t, shift);
                let dst = &mut dx_row[(t0 as isize + shift) as usize..(t1 as isize + shift) as usize];
                for (dv, &gv) in dst.iter_mut().zip(&g_row[t0..t1]) {
                    *dv += wv * gv;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv1d_weight_grad(
    dw: &mut [f64],
    g: &[f64],
    x: &[f64],
    c_out: usize,
    c_in: usize,
    t: usize,
    kernel: usize,
    pad: usize,
) {
    for o in 0..c_out {
        let g_row = &g[o * t..(o + 1) * t];
        for c in 0..c_in {
            let x_row = &x[c * t..(c + 1) * t];
            let w_base = (o * c_in + c) * kernel;
            for d in 0..kernel {
                let shift = d as isize - pad as isize;
                let (t0, t1) = shift_range(t, shift);
                let src = &x_row[(t0 as isize + shift) as usize..(t1 as isize + shift) as usize];
                let mut acc = 0.0;
                for (&gv, &xv) in g_row[t0..t1].iter().zip(src) {
                    acc += gv * xv;
                }
                dw[w_base + d] += acc;
            }
        }
    }
}

/// Output index range [t0, t1) for which t + shift lands inside [0, T).
fn shift_range(t: usize, shift: isize) -> (usize, usize) {
    let t0 = if shift < 0 { (-shift) as usize } else { 0 };
    let t1 = if shift > 0 {
        t.saturating_sub(shift as usize)
    } else {
        t
    };
    (t0.min(t), t1.min(t))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::optim::ParamStore;
    use core::f64::consts::PI;

    fn arr(shape: &[usize], data: &[f64]) -> NdArray {
        NdArray::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn tanh_odd_at_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(NdArray::scalar(0.0)).unwrap();
        let y = tape.tanh(x).unwrap();
        assert_eq!(tape.scalar_value(y), 0.0);
    }

    #[test]
    fn atan2_axis_case() {
        let mut tape = Tape::new();
        let y = tape.constant(NdArray::scalar(1.0)).unwrap();
        let x = tape.constant(NdArray::scalar(0.0)).unwrap();
        let theta = tape.atan2(y, x).unwrap();
        assert!((tape.scalar_value(theta) - PI / 2.0).abs() < 1e-15);
    }

    #[test]
    fn atan2_rejects_origin() {
        let mut tape = Tape::new();
        let y = tape.constant(arr(&[1, 2], &[0.5, 0.0])).unwrap();
        let x = tape.constant(arr(&[1, 2], &[0.5, 0.0])).unwrap();
        let err = tape.atan2(y, x).unwrap_err();
        assert_eq!(err, CoreError::AtanOrigin { channel: 1 });
    }

    #[test]
    fn conv1d_identity_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(arr(&[1, 4], &[1.0, 1.0, 1.0, 1.0])).unwrap();
        let w = tape.constant(arr(&[1, 1, 1], &[1.0])).unwrap();
        let y = tape.conv1d(x, w).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn conv1d_rejects_even_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(NdArray::zeros(&[1, 4])).unwrap();
        let w = tape.constant(NdArray::zeros(&[1, 1, 2])).unwrap();
        assert!(tape.conv1d(x, w).is_err());
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut store = ParamStore::new();
        let p = store.register("x", arr(&[3], &[5.0, -1.0, 2.0])).unwrap();
        let mut tape = Tape::new();
        let x = tape.param(&store, p);
        let loss = tape.sum(x, None).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(p).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn mean_of_square_gradient() {
        // loss = mean(x²) with x = [1, 2] → grad = [1, 2].
        let mut store = ParamStore::new();
        let p = store.register("x", arr(&[2], &[1.0, 2.0])).unwrap();
        let mut tape = Tape::new();
        let x = tape.param(&store, p);
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.mean(sq, None).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(p).data(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut store = ParamStore::new();
        let p = store.register("x", arr(&[2], &[1.0, 2.0])).unwrap();
        let mut tape = Tape::new();
        let x = tape.param(&store, p);
        assert!(tape.backward(x, &mut store).is_err());
    }

    #[test]
    fn repeated_backward_accumulates_in_store() {
        let mut store = ParamStore::new();
        let p = store.register("x", arr(&[2], &[3.0, 4.0])).unwrap();
        let mut tape = Tape::new();
        let x = tape.param(&store, p);
        let loss = tape.sum(x, None).unwrap();
        tape.backward(loss, &mut store).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(p).data(), &[2.0, 2.0]);
    }

    #[test]
    fn add_shape_mismatch_names_op() {
        let mut tape = Tape::new();
        let a = tape.constant(NdArray::zeros(&[2, 2])).unwrap();
        let b = tape.constant(NdArray::zeros(&[2, 3])).unwrap();
        match tape.add(a, b).unwrap_err() {
            CoreError::ShapeMismatch { op, .. } => assert_eq!(op, "add"),
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn div_guard_rejects_small_denominator() {
        let mut tape = Tape::new();
        let a = tape.constant(NdArray::scalar(1.0)).unwrap();
        let b = tape.constant(NdArray::scalar(1e-13)).unwrap();
        assert!(matches!(
            tape.div(a, b).unwrap_err(),
            CoreError::DivisionByZero { .. }
        ));
    }

    #[test]
    fn guarded_div_zeroes_output_and_grad() {
        let mut store = ParamStore::new();
        let pa = store.register("a", arr(&[2], &[1.0, 2.0])).unwrap();
        let pb = store.register("b", arr(&[2], &[0.0, 4.0])).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&store, pa);
        let b = tape.param(&store, pb);
        let q = tape.guarded_div(a, b).unwrap();
        assert_eq!(tape.value(q).data(), &[0.0, 0.5]);
        let loss = tape.sum(q, None).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(pa).data()[0], 0.0);
        assert_eq!(store.grad(pb).data()[0], 0.0);
        assert!((store.grad(pa).data()[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut tape = Tape::new();
        let a = tape.constant(arr(&[1, 3], &[1.0, 2.0, 3.0])).unwrap();
        let p = tape.softmax(a).unwrap();
        let total: f64 = tape.value(p).data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);

        let b = tape.constant(arr(&[1, 3], &[101.0, 102.0, 103.0])).unwrap();
        let q = tape.softmax(b).unwrap();
        for (x, y) in tape.value(p).data().iter().zip(tape.value(q).data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_axis1_layout() {
        let mut tape = Tape::new();
        let a = tape.constant(arr(&[2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let b = tape.constant(arr(&[2, 1], &[9.0, 8.0])).unwrap();
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 3]);
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
    }

    #[test]
    fn select_row_and_wrap() {
        let mut tape = Tape::new();
        let a = tape.constant(arr(&[2, 2], &[0.5, -0.25, 0.0, 0.49])).unwrap();
        let r0 = tape.select_row(a, 0).unwrap();
        let w = tape.wrap_half(r0).unwrap();
        assert_eq!(tape.value(w).data(), &[-0.5, -0.25]);
    }

    #[test]
    fn cumsum_forward() {
        let mut tape = Tape::new();
        let a = tape.constant(arr(&[1, 4], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let c = tape.cumsum_time(a).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 6.0, 10.0]);
    }

    #[test]
    fn non_finite_output_is_hard_error() {
        let mut tape = Tape::new();
        let a = tape.constant(NdArray::scalar(1e308)).unwrap();
        let b = tape.constant(NdArray::scalar(1e308)).unwrap();
        assert!(matches!(
            tape.add(a, b).unwrap_err(),
            CoreError::NonFinite { op: "add" }
        ));
    }
}
