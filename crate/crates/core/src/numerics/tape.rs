use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{matmul_at_into, matmul_bt_into};
use super::{NumericsError, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    ScaleBy { scalar: usize, x: usize },
    Relu(usize),
    Gelu(usize),
    Exp(usize),
    Log(usize),
    ClampMin(usize, f64),
    Sum(usize),
    Mean(usize),
    Softmax { x: usize, temperature: f64 },
    LogSoftmax(usize),
    LayerNorm { x: usize, eps: f64 },
    L1Normalize { x: usize, eps: f64 },
    RowNormalize(usize),
    SignedRowNormalize { x: usize, eps: f64 },
    Reshape(usize),
    SliceRows { x: usize, start: usize },
    SliceCols { x: usize, start: usize },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    Gather { x: usize, indices: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode differentiation tape.
///
/// Every operation appends a node whose parents were recorded earlier, so the
/// node list is already in topological order. `backward` walks it once in
/// reverse and adds the resulting adjoints to the stored gradients; call
/// [`Tape::zero_grad`] to reset them between passes.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NumericsError {
    NumericsError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn sgn_plus(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize, NumericsError> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(NumericsError::Usage(format!(
                "variable {} does not belong to this tape",
                v.index
            )));
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn rg(&self, idx: usize) -> bool {
        self.nodes[idx].requires_grad
    }

    /// Records a trainable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.index].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    /// Accumulated gradient of the last `backward` target(s) with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.index];
        self.grads[v.index]
            .as_ref()
            .map(|g| Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(shape_err("matmul", va.shape(), vb.shape()));
        }
        let out = va.matmul(vb)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, Op::MatMul(ia, ib), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, NumericsError> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        if v.rank() != 2 {
            return Err(shape_err("transpose", v.shape(), &[2]));
        }
        let (m, n) = (v.shape()[0], v.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = v.data()[i * n + j];
            }
        }
        let out = Tensor::new(vec![n, m], out)?;
        let rg = self.rg(ix);
        Ok(self.push(out, Op::Transpose(ix), rg))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var, NumericsError> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.shape() != vb.shape() {
            return Err(shape_err(name, va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(ia) || self.rg(ib);
        Ok(self.push(out, op(ia, ib), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        x: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
        op: fn(usize, usize) -> Op,
    ) -> Result<Var, NumericsError> {
        let (ix, ir) = (self.check(x)?, self.check(row)?);
        let (vx, vr) = (&self.nodes[ix].value, &self.nodes[ir].value);
        let n = vx.cols();
        if vr.len() != n || vx.rank() > 3 {
            return Err(shape_err(name, vx.shape(), vr.shape()));
        }
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(k, &v)| f(v, vr.data()[k % n]))
            .collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        let rg = self.rg(ix) || self.rg(ir);
        Ok(self.push(out, op(ix, ir), rg))
    }

    /// `x + row` with `row` broadcast over the leading dimensions of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var, NumericsError> {
        self.row_broadcast("add_row", x, row, |a, b| a + b, Op::AddRow)
    }

    /// `x ⊙ row` with `row` broadcast over the leading dimensions of `x`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var, NumericsError> {
        self.row_broadcast("mul_row", x, row, |a, b| a * b, Op::MulRow)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: fn(usize) -> Op) -> Result<Var, NumericsError> {
        let ix = self.check(x)?;
        let out = self.nodes[ix].value.map(f);
        let rg = self.rg(ix);
        Ok(self.push(out, op(ix), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, NumericsError> {
        let ix = self.check(x)?;
        let out = self.nodes[ix].value.map(|v| v * c);
        let rg = self.rg(ix);
        Ok(self.push(out, Op::Scale(ix, c), rg))
    }

    /// Multiplies `x` by a recorded single-element value.
    pub fn scale_by(&mut self, scalar: Var, x: Var) -> Result<Var, NumericsError> {
        let (is, ix) = (self.check(scalar)?, self.check(x)?);
        let s = &self.nodes[is].value;
        if s.len() != 1 {
            return Err(shape_err("scale_by", s.shape(), &[]));
        }
        let c = s.item();
        let out = self.nodes[ix].value.map(|v| v * c);
        let rg = self.rg(is) || self.rg(ix);
        Ok(self.push(out, Op::ScaleBy { scalar: is, x: ix }, rg))
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary(
            x,
            |v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh()),
            Op::Gelu,
        )
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, NumericsError> {
        self.unary(x, f64::exp, Op::Exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var, NumericsError> {
        let ix = self.check(x)?;
        if let Some(&bad) = self.nodes[ix].value.data().iter().find(|&&v| !(v > 0.0)) {
            return Err(NumericsError::Domain { op: "log", value: bad });
        }
        self.unary(x, f64::ln, Op::Log)
    }

    /// `max(x, floor)`; gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var, NumericsError> {
        let ix = self.check(x)?;
        let out = self.nodes[ix].value.map(|v| v.max(floor));
        let rg = self.rg(ix);
        Ok(self.push(out, Op::ClampMin(ix, floor), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumericsError> {
        let ix = self.check(x)?;
        let s = self.nodes[ix].value.data().iter().sum();
        let rg = self.rg(ix);
        Ok(self.push(Tensor::scalar(s), Op::Sum(ix), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, NumericsError> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(ix);
        Ok(self.push(Tensor::scalar(s), Op::Mean(ix), rg))
    }

    /// Row-wise `softmax(x / temperature)` over the last dimension.
    pub fn softmax_rows(&mut self, x: Var, temperature: f64) -> Result<Var, NumericsError> {
        self.softmax_rows_masked(x, temperature, |_, _| true)
    }

    /// Row-wise softmax restricted to entries where `allowed(row, col)`;
    /// disallowed entries are exactly zero.
    pub fn softmax_rows_masked(
        &mut self,
        x: Var,
        temperature: f64,
        allowed: impl Fn(usize, usize) -> bool,
    ) -> Result<Var, NumericsError> {
        let ix = self.check(x)?;
        if !(temperature > 0.0) {
            return Err(NumericsError::Usage(format!(
                "softmax temperature must be positive, got {temperature}"
            )));
        }
        let v = &self.nodes[ix].value;
        if !v.is_finite() {
            return Err(NumericsError::NonFinite("softmax_rows"));
        }
        let (m, n) = (v.rows(), v.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = v.row(i);
            let mut max = f64::NEG_INFINITY;
            for (j, &r) in row.iter().enumerate() {
                if allowed(i, j) && r > max {
                    max = r;
                }
            }
            if max == f64::NEG_INFINITY {
                continue;
            }
            let mut total = 0.0;
            for (j, &r) in row.iter().enumerate() {
                if allowed(i, j) {
                    let e = ((r - max) / temperature).exp();
                    out[i * n + j] = e;
                    total += e;
                }
            }
            for o in &mut out[i * n..(i + 1) * n] {
                *o /= total;
            }
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(ix);
        Ok(self.push(out, Op::Softmax { x: ix, temperature }, rg))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var, NumericsError> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        if !v.is_finite() {
            return Err(NumericsError::NonFinite("log_softmax_rows"));
        }
        let (m, n) = (v.rows(), v.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = v.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|r| (r - max).exp()).sum::<f64>().ln();
            for j in 0..n {
                out[i * n + j] = row[j] - lse;
            }
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(ix);
        Ok(self.push(out, Op::LogSoftmax(ix), rg))
    }

    /// Per-row standardisation `(x - mean) / sqrt(var + eps)` without affine terms.
    pub fn layer_norm_rows(&mut self, x: Var, eps: f64) -> Result<Var, NumericsError> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        let (m, n) = (v.rows(), v.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = v.row(i);
            let (mu, rstd) = row_moments(row, eps);
            for j in 0..n {
                out[i * n + j] = (row[j] - mu) * rstd;
            }
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(ix);
        Ok(self.push(out, Op::LayerNorm { x: ix, eps }, rg))
    }

    /// `x / (‖x‖₁ + eps)` over all elements.
    pub fn l1_normalize(&mut self, x: Var, eps: f64) -> Result<Var, NumericsError> {
        let ix = self.check(x)?;
        if !(eps > 0.0) {
            return Err(NumericsError::Usage(format!("l1_normalize needs eps > 0, got {eps}")));
        }
        let v = &self.nodes[ix].value;
        let denom = v.data().iter().map(|x| x.abs()).sum::<f64>() + eps;
        let out = v.map(|x| x / denom);
        let rg = self.rg(ix);
        Ok(self.push(out, Op::L1Normalize { x: ix, eps }, rg))
    }

    /// Divides each row by its sum. Rows summing to exactly zero become uniform.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var, NumericsError> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        let (m, n) = (v.rows(), v.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = v.row(i);
            let s: f64 = row.iter().sum();
            for j in 0..n {
                out[i * n + j] = if s == 0.0 { 1.0 / n as f64 } else { row[j] / s };
            }
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(ix);
        Ok(self.push(out, Op::RowNormalize(ix), rg))
    }

    /// Divides each row by `sum + eps·sign(sum)` with `sign(0) = +1`.
    pub fn signed_row_normalize(&mut self, x: Var, eps: f64) -> Result<Var, NumericsError> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        let (m, n) = (v.rows(), v.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = v.row(i);
            let s: f64 = row.iter().sum();
            let denom = s + eps * sgn_plus(s);
            for j in 0..n {
                out[i * n + j] = row[j] / denom;
            }
        }
        let out = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(ix);
        Ok(self.push(out, Op::SignedRowNormalize { x: ix, eps }, rg))
    }

    /// Identity node that always requires a gradient, so `grad` reports
    /// the adjoint at this point even when nothing upstream is trainable.
    pub fn watch(&mut self, x: Var) -> Result<Var, NumericsError> {
        let ix = self.check(x)?;
        let out = self.nodes[ix].value.clone();
        Ok(self.push(out, Op::Reshape(ix), true))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let ix = self.check(x)?;
        let out = self.nodes[ix].value.clone().reshape(shape)?;
        let rg = self.rg(ix);
        Ok(self.push(out, Op::Reshape(ix), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        if v.rank() != 2 || start + len > v.shape()[0] {
            return Err(shape_err("slice_rows", v.shape(), &[start, len]));
        }
        let n = v.cols();
        let out = Tensor::new(vec![len, n], v.data()[start * n..(start + len) * n].to_vec())?;
        let rg = self.rg(ix);
        Ok(self.push(out, Op::SliceRows { x: ix, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        if v.rank() != 2 || start + len > v.shape()[1] {
            return Err(shape_err("slice_cols", v.shape(), &[start, len]));
        }
        let m = v.shape()[0];
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&v.row(i)[start..start + len]);
        }
        let out = Tensor::new(vec![m, len], out)?;
        let rg = self.rg(ix);
        Ok(self.push(out, Op::SliceCols { x: ix, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let idx = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>, _>>()?;
        let Some(&first) = idx.first() else {
            return Err(NumericsError::Usage("concat_rows of nothing".into()));
        };
        let n = self.nodes[first].value.cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for &i in &idx {
            let v = &self.nodes[i].value;
            if v.rank() != 2 || v.cols() != n {
                return Err(shape_err("concat_rows", &[rows, n], v.shape()));
            }
            rows += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(vec![rows, n], data)?;
        let rg = idx.iter().any(|&i| self.rg(i));
        Ok(self.push(out, Op::ConcatRows(idx), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let idx = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>, _>>()?;
        let Some(&first) = idx.first() else {
            return Err(NumericsError::Usage("concat_cols of nothing".into()));
        };
        let m = self.nodes[first].value.rows();
        let mut total = 0;
        for &i in &idx {
            let v = &self.nodes[i].value;
            if v.rank() != 2 || v.shape()[0] != m {
                return Err(shape_err("concat_cols", &[m, total], v.shape()));
            }
            total += v.shape()[1];
        }
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for &i in &idx {
                data.extend_from_slice(self.nodes[i].value.row(r));
            }
        }
        let out = Tensor::new(vec![m, total], data)?;
        let rg = idx.iter().any(|&i| self.rg(i));
        Ok(self.push(out, Op::ConcatCols(idx), rg))
    }

    /// Picks flat elements of `x` into a vector, in the given order.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var, NumericsError> {
        let ix = self.check(x)?;
        let v = &self.nodes[ix].value;
        if let Some(&bad) = indices.iter().find(|&&k| k >= v.len()) {
            return Err(shape_err("gather", v.shape(), &[bad]));
        }
        let out = Tensor::vector(indices.iter().map(|&k| v.data()[k]).collect());
        let rg = self.rg(ix);
        Ok(self.push(
            out,
            Op::Gather {
                x: ix,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Backpropagates from a single-element value, adding into stored gradients.
    pub fn backward(&mut self, target: Var) -> Result<(), NumericsError> {
        let it = self.check(target)?;
        if self.nodes[it].value.len() != 1 {
            return Err(NumericsError::Usage(format!(
                "backward needs a scalar target, got shape {:?}",
                self.nodes[it].value.shape()
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; it + 1];
        adj[it] = Some(vec![1.0]);
        for i in (0..=it).rev() {
            let Some(g) = adj[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut adj);
            }
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut acc = |idx: usize, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[idx].requires_grad {
                return;
            }
            let len = self.nodes[idx].value.len();
            let buf = adj[idx].get_or_insert_with(|| vec![0.0; len]);
            f(buf);
        };
        let val = |idx: usize| &self.nodes[idx].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                acc(*a, &mut |d| matmul_bt_into(g, vb.data(), d, m, n, k));
                acc(*b, &mut |d| matmul_at_into(va.data(), g, d, k, m, n));
            }
            Op::Transpose(x) => {
                let (m, n) = (val(*x).shape()[0], val(*x).shape()[1]);
                acc(*x, &mut |d| {
                    for r in 0..m {
                        for c in 0..n {
                            d[r * n + c] += g[c * m + r];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_assign(d, g));
                acc(*b, &mut |d| add_assign(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_assign(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * vb[k];
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * va[k];
                    }
                });
            }
            Op::AddRow(x, r) => {
                let n = val(*r).len();
                acc(*x, &mut |d| add_assign(d, g));
                acc(*r, &mut |d| {
                    for (k, gv) in g.iter().enumerate() {
                        d[k % n] += gv;
                    }
                });
            }
            Op::MulRow(x, r) => {
                let (vx, vr) = (val(*x).data(), val(*r).data());
                let n = vr.len();
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * vr[k % n];
                    }
                });
                acc(*r, &mut |d| {
                    for (k, gv) in g.iter().enumerate() {
                        d[k % n] += gv * vx[k];
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |d| {
                d.iter_mut().zip(g).for_each(|(a, b)| *a += c * b)
            }),
            Op::ScaleBy { scalar, x } => {
                let vx = val(*x).data();
                let c = val(*scalar).item();
                acc(*scalar, &mut |d| d[0] += g.iter().zip(vx).map(|(a, b)| a * b).sum::<f64>());
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(a, b)| *a += c * b));
            }
            Op::Relu(x) => {
                let vx = val(*x).data();
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        if vx[k] > 0.0 {
                            d[k] += g[k];
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = val(*x).data();
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        let v = vx[k];
                        let t = (GELU_C * (v + GELU_K * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                        d[k] += g[k] * (0.5 * (1.0 + t) + 0.5 * v * dt);
                    }
                });
            }
            Op::Exp(x) => acc(*x, &mut |d| {
                for k in 0..d.len() {
                    d[k] += g[k] * y.data()[k];
                }
            }),
            Op::Log(x) => {
                let vx = val(*x).data();
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] / vx[k];
                    }
                });
            }
            Op::ClampMin(x, floor) => {
                let vx = val(*x).data();
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        if vx[k] > *floor {
                            d[k] += g[k];
                        }
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|a| *a += g[0])),
            Op::Mean(x) => {
                let n = val(*x).len() as f64;
                acc(*x, &mut |d| d.iter_mut().for_each(|a| *a += g[0] / n));
            }
            Op::Softmax { x, temperature } => {
                let (m, n) = (y.rows(), y.cols());
                acc(*x, &mut |d| {
                    for r in 0..m {
                        let yr = y.row(r);
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            d[r * n + c] += yr[c] * (gr[c] - dot) / temperature;
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let (m, n) = (y.rows(), y.cols());
                acc(*x, &mut |d| {
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        let gs: f64 = gr.iter().sum();
                        for c in 0..n {
                            d[r * n + c] += gr[c] - y.data()[r * n + c].exp() * gs;
                        }
                    }
                });
            }
            Op::LayerNorm { x, eps } => {
                let vx = val(*x);
                let (m, n) = (vx.rows(), vx.cols());
                acc(*x, &mut |d| {
                    for r in 0..m {
                        let (_, rstd) = row_moments(vx.row(r), *eps);
                        let yr = y.row(r);
                        let gr = &g[r * n..(r + 1) * n];
                        let mg = gr.iter().sum::<f64>() / n as f64;
                        let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for c in 0..n {
                            d[r * n + c] += rstd * (gr[c] - mg - yr[c] * mgy);
                        }
                    }
                });
            }
            Op::L1Normalize { x, eps } => {
                let vx = val(*x).data();
                let denom = vx.iter().map(|v| v.abs()).sum::<f64>() + eps;
                let gx: f64 = g.iter().zip(vx).map(|(a, b)| a * b).sum();
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        let s = if vx[k] > 0.0 {
                            1.0
                        } else if vx[k] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        d[k] += g[k] / denom - s * gx / (denom * denom);
                    }
                });
            }
            Op::RowNormalize(x) => {
                let vx = val(*x);
                let (m, n) = (vx.rows(), vx.cols());
                acc(*x, &mut |d| {
                    for r in 0..m {
                        let xr = vx.row(r);
                        let s: f64 = xr.iter().sum();
                        if s == 0.0 {
                            continue;
                        }
                        let gr = &g[r * n..(r + 1) * n];
                        let gx: f64 = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            d[r * n + c] += gr[c] / s - gx / (s * s);
                        }
                    }
                });
            }
            Op::SignedRowNormalize { x, eps } => {
                let vx = val(*x);
                let (m, n) = (vx.rows(), vx.cols());
                acc(*x, &mut |d| {
                    for r in 0..m {
                        let xr = vx.row(r);
                        let s: f64 = xr.iter().sum();
                        let denom = s + eps * sgn_plus(s);
                        let gr = &g[r * n..(r + 1) * n];
                        let gx: f64 = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
                        for c in 0..n {
                            d[r * n + c] += gr[c] / denom - gx / (denom * denom);
                        }
                    }
                });
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_assign(d, g)),
            Op::SliceRows { x, start } => {
                let n = y.cols();
                acc(*x, &mut |d| add_assign(&mut d[start * n..start * n + g.len()], g));
            }
            Op::SliceCols { x, start } => {
                let (m, len) = (y.shape()[0], y.shape()[1]);
                let n = val(*x).shape()[1];
                acc(*x, &mut |d| {
                    for r in 0..m {
                        add_assign(&mut d[r * n + start..r * n + start + len], &g[r * len..(r + 1) * len]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = val(p).len();
                    acc(p, &mut |d| add_assign(d, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = (y.shape()[0], y.shape()[1]);
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).shape()[1];
                    acc(p, &mut |d| {
                        for r in 0..m {
                            add_assign(&mut d[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::Gather { x, indices } => acc(*x, &mut |d| {
                for (k, &src) in indices.iter().enumerate() {
                    d[src] += g[k];
                }
            }),
        }
    }
}

fn add_assign(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(a, b)| *a += b);
}

fn row_moments(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mu = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
    (mu, 1.0 / (var + eps).sqrt())
}
