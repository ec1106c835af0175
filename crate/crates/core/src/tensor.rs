//! Reverse-mode automatic differentiation over dense row-major arrays.
//!
//! A [`Graph`] is a Wengert tape: every operation appends a node holding its
//! output value and whatever it needs to compute local gradients. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and
//! accumulates gradients into every node that requires them. Node order is
//! insertion order, so inputs always precede the operations that consume them.
//!
//! Broadcasting is limited to exact shape matches and a row vector (`[n]` or
//! `[1, n]`) applied to every row of an `[m, n]` matrix.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{Error, Result};

/// Dense row-major array of `f64` values. At most two dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, values: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.len() > 2 {
            return Err(Error::Contract(format!(
                "tensors have at most two dimensions, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::dim("tensor", &shape, &[values.len()]));
        }
        Ok(Tensor { shape, values })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            values: vec![value],
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Tensor {
            shape: vec![values.len()],
            values,
        }
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::dim("from_rows", &[cols], &[row.len()]));
            }
            values.extend_from_slice(row);
        }
        Tensor::matrix(rows.len(), cols, values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of rows when viewed as a matrix (`[n]` and `[]` are one row).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1],
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.values[r * c..(r + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols() + c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.values.len(), 1);
        self.values[0]
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Handle to a node on a specific [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

/// Elementwise operation kinds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Elementwise {
    Add,
    Mul,
    Sigmoid,
    Tanh,
    Relu,
    Neg,
    Scale(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Exact,
    Row,
}

enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    MatMulT { a: usize, b: usize },
    Transpose(usize),
    Reshape(usize),
    Add { a: usize, b: usize, bc: Broadcast },
    Sub { a: usize, b: usize, bc: Broadcast },
    Mul { a: usize, b: usize, bc: Broadcast },
    Scale(usize, f64),
    AddScalar(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Exp(usize),
    Ln { a: usize, eps: f64 },
    Softmax(usize),
    Gather { table: usize, ids: Vec<usize> },
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout { a: usize, mask: Vec<f64> },
    Sum(usize),
    Mean(usize),
    Nll { logits: usize, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Layer-norm variance floor.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Differentiation tape.
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        self.grads.push(None);
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.index].value
    }

    /// Accumulated gradient of `v`, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        self.grads[v.index].as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Contract(
                "variable does not belong to this tape".into(),
            ));
        }
        Ok(v.index)
    }

    fn shape_of(&self, i: usize) -> &[usize] {
        &self.nodes[i].value.shape
    }

    fn vals(&self, i: usize) -> &[f64] {
        &self.nodes[i].value.values
    }

    fn push(&mut self, name: &'static str, value: Tensor, inputs: &[usize], op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    fn matrix_dims(&self, op: &'static str, i: usize) -> Result<(usize, usize)> {
        let s = self.shape_of(i);
        if s.len() != 2 {
            return Err(Error::dim(op, s, &[]));
        }
        Ok((s[0], s[1]))
    }

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (m, k) = self.matrix_dims("matmul", ai)?;
        let (k2, n) = self.matrix_dims("matmul", bi)?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape_of(ai), self.shape_of(bi)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.vals(ai), false, self.vals(bi), false, &mut out);
        self.push("matmul", Tensor { shape: vec![m, n], values: out }, &[ai, bi], Op::MatMul { a: ai, b: bi })
    }

    /// `a[m×k] · b[n×k]ᵀ`, the layout of a linear layer whose weight is stored
    /// as `out × in`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let (m, k) = self.matrix_dims("matmul_t", ai)?;
        let (n, k2) = self.matrix_dims("matmul_t", bi)?;
        if k != k2 {
            return Err(Error::dim("matmul_t", self.shape_of(ai), self.shape_of(bi)));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.vals(ai), false, self.vals(bi), true, &mut out);
        self.push("matmul_t", Tensor { shape: vec![m, n], values: out }, &[ai, bi], Op::MatMulT { a: ai, b: bi })
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let (m, n) = self.matrix_dims("transpose", ai)?;
        let src = self.vals(ai);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                out[c * m + r] = src[r * n + c];
            }
        }
        self.push("transpose", Tensor { shape: vec![n, m], values: out }, &[ai], Op::Transpose(ai))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let ai = self.check(a)?;
        let value = Tensor::new(shape.to_vec(), self.vals(ai).to_vec())
            .map_err(|_| Error::dim("reshape", self.shape_of(ai), shape))?;
        self.push("reshape", value, &[ai], Op::Reshape(ai))
    }

    fn broadcast(&self, op: &'static str, ai: usize, bi: usize) -> Result<Broadcast> {
        let (sa, sb) = (self.shape_of(ai), self.shape_of(bi));
        if sa == sb {
            return Ok(Broadcast::Exact);
        }
        let row_like = match sb.len() {
            1 => true,
            2 => sb[0] == 1,
            _ => false,
        };
        if sa.len() == 2 && row_like && sb.iter().product::<usize>() == sa[1] {
            return Ok(Broadcast::Row);
        }
        Err(Error::dim(op, sa, sb))
    }

    fn binary(&self, ai: usize, bi: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let (a, b) = (self.vals(ai), self.vals(bi));
        if a.len() == b.len() {
            a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let n = b.len();
            a.iter().enumerate().map(|(i, &x)| f(x, b[i % n])).collect()
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let bc = self.broadcast("add", ai, bi)?;
        let values = self.binary(ai, bi, |x, y| x + y);
        let shape = self.shape_of(ai).to_vec();
        self.push("add", Tensor { shape, values }, &[ai, bi], Op::Add { a: ai, b: bi, bc })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let bc = self.broadcast("sub", ai, bi)?;
        let values = self.binary(ai, bi, |x, y| x - y);
        let shape = self.shape_of(ai).to_vec();
        self.push("sub", Tensor { shape, values }, &[ai, bi], Op::Sub { a: ai, b: bi, bc })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.check(a)?, self.check(b)?);
        let bc = self.broadcast("mul", ai, bi)?;
        let values = self.binary(ai, bi, |x, y| x * y);
        let shape = self.shape_of(ai).to_vec();
        self.push("mul", Tensor { shape, values }, &[ai, bi], Op::Mul { a: ai, b: bi, bc })
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: impl FnOnce(usize) -> Op) -> Result<Var> {
        let ai = self.check(a)?;
        let values = self.vals(ai).iter().map(|&x| f(x)).collect();
        let shape = self.shape_of(ai).to_vec();
        self.push(name, Tensor { shape, values }, &[ai], op(ai))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * factor, |i| Op::Scale(i, factor))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, shift: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + shift, Op::AddScalar)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, f64::tanh, Op::Tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max(0.0), Op::Relu)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp)
    }

    /// `ln(max(x, eps))`; the gradient is zero where the clamp is active.
    pub fn ln_clamped(&mut self, a: Var, eps: f64) -> Result<Var> {
        self.unary("ln", a, |x| x.max(eps).ln(), |i| Op::Ln { a: i, eps })
    }

    pub fn elementwise(&mut self, kind: Elementwise, operands: &[Var]) -> Result<Var> {
        let arity = match kind {
            Elementwise::Add | Elementwise::Mul => 2,
            _ => 1,
        };
        if operands.len() != arity {
            return Err(Error::Contract(format!(
                "{kind:?} takes {arity} operand(s), got {}",
                operands.len()
            )));
        }
        match kind {
            Elementwise::Add => self.add(operands[0], operands[1]),
            Elementwise::Mul => self.mul(operands[0], operands[1]),
            Elementwise::Sigmoid => self.sigmoid(operands[0]),
            Elementwise::Tanh => self.tanh(operands[0]),
            Elementwise::Relu => self.relu(operands[0]),
            Elementwise::Neg => self.neg(operands[0]),
            Elementwise::Scale(f) => self.scale(operands[0], f),
        }
    }

    /// Row-wise softmax. Entries where `mask` is 0 are excluded and come out
    /// as exactly 0.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&Tensor>) -> Result<Var> {
        let xi = self.check(x)?;
        let (m, n) = self.matrix_dims("softmax_rows", xi)?;
        if let Some(mask) = mask {
            if mask.shape() != [m, n] {
                return Err(Error::dim("softmax_rows", &[m, n], mask.shape()));
            }
            if mask.values().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Contract("softmax mask must contain only 0 and 1".into()));
            }
        }
        let src = self.vals(xi);
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let keep = |c: usize| mask.map_or(true, |mk| mk.values()[r * n + c] != 0.0);
            let row = &src[r * n..(r + 1) * n];
            let mut max = f64::NEG_INFINITY;
            for (c, &v) in row.iter().enumerate() {
                if keep(c) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                if n == 0 {
                    continue;
                }
                return Err(Error::DegenerateMask { row: r });
            }
            let dst = &mut out[r * n..(r + 1) * n];
            let mut total = 0.0;
            for c in 0..n {
                if keep(c) {
                    let e = (row[c] - max).exp();
                    dst[c] = e;
                    total += e;
                }
            }
            for c in 0..n {
                if keep(c) {
                    dst[c] /= total;
                }
            }
        }
        self.push("softmax_rows", Tensor { shape: vec![m, n], values: out }, &[xi], Op::Softmax(xi))
    }

    /// Gathers rows of `table[V×d]`; the gradient scatter-adds back.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ti = self.check(table)?;
        let (v, d) = self.matrix_dims("embedding_lookup", ti)?;
        let src = self.vals(ti);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    op: "embedding_lookup",
                    index: id,
                    size: v,
                });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let value = Tensor {
            shape: vec![ids.len(), d],
            values: out,
        };
        self.push("embedding_lookup", value, &[ti], Op::Gather { table: ti, ids: ids.to_vec() })
    }

    /// Concatenates along `axis` (0 = rows, 1 = columns for matrices).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let idx = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        let first = self.shape_of(idx[0]).to_vec();
        if axis >= first.len().max(1) {
            return Err(Error::dim("concat", &first, &[axis]));
        }
        for &i in &idx[1..] {
            let s = self.shape_of(i);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(ax, (a, b))| ax == axis || a == b);
            if !ok {
                return Err(Error::dim("concat", &first, s));
            }
        }
        let mut shape = first.clone();
        shape[axis] = idx.iter().map(|&i| self.shape_of(i)[axis]).sum();
        let values = if axis == 0 {
            idx.iter().flat_map(|&i| self.vals(i).iter().copied()).collect()
        } else {
            let rows = first[0];
            let mut out = Vec::with_capacity(shape.iter().product());
            for r in 0..rows {
                for &i in &idx {
                    let w = self.shape_of(i)[1];
                    out.extend_from_slice(&self.vals(i)[r * w..(r + 1) * w]);
                }
            }
            out
        };
        self.push("concat", Tensor { shape, values }, &idx, Op::Concat { inputs: idx.clone(), axis })
    }

    /// `len` rows (axis 0) or columns (axis 1) starting at `start`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let ai = self.check(a)?;
        let shape = self.shape_of(ai).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::dim("slice", &shape, &[axis, start, len]));
        }
        let src = self.vals(ai);
        let (out_shape, values) = if shape.len() == 1 {
            (vec![len], src[start..start + len].to_vec())
        } else if axis == 0 {
            let c = shape[1];
            (vec![len, c], src[start * c..(start + len) * c].to_vec())
        } else {
            let (r, c) = (shape[0], shape[1]);
            let mut out = Vec::with_capacity(r * len);
            for row in 0..r {
                out.extend_from_slice(&src[row * c + start..row * c + start + len]);
            }
            (vec![r, len], out)
        };
        self.push("slice", Tensor { shape: out_shape, values }, &[ai], Op::Slice { a: ai, axis, start })
    }

    /// Per-row normalization to zero mean and unit variance, then affine.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (xi, gi, bi) = (self.check(x)?, self.check(gain)?, self.check(bias)?);
        let (t, d) = self.matrix_dims("layer_norm", xi)?;
        if d == 0 {
            return Err(Error::dim("layer_norm", &[t, d], &[]));
        }
        if self.vals(gi).len() != d || self.vals(bi).len() != d {
            return Err(Error::dim("layer_norm", &[t, d], self.shape_of(gi)));
        }
        let (src, g, b) = (self.vals(xi), self.vals(gi), self.vals(bi));
        let mut xhat = vec![0.0; t * d];
        let mut inv_std = vec![0.0; t];
        let mut out = vec![0.0; t * d];
        for r in 0..t {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for c in 0..d {
                let h = (row[c] - mean) * inv;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        self.push(
            "layer_norm",
            Tensor { shape: vec![t, d], values: out },
            &[xi, gi, bi],
            Op::LayerNorm { x: xi, gain: gi, bias: bi, xhat, inv_std },
        )
    }

    /// Inverted dropout. Identity when `rate == 0` or outside training.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        let xi = self.check(x)?;
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.vals(xi).len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let values = self.vals(xi).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape_of(xi).to_vec();
        self.push("dropout", Tensor { shape, values }, &[xi], Op::Dropout { a: xi, mask })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let s = self.vals(ai).iter().sum();
        self.push("sum", Tensor::scalar(s), &[ai], Op::Sum(ai))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let ai = self.check(a)?;
        let n = self.vals(ai).len();
        if n == 0 {
            return Err(Error::Contract("mean of empty tensor".into()));
        }
        let s = self.vals(ai).iter().sum::<f64>() / n as f64;
        self.push("mean", Tensor::scalar(s), &[ai], Op::Mean(ai))
    }

    /// Mean over rows with a target of `−log softmax(row)[target]`.
    pub fn nll_rows(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let li = self.check(logits)?;
        let (t, v) = self.matrix_dims("nll_rows", li)?;
        if targets.len() != t {
            return Err(Error::dim("nll_rows", &[t, v], &[targets.len()]));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::Contract("nll_rows needs at least one target".into()));
        }
        let src = self.vals(li);
        let mut probs = vec![0.0; t * v];
        let mut total = 0.0;
        for (r, target) in targets.iter().enumerate() {
            let Some(y) = *target else { continue };
            if y >= v {
                return Err(Error::Index { op: "nll_rows", index: y, size: v });
            }
            let row = &src[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[y];
            for c in 0..v {
                probs[r * v + c] = (row[c] - lse).exp();
            }
        }
        let value = Tensor::scalar(total / count as f64);
        self.push("nll_rows", value, &[li], Op::Nll { logits: li, targets: targets.to_vec(), probs, count })
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate across calls
    /// until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let li = self.check(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[li].value.shape
            )));
        }
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; li + 1];
        pending[li] = Some(vec![1.0]);
        for i in (0..=li).rev() {
            let Some(g) = pending[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut pending);
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        for (i, g) in self.grads.iter().enumerate().take(li + 1) {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of node {i}")));
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], pending: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |j: usize| nodes[j].requires_grad;
        let len = |j: usize| nodes[j].value.values.len();
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (nodes[*a].value.shape[0], nodes[*a].value.shape[1]);
                let n = nodes[*b].value.shape[1];
                if wants(*a) {
                    // dA = dC · Bᵀ
                    gemm(m, n, k, g, false, &nodes[*b].value.values, true, slot(pending, nodes, *a));
                }
                if wants(*b) {
                    // dB = Aᵀ · dC
                    gemm_tn(k, m, n, &nodes[*a].value.values, g, slot(pending, nodes, *b));
                }
            }
            Op::MatMulT { a, b } => {
                let (m, k) = (nodes[*a].value.shape[0], nodes[*a].value.shape[1]);
                let n = nodes[*b].value.shape[0];
                if wants(*a) {
                    // dA = dC · B
                    gemm(m, n, k, g, false, &nodes[*b].value.values, false, slot(pending, nodes, *a));
                }
                if wants(*b) {
                    // dB = dCᵀ · A
                    gemm_tn(n, m, k, g, &nodes[*a].value.values, slot(pending, nodes, *b));
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    let (m, n) = (nodes[*a].value.shape[0], nodes[*a].value.shape[1]);
                    let dst = slot(pending, nodes, *a);
                    for r in 0..m {
                        for c in 0..n {
                            dst[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
            Op::Reshape(a) | Op::Scale(a, _) | Op::AddScalar(a) => {
                if wants(*a) {
                    let f = match nodes[i].op {
                        Op::Scale(_, f) => f,
                        _ => 1.0,
                    };
                    slot(pending, nodes, *a).iter_mut().zip(g).for_each(|(d, gv)| *d += f * gv);
                }
            }
            Op::Add { a, b, bc } | Op::Sub { a, b, bc } => {
                let sign = if matches!(nodes[i].op, Op::Sub { .. }) { -1.0 } else { 1.0 };
                if wants(*a) {
                    slot(pending, nodes, *a).iter_mut().zip(g).for_each(|(d, gv)| *d += gv);
                }
                if wants(*b) {
                    let dst = slot(pending, nodes, *b);
                    match bc {
                        Broadcast::Exact => dst.iter_mut().zip(g).for_each(|(d, gv)| *d += sign * gv),
                        Broadcast::Row => {
                            let n = dst.len();
                            for (idx, gv) in g.iter().enumerate() {
                                dst[idx % n] += sign * gv;
                            }
                        }
                    }
                }
            }
            Op::Mul { a, b, bc } => {
                let (av, bv) = (&nodes[*a].value.values, &nodes[*b].value.values);
                let n = bv.len();
                if wants(*a) {
                    let dst = slot(pending, nodes, *a);
                    for (idx, gv) in g.iter().enumerate() {
                        dst[idx] += gv * bv[idx % n];
                    }
                }
                if wants(*b) {
                    let dst = slot(pending, nodes, *b);
                    match bc {
                        Broadcast::Exact => {
                            for (idx, gv) in g.iter().enumerate() {
                                dst[idx] += gv * av[idx];
                            }
                        }
                        Broadcast::Row => {
                            for (idx, gv) in g.iter().enumerate() {
                                dst[idx % n] += gv * av[idx];
                            }
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if wants(*a) {
                    let dst = slot(pending, nodes, *a);
                    for ((d, gv), y) in dst.iter_mut().zip(g).zip(&out.values) {
                        *d += gv * y * (1.0 - y);
                    }
                }
            }
            Op::Tanh(a) => {
                if wants(*a) {
                    let dst = slot(pending, nodes, *a);
                    for ((d, gv), y) in dst.iter_mut().zip(g).zip(&out.values) {
                        *d += gv * (1.0 - y * y);
                    }
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    let src = &nodes[*a].value.values;
                    let dst = slot(pending, nodes, *a);
                    for ((d, gv), x) in dst.iter_mut().zip(g).zip(src) {
                        if *x > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Exp(a) => {
                if wants(*a) {
                    let dst = slot(pending, nodes, *a);
                    for ((d, gv), y) in dst.iter_mut().zip(g).zip(&out.values) {
                        *d += gv * y;
                    }
                }
            }
            Op::Ln { a, eps } => {
                if wants(*a) {
                    let src = &nodes[*a].value.values;
                    let dst = slot(pending, nodes, *a);
                    for ((d, gv), x) in dst.iter_mut().zip(g).zip(src) {
                        if *x > *eps {
                            *d += gv / x;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if wants(*a) {
                    let n = out.shape[1];
                    let dst = slot(pending, nodes, *a);
                    for (r, (yr, gr)) in out.values.chunks(n.max(1)).zip(g.chunks(n.max(1))).enumerate() {
                        let dot: f64 = yr.iter().zip(gr).map(|(y, gv)| y * gv).sum();
                        for c in 0..yr.len() {
                            dst[r * n + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                if wants(*table) {
                    let d = nodes[*table].value.shape[1];
                    let dst = slot(pending, nodes, *table);
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..d {
                            dst[id * d + c] += g[r * d + c];
                        }
                    }
                }
            }
            Op::Concat { inputs, axis } => {
                if *axis == 0 {
                    let mut offset = 0;
                    for &j in inputs {
                        let l = len(j);
                        if wants(j) {
                            slot(pending, nodes, j).iter_mut().zip(&g[offset..offset + l]).for_each(|(d, gv)| *d += gv);
                        }
                        offset += l;
                    }
                } else {
                    let total = out.shape[1];
                    let rows = out.shape[0];
                    let mut col = 0;
                    for &j in inputs {
                        let w = nodes[j].value.shape[1];
                        if wants(j) {
                            let dst = slot(pending, nodes, j);
                            for r in 0..rows {
                                for c in 0..w {
                                    dst[r * w + c] += g[r * total + col + c];
                                }
                            }
                        }
                        col += w;
                    }
                }
            }
            Op::Slice { a, axis, start } => {
                if wants(*a) {
                    let shape = &nodes[*a].value.shape;
                    let dst = slot(pending, nodes, *a);
                    if shape.len() == 1 || *axis == 0 {
                        let c = if shape.len() == 1 { 1 } else { shape[1] };
                        for (d, gv) in dst[start * c..start * c + g.len()].iter_mut().zip(g) {
                            *d += gv;
                        }
                    } else {
                        let (r, c) = (shape[0], shape[1]);
                        let w = out.shape[1];
                        for row in 0..r {
                            for k in 0..w {
                                dst[row * c + start + k] += g[row * w + k];
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = out.shape[1];
                let t = out.shape[0];
                let gv = &nodes[*gain].value.values;
                if wants(*gain) {
                    let dst = slot(pending, nodes, *gain);
                    for r in 0..t {
                        for c in 0..d {
                            dst[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                }
                if wants(*bias) {
                    let dst = slot(pending, nodes, *bias);
                    for r in 0..t {
                        for c in 0..d {
                            dst[c] += g[r * d + c];
                        }
                    }
                }
                if wants(*x) {
                    let dst = slot(pending, nodes, *x);
                    let mut dxhat = vec![0.0; d];
                    for r in 0..t {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for c in 0..d {
                            dxhat[c] = g[r * d + c] * gv[c];
                            s1 += dxhat[c];
                            s2 += dxhat[c] * xhat[r * d + c];
                        }
                        let k = inv_std[r] / d as f64;
                        for c in 0..d {
                            dst[r * d + c] += k * (d as f64 * dxhat[c] - s1 - xhat[r * d + c] * s2);
                        }
                    }
                }
            }
            Op::Dropout { a, mask } => {
                if wants(*a) {
                    let dst = slot(pending, nodes, *a);
                    for ((d, gv), m) in dst.iter_mut().zip(g).zip(mask) {
                        *d += gv * m;
                    }
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    slot(pending, nodes, *a).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(a) => {
                if wants(*a) {
                    let n = len(*a) as f64;
                    slot(pending, nodes, *a).iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::Nll { logits, targets, probs, count } => {
                if wants(*logits) {
                    let v = nodes[*logits].value.shape[1];
                    let scale = g[0] / *count as f64;
                    let dst = slot(pending, nodes, *logits);
                    for (r, target) in targets.iter().enumerate() {
                        let Some(y) = *target else { continue };
                        for c in 0..v {
                            dst[r * v + c] += scale * probs[r * v + c];
                        }
                        dst[r * v + y] -= scale;
                    }
                }
            }
        }
    }
}

fn slot<'a>(pending: &'a mut [Option<Vec<f64>>], nodes: &[Node], j: usize) -> &'a mut Vec<f64> {
    let n = nodes[j].value.values.len();
    pending[j].get_or_insert_with(|| vec![0.0; n])
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `c += op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64]) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: slice lengths cover the strided extents checked above.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 1.0, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c += aᵀ · b` with `a` stored `k×m` and `b` stored `k×n`.
fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    gemm(m, k, n, a, true, b, false, c);
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::gradcheck;

    const TOL: f64 = 1e-4;
    const H: f64 = 1e-5;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, v.to_vec()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let v = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::matrix(rows, cols, v).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut g = Graph::new();
        let i2 = g.constant(m(2, 2, &[1.0, 0.0, 0.0, 1.0]));
        let a = g.constant(m(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let y = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(y).values(), &[1.0, 2.0, 3.0, 4.0]);

        let r = g.constant(m(1, 2, &[1.0, 2.0]));
        let c = g.constant(m(2, 1, &[3.0, 4.0]));
        let y = g.matmul(r, c).unwrap();
        assert_eq!(g.value(y).values(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 3]));
        match g.matmul(a, b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn matmul_gradient_is_ones_times_b_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 4, 2);
        let mut g = Graph::new();
        let av = g.param(a);
        let bv = g.constant(b.clone());
        let y = g.matmul(av, bv).unwrap();
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        let grad = g.grad(av).unwrap();
        for r in 0..3 {
            for k in 0..4 {
                let expected: f64 = (0..2).map(|c| b.get(k, c)).sum();
                assert!((grad[r * 4 + k] - expected).abs() < 1e-12);
            }
        }
        let rep = gradcheck::check(&[random(&mut rng, 3, 4), random(&mut rng, 4, 2)], H, |g, v| {
            let y = g.matmul(v[0], v[1])?;
            g.sum(y)
        })
        .unwrap();
        assert!(rep.max_rel_err < TOL, "{rep:?}");
    }

    #[test]
    fn elementwise_values() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::vector(vec![0.0]));
        let s = g.elementwise(Elementwise::Sigmoid, &[z]).unwrap();
        let t = g.elementwise(Elementwise::Tanh, &[z]).unwrap();
        assert_eq!(g.value(s).values(), &[0.5]);
        assert_eq!(g.value(t).values(), &[0.0]);
        let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = g.constant(Tensor::vector(vec![3.0, 4.0]));
        let c = g.elementwise(Elementwise::Add, &[a, b]).unwrap();
        assert_eq!(g.value(c).values(), &[4.0, 6.0]);
        assert!(g.elementwise(Elementwise::Add, &[a]).is_err());
    }

    #[test]
    fn broadcast_rules() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros([3, 2]));
        let row = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let y = g.add(a, row).unwrap();
        assert_eq!(g.value(y).values(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let col = g.constant(Tensor::zeros([3, 1]));
        assert!(matches!(g.add(a, col), Err(Error::Dimension { .. })));
        let wide = g.constant(Tensor::zeros([3]));
        assert!(g.mul(a, wide).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(m(1, 2, &[0.0, 0.0]));
        let y = g.softmax_rows(x, None).unwrap();
        assert_eq!(g.value(y).values(), &[0.5, 0.5]);

        let x = g.constant(m(1, 3, &[0.0, 0.0, 0.0]));
        let mask = m(1, 3, &[1.0, 1.0, 0.0]);
        let y = g.softmax_rows(x, Some(&mask)).unwrap();
        assert_eq!(g.value(y).values(), &[0.5, 0.5, 0.0]);

        let x = g.constant(m(1, 3, &[1f64.ln(), 2f64.ln(), 3f64.ln()]));
        let y = g.softmax_rows(x, None).unwrap();
        for (got, want) in g.value(y).values().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((got - want).abs() < 1e-15);
        }

        let x = g.constant(m(2, 2, &[0.0; 4]));
        let mask = m(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(g.softmax_rows(x, Some(&mask)), Err(Error::DegenerateMask { row: 1 })));
    }

    #[test]
    fn embedding_lookup_examples() {
        let table = m(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let mut g = Graph::new();
        let t = g.param(table);
        let y = g.embedding_lookup(t, &[0]).unwrap();
        assert_eq!(g.value(y).values(), &[1.0, 2.0]);

        let y = g.embedding_lookup(t, &[1, 1]).unwrap();
        assert_eq!(g.value(y).values(), &[3.0, 4.0, 3.0, 4.0]);
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(t).unwrap(), &[0.0, 0.0, 2.0, 2.0]);

        let y = g.embedding_lookup(t, &[]).unwrap();
        assert_eq!(g.value(y).shape(), &[0, 2]);

        assert!(matches!(
            g.embedding_lookup(t, &[2]),
            Err(Error::Index { index: 2, size: 2, .. })
        ));
    }

    #[test]
    fn concat_examples() {
        let mut g = Graph::new();
        let a = g.constant(m(1, 1, &[1.0]));
        let b = g.constant(m(1, 1, &[2.0]));
        let y = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 2]);
        assert_eq!(g.value(y).values(), &[1.0, 2.0]);

        let heads: Vec<Var> = (0..4).map(|_| g.constant(Tensor::zeros([5, 3]))).collect();
        let y = g.concat(&heads, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[5, 12]);

        let c = g.constant(Tensor::zeros([2, 1]));
        assert!(g.concat(&[a, c], 1).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let x = g.constant(m(2, 2, &[3.0, 3.0, 1.0, -1.0]));
        let gain = g.constant(Tensor::vector(vec![1.0, 1.0]));
        let bias = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        let v = g.value(y).values();
        assert_eq!(&v[..2], &[0.0, 0.0]);
        let expected = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert!((v[2] - expected).abs() < 1e-15 && (v[3] + expected).abs() < 1e-15);
    }

    #[test]
    fn dropout_identity_cases_and_rate_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert_eq!(g.dropout(x, 0.0, &mut rng, true).unwrap(), x);
        assert_eq!(g.dropout(x, 0.5, &mut rng, false).unwrap(), x);
        assert!(matches!(g.dropout(x, 1.0, &mut rng, true), Err(Error::Config(_))));
    }

    #[test]
    fn dropout_preserves_mean_and_is_seeded() {
        let n = 100_000;
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let x = g.constant(Tensor::vector(vec![1.0; n]));
            let y = g.dropout(x, 0.5, &mut rng, true).unwrap();
            g.value(y).values().to_vec()
        };
        let a = run(11);
        assert_eq!(a, run(11));
        let mean = a.iter().sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        assert!(a.iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![0.0; 3]));
        let s = g.sigmoid(x).unwrap();
        let l = g.sum(s).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.25, 0.25, 0.25]);

        let v = g.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_accumulates_across_calls_until_zeroed() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let y = g.scale(x, 3.0).unwrap();
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
        g.zero_grad();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0]);
    }

    #[test]
    fn reused_tensor_accumulates_both_paths() {
        // f(x) = sum(tanh(x) * x + 2x); df/dx = (1 - tanh²) x + tanh + 2
        let xs = [0.3, -0.7, 1.1];
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(xs.to_vec()));
        let t = g.tanh(x).unwrap();
        let p = g.mul(t, x).unwrap();
        let d = g.scale(x, 2.0).unwrap();
        let s = g.add(p, d).unwrap();
        let l = g.sum(s).unwrap();
        g.backward(l).unwrap();
        for (gv, x) in g.grad(x).unwrap().iter().zip(xs) {
            let th = x.tanh();
            assert!((gv - ((1.0 - th * th) * x + th + 2.0)).abs() < 1e-14);
        }
    }

    #[test]
    fn foreign_variable_is_rejected() {
        let mut a = Graph::new();
        let mut b = Graph::new();
        let x = a.constant(Tensor::scalar(1.0));
        assert!(matches!(b.neg(x), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_values_are_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(1000.0));
        assert!(matches!(g.exp(x), Err(Error::NonFinite(_))));
    }

    #[test]
    fn nll_rows_matches_log_softmax() {
        let logits = m(2, 3, &[0.1, 0.2, 0.3, 1.0, -1.0, 0.5]);
        let mut g = Graph::new();
        let l = g.constant(logits.clone());
        let y = g.nll_rows(l, &[Some(2), None]).unwrap();
        let row = logits.row(0);
        let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
        assert!((g.value(y).item() - (lse - 0.3)).abs() < 1e-14);
        assert!(g.nll_rows(l, &[None, None]).is_err());
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let inputs = [random(&mut rng, 3, 4), random(&mut rng, 4, 4), random(&mut rng, 1, 4)];
        let rep = gradcheck::check(&inputs, H, |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let h = g.add(h, v[2])?;
            let h = g.tanh(h)?;
            g.sum(h)
        })
        .unwrap();
        assert!(rep.max_rel_err < TOL, "{rep:?}");
    }
}
