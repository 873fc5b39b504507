//! Tape-based reverse-mode automatic differentiation.
//!
//! Every primitive appends a node holding its output value and enough context
//! to apply its vector-Jacobian product. [`Tape::backward`] walks the nodes in
//! reverse insertion order, which is a valid reverse topological order because
//! a node can only reference nodes created before it.
//!
//! Leaves borrowed from a [`Tensor`] are not copied; the tape lives for one
//! training step and is dropped afterwards.

use std::borrow::Cow;

use super::gemm::gemm;
use super::tensor::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Exp,
    Log,
    Relu,
    Sqrt,
    Abs,
    Gelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool, m: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, tb: bool, batch: usize, m: usize, k: usize, n: usize },
    Binary { op: Binary, a: Var, b: Var },
    AddTiled { x: Var, tile: Var },
    MulTiled { x: Var, tile: Var },
    AddScalar(Var),
    Scale(Var, f64),
    Unary(Unary, Var),
    LogFloor(Var, f64),
    SumAll(Var),
    ReduceAxis { x: Var, outer: usize, len: usize, inner: usize, mean: bool },
    L2Norm(Var),
    NormalizeRows { x: Var, inv_norms: Vec<f64> },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LogSumExpRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    SplitHeads { x: Var, batch: usize, tokens: usize, heads: usize, part: usize, parts: usize },
    MergeHeads { x: Var, batch: usize, tokens: usize, heads: usize },
    PrependRow { x: Var, row: Var, groups: usize },
    SelectRows { x: Var, rows: Vec<usize> },
    Reshape(Var),
}

struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by leaf [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Adds the gradient of `v` into `t`; no-op if `t` does not require grad.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) {
        if let Some(g) = self.get(v) {
            t.accumulate_grad(g);
        }
    }
}

pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    grad_enabled: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true }
    }

    /// A tape that records values only; every node is treated as constant.
    pub fn no_grad() -> Self {
        Self { nodes: Vec::new(), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [f64]>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, op, needs_grad: needs_grad && self.grad_enabled });
        Var(self.nodes.len() - 1)
    }

    fn push_owned(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(shape, Cow::Owned(value), op, needs)
    }

    /// Records a tensor by reference. It takes part in backward iff it
    /// requires grad and the tape has gradients enabled.
    pub fn leaf(&mut self, t: &'a Tensor) -> Var {
        self.push(t.shape().to_vec(), Cow::Borrowed(t.data()), Op::Leaf, t.requires_grad())
    }

    /// Records an owned value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        Ok(self.constant(Tensor::new(shape, data)?))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "scalar_value on non-scalar");
        val[0]
    }

    /// Copies the value of `v` into a fresh tensor (without grad tracking).
    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("node shapes are consistent")
    }

    fn matrix_dims(&self, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Shape(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `op(a) · op(b)` where `op` transposes when the matching flag is set.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (ar, ac) = self.matrix_dims(a)?;
        let (br, bc) = self.matrix_dims(b)?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner dimensions differ: {:?}{} · {:?}{}",
                self.shape(a),
                if ta { "ᵀ" } else { "" },
                self.shape(b),
                if tb { "ᵀ" } else { "" },
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), ta, self.value(b), tb, 0.0, &mut out);
        Ok(self.push_owned(vec![m, n], out, Op::MatMul { a, b, ta, tb, m, k, n }, &[a, b]))
    }

    /// Batched `a[i] · b[i]` (or `a[i] · b[i]ᵀ` with `tb`) over the leading axis.
    pub fn batch_matmul(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k) = match sa[..] {
            [x, y, z] => (x, y, z),
            _ => return Err(Error::Shape(format!("batch_matmul lhs must be 3-d, got {sa:?}"))),
        };
        let (bb, k2, n) = match sb[..] {
            [x, y, z] if tb => (x, z, y),
            [x, y, z] => (x, y, z),
            _ => return Err(Error::Shape(format!("batch_matmul rhs must be 3-d, got {sb:?}"))),
        };
        if bb != batch || k2 != k {
            return Err(Error::Shape(format!("batch_matmul shapes differ: {sa:?} · {sb:?} (tb={tb})")));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[i * m * k..(i + 1) * m * k],
                    false,
                    &bv[i * k * n..(i + 1) * k * n],
                    tb,
                    0.0,
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        Ok(self.push_owned(vec![batch, m, n], out, Op::BatchMatMul { a, b, tb, batch, m, k, n }, &[a, b]))
    }

    // ---- elementwise ----------------------------------------------------

    /// Elementwise binary op on equal shapes, or with either side a scalar.
    pub fn binary(&mut self, op: Binary, a: Var, b: Var) -> Result<Var> {
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        let shape = if self.shape(a) == self.shape(b) || lb == 1 {
            self.shape(a).to_vec()
        } else if la == 1 {
            self.shape(b).to_vec()
        } else {
            return Err(Error::Shape(format!("cannot broadcast {:?} with {:?}", self.shape(a), self.shape(b))));
        };
        let n = numel(&shape);
        let (av, bv) = (self.value(a), self.value(b));
        let at = |i: usize| if la == 1 { av[0] } else { av[i] };
        let bt = |i: usize| if lb == 1 { bv[0] } else { bv[i] };
        if op == Binary::Div {
            if let Some(i) = (0..n).find(|&i| bt(i) == 0.0) {
                return Err(Error::Numeric(format!("division by zero at flat index {i}")));
            }
        }
        let out: Vec<f64> = (0..n)
            .map(|i| match op {
                Binary::Add => at(i) + bt(i),
                Binary::Sub => at(i) - bt(i),
                Binary::Mul => at(i) * bt(i),
                Binary::Div => at(i) / bt(i),
            })
            .collect();
        Ok(self.push_owned(shape, out, Op::Binary { op, a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn check_tile(&self, x: Var, tile: Var) -> Result<()> {
        let (lx, lt) = (self.value(x).len(), self.value(tile).len());
        if lx % lt != 0 || self.shape(x).last() != self.shape(tile).last() {
            return Err(Error::Shape(format!("cannot tile {:?} over {:?}", self.shape(tile), self.shape(x))));
        }
        Ok(())
    }

    /// `x + tile` with `tile` repeated along the leading rows of `x`
    /// (bias rows, positional embeddings).
    pub fn add_tiled(&mut self, x: Var, tile: Var) -> Result<Var> {
        self.check_tile(x, tile)?;
        let (xv, tv) = (self.value(x), self.value(tile));
        let out: Vec<f64> = xv.iter().enumerate().map(|(i, v)| v + tv[i % tv.len()]).collect();
        Ok(self.push_owned(self.shape(x).to_vec(), out, Op::AddTiled { x, tile }, &[x, tile]))
    }

    /// `x * tile` with the same repetition rule as [`Tape::add_tiled`].
    pub fn mul_tiled(&mut self, x: Var, tile: Var) -> Result<Var> {
        self.check_tile(x, tile)?;
        let (xv, tv) = (self.value(x), self.value(tile));
        let out: Vec<f64> = xv.iter().enumerate().map(|(i, v)| v * tv[i % tv.len()]).collect();
        Ok(self.push_owned(self.shape(x).to_vec(), out, Op::MulTiled { x, tile }, &[x, tile]))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v + c).collect();
        self.push_owned(self.shape(x).to_vec(), out, Op::AddScalar(x), &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        self.push_owned(self.shape(x).to_vec(), out, Op::Scale(x, c), &[x])
    }

    pub fn unary(&mut self, op: Unary, x: Var) -> Result<Var> {
        let xv = self.value(x);
        match op {
            Unary::Log => {
                if let Some(i) = xv.iter().position(|&v| v <= 0.0 || v.is_nan()) {
                    return Err(Error::Numeric(format!("log of non-positive value {} at index {i}", xv[i])));
                }
            }
            Unary::Sqrt => {
                if let Some(i) = xv.iter().position(|&v| v < 0.0 || v.is_nan()) {
                    return Err(Error::Numeric(format!("sqrt of negative value {} at index {i}", xv[i])));
                }
            }
            _ => {}
        }
        let f: fn(f64) -> f64 = match op {
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Relu => |v| if v > 0.0 { v } else { 0.0 },
            Unary::Sqrt => f64::sqrt,
            Unary::Abs => f64::abs,
            Unary::Gelu => gelu,
        };
        let out = xv.iter().map(|&v| f(v)).collect();
        Ok(self.push_owned(self.shape(x).to_vec(), out, Op::Unary(op, x), &[x]))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x).expect("exp is total")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x).expect("relu is total")
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(Unary::Abs, x).expect("abs is total")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(Unary::Gelu, x).expect("gelu is total")
    }

    /// `ln(max(x, floor))`; entries below the floor get zero gradient.
    pub fn log_floor(&mut self, x: Var, floor: f64) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(floor).ln()).collect();
        self.push_owned(self.shape(x).to_vec(), out, Op::LogFloor(x, floor), &[x])
    }

    // ---- reductions -----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push_owned(vec![1], vec![s], Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("axis {axis} out of range for {shape:?}")));
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let xv = self.value(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &xv[(o * len + l) * inner..(o * len + l + 1) * inner];
                out[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= len as f64);
        }
        let mut out_shape: Vec<usize> = shape[..axis].iter().chain(&shape[axis + 1..]).copied().collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(self.push_owned(out_shape, out, Op::ReduceAxis { x, outer, len, inner, mean }, &[x]))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    /// Euclidean norm of the whole tensor; gradient is 0 at the zero vector.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let n = self.value(x).iter().map(|v| v * v).sum::<f64>().sqrt();
        self.push_owned(vec![1], vec![n], Op::L2Norm(x), &[x])
    }

    /// Divides each row by its L2 norm. Zero rows map to zero rows with zero
    /// gradient.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let cols = *self.shape(x).last().expect("non-empty shape");
        let xv = self.value(x);
        let mut out = vec![0.0; xv.len()];
        let mut inv_norms = Vec::with_capacity(xv.len() / cols);
        for (src, dst) in xv.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
            let n = src.iter().map(|v| v * v).sum::<f64>().sqrt();
            let inv = if n > 0.0 { 1.0 / n } else { 0.0 };
            dst.iter_mut().zip(src).for_each(|(d, s)| *d = s * inv);
            inv_norms.push(inv);
        }
        self.push_owned(self.shape(x).to_vec(), out, Op::NormalizeRows { x, inv_norms }, &[x])
    }

    /// Row softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let cols = *self.shape(x).last().expect("non-empty shape");
        let mut out = self.value(x).to_vec();
        out.chunks_exact_mut(cols).for_each(softmax_in_place);
        self.push_owned(self.shape(x).to_vec(), out, Op::SoftmaxRows(x), &[x])
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let cols = *self.shape(x).last().expect("non-empty shape");
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(cols) {
            let lse = logsumexp(row);
            row.iter_mut().for_each(|v| *v -= lse);
        }
        self.push_owned(self.shape(x).to_vec(), out, Op::LogSoftmaxRows(x), &[x])
    }

    pub fn logsumexp_rows(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().expect("non-empty shape");
        let out: Vec<f64> = self.value(x).chunks_exact(cols).map(logsumexp).collect();
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        self.push_owned(out_shape, out, Op::LogSumExpRows(x), &[x])
    }

    // ---- fused layers and layout ops ------------------------------------

    /// Layer normalization over the last axis with elementwise gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let cols = *self.shape(x).last().expect("non-empty shape");
        if self.value(gain).len() != cols || self.value(bias).len() != cols {
            return Err(Error::Shape(format!(
                "layer_norm width {cols} vs gain {:?} / bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let rows = xv.len() / cols;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = Vec::with_capacity(rows);
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let src = &xv[r * cols..(r + 1) * cols];
            let mu = src.iter().sum::<f64>() / cols as f64;
            let var = src.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for c in 0..cols {
                let h = (src[c] - mu) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * gv[c] + bv[c];
            }
        }
        Ok(self.push_owned(self.shape(x).to_vec(), out, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias]))
    }

    /// Pulls head-major slices out of a fused projection.
    ///
    /// `x` is `[batch*tokens, parts*width]`; returns part `part` laid out as
    /// `[batch*heads, tokens, width/heads]`.
    pub fn split_heads(
        &mut self,
        x: Var,
        batch: usize,
        tokens: usize,
        heads: usize,
        part: usize,
        parts: usize,
    ) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(x)?;
        if rows != batch * tokens || cols % parts != 0 || (cols / parts) % heads != 0 || part >= parts {
            return Err(Error::Shape(format!(
                "split_heads: {:?} vs batch={batch} tokens={tokens} heads={heads} parts={parts}",
                self.shape(x)
            )));
        }
        let width = cols / parts;
        let dh = width / heads;
        let xv = self.value(x);
        let mut out = vec![0.0; batch * tokens * width];
        for b in 0..batch {
            for t in 0..tokens {
                let src = &xv[(b * tokens + t) * cols + part * width..][..width];
                for h in 0..heads {
                    let dst = ((b * heads + h) * tokens + t) * dh;
                    out[dst..dst + dh].copy_from_slice(&src[h * dh..(h + 1) * dh]);
                }
            }
        }
        Ok(self.push_owned(
            vec![batch * heads, tokens, dh],
            out,
            Op::SplitHeads { x, batch, tokens, heads, part, parts },
            &[x],
        ))
    }

    /// Inverse layout of [`Tape::split_heads`]: `[batch*heads, tokens, dh]`
    /// back to `[batch*tokens, heads*dh]`.
    pub fn merge_heads(&mut self, x: Var, batch: usize, heads: usize) -> Result<Var> {
        let (bh, tokens, dh) = match self.shape(x) {
            [a, b, c] => (*a, *b, *c),
            s => return Err(Error::Shape(format!("merge_heads expects 3-d, got {s:?}"))),
        };
        if bh != batch * heads {
            return Err(Error::Shape(format!("merge_heads: leading axis {bh} != {batch}*{heads}")));
        }
        let xv = self.value(x);
        let width = heads * dh;
        let mut out = vec![0.0; xv.len()];
        for b in 0..batch {
            for h in 0..heads {
                for t in 0..tokens {
                    let src = ((b * heads + h) * tokens + t) * dh;
                    let dst = (b * tokens + t) * width + h * dh;
                    out[dst..dst + dh].copy_from_slice(&xv[src..src + dh]);
                }
            }
        }
        Ok(self.push_owned(vec![batch * tokens, width], out, Op::MergeHeads { x, batch, tokens, heads }, &[x]))
    }

    /// Splits `x` (`[groups*n, d]`) into `groups` blocks and prepends `row`
    /// (`[d]`) to each, giving `[groups*(n+1), d]`.
    pub fn prepend_row(&mut self, x: Var, row: Var, groups: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(x)?;
        if rows % groups != 0 || self.value(row).len() != cols {
            return Err(Error::Shape(format!(
                "prepend_row: {:?} with row {:?} into {groups} groups",
                self.shape(x),
                self.shape(row)
            )));
        }
        let n = rows / groups;
        let (xv, rv) = (self.value(x), self.value(row));
        let mut out = Vec::with_capacity((rows + groups) * cols);
        for g in 0..groups {
            out.extend_from_slice(rv);
            out.extend_from_slice(&xv[g * n * cols..(g + 1) * n * cols]);
        }
        Ok(self.push_owned(vec![rows + groups, cols], out, Op::PrependRow { x, row, groups }, &[x, row]))
    }

    /// Gathers rows of a matrix.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, cols) = self.matrix_dims(x)?;
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::Shape(format!("row {bad} out of range for {n} rows")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            out.extend_from_slice(&xv[r * cols..(r + 1) * cols]);
        }
        Ok(self.push_owned(vec![rows.len(), cols], out, Op::SelectRows { x, rows: rows.to_vec() }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.value(x).len() {
            return Err(Error::Shape(format!("cannot reshape {:?} into {shape:?}", self.shape(x))));
        }
        let out = self.value(x).to_vec();
        Ok(self.push_owned(shape.to_vec(), out, Op::Reshape(x), &[x]))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse pass from a scalar `loss`. Returns gradients for every leaf
    /// that requires grad and is reachable from `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.needs_grad) {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value[..];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, ta, tb, m, k, n } => {
                if let Some(ga) = self.slot(grads, a) {
                    if ta {
                        gemm(k, n, m, self.value(b), tb, g, true, 1.0, ga);
                    } else {
                        gemm(m, n, k, g, false, self.value(b), !tb, 1.0, ga);
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    if tb {
                        gemm(n, m, k, g, true, self.value(a), ta, 1.0, gb);
                    } else {
                        gemm(k, m, n, self.value(a), !ta, g, false, 1.0, gb);
                    }
                }
            }
            &Op::BatchMatMul { a, b, tb, batch, m, k, n } => {
                let (av, bv) = (self.value(a), self.value(b));
                if let Some(ga) = self.slot(grads, a) {
                    for s in 0..batch {
                        let gs = &g[s * m * n..(s + 1) * m * n];
                        gemm(
                            m,
                            n,
                            k,
                            gs,
                            false,
                            &bv[s * k * n..(s + 1) * k * n],
                            !tb,
                            1.0,
                            &mut ga[s * m * k..(s + 1) * m * k],
                        );
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    for s in 0..batch {
                        let gs = &g[s * m * n..(s + 1) * m * n];
                        let asl = &av[s * m * k..(s + 1) * m * k];
                        let dst = &mut gb[s * k * n..(s + 1) * k * n];
                        if tb {
                            gemm(n, m, k, gs, true, asl, false, 1.0, dst);
                        } else {
                            gemm(k, m, n, asl, true, gs, false, 1.0, dst);
                        }
                    }
                }
            }
            &Op::Binary { op, a, b } => {
                let (av, bv) = (self.value(a), self.value(b));
                let (la, lb) = (av.len(), bv.len());
                let at = |j: usize| if la == 1 { av[0] } else { av[j] };
                let bt = |j: usize| if lb == 1 { bv[0] } else { bv[j] };
                if let Some(ga) = self.slot(grads, a) {
                    for (j, gj) in g.iter().enumerate() {
                        let d = match op {
                            Binary::Add | Binary::Sub => *gj,
                            Binary::Mul => gj * bt(j),
                            Binary::Div => gj / bt(j),
                        };
                        ga[if la == 1 { 0 } else { j }] += d;
                    }
                }
                if let Some(gb) = self.slot(grads, b) {
                    for (j, gj) in g.iter().enumerate() {
                        let d = match op {
                            Binary::Add => *gj,
                            Binary::Sub => -gj,
                            Binary::Mul => gj * at(j),
                            Binary::Div => -gj * at(j) / (bt(j) * bt(j)),
                        };
                        gb[if lb == 1 { 0 } else { j }] += d;
                    }
                }
            }
            &Op::AddTiled { x, tile } => {
                if let Some(gx) = self.slot(grads, x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if let Some(gt) = self.slot(grads, tile) {
                    let n = gt.len();
                    for chunk in g.chunks_exact(n) {
                        gt.iter_mut().zip(chunk).for_each(|(d, s)| *d += s);
                    }
                }
            }
            &Op::MulTiled { x, tile } => {
                let (xv, tv) = (self.value(x), self.value(tile));
                let n = tv.len();
                if let Some(gx) = self.slot(grads, x) {
                    for (j, d) in gx.iter_mut().enumerate() {
                        *d += g[j] * tv[j % n];
                    }
                }
                if let Some(gt) = self.slot(grads, tile) {
                    for (j, gj) in g.iter().enumerate() {
                        gt[j % n] += gj * xv[j];
                    }
                }
            }
            &Op::AddScalar(x) => {
                if let Some(gx) = self.slot(grads, x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
            &Op::Scale(x, c) => {
                if let Some(gx) = self.slot(grads, x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += c * s);
                }
            }
            &Op::Unary(op, x) => {
                let xv = self.value(x);
                if let Some(gx) = self.slot(grads, x) {
                    for j in 0..gx.len() {
                        let v = xv[j];
                        let dydx = match op {
                            Unary::Exp => y[j],
                            Unary::Log => 1.0 / v,
                            Unary::Relu => {
                                if v > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Sqrt => {
                                if y[j] > 0.0 {
                                    0.5 / y[j]
                                } else {
                                    0.0
                                }
                            }
                            Unary::Abs => {
                                if v > 0.0 {
                                    1.0
                                } else if v < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Gelu => gelu_grad(v),
                        };
                        gx[j] += g[j] * dydx;
                    }
                }
            }
            &Op::LogFloor(x, floor) => {
                let xv = self.value(x);
                if let Some(gx) = self.slot(grads, x) {
                    for j in 0..gx.len() {
                        if xv[j] > floor {
                            gx[j] += g[j] / xv[j];
                        }
                    }
                }
            }
            &Op::SumAll(x) => {
                if let Some(gx) = self.slot(grads, x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            &Op::ReduceAxis { x, outer, len, inner, mean } => {
                if let Some(gx) = self.slot(grads, x) {
                    let f = if mean { 1.0 / len as f64 } else { 1.0 };
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for l in 0..len {
                            let dst = &mut gx[(o * len + l) * inner..(o * len + l + 1) * inner];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += f * s);
                        }
                    }
                }
            }
            &Op::L2Norm(x) => {
                let xv = self.value(x);
                let n = y[0];
                if let Some(gx) = self.slot(grads, x) {
                    if n > 0.0 {
                        gx.iter_mut().zip(xv).for_each(|(d, v)| *d += g[0] * v / n);
                    }
                }
            }
            Op::NormalizeRows { x, inv_norms } => {
                let cols = *node.shape.last().unwrap();
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, &inv) in inv_norms.iter().enumerate() {
                        if inv == 0.0 {
                            continue;
                        }
                        let (yr, gr) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            gx[r * cols + c] += (gr[c] - yr[c] * dot) * inv;
                        }
                    }
                }
            }
            &Op::SoftmaxRows(x) => {
                let cols = *node.shape.last().unwrap();
                if let Some(gx) = self.slot(grads, x) {
                    for ((yr, gr), dr) in y.chunks_exact(cols).zip(g.chunks_exact(cols)).zip(gx.chunks_exact_mut(cols))
                    {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            dr[c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            &Op::LogSoftmaxRows(x) => {
                let cols = *node.shape.last().unwrap();
                if let Some(gx) = self.slot(grads, x) {
                    for ((yr, gr), dr) in y.chunks_exact(cols).zip(g.chunks_exact(cols)).zip(gx.chunks_exact_mut(cols))
                    {
                        let gsum: f64 = gr.iter().sum();
                        for c in 0..cols {
                            dr[c] += gr[c] - yr[c].exp() * gsum;
                        }
                    }
                }
            }
            &Op::LogSumExpRows(x) => {
                let xv = self.value(x);
                let cols = *self.shape(x).last().unwrap();
                if let Some(gx) = self.slot(grads, x) {
                    for (r, (xr, dr)) in xv.chunks_exact(cols).zip(gx.chunks_exact_mut(cols)).enumerate() {
                        for c in 0..cols {
                            dr[c] += g[r] * (xr[c] - y[r]).exp();
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let cols = *node.shape.last().unwrap();
                let gv = self.value(*gain);
                if let Some(gg) = self.slot(grads, *gain) {
                    for (hr, gr) in xhat.chunks_exact(cols).zip(g.chunks_exact(cols)) {
                        for c in 0..cols {
                            gg[c] += gr[c] * hr[c];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for gr in g.chunks_exact(cols) {
                        gb.iter_mut().zip(gr).for_each(|(d, s)| *d += s);
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let mut dh = vec![0.0; cols];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            dh[c] = gr[c] * gv[c];
                        }
                        let m1 = dh.iter().sum::<f64>() / cols as f64;
                        let m2 = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for c in 0..cols {
                            gx[r * cols + c] += rs * (dh[c] - m1 - hr[c] * m2);
                        }
                    }
                }
            }
            &Op::SplitHeads { x, batch, tokens, heads, part, parts } => {
                if let Some(gx) = self.slot(grads, x) {
                    let dh = node.shape[2];
                    let width = dh * heads;
                    let cols = width * parts;
                    for b in 0..batch {
                        for t in 0..tokens {
                            let base = (b * tokens + t) * cols + part * width;
                            for h in 0..heads {
                                let src = ((b * heads + h) * tokens + t) * dh;
                                let dst = &mut gx[base + h * dh..base + (h + 1) * dh];
                                dst.iter_mut().zip(&g[src..src + dh]).for_each(|(d, s)| *d += s);
                            }
                        }
                    }
                }
            }
            &Op::MergeHeads { x, batch, tokens, heads } => {
                if let Some(gx) = self.slot(grads, x) {
                    let width = node.shape[1];
                    let dh = width / heads;
                    for b in 0..batch {
                        for h in 0..heads {
                            for t in 0..tokens {
                                let dst = ((b * heads + h) * tokens + t) * dh;
                                let src = (b * tokens + t) * width + h * dh;
                                gx[dst..dst + dh].iter_mut().zip(&g[src..src + dh]).for_each(|(d, s)| *d += s);
                            }
                        }
                    }
                }
            }
            &Op::PrependRow { x, row, groups } => {
                let cols = node.shape[1];
                let n = node.shape[0] / groups - 1;
                if let Some(gx) = self.slot(grads, x) {
                    for gi in 0..groups {
                        let src = &g[(gi * (n + 1) + 1) * cols..(gi + 1) * (n + 1) * cols];
                        let dst = &mut gx[gi * n * cols..(gi + 1) * n * cols];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
                if let Some(gr) = self.slot(grads, row) {
                    for gi in 0..groups {
                        let src = &g[gi * (n + 1) * cols..(gi * (n + 1) + 1) * cols];
                        gr.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
            }
            &Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
            Op::SelectRows { x, rows } => {
                let cols = node.shape[1];
                if let Some(gx) = self.slot(grads, *x) {
                    for (i, &r) in rows.iter().enumerate() {
                        let dst = &mut gx[r * cols..(r + 1) * cols];
                        dst.iter_mut().zip(&g[i * cols..(i + 1) * cols]).for_each(|(d, s)| *d += s);
                    }
                }
            }
        }
    }

    /// Gradient buffer for `v`, allocated on first use; `None` if `v` is constant.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Shift by the row max (the log-sum-exp pivot), exponentiate, normalize.
pub fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
