//! Reverse-mode tape. Operations append nodes in execution order, so node
//! index order is a topological order and backward is a single reverse sweep.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};
use num_traits::Float;

use super::sparse::SparseMatrix;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(1);

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: usize,
    idx: usize,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Matmul(usize, usize),
    MatmulNt(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, F),
    Relu(usize),
    Gelu(usize),
    LogSigmoid(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        normalized: Vec<F>,
        rstd: Vec<F>,
    },
    Softmax(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<F>,
    },
    Sum(usize),
    RowSums(usize),
    GatherRows {
        src: usize,
        index: Vec<usize>,
    },
    ConcatRows(Vec<usize>),
    SliceCols {
        src: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    Spmm {
        matrix: Arc<SparseMatrix>,
        x: usize,
    },
}

#[derive(Debug)]
struct Node<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    op: Op<F>,
    requires_grad: bool,
}

impl<F> Node<F> {
    fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }
    fn rows(&self) -> usize {
        self.value.len() / self.cols().max(1)
    }
}

#[derive(Debug)]
pub struct Tape<F = f32> {
    id: usize,
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    check_finite: bool,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn matmul_into<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let s = a[i * k + p];
            // Zero entries contribute nothing; skipping them also keeps masked
            // attention weights from touching later positions at all.
            if s == F::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + s * bv;
            }
        }
    }
}

fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

const GELU_C: f64 = 0.044_715;

fn gelu_parts<F: Scalar>(x: F) -> (F, F) {
    let k = F::of(Float::sqrt(2.0 / core::f64::consts::PI));
    let c = F::of(GELU_C);
    let half = F::of(0.5);
    let u = k * (x + c * x * x * x);
    let t = u.tanh();
    let y = half * x * (F::one() + t);
    let dy = half * (F::one() + t)
        + half * x * (F::one() - t * t) * k * (F::one() + F::of(3.0) * c * x * x);
    (y, dy)
}

fn log_sigmoid<F: Scalar>(x: F) -> F {
    x.min(F::zero()) - (F::one() + (-x.abs()).exp()).ln()
}

fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Softmax of `row` restricted to its first `live` entries; the rest are 0.
fn softmax_into<F: Scalar>(row: &[F], live: usize, out: &mut [F]) {
    let max = row[..live]
        .iter()
        .copied()
        .fold(F::neg_infinity(), |m, v| if v > m { v } else { m });
    let mut sum = F::zero();
    for j in 0..live {
        let e = (row[j] - max).exp();
        out[j] = e;
        sum = sum + e;
    }
    for o in out[..live].iter_mut() {
        *o = *o / sum;
    }
    for o in out[live..].iter_mut() {
        *o = F::zero();
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Toggle the non-finite input check (on by default in debug builds).
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node. Handles issued before the call become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.id = NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed);
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Contract(alloc::format!(
                "variable {} does not belong to the active tape",
                v.idx
            )));
        }
        Ok(v.idx)
    }

    fn check(&self, op: &'static str, inputs: &[usize]) -> Result<()> {
        if self.check_finite {
            for &i in inputs {
                if self.nodes[i].value.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NumericDomain { op });
                }
            }
        }
        Ok(())
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op<F>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn rg(&self, parents: &[usize]) -> bool {
        parents.iter().any(|&p| self.nodes[p].requires_grad)
    }

    /// Records a copy of `t`; gradients flow to it only if `t` requires them.
    pub fn leaf(&mut self, t: &Tensor<F>) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<F>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.idx].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.idx].shape
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<F> {
        let n = &self.nodes[v.idx];
        Tensor::new(&n.shape, n.value.clone()).expect("recorded shapes are valid")
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        if v.tape != self.id {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_deref())
    }

    /// Accumulates the gradient held for `v` into `t.grad`.
    pub fn write_grad(&self, v: Var, t: &mut Tensor<F>) -> Result<()> {
        match self.grad(v) {
            Some(g) => t.accumulate_grad(g),
            None => Ok(()),
        }
    }

    fn dims2(&self, i: usize) -> (usize, usize) {
        let n = &self.nodes[i];
        (n.rows(), n.cols())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let (m, k) = self.dims2(a);
        let (k2, n) = self.dims2(b);
        if k != k2 || self.nodes[a].shape.len() != 2 || self.nodes[b].shape.len() != 2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.nodes[a].shape.clone(),
                rhs: self.nodes[b].shape.clone(),
            });
        }
        self.check("matmul", &[a, b])?;
        let mut out = vec![F::zero(); m * n];
        matmul_into(
            &self.nodes[a].value,
            &self.nodes[b].value,
            m,
            k,
            n,
            &mut out,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::Matmul(a, b), rg))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let (m, k) = self.dims2(a);
        let (n, k2) = self.dims2(b);
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul_nt",
                lhs: self.nodes[a].shape.clone(),
                rhs: self.nodes[b].shape.clone(),
            });
        }
        self.check("matmul_nt", &[a, b])?;
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = dot(&av[i * k..(i + 1) * k], &bv[j * k..(j + 1) * k]);
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatmulNt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let (m, n) = self.dims2(a);
        let av = &self.nodes[a].value;
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = av[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![n, m], out, Op::Transpose(a), rg))
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        if self.nodes[a].value.len() != self.nodes[b].value.len() || self.dims2(a) != self.dims2(b)
        {
            return Err(Error::Dimension {
                op,
                lhs: self.nodes[a].shape.clone(),
                rhs: self.nodes[b].shape.clone(),
            });
        }
        Ok(())
    }

    fn zip_op(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
        op: fn(usize, usize) -> Op<F>,
    ) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(name, a, b)?;
        self.check(name, &[a, b])?;
        let out = self.nodes[a]
            .value
            .iter()
            .zip(&self.nodes[b].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a, b]);
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(shape, out, op(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_op("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Adds a row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(bias)?);
        let (_, n) = self.dims2(a);
        if self.nodes[b].value.len() != n {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: self.nodes[a].shape.clone(),
                rhs: self.nodes[b].shape.clone(),
            });
        }
        self.check("add_row", &[a, b])?;
        let bv = &self.nodes[b].value;
        let out = self.nodes[a]
            .value
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[i % n])
            .collect();
        let rg = self.rg(&[a, b]);
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(shape, out, Op::AddRow(a, b), rg))
    }

    fn map_op(&mut self, name: &'static str, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Result<Var> {
        let a = self.idx(a)?;
        self.check(name, &[a])?;
        let out = self.nodes[a].value.iter().map(|&x| f(x)).collect();
        let rg = self.rg(&[a]);
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(shape, out, op, rg))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Result<Var> {
        let i = self.idx(a)?;
        self.map_op("scale", a, |x| x * c, Op::Scale(i, c))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let i = self.idx(a)?;
        self.map_op("relu", a, |x| x.max(F::zero()), Op::Relu(i))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let i = self.idx(a)?;
        self.map_op("gelu", a, |x| gelu_parts(x).0, Op::Gelu(i))
    }

    /// `ln σ(x)`, computed without overflow.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        let i = self.idx(a)?;
        self.map_op("log_sigmoid", a, log_sigmoid, Op::LogSigmoid(i))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (x, g, b) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let (m, n) = self.dims2(x);
        if self.nodes[g].value.len() != n || self.nodes[b].value.len() != n {
            return Err(Error::Dimension {
                op: "layernorm",
                lhs: self.nodes[x].shape.clone(),
                rhs: self.nodes[g].shape.clone(),
            });
        }
        self.check("layernorm", &[x, g, b])?;
        let eps = F::of(LAYERNORM_EPS);
        let nf = F::of(n as f64);
        let xv = &self.nodes[x].value;
        let (gv, bv) = (&self.nodes[g].value, &self.nodes[b].value);
        let mut normalized = vec![F::zero(); m * n];
        let mut rstd = vec![F::zero(); m];
        let mut out = vec![F::zero(); m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().fold(F::zero(), |s, &v| s + v) / nf;
            let var = row
                .iter()
                .fold(F::zero(), |s, &v| s + (v - mean) * (v - mean))
                / nf;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                normalized[r * n + c] = h;
                out[r * n + c] = h * gv[c] + bv[c];
            }
        }
        let rg = self.rg(&[x, g, b]);
        let shape = self.nodes[x].shape.clone();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma: g,
                beta: b,
                normalized,
                rstd,
            },
            rg,
        ))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, false)
    }

    /// Row-wise softmax of a square score matrix where row `i` only sees
    /// columns `0..=i`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        self.softmax_impl(a, true)
    }

    fn softmax_impl(&mut self, a: Var, causal: bool) -> Result<Var> {
        let a = self.idx(a)?;
        let (m, n) = self.dims2(a);
        if causal && m != n {
            return Err(Error::Dimension {
                op: "causal_softmax",
                lhs: self.nodes[a].shape.clone(),
                rhs: vec![m, m],
            });
        }
        self.check("softmax", &[a])?;
        let av = &self.nodes[a].value;
        let mut out = vec![F::zero(); m * n];
        for r in 0..m {
            let live = if causal { r + 1 } else { n };
            softmax_into(&av[r * n..(r + 1) * n], live, &mut out[r * n..(r + 1) * n]);
        }
        let rg = self.rg(&[a]);
        let shape = self.nodes[a].shape.clone();
        Ok(self.push(shape, out, Op::Softmax(a), rg))
    }

    /// Mean over rows of `-log softmax(logits)[row, target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let l = self.idx(logits)?;
        let (m, c) = self.dims2(l);
        if targets.len() != m {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: self.nodes[l].shape.clone(),
                rhs: vec![targets.len()],
            });
        }
        for (row, &t) in targets.iter().enumerate() {
            if t >= c {
                return Err(Error::Index {
                    op: "cross_entropy",
                    row,
                    index: t,
                    bound: c,
                });
            }
        }
        self.check("cross_entropy", &[l])?;
        let lv = &self.nodes[l].value;
        let mut probs = vec![F::zero(); m * c];
        let mut total = F::zero();
        for r in 0..m {
            let row = &lv[r * c..(r + 1) * c];
            softmax_into(row, c, &mut probs[r * c..(r + 1) * c]);
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().fold(F::zero(), |s, &v| s + (v - max).exp()).ln() + max;
            total = total + (lse - row[targets[r]]);
        }
        let loss = total / F::of(m as f64);
        let rg = self.rg(&[l]);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits: l,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        self.check("sum", &[a])?;
        let s = self.nodes[a].value.iter().fold(F::zero(), |s, &v| s + v);
        let rg = self.rg(&[a]);
        Ok(self.push(vec![1], vec![s], Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        let s = self.sum(a)?;
        self.scale(s, F::one() / F::of(n as f64))
    }

    /// Sums each row: `m×n → m×1`.
    pub fn row_sums(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let (m, n) = self.dims2(a);
        self.check("row_sums", &[a])?;
        let av = &self.nodes[a].value;
        let out = (0..m)
            .map(|r| av[r * n..(r + 1) * n].iter().fold(F::zero(), |s, &v| s + v))
            .collect();
        let rg = self.rg(&[a]);
        Ok(self.push(vec![m, 1], out, Op::RowSums(a), rg))
    }

    /// Selects rows of `src` in the order given; indices may repeat.
    pub fn gather_rows(&mut self, src: Var, index: &[usize]) -> Result<Var> {
        let s = self.idx(src)?;
        let (m, n) = self.dims2(s);
        if index.is_empty() {
            return Err(Error::Empty("gather_rows index"));
        }
        for (row, &i) in index.iter().enumerate() {
            if i >= m {
                return Err(Error::Index {
                    op: "gather_rows",
                    row,
                    index: i,
                    bound: m,
                });
            }
        }
        let sv = &self.nodes[s].value;
        let mut out = Vec::with_capacity(index.len() * n);
        for &i in index {
            out.extend_from_slice(&sv[i * n..(i + 1) * n]);
        }
        let rg = self.rg(&[s]);
        Ok(self.push(
            vec![index.len(), n],
            out,
            Op::GatherRows {
                src: s,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat_rows parts"));
        }
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect::<Result<_>>()?;
        let n = self.dims2(idx[0]).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in &idx {
            let (r, c) = self.dims2(p);
            if c != n {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.nodes[idx[0]].shape.clone(),
                    rhs: self.nodes[p].shape.clone(),
                });
            }
            out.extend_from_slice(&self.nodes[p].value);
            rows += r;
        }
        let rg = self.rg(&idx);
        Ok(self.push(vec![rows, n], out, Op::ConcatRows(idx), rg))
    }

    pub fn slice_cols(&mut self, src: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.idx(src)?;
        let (m, n) = self.dims2(s);
        if len == 0 || start + len > n {
            return Err(Error::Dimension {
                op: "slice_cols",
                lhs: self.nodes[s].shape.clone(),
                rhs: vec![start, len],
            });
        }
        let sv = &self.nodes[s].value;
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&sv[r * n + start..r * n + start + len]);
        }
        let rg = self.rg(&[s]);
        Ok(self.push(vec![m, len], out, Op::SliceCols { src: s, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat_cols parts"));
        }
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect::<Result<_>>()?;
        let m = self.dims2(idx[0]).0;
        let mut total = 0;
        for &p in &idx {
            let (r, c) = self.dims2(p);
            if r != m {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    lhs: self.nodes[idx[0]].shape.clone(),
                    rhs: self.nodes[p].shape.clone(),
                });
            }
            total += c;
        }
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for &p in &idx {
                let c = self.dims2(p).1;
                out.extend_from_slice(&self.nodes[p].value[r * c..(r + 1) * c]);
            }
        }
        let rg = self.rg(&idx);
        Ok(self.push(vec![m, total], out, Op::ConcatCols(idx), rg))
    }

    /// Sparse-dense product `matrix · x`.
    pub fn spmm(&mut self, matrix: &Arc<SparseMatrix>, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let (m, n) = self.dims2(xi);
        if matrix.cols() != m {
            return Err(Error::Dimension {
                op: "spmm",
                lhs: vec![matrix.rows(), matrix.cols()],
                rhs: self.nodes[xi].shape.clone(),
            });
        }
        self.check("spmm", &[xi])?;
        let mut out = vec![F::zero(); matrix.rows() * n];
        matrix.apply(&self.nodes[xi].value, n, &mut out);
        let rg = self.rg(&[xi]);
        Ok(self.push(
            vec![matrix.rows(), n],
            out,
            Op::Spmm {
                matrix: Arc::clone(matrix),
                x: xi,
            },
            rg,
        ))
    }

    /// Populates gradients of every recorded value with respect to `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let root = self.idx(loss)?;
        if self.nodes[root].value.len() != 1 {
            return Err(Error::Contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[root].shape
            )));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[root] = Some(vec![F::one()]);
        for i in (0..=root).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        // Only trainable ends keep their gradients visible.
        for (node, g) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(())
    }

    fn acc(&mut self, p: usize, contribution: Vec<F>) {
        if !self.nodes[p].requires_grad {
            return;
        }
        match &mut self.grads[p] {
            Some(g) => add_into(g, &contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn wants(&self, p: usize) -> bool {
        self.nodes[p].requires_grad
    }

    fn propagate(&mut self, i: usize, g: &[F]) {
        let op = core::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        self.propagate_op(i, &op, g);
        self.nodes[i].op = op;
    }

    fn propagate_op(&mut self, i: usize, op: &Op<F>, g: &[F]) {
        match op {
            Op::Leaf => {}
            &Op::Matmul(a, b) => {
                let (m, k) = self.dims2(a);
                let n = self.dims2(b).1;
                if self.wants(a) {
                    let bv = &self.nodes[b].value;
                    let mut da = vec![F::zero(); m * k];
                    for r in 0..m {
                        for p in 0..k {
                            da[r * k + p] = dot(&g[r * n..(r + 1) * n], &bv[p * n..(p + 1) * n]);
                        }
                    }
                    self.acc(a, da);
                }
                if self.wants(b) {
                    let av = &self.nodes[a].value;
                    let mut db = vec![F::zero(); k * n];
                    for r in 0..m {
                        for p in 0..k {
                            let s = av[r * k + p];
                            if s == F::zero() {
                                continue;
                            }
                            add_scaled(&mut db[p * n..(p + 1) * n], &g[r * n..(r + 1) * n], s);
                        }
                    }
                    self.acc(b, db);
                }
            }
            &Op::MatmulNt(a, b) => {
                let (m, k) = self.dims2(a);
                let n = self.dims2(b).0;
                if self.wants(a) {
                    let mut da = vec![F::zero(); m * k];
                    matmul_into(g, &self.nodes[b].value, m, n, k, &mut da);
                    self.acc(a, da);
                }
                if self.wants(b) {
                    let av = &self.nodes[a].value;
                    let mut db = vec![F::zero(); n * k];
                    for r in 0..m {
                        for j in 0..n {
                            let s = g[r * n + j];
                            if s == F::zero() {
                                continue;
                            }
                            add_scaled(&mut db[j * k..(j + 1) * k], &av[r * k..(r + 1) * k], s);
                        }
                    }
                    self.acc(b, db);
                }
            }
            &Op::Transpose(a) => {
                let (m, n) = self.dims2(a);
                let mut da = vec![F::zero(); m * n];
                for r in 0..m {
                    for c in 0..n {
                        da[r * n + c] = g[c * m + r];
                    }
                }
                self.acc(a, da);
            }
            &Op::Add(a, b) => {
                self.acc(a, g.to_vec());
                self.acc(b, g.to_vec());
            }
            &Op::Sub(a, b) => {
                self.acc(a, g.to_vec());
                self.acc(b, g.iter().map(|&x| -x).collect());
            }
            &Op::AddRow(a, b) => {
                let n = self.nodes[b].value.len();
                if self.wants(b) {
                    let mut db = vec![F::zero(); n];
                    for (j, &x) in g.iter().enumerate() {
                        db[j % n] = db[j % n] + x;
                    }
                    self.acc(b, db);
                }
                self.acc(a, g.to_vec());
            }
            &Op::Mul(a, b) => {
                if self.wants(a) {
                    let da = zip_mul(g, &self.nodes[b].value);
                    self.acc(a, da);
                }
                if self.wants(b) {
                    let db = zip_mul(g, &self.nodes[a].value);
                    self.acc(b, db);
                }
            }
            &Op::Scale(a, c) => {
                self.acc(a, g.iter().map(|&x| x * c).collect());
            }
            &Op::Relu(a) => {
                let da = g
                    .iter()
                    .zip(&self.nodes[a].value)
                    .map(|(&x, &v)| if v > F::zero() { x } else { F::zero() })
                    .collect();
                self.acc(a, da);
            }
            &Op::Gelu(a) => {
                let da = g
                    .iter()
                    .zip(&self.nodes[a].value)
                    .map(|(&x, &v)| x * gelu_parts(v).1)
                    .collect();
                self.acc(a, da);
            }
            &Op::LogSigmoid(a) => {
                let da = g
                    .iter()
                    .zip(&self.nodes[a].value)
                    .map(|(&x, &v)| x * sigmoid(-v))
                    .collect();
                self.acc(a, da);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                rstd,
            } => {
                let (x, gamma, beta) = (*x, *gamma, *beta);
                let (m, n) = self.dims2(x);
                let gv = &self.nodes[gamma].value;
                let nf = F::of(n as f64);
                let (mut dx, mut dg, mut db) = (
                    vec![F::zero(); m * n],
                    vec![F::zero(); n],
                    vec![F::zero(); n],
                );
                for r in 0..m {
                    let gr = &g[r * n..(r + 1) * n];
                    let hr = &normalized[r * n..(r + 1) * n];
                    let mut mean_dh = F::zero();
                    let mut mean_dh_h = F::zero();
                    for c in 0..n {
                        let dh = gr[c] * gv[c];
                        mean_dh = mean_dh + dh;
                        mean_dh_h = mean_dh_h + dh * hr[c];
                        dg[c] = dg[c] + gr[c] * hr[c];
                        db[c] = db[c] + gr[c];
                    }
                    mean_dh = mean_dh / nf;
                    mean_dh_h = mean_dh_h / nf;
                    for c in 0..n {
                        let dh = gr[c] * gv[c];
                        dx[r * n + c] = rstd[r] * (dh - mean_dh - hr[c] * mean_dh_h);
                    }
                }
                self.acc(x, dx);
                self.acc(gamma, dg);
                self.acc(beta, db);
            }
            &Op::Softmax(a) => {
                let (m, n) = self.dims2(a);
                let y = &self.nodes[i].value;
                let mut da = vec![F::zero(); m * n];
                for r in 0..m {
                    let yr = &y[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let s = dot(yr, gr);
                    for c in 0..n {
                        da[r * n + c] = yr[c] * (gr[c] - s);
                    }
                }
                self.acc(a, da);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let l = *logits;
                let c = self.dims2(l).1;
                let scale = g[0] / F::of(targets.len() as f64);
                let mut dl: Vec<F> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    dl[r * c + t] = dl[r * c + t] - scale;
                }
                self.acc(l, dl);
            }
            &Op::Sum(a) => {
                let n = self.nodes[a].value.len();
                self.acc(a, vec![g[0]; n]);
            }
            &Op::RowSums(a) => {
                let (m, n) = self.dims2(a);
                let mut da = vec![F::zero(); m * n];
                for r in 0..m {
                    da[r * n..(r + 1) * n].iter_mut().for_each(|v| *v = g[r]);
                }
                self.acc(a, da);
            }
            Op::GatherRows { src, index } => {
                let s = *src;
                if self.wants(s) {
                    let (m, n) = self.dims2(s);
                    let mut ds = vec![F::zero(); m * n];
                    for (row, &i) in index.iter().enumerate() {
                        add_into(&mut ds[i * n..(i + 1) * n], &g[row * n..(row + 1) * n]);
                    }
                    self.acc(s, ds);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    self.acc(p, g[off..off + len].to_vec());
                    off += len;
                }
            }
            &Op::SliceCols { src, start } => {
                let (m, n) = self.dims2(src);
                let len = self.nodes[i].cols();
                let mut ds = vec![F::zero(); m * n];
                for r in 0..m {
                    ds[r * n + start..r * n + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                self.acc(src, ds);
            }
            Op::ConcatCols(parts) => {
                let m = self.nodes[i].rows();
                let total = self.nodes[i].cols();
                let mut off = 0;
                for &p in parts {
                    let c = self.dims2(p).1;
                    let mut dp = Vec::with_capacity(m * c);
                    for r in 0..m {
                        dp.extend_from_slice(&g[r * total + off..r * total + off + c]);
                    }
                    self.acc(p, dp);
                    off += c;
                }
            }
            Op::Spmm { matrix, x } => {
                let x = *x;
                if self.wants(x) {
                    let (m, n) = self.dims2(x);
                    let mut dx = vec![F::zero(); m * n];
                    matrix.apply_transpose_add(g, n, &mut dx);
                    self.acc(x, dx);
                }
            }
        }
    }
}

fn zip_mul<F: Scalar>(a: &[F], b: &[F]) -> Vec<F> {
    a.iter().zip(b).map(|(&x, &y)| x * y).collect()
}

fn add_scaled<F: Scalar>(dst: &mut [F], src: &[F], s: F) {
    for (d, &v) in dst.iter_mut().zip(src) {
        *d = *d + s * v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], d: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, d.to_vec()).unwrap()
    }

    #[test]
    fn matmul_small_case() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(&t(&[2, 1], &[0.0, 1.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c), &[2.0, 4.0]);
        assert_eq!(tape.shape(c), &[2, 1]);
    }

    #[test]
    fn matmul_rejects_mismatch_naming_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&t(&[2, 3], &[0.0; 6]));
        let b = tape.leaf(&t(&[2, 3], &[0.0; 6]));
        match tape.matmul(a, b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn softmax_of_equal_row_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(&t(&[1, 4], &[3.0; 4]));
        let s = tape.softmax_rows(a).unwrap();
        assert!(tape.value(s).iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn layernorm_of_constant_row_is_zero() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(&[1, 5], vec![2.5; 5]).unwrap();
        let g = tape.constant(&[5], vec![1.0; 5]).unwrap();
        let b = tape.constant(&[5], vec![0.0; 5]).unwrap();
        let y = tape.layernorm(x, g, b).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_uniform_and_saturated() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(&[2, 7], vec![0.0; 14]).unwrap();
        let l = tape.cross_entropy(z, &[3, 6]).unwrap();
        assert!((tape.value(l)[0] - 7f64.ln()).abs() < 1e-12);

        let mut row = vec![0.0; 5];
        row[2] = 30.0;
        let z = tape.constant(&[1, 5], row).unwrap();
        let l = tape.cross_entropy(z, &[2]).unwrap();
        assert!(tape.value(l)[0] < 1e-9);
    }

    #[test]
    fn cross_entropy_hand_value() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(&[1, 3], vec![1.0, 2.0, 0.5]).unwrap();
        let l = tape.cross_entropy(z, &[1]).unwrap();
        let e = core::f64::consts::E;
        let expected = -((e * e) / (e + e * e + e.powf(0.5))).ln();
        assert!((tape.value(l)[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_out_of_range_target_names_row() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(&[2, 3], vec![0.0; 6]).unwrap();
        match tape.cross_entropy(z, &[0, 3]) {
            Err(Error::Index { row, index, .. }) => assert_eq!((row, index), (1, 3)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn quadratic_gradient_and_disconnected_param() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[3], &[1.0, -2.0, 0.5]).into_param());
        let p = tape.leaf(&t(&[2], &[4.0, 4.0]).into_param());
        let sq = tape.mul(x, x).unwrap();
        let loss = tape.sum(sq).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
        let mut pt = t(&[2], &[4.0, 4.0]).into_param();
        tape.write_grad(p, &mut pt).unwrap();
        assert!(pt.grad().is_none_or(|g| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn frozen_leaves_keep_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let w = tape.leaf(&t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let x = tape.leaf(&t(&[1, 2], &[1.0, 1.0]).into_param());
        let y = tape.matmul(x, w).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(w).is_none());
        assert_eq!(tape.grad(x).unwrap(), &[3.0, 7.0]);
    }

    #[test]
    fn backward_needs_scalar_on_this_tape() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&t(&[2], &[1.0, 2.0]).into_param());
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
        let mut other = Tape::<f64>::new();
        let y = other.leaf(&t(&[1], &[1.0]).into_param());
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
        tape.clear();
        assert!(tape.is_empty());
        assert!(matches!(tape.sum(x), Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_inputs_are_rejected_when_checking() {
        let mut tape = Tape::<f32>::new().with_finite_checks(true);
        let x = tape.constant(&[2], vec![1.0, f32::NAN]).unwrap();
        assert!(matches!(tape.relu(x), Err(Error::NumericDomain { .. })));
    }
}
