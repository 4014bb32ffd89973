//! Reverse-mode differentiation over rank-2 arrays.
//!
//! A [`Tape`] records one forward pass. Ops return [`Var`] handles; calling
//! [`Tape::backward`] on a scalar walks the record in reverse and
//! accumulates gradients into every leaf that requires them. The tape is
//! meant to be dropped after the optimizer step.

use std::collections::BTreeMap;
use std::fmt;

use super::gemm::{gemm, Operand};
use super::{DenseArray, NumError, ParamStore};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type CustomGrad = Box<dyn Fn(&[f64], &[f64], &[f64]) -> Vec<f64>>;

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    SoftmaxRows(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    LayerNorm { x: Var, gain: Option<Var>, bias: Option<Var>, xhat: Vec<f64>, inv_std: Vec<f64> },
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    MeanStack(Vec<Var>),
    L1(Var, Var),
    Sum(Var),
    Mean(Var),
    Transpose(Var),
    Custom { a: Var, grad: CustomGrad },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::ScaleBy(..) => "scale_by",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Gelu(..) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SliceRows { .. } => "slice_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::MeanRows(..) => "mean_rows",
            Op::MeanStack(..) => "mean_stack",
            Op::L1(..) => "l1",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Transpose(..) => "transpose",
            Op::Custom { .. } => "custom",
        }
    }
}

struct Node {
    value: DenseArray,
    op: Op,
    requires_grad: bool,
}

/// One recorded forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    /// Accumulated gradients of leaves, kept across `backward` calls.
    leaf_grads: BTreeMap<usize, Vec<f64>>,
    /// Parameter name → leaf handle, so each stored entry is bound once.
    bound: BTreeMap<String, Var>,
}

impl fmt::Debug for Tape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape").field("nodes", &self.nodes.len()).field("bound", &self.bound.len()).finish()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &DenseArray {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `[1 × 1]` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: DenseArray, op: Op, requires_grad: bool) -> Result<Var, NumError> {
        if !value.is_finite() {
            return Err(NumError::NonFinite { op: op.name().to_string() });
        }
        let mut value = value;
        value.set_requires_grad(false);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims(&self, v: Var) -> Result<(usize, usize), NumError> {
        self.nodes[v.0].value.dims2()
    }

    /// Records a leaf; it requires grad iff the array does.
    pub fn leaf(&mut self, array: DenseArray) -> Result<Var, NumError> {
        let rg = array.requires_grad();
        array.dims2()?;
        self.push(array, Op::Leaf, rg)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, mut array: DenseArray) -> Result<Var, NumError> {
        array.set_requires_grad(false);
        self.leaf(array)
    }

    /// Binds a stored parameter as a leaf. Trainable entries require grad.
    /// Binding the same name twice returns the first handle.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var, NumError> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let (array, trainable) = store.entry(name)?;
        let mut a = array.clone();
        a.set_requires_grad(trainable);
        let v = self.leaf(a)?;
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Names and handles of every bound parameter.
    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, v)| (k.as_str(), *v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (m, k) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        if k != k2 {
            return Err(NumError::Shape(format!("matmul [{m}×{k}]·[{k2}×{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            Operand::plain(self.value(a).data(), m, k),
            Operand::plain(self.value(b).data(), k, n),
            &mut out,
            false,
        );
        let rg = self.any_grad(&[a, b]);
        self.push(DenseArray::matrix(m, n, out)?, Op::MatMul { a, b, trans_b: false }, rg)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (m, k) = self.dims(a)?;
        let (n, k2) = self.dims(b)?;
        if k != k2 {
            return Err(NumError::Shape(format!("matmul_nt [{m}×{k}]·[{n}×{k2}]ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            Operand::plain(self.value(a).data(), m, k),
            Operand::t(self.value(b).data(), n, k),
            &mut out,
            false,
        );
        let rg = self.any_grad(&[a, b]);
        self.push(DenseArray::matrix(m, n, out)?, Op::MatMul { a, b, trans_b: true }, rg)
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<(usize, usize), NumError> {
        let da = self.dims(a)?;
        let db = self.dims(b)?;
        if da != db {
            return Err(NumError::Shape(format!("{op}: {da:?} vs {db:?}")));
        }
        Ok(da)
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var, NumError> {
        let (r, c) = self.same_shape(a, b, op.name())?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| f(*x, *y)).collect();
        let rg = self.any_grad(&[a, b]);
        self.push(DenseArray::matrix(r, c, out)?, op, rg)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var, NumError> {
        let (r, c) = self.dims(a)?;
        let out = self.value(a).data().iter().map(|x| f(*x)).collect();
        let rg = self.any_grad(&[a]);
        self.push(DenseArray::matrix(r, c, out)?, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a `[1 × c]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumError> {
        let (r, c) = self.dims(a)?;
        let (rr, rc) = self.dims(row)?;
        if rr != 1 || rc != c {
            return Err(NumError::Shape(format!("add_row: [{r}×{c}] + [{rr}×{rc}]")));
        }
        let bias = self.value(row).data().to_vec();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(c) {
            for (o, b) in chunk.iter_mut().zip(&bias) {
                *o += b;
            }
        }
        let rg = self.any_grad(&[a, row]);
        self.push(DenseArray::matrix(r, c, out)?, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var, NumError> {
        self.map(a, Op::Scale(a, k), |x| x * k)
    }

    /// Multiplies every entry of `a` by the `[1 × 1]` value `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var, NumError> {
        if self.dims(s)? != (1, 1) {
            return Err(NumError::Shape("scale_by expects a [1×1] factor".into()));
        }
        let k = self.scalar(s);
        let (r, c) = self.dims(a)?;
        let out = self.value(a).data().iter().map(|x| x * k).collect();
        let rg = self.any_grad(&[a, s]);
        self.push(DenseArray::matrix(r, c, out)?, Op::ScaleBy(a, s), rg)
    }

    /// Row-wise softmax, shifted by the row maximum.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, NumError> {
        let (r, c) = self.dims(a)?;
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let rg = self.any_grad(&[a]);
        self.push(DenseArray::matrix(r, c, out)?, Op::SoftmaxRows(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumError> {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, NumError> {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var, NumError> {
        self.map(a, Op::Gelu(a), |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()))
    }

    /// Row-wise normalization to zero mean and unit variance, followed by an
    /// optional `[1 × c]` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Option<Var>, bias: Option<Var>, eps: f64) -> Result<Var, NumError> {
        let (r, c) = self.dims(x)?;
        for p in [gain, bias].into_iter().flatten() {
            if self.dims(p)? != (1, c) {
                return Err(NumError::Shape(format!("layer_norm affine must be [1×{c}]")));
            }
        }
        let xs = self.value(x).data();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..c {
                xhat[i * c + j] = (row[j] - mu) * inv;
            }
        }
        let mut out = xhat.clone();
        if let Some(g) = gain {
            let gv = self.value(g).data();
            for row in out.chunks_mut(c) {
                row.iter_mut().zip(gv).for_each(|(o, g)| *o *= g);
            }
        }
        if let Some(b) = bias {
            let bv = self.value(b).data();
            for row in out.chunks_mut(c) {
                row.iter_mut().zip(bv).for_each(|(o, b)| *o += b);
            }
        }
        let parents: Vec<Var> = std::iter::once(x).chain(gain).chain(bias).collect();
        let rg = self.any_grad(&parents);
        self.push(DenseArray::matrix(r, c, out)?, Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumError> {
        let (r, c) = self.dims(a)?;
        if start >= end || end > r {
            return Err(NumError::Shape(format!("slice_rows {start}..{end} of {r}")));
        }
        let out = self.value(a).data()[start * c..end * c].to_vec();
        let rg = self.any_grad(&[a]);
        self.push(DenseArray::matrix(end - start, c, out)?, Op::SliceRows { a, start }, rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumError> {
        let (r, c) = self.dims(a)?;
        if start >= end || end > c {
            return Err(NumError::Shape(format!("slice_cols {start}..{end} of {c}")));
        }
        let w = end - start;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        let rg = self.any_grad(&[a]);
        self.push(DenseArray::matrix(r, w, out)?, Op::SliceCols { a, start }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let first = parts.first().ok_or_else(|| NumError::Shape("concat of nothing".into()))?;
        let c = self.dims(*first)?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let (r, pc) = self.dims(*p)?;
            if pc != c {
                return Err(NumError::Shape(format!("concat_rows width {pc} vs {c}")));
            }
            rows += r;
            out.extend_from_slice(self.value(*p).data());
        }
        let rg = self.any_grad(parts);
        self.push(DenseArray::matrix(rows, c, out)?, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let first = parts.first().ok_or_else(|| NumError::Shape("concat of nothing".into()))?;
        let r = self.dims(*first)?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pr, pc) = self.dims(*p)?;
            if pr != r {
                return Err(NumError::Shape(format!("concat_cols height {pr} vs {r}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = self.any_grad(parts);
        self.push(DenseArray::matrix(r, total, out)?, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Mean over rows: `[r × c] → [1 × c]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, NumError> {
        let (r, c) = self.dims(a)?;
        let mut out = vec![0.0; c];
        for row in self.value(a).data().chunks(c) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let rg = self.any_grad(&[a]);
        self.push(DenseArray::matrix(1, c, out)?, Op::MeanRows(a), rg)
    }

    /// Elementwise arithmetic mean of same-shaped arrays.
    pub fn mean_stack(&mut self, parts: &[Var]) -> Result<Var, NumError> {
        let first = *parts.first().ok_or_else(|| NumError::Shape("mean of nothing".into()))?;
        let (r, c) = self.dims(first)?;
        let mut out = vec![0.0; r * c];
        for p in parts {
            if self.dims(*p)? != (r, c) {
                return Err(NumError::Shape("mean_stack shapes differ".into()));
            }
            out.iter_mut().zip(self.value(*p).data()).for_each(|(o, v)| *o += v);
        }
        let k = parts.len() as f64;
        out.iter_mut().for_each(|o| *o /= k);
        let rg = self.any_grad(parts);
        self.push(DenseArray::matrix(r, c, out)?, Op::MeanStack(parts.to_vec()), rg)
    }

    /// Mean absolute difference, as a `[1 × 1]` scalar.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.same_shape(a, b, "l1")?;
        let n = self.value(a).len() as f64;
        let s: f64 = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| (x - y).abs()).sum();
        let rg = self.any_grad(&[a, b]);
        self.push(DenseArray::scalar(s / n), Op::L1(a, b), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumError> {
        let s = self.value(a).data().iter().sum();
        let rg = self.any_grad(&[a]);
        self.push(DenseArray::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumError> {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.any_grad(&[a]);
        self.push(DenseArray::scalar(s), Op::Mean(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumError> {
        self.dims(a)?;
        let t = self.value(a).transpose();
        let rg = self.any_grad(&[a]);
        self.push(t, Op::Transpose(a), rg)
    }

    /// Elementwise op with a caller-supplied derivative rule
    /// `grad(x, y, dy) -> dx`.
    pub fn custom_unary(
        &mut self,
        a: Var,
        forward: impl Fn(f64) -> f64,
        grad: impl Fn(&[f64], &[f64], &[f64]) -> Vec<f64> + 'static,
    ) -> Result<Var, NumError> {
        let (r, c) = self.dims(a)?;
        let out = self.value(a).data().iter().map(|x| forward(*x)).collect();
        let rg = self.any_grad(&[a]);
        self.push(DenseArray::matrix(r, c, out)?, Op::Custom { a, grad: Box::new(grad) }, rg)
    }

    /// Accumulated gradient of a leaf, if it received one.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(&v.0).map(|g| g.as_slice())
    }

    /// Drops all accumulated leaf gradients.
    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    /// Back-propagates from a scalar. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumError> {
        if self.dims(loss)? != (1, 1) {
            return Err(NumError::Contract("backward needs a scalar loss".into()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let slot = self.leaf_grads.entry(i).or_insert_with(|| vec![0.0; g.len()]);
                slot.iter_mut().zip(&g).for_each(|(s, v)| *s += v);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn send(&self, grads: &mut [Option<Vec<f64>>], to: Var, g: Vec<f64>) {
        if !self.nodes[to.0].requires_grad {
            return;
        }
        match &mut grads[to.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
            slot @ None => *slot = Some(g),
        }
    }

    fn send_with(&self, grads: &mut [Option<Vec<f64>>], to: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[to.0].requires_grad {
            return;
        }
        let n = self.nodes[to.0].value.len();
        let slot = grads[to.0].get_or_insert_with(|| vec![0.0; n]);
        f(slot);
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let (r, c) = (node.value.rows(), node.value.cols());
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (m, k) = (va.rows(), va.cols());
                let n = c;
                let dy = Operand::plain(g, m, n);
                if *trans_b {
                    // y = a·bᵀ, b is [n×k]
                    self.send_with(grads, *a, |da| gemm(dy, Operand::plain(vb.data(), n, k), da, true));
                    self.send_with(grads, *b, |db| gemm(Operand::t(g, m, n), Operand::plain(va.data(), m, k), db, true));
                } else {
                    self.send_with(grads, *a, |da| gemm(dy, Operand::t(vb.data(), k, n), da, true));
                    self.send_with(grads, *b, |db| gemm(Operand::t(va.data(), m, k), dy, db, true));
                }
            }
            Op::Add(a, b) => {
                self.send(grads, *a, g.to_vec());
                self.send(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, g.to_vec());
                self.send(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                self.send(grads, *a, g.iter().zip(vb).map(|(d, y)| d * y).collect());
                self.send(grads, *b, g.iter().zip(va).map(|(d, x)| d * x).collect());
            }
            Op::AddRow(a, row) => {
                self.send(grads, *a, g.to_vec());
                self.send_with(grads, *row, |dr| {
                    for chunk in g.chunks(c) {
                        dr.iter_mut().zip(chunk).for_each(|(d, v)| *d += v);
                    }
                });
            }
            Op::Scale(a, k) => self.send(grads, *a, g.iter().map(|v| v * k).collect()),
            Op::ScaleBy(a, s) => {
                let k = self.scalar(*s);
                self.send(grads, *a, g.iter().map(|v| v * k).collect());
                let dot: f64 = g.iter().zip(self.value(*a).data()).map(|(d, x)| d * x).sum();
                self.send(grads, *s, vec![dot]);
            }
            Op::SoftmaxRows(a) => {
                let mut dx = vec![0.0; r * c];
                for row in 0..r {
                    let ys = &y[row * c..(row + 1) * c];
                    let gs = &g[row * c..(row + 1) * c];
                    let dot: f64 = ys.iter().zip(gs).map(|(p, d)| p * d).sum();
                    for j in 0..c {
                        dx[row * c + j] = ys[j] * (gs[j] - dot);
                    }
                }
                self.send(grads, *a, dx);
            }
            Op::Sigmoid(a) => self.send(grads, *a, g.iter().zip(y).map(|(d, s)| d * s * (1.0 - s)).collect()),
            Op::Tanh(a) => self.send(grads, *a, g.iter().zip(y).map(|(d, t)| d * (1.0 - t * t)).collect()),
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                let dx = g
                    .iter()
                    .zip(x)
                    .map(|(d, &x)| {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        d * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                self.send(grads, *a, dx);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let gv = gain.map(|gv| self.value(gv).data());
                if let Some(gn) = gain {
                    self.send_with(grads, *gn, |dg| {
                        for (gr, xr) in g.chunks(c).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                dg[j] += gr[j] * xr[j];
                            }
                        }
                    });
                }
                if let Some(b) = bias {
                    self.send_with(grads, *b, |db| {
                        for gr in g.chunks(c) {
                            db.iter_mut().zip(gr).for_each(|(d, v)| *d += v);
                        }
                    });
                }
                let mut dx = vec![0.0; r * c];
                let n = c as f64;
                for row in 0..r {
                    let gr = &g[row * c..(row + 1) * c];
                    let xr = &xhat[row * c..(row + 1) * c];
                    let dxhat: Vec<f64> = match gv {
                        Some(gv) => gr.iter().zip(gv).map(|(d, w)| d * w).collect(),
                        None => gr.to_vec(),
                    };
                    let s1: f64 = dxhat.iter().sum();
                    let s2: f64 = dxhat.iter().zip(xr).map(|(d, h)| d * h).sum();
                    for j in 0..c {
                        dx[row * c + j] = inv_std[row] / n * (n * dxhat[j] - s1 - xr[j] * s2);
                    }
                }
                self.send(grads, *x, dx);
            }
            Op::SliceRows { a, start } => {
                self.send_with(grads, *a, |da| {
                    da[start * c..start * c + r * c].iter_mut().zip(g).for_each(|(d, v)| *d += v);
                });
            }
            Op::SliceCols { a, start } => {
                let full = self.value(*a).cols();
                self.send_with(grads, *a, |da| {
                    for i in 0..r {
                        for j in 0..c {
                            da[i * full + start + j] += g[i * c + j];
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    self.send(grads, *p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    let mut d = Vec::with_capacity(r * w);
                    for i in 0..r {
                        d.extend_from_slice(&g[i * c + col..i * c + col + w]);
                    }
                    self.send(grads, *p, d);
                    col += w;
                }
            }
            Op::MeanRows(a) => {
                let rows = self.value(*a).rows();
                let k = 1.0 / rows as f64;
                self.send_with(grads, *a, |da| {
                    for chunk in da.chunks_mut(c) {
                        chunk.iter_mut().zip(g).for_each(|(d, v)| *d += v * k);
                    }
                });
            }
            Op::MeanStack(parts) => {
                let k = 1.0 / parts.len() as f64;
                for p in parts {
                    self.send(grads, *p, g.iter().map(|v| v * k).collect());
                }
            }
            Op::L1(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                let k = g[0] / va.len() as f64;
                let d: Vec<f64> = va.iter().zip(vb).map(|(x, y)| k * sign0(x - y)).collect();
                self.send(grads, *b, d.iter().map(|v| -v).collect());
                self.send(grads, *a, d);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.send(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                self.send(grads, *a, vec![g[0] / n as f64; n]);
            }
            Op::Transpose(a) => {
                // y is [r×c], a is [c×r]
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        d[j * r + i] = g[i * c + j];
                    }
                }
                self.send(grads, *a, d);
            }
            Op::Custom { a, grad } => {
                let d = grad(self.value(*a).data(), y, g);
                self.send(grads, *a, d);
            }
        }
    }

    /// Adds every bound parameter's gradient into the store.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<(), NumError> {
        for (name, v) in &self.bound {
            if let Some(g) = self.grad(*v) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sign with `sign0(0) == 0`, the L1 subgradient convention used here.
fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
