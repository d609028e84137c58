//! Tape-based reverse-mode autodiff over dense `f64` tensors.
//!
//! Every differentiable computation in the crate is expressed as a sequence
//! of primitive operations recorded on a [`Tape`]. Composite layers
//! (attention, layer norm blocks, losses) are built from these primitives so
//! a single generic backward pass covers everything; no composite carries a
//! hand-written backward. Tapes are single-threaded and replay-deterministic:
//! building the same graph from the same inputs twice produces bit-identical
//! values and gradients.

use crate::error::{Error, Result};

/// Dense row-major tensor. `grad` is populated by [`Tape::backward`] for
/// nodes with `requires_grad`.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Precondition(format!(
                "tensor shape {shape:?} wants {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            data,
            shape,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            data: vec![0.0; n],
            shape,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

pub type TensorId = usize;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: TensorId, b: TensorId, m: usize, k: usize, n: usize },
    Add { a: TensorId, b: TensorId },
    /// `[m, n] + [n]`, the bias-broadcast pattern.
    AddRow { a: TensorId, row: TensorId, m: usize, n: usize },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Div { a: TensorId, b: TensorId },
    Scale { a: TensorId, c: f64 },
    Shift { a: TensorId },
    Neg { a: TensorId },
    Abs { a: TensorId },
    Relu { a: TensorId },
    Sigmoid { a: TensorId },
    LogSigmoid { a: TensorId },
    Sin { a: TensorId },
    Cos { a: TensorId },
    MinElem { a: TensorId, b: TensorId },
    MaxElem { a: TensorId, b: TensorId },
    RowMax { a: TensorId, m: usize, n: usize },
    SumAll { a: TensorId },
    MeanAll { a: TensorId },
    Softmax { a: TensorId, axis: usize },
    /// Row-wise softmax with a boolean block mask (`true` = blocked).
    /// A fully blocked row yields all zeros rather than NaN.
    MaskedSoftmaxRows { a: TensorId, m: usize, n: usize },
    LayerNorm { x: TensorId, gain: TensorId, bias: TensorId, eps: f64, rows: usize, n: usize },
    Transpose { a: TensorId, m: usize, n: usize },
    SliceRows { a: TensorId, start: usize, len: usize, n: usize },
    SliceCols { a: TensorId, start: usize, len: usize, m: usize, n: usize },
    ConcatRows { parts: Vec<TensorId>, n: usize },
    ConcatCols { parts: Vec<TensorId>, m: usize },
    GatherRows { a: TensorId, idx: Vec<usize>, n: usize },
}

/// Records the forward graph; `backward` replays it in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Tensor>,
    ops: Vec<Op>,
}

fn as_2d(shape: &[usize]) -> Option<(usize, usize)> {
    match shape {
        [m, n] => Some((*m, *n)),
        [n] => Some((1, *n)),
        _ => None,
    }
}

/// c += a @ b, all row-major, a is m x k, b is k x n.
fn matmul_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// c += a @ b^T, a is m x k, b is n x k (so b^T is k x n).
fn matmul_nt_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            c[i * n + j] += s;
        }
    }
}

/// c += a^T @ b, a is k x m, b is k x n.
fn matmul_tn_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid_scalar(x: f64) -> f64 {
    // -softplus(-x), computed without overflow on either tail.
    if x >= 0.0 {
        -((-x).exp().ln_1p())
    } else {
        x - x.exp().ln_1p()
    }
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

    fn push(&mut self, t: Tensor, op: Op) -> TensorId {
        self.nodes.push(t);
        self.ops.push(op);
        self.nodes.len() - 1
    }

    /// Constant leaf: no gradient flows into it.
    pub fn value(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<TensorId> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t, Op::Leaf))
    }

    /// Differentiable leaf: `backward` materializes its gradient.
    pub fn param(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<TensorId> {
        let mut t = Tensor::new(shape, data)?;
        t.requires_grad = true;
        Ok(self.push(t, Op::Leaf))
    }

    pub fn scalar(&mut self, v: f64) -> TensorId {
        self.value(vec![1], vec![v]).expect("scalar is well-formed")
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id].data
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id].grad.as_deref()
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id]
    }

    fn rg(&self, id: TensorId) -> bool {
        self.nodes[id].requires_grad
    }

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: TensorId,
        b: TensorId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorId> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(Error::shape(op_name, &self.nodes[a].shape, &self.nodes[b].shape));
        }
        let data: Vec<f64> = self.nodes[a]
            .data
            .iter()
            .zip(&self.nodes[b].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let mut t = Tensor::new(self.nodes[a].shape.clone(), data)?;
        t.requires_grad = self.rg(a) || self.rg(b);
        Ok(self.push(t, op))
    }

    fn unary(
        &mut self,
        a: TensorId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> TensorId {
        let data: Vec<f64> = self.nodes[a].data.iter().map(|&x| f(x)).collect();
        let mut t = Tensor {
            data,
            shape: self.nodes[a].shape.clone(),
            requires_grad: self.rg(a),
            grad: None,
        };
        t.requires_grad = self.rg(a);
        self.push(t, op)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k1) = as_2d(&self.nodes[a].shape)
            .ok_or_else(|| Error::shape("matmul", &self.nodes[a].shape, &self.nodes[b].shape))?;
        let (k2, n) = as_2d(&self.nodes[b].shape)
            .ok_or_else(|| Error::shape("matmul", &self.nodes[a].shape, &self.nodes[b].shape))?;
        if k1 != k2 {
            return Err(Error::shape("matmul", &self.nodes[a].shape, &self.nodes[b].shape));
        }
        let mut data = vec![0.0; m * n];
        matmul_acc(&mut data, &self.nodes[a].data, &self.nodes[b].data, m, k1, n);
        let mut t = Tensor::new(vec![m, n], data)?;
        t.requires_grad = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::MatMul { a, b, m, k: k1, n }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    /// Broadcast add of a `[n]` row vector onto every row of a `[m, n]` matrix.
    pub fn add_row(&mut self, a: TensorId, row: TensorId) -> Result<TensorId> {
        let (m, n) = as_2d(&self.nodes[a].shape)
            .ok_or_else(|| Error::shape("add_row", &self.nodes[a].shape, &self.nodes[row].shape))?;
        if self.nodes[row].shape != [n] {
            return Err(Error::shape("add_row", &self.nodes[a].shape, &self.nodes[row].shape));
        }
        let mut data = self.nodes[a].data.clone();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += self.nodes[row].data[j];
            }
        }
        let mut t = Tensor::new(self.nodes[a].shape.clone(), data)?;
        t.requires_grad = self.rg(a) || self.rg(row);
        Ok(self.push(t, Op::AddRow { a, row, m, n }))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("div", a, b, |x, y| x / y, Op::Div { a, b })
    }

    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        self.unary(a, |x| x * c, Op::Scale { a, c })
    }

    pub fn shift(&mut self, a: TensorId, c: f64) -> TensorId {
        self.unary(a, |x| x + c, Op::Shift { a })
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| -x, Op::Neg { a })
    }

    pub fn abs(&mut self, a: TensorId) -> TensorId {
        self.unary(a, f64::abs, Op::Abs { a })
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        self.unary(a, |x| x.max(0.0), Op::Relu { a })
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        self.unary(a, sigmoid_scalar, Op::Sigmoid { a })
    }

    pub fn log_sigmoid(&mut self, a: TensorId) -> TensorId {
        self.unary(a, log_sigmoid_scalar, Op::LogSigmoid { a })
    }

    pub fn sin(&mut self, a: TensorId) -> TensorId {
        self.unary(a, f64::sin, Op::Sin { a })
    }

    pub fn cos(&mut self, a: TensorId) -> TensorId {
        self.unary(a, f64::cos, Op::Cos { a })
    }

    /// Elementwise minimum; on ties the gradient routes to the left input.
    pub fn min_elem(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("min_elem", a, b, f64::min, Op::MinElem { a, b })
    }

    /// Elementwise maximum; on ties the gradient routes to the left input.
    pub fn max_elem(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_same_shape("max_elem", a, b, f64::max, Op::MaxElem { a, b })
    }

    /// Row-wise maximum of a `[m, n]` matrix, producing `[m, 1]`.
    /// Gradient routes to the first attaining index per row.
    pub fn row_max(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = as_2d(&self.nodes[a].shape)
            .ok_or_else(|| Error::shape("row_max", &self.nodes[a].shape, &[]))?;
        if n == 0 {
            return Err(Error::Precondition("row_max over zero columns".into()));
        }
        let mut data = vec![0.0; m];
        for i in 0..m {
            let row = &self.nodes[a].data[i * n..(i + 1) * n];
            data[i] = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        }
        let mut t = Tensor::new(vec![m, 1], data)?;
        t.requires_grad = self.rg(a);
        Ok(self.push(t, Op::RowMax { a, m, n }))
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: f64 = self.nodes[a].data.iter().sum();
        let mut t = Tensor::new(vec![1], vec![s]).expect("scalar");
        t.requires_grad = self.rg(a);
        self.push(t, Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: TensorId) -> Result<TensorId> {
        if self.nodes[a].data.is_empty() {
            return Err(Error::Precondition("mean_all over empty tensor".into()));
        }
        let s: f64 = self.nodes[a].data.iter().sum();
        let mean = s / self.nodes[a].data.len() as f64;
        let mut t = Tensor::new(vec![1], vec![mean])?;
        t.requires_grad = self.rg(a);
        Ok(self.push(t, Op::MeanAll { a }))
    }

    /// Softmax along `axis`, stabilized by max subtraction. Outputs along the
    /// reduced axis sum to 1 for finite inputs.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.nodes[a].shape.clone();
        if axis >= shape.len() {
            return Err(Error::Precondition(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let axis_len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut data = self.nodes[a].data.clone();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * axis_len * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..axis_len {
                    mx = mx.max(data[base + j * inner]);
                }
                let mut denom = 0.0;
                for j in 0..axis_len {
                    let e = (data[base + j * inner] - mx).exp();
                    data[base + j * inner] = e;
                    denom += e;
                }
                for j in 0..axis_len {
                    data[base + j * inner] /= denom;
                }
            }
        }
        let mut t = Tensor::new(shape, data)?;
        t.requires_grad = self.rg(a);
        Ok(self.push(t, Op::Softmax { a, axis }))
    }

    /// Row-wise masked softmax over a `[m, n]` matrix; `mask[i*n+j] == true`
    /// blocks column `j` for row `i` (equivalent to a -inf logit). A fully
    /// blocked row produces all zeros.
    pub fn masked_softmax_rows(&mut self, a: TensorId, mask: &[bool]) -> Result<TensorId> {
        let (m, n) = as_2d(&self.nodes[a].shape)
            .ok_or_else(|| Error::shape("masked_softmax_rows", &self.nodes[a].shape, &[]))?;
        if mask.len() != m * n {
            return Err(Error::Precondition(format!(
                "mask length {} does not cover [{m}, {n}]",
                mask.len()
            )));
        }
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let src = &self.nodes[a].data[i * n..(i + 1) * n];
            let mrow = &mask[i * n..(i + 1) * n];
            let mut mx = f64::NEG_INFINITY;
            for j in 0..n {
                if !mrow[j] {
                    mx = mx.max(src[j]);
                }
            }
            if mx == f64::NEG_INFINITY {
                continue; // fully blocked row: stays zero by convention
            }
            let mut denom = 0.0;
            for j in 0..n {
                if !mrow[j] {
                    let e = (src[j] - mx).exp();
                    data[i * n + j] = e;
                    denom += e;
                }
            }
            for j in 0..n {
                data[i * n + j] /= denom;
            }
        }
        let mut t = Tensor::new(vec![m, n], data)?;
        t.requires_grad = self.rg(a);
        Ok(self.push(t, Op::MaskedSoftmaxRows { a, m, n }))
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let shape = self.nodes[x].shape.clone();
        let n = *shape.last().ok_or_else(|| {
            Error::Precondition("layer_norm over zero-dimensional tensor".into())
        })?;
        if self.nodes[gain].shape != [n] {
            return Err(Error::shape("layer_norm gain", &shape, &self.nodes[gain].shape));
        }
        if self.nodes[bias].shape != [n] {
            return Err(Error::shape("layer_norm bias", &shape, &self.nodes[bias].shape));
        }
        let rows = self.nodes[x].data.len() / n;
        let mut data = vec![0.0; rows * n];
        for r in 0..rows {
            let src = &self.nodes[x].data[r * n..(r + 1) * n];
            let mu = src.iter().sum::<f64>() / n as f64;
            let var = src.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                let xhat = (src[j] - mu) * inv;
                data[r * n + j] = self.nodes[gain].data[j] * xhat + self.nodes[bias].data[j];
            }
        }
        let mut t = Tensor::new(shape, data)?;
        t.requires_grad = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(t, Op::LayerNorm { x, gain, bias, eps, rows, n }))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId> {
        let (m, n) = as_2d(&self.nodes[a].shape)
            .ok_or_else(|| Error::shape("transpose", &self.nodes[a].shape, &[]))?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.nodes[a].data[i * n + j];
            }
        }
        let mut t = Tensor::new(vec![n, m], data)?;
        t.requires_grad = self.rg(a);
        Ok(self.push(t, Op::Transpose { a, m, n }))
    }

    pub fn slice_rows(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (m, n) = as_2d(&self.nodes[a].shape)
            .ok_or_else(|| Error::shape("slice_rows", &self.nodes[a].shape, &[]))?;
        if start + len > m {
            return Err(Error::Precondition(format!(
                "slice_rows {start}..{} out of range for {m} rows",
                start + len
            )));
        }
        let data = self.nodes[a].data[start * n..(start + len) * n].to_vec();
        let mut t = Tensor::new(vec![len, n], data)?;
        t.requires_grad = self.rg(a);
        Ok(self.push(t, Op::SliceRows { a, start, len, n }))
    }

    pub fn slice_cols(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (m, n) = as_2d(&self.nodes[a].shape)
            .ok_or_else(|| Error::shape("slice_cols", &self.nodes[a].shape, &[]))?;
        if start + len > n {
            return Err(Error::Precondition(format!(
                "slice_cols {start}..{} out of range for {n} cols",
                start + len
            )));
        }
        let mut data = vec![0.0; m * len];
        for i in 0..m {
            data[i * len..(i + 1) * len]
                .copy_from_slice(&self.nodes[a].data[i * n + start..i * n + start + len]);
        }
        let mut t = Tensor::new(vec![m, len], data)?;
        t.requires_grad = self.rg(a);
        Ok(self.push(t, Op::SliceCols { a, start, len, m, n }))
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Precondition("concat_rows of zero parts".into()));
        }
        let (_, n) = as_2d(&self.nodes[parts[0]].shape)
            .ok_or_else(|| Error::shape("concat_rows", &self.nodes[parts[0]].shape, &[]))?;
        let mut data = Vec::new();
        let mut rows = 0;
        let mut rg = false;
        for &p in parts {
            let (pm, pn) = as_2d(&self.nodes[p].shape)
                .ok_or_else(|| Error::shape("concat_rows", &self.nodes[p].shape, &[]))?;
            if pn != n {
                return Err(Error::shape("concat_rows", &self.nodes[parts[0]].shape, &self.nodes[p].shape));
            }
            rows += pm;
            rg |= self.rg(p);
            data.extend_from_slice(&self.nodes[p].data);
        }
        let mut t = Tensor::new(vec![rows, n], data)?;
        t.requires_grad = rg;
        Ok(self.push(t, Op::ConcatRows { parts: parts.to_vec(), n }))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Precondition("concat_cols of zero parts".into()));
        }
        let (m, _) = as_2d(&self.nodes[parts[0]].shape)
            .ok_or_else(|| Error::shape("concat_cols", &self.nodes[parts[0]].shape, &[]))?;
        let mut total = 0;
        let mut rg = false;
        for &p in parts {
            let (pm, pn) = as_2d(&self.nodes[p].shape)
                .ok_or_else(|| Error::shape("concat_cols", &self.nodes[p].shape, &[]))?;
            if pm != m {
                return Err(Error::shape("concat_cols", &self.nodes[parts[0]].shape, &self.nodes[p].shape));
            }
            total += pn;
            rg |= self.rg(p);
        }
        let mut data = vec![0.0; m * total];
        let mut off = 0;
        for &p in parts {
            let pn = *self.nodes[p].shape.last().unwrap();
            for i in 0..m {
                data[i * total + off..i * total + off + pn]
                    .copy_from_slice(&self.nodes[p].data[i * pn..(i + 1) * pn]);
            }
            off += pn;
        }
        let mut t = Tensor::new(vec![m, total], data)?;
        t.requires_grad = rg;
        Ok(self.push(t, Op::ConcatCols { parts: parts.to_vec(), m }))
    }

    /// Gather rows by index (repeats allowed); backward scatter-adds.
    pub fn gather_rows(&mut self, a: TensorId, idx: &[usize]) -> Result<TensorId> {
        let (m, n) = as_2d(&self.nodes[a].shape)
            .ok_or_else(|| Error::shape("gather_rows", &self.nodes[a].shape, &[]))?;
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::Precondition(format!(
                    "gather_rows index {i} out of range for {m} rows"
                )));
            }
            data.extend_from_slice(&self.nodes[a].data[i * n..(i + 1) * n]);
        }
        let mut t = Tensor::new(vec![idx.len(), n], data)?;
        t.requires_grad = self.rg(a);
        Ok(self.push(t, Op::GatherRows { a, idx: idx.to_vec(), n }))
    }

    /// Reverse pass from a scalar loss node. Gradients of every
    /// `requires_grad` node reachable from `loss` are materialized in
    /// `Tensor::grad`; constants never allocate a gradient.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss].data.len() != 1 {
            return Err(Error::Precondition(format!(
                "backward expects a scalar loss, got shape {:?}",
                self.nodes[loss].shape
            )));
        }
        let n_nodes = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n_nodes];
        grads[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.dispatch_backward(id, &g, &mut grads);
            // Re-store so leaf grads survive and intermediate grads are
            // available after backward for inspection.
            grads[id] = Some(g);
        }

        for id in 0..n_nodes {
            if self.nodes[id].requires_grad {
                self.nodes[id].grad = Some(
                    grads[id]
                        .take()
                        .unwrap_or_else(|| vec![0.0; self.nodes[id].data.len()]),
                );
            }
        }
        Ok(())
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], id: TensorId, delta: &[f64]) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let slot = grads[id].get_or_insert_with(|| vec![0.0; self.nodes[id].data.len()]);
        for (s, d) in slot.iter_mut().zip(delta) {
            *s += d;
        }
    }

    fn acc_at(&self, grads: &mut [Option<Vec<f64>>], id: TensorId, index: usize, delta: f64) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let slot = grads[id].get_or_insert_with(|| vec![0.0; self.nodes[id].data.len()]);
        slot[index] += delta;
    }

    fn dispatch_backward(&self, id: TensorId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.ops[id] {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_nt_acc(&mut da, g, &self.nodes[*b].data, *m, *n, *k);
                    self.acc(grads, *a, &da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    matmul_tn_acc(&mut db, &self.nodes[*a].data, g, *k, *m, *n);
                    self.acc(grads, *b, &db);
                }
            }
            Op::Add { a, b } => {
                self.acc(grads, *a, g);
                self.acc(grads, *b, g);
            }
            Op::AddRow { a, row, m, n } => {
                self.acc(grads, *a, g);
                if self.rg(*row) {
                    let mut dr = vec![0.0; *n];
                    for i in 0..*m {
                        for j in 0..*n {
                            dr[j] += g[i * n + j];
                        }
                    }
                    self.acc(grads, *row, &dr);
                }
            }
            Op::Sub { a, b } => {
                self.acc(grads, *a, g);
                if self.rg(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.acc(grads, *b, &neg);
                }
            }
            Op::Mul { a, b } => {
                if self.rg(*a) {
                    let da: Vec<f64> = g.iter().zip(&self.nodes[*b].data).map(|(gv, bv)| gv * bv).collect();
                    self.acc(grads, *a, &da);
                }
                if self.rg(*b) {
                    let db: Vec<f64> = g.iter().zip(&self.nodes[*a].data).map(|(gv, av)| gv * av).collect();
                    self.acc(grads, *b, &db);
                }
            }
            Op::Div { a, b } => {
                if self.rg(*a) {
                    let da: Vec<f64> = g.iter().zip(&self.nodes[*b].data).map(|(gv, bv)| gv / bv).collect();
                    self.acc(grads, *a, &da);
                }
                if self.rg(*b) {
                    let db: Vec<f64> = g
                        .iter()
                        .zip(self.nodes[*a].data.iter().zip(&self.nodes[*b].data))
                        .map(|(gv, (av, bv))| -gv * av / (bv * bv))
                        .collect();
                    self.acc(grads, *b, &db);
                }
            }
            Op::Scale { a, c } => {
                let da: Vec<f64> = g.iter().map(|v| v * c).collect();
                self.acc(grads, *a, &da);
            }
            Op::Shift { a } => self.acc(grads, *a, g),
            Op::Neg { a } => {
                let da: Vec<f64> = g.iter().map(|v| -v).collect();
                self.acc(grads, *a, &da);
            }
            Op::Abs { a } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[*a].data)
                    .map(|(gv, av)| gv * if *av > 0.0 { 1.0 } else if *av < 0.0 { -1.0 } else { 0.0 })
                    .collect();
                self.acc(grads, *a, &da);
            }
            Op::Relu { a } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[*a].data)
                    .map(|(gv, av)| if *av > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.acc(grads, *a, &da);
            }
            Op::Sigmoid { a } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[id].data)
                    .map(|(gv, yv)| gv * yv * (1.0 - yv))
                    .collect();
                self.acc(grads, *a, &da);
            }
            Op::LogSigmoid { a } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[*a].data)
                    .map(|(gv, xv)| gv * sigmoid_scalar(-xv))
                    .collect();
                self.acc(grads, *a, &da);
            }
            Op::Sin { a } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[*a].data)
                    .map(|(gv, xv)| gv * xv.cos())
                    .collect();
                self.acc(grads, *a, &da);
            }
            Op::Cos { a } => {
                let da: Vec<f64> = g
                    .iter()
                    .zip(&self.nodes[*a].data)
                    .map(|(gv, xv)| -gv * xv.sin())
                    .collect();
                self.acc(grads, *a, &da);
            }
            Op::MinElem { a, b } => {
                for (i, gv) in g.iter().enumerate() {
                    if self.nodes[*a].data[i] <= self.nodes[*b].data[i] {
                        self.acc_at(grads, *a, i, *gv);
                    } else {
                        self.acc_at(grads, *b, i, *gv);
                    }
                }
            }
            Op::MaxElem { a, b } => {
                for (i, gv) in g.iter().enumerate() {
                    if self.nodes[*a].data[i] >= self.nodes[*b].data[i] {
                        self.acc_at(grads, *a, i, *gv);
                    } else {
                        self.acc_at(grads, *b, i, *gv);
                    }
                }
            }
            Op::RowMax { a, m, n } => {
                for i in 0..*m {
                    let row = &self.nodes[*a].data[i * n..(i + 1) * n];
                    let mut arg = 0;
                    for j in 1..*n {
                        if row[j] > row[arg] {
                            arg = j;
                        }
                    }
                    self.acc_at(grads, *a, i * n + arg, g[i]);
                }
            }
            Op::SumAll { a } => {
                let da = vec![g[0]; self.nodes[*a].data.len()];
                self.acc(grads, *a, &da);
            }
            Op::MeanAll { a } => {
                let len = self.nodes[*a].data.len();
                let da = vec![g[0] / len as f64; len];
                self.acc(grads, *a, &da);
            }
            Op::Softmax { a, axis } => {
                let shape = &self.nodes[id].shape;
                let axis_len = shape[*axis];
                let inner: usize = shape[*axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                let s = &self.nodes[id].data;
                let mut da = vec![0.0; s.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * axis_len * inner + i;
                        let mut dot = 0.0;
                        for j in 0..axis_len {
                            let p = base + j * inner;
                            dot += g[p] * s[p];
                        }
                        for j in 0..axis_len {
                            let p = base + j * inner;
                            da[p] = s[p] * (g[p] - dot);
                        }
                    }
                }
                self.acc(grads, *a, &da);
            }
            Op::MaskedSoftmaxRows { a, m, n } => {
                // Blocked entries have s == 0, so the standard softmax
                // jacobian-vector product covers them (and fully blocked
                // rows) with zero gradient.
                let s = &self.nodes[id].data;
                let mut da = vec![0.0; s.len()];
                for i in 0..*m {
                    let mut dot = 0.0;
                    for j in 0..*n {
                        dot += g[i * n + j] * s[i * n + j];
                    }
                    for j in 0..*n {
                        let p = i * n + j;
                        da[p] = s[p] * (g[p] - dot);
                    }
                }
                self.acc(grads, *a, &da);
            }
            Op::LayerNorm { x, gain, bias, eps, rows, n } => {
                let nf = *n as f64;
                let mut dx = vec![0.0; rows * n];
                let mut dgain = vec![0.0; *n];
                let mut dbias = vec![0.0; *n];
                for r in 0..*rows {
                    let src = &self.nodes[*x].data[r * n..(r + 1) * n];
                    let mu = src.iter().sum::<f64>() / nf;
                    let var = src.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / nf;
                    let inv = 1.0 / (var + eps).sqrt();
                    let grow = &g[r * n..(r + 1) * n];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..*n {
                        let xhat = (src[j] - mu) * inv;
                        let dxhat = grow[j] * self.nodes[*gain].data[j];
                        dgain[j] += grow[j] * xhat;
                        dbias[j] += grow[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    for j in 0..*n {
                        let xhat = (src[j] - mu) * inv;
                        let dxhat = grow[j] * self.nodes[*gain].data[j];
                        dx[r * n + j] = inv * (dxhat - sum_dxhat / nf - xhat * sum_dxhat_xhat / nf);
                    }
                }
                self.acc(grads, *x, &dx);
                self.acc(grads, *gain, &dgain);
                self.acc(grads, *bias, &dbias);
            }
            Op::Transpose { a, m, n } => {
                if self.rg(*a) {
                    let mut da = vec![0.0; m * n];
                    for i in 0..*m {
                        for j in 0..*n {
                            da[i * n + j] = g[j * m + i];
                        }
                    }
                    self.acc(grads, *a, &da);
                }
            }
            Op::SliceRows { a, start, len, n } => {
                if self.rg(*a) {
                    let mut da = vec![0.0; self.nodes[*a].data.len()];
                    da[start * n..(start + len) * n].copy_from_slice(g);
                    self.acc(grads, *a, &da);
                }
            }
            Op::SliceCols { a, start, len, m, n } => {
                if self.rg(*a) {
                    let mut da = vec![0.0; self.nodes[*a].data.len()];
                    for i in 0..*m {
                        da[i * n + start..i * n + start + len]
                            .copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                    self.acc(grads, *a, &da);
                }
            }
            Op::ConcatRows { parts, n } => {
                let mut off = 0;
                for &p in parts {
                    let rows = self.nodes[p].data.len() / n;
                    self.acc(grads, p, &g[off..off + rows * n]);
                    off += rows * n;
                }
            }
            Op::ConcatCols { parts, m } => {
                let total: usize = parts
                    .iter()
                    .map(|&p| self.nodes[p].shape.last().copied().unwrap_or(0))
                    .sum();
                let mut off = 0;
                for &p in parts {
                    let pn = *self.nodes[p].shape.last().unwrap();
                    if self.rg(p) {
                        let mut dp = vec![0.0; m * pn];
                        for i in 0..*m {
                            dp[i * pn..(i + 1) * pn]
                                .copy_from_slice(&g[i * total + off..i * total + off + pn]);
                        }
                        self.acc(grads, p, &dp);
                    }
                    off += pn;
                }
            }
            Op::GatherRows { a, idx, n } => {
                if self.rg(*a) {
                    let mut da = vec![0.0; self.nodes[*a].data.len()];
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..*n {
                            da[i * n + j] += g[r * n + j];
                        }
                    }
                    self.acc(grads, *a, &da);
                }
            }
        }
    }
}

/// Max relative gradient error of a scalar-valued graph against central
/// finite differences.
///
/// `build` reconstructs the graph from leaf data, returning the scalar loss;
/// it is called once per perturbed coordinate. Relative error per coordinate
/// is `|analytic - numeric| / max(1, |analytic|)`.
#[derive(Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: usize,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
}

pub fn grad_check(
    params: &[(Vec<usize>, Vec<f64>)],
    build: impl Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
) -> Result<GradCheckReport> {
    let h = 1e-5;
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = params
        .iter()
        .map(|(shape, data)| tape.param(shape.clone(), data.clone()))
        .collect::<Result<_>>()?;
    let loss = build(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| tape.grad(id).expect("param gradient").to_vec())
        .collect();

    let eval = |data: &[(Vec<usize>, Vec<f64>)]| -> Result<f64> {
        let mut t = Tape::new();
        let ids: Vec<TensorId> = data
            .iter()
            .map(|(shape, d)| t.param(shape.clone(), d.clone()))
            .collect::<Result<_>>()?;
        let loss = build(&mut t, &ids)?;
        Ok(t.data(loss)[0])
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: 0,
        worst_coord: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut scratch: Vec<(Vec<usize>, Vec<f64>)> = params.to_vec();
    for (pi, (_, data)) in params.iter().enumerate() {
        for ci in 0..data.len() {
            scratch[pi].1[ci] = data[ci] + h;
            let up = eval(&scratch)?;
            scratch[pi].1[ci] = data[ci] - h;
            let down = eval(&scratch)?;
            scratch[pi].1[ci] = data[ci];
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi][ci];
            let rel = (a - numeric).abs() / f64::max(1.0, a.abs());
            if rel > report.max_rel_err {
                report = GradCheckReport {
                    max_rel_err: rel,
                    worst_param: pi,
                    worst_coord: ci,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}
