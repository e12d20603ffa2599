//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every primitive appends a node holding its output value and the handles of
//! its inputs. Node indices are assigned in creation order, so reverse index
//! order is a valid topological order for backprop. A graph is rebuilt for
//! every forward pass and dropped afterwards.
//!
//! Leaf values may be borrowed (`Cow::Borrowed`) so model parameters are not
//! copied into each graph.

use std::borrow::Cow;

use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};
use super::NumericsError;

/// Variance floor for layer normalization. Rows at or below it normalize to zero.
pub const LAYER_NORM_VAR_FLOOR: f64 = 1e-12;
/// Norm floor for cosine similarity; smaller vectors are rejected.
pub const EPSILON_NORM: f64 = 1e-12;
/// Value written into masked-out logits. Its softmax weight underflows to exactly zero.
pub const MASKED_LOGIT: f64 = -1e30;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddN(Vec<Var>),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Gelu(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Cosine {
        a: Var,
        b: Var,
        norm_a: f64,
        norm_b: f64,
        raw: f64,
    },
    CrossEntropy {
        logits: Var,
        label: usize,
        probs: Vec<f64>,
    },
    MaskFill {
        x: Var,
        keep: Vec<bool>,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a node, or `None` if it does not require grad or is
    /// unreachable from the output.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a node, materializing zeros for unreachable nodes.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &'static str, detail: String) -> NumericsError {
    NumericsError::Shape { op, detail }
}

impl<'a> Default for Graph<'a> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf borrowing its value.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable leaf borrowing its value.
    pub fn constant(&mut self, t: &'a Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param_owned(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant_owned(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copy of `v`'s value as a constant: gradients do not flow through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize), NumericsError> {
        let t = self.value(v);
        match t.shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err(
                op,
                format!("expected a matrix, got shape {:?}", s),
            )),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = self.dims2("matmul_nt", a)?;
        let (n, k2) = self.dims2("matmul_nt", b)?;
        if k != k2 {
            return Err(shape_err(
                "matmul_nt",
                format!("[{m}, {k}] x [{n}, {k2}]^T"),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt_acc(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let (m, n) = self.dims2("transpose", a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::Transpose(a), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{:?} vs {:?}", sa, sb)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Sum of several same-shape tensors.
    pub fn add_n(&mut self, vars: &[Var]) -> Result<Var, NumericsError> {
        let first = *vars
            .first()
            .ok_or_else(|| shape_err("add_n", "no inputs".into()))?;
        let mut acc = self.value(first).clone();
        for &v in &vars[1..] {
            self.same_shape("add_n", first, v)?;
            for (o, x) in acc.data_mut().iter_mut().zip(self.value(v).data()) {
                *o += x;
            }
        }
        let rg = vars.iter().any(|&v| self.rg(v));
        Ok(self.push(acc, Op::AddN(vars.to_vec()), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Adds a length-`n` vector to every row of an `[m, n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, NumericsError> {
        let (m, n) = self.dims2("add_bias", x)?;
        let b = self.value(bias);
        if b.len() != n {
            return Err(shape_err(
                "add_bias",
                format!("[{m}, {n}] + bias {:?}", b.shape()),
            ));
        }
        let mut out = self.value(x).clone();
        let bd = self.value(bias).data().to_vec();
        for row in out.data_mut().chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(&bd) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape(), t.data().iter().map(|v| v * s).collect()).unwrap();
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::new(t.shape(), t.data().iter().map(|v| v + s).collect()).unwrap();
        let rg = self.rg(a);
        self.push(out, Op::AddScalar(a), rg)
    }

    /// Row-wise layer normalization with per-column gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let n = t.cols();
        let m = t.rows();
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "input {:?}, gain {:?}, bias {:?}",
                    t.shape(),
                    self.value(gain).shape(),
                    self.value(bias).shape()
                ),
            ));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            if var > LAYER_NORM_VAR_FLOOR {
                let is = 1.0 / var.sqrt();
                inv_std[r] = is;
                for c in 0..n {
                    xhat[r * n + c] = (row[c] - mean) * is;
                }
            }
            for c in 0..n {
                out[r * n + c] = xhat[r * n + c] * g[c] + b[c];
            }
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            softmax_in_place(row);
        }
        let out = Tensor::new(t.shape(), out).unwrap();
        let rg = self.rg(x);
        self.push(out, Op::Softmax(x), rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = t
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh()))
            .collect();
        let out = Tensor::new(t.shape(), out).unwrap();
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Stacks matrices along the row (token) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let cols = parts
            .first()
            .map(|&v| self.value(v).cols())
            .ok_or_else(|| shape_err("concat_rows", "no inputs".into()))?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_err(
                    "concat_rows",
                    format!("column mismatch: {} vs {:?}", cols, t.shape()),
                ));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(&[rows, cols], data)?,
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    /// Joins matrices side by side along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let rows = parts
            .first()
            .map(|&v| self.value(v).rows())
            .ok_or_else(|| shape_err("concat_cols", "no inputs".into()))?;
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(shape_err(
                    "concat_cols",
                    format!("row mismatch: {} vs {:?}", rows, t.shape()),
                ));
            }
            cols += t.cols();
        }
        let mut data = vec![0.0; rows * cols];
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            let c = t.cols();
            for r in 0..rows {
                data[r * cols + offset..r * cols + offset + c].copy_from_slice(t.row(r));
            }
            offset += c;
        }
        let rg = parts.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::new(&[rows, cols], data)?,
            Op::ConcatCols(parts.to_vec()),
            rg,
        ))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        if start > end || end > rows {
            return Err(shape_err(
                "slice_rows",
                format!("range {start}..{end} of {:?}", t.shape()),
            ));
        }
        let data = t.data()[start * cols..end * cols].to_vec();
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&[end - start, cols], data)?,
            Op::SliceRows(x, start),
            rg,
        ))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        if start > end || end > cols {
            return Err(shape_err(
                "slice_cols",
                format!("range {start}..{end} of {:?}", t.shape()),
            ));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&t.row(r)[start..end]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&[rows, w], data)?, Op::SliceCols(x, start), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.sum() / t.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Cosine similarity of two equal-length tensors, clamped to `[-1, 1]`.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() {
            return Err(shape_err(
                "cosine",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (norm_a, norm_b) = (ta.norm(), tb.norm());
        for norm in [norm_a, norm_b] {
            if norm.is_nan() || norm <= EPSILON_NORM {
                return Err(NumericsError::DegenerateVector { norm });
            }
        }
        let raw = ta.dot(tb) / (norm_a * norm_b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::scalar(raw.clamp(-1.0, 1.0)),
            Op::Cosine {
                a,
                b,
                norm_a,
                norm_b,
                raw,
            },
            rg,
        ))
    }

    /// `-log softmax(logits)[label]` for a single logit row.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var, NumericsError> {
        let t = self.value(logits);
        if t.rows() != 1 {
            return Err(shape_err(
                "cross_entropy",
                format!("expected one logit row, got {:?}", t.shape()),
            ));
        }
        let n = t.len();
        if label >= n {
            return Err(NumericsError::LabelOutOfRange { label, classes: n });
        }
        let mut probs = t.data().to_vec();
        let max = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + probs.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        let loss = lse - t.data()[label];
        for p in probs.iter_mut() {
            *p = (*p - lse).exp();
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss.max(0.0)),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
            rg,
        ))
    }

    /// Replaces entries whose `keep` flag is false with [`MASKED_LOGIT`].
    /// `keep` is indexed by column and applied to every row.
    pub fn mask_fill(&mut self, x: Var, keep: &[bool]) -> Result<Var, NumericsError> {
        let t = self.value(x);
        if keep.len() != t.cols() {
            return Err(shape_err(
                "mask_fill",
                format!("mask of {} for {:?}", keep.len(), t.shape()),
            ));
        }
        if !keep.iter().any(|&k| k) {
            return Err(NumericsError::EmptyMask);
        }
        let mut out = t.clone();
        let n = keep.len();
        for row in out.data_mut().chunks_mut(n) {
            for (v, &k) in row.iter_mut().zip(keep) {
                if !k {
                    *v = MASKED_LOGIT;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::MaskFill {
                x,
                keep: keep.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients, NumericsError> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(NumericsError::NonScalar {
                shape: out.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(output) {
            return Ok(Gradients { grads });
        }
        grads[output.0] = Some(Tensor::full(out.shape(), 1.0));

        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        let buf = slot.get_or_insert_with(|| Tensor::zeros(self.value(v).shape()));
        f(buf.data_mut());
    }

    fn propagate(&self, op: &Op, value: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).cols();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |da| gemm_nt_acc(gd, bv, da, m, n, k));
                self.accumulate(grads, *b, |db| gemm_tn_acc(av, gd, db, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (self.value(*a).rows(), self.value(*a).cols());
                let n = self.value(*b).rows();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |da| gemm_acc(gd, bv, da, m, n, k));
                self.accumulate(grads, *b, |db| gemm_tn_acc(gd, av, db, m, n, k));
            }
            Op::Transpose(a) => {
                let (m, n) = (self.value(*a).rows(), self.value(*a).cols());
                self.accumulate(grads, *a, |da| {
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] += gd[j * m + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, gd));
                self.accumulate(grads, *b, |d| add_into(d, gd));
            }
            Op::AddN(vars) => {
                for v in vars {
                    self.accumulate(grads, *v, |d| add_into(d, gd));
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |d| add_into(d, gd));
                self.accumulate(grads, *b, |d| {
                    for (o, x) in d.iter_mut().zip(gd) {
                        *o -= x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |d| {
                    for ((o, x), y) in d.iter_mut().zip(gd).zip(bv) {
                        *o += x * y;
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((o, x), y) in d.iter_mut().zip(gd).zip(av) {
                        *o += x * y;
                    }
                });
            }
            Op::AddBias(x, bias) => {
                let n = self.value(*bias).len();
                self.accumulate(grads, *x, |d| add_into(d, gd));
                self.accumulate(grads, *bias, |d| {
                    for row in gd.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, |d| {
                    for (o, x) in d.iter_mut().zip(gd) {
                        *o += x * s;
                    }
                });
            }
            Op::AddScalar(a) => {
                self.accumulate(grads, *a, |d| add_into(d, gd));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let n = self.value(*gain).len();
                let gv = self.value(*gain).data();
                self.accumulate(grads, *gain, |d| {
                    for (grow, xrow) in gd.chunks(n).zip(xhat.chunks(n)) {
                        for c in 0..n {
                            d[c] += grow[c] * xrow[c];
                        }
                    }
                });
                self.accumulate(grads, *bias, |d| {
                    for grow in gd.chunks(n) {
                        add_into(d, grow);
                    }
                });
                self.accumulate(grads, *x, |d| {
                    let mut dxhat = vec![0.0; n];
                    for (r, (grow, xrow)) in gd.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let is = inv_std[r];
                        if is == 0.0 {
                            continue;
                        }
                        for c in 0..n {
                            dxhat[c] = grow[c] * gv[c];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx =
                            dxhat.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        let drow = &mut d[r * n..(r + 1) * n];
                        for c in 0..n {
                            drow[c] += is * (dxhat[c] - mean_d - xrow[c] * mean_dx);
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let n = value.cols().max(1);
                let y = value.data();
                self.accumulate(grads, *x, |d| {
                    for ((drow, yrow), grow) in d.chunks_mut(n).zip(y.chunks(n)).zip(gd.chunks(n)) {
                        let s: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for c in 0..yrow.len() {
                            drow[c] += yrow[c] * (grow[c] - s);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |d| {
                    for ((o, &v), &gv) in d.iter_mut().zip(xv).zip(gd) {
                        let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                        let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                        *o += gv * (0.5 * (1.0 + t) + 0.5 * v * dt);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    self.accumulate(grads, *p, |d| add_into(d, &gd[offset..offset + len]));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = value.cols();
                let mut offset = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    self.accumulate(grads, *p, |d| {
                        for (r, drow) in d.chunks_mut(c).enumerate() {
                            add_into(drow, &gd[r * total + offset..r * total + offset + c]);
                        }
                    });
                    offset += c;
                }
            }
            Op::SliceRows(x, start) => {
                let cols = value.cols();
                let s = start * cols;
                self.accumulate(grads, *x, |d| add_into(&mut d[s..s + gd.len()], gd));
            }
            Op::SliceCols(x, start) => {
                let total = self.value(*x).cols();
                let w = value.cols();
                self.accumulate(grads, *x, |d| {
                    for (r, grow) in gd.chunks(w.max(1)).enumerate() {
                        let base = r * total + start;
                        add_into(&mut d[base..base + w], grow);
                    }
                });
            }
            Op::Sum(x) => {
                let s = gd[0];
                self.accumulate(grads, *x, |d| d.iter_mut().for_each(|o| *o += s));
            }
            Op::Mean(x) => {
                let s = gd[0] / self.value(*x).len() as f64;
                self.accumulate(grads, *x, |d| d.iter_mut().for_each(|o| *o += s));
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, |d| add_into(d, gd));
            }
            Op::Cosine {
                a,
                b,
                norm_a,
                norm_b,
                raw,
            } => {
                let s = gd[0];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let denom = norm_a * norm_b;
                self.accumulate(grads, *a, |d| {
                    for ((o, &x), &y) in d.iter_mut().zip(av).zip(bv) {
                        *o += s * (y / denom - raw * x / (norm_a * norm_a));
                    }
                });
                self.accumulate(grads, *b, |d| {
                    for ((o, &y), &x) in d.iter_mut().zip(bv).zip(av) {
                        *o += s * (x / denom - raw * y / (norm_b * norm_b));
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                let s = gd[0];
                self.accumulate(grads, *logits, |d| {
                    for (i, (o, p)) in d.iter_mut().zip(probs).enumerate() {
                        let target = if i == *label { 1.0 } else { 0.0 };
                        *o += s * (p - target);
                    }
                });
            }
            Op::MaskFill { x, keep } => {
                let n = keep.len();
                self.accumulate(grads, *x, |d| {
                    for (drow, grow) in d.chunks_mut(n).zip(gd.chunks(n)) {
                        for c in 0..n {
                            if keep[c] {
                                drow[c] += grow[c];
                            }
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (o, x) in dst.iter_mut().zip(src) {
        *o += x;
    }
}

/// Numerically stable in-place softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    if row.is_empty() {
        return;
    }
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
