//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! Every op appends a node holding its forward value; `backward` walks the
//! tape in reverse once, accumulating vector-Jacobian products into the
//! inputs. Nodes that no leaf with `requires_grad` feeds into are skipped.

use std::collections::BTreeMap;

use super::{AutodiffError, ParamStore, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    MatMulNt(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    MulScalar(usize, usize),
    DivScalar(usize, usize),
    Broadcast(usize),
    Recip(usize),
    Relu(usize),
    Gelu(usize),
    Softmax(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    Embedding { table: usize, ids: Vec<usize> },
    Gather { x: usize, flat: Vec<usize> },
    Sum(usize),
    Mean(usize),
    Pick { x: usize, flat: usize },
    RowNorm(usize),
    CosineRows { a: usize, b: usize, na: Vec<f64>, nb: Vec<f64> },
    SqDistRows(usize, usize),
    PairwiseSqDist(usize),
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A recorded computation. Ops are appended in topological order.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, Var>,
}

fn shape_err(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::Shape { op, detail }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

/// c[m,n] += a[m,k] * b[k,n]
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

/// c[m,n] += a[m,k] * b[n,k]^T
fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            c[i * n + j] += dot(arow, brow);
        }
    }
}

/// c[k,n] += a[m,k]^T * b[m,n]
fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..m {
        let arow = &a[p * k..(p + 1) * k];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &api) in arow.iter().enumerate() {
            if api == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cj, &bj) in crow.iter_mut().zip(brow) {
                *cj += api * bj;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let o = c * 4;
        acc[0] += a[o] * b[o];
        acc[1] += a[o + 1] * b[o + 1];
        acc[2] += a[o + 2] * b[o + 2];
        acc[3] += a[o + 3] * b[o + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let (r, c) = dims(x);
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(c) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::matrix(r, c, out)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward output w.r.t. `v`, if `v` needed one.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var, AutodiffError> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: op_name, node: self.nodes.len() });
        }
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Add a leaf. Leaves with `requires_grad` receive gradients on backward.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var, AutodiffError> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: "leaf", node: self.nodes.len() });
        }
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var, AutodiffError> {
        self.leaf(value, false)
    }

    /// Bind a named parameter from `store`, creating the leaf on first use.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var, AutodiffError> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = store
            .get(name)
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))?;
        let v = self.leaf(p.value.clone(), p.trainable)?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameters bound on this graph, by name.
    pub fn bound_params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    /// Gradients of every bound trainable parameter after `backward`.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .filter_map(|(name, &v)| self.grad(v).map(|g| (name.clone(), g.clone())))
            .collect()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, k) = dims(self.value(a));
        let (k2, n) = dims(self.value(b));
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}x{k}] * [{k2}x{n}]")));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push("matmul", Tensor::matrix(m, n, out), Op::MatMul(a.0, b.0), &[a.0, b.0])
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, k) = dims(self.value(a));
        let (n, k2) = dims(self.value(b));
        if k != k2 {
            return Err(shape_err("matmul_nt", format!("[{m}x{k}] * [{n}x{k2}]^T")));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push("matmul_nt", Tensor::matrix(m, n, out), Op::MatMulNt(a.0, b.0), &[a.0, b.0])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let (r, c) = dims(self.value(a));
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push("transpose", Tensor::matrix(c, r, out), Op::Transpose(a.0), &[a.0])
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize), AutodiffError> {
        let da = dims(self.value(a));
        let db = dims(self.value(b));
        if da != db {
            return Err(shape_err(op, format!("{da:?} vs {db:?}")));
        }
        Ok(da)
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| f(x, y)).collect()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push("add", Tensor::matrix(r, c, out), Op::Add(a.0, b.0), &[a.0, b.0])
    }

    /// Add a 1 x c row to every row of `a` (leading-dimension broadcast).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, AutodiffError> {
        let (r, c) = dims(self.value(a));
        if dims(self.value(row)) != (1, c) {
            return Err(shape_err("add_row", format!("[{r}x{c}] + {:?}", dims(self.value(row)))));
        }
        let bias = self.value(row).data();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .chunks(c)
            .flat_map(|x| x.iter().zip(bias).map(|(&u, &v)| u + v))
            .collect();
        self.push("add_row", Tensor::matrix(r, c, out), Op::AddRow(a.0, row.0), &[a.0, row.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push("sub", Tensor::matrix(r, c, out), Op::Sub(a.0, b.0), &[a.0, b.0])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push("mul", Tensor::matrix(r, c, out), Op::Mul(a.0, b.0), &[a.0, b.0])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var, AutodiffError> {
        let (r, c) = dims(self.value(a));
        let out = self.value(a).data().iter().map(|&x| x * k).collect();
        self.push("scale", Tensor::matrix(r, c, out), Op::Scale(a.0, k), &[a.0])
    }

    /// Add a constant to every element.
    pub fn offset(&mut self, a: Var, k: f64) -> Result<Var, AutodiffError> {
        let (r, c) = dims(self.value(a));
        let out = self.value(a).data().iter().map(|&x| x + k).collect();
        self.push("offset", Tensor::matrix(r, c, out), Op::Offset(a.0), &[a.0])
    }

    /// Multiply every element of `a` by the 1x1 variable `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var, AutodiffError> {
        if self.value(s).len() != 1 {
            return Err(shape_err("mul_scalar", format!("scalar operand {:?}", self.value(s).shape())));
        }
        let k = self.value(s).item();
        let (r, c) = dims(self.value(a));
        let out = self.value(a).data().iter().map(|&x| x * k).collect();
        self.push("mul_scalar", Tensor::matrix(r, c, out), Op::MulScalar(a.0, s.0), &[a.0, s.0])
    }

    /// Divide every element of `a` by the 1x1 variable `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var, AutodiffError> {
        if self.value(s).len() != 1 {
            return Err(shape_err("div_scalar", format!("scalar operand {:?}", self.value(s).shape())));
        }
        let k = self.value(s).item();
        let (r, c) = dims(self.value(a));
        let out = self.value(a).data().iter().map(|&x| x / k).collect();
        self.push("div_scalar", Tensor::matrix(r, c, out), Op::DivScalar(a.0, s.0), &[a.0, s.0])
    }

    /// Repeat a 1x1 variable into a rows x cols matrix.
    pub fn broadcast(&mut self, s: Var, rows: usize, cols: usize) -> Result<Var, AutodiffError> {
        if self.value(s).len() != 1 {
            return Err(shape_err("broadcast", format!("{:?}", self.value(s).shape())));
        }
        let v = self.value(s).item();
        self.push("broadcast", Tensor::filled(&[rows, cols], v), Op::Broadcast(s.0), &[s.0])
    }

    pub fn recip(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let (r, c) = dims(self.value(a));
        let out = self.value(a).data().iter().map(|&x| 1.0 / x).collect();
        self.push("recip", Tensor::matrix(r, c, out), Op::Recip(a.0), &[a.0])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let (r, c) = dims(self.value(a));
        let out = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        self.push("relu", Tensor::matrix(r, c, out), Op::Relu(a.0), &[a.0])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let (r, c) = dims(self.value(a));
        let out = self.value(a).data().iter().map(|&x| gelu(x)).collect();
        self.push("gelu", Tensor::matrix(r, c, out), Op::Gelu(a.0), &[a.0])
    }

    /// Softmax along each row.
    pub fn softmax(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let out = softmax_rows(self.value(a));
        self.push("softmax", out, Op::Softmax(a.0), &[a.0])
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (each 1 x c).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, AutodiffError> {
        let (r, c) = dims(self.value(x));
        if dims(self.value(gamma)) != (1, c) || dims(self.value(beta)) != (1, c) {
            return Err(shape_err("layer_norm", format!("input width {c}")));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = Vec::with_capacity(r * c);
        let mut rstd = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in self.value(x).data().chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(rs);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        self.push(
            "layer_norm",
            Tensor::matrix(r, c, out),
            Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, rstd },
            &[x.0, gamma.0, beta.0],
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let c = parts.first().map(|&p| self.value(p).cols()).ok_or_else(|| shape_err("concat_rows", "no inputs".into()))?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c {
                return Err(shape_err("concat_rows", format!("width {} vs {c}", t.cols())));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push("concat_rows", Tensor::matrix(rows, c, out), Op::ConcatRows(ids.clone()), &ids)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let r = parts.first().map(|&p| self.value(p).rows()).ok_or_else(|| shape_err("concat_cols", "no inputs".into()))?;
        if parts.iter().any(|&p| self.value(p).rows() != r) {
            return Err(shape_err("concat_cols", "row count mismatch".into()));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push("concat_cols", Tensor::matrix(r, total, out), Op::ConcatCols(ids.clone()), &ids)
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let (r, c) = dims(self.value(a));
        if start >= end || end > r {
            return Err(shape_err("slice_rows", format!("{start}..{end} of {r} rows")));
        }
        let out = self.value(a).data()[start * c..end * c].to_vec();
        self.push("slice_rows", Tensor::matrix(end - start, c, out), Op::SliceRows(a.0, start), &[a.0])
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var, AutodiffError> {
        let (r, c) = dims(self.value(a));
        if start >= end || end > c {
            return Err(shape_err("slice_cols", format!("{start}..{end} of {c} cols")));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(r * (end - start));
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        self.push("slice_cols", Tensor::matrix(r, end - start, out), Op::SliceCols(a.0, start), &[a.0])
    }

    /// Look up rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var, AutodiffError> {
        let (vocab, c) = dims(self.value(table));
        if ids.is_empty() {
            return Err(shape_err("embedding", "no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(AutodiffError::Index { op: "embedding", index: bad, bound: vocab });
        }
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(self.value(table).row(i));
        }
        self.push(
            "embedding",
            Tensor::matrix(ids.len(), c, out),
            Op::Embedding { table: table.0, ids: ids.to_vec() },
            &[table.0],
        )
    }

    /// Gather elements by `(row, col)` into a k x 1 column.
    pub fn gather(&mut self, a: Var, at: &[(usize, usize)]) -> Result<Var, AutodiffError> {
        let (r, c) = dims(self.value(a));
        if at.is_empty() {
            return Err(shape_err("gather", "no indices".into()));
        }
        let mut flat = Vec::with_capacity(at.len());
        for &(i, j) in at {
            if i >= r || j >= c {
                return Err(AutodiffError::Index { op: "gather", index: i * c + j, bound: r * c });
            }
            flat.push(i * c + j);
        }
        let out = flat.iter().map(|&f| self.value(a).data()[f]).collect();
        self.push("gather", Tensor::matrix(at.len(), 1, out), Op::Gather { x: a.0, flat }, &[a.0])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let s = self.value(a).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(a.0), &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a.0), &[a.0])
    }

    /// Largest element (first on ties); gradient routes to that element.
    pub fn max(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let d = self.value(a).data();
        let (flat, v) = d.iter().enumerate().fold((0, d[0]), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc });
        self.push("max", Tensor::scalar(v), Op::Pick { x: a.0, flat }, &[a.0])
    }

    /// Smallest element (first on ties); gradient routes to that element.
    pub fn min(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let d = self.value(a).data();
        let (flat, v) = d.iter().enumerate().fold((0, d[0]), |acc, (i, &x)| if x < acc.1 { (i, x) } else { acc });
        self.push("min", Tensor::scalar(v), Op::Pick { x: a.0, flat }, &[a.0])
    }

    /// L2 norm of each row, as an r x 1 column.
    pub fn row_norm(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let (r, c) = dims(self.value(a));
        let mut out = Vec::with_capacity(r);
        for (i, row) in self.value(a).data().chunks(c).enumerate() {
            let n = dot(row, row).sqrt();
            if n == 0.0 {
                return Err(AutodiffError::ZeroNorm { op: "row_norm", row: i });
            }
            out.push(n);
        }
        self.push("row_norm", Tensor::matrix(r, 1, out), Op::RowNorm(a.0), &[a.0])
    }

    /// Cosine similarity between matching rows of `a` and `b`, as an r x 1 column.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (r, c) = self.same_shape("cosine_rows", a, b)?;
        let (mut na, mut nb, mut out) = (Vec::with_capacity(r), Vec::with_capacity(r), Vec::with_capacity(r));
        for i in 0..r {
            let (x, y) = (self.value(a).row(i), self.value(b).row(i));
            let (nx, ny) = (dot(x, x).sqrt(), dot(y, y).sqrt());
            if nx == 0.0 || ny == 0.0 {
                return Err(AutodiffError::ZeroNorm { op: "cosine_rows", row: i });
            }
            na.push(nx);
            nb.push(ny);
            out.push(dot(x, y) / (nx * ny));
        }
        let _ = c;
        self.push(
            "cosine_rows",
            Tensor::matrix(r, 1, out),
            Op::CosineRows { a: a.0, b: b.0, na, nb },
            &[a.0, b.0],
        )
    }

    /// Squared Euclidean distance between matching rows, as an r x 1 column.
    pub fn sq_dist_rows(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (r, _) = self.same_shape("sq_dist_rows", a, b)?;
        let out = (0..r)
            .map(|i| {
                self.value(a).row(i).iter().zip(self.value(b).row(i)).map(|(x, y)| (x - y) * (x - y)).sum()
            })
            .collect();
        self.push("sq_dist_rows", Tensor::matrix(r, 1, out), Op::SqDistRows(a.0, b.0), &[a.0, b.0])
    }

    /// All-pairs squared Euclidean distances between rows of `a` (n x n).
    pub fn pairwise_sq_dist(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let n = self.value(a).rows();
        let mut out = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let d: f64 = self.value(a).row(i).iter().zip(self.value(a).row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
                out[i * n + j] = d;
                out[j * n + i] = d;
            }
        }
        self.push("pairwise_sq_dist", Tensor::matrix(n, n, out), Op::PairwiseSqDist(a.0), &[a.0])
    }

    /// Mean softmax cross-entropy of each row of `logits` against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, AutodiffError> {
        let (r, c) = dims(self.value(logits));
        if labels.len() != r {
            return Err(shape_err("cross_entropy", format!("{r} rows, {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(AutodiffError::Index { op: "cross_entropy", index: bad, bound: c });
        }
        let probs = softmax_rows(self.value(logits));
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            // log-softmax directly, so saturated rows stay finite
            let row = self.value(logits).row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        loss /= r as f64;
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy { logits: logits.0, labels: labels.to_vec(), probs: probs.into_data() },
            &[logits.0],
        )
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&mut self, output: Var) -> Result<(), AutodiffError> {
        if self.value(output).len() != 1 {
            return Err(AutodiffError::NonScalarOutput(self.value(output).shape().to_vec()));
        }
        self.backward_with(&[(output, Tensor::scalar(1.0))])
    }

    /// Reverse pass seeded with explicit output gradients (vector-Jacobian product).
    pub fn backward_with(&mut self, seeds: &[(Var, Tensor)]) -> Result<(), AutodiffError> {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for (v, g) in seeds {
            if g.len() != self.value(*v).len() {
                return Err(shape_err("backward", format!("seed {:?} for {:?}", g.shape(), self.value(*v).shape())));
            }
            if !g.is_finite() {
                return Err(AutodiffError::NonFinite { op: "backward seed", node: v.0 });
            }
            accumulate(&mut grads, v.0, g.data());
            last = last.max(v.0);
        }
        for idx in (0..=last).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            if !g.iter().all(|v| v.is_finite()) {
                return Err(AutodiffError::NonFinite { op: "backward", node: idx });
            }
            grads[idx] = Some(g);
        }
        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.needs_grad && matches!(n.op, Op::Leaf))
                    .map(|d| Tensor::new(n.value.shape().to_vec(), d).expect("grad shape"))
            })
            .collect();
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let needs = |i: usize| self.nodes[i].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(&self.nodes[*a].value);
                let n = y.cols();
                if needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(g, self.nodes[*b].value.data(), &mut da, m, n, k);
                    accumulate(grads, *a, &da);
                }
                if needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(self.nodes[*a].value.data(), g, &mut db, m, k, n);
                    accumulate(grads, *b, &db);
                }
            }
            Op::MatMulNt(a, b) => {
                // y[m,n] = a[m,k] b[n,k]^T
                let (m, k) = dims(&self.nodes[*a].value);
                let n = y.cols();
                if needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nn(g, self.nodes[*b].value.data(), &mut da, m, n, k);
                    accumulate(grads, *a, &da);
                }
                if needs(*b) {
                    let mut db = vec![0.0; n * k];
                    gemm_tn(g, self.nodes[*a].value.data(), &mut db, m, n, k);
                    accumulate(grads, *b, &db);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = dims(y);
                let mut da = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        da[j * r + i] = g[i * c + j];
                    }
                }
                accumulate(grads, *a, &da);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g);
                accumulate(grads, *b, g);
            }
            Op::AddRow(a, row) => {
                accumulate(grads, *a, g);
                if needs(*row) {
                    let c = y.cols();
                    let mut dr = vec![0.0; c];
                    for chunk in g.chunks(c) {
                        for (d, &v) in dr.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *row, &dr);
                }
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g);
                if needs(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(grads, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                if needs(*a) {
                    let d: Vec<f64> = g.iter().zip(vb).map(|(x, y)| x * y).collect();
                    accumulate(grads, *a, &d);
                }
                if needs(*b) {
                    let d: Vec<f64> = g.iter().zip(va).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, &d);
                }
            }
            Op::Scale(a, k) => {
                let d: Vec<f64> = g.iter().map(|v| v * k).collect();
                accumulate(grads, *a, &d);
            }
            Op::Offset(a) => accumulate(grads, *a, g),
            Op::MulScalar(a, s) => {
                let k = self.nodes[*s].value.item();
                if needs(*a) {
                    let d: Vec<f64> = g.iter().map(|v| v * k).collect();
                    accumulate(grads, *a, &d);
                }
                if needs(*s) {
                    let ds = dot(g, self.nodes[*a].value.data());
                    accumulate(grads, *s, &[ds]);
                }
            }
            Op::DivScalar(a, s) => {
                let k = self.nodes[*s].value.item();
                if needs(*a) {
                    let d: Vec<f64> = g.iter().map(|v| v / k).collect();
                    accumulate(grads, *a, &d);
                }
                if needs(*s) {
                    let ds = -dot(g, y.data()) / k;
                    accumulate(grads, *s, &[ds]);
                }
            }
            Op::Broadcast(s) => accumulate(grads, *s, &[g.iter().sum()]),
            Op::Recip(a) => {
                let d: Vec<f64> = g.iter().zip(y.data()).map(|(gv, yv)| -gv * yv * yv).collect();
                accumulate(grads, *a, &d);
            }
            Op::Relu(a) => {
                let x = self.nodes[*a].value.data();
                let d: Vec<f64> = g.iter().zip(x).map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 }).collect();
                accumulate(grads, *a, &d);
            }
            Op::Gelu(a) => {
                let x = self.nodes[*a].value.data();
                let d: Vec<f64> = g.iter().zip(x).map(|(gv, &xv)| gv * gelu_grad(xv)).collect();
                accumulate(grads, *a, &d);
            }
            Op::Softmax(a) => {
                let c = y.cols();
                let mut d = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(c).zip(y.data().chunks(c)) {
                    let s = dot(gr, yr);
                    d.extend(gr.iter().zip(yr).map(|(gv, yv)| yv * (gv - s)));
                }
                accumulate(grads, *a, &d);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = y.cols();
                let gm = self.nodes[*gamma].value.data();
                if needs(*x) {
                    let mut dx = Vec::with_capacity(g.len());
                    for ((gr, hr), &rs) in g.chunks(c).zip(xhat.chunks(c)).zip(rstd) {
                        let dh: Vec<f64> = gr.iter().zip(gm).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dh_h = dot(&dh, hr) / c as f64;
                        dx.extend(dh.iter().zip(hr).map(|(d, h)| rs * (d - mean_dh - h * mean_dh_h)));
                    }
                    accumulate(grads, *x, &dx);
                }
                if needs(*gamma) || needs(*beta) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * hr[j];
                            db[j] += gr[j];
                        }
                    }
                    accumulate(grads, *gamma, &dg);
                    accumulate(grads, *beta, &db);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.nodes[p].value.len();
                    accumulate(grads, p, &g[off..off + n]);
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = dims(y);
                let mut off = 0;
                for &p in parts {
                    let w = self.nodes[p].value.cols();
                    if needs(p) {
                        let mut d = Vec::with_capacity(r * w);
                        for i in 0..r {
                            d.extend_from_slice(&g[i * total + off..i * total + off + w]);
                        }
                        accumulate(grads, p, &d);
                    }
                    off += w;
                }
            }
            Op::SliceRows(a, start) => {
                let src = &self.nodes[*a].value;
                let c = src.cols();
                let mut d = vec![0.0; src.len()];
                d[start * c..start * c + g.len()].copy_from_slice(g);
                accumulate(grads, *a, &d);
            }
            Op::SliceCols(a, start) => {
                let src = &self.nodes[*a].value;
                let (r, c) = dims(src);
                let w = y.cols();
                let mut d = vec![0.0; src.len()];
                for i in 0..r {
                    d[i * c + start..i * c + start + w].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                accumulate(grads, *a, &d);
            }
            Op::Embedding { table, ids } => {
                let src = &self.nodes[*table].value;
                let c = src.cols();
                let mut d = vec![0.0; src.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..c {
                        d[id * c + j] += g[r * c + j];
                    }
                }
                accumulate(grads, *table, &d);
            }
            Op::Gather { x, flat } => {
                let mut d = vec![0.0; self.nodes[*x].value.len()];
                for (gv, &f) in g.iter().zip(flat) {
                    d[f] += gv;
                }
                accumulate(grads, *x, &d);
            }
            Op::Sum(a) => {
                let d = vec![g[0]; self.nodes[*a].value.len()];
                accumulate(grads, *a, &d);
            }
            Op::Mean(a) => {
                let n = self.nodes[*a].value.len();
                let d = vec![g[0] / n as f64; n];
                accumulate(grads, *a, &d);
            }
            Op::Pick { x, flat } => {
                let mut d = vec![0.0; self.nodes[*x].value.len()];
                d[*flat] = g[0];
                accumulate(grads, *x, &d);
            }
            Op::RowNorm(a) => {
                let src = &self.nodes[*a].value;
                let c = src.cols();
                let mut d = Vec::with_capacity(src.len());
                for (i, row) in src.data().chunks(c).enumerate() {
                    let k = g[i] / y.data()[i];
                    d.extend(row.iter().map(|v| v * k));
                }
                accumulate(grads, *a, &d);
            }
            Op::CosineRows { a, b, na, nb } => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let c = va.cols();
                let r = va.rows();
                let mut da = Vec::with_capacity(r * c);
                let mut db = Vec::with_capacity(r * c);
                for i in 0..r {
                    let (x, z) = (va.row(i), vb.row(i));
                    let cos = y.data()[i];
                    let inv = 1.0 / (na[i] * nb[i]);
                    let (ka, kb) = (cos / (na[i] * na[i]), cos / (nb[i] * nb[i]));
                    for j in 0..c {
                        da.push(g[i] * (z[j] * inv - ka * x[j]));
                        db.push(g[i] * (x[j] * inv - kb * z[j]));
                    }
                }
                accumulate(grads, *a, &da);
                accumulate(grads, *b, &db);
            }
            Op::SqDistRows(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let c = va.cols();
                let mut da = Vec::with_capacity(va.len());
                for (i, (x, z)) in va.data().chunks(c).zip(vb.data().chunks(c)).enumerate() {
                    da.extend(x.iter().zip(z).map(|(p, q)| 2.0 * g[i] * (p - q)));
                }
                accumulate(grads, *a, &da);
                if needs(*b) {
                    let db: Vec<f64> = da.iter().map(|v| -v).collect();
                    accumulate(grads, *b, &db);
                }
            }
            Op::PairwiseSqDist(a) => {
                let src = &self.nodes[*a].value;
                let (n, c) = dims(src);
                let mut d = vec![0.0; src.len()];
                for i in 0..n {
                    for j in 0..n {
                        if i == j {
                            continue;
                        }
                        let w = 2.0 * (g[i * n + j] + g[j * n + i]);
                        if w == 0.0 {
                            continue;
                        }
                        let (xi, xj) = (src.row(i), src.row(j));
                        for k in 0..c {
                            d[i * c + k] += w * (xi[k] - xj[k]);
                        }
                    }
                }
                accumulate(grads, *a, &d);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.nodes[*logits].value.cols();
                let r = labels.len();
                let k = g[0] / r as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * k).collect();
                for (i, &lab) in labels.iter().enumerate() {
                    d[i * c + lab] -= k;
                }
                accumulate(grads, *logits, &d);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, g: &[f64]) {
    match &mut grads[idx] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}
