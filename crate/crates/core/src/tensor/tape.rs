use std::cell::{Ref, RefCell};
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow(usize, usize),
    Gelu(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Transpose(usize),
    Reshape(usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceCols {
        x: usize,
        start: usize,
    },
    GatherRows {
        x: usize,
        indices: Vec<usize>,
    },
    Sum(usize),
    Mean(usize),
    SumLastDim(usize),
    MeanRows(usize),
    MaxPoolRows {
        x: usize,
        argmax: Vec<usize>,
    },
    Mse(usize, usize),
    Chamfer {
        pred: usize,
        target: usize,
        group: usize,
        pred_nn: Vec<usize>,
        target_nn: Vec<usize>,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
struct Inner {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Define-by-run record of differentiable operations.
///
/// Nodes are appended in evaluation order, so the record is always
/// topologically sorted. [`Tape::backward`] consumes the record; a tape is
/// single-use.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    inner: RefCell<Inner>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        if var.tape != self.tape {
            return None;
        }
        self.grads.get(var.index).and_then(Option::as_ref)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

fn require_matrix(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [m, n] => Ok((*m, *n)),
        s => shape_err(format!("{what}: expected a matrix, got {s:?}")),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            inner: RefCell::new(Inner::default()),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn live(&self) -> Result<Ref<'_, Inner>> {
        let inner = self.inner.borrow();
        if inner.consumed {
            return Err(Error::Usage(
                "tape already consumed by backward; re-run the forward pass".into(),
            ));
        }
        Ok(inner)
    }

    fn index(&self, inner: &Inner, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= inner.nodes.len() {
            return Err(Error::Usage("variable does not belong to this tape".into()));
        }
        Ok(v.index)
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("{name} produced a non-finite value")));
        }
        let mut inner = self.inner.borrow_mut();
        let index = inner.nodes.len();
        inner.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var { tape: self.id, index })
    }

    /// Records an input. `requires_grad` marks it as a differentiable leaf.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Result<Var> {
        self.live()?;
        self.push(value.detached(), Op::Leaf, requires_grad, "leaf")
    }

    pub fn constant(&self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Result<Tensor> {
        let inner = self.live()?;
        let i = self.index(&inner, v)?;
        Ok(inner.nodes[i].value.clone())
    }

    pub fn shape(&self, v: Var) -> Result<Vec<usize>> {
        let inner = self.live()?;
        let i = self.index(&inner, v)?;
        Ok(inner.nodes[i].value.shape().to_vec())
    }

    pub fn item(&self, v: Var) -> Result<f64> {
        let inner = self.live()?;
        let i = self.index(&inner, v)?;
        let t = &inner.nodes[i].value;
        if !t.is_scalar() {
            return Err(Error::Usage(format!("item() on shape {:?}", t.shape())));
        }
        Ok(t.item())
    }

    fn unary<F>(&self, x: Var, name: &str, f: F) -> Result<Var>
    where
        F: FnOnce(&Tensor, usize) -> Result<(Tensor, Op)>,
    {
        let (value, op, rg) = {
            let inner = self.live()?;
            let xi = self.index(&inner, x)?;
            let node = &inner.nodes[xi];
            let (value, op) = f(&node.value, xi)?;
            (value, op, node.requires_grad)
        };
        self.push(value, op, rg, name)
    }

    fn binary<F>(&self, a: Var, b: Var, name: &str, f: F) -> Result<Var>
    where
        F: FnOnce(&Tensor, &Tensor, usize, usize) -> Result<(Tensor, Op)>,
    {
        let (value, op, rg) = {
            let inner = self.live()?;
            let ai = self.index(&inner, a)?;
            let bi = self.index(&inner, b)?;
            let (na, nb) = (&inner.nodes[ai], &inner.nodes[bi]);
            let (value, op) = f(&na.value, &nb.value, ai, bi)?;
            (value, op, na.requires_grad || nb.requires_grad)
        };
        self.push(value, op, rg, name)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "matmul", |av, bv, ai, bi| {
            let (m, k) = require_matrix(av, "matmul lhs")?;
            let (k2, n) = require_matrix(bv, "matmul rhs")?;
            if k != k2 {
                return shape_err(format!("matmul {m}x{k} by {k2}x{n}"));
            }
            let mut out = vec![0.0; m * n];
            kernels::matmul_acc(av.data(), bv.data(), &mut out, m, k, n);
            Ok((Tensor::new(&[m, n], out)?, Op::MatMul(ai, bi)))
        })
    }

    fn elementwise(&self, a: Var, b: Var, name: &str, f: fn(f64, f64) -> f64, op: fn(usize, usize) -> Op) -> Result<Var> {
        self.binary(a, b, name, |av, bv, ai, bi| {
            if av.shape() != bv.shape() {
                return shape_err(format!("{name}: {:?} vs {:?}", av.shape(), bv.shape()));
            }
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            Ok((Tensor::new(av.shape(), data)?, op(ai, bi)))
        })
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn scale(&self, x: Var, factor: f64) -> Result<Var> {
        self.unary(x, "scale", |xv, xi| {
            let data = xv.data().iter().map(|v| v * factor).collect();
            Ok((Tensor::new(xv.shape(), data)?, Op::Scale(xi, factor)))
        })
    }

    /// Adds a row vector (`[n]` or `[1, n]`) to every row of `x`.
    pub fn add_row(&self, x: Var, row: Var) -> Result<Var> {
        self.binary(x, row, "add_row", |xv, rv, xi, ri| {
            let n = xv.cols();
            if rv.numel() != n {
                return shape_err(format!("add_row: {:?} + {:?}", xv.shape(), rv.shape()));
            }
            let mut data = xv.data().to_vec();
            for chunk in data.chunks_mut(n) {
                for (d, r) in chunk.iter_mut().zip(rv.data()) {
                    *d += r;
                }
            }
            Ok((Tensor::new(xv.shape(), data)?, Op::AddRow(xi, ri)))
        })
    }

    pub fn gelu(&self, x: Var) -> Result<Var> {
        self.unary(x, "gelu", |xv, xi| {
            let data = xv.data().iter().map(|&v| kernels::gelu(v)).collect();
            Ok((Tensor::new(xv.shape(), data)?, Op::Gelu(xi)))
        })
    }

    /// Softmax over the last extent, max-subtracted.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        self.unary(x, "softmax", |xv, xi| {
            if xv.data().iter().any(|v| v.is_nan()) {
                return Err(Error::Numeric("softmax input contains NaN".into()));
            }
            let n = xv.cols();
            let mut out = vec![0.0; xv.numel()];
            for (row, o) in xv.data().chunks(n).zip(out.chunks_mut(n)) {
                kernels::softmax_row(row, o);
            }
            Ok((Tensor::new(xv.shape(), out)?, Op::Softmax(xi)))
        })
    }

    /// Layer normalization over the last extent with affine `gamma`, `beta`.
    pub fn layernorm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (value, op, rg) = {
            let inner = self.live()?;
            let xi = self.index(&inner, x)?;
            let gi = self.index(&inner, gamma)?;
            let bi = self.index(&inner, beta)?;
            let xv = &inner.nodes[xi].value;
            let gv = &inner.nodes[gi].value;
            let bv = &inner.nodes[bi].value;
            let n = xv.cols();
            if gv.numel() != n || bv.numel() != n {
                return shape_err(format!(
                    "layernorm: x {:?}, gamma {:?}, beta {:?}",
                    xv.shape(),
                    gv.shape(),
                    bv.shape()
                ));
            }
            let rows = xv.rows();
            let mut normalized = vec![0.0; xv.numel()];
            let mut inv_std = vec![0.0; rows];
            let mut out = vec![0.0; xv.numel()];
            for r in 0..rows {
                let row = &xv.data()[r * n..(r + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let denom = (var + eps).sqrt();
                if denom == 0.0 {
                    return Err(Error::Numeric(
                        "layernorm of a constant row with eps = 0".into(),
                    ));
                }
                let is = 1.0 / denom;
                inv_std[r] = is;
                for c in 0..n {
                    let h = (row[c] - mean) * is;
                    normalized[r * n + c] = h;
                    out[r * n + c] = h * gv.data()[c] + bv.data()[c];
                }
            }
            let rg = [xi, gi, bi].iter().any(|&i| inner.nodes[i].requires_grad);
            let op = Op::LayerNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                normalized,
                inv_std,
            };
            (Tensor::new(xv.shape(), out)?, op, rg)
        };
        self.push(value, op, rg, "layernorm")
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        self.unary(x, "transpose", |xv, xi| {
            let (m, n) = require_matrix(xv, "transpose")?;
            let mut out = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    out[j * m + i] = xv.data()[i * n + j];
                }
            }
            Ok((Tensor::new(&[n, m], out)?, Op::Transpose(xi)))
        })
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        self.unary(x, "reshape", |xv, xi| {
            Ok((xv.detached().reshaped(shape)?, Op::Reshape(xi)))
        })
    }

    fn concat(&self, parts: &[Var], rows: bool) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("concat of zero tensors".into());
        }
        let (value, op, rg) = {
            let inner = self.live()?;
            let idx = parts
                .iter()
                .map(|&p| self.index(&inner, p))
                .collect::<Result<Vec<_>>>()?;
            let vals: Vec<&Tensor> = idx.iter().map(|&i| &inner.nodes[i].value).collect();
            let dims = vals
                .iter()
                .map(|v| require_matrix(v, "concat"))
                .collect::<Result<Vec<_>>>()?;
            let value = if rows {
                let n = dims[0].1;
                if dims.iter().any(|d| d.1 != n) {
                    return shape_err(format!("concat_rows: column mismatch {dims:?}"));
                }
                let m: usize = dims.iter().map(|d| d.0).sum();
                let data = vals.iter().flat_map(|v| v.data().iter().copied()).collect();
                Tensor::new(&[m, n], data)?
            } else {
                let m = dims[0].0;
                if dims.iter().any(|d| d.0 != m) {
                    return shape_err(format!("concat_cols: row mismatch {dims:?}"));
                }
                let n: usize = dims.iter().map(|d| d.1).sum();
                let mut data = Vec::with_capacity(m * n);
                for r in 0..m {
                    for v in &vals {
                        data.extend_from_slice(v.row(r));
                    }
                }
                Tensor::new(&[m, n], data)?
            };
            let rg = idx.iter().any(|&i| inner.nodes[i].requires_grad);
            let op = if rows {
                Op::ConcatRows(idx)
            } else {
                Op::ConcatCols(idx)
            };
            (value, op, rg)
        };
        self.push(value, op, rg, "concat")
    }

    /// Stacks matrices vertically.
    pub fn concat_rows(&self, parts: &[Var]) -> Result<Var> {
        self.concat(parts, true)
    }

    /// Stacks matrices side by side.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var> {
        self.concat(parts, false)
    }

    pub fn slice_cols(&self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.unary(x, "slice_cols", |xv, xi| {
            let (m, n) = require_matrix(xv, "slice_cols")?;
            if len == 0 || start + len > n {
                return shape_err(format!("slice_cols {start}..{} of {n}", start + len));
            }
            let mut data = Vec::with_capacity(m * len);
            for r in 0..m {
                data.extend_from_slice(&xv.row(r)[start..start + len]);
            }
            Ok((Tensor::new(&[m, len], data)?, Op::SliceCols { x: xi, start }))
        })
    }

    /// Selects rows by index; repeats allowed.
    pub fn gather_rows(&self, x: Var, indices: &[usize]) -> Result<Var> {
        self.unary(x, "gather_rows", |xv, xi| {
            let (m, n) = require_matrix(xv, "gather_rows")?;
            if indices.is_empty() {
                return shape_err("gather_rows with no indices".into());
            }
            let mut data = Vec::with_capacity(indices.len() * n);
            for &r in indices {
                if r >= m {
                    return shape_err(format!("gather_rows index {r} out of {m}"));
                }
                data.extend_from_slice(xv.row(r));
            }
            let op = Op::GatherRows {
                x: xi,
                indices: indices.to_vec(),
            };
            Ok((Tensor::new(&[indices.len(), n], data)?, op))
        })
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        self.unary(x, "sum", |xv, xi| {
            Ok((Tensor::scalar(xv.data().iter().sum()), Op::Sum(xi)))
        })
    }

    pub fn mean(&self, x: Var) -> Result<Var> {
        self.unary(x, "mean", |xv, xi| {
            let s: f64 = xv.data().iter().sum();
            Ok((Tensor::scalar(s / xv.numel() as f64), Op::Mean(xi)))
        })
    }

    /// Sums over the last extent, dropping it (`[m, n]` → `[m]`).
    pub fn sum_lastdim(&self, x: Var) -> Result<Var> {
        self.unary(x, "sum_lastdim", |xv, xi| {
            let n = xv.cols();
            let data: Vec<f64> = xv.data().chunks(n).map(|r| r.iter().sum()).collect();
            let shape = if xv.shape().len() > 1 {
                xv.shape()[..xv.shape().len() - 1].to_vec()
            } else {
                vec![1]
            };
            Ok((Tensor::new(&shape, data)?, Op::SumLastDim(xi)))
        })
    }

    /// Column means of a matrix, as `[1, n]`.
    pub fn mean_rows(&self, x: Var) -> Result<Var> {
        self.unary(x, "mean_rows", |xv, xi| {
            let (m, n) = require_matrix(xv, "mean_rows")?;
            let mut out = vec![0.0; n];
            for r in 0..m {
                for (o, v) in out.iter_mut().zip(xv.row(r)) {
                    *o += v;
                }
            }
            out.iter_mut().for_each(|o| *o /= m as f64);
            Ok((Tensor::new(&[1, n], out)?, Op::MeanRows(xi)))
        })
    }

    /// Column-wise max over consecutive groups of `group` rows:
    /// `[g·group, n]` → `[g, n]`. Ties resolve to the first row.
    pub fn max_pool_rows(&self, x: Var, group: usize) -> Result<Var> {
        self.unary(x, "max_pool_rows", |xv, xi| {
            let (m, n) = require_matrix(xv, "max_pool_rows")?;
            if group == 0 || m % group != 0 {
                return shape_err(format!("max_pool_rows: {m} rows in groups of {group}"));
            }
            let g = m / group;
            let mut out = vec![f64::NEG_INFINITY; g * n];
            let mut argmax = vec![0usize; g * n];
            for gi in 0..g {
                for r in gi * group..(gi + 1) * group {
                    for c in 0..n {
                        let v = xv.data()[r * n + c];
                        if v > out[gi * n + c] {
                            out[gi * n + c] = v;
                            argmax[gi * n + c] = r;
                        }
                    }
                }
            }
            Ok((Tensor::new(&[g, n], out)?, Op::MaxPoolRows { x: xi, argmax }))
        })
    }

    /// Mean over rows of the squared L2 distance between matching rows.
    pub fn mse(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mse", |av, bv, ai, bi| {
            if av.shape() != bv.shape() {
                return shape_err(format!("mse: {:?} vs {:?}", av.shape(), bv.shape()));
            }
            let sq: f64 = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            Ok((Tensor::scalar(sq / av.rows() as f64), Op::Mse(ai, bi)))
        })
    }

    /// Symmetric Chamfer-L2 distance averaged over groups.
    ///
    /// `pred` and `target` are `[g·group, d]`; rows `i·group..(i+1)·group`
    /// form point set `i`. For each set the loss is the mean squared distance
    /// from every predicted point to its nearest target point plus the same
    /// in the other direction.
    pub fn chamfer(&self, pred: Var, target: Var, group: usize) -> Result<Var> {
        self.binary(pred, target, "chamfer", |pv, tv, pi, ti| {
            let (m, d) = require_matrix(pv, "chamfer pred")?;
            if tv.shape() != pv.shape() || group == 0 || m % group != 0 {
                return shape_err(format!(
                    "chamfer: {:?} vs {:?} in groups of {group}",
                    pv.shape(),
                    tv.shape()
                ));
            }
            let sets = m / group;
            let mut pred_nn = vec![0; m];
            let mut target_nn = vec![0; m];
            let mut total = 0.0;
            let dist = |a: &[f64], b: &[f64]| -> f64 {
                a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
            };
            for s in 0..sets {
                let range = s * group..(s + 1) * group;
                let mut fwd = 0.0;
                let mut bwd = 0.0;
                for i in range.clone() {
                    let (mut best, mut arg) = (f64::INFINITY, range.start);
                    for j in range.clone() {
                        let dd = dist(pv.row(i), tv.row(j));
                        if dd < best {
                            best = dd;
                            arg = j;
                        }
                    }
                    pred_nn[i] = arg;
                    fwd += best;
                }
                for j in range.clone() {
                    let (mut best, mut arg) = (f64::INFINITY, range.start);
                    for i in range.clone() {
                        let dd = dist(pv.row(i), tv.row(j));
                        if dd < best {
                            best = dd;
                            arg = i;
                        }
                    }
                    target_nn[j] = arg;
                    bwd += best;
                }
                total += (fwd + bwd) / group as f64;
            }
            let _ = d;
            let op = Op::Chamfer {
                pred: pi,
                target: ti,
                group,
                pred_nn,
                target_nn,
            };
            Ok((Tensor::scalar(total / sets as f64), op))
        })
    }

    /// Mean softmax cross-entropy of `[n, classes]` logits against labels.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.unary(logits, "cross_entropy", |lv, li| {
            let (m, c) = require_matrix(lv, "cross_entropy")?;
            if labels.len() != m || labels.iter().any(|&l| l >= c) {
                return shape_err(format!(
                    "cross_entropy: {m}x{c} logits with {} labels",
                    labels.len()
                ));
            }
            let mut probs = vec![0.0; m * c];
            let mut loss = 0.0;
            for r in 0..m {
                let row = lv.row(r);
                kernels::softmax_row(row, &mut probs[r * c..(r + 1) * c]);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                loss += lse - row[labels[r]];
            }
            let op = Op::CrossEntropy {
                logits: li,
                labels: labels.to_vec(),
                probs,
            };
            Ok((Tensor::scalar(loss / m as f64), op))
        })
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Returns gradients for every node that requires them and consumes the
    /// tape; a second call is a usage error.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = {
            let mut inner = self.inner.borrow_mut();
            if inner.consumed {
                return Err(Error::Usage("backward called twice on one tape".into()));
            }
            if loss.tape != self.id || loss.index >= inner.nodes.len() {
                return Err(Error::Usage("loss does not belong to this tape".into()));
            }
            if !inner.nodes[loss.index].value.is_scalar() {
                return Err(Error::Usage(format!(
                    "backward needs a scalar loss, got {:?}",
                    inner.nodes[loss.index].value.shape()
                )));
            }
            inner.consumed = true;
            std::mem::take(&mut inner.nodes)
        };
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.index] = Some(vec![1.0]);

        for i in (0..=loss.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            backprop(&nodes, i, &g, &mut grads)?;
            grads[i] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::new(n.value.shape(), g).expect("grad shape"))
            })
            .collect();
        Ok(Gradients { tape: self.id, grads })
    }
}

fn accumulate<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], target: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[target].requires_grad {
        return None;
    }
    let len = nodes[target].value.numel();
    Some(grads[target].get_or_insert_with(|| vec![0.0; len]))
}

fn backprop(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
    let out = &nodes[i].value;
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            if let Some(ga) = accumulate(grads, nodes, *a) {
                kernels::matmul_nt_acc(g, bv.data(), ga, m, n, k);
            }
            if let Some(gb) = accumulate(grads, nodes, *b) {
                kernels::matmul_tn_acc(av.data(), g, gb, m, k, n);
            }
        }
        Op::Add(a, b) | Op::Sub(a, b) => {
            let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if let Some(ga) = accumulate(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
            }
            if let Some(gb) = accumulate(grads, nodes, *b) {
                gb.iter_mut().zip(g).for_each(|(x, y)| *x += sign * y);
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[*a].value.data(), nodes[*b].value.data());
            if let Some(ga) = accumulate(grads, nodes, *a) {
                for ((x, y), w) in ga.iter_mut().zip(g).zip(bv) {
                    *x += y * w;
                }
            }
            if let Some(gb) = accumulate(grads, nodes, *b) {
                for ((x, y), w) in gb.iter_mut().zip(g).zip(av) {
                    *x += y * w;
                }
            }
        }
        Op::Scale(a, f) => {
            if let Some(ga) = accumulate(grads, nodes, *a) {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += f * y);
            }
        }
        Op::AddRow(x, r) => {
            let n = out.cols();
            if let Some(gx) = accumulate(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            if let Some(gr) = accumulate(grads, nodes, *r) {
                for chunk in g.chunks(n) {
                    gr.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::Gelu(x) => {
            let xv = nodes[*x].value.data();
            if let Some(gx) = accumulate(grads, nodes, *x) {
                for ((a, b), v) in gx.iter_mut().zip(g).zip(xv) {
                    *a += b * kernels::gelu_grad(*v);
                }
            }
        }
        Op::Softmax(x) => {
            let n = out.cols();
            if let Some(gx) = accumulate(grads, nodes, *x) {
                for ((y, gy), gxr) in out.data().chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        gxr[c] += y[c] * (gy[c] - dot);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            normalized,
            inv_std,
        } => {
            let n = out.cols();
            let gv = nodes[*gamma].value.data().to_vec();
            if let Some(gg) = accumulate(grads, nodes, *gamma) {
                for (h, gy) in normalized.chunks(n).zip(g.chunks(n)) {
                    for c in 0..n {
                        gg[c] += gy[c] * h[c];
                    }
                }
            }
            if let Some(gb) = accumulate(grads, nodes, *beta) {
                for gy in g.chunks(n) {
                    gb.iter_mut().zip(gy).for_each(|(a, b)| *a += b);
                }
            }
            if let Some(gx) = accumulate(grads, nodes, *x) {
                let nf = n as f64;
                for (r, ((h, gy), gxr)) in normalized
                    .chunks(n)
                    .zip(g.chunks(n))
                    .zip(gx.chunks_mut(n))
                    .enumerate()
                {
                    let dh: Vec<f64> = gy.iter().zip(&gv).map(|(a, b)| a * b).collect();
                    let sum_dh: f64 = dh.iter().sum();
                    let sum_dh_h: f64 = dh.iter().zip(h).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        gxr[c] += inv_std[r] / nf * (nf * dh[c] - sum_dh - h[c] * sum_dh_h);
                    }
                }
            }
        }
        Op::Transpose(x) => {
            let (n, m) = (out.shape()[0], out.shape()[1]);
            if let Some(gx) = accumulate(grads, nodes, *x) {
                for r in 0..n {
                    for c in 0..m {
                        gx[c * n + r] += g[r * m + c];
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = accumulate(grads, nodes, *x) {
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.numel();
                if let Some(gp) = accumulate(grads, nodes, p) {
                    gp.iter_mut()
                        .zip(&g[offset..offset + len])
                        .for_each(|(a, b)| *a += b);
                }
                offset += len;
            }
        }
        Op::ConcatCols(parts) => {
            let total = out.cols();
            let mut col = 0;
            for &p in parts {
                let w = nodes[p].value.cols();
                if let Some(gp) = accumulate(grads, nodes, p) {
                    for (r, gr) in gp.chunks_mut(w).enumerate() {
                        let src = &g[r * total + col..r * total + col + w];
                        gr.iter_mut().zip(src).for_each(|(a, b)| *a += b);
                    }
                }
                col += w;
            }
        }
        Op::SliceCols { x, start } => {
            let n = nodes[*x].value.cols();
            let len = out.cols();
            if let Some(gx) = accumulate(grads, nodes, *x) {
                for (r, gr) in g.chunks(len).enumerate() {
                    let dst = &mut gx[r * n + start..r * n + start + len];
                    dst.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::GatherRows { x, indices } => {
            let n = out.cols();
            if let Some(gx) = accumulate(grads, nodes, *x) {
                for (gr, &r) in g.chunks(n).zip(indices) {
                    let dst = &mut gx[r * n..(r + 1) * n];
                    dst.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = accumulate(grads, nodes, *x) {
                gx.iter_mut().for_each(|a| *a += g[0]);
            }
        }
        Op::Mean(x) => {
            let n = nodes[*x].value.numel() as f64;
            if let Some(gx) = accumulate(grads, nodes, *x) {
                gx.iter_mut().for_each(|a| *a += g[0] / n);
            }
        }
        Op::SumLastDim(x) => {
            let n = nodes[*x].value.cols();
            if let Some(gx) = accumulate(grads, nodes, *x) {
                for (gr, gy) in gx.chunks_mut(n).zip(g) {
                    gr.iter_mut().for_each(|a| *a += gy);
                }
            }
        }
        Op::MeanRows(x) => {
            let m = nodes[*x].value.rows();
            let n = out.cols();
            if let Some(gx) = accumulate(grads, nodes, *x) {
                for gr in gx.chunks_mut(n) {
                    gr.iter_mut().zip(g).for_each(|(a, b)| *a += b / m as f64);
                }
            }
        }
        Op::MaxPoolRows { x, argmax } => {
            let n = out.cols();
            if let Some(gx) = accumulate(grads, nodes, *x) {
                for (k, (&r, gy)) in argmax.iter().zip(g).enumerate() {
                    gx[r * n + k % n] += gy;
                }
            }
        }
        Op::Mse(a, b) => {
            let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
            let scale = 2.0 * g[0] / av.rows() as f64;
            if let Some(ga) = accumulate(grads, nodes, *a) {
                for ((x, p), q) in ga.iter_mut().zip(av.data()).zip(bv.data()) {
                    *x += scale * (p - q);
                }
            }
            if let Some(gb) = accumulate(grads, nodes, *b) {
                for ((x, p), q) in gb.iter_mut().zip(av.data()).zip(bv.data()) {
                    *x -= scale * (p - q);
                }
            }
        }
        Op::Chamfer {
            pred,
            target,
            group,
            pred_nn,
            target_nn,
        } => {
            let (pv, tv) = (&nodes[*pred].value, &nodes[*target].value);
            let d = pv.cols();
            let sets = pv.rows() / group;
            let scale = 2.0 * g[0] / (sets * group) as f64;
            let mut gp = vec![0.0; pv.numel()];
            let mut gt = vec![0.0; tv.numel()];
            for (i, &j) in pred_nn.iter().enumerate() {
                for c in 0..d {
                    let diff = pv.at(i, c) - tv.at(j, c);
                    gp[i * d + c] += scale * diff;
                    gt[j * d + c] -= scale * diff;
                }
            }
            for (j, &i) in target_nn.iter().enumerate() {
                for c in 0..d {
                    let diff = pv.at(i, c) - tv.at(j, c);
                    gp[i * d + c] += scale * diff;
                    gt[j * d + c] -= scale * diff;
                }
            }
            if let Some(dst) = accumulate(grads, nodes, *pred) {
                dst.iter_mut().zip(&gp).for_each(|(a, b)| *a += b);
            }
            if let Some(dst) = accumulate(grads, nodes, *target) {
                dst.iter_mut().zip(&gt).for_each(|(a, b)| *a += b);
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let c = nodes[*logits].value.cols();
            let m = labels.len() as f64;
            if let Some(gl) = accumulate(grads, nodes, *logits) {
                for (r, &label) in labels.iter().enumerate() {
                    for k in 0..c {
                        let onehot = if k == label { 1.0 } else { 0.0 };
                        gl[r * c + k] += g[0] * (probs[r * c + k] - onehot) / m;
                    }
                }
            }
        }
    }
    Ok(())
}
