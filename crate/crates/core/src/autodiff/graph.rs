use std::cell::{Ref, RefCell};
use std::fmt;

use super::kernels::{gemm, transpose, Layout};
use crate::error::{dim_err, FcpError, Result};

/// Recorded operation producing a node. Operand fields are node ids.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        a: usize,
        rows: usize,
        cols: usize,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    AddRowBias {
        x: usize,
        bias: usize,
        cols: usize,
    },
    AddColBias {
        x: usize,
        bias: usize,
        cols: usize,
    },
    BroadcastCols {
        a: usize,
        cols: usize,
    },
    ConcatRows(Vec<usize>),
    Reshape(usize),
    Softmax {
        a: usize,
        scale: f64,
        cols: usize,
    },
    MaxOverRows {
        a: usize,
        argmax: Vec<usize>,
        cols: usize,
    },
    NormalizeMax {
        a: usize,
        argmax: Option<usize>,
    },
    RowNormalize {
        a: usize,
        norms: Vec<f64>,
        cols: usize,
    },
    Sigmoid(usize),
    Relu(usize),
    Ln(usize),
    Clamp {
        a: usize,
        lo: f64,
        hi: f64,
    },
    Sum(usize),
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// A reverse-mode differentiation graph.
///
/// Nodes are appended in evaluation order, so node ids are already a
/// topological order. A graph is confined to one thread (`RefCell`).
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.len())
            .field("grad_enabled", &self.grad_enabled)
            .finish()
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy)]
pub struct Tensor<'g> {
    graph: &'g Graph,
    id: usize,
}

impl fmt::Debug for Tensor<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    /// A graph in which nothing is differentiable; used for evaluation.
    pub fn no_grad() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn leaf(&self, values: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Tensor<'_>> {
        if shape.is_empty() || shape.contains(&0) {
            return dim_err("leaf", format!("shape {shape:?} must have positive dimensions"));
        }
        if numel(shape) != values.len() {
            return dim_err(
                "leaf",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), values.len()),
            );
        }
        Ok(self.push(shape.to_vec(), values, Op::Leaf, requires_grad && self.grad_enabled))
    }

    /// Differentiable leaf.
    pub fn param(&self, values: Vec<f64>, shape: &[usize]) -> Result<Tensor<'_>> {
        self.leaf(values, shape, true)
    }

    /// Non-differentiable leaf; never accumulates grad.
    pub fn constant(&self, values: Vec<f64>, shape: &[usize]) -> Result<Tensor<'_>> {
        self.leaf(values, shape, false)
    }

    pub fn scalar(&self, value: f64) -> Tensor<'_> {
        self.push(vec![1], vec![value], Op::Leaf, false)
    }

    /// Clears accumulated gradients on every node.
    pub fn zero_grad(&self) {
        for node in self.nodes.borrow_mut().iter_mut() {
            node.grad = None;
        }
    }

    fn push(&self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Tensor<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
            grad: None,
        });
        Tensor {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    fn requires(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }
}

impl<'g> Tensor<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.graph.nodes.borrow()[self.id].value.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    /// Borrowed view of the values. Do not hold across op construction.
    pub fn values(&self) -> Ref<'g, [f64]> {
        Ref::map(self.graph.nodes.borrow(), |n| n[self.id].value.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.values().to_vec()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.values()[0]
    }

    /// Accumulated gradient, if this node is differentiable and `backward` reached it.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.graph.nodes.borrow()[self.id].grad.clone()
    }

    fn same_graph(&self, other: &Tensor<'g>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.graph, other.graph) {
            Ok(())
        } else {
            Err(FcpError::Contract(format!("{op}: operands belong to different graphs")))
        }
    }

    fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape();
        match s.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => dim_err(op, format!("expected a 2-D tensor, got shape {s:?}")),
        }
    }

    fn unary(&self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Tensor<'g> {
        let rg = self.requires_grad();
        self.graph.push(shape, value, op, rg)
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.values().iter().map(|&x| f(x)).collect()
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&self, rhs: &Tensor<'g>) -> Result<Tensor<'g>> {
        self.same_graph(rhs, "matmul")?;
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = rhs.dims2("matmul")?;
        if k != k2 {
            return dim_err("matmul", format!("[{m}x{k}] · [{k2}x{n}]"));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            1.0,
            &self.values(),
            Layout::Normal,
            &rhs.values(),
            Layout::Normal,
            0.0,
            &mut out,
        );
        let rg = self.graph.requires(&[self.id, rhs.id]);
        Ok(self.graph.push(
            vec![m, n],
            out,
            Op::MatMul {
                a: self.id,
                b: rhs.id,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    pub fn transpose(&self) -> Result<Tensor<'g>> {
        let (rows, cols) = self.dims2("transpose")?;
        let out = transpose(&self.values(), rows, cols);
        Ok(self.unary(vec![cols, rows], out, Op::Transpose { a: self.id, rows, cols }))
    }

    // ---- elementwise ------------------------------------------------------

    fn binary(&self, rhs: &Tensor<'g>, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Tensor<'g>> {
        self.same_graph(rhs, name)?;
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa != sb {
            return dim_err(name, format!("{sa:?} vs {sb:?}"));
        }
        let out: Vec<f64> = self
            .values()
            .iter()
            .zip(rhs.values().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.graph.requires(&[self.id, rhs.id]);
        Ok(self.graph.push(sa, out, op, rg))
    }

    pub fn add(&self, rhs: &Tensor<'g>) -> Result<Tensor<'g>> {
        self.binary(rhs, "add", |x, y| x + y, Op::Add(self.id, rhs.id))
    }

    pub fn sub(&self, rhs: &Tensor<'g>) -> Result<Tensor<'g>> {
        self.binary(rhs, "sub", |x, y| x - y, Op::Sub(self.id, rhs.id))
    }

    pub fn mul(&self, rhs: &Tensor<'g>) -> Result<Tensor<'g>> {
        self.binary(rhs, "mul", |x, y| x * y, Op::Mul(self.id, rhs.id))
    }

    pub fn div(&self, rhs: &Tensor<'g>) -> Result<Tensor<'g>> {
        self.binary(rhs, "div", |x, y| x / y, Op::Div(self.id, rhs.id))
    }

    pub fn scale(&self, c: f64) -> Tensor<'g> {
        self.unary(self.shape(), self.map(|x| c * x), Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<'g> {
        self.unary(self.shape(), self.map(|x| x + c), Op::AddScalar(self.id))
    }

    /// `c - x`
    pub fn rsub_scalar(&self, c: f64) -> Tensor<'g> {
        self.scale(-1.0).add_scalar(c)
    }

    pub fn sigmoid(&self) -> Tensor<'g> {
        self.unary(
            self.shape(),
            self.map(|x| 1.0 / (1.0 + (-x).exp())),
            Op::Sigmoid(self.id),
        )
    }

    pub fn relu(&self) -> Tensor<'g> {
        self.unary(self.shape(), self.map(|x| x.max(0.0)), Op::Relu(self.id))
    }

    pub fn ln(&self) -> Tensor<'g> {
        self.unary(self.shape(), self.map(f64::ln), Op::Ln(self.id))
    }

    /// Clamp into `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor<'g> {
        self.unary(
            self.shape(),
            self.map(|x| x.clamp(lo, hi)),
            Op::Clamp { a: self.id, lo, hi },
        )
    }

    pub fn sum(&self) -> Tensor<'g> {
        let s = self.values().iter().sum();
        self.unary(vec![1], vec![s], Op::Sum(self.id))
    }

    pub fn mean(&self) -> Tensor<'g> {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    // ---- broadcasting and layout ------------------------------------------

    /// `x[M×L] + bias[L]` added to every row.
    pub fn add_row_bias(&self, bias: &Tensor<'g>) -> Result<Tensor<'g>> {
        self.same_graph(bias, "add_row_bias")?;
        let (rows, cols) = self.dims2("add_row_bias")?;
        if bias.numel() != cols {
            return dim_err(
                "add_row_bias",
                format!("bias has {} entries for {cols} columns", bias.numel()),
            );
        }
        let mut out = self.to_vec();
        {
            let b = bias.values();
            for r in 0..rows {
                for (x, &bv) in out[r * cols..(r + 1) * cols].iter_mut().zip(b.iter()) {
                    *x += bv;
                }
            }
        }
        let rg = self.graph.requires(&[self.id, bias.id]);
        Ok(self.graph.push(
            vec![rows, cols],
            out,
            Op::AddRowBias {
                x: self.id,
                bias: bias.id,
                cols,
            },
            rg,
        ))
    }

    /// `x[M×L] + bias[M]` added to every column.
    pub fn add_col_bias(&self, bias: &Tensor<'g>) -> Result<Tensor<'g>> {
        self.same_graph(bias, "add_col_bias")?;
        let (rows, cols) = self.dims2("add_col_bias")?;
        if bias.numel() != rows {
            return dim_err(
                "add_col_bias",
                format!("bias has {} entries for {rows} rows", bias.numel()),
            );
        }
        let mut out = self.to_vec();
        {
            let b = bias.values();
            for r in 0..rows {
                for x in out[r * cols..(r + 1) * cols].iter_mut() {
                    *x += b[r];
                }
            }
        }
        let rg = self.graph.requires(&[self.id, bias.id]);
        Ok(self.graph.push(
            vec![rows, cols],
            out,
            Op::AddColBias {
                x: self.id,
                bias: bias.id,
                cols,
            },
            rg,
        ))
    }

    /// Repeats an `M×1` column `cols` times.
    pub fn broadcast_cols(&self, cols: usize) -> Result<Tensor<'g>> {
        let (rows, one) = self.dims2("broadcast_cols")?;
        if one != 1 || cols == 0 {
            return dim_err(
                "broadcast_cols",
                format!("expected [M x 1] and cols > 0, got [{rows} x {one}]"),
            );
        }
        let v = self.values();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            out.extend(std::iter::repeat_n(v[r], cols));
        }
        drop(v);
        Ok(self.unary(vec![rows, cols], out, Op::BroadcastCols { a: self.id, cols }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<'g>> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return dim_err("reshape", format!("{:?} -> {shape:?}", self.shape()));
        }
        Ok(self.unary(shape.to_vec(), self.to_vec(), Op::Reshape(self.id)))
    }

    // ---- reductions used by attention and masks ---------------------------

    /// Row-wise softmax of `self / scale` over the last dimension.
    ///
    /// With `mask`, columns where the mask is false get logit −∞ and output
    /// exactly 0. Every row must keep at least one column.
    pub fn softmax_rows(&self, scale: f64, mask: Option<&[bool]>) -> Result<Tensor<'g>> {
        let (rows, cols) = self.dims2("softmax_rows")?;
        if !(scale > 0.0) {
            return Err(FcpError::Contract(format!("softmax scale must be > 0, got {scale}")));
        }
        if let Some(m) = mask {
            if m.len() != cols {
                return dim_err("softmax_rows", format!("mask of length {} for {cols} columns", m.len()));
            }
            if !m.iter().any(|&b| b) {
                return Err(FcpError::Degenerate("softmax mask keeps no positions".into()));
            }
        }
        let keep = |j: usize| mask.is_none_or(|m| m[j]);
        let v = self.values();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &v[r * cols..(r + 1) * cols];
            let dst = &mut out[r * cols..(r + 1) * cols];
            let mx = (0..cols)
                .filter(|&j| keep(j))
                .map(|j| row[j] / scale)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..cols {
                if keep(j) {
                    let e = (row[j] / scale - mx).exp();
                    dst[j] = e;
                    z += e;
                }
            }
            for x in dst.iter_mut() {
                *x /= z;
            }
        }
        drop(v);
        Ok(self.unary(
            vec![rows, cols],
            out,
            Op::Softmax {
                a: self.id,
                scale,
                cols,
            },
        ))
    }

    /// Column-wise max over rows of an `N×L` tensor, giving a `1×L` tensor.
    pub fn max_over_rows(&self) -> Result<Tensor<'g>> {
        let (rows, cols) = self.dims2("max_over_rows")?;
        let v = self.values();
        let mut out = vec![f64::NEG_INFINITY; cols];
        let mut argmax = vec![0usize; cols];
        for r in 0..rows {
            for j in 0..cols {
                let x = v[r * cols + j];
                if x > out[j] {
                    out[j] = x;
                    argmax[j] = r;
                }
            }
        }
        drop(v);
        Ok(self.unary(
            vec![1, cols],
            out,
            Op::MaxOverRows {
                a: self.id,
                argmax,
                cols,
            },
        ))
    }

    /// Divide by the global maximum. All-zero input stays all-zero.
    /// Negative entries are a contract error.
    pub fn normalize_max(&self) -> Result<Tensor<'g>> {
        let v = self.values();
        if let Some(x) = v.iter().find(|&&x| x < 0.0) {
            return Err(FcpError::Contract(format!("normalize_max on negative value {x}")));
        }
        let (k, mx) = v.iter().copied().enumerate().fold(
            (0, f64::NEG_INFINITY),
            |acc, (i, x)| if x > acc.1 { (i, x) } else { acc },
        );
        let (out, argmax) = if mx > 0.0 {
            (v.iter().map(|&x| x / mx).collect(), Some(k))
        } else {
            (vec![0.0; v.len()], None)
        };
        drop(v);
        Ok(self.unary(self.shape(), out, Op::NormalizeMax { a: self.id, argmax }))
    }

    /// Scale every row of an `N×L` tensor to unit L2 norm. Zero rows are degenerate.
    pub fn row_normalize(&self) -> Result<Tensor<'g>> {
        let (rows, cols) = self.dims2("row_normalize")?;
        let v = self.values();
        let mut out = vec![0.0; rows * cols];
        let mut norms = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &v[r * cols..(r + 1) * cols];
            let nrm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if nrm == 0.0 {
                return Err(FcpError::Degenerate(format!("row {r} has zero norm")));
            }
            for (o, &x) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = x / nrm;
            }
            norms.push(nrm);
        }
        drop(v);
        Ok(self.unary(
            vec![rows, cols],
            out,
            Op::RowNormalize {
                a: self.id,
                norms,
                cols,
            },
        ))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse-mode sweep from this scalar. Gradients add onto whatever is
    /// already stored; call [`Graph::zero_grad`] to reset.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(FcpError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let fresh = {
            let nodes = self.graph.nodes.borrow();
            backprop(&nodes, self.id)
        };
        let mut nodes = self.graph.nodes.borrow_mut();
        for (node, g) in nodes.iter_mut().zip(fresh) {
            if let Some(g) = g {
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    let len = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![0.0; len]))
}

fn backprop(nodes: &[Node], root: usize) -> Vec<Option<Vec<f64>>> {
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
    grads[root] = Some(vec![1.0]);

    for id in (0..=root).rev() {
        let node = &nodes[id];
        if !node.requires_grad {
            continue;
        }
        let Some(g) = grads[id].take() else { continue };
        let val = |i: usize| nodes[i].value.as_slice();

        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if let Some(da) = slot(&mut grads, nodes, a) {
                    gemm(m, n, k, 1.0, &g, Layout::Normal, val(b), Layout::Transposed, 1.0, da);
                }
                if let Some(db) = slot(&mut grads, nodes, b) {
                    gemm(k, m, n, 1.0, val(a), Layout::Transposed, &g, Layout::Normal, 1.0, db);
                }
            }
            &Op::Transpose { a, rows, cols } => {
                if let Some(da) = slot(&mut grads, nodes, a) {
                    let gt = transpose(&g, cols, rows);
                    da.iter_mut().zip(gt).for_each(|(d, x)| *d += x);
                }
            }
            &Op::Add(a, b) => {
                for i in [a, b] {
                    if let Some(d) = slot(&mut grads, nodes, i) {
                        d.iter_mut().zip(&g).for_each(|(d, x)| *d += x);
                    }
                }
            }
            &Op::Sub(a, b) => {
                if let Some(d) = slot(&mut grads, nodes, a) {
                    d.iter_mut().zip(&g).for_each(|(d, x)| *d += x);
                }
                if let Some(d) = slot(&mut grads, nodes, b) {
                    d.iter_mut().zip(&g).for_each(|(d, x)| *d -= x);
                }
            }
            &Op::Mul(a, b) => {
                if let Some(d) = slot(&mut grads, nodes, a) {
                    for ((d, x), y) in d.iter_mut().zip(&g).zip(val(b)) {
                        *d += x * y;
                    }
                }
                if let Some(d) = slot(&mut grads, nodes, b) {
                    for ((d, x), y) in d.iter_mut().zip(&g).zip(val(a)) {
                        *d += x * y;
                    }
                }
            }
            &Op::Div(a, b) => {
                if let Some(d) = slot(&mut grads, nodes, a) {
                    for ((d, x), y) in d.iter_mut().zip(&g).zip(val(b)) {
                        *d += x / y;
                    }
                }
                if let Some(d) = slot(&mut grads, nodes, b) {
                    for (((d, x), num), den) in d.iter_mut().zip(&g).zip(val(a)).zip(val(b)) {
                        *d -= x * num / (den * den);
                    }
                }
            }
            &Op::Scale(a, c) => {
                if let Some(d) = slot(&mut grads, nodes, a) {
                    d.iter_mut().zip(&g).for_each(|(d, x)| *d += c * x);
                }
            }
            &Op::AddScalar(a) | &Op::Reshape(a) => {
                if let Some(d) = slot(&mut grads, nodes, a) {
                    d.iter_mut().zip(&g).for_each(|(d, x)| *d += x);
                }
            }
            &Op::AddRowBias { x, bias, cols } => {
                if let Some(d) = slot(&mut grads, nodes, x) {
                    d.iter_mut().zip(&g).for_each(|(d, v)| *d += v);
                }
                if let Some(d) = slot(&mut grads, nodes, bias) {
                    for row in g.chunks_exact(cols) {
                        d.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                }
            }
            &Op::AddColBias { x, bias, cols } => {
                if let Some(d) = slot(&mut grads, nodes, x) {
                    d.iter_mut().zip(&g).for_each(|(d, v)| *d += v);
                }
                if let Some(d) = slot(&mut grads, nodes, bias) {
                    for (db, row) in d.iter_mut().zip(g.chunks_exact(cols)) {
                        *db += row.iter().sum::<f64>();
                    }
                }
            }
            &Op::BroadcastCols { a, cols } => {
                if let Some(d) = slot(&mut grads, nodes, a) {
                    for (da, row) in d.iter_mut().zip(g.chunks_exact(cols)) {
                        *da += row.iter().sum::<f64>();
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p].value.len();
                    if let Some(d) = slot(&mut grads, nodes, p) {
                        d.iter_mut().zip(&g[offset..offset + len]).for_each(|(d, v)| *d += v);
                    }
                    offset += len;
                }
            }
            &Op::Softmax { a, scale, cols } => {
                if let Some(d) = slot(&mut grads, nodes, a) {
                    let y = &node.value;
                    for ((drow, grow), yrow) in d
                        .chunks_exact_mut(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(y.chunks_exact(cols))
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((dx, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dx += yv * (gv - dot) / scale;
                        }
                    }
                }
            }
            Op::MaxOverRows { a, argmax, cols } => {
                if let Some(d) = slot(&mut grads, nodes, *a) {
                    for (j, &r) in argmax.iter().enumerate() {
                        d[r * cols + j] += g[j];
                    }
                }
            }
            &Op::NormalizeMax { a, argmax } => {
                if let (Some(k), Some(d)) = (argmax, slot(&mut grads, nodes, a)) {
                    let x = val(a);
                    let m = x[k];
                    let mut cross = 0.0;
                    for ((dx, gv), xv) in d.iter_mut().zip(&g).zip(x) {
                        *dx += gv / m;
                        cross += gv * xv;
                    }
                    d[k] -= cross / (m * m);
                }
            }
            Op::RowNormalize { a, norms, cols } => {
                if let Some(d) = slot(&mut grads, nodes, *a) {
                    let y = &node.value;
                    for (((drow, grow), yrow), nrm) in d
                        .chunks_exact_mut(*cols)
                        .zip(g.chunks_exact(*cols))
                        .zip(y.chunks_exact(*cols))
                        .zip(norms)
                    {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for ((dx, gv), yv) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dx += (gv - yv * dot) / nrm;
                        }
                    }
                }
            }
            &Op::Sigmoid(a) => {
                if let Some(d) = slot(&mut grads, nodes, a) {
                    for ((dx, gv), y) in d.iter_mut().zip(&g).zip(&node.value) {
                        *dx += gv * y * (1.0 - y);
                    }
                }
            }
            &Op::Relu(a) => {
                if let Some(d) = slot(&mut grads, nodes, a) {
                    for ((dx, gv), x) in d.iter_mut().zip(&g).zip(val(a)) {
                        if *x > 0.0 {
                            *dx += gv;
                        }
                    }
                }
            }
            &Op::Ln(a) => {
                if let Some(d) = slot(&mut grads, nodes, a) {
                    for ((dx, gv), x) in d.iter_mut().zip(&g).zip(val(a)) {
                        *dx += gv / x;
                    }
                }
            }
            &Op::Clamp { a, lo, hi } => {
                if let Some(d) = slot(&mut grads, nodes, a) {
                    for ((dx, gv), x) in d.iter_mut().zip(&g).zip(val(a)) {
                        if *x >= lo && *x <= hi {
                            *dx += gv;
                        }
                    }
                }
            }
            &Op::Sum(a) => {
                if let Some(d) = slot(&mut grads, nodes, a) {
                    d.iter_mut().for_each(|dx| *dx += g[0]);
                }
            }
        }
        grads[id] = Some(g);
    }
    grads
}

/// Stack 2-D tensors with equal column counts along the first dimension.
pub fn concat_rows<'g>(parts: &[Tensor<'g>]) -> Result<Tensor<'g>> {
    let Some(first) = parts.first() else {
        return dim_err("concat_rows", "no operands");
    };
    let graph = first.graph;
    let (_, cols) = first.dims2("concat_rows")?;
    let mut rows = 0;
    let mut out = Vec::new();
    for p in parts {
        p.same_graph(first, "concat_rows")?;
        let (r, c) = p.dims2("concat_rows")?;
        if c != cols {
            return dim_err("concat_rows", format!("column counts {cols} and {c}"));
        }
        rows += r;
        out.extend_from_slice(&p.values());
    }
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let rg = graph.requires(&ids);
    Ok(graph.push(vec![rows, cols], out, Op::ConcatRows(ids), rg))
}
