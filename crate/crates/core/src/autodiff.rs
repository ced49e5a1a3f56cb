//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward pass. [`Tape::backward`] walks the nodes in reverse
//! creation order and accumulates gradients into the nodes that require them.
//! Constants (frozen weights, data) never receive gradients, which keeps the
//! backward cost proportional to the trainable part of the graph.
//!
//! Operations that are easier to differentiate by hand (the contrastive loss,
//! the gated fusion) plug in through [`CustomOp`].

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::kernel::{self, LayerNormCache};
use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// A differentiable operation with a hand-written vector–Jacobian product.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Returns one gradient per parent, in parent order. `None` means the
    /// parent does not influence the output.
    fn backward(
        &self,
        parents: &[&Tensor],
        output: &Tensor,
        upstream: &Tensor,
    ) -> Vec<Option<Tensor>>;
}

enum Op {
    Leaf,
    MatMul,
    MatMulBt,
    Add,
    AddRow,
    Sub,
    Mul,
    MulRow,
    Scale(f64),
    Sigmoid,
    Silu,
    Gelu,
    LayerNorm(LayerNormCache),
    Softmax,
    Transpose,
    SliceRows(usize),
    SliceCols(usize),
    ConcatRows,
    ConcatCols,
    L2NormalizeRows(Vec<f64>),
    Sum,
    Square,
    Custom(Box<dyn CustomOp>),
}

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros when `v` did not influence the loss.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&v.shape()),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A leaf that receives gradients.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Vec::new(), Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Vec::new(), Op::Leaf, false)
    }

    fn push(&self, value: Tensor, parents: Vec<usize>, op: Op, leaf_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = if parents.is_empty() {
            leaf_grad
        } else {
            parents.iter().any(|&p| nodes[p].requires_grad)
        };
        nodes.push(Node {
            value,
            parents,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_ref(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Records a custom operation whose forward value was computed by the caller.
    pub fn custom<'t>(
        &'t self,
        parents: &[Var<'t>],
        value: Tensor,
        op: Box<dyn CustomOp>,
    ) -> Var<'t> {
        self.push(
            value,
            parents.iter().map(|v| v.id).collect(),
            Op::Custom(op),
            false,
        )
    }

    pub fn concat_rows<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(Error::arg("concat_rows of nothing"));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let cols = nodes[parts[0].id].value.cols();
            let mut data = Vec::new();
            let mut rows = 0;
            for p in parts {
                let v = &nodes[p.id].value;
                if v.cols() != cols || v.shape().len() != 2 {
                    return Err(Error::arg("concat_rows: column counts differ"));
                }
                rows += v.rows();
                data.extend_from_slice(v.data());
            }
            Tensor::matrix(rows, cols, data)?
        };
        Ok(self.push(
            value,
            parts.iter().map(|v| v.id).collect(),
            Op::ConcatRows,
            false,
        ))
    }

    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t>]) -> Result<Var<'t>> {
        if parts.is_empty() {
            return Err(Error::arg("concat_cols of nothing"));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].id].value.rows();
            let widths: Vec<usize> = parts.iter().map(|p| nodes[p.id].value.cols()).collect();
            if parts.iter().any(|p| nodes[p.id].value.rows() != rows) {
                return Err(Error::arg("concat_cols: row counts differ"));
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    data.extend_from_slice(nodes[p.id].value.row(r));
                }
            }
            Tensor::matrix(rows, total, data)?
        };
        Ok(self.push(
            value,
            parts.iter().map(|v| v.id).collect(),
            Op::ConcatCols,
            false,
        ))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.len() != 1 {
            return Err(Error::arg(format!(
                "backward needs a scalar output, got shape {:?}",
                out.value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; output.id + 1];
        grads[output.id] = Some(Tensor::filled(out.value.shape(), 1.0));

        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if node.parents.is_empty() || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let parent_grads = backward_node(&nodes, node, &g);
            grads[id] = Some(g);
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                if !nodes[p].requires_grad {
                    continue;
                }
                if let Some(pg) = pg {
                    match &mut grads[p] {
                        Some(acc) => acc.add_assign(&pg),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn backward_node(nodes: &[Node], node: &Node, g: &Tensor) -> Vec<Option<Tensor>> {
    let pv = |i: usize| &nodes[node.parents[i]].value;
    match &node.op {
        Op::Leaf => Vec::new(),
        Op::MatMul => {
            let (a, b) = (pv(0), pv(1));
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut da = vec![0.0; m * k];
            gemm_nt(g.data(), b.data(), m, n, k, &mut da);
            let mut db = vec![0.0; k * n];
            gemm_tn(a.data(), g.data(), m, k, n, &mut db);
            vec![
                Some(Tensor::matrix(m, k, da).unwrap()),
                Some(Tensor::matrix(k, n, db).unwrap()),
            ]
        }
        Op::MatMulBt => {
            // C[m×n] = A[m×k] · B[n×k]ᵀ
            let (a, b) = (pv(0), pv(1));
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[0]);
            let mut da = vec![0.0; m * k];
            gemm_nn(g.data(), b.data(), m, n, k, &mut da);
            let mut db = vec![0.0; n * k];
            gemm_tn(g.data(), a.data(), m, n, k, &mut db);
            vec![
                Some(Tensor::matrix(m, k, da).unwrap()),
                Some(Tensor::matrix(n, k, db).unwrap()),
            ]
        }
        Op::Add => vec![Some(g.clone()), Some(g.clone())],
        Op::AddRow => vec![Some(g.clone()), Some(g.column_sums())],
        Op::Sub => vec![Some(g.clone()), Some(g.scale(-1.0))],
        Op::Mul => vec![
            Some(g.hadamard(pv(1)).unwrap()),
            Some(g.hadamard(pv(0)).unwrap()),
        ],
        Op::MulRow => {
            let (a, b) = (pv(0), pv(1));
            let cols = a.cols();
            let mut da = g.clone();
            let mut db = vec![0.0; cols];
            for r in 0..a.rows() {
                let ar = a.row(r);
                for (c, d) in da.row_mut(r).iter_mut().enumerate() {
                    db[c] += *d * ar[c];
                    *d *= b.data()[c];
                }
            }
            vec![Some(da), Some(Tensor::new(b.shape().to_vec(), db).unwrap())]
        }
        Op::Scale(s) => vec![Some(g.scale(*s))],
        Op::Sigmoid => {
            let y = &node.value;
            vec![Some(g.zip_map(y, |gv, yv| gv * yv * (1.0 - yv)).unwrap())]
        }
        Op::Silu => vec![Some(
            g.zip_map(pv(0), |gv, xv| gv * kernel::silu_grad(xv))
                .unwrap(),
        )],
        Op::Gelu => vec![Some(
            g.zip_map(pv(0), |gv, xv| gv * kernel::gelu_grad(xv))
                .unwrap(),
        )],
        Op::LayerNorm(cache) => vec![Some(kernel::layer_norm_backward(cache, g))],
        Op::Softmax => vec![Some(kernel::softmax_backward(&node.value, g))],
        Op::Transpose => vec![Some(g.transpose().unwrap())],
        Op::SliceRows(start) => {
            let src = pv(0);
            let mut d = Tensor::zeros(src.shape());
            let c = src.cols();
            d.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
            vec![Some(d)]
        }
        Op::SliceCols(start) => {
            let src = pv(0);
            let mut d = Tensor::zeros(src.shape());
            let w = g.cols();
            for r in 0..src.rows() {
                d.row_mut(r)[*start..start + w].copy_from_slice(g.row(r));
            }
            vec![Some(d)]
        }
        Op::ConcatRows => {
            let mut offset = 0;
            node.parents
                .iter()
                .map(|&p| {
                    let shape = nodes[p].value.shape();
                    let n = nodes[p].value.len();
                    let part = g.data()[offset..offset + n].to_vec();
                    offset += n;
                    Some(Tensor::new(shape.to_vec(), part).unwrap())
                })
                .collect()
        }
        Op::ConcatCols => {
            let mut offset = 0;
            node.parents
                .iter()
                .map(|&p| {
                    let v = &nodes[p].value;
                    let w = v.cols();
                    let mut d = Tensor::zeros(v.shape());
                    for r in 0..v.rows() {
                        d.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                    }
                    offset += w;
                    Some(d)
                })
                .collect()
        }
        Op::L2NormalizeRows(norms) => {
            let y = &node.value;
            let mut d = g.clone();
            for r in 0..y.rows() {
                let yr = y.row(r);
                let dot: f64 = yr.iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                let inv = 1.0 / norms[r];
                for (dv, &yv) in d.row_mut(r).iter_mut().zip(yr) {
                    *dv = (*dv - yv * dot) * inv;
                }
            }
            vec![Some(d)]
        }
        Op::Sum => vec![Some(Tensor::filled(pv(0).shape(), g.item()))],
        Op::Square => vec![Some(g.zip_map(pv(0), |gv, xv| 2.0 * gv * xv).unwrap())],
        Op::Custom(op) => {
            let parents: Vec<&Tensor> = (0..node.parents.len()).map(pv).collect();
            op.backward(&parents, &node.value, g)
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_ref(self.id).clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, op: Op, f: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Var<'t>> {
        let value = f(&self.tape.nodes.borrow()[self.id].value)?;
        Ok(self.tape.push(value, vec![self.id], op, false))
    }

    fn binary(
        self,
        other: Var<'t>,
        op: Op,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
    ) -> Result<Var<'t>> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value, &nodes[other.id].value)?
        };
        Ok(self.tape.push(value, vec![self.id, other.id], op, false))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::MatMul, |a, b| a.matmul(b))
    }

    /// `self · otherᵀ`.
    pub fn matmul_bt(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::MatMulBt, |a, b| a.matmul_bt(b))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Add, |a, b| a.add(b))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Sub, |a, b| a.sub(b))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Mul, |a, b| a.hadamard(b))
    }

    /// Adds a `1 × cols` row vector to every row.
    pub fn add_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.binary(row, Op::AddRow, |a, b| {
            check_row(a, b, "add_row")?;
            let mut out = a.clone();
            for r in 0..out.rows() {
                for (o, v) in out.row_mut(r).iter_mut().zip(b.data()) {
                    *o += v;
                }
            }
            Ok(out)
        })
    }

    /// Multiplies every row elementwise by a `1 × cols` row vector.
    pub fn mul_row(self, row: Var<'t>) -> Result<Var<'t>> {
        self.binary(row, Op::MulRow, |a, b| {
            check_row(a, b, "mul_row")?;
            let mut out = a.clone();
            for r in 0..out.rows() {
                for (o, v) in out.row_mut(r).iter_mut().zip(b.data()) {
                    *o *= v;
                }
            }
            Ok(out)
        })
    }

    pub fn scale(self, s: f64) -> Result<Var<'t>> {
        self.unary(Op::Scale(s), |a| Ok(a.scale(s)))
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary(Op::Sigmoid, |a| Ok(kernel::sigmoid(a)))
    }

    pub fn silu(self) -> Result<Var<'t>> {
        self.unary(Op::Silu, |a| Ok(a.map(kernel::silu_scalar)))
    }

    pub fn gelu(self) -> Result<Var<'t>> {
        self.unary(Op::Gelu, |a| Ok(a.map(kernel::gelu_scalar)))
    }

    pub fn softmax(self) -> Result<Var<'t>> {
        self.unary(Op::Softmax, |a| Ok(kernel::softmax(a)))
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.unary(Op::Square, |a| Ok(a.map(|v| v * v)))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        self.unary(Op::Transpose, |a| a.transpose())
    }

    pub fn layer_norm(self, eps: f64) -> Result<Var<'t>> {
        let cache = kernel::layer_norm_cached(&self.tape.nodes.borrow()[self.id].value, eps)?;
        let value = cache.normalized.clone();
        Ok(self
            .tape
            .push(value, vec![self.id], Op::LayerNorm(cache), false))
    }

    pub fn l2_normalize_rows(self) -> Result<Var<'t>> {
        let (value, norms) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let mut out = x.clone();
            let mut norms = Vec::with_capacity(x.rows());
            for r in 0..x.rows() {
                let n = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                if !(n > 0.0) || !n.is_finite() {
                    return Err(Error::Numeric(format!(
                        "cannot normalize row {r} with norm {n}"
                    )));
                }
                for v in out.row_mut(r) {
                    *v /= n;
                }
                norms.push(n);
            }
            (out, norms)
        };
        Ok(self
            .tape
            .push(value, vec![self.id], Op::L2NormalizeRows(norms), false))
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t>> {
        self.unary(Op::SliceRows(start), |a| {
            if a.shape().len() != 2 || start + len > a.rows() || len == 0 {
                return Err(Error::arg(format!(
                    "slice_rows {start}+{len} of {:?}",
                    a.shape()
                )));
            }
            let c = a.cols();
            Tensor::matrix(len, c, a.data()[start * c..(start + len) * c].to_vec())
        })
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Result<Var<'t>> {
        self.unary(Op::SliceCols(start), |a| {
            if a.shape().len() != 2 || start + len > a.cols() || len == 0 {
                return Err(Error::arg(format!(
                    "slice_cols {start}+{len} of {:?}",
                    a.shape()
                )));
            }
            let mut data = Vec::with_capacity(a.rows() * len);
            for r in 0..a.rows() {
                data.extend_from_slice(&a.row(r)[start..start + len]);
            }
            Tensor::matrix(a.rows(), len, data)
        })
    }

    pub fn sum(self) -> Result<Var<'t>> {
        self.unary(Op::Sum, |a| Ok(Tensor::scalar(a.sum())))
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.tape.nodes.borrow()[self.id].value.len() as f64;
        self.sum()?.scale(1.0 / n)
    }
}

fn check_row(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if b.len() != a.cols() || b.rows() != 1 {
        return Err(Error::arg(format!(
            "{op}: row vector {:?} does not match {:?}",
            b.shape(),
            a.shape()
        )));
    }
    Ok(())
}
