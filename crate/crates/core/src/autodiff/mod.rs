//! Reverse-mode automatic differentiation with a differentiable backward
//! pass.
//!
//! A [`Tape`] is a static computation graph ending in a scalar loss. At
//! construction the backward pass is appended to the graph as ordinary nodes,
//! once for the gradient and once more for Hessian-vector products: the HVP
//! outputs are the gradient of the scalar `ĝᵀv` with respect to the
//! parameters, where `v` is bound as an extra input. Every derivative query
//! is then a plain forward sweep over (a prefix of) the node list, so the
//! same evaluator serves all three queries and a tape is immutable and
//! shareable across threads after construction.
//!
//! Values are dense matrices; column vectors are n-by-1 and scalars 1-by-1.
//! Batch data is bound per call as constants and never differentiated.
//! `relu` is only once differentiable; its mask is treated as locally
//! constant, so curvature through it is zero (almost-everywhere convention)
//! and tapes containing it on a parameter path are flagged.

mod backward;
mod exec;

use crate::error::{Error, Result};
use crate::matrix::{vec_mat, Matrix, Vector};

pub type NodeId = usize;

/// Operation kinds. The math ops are the supported user-facing set; the
/// structural ops (transpose, slicing, broadcasting, reductions) exist so
/// models and backward passes can be expressed in graph form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    /// Parameter leaf, by slot.
    Param(usize),
    /// Batch-data leaf, by slot.
    Input(usize),
    /// 1x1 constant.
    ConstScalar(f64),
    /// All-zeros constant of the node's shape.
    ConstZeros,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    /// Multiply by a compile-time scalar.
    Scale(f64),
    MatMul,
    Transpose,
    /// Column-broadcast bias: (m,k) + (m,1).
    BiasAdd,
    /// Sum of all entries, to 1x1.
    Sum,
    /// Mean of all entries, to 1x1.
    Mean,
    Square,
    Tanh,
    Sigmoid,
    Relu,
    Log,
    Exp,
    /// Column-wise softmax over rows.
    Softmax,
    /// Mean over columns of the cross entropy between column-wise
    /// softmax(logits) and target columns.
    SoftmaxCrossEntropy,
    /// Mean squared error over all entries.
    Mse,
    /// Entry-wise `t` where `x > 0`, else zero. Carries relu's derivative;
    /// contributes no curvature through `x`.
    GateBySign,
    /// (m,k) -> (m,1) row-wise sums.
    SumCols,
    /// (m,k) -> (1,k) column-wise sums.
    SumRows,
    /// (m,1) -> (m,k).
    BroadcastCols,
    /// (1,k) -> (m,k).
    BroadcastRows,
    /// (1,1) -> (m,n).
    BroadcastScalar,
    /// Rows `start..start+len`; `len` is the node's row count.
    SliceRows(usize),
    /// Embed into a taller zero matrix at row offset `start`.
    PadRows(usize),
    /// Stack two blocks of rows.
    ConcatRows,
}

#[derive(Debug, Clone)]
pub struct Node {
    pub op: Op,
    pub a: NodeId,
    pub b: NodeId,
    pub rows: usize,
    pub cols: usize,
}

impl Node {
    fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
}

const NO_INPUT: NodeId = usize::MAX;

/// Number of value-carrying inputs of an op.
fn arity(op: Op) -> usize {
    match op {
        Op::Param(_) | Op::Input(_) | Op::ConstScalar(_) | Op::ConstZeros => 0,
        Op::Neg
        | Op::Scale(_)
        | Op::Transpose
        | Op::Sum
        | Op::Mean
        | Op::Square
        | Op::Tanh
        | Op::Sigmoid
        | Op::Relu
        | Op::Log
        | Op::Exp
        | Op::Softmax
        | Op::SumCols
        | Op::SumRows
        | Op::BroadcastCols
        | Op::BroadcastRows
        | Op::BroadcastScalar
        | Op::SliceRows(_)
        | Op::PadRows(_) => 1,
        _ => 2,
    }
}

/// Builds a computation graph, validating shapes as nodes are added.
#[derive(Debug, Default)]
pub struct TapeBuilder {
    nodes: Vec<Node>,
    param_shapes: Vec<(usize, usize)>,
    input_shapes: Vec<(usize, usize)>,
}

impl TapeBuilder {
    pub fn new() -> Self {
        TapeBuilder::default()
    }

    fn push(&mut self, op: Op, a: NodeId, b: NodeId, rows: usize, cols: usize) -> NodeId {
        self.nodes.push(Node { op, a, b, rows, cols });
        self.nodes.len() - 1
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id].shape()
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::ShapeMismatch {
                context: format!("{what}: {}x{} vs {}x{}", sa.0, sa.1, sb.0, sb.1),
            });
        }
        Ok(sa)
    }

    /// Declares a parameter tensor and returns its leaf node.
    pub fn param(&mut self, rows: usize, cols: usize) -> NodeId {
        let slot = self.param_shapes.len();
        self.param_shapes.push((rows, cols));
        self.push(Op::Param(slot), NO_INPUT, NO_INPUT, rows, cols)
    }

    /// Declares a batch-data tensor and returns its leaf node.
    pub fn input(&mut self, rows: usize, cols: usize) -> NodeId {
        let slot = self.input_shapes.len();
        self.input_shapes.push((rows, cols));
        self.push(Op::Input(slot), NO_INPUT, NO_INPUT, rows, cols)
    }

    pub fn const_scalar(&mut self, value: f64) -> NodeId {
        self.push(Op::ConstScalar(value), NO_INPUT, NO_INPUT, 1, 1)
    }

    pub fn const_zeros(&mut self, rows: usize, cols: usize) -> NodeId {
        self.push(Op::ConstZeros, NO_INPUT, NO_INPUT, rows, cols)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.same_shape(a, b, "add")?;
        Ok(self.push(Op::Add, a, b, r, c))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.same_shape(a, b, "sub")?;
        Ok(self.push(Op::Sub, a, b, r, c))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.same_shape(a, b, "mul")?;
        Ok(self.push(Op::Mul, a, b, r, c))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (r, c) = self.same_shape(a, b, "div")?;
        Ok(self.push(Op::Div, a, b, r, c))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::Neg, a, NO_INPUT, r, c)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::Scale(factor), a, NO_INPUT, r, c)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != br {
            return Err(Error::ShapeMismatch { context: format!("matmul: {ar}x{ac} by {br}x{bc}") });
        }
        Ok(self.push(Op::MatMul, a, b, ar, bc))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::Transpose, a, NO_INPUT, c, r)
    }

    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xr, xc) = self.shape(x);
        let (br, bc) = self.shape(bias);
        if br != xr || bc != 1 {
            return Err(Error::ShapeMismatch { context: format!("bias_add: {xr}x{xc} with bias {br}x{bc}") });
        }
        Ok(self.push(Op::BiasAdd, x, bias, xr, xc))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum, a, NO_INPUT, 1, 1)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean, a, NO_INPUT, 1, 1)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::Square, a, NO_INPUT, r, c)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::Tanh, a, NO_INPUT, r, c)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::Sigmoid, a, NO_INPUT, r, c)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::Relu, a, NO_INPUT, r, c)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::Log, a, NO_INPUT, r, c)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::Exp, a, NO_INPUT, r, c)
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let (r, c) = self.shape(a);
        self.push(Op::Softmax, a, NO_INPUT, r, c)
    }

    /// `targets` columns are treated as fixed distributions (labels); they
    /// must not depend on parameters.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, targets: NodeId) -> Result<NodeId> {
        self.same_shape(logits, targets, "softmax_cross_entropy")?;
        Ok(self.push(Op::SoftmaxCrossEntropy, logits, targets, 1, 1))
    }

    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        self.same_shape(pred, target, "mse")?;
        Ok(self.push(Op::Mse, pred, target, 1, 1))
    }

    pub fn gate_by_sign(&mut self, x: NodeId, t: NodeId) -> Result<NodeId> {
        let (r, c) = self.same_shape(x, t, "gate_by_sign")?;
        Ok(self.push(Op::GateBySign, x, t, r, c))
    }

    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let (r, _) = self.shape(a);
        self.push(Op::SumCols, a, NO_INPUT, r, 1)
    }

    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let (_, c) = self.shape(a);
        self.push(Op::SumRows, a, NO_INPUT, 1, c)
    }

    pub fn broadcast_cols(&mut self, a: NodeId, cols: usize) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if c != 1 {
            return Err(Error::ShapeMismatch { context: format!("broadcast_cols of {r}x{c}") });
        }
        Ok(self.push(Op::BroadcastCols, a, NO_INPUT, r, cols))
    }

    pub fn broadcast_rows(&mut self, a: NodeId, rows: usize) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if r != 1 {
            return Err(Error::ShapeMismatch { context: format!("broadcast_rows of {r}x{c}") });
        }
        Ok(self.push(Op::BroadcastRows, a, NO_INPUT, rows, c))
    }

    pub fn broadcast_scalar(&mut self, a: NodeId, rows: usize, cols: usize) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if (r, c) != (1, 1) {
            return Err(Error::ShapeMismatch { context: format!("broadcast_scalar of {r}x{c}") });
        }
        Ok(self.push(Op::BroadcastScalar, a, NO_INPUT, rows, cols))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if start + len > r {
            return Err(Error::ShapeMismatch { context: format!("slice_rows {start}..{} of {r}x{c}", start + len) });
        }
        Ok(self.push(Op::SliceRows(start), a, NO_INPUT, len, c))
    }

    pub fn pad_rows(&mut self, a: NodeId, start: usize, total: usize) -> Result<NodeId> {
        let (r, c) = self.shape(a);
        if start + r > total {
            return Err(Error::ShapeMismatch { context: format!("pad_rows {r}x{c} at {start} into {total}") });
        }
        Ok(self.push(Op::PadRows(start), a, NO_INPUT, total, c))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        if ac != bc {
            return Err(Error::ShapeMismatch { context: format!("concat_rows: {ar}x{ac} with {br}x{bc}") });
        }
        Ok(self.push(Op::ConcatRows, a, b, ar + br, ac))
    }

    /// Seals the graph at the scalar `loss` node, appending the gradient
    /// section and the Hessian-vector-product section.
    pub fn finish(mut self, loss: NodeId) -> Result<Tape> {
        let (r, c) = self.shape(loss);
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarOutput { rows: r, cols: c });
        }
        let param_dep = backward::param_dependent(&self.nodes);
        for node in &self.nodes {
            if node.op == Op::SoftmaxCrossEntropy && param_dep[node.b] {
                return Err(Error::ShapeMismatch {
                    context: "softmax_cross_entropy targets must not depend on parameters".into(),
                });
            }
        }
        let relu_flagged = self
            .nodes
            .iter()
            .any(|n| n.op == Op::Relu && param_dep[n.a]);

        let n_forward = self.nodes.len();
        let param_leaves: Vec<NodeId> = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(id, n)| matches!(n.op, Op::Param(_)).then_some(id))
            .collect();

        // First backward pass: gradient of the loss per parameter tensor.
        let grad_nodes = backward::append_backward(&mut self.nodes, loss, &param_leaves)?;
        let n_grad = self.nodes.len();

        // Bind v as extra inputs and form the scalar sum of <grad_t, v_t>.
        let v_slot_base = self.input_shapes.len();
        let mut dot_sum: Option<NodeId> = None;
        for (t, &g) in grad_nodes.iter().enumerate() {
            let (pr, pc) = self.param_shapes[t];
            let v = self.input(pr, pc);
            let prod = self.mul(g, v)?;
            let s = self.sum(prod);
            dot_sum = Some(match dot_sum {
                None => s,
                Some(acc) => self.add(acc, s)?,
            });
        }
        // Second backward pass: gradient of <g, v>, i.e. the HVP.
        let hvp_nodes = match dot_sum {
            Some(s) => backward::append_backward(&mut self.nodes, s, &param_leaves)?,
            None => Vec::new(),
        };

        Ok(Tape {
            nodes: self.nodes,
            param_shapes: self.param_shapes,
            input_shapes: self.input_shapes,
            loss,
            n_forward,
            n_grad,
            grad_nodes,
            hvp_nodes,
            v_slot_base,
            relu_flagged,
        })
    }
}

/// An immutable computation graph with gradient and HVP sections.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    param_shapes: Vec<(usize, usize)>,
    /// Regular input shapes followed by one v-shape per parameter tensor.
    input_shapes: Vec<(usize, usize)>,
    loss: NodeId,
    n_forward: usize,
    n_grad: usize,
    grad_nodes: Vec<NodeId>,
    hvp_nodes: Vec<NodeId>,
    v_slot_base: usize,
    relu_flagged: bool,
}

impl Tape {
    pub fn param_shapes(&self) -> &[(usize, usize)] {
        &self.param_shapes
    }

    /// Shapes of the batch-data slots bound per evaluation.
    pub fn batch_shapes(&self) -> &[(usize, usize)] {
        &self.input_shapes[..self.v_slot_base]
    }

    /// True when a once-differentiable op (relu) sits on a parameter path;
    /// HVPs are then computed with the almost-everywhere convention.
    pub fn relu_flagged(&self) -> bool {
        self.relu_flagged
    }

    /// Total flattened parameter dimension.
    pub fn total_dim(&self) -> usize {
        self.param_shapes.iter().map(|(r, c)| r * c).sum()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    fn check_params(&self, params: &[Matrix]) -> Result<()> {
        if params.len() != self.param_shapes.len() {
            return Err(Error::ShapeMismatch {
                context: format!("expected {} parameter tensors, got {}", self.param_shapes.len(), params.len()),
            });
        }
        for (i, (p, &s)) in params.iter().zip(&self.param_shapes).enumerate() {
            if p.shape() != s {
                return Err(Error::ShapeMismatch {
                    context: format!("parameter {i}: expected {}x{}, got {}x{}", s.0, s.1, p.rows(), p.cols()),
                });
            }
        }
        Ok(())
    }

    fn check_batch(&self, batch: &[Matrix]) -> Result<()> {
        let want = &self.input_shapes[..self.v_slot_base];
        if batch.len() != want.len() {
            return Err(Error::ShapeMismatch {
                context: format!("expected {} batch tensors, got {}", want.len(), batch.len()),
            });
        }
        for (i, (x, &s)) in batch.iter().zip(want).enumerate() {
            if x.shape() != s {
                return Err(Error::ShapeMismatch {
                    context: format!("batch tensor {i}: expected {}x{}, got {}x{}", s.0, s.1, x.rows(), x.cols()),
                });
            }
        }
        Ok(())
    }

    fn check_v(&self, v: &[Matrix]) -> Result<()> {
        if v.len() != self.param_shapes.len() {
            return Err(Error::ShapeMismatch {
                context: format!("expected {} v tensors, got {}", self.param_shapes.len(), v.len()),
            });
        }
        for (i, (x, &s)) in v.iter().zip(&self.param_shapes).enumerate() {
            if x.shape() != s {
                return Err(Error::ShapeMismatch {
                    context: format!("v tensor {i}: expected {}x{}, got {}x{}", s.0, s.1, x.rows(), x.cols()),
                });
            }
        }
        Ok(())
    }

    /// Evaluates the loss.
    pub fn evaluate(&self, params: &[Matrix], batch: &[Matrix]) -> Result<f64> {
        self.check_params(params)?;
        self.check_batch(batch)?;
        let values = exec::eval_prefix(&self.nodes, self.n_forward, params, batch, &[]);
        Ok(values[self.loss].get(0, 0))
    }

    /// Evaluates the loss and the gradient per parameter tensor in one sweep.
    pub fn loss_and_gradient(&self, params: &[Matrix], batch: &[Matrix]) -> Result<(f64, Vec<Matrix>)> {
        self.check_params(params)?;
        self.check_batch(batch)?;
        let values = exec::eval_prefix(&self.nodes, self.n_grad, params, batch, &[]);
        let grads = self.grad_nodes.iter().map(|&id| values[id].clone()).collect();
        Ok((values[self.loss].get(0, 0), grads))
    }

    /// Evaluates the Hessian-vector product `Ĥ v` per parameter tensor.
    pub fn hvp(&self, params: &[Matrix], batch: &[Matrix], v: &[Matrix]) -> Result<Vec<Matrix>> {
        Ok(self.loss_grad_hvp(params, batch, v)?.2)
    }

    /// Loss, gradient, and HVP in a single sweep over the full graph.
    pub fn loss_grad_hvp(
        &self,
        params: &[Matrix],
        batch: &[Matrix],
        v: &[Matrix],
    ) -> Result<(f64, Vec<Matrix>, Vec<Matrix>)> {
        self.check_params(params)?;
        self.check_batch(batch)?;
        self.check_v(v)?;
        let values = exec::eval_prefix(&self.nodes, self.nodes.len(), params, batch, v);
        let grads: Vec<Matrix> = self.grad_nodes.iter().map(|&id| values[id].clone()).collect();
        let hvps: Vec<Matrix> = self.hvp_nodes.iter().map(|&id| values[id].clone()).collect();
        Ok((values[self.loss].get(0, 0), grads, hvps))
    }

    /// Concatenates per-tensor values into one flat vector (column-stacking
    /// within each tensor, tensors in declaration order).
    pub fn flatten(&self, tensors: &[Matrix]) -> Vector {
        let mut out = Vec::with_capacity(self.total_dim());
        for t in tensors {
            out.extend_from_slice(vec_mat(t).as_slice());
        }
        Vector::from_vec_unchecked(out)
    }

    /// Splits a flat vector into per-tensor matrices.
    pub fn unflatten(&self, flat: &Vector) -> Result<Vec<Matrix>> {
        if flat.len() != self.total_dim() {
            return Err(Error::InvalidData { expected: self.total_dim(), got: flat.len() });
        }
        let mut out = Vec::with_capacity(self.param_shapes.len());
        let mut offset = 0;
        for &(r, c) in &self.param_shapes {
            let slice = &flat.as_slice()[offset..offset + r * c];
            out.push(crate::matrix::kron_reshape(&Vector::from_vec_unchecked(slice.to_vec()), r, c)?);
            offset += r * c;
        }
        Ok(out)
    }

    /// Gradient as one flat vector.
    pub fn gradient_flat(&self, params: &[Matrix], batch: &[Matrix]) -> Result<Vector> {
        let (_, g) = self.loss_and_gradient(params, batch)?;
        Ok(self.flatten(&g))
    }

    /// HVP as one flat vector, with `v` given flat.
    pub fn hvp_flat(&self, params: &[Matrix], batch: &[Matrix], v: &Vector) -> Result<Vector> {
        let vt = self.unflatten(v)?;
        let h = self.hvp(params, batch, &vt)?;
        Ok(self.flatten(&h))
    }
}
