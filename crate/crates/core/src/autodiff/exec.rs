//! Numeric forward evaluation of a node list.

use super::{Node, Op};
use crate::matrix::Matrix;

/// Evaluates `nodes[..upto]` in order. `v` holds the extra-input tensors
/// bound after the regular batch slots (empty when the HVP section is not
/// being evaluated).
pub(super) fn eval_prefix(
    nodes: &[Node],
    upto: usize,
    params: &[Matrix],
    batch: &[Matrix],
    v: &[Matrix],
) -> Vec<Matrix> {
    let mut values: Vec<Matrix> = Vec::with_capacity(upto);
    for node in &nodes[..upto] {
        let val = eval_node(node, &values, params, batch, v);
        debug_assert_eq!(val.shape(), (node.rows, node.cols), "{:?}", node.op);
        values.push(val);
    }
    values
}

fn eval_node(node: &Node, values: &[Matrix], params: &[Matrix], batch: &[Matrix], v: &[Matrix]) -> Matrix {
    let a = node.a;
    let b = node.b;
    match node.op {
        Op::Param(slot) => params[slot].clone(),
        Op::Input(slot) => {
            if slot < batch.len() {
                batch[slot].clone()
            } else {
                v[slot - batch.len()].clone()
            }
        }
        Op::ConstScalar(c) => Matrix::from_vec_unchecked(1, 1, vec![c]),
        Op::ConstZeros => Matrix::zeros(node.rows, node.cols),
        Op::Add => values[a].add(&values[b]),
        Op::Sub => values[a].sub(&values[b]),
        Op::Mul => values[a].zip_map(&values[b], |x, y| x * y),
        Op::Div => values[a].zip_map(&values[b], |x, y| x / y),
        Op::Neg => values[a].map(|x| -x),
        Op::Scale(c) => values[a].scale(c),
        Op::MatMul => values[a].matmul(&values[b]),
        Op::Transpose => values[a].transpose(),
        Op::BiasAdd => {
            let x = &values[a];
            let bias = &values[b];
            Matrix::from_fn(x.rows(), x.cols(), |i, j| x.get(i, j) + bias.get(i, 0))
        }
        Op::Sum => Matrix::from_vec_unchecked(1, 1, vec![values[a].as_slice().iter().sum()]),
        Op::Mean => {
            let x = &values[a];
            let n = (x.rows() * x.cols()) as f64;
            Matrix::from_vec_unchecked(1, 1, vec![x.as_slice().iter().sum::<f64>() / n])
        }
        Op::Square => values[a].map(|x| x * x),
        Op::Tanh => values[a].map(f64::tanh),
        Op::Sigmoid => values[a].map(|x| 1.0 / (1.0 + (-x).exp())),
        Op::Relu => values[a].map(|x| if x > 0.0 { x } else { 0.0 }),
        Op::Log => values[a].map(f64::ln),
        Op::Exp => values[a].map(f64::exp),
        Op::Softmax => softmax_columns(&values[a]),
        Op::SoftmaxCrossEntropy => {
            Matrix::from_vec_unchecked(1, 1, vec![softmax_cross_entropy(&values[a], &values[b])])
        }
        Op::Mse => {
            let p = &values[a];
            let t = &values[b];
            let n = (p.rows() * p.cols()) as f64;
            let s: f64 = p
                .as_slice()
                .iter()
                .zip(t.as_slice())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            Matrix::from_vec_unchecked(1, 1, vec![s / n])
        }
        Op::GateBySign => values[a].zip_map(&values[b], |x, t| if x > 0.0 { t } else { 0.0 }),
        Op::SumCols => {
            let x = &values[a];
            Matrix::from_fn(x.rows(), 1, |i, _| x.row(i).iter().sum())
        }
        Op::SumRows => {
            let x = &values[a];
            Matrix::from_fn(1, x.cols(), |_, j| (0..x.rows()).map(|i| x.get(i, j)).sum())
        }
        Op::BroadcastCols => {
            let x = &values[a];
            Matrix::from_fn(node.rows, node.cols, |i, _| x.get(i, 0))
        }
        Op::BroadcastRows => {
            let x = &values[a];
            Matrix::from_fn(node.rows, node.cols, |_, j| x.get(0, j))
        }
        Op::BroadcastScalar => {
            let c = values[a].get(0, 0);
            Matrix::from_vec_unchecked(node.rows, node.cols, vec![c; node.rows * node.cols])
        }
        Op::SliceRows(start) => {
            let x = &values[a];
            Matrix::from_fn(node.rows, node.cols, |i, j| x.get(start + i, j))
        }
        Op::PadRows(start) => {
            let x = &values[a];
            let mut out = Matrix::zeros(node.rows, node.cols);
            for i in 0..x.rows() {
                for j in 0..x.cols() {
                    out.set(start + i, j, x.get(i, j));
                }
            }
            out
        }
        Op::ConcatRows => {
            let x = &values[a];
            let y = &values[b];
            let mut data = Vec::with_capacity(node.rows * node.cols);
            data.extend_from_slice(x.as_slice());
            data.extend_from_slice(y.as_slice());
            Matrix::from_vec_unchecked(node.rows, node.cols, data)
        }
    }
}

fn softmax_columns(z: &Matrix) -> Matrix {
    let (r, c) = z.shape();
    let mut out = Matrix::zeros(r, c);
    for j in 0..c {
        let mut m = f64::NEG_INFINITY;
        for i in 0..r {
            m = m.max(z.get(i, j));
        }
        let mut sum = 0.0;
        for i in 0..r {
            let e = (z.get(i, j) - m).exp();
            out.set(i, j, e);
            sum += e;
        }
        for i in 0..r {
            out.set(i, j, out.get(i, j) / sum);
        }
    }
    out
}

/// Mean over columns of `lse(z_j)·Σ_i t_ij − Σ_i t_ij z_ij`, the cross
/// entropy against column-wise softmax computed in log-sum-exp form.
fn softmax_cross_entropy(z: &Matrix, t: &Matrix) -> f64 {
    let (r, c) = z.shape();
    let mut total = 0.0;
    for j in 0..c {
        let mut m = f64::NEG_INFINITY;
        for i in 0..r {
            m = m.max(z.get(i, j));
        }
        let mut sum = 0.0;
        for i in 0..r {
            sum += (z.get(i, j) - m).exp();
        }
        let lse = m + sum.ln();
        let mut tmass = 0.0;
        let mut tz = 0.0;
        for i in 0..r {
            tmass += t.get(i, j);
            tz += t.get(i, j) * z.get(i, j);
        }
        total += lse * tmass - tz;
    }
    total / c as f64
}
