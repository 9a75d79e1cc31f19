//! Symbolic backward-pass construction.
//!
//! `append_backward` walks the graph in reverse from a scalar seed node and
//! appends each op's vector-Jacobian product as new nodes, returning the
//! adjoint node of every requested leaf. The emitted ops are drawn from the
//! same op set, so a second call differentiates the first one's output; that
//! is how Hessian-vector products are built.

use super::{Node, NodeId, Op, NO_INPUT};
use crate::error::Result;

/// Marks nodes that (transitively) depend on a parameter leaf.
pub(super) fn param_dependent(nodes: &[Node]) -> Vec<bool> {
    let mut dep = vec![false; nodes.len()];
    for (id, node) in nodes.iter().enumerate() {
        dep[id] = match node.op {
            Op::Param(_) => true,
            _ => {
                let a = node.a != NO_INPUT && dep[node.a];
                let b = arity_two(node) && dep[node.b];
                a || b
            }
        };
    }
    dep
}

fn arity_two(node: &Node) -> bool {
    super::arity(node.op) == 2
}

/// Marks ancestors of `root` (inclusive).
fn ancestors(nodes: &[Node], root: NodeId) -> Vec<bool> {
    let mut mark = vec![false; nodes.len()];
    mark[root] = true;
    for id in (0..=root).rev() {
        if !mark[id] {
            continue;
        }
        let node = &nodes[id];
        if node.a != NO_INPUT {
            mark[node.a] = true;
        }
        if arity_two(node) {
            mark[node.b] = true;
        }
    }
    mark
}

struct Emitter<'a> {
    nodes: &'a mut Vec<Node>,
    adj: Vec<Option<NodeId>>,
    live: Vec<bool>,
}

impl Emitter<'_> {
    fn push(&mut self, op: Op, a: NodeId, b: NodeId, rows: usize, cols: usize) -> NodeId {
        self.nodes.push(Node { op, a, b, rows, cols });
        self.nodes.len() - 1
    }

    fn shape_of(&self, id: NodeId) -> (usize, usize) {
        (self.nodes[id].rows, self.nodes[id].cols)
    }

    /// Accumulates a contribution into a node's adjoint. Only nodes on a
    /// parameter path receive adjoints; everything else is constant.
    fn accumulate(&mut self, target: NodeId, contribution: NodeId) {
        if !self.live[target] {
            return;
        }
        self.adj[target] = Some(match self.adj[target] {
            None => contribution,
            Some(existing) => {
                let (r, c) = self.shape_of(target);
                self.push(Op::Add, existing, contribution, r, c)
            }
        });
    }
}

/// Appends the backward pass of the scalar node `seed` and returns the
/// adjoint node per entry of `wrt` (an all-zeros constant where `seed` does
/// not depend on the leaf).
pub(super) fn append_backward(nodes: &mut Vec<Node>, seed: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
    debug_assert_eq!((nodes[seed].rows, nodes[seed].cols), (1, 1));
    let anc = ancestors(nodes, seed);
    let dep = param_dependent(nodes);
    let live: Vec<bool> = anc.iter().zip(&dep).map(|(&a, &d)| a && d).collect();
    let n_before = nodes.len();

    let mut em = Emitter { nodes, adj: vec![None; n_before], live };
    let one = em.push(Op::ConstScalar(1.0), NO_INPUT, NO_INPUT, 1, 1);
    if em.live[seed] {
        em.adj[seed] = Some(one);
    }

    for id in (0..=seed).rev() {
        if !em.live[id] {
            continue;
        }
        let Some(g) = em.adj[id] else { continue };
        let node = em.nodes[id].clone();
        let (a, b) = (node.a, node.b);
        match node.op {
            Op::Param(_) | Op::Input(_) | Op::ConstScalar(_) | Op::ConstZeros => {}
            Op::Add => {
                em.accumulate(a, g);
                em.accumulate(b, g);
            }
            Op::Sub => {
                em.accumulate(a, g);
                if em.live[b] {
                    let (r, c) = em.shape_of(b);
                    let ng = em.push(Op::Neg, g, NO_INPUT, r, c);
                    em.accumulate(b, ng);
                }
            }
            Op::Mul => {
                if em.live[a] {
                    let (r, c) = em.shape_of(a);
                    let m = em.push(Op::Mul, g, b, r, c);
                    em.accumulate(a, m);
                }
                if em.live[b] {
                    let (r, c) = em.shape_of(b);
                    let m = em.push(Op::Mul, g, a, r, c);
                    em.accumulate(b, m);
                }
            }
            Op::Div => {
                // out = a / b: da = g/b, db = -g·out/b.
                if em.live[a] {
                    let (r, c) = em.shape_of(a);
                    let d = em.push(Op::Div, g, b, r, c);
                    em.accumulate(a, d);
                }
                if em.live[b] {
                    let (r, c) = em.shape_of(b);
                    let ob = em.push(Op::Div, id, b, r, c);
                    let m = em.push(Op::Mul, g, ob, r, c);
                    let n = em.push(Op::Neg, m, NO_INPUT, r, c);
                    em.accumulate(b, n);
                }
            }
            Op::Neg => {
                let (r, c) = em.shape_of(a);
                let n = em.push(Op::Neg, g, NO_INPUT, r, c);
                em.accumulate(a, n);
            }
            Op::Scale(f) => {
                let (r, c) = em.shape_of(a);
                let s = em.push(Op::Scale(f), g, NO_INPUT, r, c);
                em.accumulate(a, s);
            }
            Op::MatMul => {
                // out = A·B: dA = g·Bᵀ, dB = Aᵀ·g.
                if em.live[a] {
                    let (br, bc) = em.shape_of(b);
                    let bt = em.push(Op::Transpose, b, NO_INPUT, bc, br);
                    let (ar, ac) = em.shape_of(a);
                    let da = em.push(Op::MatMul, g, bt, ar, ac);
                    em.accumulate(a, da);
                }
                if em.live[b] {
                    let (ar, ac) = em.shape_of(a);
                    let at = em.push(Op::Transpose, a, NO_INPUT, ac, ar);
                    let (br, bc) = em.shape_of(b);
                    let db = em.push(Op::MatMul, at, g, br, bc);
                    em.accumulate(b, db);
                }
            }
            Op::Transpose => {
                let (r, c) = em.shape_of(a);
                let t = em.push(Op::Transpose, g, NO_INPUT, r, c);
                em.accumulate(a, t);
            }
            Op::BiasAdd => {
                em.accumulate(a, g);
                if em.live[b] {
                    let (br, _) = em.shape_of(b);
                    let s = em.push(Op::SumCols, g, NO_INPUT, br, 1);
                    em.accumulate(b, s);
                }
            }
            Op::Sum => {
                let (r, c) = em.shape_of(a);
                let bcast = em.push(Op::BroadcastScalar, g, NO_INPUT, r, c);
                em.accumulate(a, bcast);
            }
            Op::Mean => {
                let (r, c) = em.shape_of(a);
                let s = em.push(Op::Scale(1.0 / (r * c) as f64), g, NO_INPUT, 1, 1);
                let bcast = em.push(Op::BroadcastScalar, s, NO_INPUT, r, c);
                em.accumulate(a, bcast);
            }
            Op::Square => {
                let (r, c) = em.shape_of(a);
                let m = em.push(Op::Mul, g, a, r, c);
                let s = em.push(Op::Scale(2.0), m, NO_INPUT, r, c);
                em.accumulate(a, s);
            }
            Op::Tanh => {
                // d tanh = 1 - tanh²: g - g·out².
                let (r, c) = em.shape_of(a);
                let sq = em.push(Op::Square, id, NO_INPUT, r, c);
                let m = em.push(Op::Mul, g, sq, r, c);
                let d = em.push(Op::Sub, g, m, r, c);
                em.accumulate(a, d);
            }
            Op::Sigmoid => {
                // d sigmoid = out·(1 - out): g·out - g·out².
                let (r, c) = em.shape_of(a);
                let t = em.push(Op::Mul, g, id, r, c);
                let t2 = em.push(Op::Mul, t, id, r, c);
                let d = em.push(Op::Sub, t, t2, r, c);
                em.accumulate(a, d);
            }
            Op::Relu => {
                let (r, c) = em.shape_of(a);
                let gated = em.push(Op::GateBySign, a, g, r, c);
                em.accumulate(a, gated);
            }
            Op::Log => {
                let (r, c) = em.shape_of(a);
                let d = em.push(Op::Div, g, a, r, c);
                em.accumulate(a, d);
            }
            Op::Exp => {
                let (r, c) = em.shape_of(a);
                let m = em.push(Op::Mul, g, id, r, c);
                em.accumulate(a, m);
            }
            Op::Softmax => {
                // dz = y⊙g - y⊙rowsum(y⊙g) per column, y = out.
                let (r, c) = em.shape_of(a);
                let t = em.push(Op::Mul, id, g, r, c);
                let s = em.push(Op::SumRows, t, NO_INPUT, 1, c);
                let sb = em.push(Op::BroadcastRows, s, NO_INPUT, r, c);
                let ys = em.push(Op::Mul, id, sb, r, c);
                let d = em.push(Op::Sub, t, ys, r, c);
                em.accumulate(a, d);
            }
            Op::SoftmaxCrossEntropy => {
                // dz = (softmax(z)·colsum(t) - t) · g / batch; targets are
                // constants by construction.
                let (r, c) = em.shape_of(a);
                let sm = em.push(Op::Softmax, a, NO_INPUT, r, c);
                let ts = em.push(Op::SumRows, b, NO_INPUT, 1, c);
                let tsb = em.push(Op::BroadcastRows, ts, NO_INPUT, r, c);
                let w = em.push(Op::Mul, sm, tsb, r, c);
                let d = em.push(Op::Sub, w, b, r, c);
                let ds = em.push(Op::Scale(1.0 / c as f64), d, NO_INPUT, r, c);
                let gb = em.push(Op::BroadcastScalar, g, NO_INPUT, r, c);
                let contrib = em.push(Op::Mul, gb, ds, r, c);
                em.accumulate(a, contrib);
            }
            Op::Mse => {
                // out = mean((p - t)²): dp = 2(p - t)·g/N, dt = -dp.
                let (r, c) = em.shape_of(a);
                let d = em.push(Op::Sub, a, b, r, c);
                let s = em.push(Op::Scale(2.0 / (r * c) as f64), d, NO_INPUT, r, c);
                let gb = em.push(Op::BroadcastScalar, g, NO_INPUT, r, c);
                let contrib = em.push(Op::Mul, gb, s, r, c);
                em.accumulate(a, contrib);
                if em.live[b] {
                    let n = em.push(Op::Neg, contrib, NO_INPUT, r, c);
                    em.accumulate(b, n);
                }
            }
            Op::GateBySign => {
                // Mask is locally constant in x: only t receives an adjoint.
                if em.live[b] {
                    let (r, c) = em.shape_of(b);
                    let gated = em.push(Op::GateBySign, a, g, r, c);
                    em.accumulate(b, gated);
                }
            }
            Op::SumCols => {
                let (r, c) = em.shape_of(a);
                let bc = em.push(Op::BroadcastCols, g, NO_INPUT, r, c);
                em.accumulate(a, bc);
            }
            Op::SumRows => {
                let (r, c) = em.shape_of(a);
                let br = em.push(Op::BroadcastRows, g, NO_INPUT, r, c);
                em.accumulate(a, br);
            }
            Op::BroadcastCols => {
                let (r, _) = em.shape_of(a);
                let s = em.push(Op::SumCols, g, NO_INPUT, r, 1);
                em.accumulate(a, s);
            }
            Op::BroadcastRows => {
                let (_, c) = em.shape_of(a);
                let s = em.push(Op::SumRows, g, NO_INPUT, 1, c);
                em.accumulate(a, s);
            }
            Op::BroadcastScalar => {
                let s = em.push(Op::Sum, g, NO_INPUT, 1, 1);
                em.accumulate(a, s);
            }
            Op::SliceRows(start) => {
                let (r, c) = em.shape_of(a);
                let p = em.push(Op::PadRows(start), g, NO_INPUT, r, c);
                em.accumulate(a, p);
            }
            Op::PadRows(start) => {
                let (r, c) = em.shape_of(a);
                let s = em.push(Op::SliceRows(start), g, NO_INPUT, r, c);
                em.accumulate(a, s);
            }
            Op::ConcatRows => {
                if em.live[a] {
                    let (r, c) = em.shape_of(a);
                    let s = em.push(Op::SliceRows(0), g, NO_INPUT, r, c);
                    em.accumulate(a, s);
                }
                if em.live[b] {
                    let (ar, _) = em.shape_of(a);
                    let (r, c) = em.shape_of(b);
                    let s = em.push(Op::SliceRows(ar), g, NO_INPUT, r, c);
                    em.accumulate(b, s);
                }
            }
        }
    }

    let mut out = Vec::with_capacity(wrt.len());
    for &p in wrt {
        match em.adj[p] {
            Some(id) => out.push(id),
            None => {
                let (r, c) = em.shape_of(p);
                out.push(em.push(Op::ConstZeros, NO_INPUT, NO_INPUT, r, c));
            }
        }
    }
    Ok(out)
}
