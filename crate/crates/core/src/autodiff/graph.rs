//! Reverse-mode graph over batch-major matrices.
//!
//! Rows are samples, columns are features. This carries the network
//! programs used in training (forward pass, the closed-form input gradient of
//! an MLP, RK4 stages and multi-step rollouts) so a mini-batch costs a few
//! hundred nodes instead of millions of scalar ones.

use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum GOp {
    Leaf,
    /// `a · wᵀ`, with `w` stored out x in.
    MatMulT(NodeId, NodeId),
    /// `a · w`.
    MatMul(NodeId, NodeId),
    /// Adds a 1 x c row to every row.
    AddRow(NodeId, NodeId),
    /// Repeats a 1 x c row `rows` times.
    BroadcastRow(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    /// `a + c·b`
    AddScaled(NodeId, NodeId, f64),
    Scale(NodeId, f64),
    Mul(NodeId, NodeId),
    Tanh(NodeId),
    /// `1 − a²`, the tanh derivative expressed through the tanh output.
    OneMinusSquare(NodeId),
    /// Maps `[gq, gp]` to `[gp, −gq]` (multiplication by the canonical J).
    Symplectic(NodeId),
    /// `scale · Σ huber_δ(a)` as a 1 x 1 node.
    HuberSum(NodeId, f64, f64),
    /// Sum of 1 x 1 nodes.
    SumScalars(Vec<NodeId>),
}

#[derive(Debug)]
struct GNode {
    op: GOp,
    value: Matrix,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<GNode>,
}

/// Adjoints of every node after a backward sweep.
pub struct Grads {
    adj: Vec<Option<Matrix>>,
}

impl Grads {
    /// Adjoint of `id`, or `None` when the output does not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&Matrix> {
        self.adj.get(id.0).and_then(|a| a.as_ref())
    }
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

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(GOp::Leaf, value)
    }

    fn push(&mut self, op: GOp, value: Matrix) -> NodeId {
        self.nodes.push(GNode { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn v(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    pub fn matmul_t(&mut self, a: NodeId, w: NodeId) -> NodeId {
        let value = matmul_t(self.v(a), self.v(w));
        self.push(GOp::MatMulT(a, w), value)
    }

    pub fn matmul(&mut self, a: NodeId, w: NodeId) -> NodeId {
        let value = matmul(self.v(a), self.v(w));
        self.push(GOp::MatMul(a, w), value)
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let mut value = self.v(a).clone();
        let r = self.v(row);
        assert_eq!(r.rows(), 1);
        assert_eq!(r.cols(), value.cols());
        for i in 0..value.rows() {
            for (o, b) in value.row_mut(i).iter_mut().zip(r.data()) {
                *o += b;
            }
        }
        self.push(GOp::AddRow(a, row), value)
    }

    pub fn broadcast_row(&mut self, row: NodeId, rows: usize) -> NodeId {
        let r = self.v(row);
        assert_eq!(r.rows(), 1);
        let mut value = Matrix::zeros(rows, r.cols());
        for i in 0..rows {
            value.row_mut(i).copy_from_slice(r.data());
        }
        self.push(GOp::BroadcastRow(row), value)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = zip(self.v(a), self.v(b), |x, y| x + y);
        self.push(GOp::Add(a, b), value)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = zip(self.v(a), self.v(b), |x, y| x - y);
        self.push(GOp::Sub(a, b), value)
    }

    pub fn add_scaled(&mut self, a: NodeId, b: NodeId, c: f64) -> NodeId {
        let value = zip(self.v(a), self.v(b), |x, y| x + c * y);
        self.push(GOp::AddScaled(a, b, c), value)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.v(a).scale(c);
        self.push(GOp::Scale(a, c), value)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = zip(self.v(a), self.v(b), |x, y| x * y);
        self.push(GOp::Mul(a, b), value)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = map(self.v(a), f64::tanh);
        self.push(GOp::Tanh(a), value)
    }

    pub fn one_minus_square(&mut self, a: NodeId) -> NodeId {
        let value = map(self.v(a), |x| 1.0 - x * x);
        self.push(GOp::OneMinusSquare(a), value)
    }

    pub fn symplectic(&mut self, a: NodeId) -> NodeId {
        let src = self.v(a);
        let d = src.cols();
        assert!(d.is_multiple_of(2), "symplectic map needs an even dimension");
        let n = d / 2;
        let mut value = Matrix::zeros(src.rows(), d);
        for i in 0..src.rows() {
            let s = src.row(i);
            let o = value.row_mut(i);
            for k in 0..n {
                o[k] = s[n + k];
                o[n + k] = -s[k];
            }
        }
        self.push(GOp::Symplectic(a), value)
    }

    pub fn huber_sum(&mut self, a: NodeId, delta: f64, scale: f64) -> NodeId {
        let total: f64 = self.v(a).data().iter().map(|&r| huber_scalar(r, delta)).sum();
        self.push(
            GOp::HuberSum(a, delta, scale),
            Matrix::from_vec(1, 1, vec![scale * total]).unwrap(),
        )
    }

    pub fn sum_scalars(&mut self, xs: &[NodeId]) -> NodeId {
        let mut total = 0.0;
        for &x in xs {
            let v = self.v(x);
            assert_eq!((v.rows(), v.cols()), (1, 1), "sum_scalars needs 1x1 nodes");
            total += v[(0, 0)];
        }
        self.push(
            GOp::SumScalars(xs.to_vec()),
            Matrix::from_vec(1, 1, vec![total]).unwrap(),
        )
    }

    /// Reverse sweep from a 1 x 1 output node.
    pub fn backward(&self, output: NodeId) -> Result<Grads> {
        let out = self.v(output);
        if out.rows() * out.cols() != 1 {
            return Err(Error::ScalarRequired(out.rows() * out.cols()));
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        adj[output.0] = Some(Matrix::from_vec(1, 1, vec![1.0]).unwrap());
        for i in (0..=output.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            match &self.nodes[i].op {
                GOp::Leaf => {
                    adj[i] = Some(g);
                }
                GOp::MatMulT(a, w) => {
                    let ga = matmul(&g, self.v(*w));
                    let gw = matmul_tn(&g, self.v(*a));
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *w, gw);
                }
                GOp::MatMul(a, w) => {
                    let ga = matmul_t(&g, self.v(*w));
                    let gw = matmul_tn(self.v(*a), &g);
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *w, gw);
                }
                GOp::AddRow(a, row) => {
                    accumulate(&mut adj, *row, column_sums(&g));
                    accumulate(&mut adj, *a, g);
                }
                GOp::BroadcastRow(row) => {
                    accumulate(&mut adj, *row, column_sums(&g));
                }
                GOp::Add(a, b) => {
                    accumulate(&mut adj, *b, g.clone());
                    accumulate(&mut adj, *a, g);
                }
                GOp::Sub(a, b) => {
                    accumulate(&mut adj, *b, g.scale(-1.0));
                    accumulate(&mut adj, *a, g);
                }
                GOp::AddScaled(a, b, c) => {
                    accumulate(&mut adj, *b, g.scale(*c));
                    accumulate(&mut adj, *a, g);
                }
                GOp::Scale(a, c) => accumulate(&mut adj, *a, g.scale(*c)),
                GOp::Mul(a, b) => {
                    let ga = zip(&g, self.v(*b), |x, y| x * y);
                    let gb = zip(&g, self.v(*a), |x, y| x * y);
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                GOp::Tanh(a) => {
                    let t = &self.nodes[i].value;
                    accumulate(&mut adj, *a, zip(&g, t, |x, y| x * (1.0 - y * y)));
                }
                GOp::OneMinusSquare(a) => {
                    let ga = zip(&g, self.v(*a), |x, y| -2.0 * x * y);
                    accumulate(&mut adj, *a, ga);
                }
                GOp::Symplectic(a) => {
                    // Jᵀ = −J: [gq, gp] ↦ [−gp, gq]
                    let n = g.cols() / 2;
                    let mut ga = Matrix::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let s = g.row(r);
                        let o = ga.row_mut(r);
                        for k in 0..n {
                            o[k] = -s[n + k];
                            o[n + k] = s[k];
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                }
                GOp::HuberSum(a, delta, scale) => {
                    let s = g[(0, 0)] * scale;
                    let ga = map(self.v(*a), |r| s * r.clamp(-*delta, *delta));
                    accumulate(&mut adj, *a, ga);
                }
                GOp::SumScalars(xs) => {
                    for &x in xs {
                        accumulate(&mut adj, x, g.clone());
                    }
                }
            }
        }
        Ok(Grads { adj })
    }
}

fn accumulate(adj: &mut [Option<Matrix>], id: NodeId, g: Matrix) {
    match &mut adj[id.0] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

pub fn huber_scalar(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

fn map(a: &Matrix, f: impl Fn(f64) -> f64) -> Matrix {
    let data = a.data().iter().map(|&x| f(x)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data).unwrap()
}

fn zip(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    assert_eq!(
        (a.rows(), a.cols()),
        (b.rows(), b.cols()),
        "elementwise shape mismatch"
    );
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Matrix::from_vec(a.rows(), a.cols(), data).unwrap()
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

/// `a · wᵀ` where a is b x i and w is o x i.
fn matmul_t(a: &Matrix, w: &Matrix) -> Matrix {
    assert_eq!(a.cols(), w.cols(), "matmul_t inner dimension");
    let mut out = Matrix::zeros(a.rows(), w.rows());
    for r in 0..a.rows() {
        let ar = a.row(r);
        let or = out.row_mut(r);
        for (o, slot) in or.iter_mut().enumerate() {
            let wr = w.row(o);
            let mut s = 0.0;
            for k in 0..ar.len() {
                s += ar[k] * wr[k];
            }
            *slot = s;
        }
    }
    out
}

/// `a · w` where a is b x o and w is o x i.
fn matmul(a: &Matrix, w: &Matrix) -> Matrix {
    assert_eq!(a.cols(), w.rows(), "matmul inner dimension");
    let mut out = Matrix::zeros(a.rows(), w.cols());
    for r in 0..a.rows() {
        let ar = a.row(r);
        let or = out.row_mut(r);
        for (k, &aik) in ar.iter().enumerate() {
            let wr = w.row(k);
            for (o, &wv) in or.iter_mut().zip(wr) {
                *o += aik * wv;
            }
        }
    }
    out
}

/// `aᵀ · b` where a is b x o and b is b x i, giving o x i.
fn matmul_tn(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.rows(), b.rows(), "matmul_tn batch dimension");
    let mut out = Matrix::zeros(a.cols(), b.cols());
    for r in 0..a.rows() {
        let ar = a.row(r);
        let br = b.row(r);
        for (o, &aro) in ar.iter().enumerate() {
            if aro == 0.0 {
                continue;
            }
            for (slot, &bv) in out.row_mut(o).iter_mut().zip(br) {
                *slot += aro * bv;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::tape::{record, Var};

    fn m(rows: usize, cols: usize, v: &[f64]) -> Matrix {
        Matrix::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    /// A small program touching every graph op, mirrored on the scalar tape.
    #[test]
    fn matches_scalar_tape() {
        let xv = [0.3, -0.7, 1.1, 0.2];
        let wv = [0.5, -0.25, 0.75, 1.5, -1.0, 0.1];
        let bv = [0.05, -0.2, 0.3];
        let w2v = [0.4, -0.6, 0.9, 0.2, 0.3, -0.8];

        let mut g = Graph::new();
        let x = g.leaf(m(2, 2, &xv));
        let w = g.leaf(m(3, 2, &wv));
        let b = g.leaf(m(1, 3, &bv));
        let w2 = g.leaf(m(2, 3, &w2v));
        let a = g.matmul_t(x, w);
        let a = g.add_row(a, b);
        let h = g.tanh(a);
        let d = g.one_minus_square(h);
        let e = g.mul(h, d);
        let y = g.matmul_t(e, w2);
        let back = g.matmul(y, w2);
        let s = g.symplectic(y);
        let z = g.add_scaled(x, s, 0.3);
        let z = g.sub(z, x);
        let z = g.add(z, y);
        let z = g.scale(z, 2.0);
        let l1 = g.huber_sum(z, 0.4, 0.5);
        let bb = g.broadcast_row(b, 2);
        let l2 = g.huber_sum(bb, 1.0, 1.0);
        let back_sum = g.huber_sum(back, 0.1, 1.0);
        let loss = g.sum_scalars(&[l1, l2, back_sum]);
        let grads = g.backward(loss).unwrap();

        let mut all = Vec::new();
        all.extend_from_slice(&xv);
        all.extend_from_slice(&wv);
        all.extend_from_slice(&bv);
        all.extend_from_slice(&w2v);
        let rec = record(&all, |_, vars| {
            let (xs, rest) = vars.split_at(4);
            let (ws, rest) = rest.split_at(6);
            let (bs, w2s) = rest.split_at(3);
            fn huber<'t>(r: Var<'t>, delta: f64) -> Var<'t> {
                if r.value().abs() <= delta {
                    r.square() * 0.5
                } else if r.value() > 0.0 {
                    (r - 0.5 * delta) * delta
                } else {
                    (-r - 0.5 * delta) * delta
                }
            }
            let mut terms = Vec::new();
            for row in 0..2 {
                let xr = &xs[row * 2..row * 2 + 2];
                let mut e = Vec::new();
                for o in 0..3 {
                    let a = xr[0] * ws[o * 2] + xr[1] * ws[o * 2 + 1] + bs[o];
                    let h = a.tanh();
                    e.push(h * (1.0 - h * h));
                }
                let y: Vec<_> = (0..2)
                    .map(|o| e[0] * w2s[o * 3] + e[1] * w2s[o * 3 + 1] + e[2] * w2s[o * 3 + 2])
                    .collect();
                for c in 0..3 {
                    let bk = y[0] * w2s[c] + y[1] * w2s[3 + c];
                    terms.push(huber(bk, 0.1));
                }
                let s = [y[1], -y[0]];
                for k in 0..2 {
                    let z = ((xr[k] + s[k] * 0.3) - xr[k] + y[k]) * 2.0;
                    terms.push(huber(z, 0.4) * 0.5);
                }
                for &bk in bs.iter() {
                    terms.push(huber(bk, 1.0));
                }
            }
            vec![crate::autodiff::tape::sum(&terms)]
        })
        .unwrap();
        let expect = rec.backward().unwrap();
        assert!((g.value(loss)[(0, 0)] - rec.values()[0]).abs() < 1e-13);

        let mut got = Vec::new();
        for id in [x, w, b, w2] {
            got.extend_from_slice(grads.get(id).unwrap().data());
        }
        for (i, (a, e)) in got.iter().zip(&expect).enumerate() {
            assert!((a - e).abs() < 1e-12, "param {i}: graph {a} tape {e}");
        }
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Matrix::zeros(2, 2));
        assert!(matches!(g.backward(x), Err(Error::ScalarRequired(4))));
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(m(1, 1, &[2.0]));
        let unused = g.leaf(m(1, 1, &[5.0]));
        let y = g.mul(x, x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap()[(0, 0)], 4.0);
        assert!(grads.get(unused).is_none());
    }
}
