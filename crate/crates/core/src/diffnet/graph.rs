//! Eager expression graph with reverse-mode differentiation.
//!
//! Every adjoint produced by [`Graph::grad`] is itself a node of the same
//! graph, so gradients can be differentiated again. The unroll uses this to
//! form Hessian-vector products and mixed second derivatives by
//! reverse-over-reverse without ever materializing a Hessian.

use std::sync::Arc;

use super::mat::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Sentinel in an [`IndexMap`] for an output slot that reads as zero.
pub const ZERO_SLOT: u32 = u32::MAX;

/// Flat gather map: `out[j] = src[index[j]]` (or 0 for [`ZERO_SLOT`]).
#[derive(Debug)]
pub struct IndexMap {
    pub index: Vec<u32>,
    pub out_shape: (usize, usize),
    pub src_shape: (usize, usize),
}

impl IndexMap {
    pub fn new(index: Vec<u32>, out_shape: (usize, usize), src_shape: (usize, usize)) -> Arc<Self> {
        assert_eq!(index.len(), out_shape.0 * out_shape.1);
        let src_len = (src_shape.0 * src_shape.1) as u32;
        debug_assert!(index.iter().all(|&i| i == ZERO_SLOT || i < src_len));
        Arc::new(Self {
            index,
            out_shape,
            src_shape,
        })
    }

    fn gather(&self, src: &Mat) -> Mat {
        let s = src.as_slice();
        let data = self
            .index
            .iter()
            .map(|&i| if i == ZERO_SLOT { 0.0 } else { s[i as usize] })
            .collect();
        Mat::from_vec(self.out_shape.0, self.out_shape.1, data)
    }

    fn scatter_add(&self, src: &Mat) -> Mat {
        let mut out = Mat::zeros(self.src_shape.0, self.src_shape.1);
        let o = out.as_mut_slice();
        for (&i, &v) in self.index.iter().zip(src.as_slice()) {
            if i != ZERO_SLOT {
                o[i as usize] += v;
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `scale * x + shift`
    /// `scale·a + shift`; only the scale matters for the adjoint.
    Affine(Var, f64),
    /// `m×n + 1×n`, bias broadcast down the rows.
    AddRow(Var, Var),
    SumRows(Var),
    BroadcastRows(Var),
    SumCols(Var),
    BroadcastCols(Var),
    SumAll(Var),
    BroadcastAll(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Gather(Var, Arc<IndexMap>),
    ScatterAdd(Var, Arc<IndexMap>),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Mat,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.as_slice()[0]
    }

    fn push(&mut self, op: Op, value: Mat) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(Op::Transpose(a), v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(Op::Mul(a, b), v)
    }

    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let v = self.value(a).map(|x| scale * x + shift);
        self.push(Op::Affine(a, scale), v)
    }

    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (m, n) = self.value(a).shape();
        assert_eq!(self.value(bias).shape(), (1, n), "add_row: bias shape");
        let mut v = self.value(a).clone();
        let b = self.value(bias).as_slice().to_vec();
        for r in 0..m {
            for (x, bv) in v.row_mut(r).iter_mut().zip(&b) {
                *x += bv;
            }
        }
        self.push(Op::AddRow(a, bias), v)
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let mut v = Mat::zeros(1, src.cols());
        for r in 0..src.rows() {
            for (o, x) in v.as_mut_slice().iter_mut().zip(src.row(r)) {
                *o += x;
            }
        }
        self.push(Op::SumRows(a), v)
    }

    pub fn broadcast_rows(&mut self, a: Var, rows: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.rows(), 1, "broadcast_rows: expects a row vector");
        let mut data = Vec::with_capacity(rows * src.cols());
        for _ in 0..rows {
            data.extend_from_slice(src.as_slice());
        }
        let v = Mat::from_vec(rows, src.cols(), data);
        self.push(Op::BroadcastRows(a), v)
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let data = (0..src.rows()).map(|r| src.row(r).iter().sum()).collect();
        let v = Mat::from_vec(src.rows(), 1, data);
        self.push(Op::SumCols(a), v)
    }

    pub fn broadcast_cols(&mut self, a: Var, cols: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.cols(), 1, "broadcast_cols: expects a column vector");
        let mut data = Vec::with_capacity(src.rows() * cols);
        for &x in src.as_slice() {
            data.extend(std::iter::repeat_n(x, cols));
        }
        let v = Mat::from_vec(src.rows(), cols, data);
        self.push(Op::BroadcastCols(a), v)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = Mat::scalar(self.value(a).sum());
        self.push(Op::SumAll(a), v)
    }

    pub fn broadcast_all(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let x = self.scalar(a);
        self.push(Op::BroadcastAll(a), Mat::filled(rows, cols, x))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), v)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), v)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(Op::Softmax(a), v)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let v = log_softmax_rows(self.value(a));
        self.push(Op::LogSoftmax(a), v)
    }

    pub fn gather(&mut self, a: Var, map: Arc<IndexMap>) -> Var {
        assert_eq!(self.value(a).shape(), map.src_shape, "gather: source shape");
        let v = map.gather(self.value(a));
        self.push(Op::Gather(a, map), v)
    }

    pub fn scatter_add(&mut self, a: Var, map: Arc<IndexMap>) -> Var {
        assert_eq!(self.value(a).shape(), map.out_shape, "scatter_add: source shape");
        let v = map.scatter_add(self.value(a));
        self.push(Op::ScatterAdd(a, map), v)
    }

    /// Inner product of two same-shaped nodes as a 1×1 node.
    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.sum_all(p)
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// Adjoints are recorded as graph nodes. A `wrt` entry the output does not
    /// depend on gets a zero leaf.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Vec<Var> {
        assert_eq!(self.value(output).shape(), (1, 1), "grad: output must be scalar");
        let end = output.0 + 1;
        let mut needed = vec![false; end];
        for w in wrt {
            if w.0 < end {
                needed[w.0] = true;
            }
        }
        for i in 0..end {
            if needed[i] {
                continue;
            }
            needed[i] = inputs(&self.nodes[i].op).into_iter().flatten().any(|p| needed[p.0]);
        }

        let mut adj: Vec<Option<Var>> = vec![None; end];
        adj[output.0] = Some(self.leaf(Mat::scalar(1.0)));
        for i in (0..end).rev() {
            let Some(g) = adj[i] else { continue };
            if !needed[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            for (input, contrib) in self.backward(Var(i), &op, g, &needed) {
                adj[input.0] = Some(match adj[input.0] {
                    Some(prev) => self.add(prev, contrib),
                    None => contrib,
                });
            }
        }

        wrt.iter()
            .map(|w| match adj.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let (r, c) = self.value(*w).shape();
                    self.leaf(Mat::zeros(r, c))
                }
            })
            .collect()
    }

    /// Vector-Jacobian contributions of node `out` (with adjoint `g`) to
    /// those of its inputs that lie on a path to a `wrt` leaf.
    fn backward(&mut self, out: Var, op: &Op, g: Var, needed: &[bool]) -> Vec<(Var, Var)> {
        let need = |v: &Var| needed[v.0];
        let mut res = Vec::with_capacity(2);
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if need(&a) {
                    let bt = self.transpose(b);
                    res.push((a, self.matmul(g, bt)));
                }
                if need(&b) {
                    let at = self.transpose(a);
                    res.push((b, self.matmul(at, g)));
                }
            }
            Op::Transpose(a) => res.push((a, self.transpose(g))),
            Op::Add(a, b) => {
                if need(&a) {
                    res.push((a, g));
                }
                if need(&b) {
                    res.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if need(&a) {
                    res.push((a, g));
                }
                if need(&b) {
                    res.push((b, self.affine(g, -1.0, 0.0)));
                }
            }
            Op::Mul(a, b) => {
                if need(&a) {
                    res.push((a, self.mul(g, b)));
                }
                if need(&b) {
                    res.push((b, self.mul(g, a)));
                }
            }
            Op::Affine(a, scale) => res.push((a, self.affine(g, scale, 0.0))),
            Op::AddRow(a, bias) => {
                if need(&a) {
                    res.push((a, g));
                }
                if need(&bias) {
                    res.push((bias, self.sum_rows(g)));
                }
            }
            Op::SumRows(a) => {
                let rows = self.value(a).rows();
                res.push((a, self.broadcast_rows(g, rows)));
            }
            Op::BroadcastRows(a) => res.push((a, self.sum_rows(g))),
            Op::SumCols(a) => {
                let cols = self.value(a).cols();
                res.push((a, self.broadcast_cols(g, cols)));
            }
            Op::BroadcastCols(a) => res.push((a, self.sum_cols(g))),
            Op::SumAll(a) => {
                let (r, c) = self.value(a).shape();
                res.push((a, self.broadcast_all(g, r, c)));
            }
            Op::BroadcastAll(a) => res.push((a, self.sum_all(g))),
            Op::Tanh(a) => {
                // d tanh = 1 - y², expressed through `out` so it stays differentiable.
                let sq = self.mul(out, out);
                let deriv = self.affine(sq, -1.0, 1.0);
                res.push((a, self.mul(g, deriv)));
            }
            Op::Relu(a) => {
                let mask = self.value(a).map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                let mask = self.leaf(mask);
                res.push((a, self.mul(g, mask)));
            }
            Op::Softmax(a) => {
                let cols = self.value(a).cols();
                let gy = self.mul(g, out);
                let s = self.sum_cols(gy);
                let s = self.broadcast_cols(s, cols);
                let centered = self.sub(g, s);
                res.push((a, self.mul(out, centered)));
            }
            Op::LogSoftmax(a) => {
                let cols = self.value(a).cols();
                let p = self.softmax(a);
                let s = self.sum_cols(g);
                let s = self.broadcast_cols(s, cols);
                let ps = self.mul(p, s);
                res.push((a, self.sub(g, ps)));
            }
            Op::Gather(a, ref map) => res.push((a, self.scatter_add(g, map.clone()))),
            Op::ScatterAdd(a, ref map) => res.push((a, self.gather(g, map.clone()))),
        }
        res
    }
}

fn inputs(op: &Op) -> [Option<Var>; 2] {
    use Op::*;
    match *op {
        Leaf => [None, None],
        MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddRow(a, b) => [Some(a), Some(b)],
        Transpose(a)
        | Affine(a, ..)
        | SumRows(a)
        | BroadcastRows(a)
        | SumCols(a)
        | BroadcastCols(a)
        | SumAll(a)
        | BroadcastAll(a)
        | Tanh(a)
        | Relu(a)
        | Softmax(a)
        | LogSoftmax(a)
        | Gather(a, _)
        | ScatterAdd(a, _) => [Some(a), None],
    }
}

pub fn softmax_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            z += *x;
        }
        for x in row.iter_mut() {
            *x /= z;
        }
    }
    out
}

pub fn log_softmax_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        for x in row.iter_mut() {
            *x -= lse;
        }
    }
    out
}
