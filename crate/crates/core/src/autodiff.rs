//! Reverse-mode automatic differentiation over small dense matrices.
//!
//! Networks and the differentiable filter build their forward pass on a
//! [`Tape`]; [`Tape::backward`] then fills per-node gradients. The op set is
//! deliberately small: exactly what the acceleration estimator, its
//! covariance head, and the filter's matrix algebra need, including matrix
//! inverse and determinant with their closed-form adjoints.

use crate::error::{Error, Result};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

/// Row-major dense matrix of `f64`. Column vectors are `n × 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "tensor data length {} does not match {rows}x{cols}",
            data.len()
        );
        Tensor { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Tensor { rows, cols, data }
    }

    pub fn column(values: &[f64]) -> Self {
        Tensor::from_vec(values.len(), 1, values.to_vec())
    }

    pub fn identity(n: usize) -> Self {
        Tensor::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn scaled_identity(n: usize, c: f64) -> Self {
        Tensor::from_fn(n, n, |i, j| if i == j { c } else { 0.0 })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        assert!(i < self.rows && j < self.cols, "index ({i},{j}) out of bounds");
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        assert!(i < self.rows && j < self.cols, "index ({i},{j}) out of bounds");
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        Tensor::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn add_in_place(&mut self, other: &Tensor) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
    }

    pub fn scale_in_place(&mut self, c: f64) {
        for a in &mut self.data {
            *a *= c;
        }
    }

    fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_iterator(self.rows, self.cols, self.data.iter().copied())
    }

    fn from_dmatrix(m: &DMatrix<f64>) -> Self {
        Tensor::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }
}

fn mm(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul {}x{} by {}x{}", a.rows, a.cols, b.rows, b.cols);
    let (r, k, c) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for kk in 0..k {
            let aik = a.data[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[kk * c..(kk + 1) * c];
            let orow = &mut out[i * c..(i + 1) * c];
            for j in 0..c {
                orow[j] += aik * brow[j];
            }
        }
    }
    Tensor { rows: r, cols: c, data: out }
}

/// A · Bᵀ without materializing the transpose.
fn mm_nt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.cols);
    let (r, k, c) = (a.rows, a.cols, b.rows);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..c {
            let brow = &b.data[j * k..(j + 1) * k];
            out[i * c + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor { rows: r, cols: c, data: out }
}

/// Aᵀ · B without materializing the transpose.
fn mm_tn(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows, b.rows);
    let (r, k, c) = (a.cols, a.rows, b.cols);
    let mut out = vec![0.0; r * c];
    for kk in 0..k {
        let arow = &a.data[kk * r..(kk + 1) * r];
        let brow = &b.data[kk * c..(kk + 1) * c];
        for i in 0..r {
            let aki = arow[i];
            if aki == 0.0 {
                continue;
            }
            let orow = &mut out[i * c..(i + 1) * c];
            for j in 0..c {
                orow[j] += aki * brow[j];
            }
        }
    }
    Tensor { rows: r, cols: c, data: out }
}

/// Determinant via LU decomposition.
pub fn determinant(m: &Tensor) -> f64 {
    assert_eq!(m.rows, m.cols, "determinant of non-square {}x{}", m.rows, m.cols);
    if m.rows == 1 {
        return m.data[0];
    }
    m.to_dmatrix().determinant()
}

/// Matrix inverse via LU decomposition; errors on singular input.
pub fn invert(m: &Tensor) -> Result<Tensor> {
    assert_eq!(m.rows, m.cols, "inverse of non-square {}x{}", m.rows, m.cols);
    let inv = m
        .to_dmatrix()
        .try_inverse()
        .ok_or_else(|| Error::numerical("singular matrix in inverse"))?;
    if !inv.iter().all(|x| x.is_finite()) {
        return Err(Error::numerical("non-finite entries in matrix inverse"));
    }
    Ok(Tensor::from_dmatrix(&inv))
}

/// Matrix of partial derivatives of the determinant: ∂det/∂Mᵢⱼ = cofactorᵢⱼ,
/// equal to det·M⁻ᵀ when M is invertible and still defined when it is not.
fn cofactor_matrix(m: &Tensor) -> Tensor {
    let n = m.rows;
    if n == 1 {
        return Tensor::from_vec(1, 1, vec![1.0]);
    }
    if let Ok(inv) = invert(m) {
        let det = determinant(m);
        if det.is_finite() && det != 0.0 {
            let mut out = inv.transpose();
            out.scale_in_place(det);
            return out;
        }
    }
    Tensor::from_fn(n, n, |i, j| {
        let minor = DMatrix::from_fn(n - 1, n - 1, |r, c| {
            let rr = if r < i { r } else { r + 1 };
            let cc = if c < j { c } else { c + 1 };
            m.get(rr, cc)
        });
        let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
        sign * minor.determinant()
    })
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Transpose(NodeId),
    Inverse(NodeId),
    Det { src: NodeId, cofactors: Tensor },
    SumSq(NodeId),
    Rows { src: NodeId, start: usize },
    DiagFromVec(NodeId),
}

struct Node {
    value: Tensor,
    grad: Tensor,
    op: Op,
}

/// Computation tape: append-only graph of tensor operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let grad = Tensor::zeros(value.rows, value.cols);
        self.nodes.push(Node { value, grad, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].grad
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        assert_eq!((v.rows, v.cols), (1, 1), "node is not scalar");
        v.data[0]
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        let v = self.value(id);
        (v.rows, v.cols)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let mut v = self.value(a).clone();
        v.add_in_place(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let vb = self.value(b);
        let va = self.value(a);
        let v = Tensor {
            rows: va.rows,
            cols: va.cols,
            data: va.data.iter().zip(vb.data.iter()).map(|(x, y)| x - y).collect(),
        };
        self.push(v, Op::Sub(a, b))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = mm(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "hadamard shape mismatch");
        let vb = self.value(b);
        let va = self.value(a);
        let v = Tensor {
            rows: va.rows,
            cols: va.cols,
            data: va.data.iter().zip(vb.data.iter()).map(|(x, y)| x * y).collect(),
        };
        self.push(v, Op::Hadamard(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let mut v = self.value(a).clone();
        v.scale_in_place(c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        assert!(
            va.data.iter().all(|&x| x > 0.0),
            "ln requires strictly positive entries"
        );
        let v = va.map(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    /// Matrix inverse; errors on singular input instead of pushing a node.
    pub fn inverse(&mut self, a: NodeId) -> Result<NodeId> {
        let v = invert(self.value(a))?;
        Ok(self.push(v, Op::Inverse(a)))
    }

    /// Determinant as a 1×1 node. The gradient matrix (the cofactor matrix,
    /// det·M⁻ᵀ for invertible M) is captured at forward time.
    pub fn det(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let d = determinant(va);
        let cofactors = cofactor_matrix(va);
        self.push(Tensor::from_vec(1, 1, vec![d]), Op::Det { src: a, cofactors })
    }

    /// Sum of squared entries as a 1×1 node.
    pub fn sum_sq(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::from_vec(1, 1, vec![self.value(a).norm_sq()]);
        self.push(v, Op::SumSq(a))
    }

    /// Contiguous row slice `[start, start + count)`.
    pub fn rows(&mut self, a: NodeId, start: usize, count: usize) -> NodeId {
        let va = self.value(a);
        assert!(
            start + count <= va.rows,
            "row slice {start}..{} of {} rows",
            start + count,
            va.rows
        );
        let v = Tensor {
            rows: count,
            cols: va.cols,
            data: va.data[start * va.cols..(start + count) * va.cols].to_vec(),
        };
        self.push(v, Op::Rows { src: a, start })
    }

    /// Square matrix with the entries of a column vector on its diagonal.
    pub fn diag_from_vec(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        assert_eq!(va.cols, 1, "diag_from_vec expects a column vector");
        let n = va.rows;
        let mut v = Tensor::zeros(n, n);
        for i in 0..n {
            v.data[i * n + i] = va.data[i];
        }
        self.push(v, Op::DiagFromVec(a))
    }

    /// Accumulates gradients of every node with respect to the scalar `root`.
    /// Gradients from any previous call are discarded.
    pub fn backward(&mut self, root: NodeId) {
        let rv = self.value(root);
        assert_eq!((rv.rows, rv.cols), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.rows, n.value.cols))
            .collect();
        grads[root.0].data[0] = 1.0;
        for i in (0..=root.0).rev() {
            let g = std::mem::replace(&mut grads[i], Tensor::zeros(0, 0));
            if g.data.iter().all(|&x| x == 0.0) {
                grads[i] = g;
                continue;
            }
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    grads[a.0].add_in_place(&g);
                    grads[b.0].add_in_place(&g);
                }
                Op::Sub(a, b) => {
                    grads[a.0].add_in_place(&g);
                    for (gb, gg) in grads[b.0].data.iter_mut().zip(g.data.iter()) {
                        *gb -= gg;
                    }
                }
                Op::MatMul(a, b) => {
                    let ga = mm_nt(&g, &self.nodes[b.0].value);
                    let gb = mm_tn(&self.nodes[a.0].value, &g);
                    grads[a.0].add_in_place(&ga);
                    grads[b.0].add_in_place(&gb);
                }
                Op::Hadamard(a, b) => {
                    let va = &self.nodes[a.0].value;
                    let vb = &self.nodes[b.0].value;
                    for (k, gg) in g.data.iter().enumerate() {
                        grads[a.0].data[k] += gg * vb.data[k];
                    }
                    for (k, gg) in g.data.iter().enumerate() {
                        grads[b.0].data[k] += gg * va.data[k];
                    }
                }
                Op::Scale(a, c) => {
                    for (ga, gg) in grads[a.0].data.iter_mut().zip(g.data.iter()) {
                        *ga += c * gg;
                    }
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    for (k, gg) in g.data.iter().enumerate() {
                        grads[a.0].data[k] += gg * (1.0 - y.data[k] * y.data[k]);
                    }
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[i].value;
                    for (k, gg) in g.data.iter().enumerate() {
                        grads[a.0].data[k] += gg * y.data[k] * (1.0 - y.data[k]);
                    }
                }
                Op::Exp(a) => {
                    let y = &self.nodes[i].value;
                    for (k, gg) in g.data.iter().enumerate() {
                        grads[a.0].data[k] += gg * y.data[k];
                    }
                }
                Op::Ln(a) => {
                    let x = &self.nodes[a.0].value;
                    for (k, gg) in g.data.iter().enumerate() {
                        grads[a.0].data[k] += gg / x.data[k];
                    }
                }
                Op::Transpose(a) => {
                    let gt = g.transpose();
                    grads[a.0].add_in_place(&gt);
                }
                Op::Inverse(a) => {
                    // Y = M⁻¹ ⇒ ∂L/∂M = −Yᵀ (∂L/∂Y) Yᵀ.
                    let y = &self.nodes[i].value;
                    let mut ga = mm_nt(&mm_tn(y, &g), y);
                    ga.scale_in_place(-1.0);
                    grads[a.0].add_in_place(&ga);
                }
                Op::Det { src, cofactors } => {
                    let gd = g.data[0];
                    for (k, c) in cofactors.data.iter().enumerate() {
                        grads[src.0].data[k] += gd * c;
                    }
                }
                Op::SumSq(a) => {
                    let x = &self.nodes[a.0].value;
                    let gd = g.data[0];
                    for (k, xv) in x.data.iter().enumerate() {
                        grads[a.0].data[k] += 2.0 * gd * xv;
                    }
                }
                Op::Rows { src, start } => {
                    let cols = g.cols;
                    let offset = start * cols;
                    for (k, gg) in g.data.iter().enumerate() {
                        grads[src.0].data[offset + k] += gg;
                    }
                }
                Op::DiagFromVec(a) => {
                    let n = g.rows;
                    for k in 0..n {
                        grads[a.0].data[k] += g.data[k * n + k];
                    }
                }
            }
            grads[i] = g;
        }
        for (node, grad) in self.nodes.iter_mut().zip(grads) {
            node.grad = grad;
        }
    }
}

/// Step used for central finite differences in gradient checks.
pub const GRADCHECK_STEP: f64 = 1e-5;
/// Maximum relative error accepted by gradient checks.
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Relative error with an absolute floor so gradients near zero compare
/// sanely: |a − b| / max(|a|, |b|, 1e-6).
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Outcome of comparing analytic gradients against finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRADCHECK_TOL
    }
}

/// Central finite-difference gradient of `f` at `at`, step [`GRADCHECK_STEP`].
pub fn finite_difference_gradient(mut f: impl FnMut(&[f64]) -> f64, at: &[f64]) -> Vec<f64> {
    let mut x = at.to_vec();
    let mut out = Vec::with_capacity(at.len());
    for i in 0..at.len() {
        let orig = x[i];
        x[i] = orig + GRADCHECK_STEP;
        let plus = f(&x);
        x[i] = orig - GRADCHECK_STEP;
        let minus = f(&x);
        x[i] = orig;
        out.push((plus - minus) / (2.0 * GRADCHECK_STEP));
    }
    out
}

/// Compares an analytic gradient against central finite differences of `f`.
pub fn gradcheck(f: impl FnMut(&[f64]) -> f64, at: &[f64], analytic: &[f64]) -> GradCheck {
    assert_eq!(at.len(), analytic.len());
    assert!(!at.is_empty(), "gradcheck needs at least one parameter");
    let numeric = finite_difference_gradient(f, at);
    let mut worst = GradCheck {
        max_rel_err: -1.0,
        worst_index: 0,
        analytic_at_worst: analytic[0],
        numeric_at_worst: numeric[0],
    };
    for (i, (&a, &n)) in analytic.iter().zip(numeric.iter()).enumerate() {
        let err = relative_error(a, n);
        if err > worst.max_rel_err {
            worst = GradCheck {
                max_rel_err: err,
                worst_index: i,
                analytic_at_worst: a,
                numeric_at_worst: n,
            };
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    /// Gradient-checks a scalar graph built from a flat parameter slice.
    fn check(build: impl Fn(&mut Tape, &[f64]) -> NodeId, params: &[f64]) -> GradCheck {
        let mut tape = Tape::new();
        let root = build(&mut tape, params);
        tape.backward(root);
        // Leaves are created first, in order, one entry per parameter group;
        // collect analytic grads by walking leaves in creation order.
        let mut analytic = Vec::with_capacity(params.len());
        for i in 0..tape.len() {
            if matches!(tape.nodes[i].op, Op::Leaf) {
                analytic.extend_from_slice(&tape.nodes[i].grad.data);
            }
        }
        assert_eq!(analytic.len(), params.len(), "leaves must cover all params");
        gradcheck(
            |p| {
                let mut t = Tape::new();
                let r = build(&mut t, p);
                t.scalar(r)
            },
            params,
            &analytic,
        )
    }

    #[test]
    fn matmul_forward_hand_value() {
        let a = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Tensor::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = mm(&a, &b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
        assert_eq!(mm_nt(&a, &b.transpose()).data(), c.data());
        assert_eq!(mm_tn(&a.transpose(), &b).data(), c.data());
    }

    #[test]
    fn determinant_and_inverse_forward() {
        let m = Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        assert_relative_eq!(determinant(&m), -2.0, epsilon = 1e-12);
        let inv = invert(&m).unwrap();
        let prod = mm(&m, &inv);
        for i in 0..2 {
            for j in 0..2 {
                let expected = if i == j { 1.0 } else { 0.0 };
                assert_relative_eq!(prod.get(i, j), expected, epsilon = 1e-12);
            }
        }
        let singular = Tensor::from_vec(2, 2, vec![1.0, 2.0, 2.0, 4.0]);
        assert!(invert(&singular).is_err());
        assert_relative_eq!(determinant(&singular), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn elementwise_op_gradients() {
        let params = random_vec(6, 1);
        for (name, op) in [
            ("tanh", Tape::tanh as fn(&mut Tape, NodeId) -> NodeId),
            ("sigmoid", Tape::sigmoid),
            ("exp", Tape::exp),
        ] {
            let result = check(
                |t, p| {
                    let x = t.leaf(Tensor::from_vec(3, 2, p.to_vec()));
                    let y = op(t, x);
                    t.sum_sq(y)
                },
                &params,
            );
            assert!(result.passed(), "{name}: {result:?}");
        }
    }

    #[test]
    fn ln_gradient_and_forward() {
        let params = vec![0.5, 0.9, 2.0, 3.5];
        let result = check(
            |t, p| {
                let x = t.leaf(Tensor::from_vec(4, 1, p.to_vec()));
                let y = t.ln(x);
                t.sum_sq(y)
            },
            &params,
        );
        assert!(result.passed(), "{result:?}");
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(1, 1, vec![std::f64::consts::E]));
        let y = t.ln(x);
        assert_relative_eq!(t.scalar(y), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn arithmetic_op_gradients() {
        let params = random_vec(8, 2);
        let result = check(
            |t, p| {
                let a = t.leaf(Tensor::from_vec(2, 2, p[..4].to_vec()));
                let b = t.leaf(Tensor::from_vec(2, 2, p[4..].to_vec()));
                let sum = t.add(a, b);
                let diff = t.sub(a, b);
                let had = t.hadamard(sum, diff);
                let scaled = t.scale(had, 0.7);
                t.sum_sq(scaled)
            },
            &params,
        );
        assert!(result.passed(), "{result:?}");
    }

    #[test]
    fn matmul_and_transpose_gradients() {
        let params = random_vec(12, 3);
        let result = check(
            |t, p| {
                let a = t.leaf(Tensor::from_vec(2, 3, p[..6].to_vec()));
                let b = t.leaf(Tensor::from_vec(2, 3, p[6..].to_vec()));
                let bt = t.transpose(b);
                let prod = t.matmul(a, bt);
                t.sum_sq(prod)
            },
            &params,
        );
        assert!(result.passed(), "{result:?}");
    }

    #[test]
    fn slice_and_diag_gradients() {
        let params = random_vec(6, 4);
        let result = check(
            |t, p| {
                let x = t.leaf(Tensor::from_vec(6, 1, p.to_vec()));
                let top = t.rows(x, 0, 3);
                let bottom = t.rows(x, 3, 3);
                let d = t.diag_from_vec(top);
                let prod = t.matmul(d, bottom);
                t.sum_sq(prod)
            },
            &params,
        );
        assert!(result.passed(), "{result:?}");
    }

    #[test]
    fn inverse_gradient() {
        // Diagonally dominant input keeps the matrix comfortably invertible.
        let mut params = random_vec(9, 5);
        for i in 0..3 {
            params[i * 3 + i] += 3.0;
        }
        let result = check(
            |t, p| {
                let m = t.leaf(Tensor::from_vec(3, 3, p.to_vec()));
                let inv = t.inverse(m).unwrap();
                t.sum_sq(inv)
            },
            &params,
        );
        assert!(result.passed(), "{result:?}");
    }

    #[test]
    fn det_gradient_including_singular_input() {
        let mut params = random_vec(9, 6);
        for i in 0..3 {
            params[i * 3 + i] += 2.0;
        }
        let result = check(
            |t, p| {
                let m = t.leaf(Tensor::from_vec(3, 3, p.to_vec()));
                t.det(m)
            },
            &params,
        );
        assert!(result.passed(), "{result:?}");

        // Singular input exercises the cofactor fallback (det·M⁻ᵀ is
        // unavailable); the gradient is still the cofactor matrix.
        let rank2 = Tensor::from_vec(3, 3, vec![1.0, 2.0, 0.0, 2.0, 4.0, 0.0, 0.0, 0.0, 3.0]);
        assert!(invert(&rank2).is_err());
        let mut t = Tape::new();
        let m = t.leaf(rank2);
        let d = t.det(m);
        assert_relative_eq!(t.scalar(d), 0.0, epsilon = 1e-12);
        t.backward(d);
        let expected = [12.0, -6.0, 0.0, -6.0, 3.0, 0.0, 0.0, 0.0, 0.0];
        for (got, want) in t.grad(m).data().iter().zip(expected.iter()) {
            assert_relative_eq!(got, want, epsilon = 1e-9);
        }
    }

    #[test]
    fn quadratic_form_with_inverse_and_det() {
        // Shape of the filter's likelihood: rᵀ S⁻¹ r + γ det(S).
        let mut params = random_vec(12, 7);
        for i in 0..3 {
            params[3 + i * 3 + i] += 3.0;
        }
        let result = check(
            |t, p| {
                let r = t.leaf(Tensor::from_vec(3, 1, p[..3].to_vec()));
                let s = t.leaf(Tensor::from_vec(3, 3, p[3..].to_vec()));
                let sinv = t.inverse(s).unwrap();
                let rt = t.transpose(r);
                let half = t.matmul(rt, sinv);
                let quad = t.matmul(half, r);
                let d = t.det(s);
                let weighted = t.scale(d, 0.01);
                t.add(quad, weighted)
            },
            &params,
        );
        assert!(result.passed(), "{result:?}");
    }

    #[test]
    fn reused_node_accumulates_gradient() {
        // y = sum((x ∘ x + x)²) exercises fan-out through both uses of x.
        let params = vec![0.3, -0.7, 1.1];
        let result = check(
            |t, p| {
                let x = t.leaf(Tensor::from_vec(3, 1, p.to_vec()));
                let sq = t.hadamard(x, x);
                let y = t.add(sq, x);
                t.sum_sq(y)
            },
            &params,
        );
        assert!(result.passed(), "{result:?}");
        // Hand value at x = 0.3: d/dx (x² + x)² = 2(x² + x)(2x + 1).
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(1, 1, vec![0.3]));
        let sq = t.hadamard(x, x);
        let y = t.add(sq, x);
        let loss = t.sum_sq(y);
        t.backward(loss);
        let expected = 2.0 * (0.09 + 0.3) * (0.6 + 1.0);
        assert_relative_eq!(t.grad(x).get(0, 0), expected, epsilon = 1e-12);
    }

    #[test]
    fn backward_twice_resets_gradients() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::from_vec(1, 1, vec![2.0]));
        let y = t.sum_sq(x);
        t.backward(y);
        t.backward(y);
        assert_relative_eq!(t.grad(x).get(0, 0), 4.0, epsilon = 1e-12);
    }

    #[test]
    #[should_panic(expected = "backward root must be scalar")]
    fn backward_rejects_non_scalar_root() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::zeros(2, 1));
        t.backward(x);
    }

    #[test]
    fn gradcheck_utility_flags_wrong_gradient() {
        let f = |p: &[f64]| p[0] * p[0] + 3.0 * p[1];
        let at = [1.5, -2.0];
        let good = gradcheck(f, &at, &[3.0, 3.0]);
        assert!(good.passed(), "{good:?}");
        let bad = gradcheck(f, &at, &[3.0, 2.5]);
        assert!(!bad.passed());
        assert_eq!(bad.worst_index, 1);
    }
}
