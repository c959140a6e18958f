//! Reverse-mode differentiation over a closed set of matrix primitives.
//!
//! A [`Tape`] records every primitive applied to its variables. Values stay
//! on the tape until [`Tape::backward`] consumes it and returns gradients for
//! the trainable leaves.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::graph::GraphFilter;
use crate::matrix::{Matrix, Real, ShapeMismatch};

/// Rows of `info_nce` inputs must have unit norm (or be zero) within this tolerance.
pub const UNIT_NORM_TOL: f64 = 1e-4;

/// Row norms below this are clamped in `l2_normalize_rows`, so an isolated
/// all-zero row maps to zero instead of failing; InfoNCE accepts such rows.
/// A matrix whose rows are all zero is still an error.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Propagate {
        filter: Arc<GraphFilter>,
        k: usize,
        x: Var,
    },
    Relu(Var),
    PRelu {
        x: Var,
        slope: Var,
    },
    Add(Var, Var),
    Scale(Var, T),
    L2NormalizeRows {
        x: Var,
        norms: Vec<T>,
    },
    Sum(Var),
    SumSquares(Var),
    InfoNce {
        z1: Var,
        z2: Var,
        /// Positive-pair weight `e^a_i / den_i`.
        p: Vec<T>,
        /// Negative weights `e^b_ij / den_i`, zero diagonal.
        q: Matrix<T>,
    },
}

impl<T: Copy> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Propagate { .. } => "propagate",
            Op::Relu(_) => "relu",
            Op::PRelu { .. } => "prelu",
            Op::Add(..) => "add",
            Op::Scale(..) => "scale",
            Op::L2NormalizeRows { .. } => "l2_normalize_rows",
            Op::Sum(_) => "sum",
            Op::SumSquares(_) => "sum_squares",
            Op::InfoNce { .. } => "info_nce",
        }
    }

    fn saved_len(&self) -> usize {
        match self {
            Op::L2NormalizeRows { norms, .. } => norms.len(),
            Op::InfoNce { p, q, .. } => p.len() + q.len(),
            _ => 0,
        }
    }
}

struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list()
            .entries(self.nodes.iter().map(|n| (n.op.name(), n.value.shape())))
            .finish()
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of the trainable leaves, keyed by their tape handle.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: HashMap<Var, Matrix<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.get(&v)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix<T>> {
        self.grads.remove(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Bytes held by recorded values and saved backward state.
    pub fn stored_bytes(&self) -> usize {
        let elems: usize = self
            .nodes
            .iter()
            .map(|n| n.value.len() + n.op.saved_len())
            .sum();
        elems * std::mem::size_of::<T>()
    }

    /// Sign (-1, 0, 1) of every input entry to a rectifier, in tape order.
    /// Two evaluations with equal signatures share one linear piece.
    pub fn kink_signature(&self) -> Vec<i8> {
        let mut out = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(x) | Op::PRelu { x, .. } = node.op {
                out.extend(self.value(x).as_slice().iter().map(|&v| {
                    if v > T::zero() {
                        1
                    } else if v < T::zero() {
                        -1
                    } else {
                        0
                    }
                }));
            }
        }
        out
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Matrix<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Matrix<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("{} produced non-finite values", op.name())));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `F^k x` for the symmetric filter `F`.
    pub fn propagate(&mut self, filter: &Arc<GraphFilter>, x: Var, k: usize) -> Result<Var> {
        let out = filter.propagate(self.value(x), k)?;
        self.push(
            out,
            Op::Propagate {
                filter: Arc::clone(filter),
                k,
                x,
            },
            &[x],
        )
    }

    /// Single application of the filter.
    pub fn spmm(&mut self, filter: &Arc<GraphFilter>, x: Var) -> Result<Var> {
        self.propagate(filter, x, 1)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x), &[x])
    }

    /// Leaky activation with a learnable `1x1` slope applied to `x <= 0`.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        if self.value(slope).shape() != (1, 1) {
            return Err(ShapeMismatch {
                op: "prelu",
                lhs: self.value(x).shape(),
                rhs: self.value(slope).shape(),
            }
            .into());
        }
        let a = self.value(slope)[(0, 0)];
        let out = self.value(x).map(|v| if v > T::zero() { v } else { a * v });
        self.push(out, Op::PRelu { x, slope }, &[x, slope])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(ShapeMismatch {
                op: "add",
                lhs: va.shape(),
                rhs: vb.shape(),
            }
            .into());
        }
        let mut out = va.clone();
        out.add_assign(vb);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        let eps = T::from_f64_lossy(NORM_EPS);
        for r in 0..xv.rows() {
            let row = out.row_mut(r);
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !norm.is_finite() {
                return Err(Error::Numeric(format!("non-finite norm in row {r} of l2_normalize_rows")));
            }
            let denom = if norm > eps { norm } else { eps };
            row.iter_mut().for_each(|v| *v = *v / denom);
            norms.push(norm);
        }
        if !norms.is_empty() && norms.iter().all(|n| !(*n > eps)) {
            return Err(Error::Numeric(
                "every row is zero in l2_normalize_rows (degenerate embedding)".into(),
            ));
        }
        self.push(out, Op::L2NormalizeRows { x, norms }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Matrix::filled(1, 1, s), Op::Sum(x), &[x])
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).frobenius_sq();
        self.push(Matrix::filled(1, 1, s), Op::SumSquares(x), &[x])
    }

    /// Contrastive loss with anchors and negatives from `z1` and positives
    /// from `z2`:
    /// `-sum_i log(e^a_i / (e^a_i + sum_{j != i} e^b_ij))`,
    /// `a_i = -|z1_i - z2_i|^2 / 2`, `b_ij = -|z1_i - z1_j|^2 / 2`.
    /// Rows of both inputs must have unit norm.
    pub fn info_nce(&mut self, z1: Var, z2: Var) -> Result<Var> {
        let (a, b) = (self.value(z1), self.value(z2));
        if a.shape() != b.shape() {
            return Err(ShapeMismatch {
                op: "info_nce",
                lhs: a.shape(),
                rhs: b.shape(),
            }
            .into());
        }
        check_unit_rows(a, "first view")?;
        check_unit_rows(b, "second view")?;
        let (total, p, q) = info_nce_forward(a, b)?;
        self.push(Matrix::filled(1, 1, total), Op::InfoNce { z1, z2, p, q }, &[z1, z2])
    }

    /// Reverse pass from the scalar `loss`. Consumes the tape.
    pub fn backward(mut self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes.is_empty() {
            return Err(Error::InvalidArgument("backward on an empty tape".into()));
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::InvalidArgument(format!(
                "loss must be 1x1, got {}x{}",
                self.value(loss).rows(),
                self.value(loss).cols()
            )));
        }
        self.nodes.truncate(loss.0 + 1);
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, T::one()));
        let mut out = HashMap::new();

        while let Some(node) = self.nodes.pop() {
            let idx = self.nodes.len();
            if !node.requires_grad {
                continue;
            }
            let g = grads[idx].take();
            if let Op::Leaf = node.op {
                let g = g.unwrap_or_else(|| Matrix::zeros(node.value.rows(), node.value.cols()));
                out.insert(Var(idx), g);
                continue;
            }
            let Some(g) = g else { continue };
            for (input, gi) in self.input_grads(&node, &g)? {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&gi),
                    slot => *slot = Some(gi),
                }
            }
        }
        if out.values().any(|g| !g.is_finite()) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        Ok(Gradients { grads: out })
    }

    fn input_grads(&self, node: &Node<T>, g: &Matrix<T>) -> Result<Vec<(Var, Matrix<T>)>> {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let mut v = Vec::with_capacity(2);
                if needs(*a) {
                    v.push((*a, g.matmul_t(self.value(*b))?));
                }
                if needs(*b) {
                    v.push((*b, self.value(*a).t_matmul(g)?));
                }
                v
            }
            Op::Propagate { filter, k, x } => vec![(*x, filter.propagate(g, *k)?)],
            Op::Relu(x) => {
                let mut gx = g.clone();
                for (gv, &y) in gx.as_mut_slice().iter_mut().zip(node.value.as_slice()) {
                    if !(y > T::zero()) {
                        *gv = T::zero();
                    }
                }
                vec![(*x, gx)]
            }
            Op::PRelu { x, slope } => {
                let a = self.value(*slope)[(0, 0)];
                let xv = self.value(*x);
                let mut gx = g.clone();
                let mut ga = T::zero();
                for ((gv, &xi), &gi) in gx.as_mut_slice().iter_mut().zip(xv.as_slice()).zip(g.as_slice()) {
                    if !(xi > T::zero()) {
                        *gv = a * gi;
                        ga += gi * xi;
                    }
                }
                vec![(*x, gx), (*slope, Matrix::filled(1, 1, ga))]
            }
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Scale(x, c) => vec![(*x, g.map(|v| v * *c))],
            Op::L2NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut gx = g.clone();
                let eps = T::from_f64_lossy(NORM_EPS);
                for (r, &norm) in norms.iter().enumerate() {
                    if !(norm > eps) {
                        gx.row_mut(r).iter_mut().for_each(|v| *v = *v / eps);
                        continue;
                    }
                    let yr = y.row(r);
                    let proj = crate::matrix::dot(yr, g.row(r));
                    for (gv, &yv) in gx.row_mut(r).iter_mut().zip(yr) {
                        *gv = (*gv - yv * proj) / norm;
                    }
                }
                vec![(*x, gx)]
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                vec![(*x, Matrix::filled(xv.rows(), xv.cols(), g[(0, 0)]))]
            }
            Op::SumSquares(x) => {
                let two_g = g[(0, 0)] + g[(0, 0)];
                vec![(*x, self.value(*x).map(|v| two_g * v))]
            }
            Op::InfoNce { z1, z2, p, q } => {
                let (d1, d2) = info_nce_backward(self.value(*z1), self.value(*z2), p, q, g[(0, 0)])?;
                vec![(*z1, d1), (*z2, d2)]
            }
        })
    }
}

fn check_unit_rows<T: Real>(z: &Matrix<T>, which: &str) -> Result<()> {
    for r in 0..z.rows() {
        let norm = z.row(r).iter().map(|&v| v * v).sum::<T>().sqrt().as_f64();
        if (norm - 1.0).abs() > UNIT_NORM_TOL && norm > UNIT_NORM_TOL {
            return Err(Error::Numeric(format!(
                "info_nce requires unit rows; {which} row {r} has norm {norm}"
            )));
        }
    }
    Ok(())
}

fn info_nce_forward<T: Real>(z1: &Matrix<T>, z2: &Matrix<T>) -> Result<(T, Vec<T>, Matrix<T>)> {
    let n = z1.rows();
    let half = T::from_f64_lossy(0.5);
    let gram = z1.matmul_t(z1)?;
    let sq: Vec<T> = (0..n).map(|i| gram[(i, i)]).collect();
    let mut q = Matrix::zeros(n, n);
    let mut p = Vec::with_capacity(n);
    let mut total = T::zero();
    for i in 0..n {
        let a_i = -half
            * z1.row(i)
                .iter()
                .zip(z2.row(i))
                .map(|(&x, &y)| (x - y) * (x - y))
                .sum::<T>();
        let q_row = q.row_mut(i);
        let mut m = a_i;
        for j in 0..n {
            if j != i {
                let b = -half * (sq[i] + sq[j] - (gram[(i, j)] + gram[(i, j)]));
                q_row[j] = b;
                m = m.max(b);
            }
        }
        let e_a = (a_i - m).exp();
        let mut den = e_a;
        for (j, v) in q_row.iter_mut().enumerate() {
            if j != i {
                *v = (*v - m).exp();
                den += *v;
            }
        }
        for v in q_row.iter_mut() {
            *v = *v / den;
        }
        p.push(e_a / den);
        total += den.ln() - (a_i - m);
    }
    Ok((total, p, q))
}

fn info_nce_backward<T: Real>(
    z1: &Matrix<T>,
    z2: &Matrix<T>,
    p: &[T],
    q: &Matrix<T>,
    g: T,
) -> Result<(Matrix<T>, Matrix<T>)> {
    let n = z1.rows();
    // Negative part: ((Q + Q^T) - diag(r + c)) Z1.
    let mut sym = Matrix::zeros(n, n);
    let mut rc = vec![T::zero(); n];
    for i in 0..n {
        for j in 0..n {
            let v = q[(i, j)];
            sym[(i, j)] += v;
            sym[(j, i)] += v;
            rc[i] += v;
            rc[j] += v;
        }
    }
    let mut d1 = sym.matmul(z1)?;
    let mut d2 = Matrix::zeros(n, z1.cols());
    for i in 0..n {
        let w = T::one() - p[i];
        let (r1, r2) = (z1.row(i), z2.row(i));
        let diff: Vec<T> = r1.iter().zip(r2).map(|(&x, &y)| x - y).collect();
        for ((o, &x), &dv) in d1.row_mut(i).iter_mut().zip(r1).zip(&diff) {
            *o = g * (*o - rc[i] * x + w * dv);
        }
        for (o, &dv) in d2.row_mut(i).iter_mut().zip(&diff) {
            *o = -g * w * dv;
        }
    }
    Ok((d1, d2))
}
