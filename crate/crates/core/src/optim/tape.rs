//! Reverse-mode differentiation over dense matrices.
//!
//! Every node holds a `DMatrix<f64>`; scalars are 1×1 matrices. The op set is
//! exactly what the variational bounds need, including Cholesky and
//! triangular solves.

use std::cell::RefCell;

use nalgebra::DMatrix;

use crate::linalg;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddConst(usize),
    MulScalar(usize, usize),
    AddScalar(usize, usize),
    Hadamard(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Exp(usize),
    Ln(usize),
    Powf(usize, f64),
    Sum(usize),
    Trace(usize),
    Diag(usize),
    Cholesky(usize),
    SolveLower(usize, usize),
    SolveLowerT(usize, usize),
    TrilExpDiag(usize),
    ScaleCols(usize, usize),
    SqDist(usize, usize),
    Matern32(usize),
    RepeatRows(usize, usize),
    BlockMeanRows(usize, usize),
    RowSum(usize),
    HStack(Vec<usize>),
    ClampMin(usize, f64),
    LogSoftmaxRows(usize),
    PickSum(usize, Vec<usize>),
}

struct Node {
    value: DMatrix<f64>,
    op: Op,
}

/// Computation record. Variables borrow the tape, so a tape lives for one
/// loss evaluation.
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
        let (r, c) = self.shape();
        write!(f, "Var#{}({}x{})", self.id, r, c)
    }
}

/// Adjoints of every node with respect to one scalar output.
pub struct Gradients {
    grads: Vec<Option<DMatrix<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn wrt(&self, v: Var<'_>) -> DMatrix<f64> {
        match &self.grads[v.id] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.id];
                DMatrix::zeros(r, c)
            }
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: DMatrix<f64>, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub fn var(&self, value: DMatrix<f64>) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.var(DMatrix::from_element(1, 1, value))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn unary(&self, a: usize, f: impl FnOnce(&DMatrix<f64>) -> DMatrix<f64>, op: Op) -> Var<'_> {
        let v = {
            let nodes = self.nodes.borrow();
            f(&nodes[a].value)
        };
        self.push(v, op)
    }

    fn binary(&self, a: usize, b: usize, f: impl FnOnce(&DMatrix<f64>, &DMatrix<f64>) -> DMatrix<f64>, op: Op) -> Var<'_> {
        let v = {
            let nodes = self.nodes.borrow();
            f(&nodes[a].value, &nodes[b].value)
        };
        self.push(v, op)
    }

    /// Reverse sweep from a 1×1 output.
    pub fn gradient(&self, out: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[out.id].value.shape(), (1, 1), "gradient needs a scalar output");
        let mut grads: Vec<Option<DMatrix<f64>>> = vec![None; out.id + 1];
        grads[out.id] = Some(DMatrix::from_element(1, 1, 1.0));
        fn acc(grads: &mut [Option<DMatrix<f64>>], id: usize, g: DMatrix<f64>) {
            match &mut grads[id] {
                Some(x) => *x += g,
                slot @ None => *slot = Some(g),
            }
        }
        for id in (0..=out.id).rev() {
            let node = &nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, -&g);
                }
                Op::Neg(a) => acc(&mut grads, *a, -&g),
                Op::Scale(a, c) => acc(&mut grads, *a, &g * *c),
                Op::AddConst(a) => acc(&mut grads, *a, g.clone()),
                Op::MulScalar(a, s) => {
                    let sv = val(*s)[(0, 0)];
                    let gs = g.component_mul(val(*a)).sum();
                    acc(&mut grads, *a, &g * sv);
                    acc(&mut grads, *s, DMatrix::from_element(1, 1, gs));
                }
                Op::AddScalar(a, s) => {
                    acc(&mut grads, *s, DMatrix::from_element(1, 1, g.sum()));
                    acc(&mut grads, *a, g.clone());
                }
                Op::Hadamard(a, b) => {
                    let ga = g.component_mul(val(*b));
                    let gb = g.component_mul(val(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMul(a, b) => {
                    let ga = &g * val(*b).transpose();
                    let gb = val(*a).transpose() * &g;
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.transpose()),
                Op::Exp(a) => acc(&mut grads, *a, g.component_mul(&node.value)),
                Op::Ln(a) => acc(&mut grads, *a, g.component_div(val(*a))),
                Op::Powf(a, p) => {
                    let d = val(*a).map(|x| p * x.powf(p - 1.0));
                    acc(&mut grads, *a, g.component_mul(&d));
                }
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    acc(&mut grads, *a, DMatrix::from_element(r, c, g[(0, 0)]));
                }
                Op::Trace(a) => {
                    let n = val(*a).nrows();
                    acc(&mut grads, *a, DMatrix::identity(n, n) * g[(0, 0)]);
                }
                Op::Diag(a) => {
                    let n = val(*a).nrows();
                    let mut ga = DMatrix::zeros(n, n);
                    for i in 0..n {
                        ga[(i, i)] = g[(i, 0)];
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Cholesky(a) => {
                    // Ā = L⁻ᵀ sym(Φ(Lᵀ L̄)) L⁻¹, Φ = lower triangle with halved diagonal.
                    let l = &node.value;
                    let mut p = linalg::tril(&(l.transpose() * &g));
                    for i in 0..p.nrows() {
                        p[(i, i)] *= 0.5;
                    }
                    let s = linalg::symmetrize(&p);
                    let t = linalg::solve_lower_t(l, &s);
                    let ga = linalg::solve_lower_t(l, &t.transpose());
                    acc(&mut grads, *a, linalg::symmetrize(&ga));
                }
                Op::SolveLower(l, b) => {
                    let x = &node.value;
                    let gb = linalg::solve_lower_t(val(*l), &g);
                    let gl = -linalg::tril(&(&gb * x.transpose()));
                    acc(&mut grads, *l, gl);
                    acc(&mut grads, *b, gb);
                }
                Op::SolveLowerT(l, b) => {
                    let x = &node.value;
                    let gb = linalg::solve_lower(val(*l), &g);
                    let gl = -linalg::tril(&(x * gb.transpose()));
                    acc(&mut grads, *l, gl);
                    acc(&mut grads, *b, gb);
                }
                Op::TrilExpDiag(a) => {
                    let mut ga = linalg::tril(&g);
                    for i in 0..ga.nrows().min(ga.ncols()) {
                        ga[(i, i)] *= node.value[(i, i)];
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ScaleCols(a, v) => {
                    let av = val(*a);
                    let vv = val(*v);
                    let mut ga = g.clone();
                    let mut gv = DMatrix::zeros(1, av.ncols());
                    for j in 0..av.ncols() {
                        let s = vv[(0, j)];
                        let mut col_acc = 0.0;
                        for i in 0..av.nrows() {
                            ga[(i, j)] *= s;
                            col_acc += g[(i, j)] * av[(i, j)];
                        }
                        gv[(0, j)] = col_acc;
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *v, gv);
                }
                Op::SqDist(a, b) => {
                    let av = val(*a);
                    let bv = val(*b);
                    let row = g.column_sum(); // n×1
                    let col = g.row_sum(); // 1×m
                    let mut ga = &g * bv * -2.0;
                    for i in 0..av.nrows() {
                        for j in 0..av.ncols() {
                            ga[(i, j)] += 2.0 * av[(i, j)] * row[i];
                        }
                    }
                    let mut gb = g.transpose() * av * -2.0;
                    for i in 0..bv.nrows() {
                        for j in 0..bv.ncols() {
                            gb[(i, j)] += 2.0 * bv[(i, j)] * col[i];
                        }
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Matern32(a) => {
                    let s3 = 3f64.sqrt();
                    let d = val(*a).map(|r2| -1.5 * (-s3 * r2.max(0.0).sqrt()).exp());
                    acc(&mut grads, *a, g.component_mul(&d));
                }
                Op::RepeatRows(a, k) => {
                    let av = val(*a);
                    let mut ga = DMatrix::zeros(av.nrows(), av.ncols());
                    for i in 0..av.nrows() {
                        for s in 0..*k {
                            let mut r = ga.row_mut(i);
                            r += g.row(i * k + s);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::BlockMeanRows(a, k) => {
                    let av = val(*a);
                    let mut ga = DMatrix::zeros(av.nrows(), av.ncols());
                    let w = 1.0 / *k as f64;
                    for i in 0..g.nrows() {
                        for s in 0..*k {
                            ga.row_mut(i * k + s).copy_from(&(g.row(i) * w));
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::RowSum(a) => {
                    let av = val(*a);
                    let ga = DMatrix::from_fn(av.nrows(), av.ncols(), |i, _| g[(i, 0)]);
                    acc(&mut grads, *a, ga);
                }
                Op::HStack(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let c = val(p).ncols();
                        acc(&mut grads, p, g.columns(off, c).into_owned());
                        off += c;
                    }
                }
                Op::ClampMin(a, eps) => {
                    let av = val(*a);
                    let ga = DMatrix::from_fn(g.nrows(), g.ncols(), |i, j| if av[(i, j)] > *eps { g[(i, j)] } else { 0.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::LogSoftmaxRows(a) => {
                    let out = &node.value;
                    let rs = g.column_sum();
                    let ga = DMatrix::from_fn(g.nrows(), g.ncols(), |i, j| g[(i, j)] - out[(i, j)].exp() * rs[i]);
                    acc(&mut grads, *a, ga);
                }
                Op::PickSum(a, labels) => {
                    let av = val(*a);
                    let mut ga = DMatrix::zeros(av.nrows(), av.ncols());
                    for (i, &l) in labels.iter().enumerate() {
                        ga[(i, l)] = g[(0, 0)];
                    }
                    acc(&mut grads, *a, ga);
                }
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape()).collect();
        let mut full = grads;
        full.resize(nodes.len(), None);
        Gradients { grads: full, shapes }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> DMatrix<f64> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn scalar_value(&self) -> f64 {
        let nodes = self.tape.nodes.borrow();
        let v = &nodes[self.id].value;
        debug_assert_eq!(v.shape(), (1, 1));
        v[(0, 0)]
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.shape()
    }

    pub fn nrows(&self) -> usize {
        self.shape().0
    }

    pub fn ncols(&self) -> usize {
        self.shape().1
    }

    fn same_shape(&self, o: &Var<'t>, what: &str) {
        assert_eq!(self.shape(), o.shape(), "shape mismatch in {what}");
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.tape.unary(self.id, |a| a * c, Op::Scale(self.id, c))
    }

    pub fn add_const(self, c: f64) -> Var<'t> {
        self.tape.unary(self.id, |a| a.add_scalar(c), Op::AddConst(self.id))
    }

    /// Broadcast multiply by a 1×1 variable.
    pub fn mul_scalar(self, s: Var<'t>) -> Var<'t> {
        assert_eq!(s.shape(), (1, 1));
        self.tape.binary(self.id, s.id, |a, s| a * s[(0, 0)], Op::MulScalar(self.id, s.id))
    }

    /// Broadcast add of a 1×1 variable.
    pub fn add_scalar(self, s: Var<'t>) -> Var<'t> {
        assert_eq!(s.shape(), (1, 1));
        self.tape.binary(self.id, s.id, |a, s| a.add_scalar(s[(0, 0)]), Op::AddScalar(self.id, s.id))
    }

    pub fn hadamard(self, o: Var<'t>) -> Var<'t> {
        self.same_shape(&o, "hadamard");
        self.tape.binary(self.id, o.id, |a, b| a.component_mul(b), Op::Hadamard(self.id, o.id))
    }

    pub fn matmul(self, o: Var<'t>) -> Var<'t> {
        assert_eq!(self.ncols(), o.nrows(), "matmul inner dimensions");
        self.tape.binary(self.id, o.id, |a, b| a * b, Op::MatMul(self.id, o.id))
    }

    pub fn t(self) -> Var<'t> {
        self.tape.unary(self.id, |a| a.transpose(), Op::Transpose(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(self.id, |a| a.map(f64::exp), Op::Exp(self.id))
    }

    pub fn ln(self) -> Var<'t> {
        self.tape.unary(self.id, |a| a.map(f64::ln), Op::Ln(self.id))
    }

    pub fn powf(self, p: f64) -> Var<'t> {
        self.tape.unary(self.id, |a| a.map(|x| x.powf(p)), Op::Powf(self.id, p))
    }

    pub fn sqrt(self) -> Var<'t> {
        self.powf(0.5)
    }

    pub fn sum(self) -> Var<'t> {
        self.tape.unary(self.id, |a| DMatrix::from_element(1, 1, a.sum()), Op::Sum(self.id))
    }

    pub fn sum_sq(self) -> Var<'t> {
        self.hadamard(self).sum()
    }

    pub fn trace(self) -> Var<'t> {
        assert_eq!(self.nrows(), self.ncols(), "trace of non-square matrix");
        self.tape.unary(self.id, |a| DMatrix::from_element(1, 1, a.trace()), Op::Trace(self.id))
    }

    /// Diagonal as an n×1 column.
    pub fn diag(self) -> Var<'t> {
        self.tape.unary(
            self.id,
            |a| DMatrix::from_column_slice(a.nrows(), 1, a.diagonal().as_slice()),
            Op::Diag(self.id),
        )
    }

    /// Lower Cholesky factor. Panics on failure; use [`Var::try_cholesky`].
    pub fn cholesky(self) -> Var<'t> {
        self.try_cholesky().expect("cholesky failed")
    }

    /// Cholesky with the one-shot jitter retry of [`linalg::cholesky`]. The
    /// retry jitter is treated as a constant by the reverse sweep.
    pub fn try_cholesky(self) -> crate::Result<Var<'t>> {
        let l = {
            let nodes = self.tape.nodes.borrow();
            linalg::cholesky(&nodes[self.id].value)?
        };
        Ok(self.tape.push(l, Op::Cholesky(self.id)))
    }

    /// `L⁻¹ B` with `self = L` lower triangular.
    pub fn solve_lower(self, b: Var<'t>) -> Var<'t> {
        self.tape.binary(self.id, b.id, linalg::solve_lower, Op::SolveLower(self.id, b.id))
    }

    /// `L⁻ᵀ B` with `self = L` lower triangular.
    pub fn solve_lower_t(self, b: Var<'t>) -> Var<'t> {
        self.tape.binary(self.id, b.id, linalg::solve_lower_t, Op::SolveLowerT(self.id, b.id))
    }

    /// `(L Lᵀ)⁻¹ B` with `self = L`.
    pub fn chol_solve(self, b: Var<'t>) -> Var<'t> {
        self.solve_lower_t(self.solve_lower(b))
    }

    /// `log |L Lᵀ|` with `self = L`.
    pub fn chol_logdet(self) -> Var<'t> {
        self.diag().ln().sum().scale(2.0)
    }

    /// Strict lower triangle kept, diagonal exponentiated, upper zeroed.
    pub fn tril_exp_diag(self) -> Var<'t> {
        self.tape.unary(
            self.id,
            |a| {
                let mut out = linalg::tril(a);
                for i in 0..a.nrows().min(a.ncols()) {
                    out[(i, i)] = a[(i, i)].exp();
                }
                out
            },
            Op::TrilExpDiag(self.id),
        )
    }

    /// `A · diag(v)` with `v` a 1×C row.
    pub fn scale_cols(self, v: Var<'t>) -> Var<'t> {
        assert_eq!(v.shape(), (1, self.ncols()), "scale_cols row length");
        self.tape.binary(
            self.id,
            v.id,
            |a, v| {
                let mut out = a.clone();
                for j in 0..a.ncols() {
                    out.column_mut(j).scale_mut(v[(0, j)]);
                }
                out
            },
            Op::ScaleCols(self.id, v.id),
        )
    }

    /// Pairwise squared Euclidean distances between rows.
    pub fn sq_dist(self, b: Var<'t>) -> Var<'t> {
        assert_eq!(self.ncols(), b.ncols(), "sq_dist column counts");
        self.tape.binary(self.id, b.id, sq_dist, Op::SqDist(self.id, b.id))
    }

    /// `(1 + √3 d) exp(−√3 d)` applied to squared distances `d²`.
    pub fn matern32(self) -> Var<'t> {
        self.tape.unary(self.id, |a| a.map(matern32_profile), Op::Matern32(self.id))
    }

    /// Each row repeated `k` times consecutively.
    pub fn repeat_rows(self, k: usize) -> Var<'t> {
        self.tape.unary(
            self.id,
            |a| DMatrix::from_fn(a.nrows() * k, a.ncols(), |i, j| a[(i / k, j)]),
            Op::RepeatRows(self.id, k),
        )
    }

    /// Mean over consecutive blocks of `k` rows.
    pub fn block_mean_rows(self, k: usize) -> Var<'t> {
        assert_eq!(self.nrows() % k, 0, "row count not divisible by block size");
        self.tape.unary(
            self.id,
            |a| {
                let n = a.nrows() / k;
                let mut out = DMatrix::zeros(n, a.ncols());
                for i in 0..n {
                    for s in 0..k {
                        let mut r = out.row_mut(i);
                        r += a.row(i * k + s);
                    }
                }
                out / k as f64
            },
            Op::BlockMeanRows(self.id, k),
        )
    }

    /// Row sums as an n×1 column.
    pub fn row_sum(self) -> Var<'t> {
        self.tape.unary(self.id, |a| { let s = a.column_sum(); DMatrix::from_column_slice(s.len(), 1, s.as_slice()) }, Op::RowSum(self.id))
    }

    pub fn clamp_min(self, eps: f64) -> Var<'t> {
        self.tape.unary(self.id, |a| a.map(|x| x.max(eps)), Op::ClampMin(self.id, eps))
    }

    pub fn log_softmax_rows(self) -> Var<'t> {
        self.tape.unary(
            self.id,
            |a| {
                let mut out = a.clone();
                for i in 0..a.nrows() {
                    let m = a.row(i).max();
                    let lse = m + a.row(i).iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                    for j in 0..a.ncols() {
                        out[(i, j)] -= lse;
                    }
                }
                out
            },
            Op::LogSoftmaxRows(self.id),
        )
    }

    /// `Σₙ A[n, labels[n]]`.
    pub fn pick_sum(self, labels: &[usize]) -> Var<'t> {
        assert_eq!(labels.len(), self.nrows());
        self.tape.unary(
            self.id,
            |a| DMatrix::from_element(1, 1, labels.iter().enumerate().map(|(i, &l)| a[(i, l)]).sum()),
            Op::PickSum(self.id, labels.to_vec()),
        )
    }
}

/// Columns of several variables side by side.
pub fn hstack<'t>(parts: &[Var<'t>]) -> Var<'t> {
    assert!(!parts.is_empty());
    let tape = parts[0].tape;
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    let v = {
        let nodes = tape.nodes.borrow();
        let n = nodes[ids[0]].value.nrows();
        let total: usize = ids.iter().map(|&i| nodes[i].value.ncols()).sum();
        let mut out = DMatrix::zeros(n, total);
        let mut off = 0;
        for &i in &ids {
            let m = &nodes[i].value;
            assert_eq!(m.nrows(), n, "hstack row counts");
            out.columns_mut(off, m.ncols()).copy_from(m);
            off += m.ncols();
        }
        out
    };
    tape.push(v, Op::HStack(ids))
}

pub(crate) fn sq_dist(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| {
        let mut s = 0.0;
        for k in 0..a.ncols() {
            let d = a[(i, k)] - b[(j, k)];
            s += d * d;
        }
        s
    })
}

pub(crate) fn matern32_profile(r2: f64) -> f64 {
    let d = 3f64.sqrt() * r2.max(0.0).sqrt();
    (1.0 + d) * (-d).exp()
}

macro_rules! binop {
    ($tr:ident, $m:ident, $op:ident, $f:expr) => {
        impl<'t> std::ops::$tr for Var<'t> {
            type Output = Var<'t>;
            fn $m(self, o: Var<'t>) -> Var<'t> {
                self.same_shape(&o, stringify!($m));
                self.tape.binary(self.id, o.id, $f, Op::$op(self.id, o.id))
            }
        }
    };
}

binop!(Add, add, Add, |a, b| a + b);
binop!(Sub, sub, Sub, |a, b| a - b);

impl<'t> std::ops::Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Var<'t> {
        self.tape.unary(self.id, |a| -a, Op::Neg(self.id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(r: usize, c: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Checks the reverse sweep of `f` against central differences on every
    /// entry of every input.
    fn check(inputs: Vec<DMatrix<f64>>, f: impl for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>) {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.var(m.clone())).collect();
        let out = f(&tape, &vars);
        let g = tape.gradient(out);
        let eval = |ins: &[DMatrix<f64>]| {
            let t = Tape::new();
            let vs: Vec<Var> = ins.iter().map(|m| t.var(m.clone())).collect();
            f(&t, &vs).scalar_value()
        };
        let h = 1e-6;
        for (k, m) in inputs.iter().enumerate() {
            let analytic = g.wrt(vars[k]);
            for idx in 0..m.len() {
                let mut plus = inputs.clone();
                plus[k][idx] += h;
                let mut minus = inputs.clone();
                minus[k][idx] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic[idx];
                assert!(
                    (a - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "input {k} entry {idx}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn quadratic_gradient_is_identity_map() {
        let tape = Tape::new();
        let th = DMatrix::from_column_slice(3, 1, &[1.0, -2.0, 0.5]);
        let v = tape.var(th.clone());
        let loss = v.sum_sq().scale(0.5);
        assert_eq!(tape.gradient(loss).wrt(v), th);
    }

    #[test]
    fn elementwise_and_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = rand_mat(3, 4, &mut rng);
        let b = rand_mat(4, 2, &mut rng);
        let c = rand_mat(3, 4, &mut rng);
        let s = DMatrix::from_element(1, 1, 0.7);
        check(vec![a, b, c, s], |_, v| {
            let x = (v[0].hadamard(v[2]) + v[0].exp() - v[2].scale(0.3)).mul_scalar(v[3]);
            let y = x.matmul(v[1]).t().add_scalar(v[3]);
            (-y).hadamard(y).sum() + x.add_const(3.0).powf(1.5).sum() + v[2].row_sum().sum_sq()
        });
    }

    #[test]
    fn cholesky_solves_and_logdet() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = rand_mat(4, 4, &mut rng);
        let b = rand_mat(4, 3, &mut rng);
        check(vec![a, b], |t, v| {
            let k = v[0].matmul(v[0].t()) + t.var(DMatrix::identity(4, 4));
            let l = k.cholesky();
            let x = l.chol_solve(v[1]);
            let y = l.solve_lower(v[1]);
            x.hadamard(v[1]).sum() + l.chol_logdet() + y.sum_sq() + k.trace().ln()
        });
    }

    #[test]
    fn kernel_building_blocks() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_mat(5, 2, &mut rng);
        let b = rand_mat(3, 2, &mut rng);
        let g = DMatrix::from_row_slice(1, 2, &[0.8, 1.7]);
        check(vec![a, b, g], |_, v| {
            let sa = v[0].scale_cols(v[2]);
            let sb = v[1].scale_cols(v[2]);
            let d = sa.sq_dist(sb);
            let k = d.matern32() + d.scale(-0.5).exp();
            let rep = k.repeat_rows(2).block_mean_rows(5);
            k.t().matmul(k).trace() + rep.sum_sq()
        });
    }

    #[test]
    fn structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_mat(3, 3, &mut rng);
        let b = rand_mat(3, 2, &mut rng);
        check(vec![a, b], |_, v| {
            let l = v[0].tril_exp_diag();
            let s = crate::optim::tape::hstack(&[l, v[1]]);
            let ls = s.log_softmax_rows();
            ls.pick_sum(&[0, 4, 2]) + l.diag().sum_sq() + s.hadamard(s).clamp_min(0.05).sum()
        });
    }

    #[test]
    fn cholesky_value_matches_linalg() {
        let tape = Tape::new();
        let k = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let l = tape.var(k.clone()).cholesky();
        assert!((l.value() - linalg::cholesky(&k).unwrap()).norm() < 1e-15);
    }
}
