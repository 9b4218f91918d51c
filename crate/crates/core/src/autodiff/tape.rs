//! Reverse-mode differentiation over dense matrices.
//!
//! Every operation appends a node holding its value; [`Tape::backward`] walks
//! the nodes in reverse and accumulates adjoints. Nodes that cannot reach a
//! gradient-carrying leaf are skipped on the way back.

use crate::error::Result;
use crate::linalg::{self, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Sin(Var),
    Cos(Var),
    Square(Var),
    SqrtFloor(Var, f64),
    Sum(Var),
    RowSum(Var),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Transpose(Var),
    Rbf(Var, Var),
    AddDiag(Var, Var),
    SpdInverse(Var),
    Logdet { spd: Var, inverse: Var },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
    /// Log-determinant computed alongside an inverse.
    logdet: f64,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of every node with respect to one scalar output.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of `shape` if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    fn push(&mut self, value: Matrix, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            logdet: 0.0,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            logdet: 0.0,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            requires_grad: false,
            logdet: 0.0,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: operand shapes differ"
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    /// `m + r` with the 1×c row `r` broadcast over rows.
    pub fn add_row(&mut self, m: Var, r: Var) -> Var {
        let v = broadcast_row(self.value(m), self.value(r), |x, y| x + y);
        self.push(v, Op::AddRow(m, r), &[m, r])
    }

    /// `m ⊙ r` with the 1×c row `r` broadcast over rows.
    pub fn mul_row(&mut self, m: Var, r: Var) -> Var {
        let v = broadcast_row(self.value(m), self.value(r), |x, y| x * y);
        self.push(v, Op::MulRow(m, r), &[m, r])
    }

    /// `m + c` with the r×1 column `c` broadcast over columns.
    pub fn add_col(&mut self, m: Var, c: Var) -> Var {
        let v = broadcast_col(self.value(m), self.value(c), |x, y| x + y);
        self.push(v, Op::AddCol(m, c), &[m, c])
    }

    /// `m ⊙ c` with the r×1 column `c` broadcast over columns.
    pub fn mul_col(&mut self, m: Var, c: Var) -> Var {
        let v = broadcast_col(self.value(m), self.value(c), |x, y| x * y);
        self.push(v, Op::MulCol(m, c), &[m, c])
    }

    /// `m · s` for a 1×1 variable `s`.
    pub fn mul_scalar(&mut self, m: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let v = self.value(m).map(|x| x * sv);
        self.push(v, Op::MulScalar(m, s), &[m, s])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c), &[a])
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddConst(a), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        let n = self.neg(a);
        self.add_const(n, 1.0)
    }

    fn matmul_general(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let v = self.value(a).matmul_t(ta, self.value(b), tb);
        self.push(v, Op::MatMul { a, b, ta, tb }, &[a, b])
    }

    /// `a · b`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_general(a, false, b, false)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_general(a, false, b, true)
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        self.matmul_general(a, true, b, false)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a), &[a])
    }

    /// `log(1 + exp(a))`
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a), &[a])
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sin);
        self.push(v, Op::Sin(a), &[a])
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::cos);
        self.push(v, Op::Cos(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a), &[a])
    }

    /// `sqrt(max(a, floor))`; the gradient is zero wherever the floor binds.
    pub fn sqrt_floor(&mut self, a: Var, floor: f64) -> Var {
        let v = self.value(a).map(|x| x.max(floor).sqrt());
        self.push(v, Op::SqrtFloor(a, floor), &[a])
    }

    /// Sum of all entries as a 1×1 matrix.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a), &[a])
    }

    /// Row sums as an r×1 column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Matrix::from_fn(m.rows(), 1, |i, _| m.row(i).iter().sum());
        self.push(v, Op::RowSum(a), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_cols(start, len);
        self.push(v, Op::SliceCols(a, start), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_rows(start, len);
        self.push(v, Op::SliceRows(a, start), &[a])
    }

    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let m = self.value(a);
        let v = Matrix::from_fn(idx.len(), m.cols(), |i, j| m[(idx[i], j)]);
        self.push(v, Op::GatherRows(a, idx), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols row mismatch");
            for i in 0..rows {
                out.row_mut(i)[off..off + m.cols()].copy_from_slice(m.row(i));
            }
            off += m.cols();
        }
        self.push(out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(m.as_slice());
            rows += m.rows();
        }
        self.push(
            Matrix::from_vec(rows, cols, data),
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a), &[a])
    }

    /// Unit-variance squared-exponential kernel between the rows of `a` and
    /// `b` (already divided by their lengthscales):
    /// `K_ij = exp(-½ |a_i - b_j|²)`.
    pub fn rbf(&mut self, a: Var, b: Var) -> Var {
        let (ma, mb) = (self.value(a), self.value(b));
        assert_eq!(ma.cols(), mb.cols(), "rbf feature dimension mismatch");
        let v = rbf_matrix(ma, mb);
        self.push(v, Op::Rbf(a, b), &[a, b])
    }

    /// `m + s·I` for a square `m` and 1×1 `s`.
    pub fn add_diag(&mut self, m: Var, s: Var) -> Var {
        let sv = self.scalar(s);
        let mut v = self.value(m).clone();
        assert_eq!(v.rows(), v.cols(), "add_diag on a non-square matrix");
        for i in 0..v.rows() {
            v[(i, i)] += sv;
        }
        self.push(v, Op::AddDiag(m, s), &[m, s])
    }

    /// Inverse of a symmetric positive definite matrix (with escalating
    /// jitter, see [`linalg::spd_inverse`]).
    pub fn spd_inverse(&mut self, a: Var) -> Result<Var> {
        let inv = linalg::spd_inverse(self.value(a))?;
        let v = self.push(inv.inverse, Op::SpdInverse(a), &[a]);
        self.nodes[v.0].logdet = inv.logdet;
        Ok(v)
    }

    /// Log-determinant of `spd`, reusing the factorization behind `inverse`
    /// (which must be `spd_inverse(spd)`).
    pub fn logdet(&mut self, spd: Var, inverse: Var) -> Var {
        assert!(
            matches!(self.nodes[inverse.0].op, Op::SpdInverse(p) if p == spd),
            "logdet needs the inverse node of the same matrix"
        );
        let v = Matrix::scalar(self.nodes[inverse.0].logdet);
        self.push(v, Op::Logdet { spd, inverse }, &[spd])
    }

    /// Adjoints of all nodes with respect to the 1×1 output `out`.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.shape(out), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Matrix::scalar(1.0));
        for idx in (0..=out.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn acc(&self, grads: &mut [Option<Matrix>], v: Var, contribution: Matrix) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_scaled(&contribution, 1.0),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                if self.wants(*b) {
                    self.acc(grads, *b, g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.acc(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.wants(*b) {
                    self.acc(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::AddRow(m, r) => {
                self.acc(grads, *m, g.clone());
                if self.wants(*r) {
                    self.acc(grads, *r, col_sums(g));
                }
            }
            Op::MulRow(m, r) => {
                if self.wants(*m) {
                    self.acc(grads, *m, broadcast_row(g, self.value(*r), |x, y| x * y));
                }
                if self.wants(*r) {
                    self.acc(grads, *r, col_sums(&g.zip_map(self.value(*m), |x, y| x * y)));
                }
            }
            Op::AddCol(m, c) => {
                self.acc(grads, *m, g.clone());
                if self.wants(*c) {
                    self.acc(grads, *c, row_sums(g));
                }
            }
            Op::MulCol(m, c) => {
                if self.wants(*m) {
                    self.acc(grads, *m, broadcast_col(g, self.value(*c), |x, y| x * y));
                }
                if self.wants(*c) {
                    self.acc(grads, *c, row_sums(&g.zip_map(self.value(*m), |x, y| x * y)));
                }
            }
            Op::MulScalar(m, s) => {
                if self.wants(*m) {
                    let sv = self.scalar(*s);
                    self.acc(grads, *m, g.map(|x| x * sv));
                }
                if self.wants(*s) {
                    let dot: f64 = g
                        .as_slice()
                        .iter()
                        .zip(self.value(*m).as_slice())
                        .map(|(x, y)| x * y)
                        .sum();
                    self.acc(grads, *s, Matrix::scalar(dot));
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, g.map(|x| x * c)),
            Op::AddConst(a) => self.acc(grads, *a, g.clone()),
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let ga = if *ta {
                        bv.matmul_t(*tb, g, true)
                    } else {
                        g.matmul_t(false, bv, !*tb)
                    };
                    self.acc(grads, *a, ga);
                }
                if self.wants(*b) {
                    let gb = if *tb {
                        g.matmul_t(true, av, *ta)
                    } else {
                        av.matmul_t(!*ta, g, false)
                    };
                    self.acc(grads, *b, gb);
                }
            }
            Op::Sigmoid(a) => self.acc(grads, *a, g.zip_map(y, |gi, s| gi * s * (1.0 - s))),
            Op::Softplus(a) => {
                self.acc(grads, *a, g.zip_map(self.value(*a), |gi, x| gi * sigmoid(x)))
            }
            Op::Exp(a) => self.acc(grads, *a, g.zip_map(y, |gi, e| gi * e)),
            Op::Log(a) => self.acc(grads, *a, g.zip_map(self.value(*a), |gi, x| gi / x)),
            Op::Sin(a) => {
                self.acc(grads, *a, g.zip_map(self.value(*a), |gi, x| gi * x.cos()))
            }
            Op::Cos(a) => {
                self.acc(grads, *a, g.zip_map(self.value(*a), |gi, x| -gi * x.sin()))
            }
            Op::Square(a) => {
                self.acc(grads, *a, g.zip_map(self.value(*a), |gi, x| 2.0 * gi * x))
            }
            Op::SqrtFloor(a, floor) => {
                let x = self.value(*a);
                let mut out = Matrix::zeros(x.rows(), x.cols());
                for ((o, &gi), (&xi, &yi)) in out
                    .as_mut_slice()
                    .iter_mut()
                    .zip(g.as_slice())
                    .zip(x.as_slice().iter().zip(y.as_slice()))
                {
                    if xi > *floor {
                        *o = 0.5 * gi / yi;
                    }
                }
                self.acc(grads, *a, out);
            }
            Op::Sum(a) => {
                let (r, c) = self.shape(*a);
                self.acc(grads, *a, Matrix::filled(r, c, g.item()));
            }
            Op::RowSum(a) => {
                let (r, c) = self.shape(*a);
                self.acc(grads, *a, Matrix::from_fn(r, c, |i, _| g[(i, 0)]));
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.shape(*a);
                let mut out = Matrix::zeros(r, c);
                for i in 0..r {
                    out.row_mut(i)[*start..*start + g.cols()].copy_from_slice(g.row(i));
                }
                self.acc(grads, *a, out);
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.shape(*a);
                let mut out = Matrix::zeros(r, c);
                out.as_mut_slice()[start * c..(start + g.rows()) * c].copy_from_slice(g.as_slice());
                self.acc(grads, *a, out);
            }
            Op::GatherRows(a, idx) => {
                let (r, c) = self.shape(*a);
                let mut out = Matrix::zeros(r, c);
                for (i, &src) in idx.iter().enumerate() {
                    for (o, gi) in out.row_mut(src).iter_mut().zip(g.row(i)) {
                        *o += gi;
                    }
                }
                self.acc(grads, *a, out);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.wants(p) {
                        self.acc(grads, p, g.slice_cols(off, w));
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = self.shape(p).0;
                    if self.wants(p) {
                        self.acc(grads, p, g.slice_rows(off, h));
                    }
                    off += h;
                }
            }
            Op::Transpose(a) => self.acc(grads, *a, g.transpose()),
            Op::Rbf(a, b) => {
                // W = G ⊙ K; dA = W·B - diag(W·1)·A, dB = Wᵀ·A - diag(Wᵀ·1)·B
                let w = g.zip_map(y, |gi, k| gi * k);
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let mut ga = w.matmul(bv);
                    let rs = row_sums(&w);
                    for i in 0..ga.rows() {
                        let s = rs[(i, 0)];
                        for (x, ai) in ga.row_mut(i).iter_mut().zip(av.row(i)) {
                            *x -= s * ai;
                        }
                    }
                    self.acc(grads, *a, ga);
                }
                if self.wants(*b) {
                    let mut gb = w.matmul_t(true, av, false);
                    let cs = col_sums(&w);
                    for j in 0..gb.rows() {
                        let s = cs[(0, j)];
                        for (x, bj) in gb.row_mut(j).iter_mut().zip(bv.row(j)) {
                            *x -= s * bj;
                        }
                    }
                    self.acc(grads, *b, gb);
                }
            }
            Op::AddDiag(m, s) => {
                self.acc(grads, *m, g.clone());
                if self.wants(*s) {
                    self.acc(grads, *s, Matrix::scalar(g.trace()));
                }
            }
            Op::SpdInverse(a) => {
                // d(A⁻¹) = -A⁻¹ dA A⁻¹, so the adjoint is -A⁻ᵀ G A⁻ᵀ.
                let tmp = y.matmul_t(true, g, false);
                let mut ga = tmp.matmul_t(false, y, true);
                ga.scale_in_place(-1.0);
                self.acc(grads, *a, ga);
            }
            Op::Logdet { spd, inverse } => {
                let inv = self.value(*inverse);
                let mut ga = inv.transpose();
                ga.scale_in_place(g.item());
                self.acc(grads, *spd, ga);
            }
        }
    }
}

fn broadcast_row(m: &Matrix, r: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    assert_eq!(r.rows(), 1, "row operand must be 1×c");
    assert_eq!(m.cols(), r.cols(), "row broadcast width mismatch");
    let rv = r.as_slice();
    let mut out = m.clone();
    for i in 0..out.rows() {
        for (x, &y) in out.row_mut(i).iter_mut().zip(rv) {
            *x = f(*x, y);
        }
    }
    out
}

fn broadcast_col(m: &Matrix, c: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    assert_eq!(c.cols(), 1, "column operand must be r×1");
    assert_eq!(m.rows(), c.rows(), "column broadcast height mismatch");
    let mut out = m.clone();
    for i in 0..out.rows() {
        let y = c[(i, 0)];
        for x in out.row_mut(i) {
            *x = f(*x, y);
        }
    }
    out
}

fn col_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, m.cols());
    for i in 0..m.rows() {
        for (o, x) in out.as_mut_slice().iter_mut().zip(m.row(i)) {
            *o += x;
        }
    }
    out
}

fn row_sums(m: &Matrix) -> Matrix {
    Matrix::from_fn(m.rows(), 1, |i, _| m.row(i).iter().sum())
}

/// Squared distances beyond this give kernel values below 1e-80, which are
/// stored as exact zeros so that downstream products stay clear of
/// subnormal floats.
const RBF_SQDIST_CUTOFF: f64 = 368.0;

/// `exp(-½ |a_i - b_j|²)` for all row pairs.
pub fn rbf_matrix(a: &Matrix, b: &Matrix) -> Matrix {
    let d = a.cols();
    let mut out = Matrix::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let ai = a.row(i);
        let orow = out.row_mut(i);
        for (j, o) in orow.iter_mut().enumerate() {
            let bj = &b.as_slice()[j * d..(j + 1) * d];
            let mut s = 0.0;
            for k in 0..d {
                let diff = ai[k] - bj[k];
                s += diff * diff;
            }
            *o = if s > RBF_SQDIST_CUTOFF { 0.0 } else { (-0.5 * s).exp() };
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check(build: impl Fn(&mut Tape, Var) -> Var, x0: Matrix) {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let out = build(&mut tape, x);
        let grads = tape.backward(out);
        let g = grads.get_or_zeros(x, x0.shape());
        let eps = 1e-6;
        for k in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.as_mut_slice()[k] += delta;
                let mut t = Tape::new();
                let v = t.constant(xp);
                let o = build(&mut t, v);
                t.scalar(o)
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let ad = g.as_slice()[k];
            assert!(
                (fd - ad).abs() <= 1e-6 * (1.0 + ad.abs()),
                "coordinate {k}: ad {ad} fd {fd}"
            );
        }
    }

    fn sample(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        Matrix::from_fn(rows, cols, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        fd_check(
            |t, x| {
                let s = t.sigmoid(x);
                let sp = t.softplus(s);
                let e = t.exp(sp);
                let l = t.log(e);
                let sq = t.square(l);
                let si = t.sin(sq);
                let c = t.cos(x);
                let m = t.mul(si, c);
                let r = t.sqrt_floor(sq, 1e-12);
                let m2 = t.add(m, r);
                t.sum(m2)
            },
            sample(3, 4, 1),
        );
    }

    #[test]
    fn broadcast_and_products_match_finite_differences() {
        let w = sample(4, 2, 2);
        let row = sample(1, 2, 3);
        let col = sample(3, 1, 4);
        fd_check(
            move |t, x| {
                let wv = t.leaf(w.clone());
                let rv = t.constant(row.clone());
                let cv = t.constant(col.clone());
                let p = t.matmul(x, wv);
                let p = t.add_row(p, rv);
                let p = t.mul_row(p, rv);
                let p = t.add_col(p, cv);
                let p = t.mul_col(p, cv);
                let q = t.matmul_tn(x, x);
                let q = t.matmul_nt(q, x);
                let qs = t.sum(q);
                let p = t.mul_scalar(p, qs);
                let pt = t.transpose(p);
                let rs = t.row_sum(pt);
                let sq = t.square(rs);
                t.sum(sq)
            },
            sample(3, 4, 5),
        );
    }

    #[test]
    fn structural_ops_match_finite_differences() {
        fd_check(
            |t, x| {
                let a = t.slice_cols(x, 1, 2);
                let b = t.slice_rows(x, 0, 2);
                let c = t.gather_rows(x, vec![2, 0, 2]);
                let cc = t.concat_cols(&[a, a]);
                let rr = t.concat_rows(&[b, c]);
                let s1 = t.square(cc);
                let s1 = t.sum(s1);
                let s2 = t.sin(rr);
                let s2 = t.sum(s2);
                let tot = t.mul(s1, s2);
                t.scale(tot, 0.7)
            },
            sample(3, 3, 6),
        );
    }

    #[test]
    fn rbf_and_spd_ops_match_finite_differences() {
        let b = sample(4, 3, 7);
        fd_check(
            move |t, x| {
                let bv = t.leaf(b.clone());
                let k = t.rbf(x, x);
                let kb = t.rbf(x, bv);
                let noise = t.constant(Matrix::scalar(0.3));
                let ks = t.add_diag(k, noise);
                let inv = t.spd_inverse(ks).unwrap();
                let ld = t.logdet(ks, inv);
                let q = t.matmul(inv, kb);
                let q = t.sum(q);
                t.add(q, ld)
            },
            sample(5, 3, 8),
        );
    }

    #[test]
    fn rbf_diagonal_is_exactly_one() {
        let a = sample(6, 3, 9);
        let k = rbf_matrix(&a, &a);
        for i in 0..6 {
            assert_eq!(k[(i, i)], 1.0);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(Matrix::scalar(2.0));
        let c = t.constant(Matrix::scalar(3.0));
        let y = t.mul(x, c);
        let g = t.backward(y);
        assert_eq!(g.get(x).unwrap().item(), 3.0);
        assert!(g.get(c).is_none());
    }
}
