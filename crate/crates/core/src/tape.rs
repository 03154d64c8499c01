//! Reverse-mode automatic differentiation over dense matrices.
//!
//! A [`Tape`] records every operation in evaluation order; [`Tape::backward`]
//! walks it in reverse and returns one gradient per node. Parameters enter the
//! tape as leaves tagged with a parameter index so their gradients can be
//! collected after the sweep.

use alloc::vec;
use alloc::vec::Vec;

use crate::math;
use crate::matrix::Matrix;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    AddCol(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    SumAll(Var),
    RowSums(Var),
    ColSums(Var),
    ConcatCols(Vec<Var>),
    Column(Var, usize),
    Reshape(Var),
    RepeatRows(Var, usize),
    TileRows(Var),
    SumRowGroups(Var, usize),
    SumRowsStrided(Var, usize),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Matrix, inv_std: Vec<f64> },
    PickLogSoftmax { scores: Var, groups: Vec<ChoiceGroup> },
}

/// One categorical choice among `candidates` (row indices of a column
/// vector of scores); `chosen` must be one of the candidates.
#[derive(Clone, Debug, PartialEq)]
pub struct ChoiceGroup {
    pub candidates: Vec<usize>,
    pub chosen: usize,
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Statistics produced by a batch-normalization node.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one backward sweep, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.shape(), (1, 1));
        m.as_slice()[0]
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf tracked as parameter `index`.
    pub fn param(&mut self, index: usize, value: Matrix) -> Var {
        self.push(value, Op::Param(index))
    }

    /// Parameter index of a node, if it is a parameter leaf.
    pub fn param_index(&self, v: Var) -> Option<usize> {
        match self.nodes[v.0].op {
            Op::Param(i) => Some(i),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_t(self.value(b));
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    /// Adds the `1 × c` row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let v = broadcast_row(self.value(a), self.value(r), |x, y| x + y);
        self.push(v, Op::AddRow(a, r))
    }

    /// Multiplies every row of `a` elementwise by the `1 × c` row `r`.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Var {
        let v = broadcast_row(self.value(a), self.value(r), |x, y| x * y);
        self.push(v, Op::MulRow(a, r))
    }

    /// Adds the `r × 1` column `c` to every column of `a`.
    pub fn add_col(&mut self, a: Var, c: Var) -> Var {
        let v = broadcast_col(self.value(a), self.value(c), |x, y| x + y);
        self.push(v, Op::AddCol(a, c))
    }

    /// Multiplies every column of `a` elementwise by the `r × 1` column `c`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Var {
        let v = broadcast_col(self.value(a), self.value(c), |x, y| x * y);
        self.push(v, Op::MulCol(a, c))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x + k);
        self.push(v, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(math::sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(math::exp);
        self.push(v, Op::Exp(a))
    }

    /// Natural logarithm with inputs floored at [`math::PROB_FLOOR`].
    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(math::ln_floor);
        self.push(v, Op::Ln(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for r in 0..x.rows() {
            let row = v.row_mut(r);
            let lse = math::logsumexp(row.iter().copied());
            for y in row.iter_mut() {
                *y -= lse;
            }
        }
        self.push(v, Op::LogSoftmaxRows(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Matrix::filled(1, 1, s), Op::SumAll(a))
    }

    /// `r × 1` vector of row sums.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Matrix::from_fn(x.rows(), 1, |i, _| x.row(i).iter().sum());
        self.push(v, Op::RowSums(a))
    }

    /// `1 × c` vector of column sums.
    pub fn col_sums(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = Matrix::zeros(1, x.cols());
        for row in x.iter_rows() {
            for (o, y) in v.as_mut_slice().iter_mut().zip(row) {
                *o += y;
            }
        }
        self.push(v, Op::ColSums(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p);
                assert_eq!(src.rows(), rows, "concat_cols row mismatch");
                let w = src.cols();
                v.row_mut(i)[off..off + w].copy_from_slice(src.row(i));
                off += w;
            }
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Column `k` of `a` as an `r × 1` vector.
    pub fn column(&mut self, a: Var, k: usize) -> Var {
        let x = self.value(a);
        let v = Matrix::from_fn(x.rows(), 1, |i, _| x[(i, k)]);
        self.push(v, Op::Column(a, k))
    }

    /// Reinterprets the row-major data of `a` as `rows × cols`.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = Matrix::from_vec(rows, cols, self.value(a).as_slice().to_vec()).expect("reshape size mismatch");
        self.push(v, Op::Reshape(a))
    }

    /// Repeats each row `k` times consecutively (`r·k × c`).
    pub fn repeat_rows(&mut self, a: Var, k: usize) -> Var {
        let x = self.value(a);
        let mut v = Matrix::zeros(x.rows() * k, x.cols());
        for i in 0..x.rows() {
            for r in 0..k {
                v.row_mut(i * k + r).copy_from_slice(x.row(i));
            }
        }
        self.push(v, Op::RepeatRows(a, k))
    }

    /// Stacks `k` copies of `a` vertically (`k·r × c`).
    pub fn tile_rows(&mut self, a: Var, k: usize) -> Var {
        let x = self.value(a);
        let mut data = Vec::with_capacity(x.len() * k);
        for _ in 0..k {
            data.extend_from_slice(x.as_slice());
        }
        let v = Matrix::from_vec(x.rows() * k, x.cols(), data).expect("tile");
        self.push(v, Op::TileRows(a))
    }

    /// Sums consecutive groups of `k` rows (adjoint of [`Tape::repeat_rows`]).
    pub fn sum_row_groups(&mut self, a: Var, k: usize) -> Var {
        let v = sum_row_groups(self.value(a), k);
        self.push(v, Op::SumRowGroups(a, k))
    }

    /// `out[j] = Σ_i a[i·k + j]` (adjoint of [`Tape::tile_rows`]).
    pub fn sum_rows_strided(&mut self, a: Var, k: usize) -> Var {
        let v = sum_rows_strided(self.value(a), k);
        self.push(v, Op::SumRowsStrided(a, k))
    }

    /// Batch normalization over the rows of `x` with learned `gamma`, `beta`
    /// (`1 × c`). Returns the output and the batch statistics.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> (Var, BatchStats) {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        let mut mean = vec![0.0; c];
        for row in xv.iter_rows() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for row in xv.iter_rows() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        let inv_std: Vec<f64> = var.iter().map(|s| 1.0 / math::sqrt(s + BN_EPS)).collect();
        let mut xhat = xv.clone();
        for i in 0..n {
            for (j, y) in xhat.row_mut(i).iter_mut().enumerate() {
                *y = (*y - mean[j]) * inv_std[j];
            }
        }
        let g = self.value(gamma);
        let mut out = broadcast_row(&xhat, g, |a, b| a * b);
        let b = self.value(beta);
        for i in 0..n {
            for (y, bj) in out.row_mut(i).iter_mut().zip(b.as_slice()) {
                *y += bj;
            }
        }
        let out = self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std });
        (out, BatchStats { mean, var })
    }

    /// Sum of `ln softmax(scores[candidates])[chosen]` over all groups, where
    /// `scores` is an `n × 1` column.
    pub fn pick_log_softmax(&mut self, scores: Var, groups: Vec<ChoiceGroup>) -> Var {
        let s = self.value(scores).as_slice();
        let mut total = 0.0;
        for g in &groups {
            let lse = math::logsumexp(g.candidates.iter().map(|&c| s[c]));
            total += s[g.chosen] - lse;
        }
        self.push(Matrix::filled(1, 1, total), Op::PickLogSoftmax { scores, groups })
    }

    /// Reverse sweep from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    /// Gradients of parameter leaves, accumulated by parameter index into `out`.
    pub fn accumulate_param_grads(&self, grads: &Gradients, scale: f64, out: &mut [Matrix]) {
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(i), Some(g)) = (&node.op, g) {
                let dst = out[*i].as_mut_slice();
                for (d, s) in dst.iter_mut().zip(g.as_slice()) {
                    *d += scale * s;
                }
            }
        }
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let ga = g.matmul_t(val(*b));
                let gb = val(*a).t_matmul(g);
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::MatMulT(a, b) => {
                let ga = g.matmul(val(*b));
                let gb = g.t_matmul(val(*a));
                acc(grads, *a, ga);
                acc(grads, *b, gb);
            }
            Op::Transpose(a) => acc(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                acc(grads, *a, g.zip_map(val(*b), |x, y| x * y));
                acc(grads, *b, g.zip_map(val(*a), |x, y| x * y));
            }
            Op::AddRow(a, r) => {
                acc(grads, *a, g.clone());
                acc(grads, *r, col_sums(g));
            }
            Op::MulRow(a, r) => {
                acc(grads, *a, broadcast_row(g, val(*r), |x, y| x * y));
                acc(grads, *r, col_sums(&g.zip_map(val(*a), |x, y| x * y)));
            }
            Op::AddCol(a, c) => {
                acc(grads, *a, g.clone());
                acc(grads, *c, row_sums(g));
            }
            Op::MulCol(a, c) => {
                acc(grads, *a, broadcast_col(g, val(*c), |x, y| x * y));
                acc(grads, *c, row_sums(&g.zip_map(val(*a), |x, y| x * y)));
            }
            Op::Scale(a, k) => acc(grads, *a, g.map(|x| x * k)),
            Op::AddScalar(a) => acc(grads, *a, g.clone()),
            Op::Relu(a) => acc(grads, *a, g.zip_map(val(*a), |d, x| if x > 0.0 { d } else { 0.0 })),
            Op::Sigmoid(a) => acc(grads, *a, g.zip_map(&node.value, |d, y| d * y * (1.0 - y))),
            Op::Exp(a) => acc(grads, *a, g.zip_map(&node.value, |d, y| d * y)),
            Op::Ln(a) => acc(
                grads,
                *a,
                g.zip_map(val(*a), |d, x| if x > math::PROB_FLOOR { d / x } else { 0.0 }),
            ),
            Op::Square(a) => acc(grads, *a, g.zip_map(val(*a), |d, x| 2.0 * d * x)),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for (o, (yy, gg)) in ga.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = yy * (gg - dot);
                    }
                }
                acc(grads, *a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for i in 0..y.rows() {
                    let (yr, gr) = (y.row(i), g.row(i));
                    let sum: f64 = gr.iter().sum();
                    for (o, (yy, gg)) in ga.row_mut(i).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = gg - math::exp(*yy) * sum;
                    }
                }
                acc(grads, *a, ga);
            }
            Op::SumAll(a) => {
                let (r, c) = val(*a).shape();
                acc(grads, *a, Matrix::filled(r, c, g.as_slice()[0]));
            }
            Op::RowSums(a) => {
                let (r, c) = val(*a).shape();
                acc(grads, *a, Matrix::from_fn(r, c, |i, _| g[(i, 0)]));
            }
            Op::ColSums(a) => {
                let (r, c) = val(*a).shape();
                acc(grads, *a, Matrix::from_fn(r, c, |_, j| g[(0, j)]));
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, w) = val(p).shape();
                    let o = off;
                    acc(grads, p, Matrix::from_fn(r, w, |i, j| g[(i, o + j)]));
                    off += w;
                }
            }
            Op::Column(a, k) => {
                let (r, c) = val(*a).shape();
                let k = *k;
                acc(grads, *a, Matrix::from_fn(r, c, |i, j| if j == k { g[(i, 0)] } else { 0.0 }));
            }
            Op::Reshape(a) => {
                let (r, c) = val(*a).shape();
                acc(grads, *a, Matrix::from_vec(r, c, g.as_slice().to_vec()).expect("reshape"));
            }
            Op::RepeatRows(a, k) => acc(grads, *a, sum_row_groups(g, *k)),
            Op::TileRows(a) => acc(grads, *a, sum_rows_strided(g, val(*a).rows())),
            Op::SumRowGroups(a, k) => {
                let (r, c) = val(*a).shape();
                let k = *k;
                acc(grads, *a, Matrix::from_fn(r, c, |i, j| g[(i / k, j)]));
            }
            Op::SumRowsStrided(a, k) => {
                let (r, c) = val(*a).shape();
                let k = *k;
                acc(grads, *a, Matrix::from_fn(r, c, |i, j| g[(i % k, j)]));
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let (n, c) = xhat.shape();
                let gam = val(*gamma);
                acc(grads, *beta, col_sums(g));
                acc(grads, *gamma, col_sums(&g.zip_map(xhat, |a, b| a * b)));
                let dxhat = broadcast_row(g, gam, |a, b| a * b);
                let sum_d = col_sums(&dxhat);
                let sum_dx = col_sums(&dxhat.zip_map(xhat, |a, b| a * b));
                let nf = n as f64;
                let mut gx = Matrix::zeros(n, c);
                for i in 0..n {
                    for j in 0..c {
                        gx[(i, j)] = inv_std[j] / nf
                            * (nf * dxhat[(i, j)] - sum_d[(0, j)] - xhat[(i, j)] * sum_dx[(0, j)]);
                    }
                }
                acc(grads, *x, gx);
            }
            Op::PickLogSoftmax { scores, groups } => {
                let s = val(*scores);
                let gs = g.as_slice()[0];
                let mut gv = Matrix::zeros(s.rows(), s.cols());
                for grp in groups {
                    let lse = math::logsumexp(grp.candidates.iter().map(|&c| s.as_slice()[c]));
                    for &c in &grp.candidates {
                        gv.as_mut_slice()[c] -= gs * math::exp(s.as_slice()[c] - lse);
                    }
                    gv.as_mut_slice()[grp.chosen] += gs;
                }
                acc(grads, *scores, gv);
            }
        }
    }
}

fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn broadcast_row(a: &Matrix, r: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    assert_eq!(r.shape(), (1, a.cols()), "row broadcast shape mismatch");
    let mut out = a.clone();
    let rs = r.as_slice();
    for i in 0..a.rows() {
        for (y, &b) in out.row_mut(i).iter_mut().zip(rs) {
            *y = f(*y, b);
        }
    }
    out
}

fn broadcast_col(a: &Matrix, c: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    assert_eq!(c.shape(), (a.rows(), 1), "column broadcast shape mismatch");
    let mut out = a.clone();
    for i in 0..a.rows() {
        let ci = c.as_slice()[i];
        for y in out.row_mut(i) {
            *y = f(*y, ci);
        }
    }
    out
}

fn col_sums(a: &Matrix) -> Matrix {
    let mut v = Matrix::zeros(1, a.cols());
    for row in a.iter_rows() {
        for (o, y) in v.as_mut_slice().iter_mut().zip(row) {
            *o += y;
        }
    }
    v
}

fn row_sums(a: &Matrix) -> Matrix {
    Matrix::from_fn(a.rows(), 1, |i, _| a.row(i).iter().sum())
}

fn sum_row_groups(a: &Matrix, k: usize) -> Matrix {
    let (r, c) = a.shape();
    assert_eq!(r % k, 0, "row count not divisible by group size");
    let mut out = Matrix::zeros(r / k, c);
    for i in 0..r {
        let src = a.row(i);
        for (o, s) in out.row_mut(i / k).iter_mut().zip(src) {
            *o += s;
        }
    }
    out
}

fn sum_rows_strided(a: &Matrix, k: usize) -> Matrix {
    let (r, c) = a.shape();
    assert_eq!(r % k, 0, "row count not divisible by stride");
    let mut out = Matrix::zeros(k, c);
    for i in 0..r {
        let src = a.row(i);
        for (o, s) in out.row_mut(i % k).iter_mut().zip(src) {
            *o += s;
        }
    }
    out
}

/// Row-wise softmax of a plain matrix.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut v = x.clone();
    for r in 0..x.rows() {
        let row = v.row_mut(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for y in row.iter_mut() {
            *y = math::exp(*y - m);
            z += *y;
        }
        for y in row.iter_mut() {
            *y /= z;
        }
    }
    v
}
