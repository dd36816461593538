use std::sync::Arc;

use super::tensor::{dot, Tensor};
use super::NumericsError;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulScalar(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    DivCol(Var, Var),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Exp(Var),
    Log(Var),
    Sin(Var),
    Cos(Var),
    Abs(Var),
    MaxConst(Var, f64),
    RowNorm(Var),
    Sum(Var),
    RowSums(Var),
    ColSums(Var),
    RowMax(Var, Vec<usize>),
    SoftmaxRows(Var),
    LogSumExpRows(Var, Option<Arc<[bool]>>),
    SelectRows(Var, Vec<usize>),
    SelectCols(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    PairwiseSqDist(Var, Var),
    PairwiseDist(Var, Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Reverse-mode gradient tape.
///
/// Values are computed eagerly as nodes are pushed; [`Tape::gradients`]
/// walks the nodes in reverse insertion order, which is a topological
/// order because every node only references earlier ones.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    branches: Option<Vec<i64>>,
}

/// Adjoints produced by a backward pass.
#[derive(Clone, Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
    shapes: Vec<[usize; 2]>,
}

impl Gradients {
    /// Adjoint of `var`; zeros if the output does not depend on it.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.adjoints[var.0] {
            Some(t) => t.clone(),
            None => {
                let [r, c] = self.shapes[var.0];
                Tensor::zeros(r, c)
            }
        }
    }
}

fn shape_err(op: &'static str, detail: String) -> NumericsError {
    NumericsError::Shape { op, detail }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that records the branch taken by every non-smooth primitive.
    /// Used by the finite-difference checker to detect kinks.
    pub fn with_branch_log() -> Self {
        Self { nodes: Vec::new(), branches: Some(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn branch_log(&self) -> Option<&[i64]> {
        self.branches.as_deref()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn log_branch(&mut self, b: i64) {
        if let Some(log) = &mut self.branches {
            log.push(b);
        }
    }

    /// Records an input or constant.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| k * x);
        self.push(v, Op::Scale(a, k))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x + k);
        self.push(v, Op::AddConst(a))
    }

    /// `a * s` for a `1×1` tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var, NumericsError> {
        if self.shape(s) != [1, 1] {
            return Err(shape_err("mul_scalar", format!("scalar operand {:?}", self.shape(s))));
        }
        let k = self.value(s).item();
        let v = self.value(a).map(|x| k * x);
        Ok(self.push(v, Op::MulScalar(a, s)))
    }

    /// Adds the `1×n` row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var, NumericsError> {
        let [m, n] = self.shape(a);
        if self.shape(r) != [1, n] {
            return Err(shape_err("add_row", format!("{:?} + row {:?}", [m, n], self.shape(r))));
        }
        let mut v = self.value(a).clone();
        let row = self.value(r).data().to_vec();
        for i in 0..m {
            for (x, y) in v.row_slice_mut(i).iter_mut().zip(&row) {
                *x += y;
            }
        }
        Ok(self.push(v, Op::AddRow(a, r)))
    }

    /// Multiplies row `i` of `a` by `c[i]` for an `m×1` column `c`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var, NumericsError> {
        let [m, n] = self.shape(a);
        if self.shape(c) != [m, 1] {
            return Err(shape_err("mul_col", format!("{:?} * col {:?}", [m, n], self.shape(c))));
        }
        let mut v = self.value(a).clone();
        for i in 0..m {
            let k = self.value(c).get(i, 0);
            v.row_slice_mut(i).iter_mut().for_each(|x| *x *= k);
        }
        Ok(self.push(v, Op::MulCol(a, c)))
    }

    /// Divides row `i` of `a` by `c[i]` for an `m×1` column `c`.
    pub fn div_col(&mut self, a: Var, c: Var) -> Result<Var, NumericsError> {
        let [m, n] = self.shape(a);
        if self.shape(c) != [m, 1] {
            return Err(shape_err("div_col", format!("{:?} / col {:?}", [m, n], self.shape(c))));
        }
        let mut v = self.value(a).clone();
        for i in 0..m {
            let k = self.value(c).get(i, 0);
            v.row_slice_mut(i).iter_mut().for_each(|x| *x /= k);
        }
        Ok(self.push(v, Op::DivCol(a, c)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = self.value(a).matmul_t(self.value(b))?;
        Ok(self.push(v, Op::MatMulT(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::sin);
        self.push(v, Op::Sin(a))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::cos);
        self.push(v, Op::Cos(a))
    }

    /// Elementwise absolute value; subgradient 0 at 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        if self.branches.is_some() {
            let signs: Vec<i64> = self.value(a).data().iter().map(|&x| sign(x)).collect();
            signs.into_iter().for_each(|s| self.log_branch(s));
        }
        self.push(v, Op::Abs(a))
    }

    /// Elementwise `max(a, c)`; the gradient passes only where `a > c`.
    pub fn max_const(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x.max(c));
        if self.branches.is_some() {
            let signs: Vec<i64> = self.value(a).data().iter().map(|&x| sign(x - c)).collect();
            signs.into_iter().for_each(|s| self.log_branch(s));
        }
        self.push(v, Op::MaxConst(a, c))
    }

    /// Euclidean norm of each row (`m×n → m×1`).
    pub fn row_norm(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let norms: Vec<f64> = (0..t.rows()).map(|i| dot(t.row_slice(i), t.row_slice(i)).sqrt()).collect();
        let v = Tensor::from_vec(norms.len(), 1, norms).expect("column");
        self.push(v, Op::RowNorm(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    /// Sum of each row (`m×n → m×1`).
    pub fn row_sums(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: Vec<f64> = (0..t.rows()).map(|i| t.row_slice(i).iter().sum()).collect();
        let v = Tensor::from_vec(s.len(), 1, s).expect("column");
        self.push(v, Op::RowSums(a))
    }

    /// Sum of each column (`m×n → 1×n`).
    pub fn col_sums(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut s = vec![0.0; t.cols()];
        for i in 0..t.rows() {
            for (acc, x) in s.iter_mut().zip(t.row_slice(i)) {
                *acc += x;
            }
        }
        let v = Tensor::row(&s);
        self.push(v, Op::ColSums(a))
    }

    /// Maximum of each row (`m×n → m×1`); ties resolve to the lowest column
    /// and receive the whole gradient.
    pub fn row_max(&mut self, a: Var) -> Result<Var, NumericsError> {
        let t = self.value(a);
        if t.cols() == 0 {
            return Err(shape_err("row_max", "zero columns".into()));
        }
        let mut arg = Vec::with_capacity(t.rows());
        let mut vals = Vec::with_capacity(t.rows());
        let mut tie_flags = Vec::new();
        for i in 0..t.rows() {
            let row = t.row_slice(i);
            let (mut best, mut bi, mut tie) = (row[0], 0usize, false);
            for (j, &x) in row.iter().enumerate().skip(1) {
                if x > best {
                    best = x;
                    bi = j;
                    tie = false;
                } else if x == best {
                    tie = true;
                }
            }
            arg.push(bi);
            vals.push(best);
            tie_flags.push(tie);
        }
        if self.branches.is_some() {
            for (&j, &tie) in arg.iter().zip(&tie_flags) {
                // A tie is a kink: encode it so any perturbation differs.
                self.log_branch(if tie { -1 - j as i64 } else { j as i64 });
            }
        }
        let v = Tensor::from_vec(vals.len(), 1, vals).expect("column");
        Ok(self.push(v, Op::RowMax(a, arg)))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            softmax_in_place(v.row_slice_mut(i));
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Row-wise `log Σ exp`, optionally restricted to entries where the
    /// row-major `include` mask is true (`m×n → m×1`).
    pub fn logsumexp_rows(&mut self, a: Var, include: Option<Arc<[bool]>>) -> Result<Var, NumericsError> {
        let t = self.value(a);
        if let Some(mask) = &include {
            if mask.len() != t.len() {
                return Err(shape_err("logsumexp_rows", format!("mask of {} for {:?}", mask.len(), t.shape())));
            }
        }
        let n = t.cols();
        let mut out = Vec::with_capacity(t.rows());
        for i in 0..t.rows() {
            let row = t.row_slice(i);
            let keep = |j: usize| include.as_ref().map_or(true, |m| m[i * n + j]);
            let max = (0..n).filter(|&j| keep(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(shape_err("logsumexp_rows", format!("row {i} has no included entries")));
            }
            let s: f64 = (0..n).filter(|&j| keep(j)).map(|j| (row[j] - max).exp()).sum();
            out.push(max + s.ln());
        }
        let v = Tensor::from_vec(out.len(), 1, out).expect("column");
        Ok(self.push(v, Op::LogSumExpRows(a, include)))
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= t.rows()) {
            return Err(shape_err("select_rows", format!("row {bad} of {}", t.rows())));
        }
        let mut v = Tensor::zeros(idx.len(), t.cols());
        for (k, &i) in idx.iter().enumerate() {
            v.row_slice_mut(k).copy_from_slice(t.row_slice(i));
        }
        Ok(self.push(v, Op::SelectRows(a, idx.to_vec())))
    }

    pub fn select_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var, NumericsError> {
        let t = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&j| j >= t.cols()) {
            return Err(shape_err("select_cols", format!("column {bad} of {}", t.cols())));
        }
        let mut v = Tensor::zeros(t.rows(), idx.len());
        for i in 0..t.rows() {
            for (k, &j) in idx.iter().enumerate() {
                v.set(i, k, t.get(i, j));
            }
        }
        Ok(self.push(v, Op::SelectCols(a, idx.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let rows = parts.first().map(|&p| self.shape(p)[0]).ok_or_else(|| shape_err("concat_cols", "no operands".into()))?;
        if let Some(&p) = parts.iter().find(|&&p| self.shape(p)[0] != rows) {
            return Err(shape_err("concat_cols", format!("{} rows vs {rows}", self.shape(p)[0])));
        }
        let cols: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut v = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row_slice(i);
                v.row_slice_mut(i)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        Ok(self.push(v, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let cols = parts.first().map(|&p| self.shape(p)[1]).ok_or_else(|| shape_err("concat_rows", "no operands".into()))?;
        if let Some(&p) = parts.iter().find(|&&p| self.shape(p)[1] != cols) {
            return Err(shape_err("concat_rows", format!("{} cols vs {cols}", self.shape(p)[1])));
        }
        let mut data = Vec::new();
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let v = Tensor::from_vec(data.len() / cols.max(1), cols, data)?;
        Ok(self.push(v, Op::ConcatRows(parts.to_vec())))
    }

    /// Squared Euclidean distances between the rows of `a` (`m×k`) and the
    /// rows of `b` (`n×k`), as an `m×n` matrix.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = pairwise(self.value(a), self.value(b), "pairwise_sq_dist", false)?;
        Ok(self.push(v, Op::PairwiseSqDist(a, b)))
    }

    /// Euclidean distances between rows; the gradient at zero distance is 0.
    pub fn pairwise_dist(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = pairwise(self.value(a), self.value(b), "pairwise_dist", true)?;
        Ok(self.push(v, Op::PairwiseDist(a, b)))
    }

    /// Backward pass seeded with `adjoint` at `output`.
    pub fn gradients(&self, output: Var, adjoint: &Tensor) -> Result<Gradients, NumericsError> {
        self.gradients_multi(&[(output, adjoint)])
    }

    /// Backward pass seeded at several outputs at once; the adjoints add.
    pub fn gradients_multi(&self, seeds: &[(Var, &Tensor)]) -> Result<Gradients, NumericsError> {
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut last = 0;
        for &(v, seed) in seeds {
            if v.0 >= self.nodes.len() {
                return Err(shape_err("backward", format!("node {} not on tape", v.0)));
            }
            if seed.shape() != self.shape(v) {
                return Err(shape_err("backward", format!("adjoint {:?} for output {:?}", seed.shape(), self.shape(v))));
            }
            accumulate(&mut adj[v.0], seed.clone());
            last = last.max(v.0);
        }
        for i in (0..=last).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj)?;
            adj[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients { adjoints: adj, shapes })
    }

    fn propagate(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<(), NumericsError> {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(&mut adj[a.0], g.clone());
                accumulate(&mut adj[b.0], g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(&mut adj[a.0], g.clone());
                accumulate(&mut adj[b.0], g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                accumulate(&mut adj[a.0], g.zip_map(val(*b), |x, y| x * y));
                accumulate(&mut adj[b.0], g.zip_map(val(*a), |x, y| x * y));
            }
            Op::Scale(a, k) => accumulate(&mut adj[a.0], g.map(|x| k * x)),
            Op::AddConst(a) => accumulate(&mut adj[a.0], g.clone()),
            Op::MulScalar(a, s) => {
                let k = val(*s).item();
                accumulate(&mut adj[a.0], g.map(|x| k * x));
                let gs = dot(g.data(), val(*a).data());
                accumulate(&mut adj[s.0], Tensor::scalar(gs));
            }
            Op::AddRow(a, r) => {
                accumulate(&mut adj[a.0], g.clone());
                let mut gr = vec![0.0; g.cols()];
                for k in 0..g.rows() {
                    for (acc, x) in gr.iter_mut().zip(g.row_slice(k)) {
                        *acc += x;
                    }
                }
                accumulate(&mut adj[r.0], Tensor::row(&gr));
            }
            Op::MulCol(a, c) => {
                let (av, cv) = (val(*a), val(*c));
                let mut ga = g.clone();
                let mut gc = Tensor::zeros(cv.rows(), 1);
                for k in 0..g.rows() {
                    let ck = cv.get(k, 0);
                    ga.row_slice_mut(k).iter_mut().for_each(|x| *x *= ck);
                    gc.set(k, 0, dot(g.row_slice(k), av.row_slice(k)));
                }
                accumulate(&mut adj[a.0], ga);
                accumulate(&mut adj[c.0], gc);
            }
            Op::DivCol(a, c) => {
                let (av, cv) = (val(*a), val(*c));
                let mut ga = g.clone();
                let mut gc = Tensor::zeros(cv.rows(), 1);
                for k in 0..g.rows() {
                    let ck = cv.get(k, 0);
                    ga.row_slice_mut(k).iter_mut().for_each(|x| *x /= ck);
                    gc.set(k, 0, -dot(g.row_slice(k), av.row_slice(k)) / (ck * ck));
                }
                accumulate(&mut adj[a.0], ga);
                accumulate(&mut adj[c.0], gc);
            }
            Op::MatMul(a, b) => {
                accumulate(&mut adj[a.0], g.matmul_t(val(*b))?);
                accumulate(&mut adj[b.0], val(*a).t_matmul(g)?);
            }
            Op::MatMulT(a, b) => {
                // y = a bᵀ: ga = g b, gb = gᵀ a
                accumulate(&mut adj[a.0], g.matmul(val(*b))?);
                accumulate(&mut adj[b.0], g.t_matmul(val(*a))?);
            }
            Op::Transpose(a) => accumulate(&mut adj[a.0], g.transpose()),
            Op::Exp(a) => accumulate(&mut adj[a.0], g.zip_map(y, |x, e| x * e)),
            Op::Log(a) => accumulate(&mut adj[a.0], g.zip_map(val(*a), |x, v| x / v)),
            Op::Sin(a) => accumulate(&mut adj[a.0], g.zip_map(val(*a), |x, v| x * v.cos())),
            Op::Cos(a) => accumulate(&mut adj[a.0], g.zip_map(val(*a), |x, v| -x * v.sin())),
            Op::Abs(a) => accumulate(&mut adj[a.0], g.zip_map(val(*a), |x, v| x * sign(v) as f64)),
            Op::MaxConst(a, c) => {
                accumulate(&mut adj[a.0], g.zip_map(val(*a), |x, v| if v > *c { x } else { 0.0 }))
            }
            Op::RowNorm(a) => {
                let av = val(*a);
                let mut ga = Tensor::zeros(av.rows(), av.cols());
                for k in 0..av.rows() {
                    let n = y.get(k, 0);
                    if n > 0.0 {
                        let s = g.get(k, 0) / n;
                        for (o, x) in ga.row_slice_mut(k).iter_mut().zip(av.row_slice(k)) {
                            *o = s * x;
                        }
                    }
                }
                accumulate(&mut adj[a.0], ga);
            }
            Op::Sum(a) => {
                let [r, c] = val(*a).shape();
                accumulate(&mut adj[a.0], Tensor::filled(r, c, g.item()));
            }
            Op::RowSums(a) => {
                let [r, c] = val(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for k in 0..r {
                    let s = g.get(k, 0);
                    ga.row_slice_mut(k).iter_mut().for_each(|x| *x = s);
                }
                accumulate(&mut adj[a.0], ga);
            }
            Op::ColSums(a) => {
                let [r, c] = val(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for k in 0..r {
                    ga.row_slice_mut(k).copy_from_slice(g.data());
                }
                accumulate(&mut adj[a.0], ga);
            }
            Op::RowMax(a, arg) => {
                let [r, c] = val(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for (k, &j) in arg.iter().enumerate() {
                    ga.set(k, j, g.get(k, 0));
                }
                accumulate(&mut adj[a.0], ga);
            }
            Op::SoftmaxRows(a) => {
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                for k in 0..y.rows() {
                    let (yr, gr) = (y.row_slice(k), g.row_slice(k));
                    let s = dot(yr, gr);
                    for ((o, &p), &q) in ga.row_slice_mut(k).iter_mut().zip(yr).zip(gr) {
                        *o = p * (q - s);
                    }
                }
                accumulate(&mut adj[a.0], ga);
            }
            Op::LogSumExpRows(a, include) => {
                let av = val(*a);
                let n = av.cols();
                let mut ga = Tensor::zeros(av.rows(), n);
                for k in 0..av.rows() {
                    let lse = y.get(k, 0);
                    let gk = g.get(k, 0);
                    for j in 0..n {
                        if include.as_ref().map_or(true, |m| m[k * n + j]) {
                            ga.set(k, j, gk * (av.get(k, j) - lse).exp());
                        }
                    }
                }
                accumulate(&mut adj[a.0], ga);
            }
            Op::SelectRows(a, idx) => {
                let [r, c] = val(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for (k, &src) in idx.iter().enumerate() {
                    for (o, x) in ga.row_slice_mut(src).iter_mut().zip(g.row_slice(k)) {
                        *o += x;
                    }
                }
                accumulate(&mut adj[a.0], ga);
            }
            Op::SelectCols(a, idx) => {
                let [r, c] = val(*a).shape();
                let mut ga = Tensor::zeros(r, c);
                for k in 0..r {
                    for (j, &src) in idx.iter().enumerate() {
                        let cur = ga.get(k, src);
                        ga.set(k, src, cur + g.get(k, j));
                    }
                }
                accumulate(&mut adj[a.0], ga);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let [r, c] = val(*p).shape();
                    let mut gp = Tensor::zeros(r, c);
                    for k in 0..r {
                        gp.row_slice_mut(k).copy_from_slice(&g.row_slice(k)[off..off + c]);
                    }
                    off += c;
                    accumulate(&mut adj[p.0], gp);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let [r, c] = val(*p).shape();
                    let gp = Tensor::from_vec(r, c, g.data()[off..off + r * c].to_vec())?;
                    off += r * c;
                    accumulate(&mut adj[p.0], gp);
                }
            }
            Op::PairwiseSqDist(a, b) | Op::PairwiseDist(a, b) => {
                let root = matches!(node.op, Op::PairwiseDist(..));
                let (av, bv) = (val(*a), val(*b));
                let k = av.cols();
                let mut ga = Tensor::zeros(av.rows(), k);
                let mut gb = Tensor::zeros(bv.rows(), k);
                for i in 0..av.rows() {
                    let ai = av.row_slice(i);
                    for j in 0..bv.rows() {
                        let w = g.get(i, j);
                        if w == 0.0 {
                            continue;
                        }
                        let coef = if root {
                            let d = y.get(i, j);
                            if d > 0.0 {
                                w / d
                            } else {
                                0.0
                            }
                        } else {
                            2.0 * w
                        };
                        let bj = bv.row_slice(j);
                        for t in 0..k {
                            let diff = coef * (ai[t] - bj[t]);
                            ga.data_mut()[i * k + t] += diff;
                            gb.data_mut()[j * k + t] -= diff;
                        }
                    }
                }
                accumulate(&mut adj[a.0], ga);
                accumulate(&mut adj[b.0], gb);
            }
        }
        Ok(())
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

fn sign(x: f64) -> i64 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

fn pairwise(a: &Tensor, b: &Tensor, op: &'static str, root: bool) -> Result<Tensor, NumericsError> {
    if a.cols() != b.cols() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let mut v = Tensor::zeros(a.rows(), b.rows());
    for i in 0..a.rows() {
        let ai = a.row_slice(i);
        let out = v.row_slice_mut(i);
        for (j, o) in out.iter_mut().enumerate() {
            let bj = b.row_slice(j);
            let d2: f64 = ai.iter().zip(bj).map(|(x, y)| (x - y) * (x - y)).sum();
            *o = if root { d2.sqrt() } else { d2 };
        }
    }
    Ok(v)
}

/// Numerically stable softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}
