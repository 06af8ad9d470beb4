//! Tape-based reverse-mode differentiation over dense row-major matrices.
//!
//! Every value on the tape is a 2-D [`Tensor`]. Operations append a node that
//! records its inputs; [`Tape::backward`] walks the nodes in reverse and
//! accumulates vector-Jacobian products. Linear operators whose adjoint is known
//! in closed form (e.g. STFT synthesis) enter through [`Tape::linear_map`].

use std::fmt;

/// Dense row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor[{}x{}]", self.rows, self.cols)
    }
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length");
        Self { rows, cols, data }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_vec(1, 1, vec![v])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        debug_assert_eq!(self.shape(), other.shape());
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.rows, "matmul inner dimensions");
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * m..(p + 1) * m];
                orow.iter_mut().zip(brow).for_each(|(o, b)| *o += a * b);
            }
        }
        Tensor::from_vec(n, m, out)
    }

    /// `selfᵀ · other`.
    fn t_matmul(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.rows, other.rows);
        let (k, n, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for p in 0..k {
            let arow = &self.data[p * n..(p + 1) * n];
            let brow = &other.data[p * m..(p + 1) * m];
            for (i, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                out[i * m..(i + 1) * m]
                    .iter_mut()
                    .zip(brow)
                    .for_each(|(o, b)| *o += a * b);
            }
        }
        Tensor::from_vec(n, m, out)
    }

    /// `self · otherᵀ`.
    fn matmul_t(&self, other: &Tensor) -> Tensor {
        assert_eq!(self.cols, other.cols);
        let (n, k, m) = (self.rows, self.cols, other.rows);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let arow = &self.data[i * k..(i + 1) * k];
            for j in 0..m {
                let brow = &other.data[j * k..(j + 1) * k];
                out[i * m + j] = arow.iter().zip(brow).map(|(a, b)| a * b).sum();
            }
        }
        Tensor::from_vec(n, m, out)
    }

    fn column_sums(&self) -> Tensor {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            out.iter_mut().zip(self.row(r)).for_each(|(o, v)| *o += v);
        }
        Tensor::from_vec(1, self.cols, out)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

type Adjoint = Box<dyn Fn(&Tensor) -> Tensor>;

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    SubRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Abs(Var),
    Square(Var),
    Powf(Var, f64),
    Ln(Var),
    Sum(Var),
    MeanRows(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    Linear(Var, Adjoint),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not influence the output.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.rows(), like.cols()))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shapes");
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shapes");
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    fn row_broadcast(&self, a: Var, row: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, rv) = (self.value(a), self.value(row));
        assert_eq!(rv.rows(), 1, "broadcast operand must be a single row");
        assert_eq!(av.cols(), rv.cols(), "broadcast width");
        let mut out = av.clone();
        for r in 0..out.rows() {
            out.row_mut(r)
                .iter_mut()
                .zip(rv.data())
                .for_each(|(o, b)| *o = f(*o, *b));
        }
        out
    }

    /// `a + row`, broadcasting the `1 × c` operand over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.row_broadcast(a, row, |x, y| x + y);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn sub_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.row_broadcast(a, row, |x, y| x - y);
        self.push(v, Op::SubRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.row_broadcast(a, row, |x, y| x * y);
        self.push(v, Op::MulRow(a, row))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(v, Op::Sigmoid(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        let v = self.value(a).map(|x| x.powf(p));
        self.push(v, Op::Powf(a, p))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Ln(a))
    }

    /// Sum of all entries, as a `1 × 1` tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(v, Op::Sum(a))
    }

    /// Column means, `1 × c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.rows() as f64;
        let v = av.column_sums().map(|x| x / n);
        self.push(v, Op::MeanRows(a))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let av = self.value(a);
        assert!(start <= end && end <= av.cols(), "slice_cols bounds");
        let v = Tensor::from_fn(av.rows(), end - start, |r, c| av.get(r, start + c));
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut v = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for p in parts {
                let pv = self.value(*p);
                assert_eq!(pv.rows(), rows, "concat_cols rows");
                v.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
                off += pv.cols();
            }
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Output row `i` is input row `indices[i]`; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let av = self.value(a);
        let mut v = Tensor::zeros(indices.len(), av.cols());
        for (i, &src) in indices.iter().enumerate() {
            v.row_mut(i).copy_from_slice(av.row(src));
        }
        self.push(v, Op::GatherRows(a, indices.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for p in parts {
            let pv = self.value(*p);
            assert_eq!(pv.cols(), cols, "concat_rows cols");
            data.extend_from_slice(pv.data());
        }
        let rows = data.len() / cols.max(1);
        self.push(Tensor::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    /// Records a linear operator `y = A x` by its precomputed output and adjoint `g ↦ Aᵀ g`.
    pub fn linear_map(&mut self, input: Var, output: Tensor, adjoint: impl Fn(&Tensor) -> Tensor + 'static) -> Var {
        self.push(output, Op::Linear(input, Box::new(adjoint)))
    }

    /// `x · W + b` for a `1 × out` bias row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    /// Gradients of the scalar `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(g);
                continue;
            }
            let mut acc = |v: Var, contrib: Tensor| match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            };
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(*a, g.matmul_t(bv));
                    acc(*b, av.t_matmul(&g));
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    acc(*a, g.zip(self.value(*b), |x, y| x * y));
                    acc(*b, g.zip(self.value(*a), |x, y| x * y));
                }
                Op::AddRow(a, r) => {
                    acc(*r, g.column_sums());
                    acc(*a, g.clone());
                }
                Op::SubRow(a, r) => {
                    acc(*r, g.column_sums().map(|x| -x));
                    acc(*a, g.clone());
                }
                Op::MulRow(a, r) => {
                    let (av, rv) = (self.value(*a), self.value(*r));
                    acc(*r, g.zip(av, |x, y| x * y).column_sums());
                    let mut ga = g.clone();
                    for row in 0..ga.rows() {
                        ga.row_mut(row).iter_mut().zip(rv.data()).for_each(|(o, s)| *o *= s);
                    }
                    acc(*a, ga);
                }
                Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
                Op::AddScalar(a) => acc(*a, g.clone()),
                Op::Tanh(a) => acc(*a, g.zip(&node.value, |x, y| x * (1.0 - y * y))),
                Op::Sigmoid(a) => acc(*a, g.zip(&node.value, |x, y| x * y * (1.0 - y))),
                Op::Abs(a) => acc(
                    *a,
                    g.zip(self.value(*a), |x, y| x * y.signum() * (y != 0.0) as u8 as f64),
                ),
                Op::Square(a) => acc(*a, g.zip(self.value(*a), |x, y| 2.0 * x * y)),
                Op::Powf(a, p) => acc(*a, g.zip(self.value(*a), |x, y| x * p * y.powf(p - 1.0))),
                Op::Ln(a) => acc(*a, g.zip(self.value(*a), |x, y| x / y)),
                Op::Sum(a) => {
                    let (r, c) = self.shape(*a);
                    acc(*a, Tensor::from_vec(r, c, vec![g.item(); r * c]));
                }
                Op::MeanRows(a) => {
                    let (r, c) = self.shape(*a);
                    let n = r as f64;
                    acc(*a, Tensor::from_fn(r, c, |_, j| g.get(0, j) / n));
                }
                Op::SliceCols(a, start) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Tensor::zeros(r, c);
                    for row in 0..r {
                        ga.row_mut(row)[*start..*start + g.cols()].copy_from_slice(g.row(row));
                    }
                    acc(*a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let (r, c) = self.shape(*p);
                        acc(*p, Tensor::from_fn(r, c, |i, j| g.get(i, off + j)));
                        off += c;
                    }
                }
                Op::GatherRows(a, indices) => {
                    let (r, c) = self.shape(*a);
                    let mut ga = Tensor::zeros(r, c);
                    for (i, &src) in indices.iter().enumerate() {
                        ga.row_mut(src).iter_mut().zip(g.row(i)).for_each(|(o, v)| *o += v);
                    }
                    acc(*a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let (r, c) = self.shape(*p);
                        acc(*p, Tensor::from_vec(r, c, g.data()[off * c..(off + r) * c].to_vec()));
                        off += r;
                    }
                }
                Op::Linear(a, adjoint) => {
                    let ga = adjoint(&g);
                    assert_eq!(ga.shape(), self.shape(*a), "adjoint output shape");
                    acc(*a, ga);
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }
}
