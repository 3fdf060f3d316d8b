//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar (1×1) result walks the tape in reverse and
//! returns gradients for every leaf registered with [`Tape::param`].
//!
//! Only the operations needed by the recommender and the dialogue model are
//! provided; each one carries its own adjoint rule.

use std::cell::RefCell;
use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis};

use crate::tensor::{gelu, gelu_grad, Matrix};

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Transpose(usize),
    Tanh(usize),
    Gelu(usize),
    Relu(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    GatherRows(usize, Vec<usize>),
    ScatterAddRows(usize, Vec<usize>),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Reshape(usize),
    BlockDiag(usize, usize),
    SegmentDot(usize, usize, usize),
    HeadScale(usize, usize, usize),
    SegmentSoftmax(usize, Vec<usize>),
    LayerNorm(usize, Vec<f64>),
    Sum(usize),
    Pick(usize, Vec<usize>),
    ClampMin(usize, f64),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    param: Option<String>,
}

/// Operation recorder. One tape per forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a recorded value.
#[derive(Clone, Copy, Debug)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Matrix>;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Matrix, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, param: None });
        Var { tape: self, id: nodes.len() - 1 }
    }

    /// Untracked input.
    pub fn constant(&self, value: Matrix) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Array2::from_elem((1, 1), value))
    }

    /// Leaf whose gradient is reported under `name` by [`Tape::backward`].
    pub fn param(&self, name: &str, value: Matrix) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::Leaf, param: Some(name.to_string()) });
        Var { tape: self, id: nodes.len() - 1 }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Back-propagates from a 1×1 output. Parameters that the output does not
    /// depend on are reported with a zero gradient.
    pub fn backward(&self, output: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[output.id].value.dim(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Matrix>> = vec![None; output.id + 1];
        grads[output.id] = Some(Array2::ones((1, 1)));

        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            let val = |i: usize| &nodes[i].value;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, g.dot(&val(*b).t()));
                    acc(&mut grads, *b, val(*a).t().dot(&g));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, -g);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * val(*b));
                    acc(&mut grads, *b, &g * val(*a));
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::AddRow(a, row) => {
                    acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g);
                }
                Op::MulRow(a, row) => {
                    let ga = &g * val(*row);
                    let gr = (&g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *row, gr);
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::Tanh(a) => {
                    let y = &node.value;
                    acc(&mut grads, *a, &g * &y.mapv(|t| 1.0 - t * t));
                }
                Op::Gelu(a) => acc(&mut grads, *a, &g * &val(*a).mapv(gelu_grad)),
                Op::Relu(a) => {
                    acc(&mut grads, *a, &g * &val(*a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 }))
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let dot = (&g * y).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *a, y * &(&g - &dot));
                }
                Op::LogSoftmaxRows(a) => {
                    let p = node.value.mapv(f64::exp);
                    let gsum = g.sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *a, &g - &(&p * &gsum));
                }
                Op::GatherRows(a, idx) => {
                    let mut ga = Array2::zeros(val(*a).dim());
                    for (r, &src) in idx.iter().enumerate() {
                        let mut row = ga.row_mut(src);
                        row += &g.row(r);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ScatterAddRows(a, idx) => {
                    let mut ga = Array2::zeros(val(*a).dim());
                    for (r, &dst) in idx.iter().enumerate() {
                        ga.row_mut(r).assign(&g.row(dst));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Array2::zeros(val(*a).dim());
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(val(*a).dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = val(p).ncols();
                        acc(&mut grads, p, g.slice(s![.., off..off + w]).to_owned());
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let h = val(p).nrows();
                        acc(&mut grads, p, g.slice(s![off..off + h, ..]).to_owned());
                        off += h;
                    }
                }
                Op::Reshape(a) => {
                    let (r, c) = val(*a).dim();
                    let flat: Vec<f64> = g.iter().copied().collect();
                    acc(&mut grads, *a, Array2::from_shape_vec((r, c), flat).expect("reshape"));
                }
                Op::BlockDiag(a, k) => {
                    let b = val(*a).ncols();
                    let mut ga = Array2::zeros(val(*a).dim());
                    for i in 0..*k {
                        ga.slice_mut(s![i * b..(i + 1) * b, ..])
                            .assign(&g.slice(s![i * b..(i + 1) * b, i * b..(i + 1) * b]));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::SegmentDot(a, b, k) => {
                    let (x, y) = (val(*a), val(*b));
                    let w = x.ncols() / k;
                    let mut gx = Array2::zeros(x.dim());
                    let mut gy = Array2::zeros(y.dim());
                    for r in 0..x.nrows() {
                        for h in 0..*k {
                            let gr = g[[r, h]];
                            for c in h * w..(h + 1) * w {
                                gx[[r, c]] += gr * y[[r, c]];
                                gy[[r, c]] += gr * x[[r, c]];
                            }
                        }
                    }
                    acc(&mut grads, *a, gx);
                    acc(&mut grads, *b, gy);
                }
                Op::HeadScale(x, wts, k) => {
                    let (xv, wv) = (val(*x), val(*wts));
                    let w = xv.ncols() / k;
                    let mut gx = Array2::zeros(xv.dim());
                    let mut gw = Array2::zeros(wv.dim());
                    for r in 0..xv.nrows() {
                        for h in 0..*k {
                            for c in h * w..(h + 1) * w {
                                gx[[r, c]] = g[[r, c]] * wv[[r, h]];
                                gw[[r, h]] += g[[r, c]] * xv[[r, c]];
                            }
                        }
                    }
                    acc(&mut grads, *x, gx);
                    acc(&mut grads, *wts, gw);
                }
                Op::SegmentSoftmax(a, seg) => {
                    let y = &node.value;
                    let n_seg = seg.iter().copied().max().map_or(0, |m| m + 1);
                    let mut dots = Array2::<f64>::zeros((n_seg, y.ncols()));
                    for (r, &sg) in seg.iter().enumerate() {
                        for c in 0..y.ncols() {
                            dots[[sg, c]] += g[[r, c]] * y[[r, c]];
                        }
                    }
                    let mut ga = Array2::zeros(y.dim());
                    for (r, &sg) in seg.iter().enumerate() {
                        for c in 0..y.ncols() {
                            ga[[r, c]] = y[[r, c]] * (g[[r, c]] - dots[[sg, c]]);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm(a, inv_std) => {
                    // y = (x - mean) * inv_std, row-wise
                    let y = &node.value;
                    let n = y.ncols() as f64;
                    let mut ga = Array2::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let gr = g.row(r);
                        let yr = y.row(r);
                        let mean_g = gr.sum() / n;
                        let mean_gy = gr.dot(&yr) / n;
                        for c in 0..y.ncols() {
                            ga[[r, c]] = inv_std[r] * (gr[c] - mean_g - yr[c] * mean_gy);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => acc(&mut grads, *a, Array2::from_elem(val(*a).dim(), g[[0, 0]])),
                Op::Pick(a, idx) => {
                    let mut ga = Array2::zeros(val(*a).dim());
                    for (r, &c) in idx.iter().enumerate() {
                        ga[[r, c]] = g[[r, 0]];
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ClampMin(a, lo) => {
                    let mask = val(*a).mapv(|x| if x >= *lo { 1.0 } else { 0.0 });
                    acc(&mut grads, *a, &g * &mask);
                }
            }
        }

        let mut out = Gradients::new();
        for (id, node) in nodes.iter().enumerate() {
            if let Some(name) = &node.param {
                let g = grads
                    .get_mut(id)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Array2::zeros(node.value.dim()));
                match out.get_mut(name) {
                    Some(existing) => *existing += &g,
                    None => {
                        out.insert(name.clone(), g);
                    }
                }
            }
        }
        out
    }
}

fn acc(grads: &mut [Option<Matrix>], id: usize, g: Matrix) {
    match &mut grads[id] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

fn softmax_row_inplace(mut row: ndarray::ArrayViewMut1<'_, f64>) {
    let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    row.mapv_inplace(|x| (x - max).exp());
    let sum = row.sum();
    row.mapv_inplace(|x| x / sum);
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Matrix {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.tape.nodes.borrow()[self.id].value.dim()
    }

    /// Value of a 1×1 variable.
    pub fn item(&self) -> f64 {
        let nodes = self.tape.nodes.borrow();
        let v = &nodes[self.id].value;
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    fn unary(&self, f: impl FnOnce(&Matrix) -> Matrix, op: Op) -> Var<'t> {
        let v = f(&self.tape.nodes.borrow()[self.id].value);
        self.tape.push(v, op)
    }

    fn binary(&self, other: Var<'t>, f: impl FnOnce(&Matrix, &Matrix) -> Matrix, op: Op) -> Var<'t> {
        let v = {
            let nodes = self.tape.nodes.borrow();
            f(&nodes[self.id].value, &nodes[other.id].value)
        };
        self.tape.push(v, op)
    }

    pub fn matmul(&self, other: Var<'t>) -> Var<'t> {
        self.binary(other, |a, b| a.dot(b), Op::MatMul(self.id, other.id))
    }

    pub fn add(&self, other: Var<'t>) -> Var<'t> {
        self.binary(
            other,
            |a, b| {
                assert_eq!(a.dim(), b.dim(), "add shape mismatch");
                a + b
            },
            Op::Add(self.id, other.id),
        )
    }

    pub fn sub(&self, other: Var<'t>) -> Var<'t> {
        self.binary(
            other,
            |a, b| {
                assert_eq!(a.dim(), b.dim(), "sub shape mismatch");
                a - b
            },
            Op::Sub(self.id, other.id),
        )
    }

    pub fn mul(&self, other: Var<'t>) -> Var<'t> {
        self.binary(
            other,
            |a, b| {
                assert_eq!(a.dim(), b.dim(), "mul shape mismatch");
                a * b
            },
            Op::Mul(self.id, other.id),
        )
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(|a| a * c, Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(|a| a + c, Op::AddScalar(self.id))
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// Adds a 1×m row to every row.
    pub fn add_row(&self, row: Var<'t>) -> Var<'t> {
        self.binary(
            row,
            |a, r| {
                assert_eq!((1, a.ncols()), r.dim(), "add_row shape mismatch");
                a + r
            },
            Op::AddRow(self.id, row.id),
        )
    }

    /// Multiplies every row elementwise by a 1×m row.
    pub fn mul_row(&self, row: Var<'t>) -> Var<'t> {
        self.binary(
            row,
            |a, r| {
                assert_eq!((1, a.ncols()), r.dim(), "mul_row shape mismatch");
                a * r
            },
            Op::MulRow(self.id, row.id),
        )
    }

    pub fn t(&self) -> Var<'t> {
        self.unary(|a| a.t().to_owned(), Op::Transpose(self.id))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(|a| a.mapv(f64::tanh), Op::Tanh(self.id))
    }

    pub fn gelu(&self) -> Var<'t> {
        self.unary(|a| a.mapv(gelu), Op::Gelu(self.id))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(|a| a.mapv(|x| x.max(0.0)), Op::Relu(self.id))
    }

    pub fn softmax_rows(&self) -> Var<'t> {
        self.unary(
            |a| {
                let mut y = a.clone();
                for row in y.rows_mut() {
                    softmax_row_inplace(row);
                }
                y
            },
            Op::SoftmaxRows(self.id),
        )
    }

    pub fn log_softmax_rows(&self) -> Var<'t> {
        self.unary(
            |a| {
                let mut y = a.clone();
                for mut row in y.rows_mut() {
                    let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
                    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
                    row.mapv_inplace(|x| x - lse);
                }
                y
            },
            Op::LogSoftmaxRows(self.id),
        )
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Var<'t> {
        self.unary(|a| a.select(Axis(0), idx), Op::GatherRows(self.id, idx.to_vec()))
    }

    /// Sums row `r` of `self` into row `idx[r]` of an `n_out`-row result.
    pub fn scatter_add_rows(&self, idx: &[usize], n_out: usize) -> Var<'t> {
        self.unary(
            |a| {
                assert_eq!(a.nrows(), idx.len());
                let mut out = Array2::zeros((n_out, a.ncols()));
                for (r, &dst) in idx.iter().enumerate() {
                    let mut row = out.row_mut(dst);
                    row += &a.row(r);
                }
                out
            },
            Op::ScatterAddRows(self.id, idx.to_vec()),
        )
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Var<'t> {
        self.unary(|a| a.slice(s![start..start + len, ..]).to_owned(), Op::SliceRows(self.id, start))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Var<'t> {
        self.unary(|a| a.slice(s![.., start..start + len]).to_owned(), Op::SliceCols(self.id, start))
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Var<'t> {
        let tape = parts[0].tape;
        let v = {
            let nodes = tape.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|p| nodes[p.id].value.view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("concat_cols shape mismatch")
        };
        tape.push(v, Op::ConcatCols(parts.iter().map(|p| p.id).collect()))
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Var<'t> {
        let tape = parts[0].tape;
        let v = {
            let nodes = tape.nodes.borrow();
            let views: Vec<_> = parts.iter().map(|p| nodes[p.id].value.view()).collect();
            ndarray::concatenate(Axis(0), &views).expect("concat_rows shape mismatch")
        };
        tape.push(v, Op::ConcatRows(parts.iter().map(|p| p.id).collect()))
    }

    /// Row-major reshape.
    pub fn reshape(&self, rows: usize, cols: usize) -> Var<'t> {
        self.unary(
            |a| {
                let flat: Vec<f64> = a.iter().copied().collect();
                Array2::from_shape_vec((rows, cols), flat).expect("reshape size mismatch")
            },
            Op::Reshape(self.id),
        )
    }

    /// Turns `k` vertically stacked b×b blocks (shape kb × b) into the kb×kb
    /// block-diagonal matrix.
    pub fn block_diag(&self, k: usize) -> Var<'t> {
        self.unary(
            |a| {
                let b = a.ncols();
                assert_eq!(a.nrows(), k * b, "block_diag expects k stacked square blocks");
                let mut out = Array2::zeros((k * b, k * b));
                for i in 0..k {
                    out.slice_mut(s![i * b..(i + 1) * b, i * b..(i + 1) * b])
                        .assign(&a.slice(s![i * b..(i + 1) * b, ..]));
                }
                out
            },
            Op::BlockDiag(self.id, k),
        )
    }

    /// Row-wise dot products over `k` equal column segments: n×d, n×d → n×k.
    pub fn segment_dot(&self, other: Var<'t>, k: usize) -> Var<'t> {
        self.binary(
            other,
            |a, b| {
                assert_eq!(a.dim(), b.dim());
                let w = a.ncols() / k;
                let mut out = Array2::zeros((a.nrows(), k));
                for r in 0..a.nrows() {
                    for h in 0..k {
                        let sa = a.slice(s![r, h * w..(h + 1) * w]);
                        let sb = b.slice(s![r, h * w..(h + 1) * w]);
                        out[[r, h]] = sa.dot(&sb);
                    }
                }
                out
            },
            Op::SegmentDot(self.id, other.id, k),
        )
    }

    /// Scales column segment `h` of row `r` by `weights[r, h]`: n×d, n×k → n×d.
    pub fn head_scale(&self, weights: Var<'t>, k: usize) -> Var<'t> {
        self.binary(
            weights,
            |a, wts| {
                assert_eq!(wts.dim(), (a.nrows(), k));
                let w = a.ncols() / k;
                let mut out = a.clone();
                for r in 0..a.nrows() {
                    for h in 0..k {
                        out.slice_mut(s![r, h * w..(h + 1) * w]).mapv_inplace(|x| x * wts[[r, h]]);
                    }
                }
                out
            },
            Op::HeadScale(self.id, weights.id, k),
        )
    }

    /// Column-wise softmax within groups of rows sharing a segment id.
    pub fn segment_softmax(&self, segments: &[usize]) -> Var<'t> {
        self.unary(
            |a| {
                assert_eq!(a.nrows(), segments.len());
                let n_seg = segments.iter().copied().max().map_or(0, |m| m + 1);
                let mut max = Array2::from_elem((n_seg, a.ncols()), f64::NEG_INFINITY);
                for (r, &sg) in segments.iter().enumerate() {
                    for c in 0..a.ncols() {
                        max[[sg, c]] = max[[sg, c]].max(a[[r, c]]);
                    }
                }
                let mut out = Array2::zeros(a.dim());
                let mut sum = Array2::<f64>::zeros((n_seg, a.ncols()));
                for (r, &sg) in segments.iter().enumerate() {
                    for c in 0..a.ncols() {
                        let e = (a[[r, c]] - max[[sg, c]]).exp();
                        out[[r, c]] = e;
                        sum[[sg, c]] += e;
                    }
                }
                for (r, &sg) in segments.iter().enumerate() {
                    for c in 0..a.ncols() {
                        out[[r, c]] /= sum[[sg, c]];
                    }
                }
                out
            },
            Op::SegmentSoftmax(self.id, segments.to_vec()),
        )
    }

    /// Row-wise standardization without affine terms.
    pub fn layer_norm(&self, eps: f64) -> Var<'t> {
        let (v, inv) = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id].value;
            let n = a.ncols() as f64;
            let mut out = a.clone();
            let mut inv = Vec::with_capacity(a.nrows());
            for mut row in out.rows_mut() {
                let mean = row.sum() / n;
                let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
                let is = 1.0 / (var + eps).sqrt();
                row.mapv_inplace(|x| (x - mean) * is);
                inv.push(is);
            }
            (out, inv)
        };
        self.tape.push(v, Op::LayerNorm(self.id, inv))
    }

    pub fn sum(&self) -> Var<'t> {
        self.unary(|a| Array2::from_elem((1, 1), a.sum()), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = {
            let (r, c) = self.dim();
            (r * c) as f64
        };
        self.sum().scale(1.0 / n)
    }

    /// Picks column `idx[r]` of row `r`: n×m → n×1.
    pub fn pick(&self, idx: &[usize]) -> Var<'t> {
        self.unary(
            |a| {
                assert_eq!(a.nrows(), idx.len());
                Array2::from_shape_fn((idx.len(), 1), |(r, _)| a[[r, idx[r]]])
            },
            Op::Pick(self.id, idx.to_vec()),
        )
    }

    pub fn clamp_min(&self, lo: f64) -> Var<'t> {
        self.unary(|a| a.mapv(|x| x.max(lo)), Op::ClampMin(self.id, lo))
    }
}
