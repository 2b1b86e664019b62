//! Minimal reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every value on the tape is an `Array2<f64>`; column vectors are `n x 1`
//! and scalars are `1 x 1`. The operation set is exactly what the message
//! passing network and the mass-balance losses need: bias-free linear maps,
//! ReLU, row gather/scatter along the edge list, column concatenation, and a
//! handful of elementwise reductions.
//!
//! All kernels accumulate in a fixed order, so results are bit-reproducible
//! and independent of the row position of a value inside a matrix.
//!
//! ```
//! use dualflood::tape::Tape;
//! use ndarray::array;
//!
//! let tape = Tape::new();
//! let x = tape.param(array![[1.0, -2.0]]);
//! let y = tape.sum(tape.square(x));
//! let grads = tape.backward(y);
//! assert_eq!(tape.scalar(y), 5.0);
//! assert_eq!(grads.wrt(x), array![[2.0, -4.0]]);
//! ```

use std::cell::{Ref, RefCell};
use std::rc::Rc;
use std::sync::Arc;

use ndarray::Array2;

/// Handle to a value recorded on a [`Tape`].
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
    MatMulT { x: Var, w: Var },
    Add(Var, Var),
    Sub(Var, Var),
    Relu(Var),
    Abs(Var),
    Square(Var),
    Affine { x: Var, scale: f64 },
    MulConst { x: Var, factor: Array2<f64> },
    ColumnScale { x: Var, scales: Rc<[f64]> },
    ConcatCols(Vec<Var>),
    GatherRows { x: Var, index: Arc<[usize]> },
    ScatterAddRows { x: Var, index: Arc<[usize]> },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
    tracked: bool,
}

/// Append-only record of a computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint of `v`, or `None` when `v` does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adjoint of `v`, materializing zeros when it does not influence the root.
    pub fn wrt(&self, v: Var) -> Array2<f64> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Array2::zeros(self.shapes[v.0]),
        }
    }
}

fn standard(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    }
}

/// `x · wᵀ` with `x: n×k`, `w: m×k`.
pub(crate) fn matmul_t(x: &Array2<f64>, w: &Array2<f64>) -> Array2<f64> {
    let (n, k) = x.dim();
    let (m, kw) = w.dim();
    assert_eq!(k, kw, "matmul_t inner dimension mismatch");
    let xs = x.as_slice().expect("standard layout");
    let ws = w.as_slice().expect("standard layout");
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let xr = &xs[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (o, slot) in orow.iter_mut().enumerate() {
            let wr = &ws[o * k..(o + 1) * k];
            let mut acc = 0.0;
            for (a, b) in xr.iter().zip(wr) {
                acc += a * b;
            }
            *slot = acc;
        }
    }
    Array2::from_shape_vec((n, m), out).expect("shape")
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<f64>, op: Op, tracked: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, tracked });
        Var(nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].tracked
    }

    /// Leaf whose gradient is wanted.
    pub fn param(&self, value: Array2<f64>) -> Var {
        self.push(standard(value), Op::Leaf, true)
    }

    /// Leaf treated as data; no adjoint flows into it.
    pub fn constant(&self, value: Array2<f64>) -> Var {
        self.push(standard(value), Op::Leaf, false)
    }

    /// Column vector constant.
    pub fn column(&self, values: &[f64]) -> Var {
        let a = Array2::from_shape_vec((values.len(), 1), values.to_vec()).expect("shape");
        self.constant(a)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Array2<f64>> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.dim()
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(val.dim(), (1, 1), "scalar() on non-scalar node");
        val[[0, 0]]
    }

    /// Values of an `n×1` node as a flat vector.
    pub fn column_values(&self, v: Var) -> Vec<f64> {
        let val = self.value(v);
        assert_eq!(val.ncols(), 1, "column_values() on multi-column node");
        val.iter().copied().collect()
    }

    /// `x · wᵀ`: rows of `x` mapped through the linear layer with weight `w`
    /// stored as `out × in`.
    pub fn matmul_t(&self, x: Var, w: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            matmul_t(&nodes[x.0].value, &nodes[w.0].value)
        };
        let tracked = self.tracked(x) || self.tracked(w);
        self.push(value, Op::MatMulT { x, w }, tracked)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            assert_eq!(nodes[a.0].value.dim(), nodes[b.0].value.dim(), "add shape");
            &nodes[a.0].value + &nodes[b.0].value
        };
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Add(a, b), tracked)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let value = {
            let nodes = self.nodes.borrow();
            assert_eq!(nodes[a.0].value.dim(), nodes[b.0].value.dim(), "sub shape");
            &nodes[a.0].value - &nodes[b.0].value
        };
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Sub(a, b), tracked)
    }

    pub fn relu(&self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| if v > 0.0 { v } else { 0.0 });
        let tracked = self.tracked(x);
        self.push(value, Op::Relu(x), tracked)
    }

    pub fn abs(&self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::abs);
        let tracked = self.tracked(x);
        self.push(value, Op::Abs(x), tracked)
    }

    pub fn square(&self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v * v);
        let tracked = self.tracked(x);
        self.push(value, Op::Square(x), tracked)
    }

    /// Elementwise `scale * x + shift`.
    pub fn affine(&self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).mapv(|v| scale * v + shift);
        let tracked = self.tracked(x);
        self.push(value, Op::Affine { x, scale }, tracked)
    }

    /// Elementwise product with a constant array of the same shape.
    pub fn mul_const(&self, x: Var, factor: Array2<f64>) -> Var {
        let value = {
            let v = self.value(x);
            assert_eq!(v.dim(), factor.dim(), "mul_const shape");
            &*v * &factor
        };
        let tracked = self.tracked(x);
        self.push(value, Op::MulConst { x, factor }, tracked)
    }

    pub fn neg(&self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    /// Per-column `scales[c] * x[:, c] + shifts[c]`.
    pub fn column_affine(&self, x: Var, scales: &[f64], shifts: &[f64]) -> Var {
        let value = {
            let v = self.value(x);
            assert_eq!(v.ncols(), scales.len(), "column_affine scales");
            assert_eq!(v.ncols(), shifts.len(), "column_affine shifts");
            let mut out = v.clone();
            for mut row in out.rows_mut() {
                for (c, slot) in row.iter_mut().enumerate() {
                    *slot = scales[c] * *slot + shifts[c];
                }
            }
            out
        };
        let tracked = self.tracked(x);
        self.push(
            value,
            Op::ColumnScale {
                x,
                scales: scales.into(),
            },
            tracked,
        )
    }

    /// Horizontal concatenation; all parts must share the row count.
    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let value = {
            let nodes = self.nodes.borrow();
            let rows = nodes[parts[0].0].value.nrows();
            let width: usize = parts.iter().map(|p| nodes[p.0].value.ncols()).sum();
            let mut out = Array2::zeros((rows, width));
            let mut col = 0;
            for p in parts {
                let v = &nodes[p.0].value;
                assert_eq!(v.nrows(), rows, "concat_cols row mismatch");
                out.slice_mut(ndarray::s![.., col..col + v.ncols()]).assign(v);
                col += v.ncols();
            }
            out
        };
        let tracked = parts.iter().any(|p| self.tracked(*p));
        self.push(value, Op::ConcatCols(parts.to_vec()), tracked)
    }

    /// `out[r] = x[index[r]]`.
    pub fn gather_rows(&self, x: Var, index: Arc<[usize]>) -> Var {
        let value = {
            let v = self.value(x);
            let cols = v.ncols();
            let mut out = Array2::zeros((index.len(), cols));
            for (r, &src) in index.iter().enumerate() {
                out.row_mut(r).assign(&v.row(src));
            }
            out
        };
        let tracked = self.tracked(x);
        self.push(value, Op::GatherRows { x, index }, tracked)
    }

    /// `out[index[r]] += x[r]`, with `rows` output rows. Rows are accumulated
    /// in increasing `r`.
    pub fn scatter_add_rows(&self, x: Var, index: Arc<[usize]>, rows: usize) -> Var {
        let value = {
            let v = self.value(x);
            assert_eq!(v.nrows(), index.len(), "scatter index length");
            let cols = v.ncols();
            let mut out = Array2::zeros((rows, cols));
            for (r, &dst) in index.iter().enumerate() {
                let mut orow = out.row_mut(dst);
                orow += &v.row(r);
            }
            out
        };
        let tracked = self.tracked(x);
        self.push(value, Op::ScatterAddRows { x, index }, tracked)
    }

    /// Sum of all entries as a `1×1` node.
    pub fn sum(&self, x: Var) -> Var {
        let s = self.value(x).iter().fold(0.0, |acc, v| acc + v);
        let tracked = self.tracked(x);
        self.push(Array2::from_elem((1, 1), s), Op::Sum(x), tracked)
    }

    /// Mean of all entries as a `1×1` node.
    pub fn mean(&self, x: Var) -> Var {
        let (s, n) = {
            let v = self.value(x);
            (v.iter().fold(0.0, |acc, v| acc + v), v.len())
        };
        assert!(n > 0, "mean of empty node");
        let tracked = self.tracked(x);
        self.push(
            Array2::from_elem((1, 1), s / n as f64),
            Op::Mean(x),
            tracked,
        )
    }

    /// Reverse sweep seeded with ones at `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        let shapes: Vec<_> = nodes.iter().map(|n| n.value.dim()).collect();
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; nodes.len()];
        grads[root.0] = Some(Array2::ones(shapes[root.0]));

        fn accumulate(slot: &mut Option<Array2<f64>>, g: Array2<f64>) {
            match slot {
                Some(existing) => *existing += &g,
                None => *slot = Some(g),
            }
        }

        for id in (0..=root.0).rev() {
            let node = &nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(dy) = grads[id].take() else {
                continue;
            };
            let want = |v: Var| nodes[v.0].tracked;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(dy);
                    continue;
                }
                Op::MatMulT { x, w } => {
                    let xv = &nodes[x.0].value;
                    let wv = &nodes[w.0].value;
                    let (n, k) = xv.dim();
                    let m = wv.nrows();
                    let dys = dy.as_slice().expect("standard layout");
                    let xs = xv.as_slice().expect("standard layout");
                    let ws = wv.as_slice().expect("standard layout");
                    if want(*x) {
                        let mut dx = vec![0.0; n * k];
                        for i in 0..n {
                            let drow = &mut dx[i * k..(i + 1) * k];
                            for o in 0..m {
                                let g = dys[i * m + o];
                                if g == 0.0 {
                                    continue;
                                }
                                for (d, wvv) in drow.iter_mut().zip(&ws[o * k..(o + 1) * k]) {
                                    *d += g * wvv;
                                }
                            }
                        }
                        accumulate(
                            &mut grads[x.0],
                            Array2::from_shape_vec((n, k), dx).expect("shape"),
                        );
                    }
                    if want(*w) {
                        let mut dw = vec![0.0; m * k];
                        for i in 0..n {
                            let xr = &xs[i * k..(i + 1) * k];
                            for o in 0..m {
                                let g = dys[i * m + o];
                                if g == 0.0 {
                                    continue;
                                }
                                for (d, xv) in dw[o * k..(o + 1) * k].iter_mut().zip(xr) {
                                    *d += g * xv;
                                }
                            }
                        }
                        accumulate(
                            &mut grads[w.0],
                            Array2::from_shape_vec((m, k), dw).expect("shape"),
                        );
                    }
                }
                Op::Add(a, b) => {
                    if want(*a) {
                        accumulate(&mut grads[a.0], dy.clone());
                    }
                    if want(*b) {
                        accumulate(&mut grads[b.0], dy);
                    }
                }
                Op::Sub(a, b) => {
                    if want(*a) {
                        accumulate(&mut grads[a.0], dy.clone());
                    }
                    if want(*b) {
                        accumulate(&mut grads[b.0], -dy);
                    }
                }
                Op::Relu(x) => {
                    let mut g = dy;
                    g.zip_mut_with(&nodes[x.0].value, |d, &v| {
                        if v <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    accumulate(&mut grads[x.0], g);
                }
                Op::Abs(x) => {
                    let mut g = dy;
                    g.zip_mut_with(&nodes[x.0].value, |d, &v| {
                        *d *= if v > 0.0 {
                            1.0
                        } else if v < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                    });
                    accumulate(&mut grads[x.0], g);
                }
                Op::Square(x) => {
                    let mut g = dy;
                    g.zip_mut_with(&nodes[x.0].value, |d, &v| *d *= 2.0 * v);
                    accumulate(&mut grads[x.0], g);
                }
                Op::Affine { x, scale } => {
                    accumulate(&mut grads[x.0], dy * *scale);
                }
                Op::MulConst { x, factor } => {
                    accumulate(&mut grads[x.0], dy * factor);
                }
                Op::ColumnScale { x, scales } => {
                    let mut g = dy;
                    for mut row in g.rows_mut() {
                        for (c, slot) in row.iter_mut().enumerate() {
                            *slot *= scales[c];
                        }
                    }
                    accumulate(&mut grads[x.0], g);
                }
                Op::ConcatCols(parts) => {
                    let mut col = 0;
                    for p in parts {
                        let width = nodes[p.0].value.ncols();
                        if want(*p) {
                            let g = dy.slice(ndarray::s![.., col..col + width]).to_owned();
                            accumulate(&mut grads[p.0], g);
                        }
                        col += width;
                    }
                }
                Op::GatherRows { x, index } => {
                    let xv = &nodes[x.0].value;
                    let mut g = Array2::zeros(xv.dim());
                    for (r, &src) in index.iter().enumerate() {
                        let mut grow = g.row_mut(src);
                        grow += &dy.row(r);
                    }
                    accumulate(&mut grads[x.0], g);
                }
                Op::ScatterAddRows { x, index } => {
                    let xv = &nodes[x.0].value;
                    let mut g = Array2::zeros(xv.dim());
                    for (r, &dst) in index.iter().enumerate() {
                        g.row_mut(r).assign(&dy.row(dst));
                    }
                    accumulate(&mut grads[x.0], g);
                }
                Op::Sum(x) => {
                    let d = dy[[0, 0]];
                    accumulate(
                        &mut grads[x.0],
                        Array2::from_elem(nodes[x.0].value.dim(), d),
                    );
                }
                Op::Mean(x) => {
                    let n = nodes[x.0].value.len() as f64;
                    let d = dy[[0, 0]] / n;
                    accumulate(
                        &mut grads[x.0],
                        Array2::from_elem(nodes[x.0].value.dim(), d),
                    );
                }
            }
        }
        Gradients { grads, shapes }
    }
}
