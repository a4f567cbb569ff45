//! Reverse-mode differentiation over row-major 2-D tensors.
//!
//! Every value on the tape is an `Array2` laid out as `[batch × features]`.
//! Scalars are `1 × 1`. Operations are recorded eagerly, so building a graph
//! also evaluates it; [`Tape::backward`] then walks the nodes in reverse.

use ndarray::{s, Array2, Axis, Zip};

use crate::{NnError, Scalar};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    /// `x · wᵀ` with `x: [B × in]`, `w: [out × in]`.
    MatMulT(Var, Var),
    /// `x + row` with `row: [1 × n]` broadcast over the batch.
    AddRow(Var, Var),
    /// `[1 × n]` repeated to `rows` rows.
    BroadcastRows(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Min(Var, Var),
    Scale(Var, T),
    Offset(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sqrt(Var),
    Softplus(Var),
    Clamp(Var, T, T),
    /// Row sums: `[B × n] → [B × 1]`.
    SumCols(Var),
    /// Mean of every element: `→ [1 × 1]`.
    Mean(Var),
    SliceCols(Var, usize, usize),
    ConcatCols(Var, Var),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation graph.
#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Array2<T>>>,
    shapes: Vec<(usize, usize)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient w.r.t. `v`; zeros if `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Array2<T> {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Array2::zeros(self.shapes[v.0]),
        }
    }

    pub fn collect(&self, vars: &[Var]) -> Vec<Array2<T>> {
        vars.iter().map(|&v| self.get(v)).collect()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf (parameter).
    pub fn param(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Data leaf; never receives a gradient.
    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[[0, 0]]
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(x).mapv(f);
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: operand shapes differ");
    }

    pub fn matmul_t(&mut self, x: Var, w: Var) -> Var {
        let (_, inp) = self.shape(x);
        let (_, w_in) = self.shape(w);
        assert_eq!(inp, w_in, "matmul_t: input width {inp} vs weight width {w_in}");
        let value = self.value(x).dot(&self.value(w).t());
        let rg = self.rg(x) || self.rg(w);
        self.push(value, Op::MatMulT(x, w), rg)
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (r, c) = self.shape(row);
        assert!(r == 1 && c == self.shape(x).1, "add_row: bias shape mismatch");
        let value = self.value(x) + self.value(row);
        let rg = self.rg(x) || self.rg(row);
        self.push(value, Op::AddRow(x, row), rg)
    }

    pub fn broadcast_rows(&mut self, row: Var, rows: usize) -> Var {
        let (r, c) = self.shape(row);
        assert_eq!(r, 1, "broadcast_rows expects a single row");
        let value = self.value(row).broadcast((rows, c)).expect("row broadcast").to_owned();
        let rg = self.rg(row);
        self.push(value, Op::BroadcastRows(row), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "min");
        let mut value = self.value(a).clone();
        Zip::from(&mut value)
            .and(self.value(b))
            .for_each(|x, &y| *x = if *x <= y { *x } else { y });
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Min(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        self.unary(x, Op::Scale(x, k), |v| v * k)
    }

    pub fn offset(&mut self, x: Var, k: T) -> Var {
        self.unary(x, Op::Offset(x, k), |v| v + k)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), |v| v.exp())
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Op::Log(x), |v| v.ln())
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    /// Square root whose gradient at exactly zero is taken as zero.
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sqrt(x), |v| v.sqrt())
    }

    /// `ln(1 + eˣ)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.max(lo).min(hi))
    }

    pub fn sum_cols(&mut self, x: Var) -> Var {
        let value = self.value(x).sum_axis(Axis(1)).insert_axis(Axis(1));
        let rg = self.rg(x);
        self.push(value, Op::SumCols(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = T::from_usize(v.len()).expect("element count");
        let value = Array2::from_elem((1, 1), v.sum() / n);
        let rg = self.rg(x);
        self.push(value, Op::Mean(x), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        assert!(start < end && end <= self.shape(x).1, "slice_cols out of range");
        let value = self.value(x).slice(s![.., start..end]).to_owned();
        let rg = self.rg(x);
        self.push(value, Op::SliceCols(x, start, end), rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a).0, self.shape(b).0, "concat_cols: row counts differ");
        let value = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()]).expect("concat");
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::ConcatCols(a, b), rg)
    }

    /// Row-wise Euclidean norm `[B × n] → [B × 1]`.
    pub fn row_norm(&mut self, x: Var) -> Var {
        let sq = self.square(x);
        let ss = self.sum_cols(sq);
        self.sqrt(ss)
    }

    /// Gradients of the scalar `loss` w.r.t. every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NnError> {
        let shape = self.shape(loss);
        if shape != (1, 1) {
            return Err(NnError::NonScalarLoss {
                rows: shape.0,
                cols: shape.1,
            });
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array2<T>>> = vec![None; n];
        grads[loss.0] = Some(Array2::from_elem((1, 1), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = Some(g);
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::MatMulT(x, w) => {
                    if self.rg(*x) {
                        let dx = g.dot(self.value(*w));
                        accumulate(&mut grads, *x, dx);
                    }
                    if self.rg(*w) {
                        let dw = g.t().dot(self.value(*x));
                        accumulate(&mut grads, *w, dw);
                    }
                }
                Op::AddRow(x, row) => {
                    if self.rg(*row) {
                        let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        accumulate(&mut grads, *row, db);
                    }
                    if self.rg(*x) {
                        accumulate(&mut grads, *x, g.clone());
                    }
                }
                Op::BroadcastRows(row) => {
                    let db = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *row, db);
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.mapv(|v| -v));
                    }
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::Min(a, b) => {
                    let va = self.value(*a);
                    let vb = self.value(*b);
                    if self.rg(*a) {
                        let mut da = g.clone();
                        Zip::from(&mut da).and(va).and(vb).for_each(|d, &x, &y| {
                            if x > y {
                                *d = T::zero()
                            }
                        });
                        accumulate(&mut grads, *a, da);
                    }
                    if self.rg(*b) {
                        let mut db = g.clone();
                        Zip::from(&mut db).and(va).and(vb).for_each(|d, &x, &y| {
                            if x <= y {
                                *d = T::zero()
                            }
                        });
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::Scale(x, k) => {
                    let k = *k;
                    accumulate(&mut grads, *x, g.mapv(|v| v * k));
                }
                Op::Offset(x, _) => accumulate(&mut grads, *x, g.clone()),
                Op::Tanh(x) => {
                    let mut d = g.clone();
                    Zip::from(&mut d)
                        .and(&node.value)
                        .for_each(|d, &y| *d *= T::one() - y * y);
                    accumulate(&mut grads, *x, d);
                }
                Op::Sigmoid(x) => {
                    let mut d = g.clone();
                    Zip::from(&mut d)
                        .and(&node.value)
                        .for_each(|d, &y| *d = *d * y * (T::one() - y));
                    accumulate(&mut grads, *x, d);
                }
                Op::Exp(x) => accumulate(&mut grads, *x, &g * &node.value),
                Op::Log(x) => accumulate(&mut grads, *x, &g / self.value(*x)),
                Op::Square(x) => {
                    let two = T::c(2.0);
                    let mut d = g.clone();
                    Zip::from(&mut d)
                        .and(self.value(*x))
                        .for_each(|d, &v| *d = *d * two * v);
                    accumulate(&mut grads, *x, d);
                }
                Op::Sqrt(x) => {
                    let two = T::c(2.0);
                    let mut d = g.clone();
                    Zip::from(&mut d)
                        .and(&node.value)
                        .for_each(|d, &y| *d = if y > T::zero() { *d / (two * y) } else { T::zero() });
                    accumulate(&mut grads, *x, d);
                }
                Op::Softplus(x) => {
                    let mut d = g.clone();
                    Zip::from(&mut d).and(self.value(*x)).for_each(|d, &v| *d *= sigmoid(v));
                    accumulate(&mut grads, *x, d);
                }
                Op::Clamp(x, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let mut d = g.clone();
                    Zip::from(&mut d).and(self.value(*x)).for_each(|d, &v| {
                        if v < lo || v > hi {
                            *d = T::zero()
                        }
                    });
                    accumulate(&mut grads, *x, d);
                }
                Op::SumCols(x) => {
                    let shape = self.shape(*x);
                    let d = g.broadcast(shape).expect("column broadcast").to_owned();
                    accumulate(&mut grads, *x, d);
                }
                Op::Mean(x) => {
                    let shape = self.shape(*x);
                    let count = T::from_usize(shape.0 * shape.1).expect("element count");
                    accumulate(&mut grads, *x, Array2::from_elem(shape, g[[0, 0]] / count));
                }
                Op::SliceCols(x, start, end) => {
                    let mut d = Array2::zeros(self.shape(*x));
                    d.slice_mut(s![.., *start..*end]).assign(&g);
                    accumulate(&mut grads, *x, d);
                }
                Op::ConcatCols(a, b) => {
                    let split = self.shape(*a).1;
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.slice(s![.., ..split]).to_owned());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.slice(s![.., split..]).to_owned());
                    }
                }
            }
            grads[i] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.dim()).collect();
        Ok(Gradients { grads, shapes })
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Array2<T>>], v: Var, d: Array2<T>) {
    match &mut grads[v.0] {
        Some(g) => *g += &d,
        slot @ None => *slot = Some(d),
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Scalar>(v: T) -> T {
    // max(v, 0) + ln(1 + e^{-|v|})
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}
