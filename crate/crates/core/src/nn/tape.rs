//! Matrix-level reverse-mode differentiation.
//!
//! Every value on the tape is a 2-D array (`rows x features`). Forward calls
//! append a node holding the computed value and the op that produced it;
//! [`Tape::backward`] walks the nodes in exact reverse order and accumulates
//! parameter gradients into the owning [`ParamStore`]s.

use std::collections::HashMap;
use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

use super::params::{ParamId, ParamStore};
use super::Real;
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Sparse block-diagonal aggregation operator `y = P x`, where `P` repeats the
/// same `n x n` sparse matrix over `blocks` consecutive row blocks.
#[derive(Debug, Clone)]
pub struct Aggregation<F> {
    n: usize,
    blocks: usize,
    /// `rows[i]` lists `(j, w)` with `P[i][j] = w`.
    rows: Vec<Vec<(usize, F)>>,
    /// Transposed structure, for the backward pass.
    cols: Vec<Vec<(usize, F)>>,
}

impl<F: Real> Aggregation<F> {
    pub fn new(n: usize, blocks: usize, rows: Vec<Vec<(usize, F)>>) -> Self {
        let mut cols = vec![Vec::new(); n];
        for (i, r) in rows.iter().enumerate() {
            for &(j, w) in r {
                cols[j].push((i, w));
            }
        }
        Self { n, blocks, rows, cols }
    }

    pub fn total_rows(&self) -> usize {
        self.n * self.blocks
    }

    fn apply(structure: &[Vec<(usize, F)>], n: usize, blocks: usize, x: &Array2<F>) -> Array2<F> {
        let mut y = Array2::zeros(x.raw_dim());
        for b in 0..blocks {
            let base = b * n;
            for (i, r) in structure.iter().enumerate() {
                let mut out = y.row_mut(base + i);
                for &(j, w) in r {
                    out.scaled_add(w, &x.row(base + j));
                }
            }
        }
        y
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        Self::apply(&self.rows, self.n, self.blocks, x)
    }

    pub fn transpose_apply(&self, x: &Array2<F>) -> Array2<F> {
        Self::apply(&self.cols, self.n, self.blocks, x)
    }
}

#[derive(Debug, Clone)]
enum Op<F> {
    Constant,
    Param { slot: usize, id: ParamId },
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, F),
    AddConst(Var),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Elu(Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    GatherRows(Var, Rc<Vec<usize>>),
    ScatterAddRows(Var, Rc<Vec<usize>>),
    Aggregate(Var, Rc<Aggregation<F>>),
    NodeMatMul { x: Var, w: Var, n_nodes: usize },
    Reshape(Var),
    SoftmaxRows(Var),
    StraightThrough(Var),
    Sum(Var),
    Mean(Var),
}

struct Node<F> {
    value: Array2<F>,
    op: Op<F>,
}

pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
    params: HashMap<(usize, ParamId), Var>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_same<F: Real>(context: &str, a: &Array2<F>, b: &Array2<F>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(context, a.shape(), b.shape()));
    }
    Ok(())
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Array2<F>) -> Var {
        self.push(value, Op::Constant)
    }

    /// Leaf bound to a stored parameter. Repeated calls within one forward
    /// pass return the same node.
    pub fn param(&mut self, slot: usize, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&(slot, id)) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param { slot, id });
        self.params.insert((slot, id), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.nrows() {
            return Err(shape_err("matmul", &[av.nrows(), bv.nrows()], av.shape()));
        }
        let out = av.dot(bv);
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("add", self.value(a), self.value(b))?;
        let out = self.value(a) + self.value(b);
        Ok(self.push(out, Op::Add(a, b)))
    }

    /// `a + row`, broadcasting a `1 x d` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (av, rv) = (self.value(a), self.value(row));
        if rv.nrows() != 1 || rv.ncols() != av.ncols() {
            return Err(shape_err("add_row", &[1, av.ncols()], rv.shape()));
        }
        let out = av + rv;
        Ok(self.push(out, Op::AddRow(a, row)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("sub", self.value(a), self.value(b))?;
        let out = self.value(a) - self.value(b);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same("mul", self.value(a), self.value(b))?;
        let out = self.value(a) * self.value(b);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `a * col`, broadcasting an `r x 1` column over the features of `a`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (av, cv) = (self.value(a), self.value(col));
        if cv.ncols() != 1 || cv.nrows() != av.nrows() {
            return Err(shape_err("mul_col", &[av.nrows(), 1], cv.shape()));
        }
        let out = av * cv;
        Ok(self.push(out, Op::MulCol(a, col)))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let out = self.value(a).mapv(|x| x * c);
        self.push(out, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: F) -> Var {
        let out = self.value(a).mapv(|x| x + c);
        self.push(out, Op::AddConst(a))
    }

    /// `1 - a`.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| F::one() - x);
        self.push(out, Op::OneMinus(a))
    }

    fn map_slice(&self, a: Var, kernel: fn(&mut [F])) -> Array2<F> {
        let mut out = self.value(a).as_standard_layout().into_owned();
        kernel(out.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.map_slice(a, F::sigmoid_slice);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.map_slice(a, F::tanh_slice);
        self.push(out, Op::Tanh(a))
    }

    /// Exponential linear unit, `x` for `x > 0` and `exp(x) - 1` otherwise.
    pub fn elu(&mut self, a: Var) -> Var {
        let out = self.map_slice(a, F::elu_slice);
        self.push(out, Op::Elu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.exp());
        self.push(out, Op::Exp(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.abs());
        self.push(out, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x * x);
        self.push(out, Op::Square(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.sqrt());
        self.push(out, Op::Sqrt(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).nrows();
        for &p in parts {
            if self.value(p).nrows() != rows {
                return Err(shape_err("concat_cols", &[rows], &[self.value(p).nrows()]));
            }
        }
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts checked");
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if start >= end || end > av.ncols() {
            return Err(Error::InvalidArgument(format!(
                "column slice {start}..{end} of {} columns",
                av.ncols()
            )));
        }
        let out = av.slice(s![.., start..end]).to_owned();
        Ok(self.push(out, Op::SliceCols(a, start, end)))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if start >= end || end > av.nrows() {
            return Err(Error::InvalidArgument(format!(
                "row slice {start}..{end} of {} rows",
                av.nrows()
            )));
        }
        let out = av.slice(s![start..end, ..]).to_owned();
        Ok(self.push(out, Op::SliceRows(a, start, end)))
    }

    /// Row `r` of the output is row `index[r]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: Rc<Vec<usize>>) -> Result<Var> {
        let av = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= av.nrows()) {
            return Err(Error::NodeOutOfRange {
                index: bad,
                n_nodes: av.nrows(),
            });
        }
        let out = av.select(Axis(0), &index);
        Ok(self.push(out, Op::GatherRows(a, index)))
    }

    /// Output has `n_out` rows; row `r` of `a` is added into row `index[r]`.
    pub fn scatter_add_rows(&mut self, a: Var, index: Rc<Vec<usize>>, n_out: usize) -> Result<Var> {
        let av = self.value(a);
        if index.len() != av.nrows() {
            return Err(shape_err("scatter_add_rows", &[index.len()], &[av.nrows()]));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n_out) {
            return Err(Error::NodeOutOfRange { index: bad, n_nodes: n_out });
        }
        let mut out = Array2::zeros((n_out, av.ncols()));
        for (r, &i) in index.iter().enumerate() {
            let mut dst = out.row_mut(i);
            dst += &av.row(r);
        }
        Ok(self.push(out, Op::ScatterAddRows(a, index)))
    }

    pub fn aggregate(&mut self, a: Var, agg: Rc<Aggregation<F>>) -> Result<Var> {
        let av = self.value(a);
        if av.nrows() != agg.total_rows() {
            return Err(shape_err("aggregate", &[agg.total_rows()], &[av.nrows()]));
        }
        let out = agg.forward(av);
        Ok(self.push(out, Op::Aggregate(a, agg)))
    }

    /// Per-node weights: row `r` of `x` is multiplied by block `r % n_nodes`
    /// of `w`, where `w` stacks `n_nodes` matrices of shape `in x out`.
    pub fn node_matmul(&mut self, x: Var, w: Var, n_nodes: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let d_in = xv.ncols();
        if wv.nrows() != n_nodes * d_in || xv.nrows() % n_nodes != 0 {
            return Err(shape_err(
                "node_matmul",
                &[n_nodes * d_in, wv.ncols()],
                wv.shape(),
            ));
        }
        let mut out = Array2::zeros((xv.nrows(), wv.ncols()));
        let batches = xv.nrows() / n_nodes;
        for node in 0..n_nodes {
            let block = wv.slice(s![node * d_in..(node + 1) * d_in, ..]);
            let rows: Vec<usize> = (0..batches).map(|b| b * n_nodes + node).collect();
            let xs = xv.select(Axis(0), &rows);
            let ys = xs.dot(&block);
            for (k, &r) in rows.iter().enumerate() {
                out.row_mut(r).assign(&ys.row(k));
            }
        }
        Ok(self.push(out, Op::NodeMatMul { x, w, n_nodes }))
    }

    /// Row-major reinterpretation with a new column count.
    pub fn reshape(&mut self, a: Var, cols: usize) -> Result<Var> {
        let av = self.value(a);
        let total = av.len();
        if cols == 0 || !total.is_multiple_of(cols) {
            return Err(shape_err("reshape", &[total / cols.max(1), cols], av.shape()));
        }
        let flat: Vec<F> = av.iter().copied().collect();
        let out = Array2::from_shape_vec((total / cols, cols), flat).expect("size checked");
        Ok(self.push(out, Op::Reshape(a)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for mut row in out.rows_mut() {
            let m = row.fold(F::neg_infinity(), |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let total = row.sum();
            row.mapv_inplace(|x| x / total);
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Forward value `hard`, gradient routed unchanged to `soft`.
    pub fn straight_through(&mut self, hard: Array2<F>, soft: Var) -> Result<Var> {
        check_same("straight_through", &hard, self.value(soft))?;
        Ok(self.push(hard, Op::StraightThrough(soft)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = F::from(sum_f64(self.value(a))).unwrap();
        self.push(Array2::from_elem((1, 1), total), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = F::from(sum_f64(v) / v.len() as f64).unwrap();
        self.push(Array2::from_elem((1, 1), m), Op::Mean(a))
    }

    /// Accumulates `d loss / d param` into `stores[slot]` for every trainable
    /// parameter that contributed to `loss`, then clears the tape.
    pub fn backward(&mut self, loss: Var, stores: &mut [&mut ParamStore<F>]) -> Result<()> {
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if shape != [1, 1] {
            return Err(Error::NonScalarLoss(shape));
        }
        let mut grads: Vec<Option<Array2<F>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array2::from_elem((1, 1), F::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = &node.value;
            match &node.op {
                Op::Constant => {}
                Op::Param { slot, id } => {
                    if let Some(store) = stores.get_mut(*slot) {
                        store.accumulate_grad(*id, &g);
                    }
                }
                Op::MatMul(a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    accumulate(&mut grads, *a, g.dot(&bv.t()));
                    accumulate(&mut grads, *b, av.t().dot(&g));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, r) => {
                    accumulate(&mut grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.mapv(|x| -x));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * &self.nodes[b.0].value;
                    let gb = &g * &self.nodes[a.0].value;
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MulCol(a, c) => {
                    let cv = &self.nodes[c.0].value;
                    let av = &self.nodes[a.0].value;
                    let gc = (&g * av).sum_axis(Axis(1)).insert_axis(Axis(1));
                    accumulate(&mut grads, *a, &g * cv);
                    accumulate(&mut grads, *c, gc);
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut grads, *a, g.mapv(|x| x * c));
                }
                Op::AddConst(a) => accumulate(&mut grads, *a, g),
                Op::OneMinus(a) => accumulate(&mut grads, *a, g.mapv(|x| -x)),
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(y).for_each(|g, &s| *g = *g * s * (F::one() - s));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(y).for_each(|g, &t| *g *= F::one() - t * t);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Elu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(y).for_each(|g, &v| {
                        if v <= F::zero() {
                            *g *= v + F::one();
                        }
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::Exp(a) => accumulate(&mut grads, *a, &g * y),
                Op::Abs(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&self.nodes[a.0].value)
                        .for_each(|g, &x| *g *= sign(x));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Square(a) => {
                    let two = F::one() + F::one();
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&self.nodes[a.0].value)
                        .for_each(|g, &x| *g = *g * two * x);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sqrt(a) => {
                    let half = F::from(0.5).unwrap();
                    let mut ga = g;
                    Zip::from(&mut ga).and(y).for_each(|g, &r| {
                        *g = if r > F::zero() { *g * half / r } else { F::zero() };
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = self.nodes[p.0].value.ncols();
                        accumulate(&mut grads, *p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::SliceCols(a, start, end) => {
                    let mut ga = Array2::zeros(self.nodes[a.0].value.raw_dim());
                    ga.slice_mut(s![.., *start..*end]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start, end) => {
                    let mut ga = Array2::zeros(self.nodes[a.0].value.raw_dim());
                    ga.slice_mut(s![*start..*end, ..]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherRows(a, index) => {
                    let mut ga = Array2::zeros(self.nodes[a.0].value.raw_dim());
                    for (r, &i) in index.iter().enumerate() {
                        let mut dst = ga.row_mut(i);
                        dst += &g.row(r);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ScatterAddRows(a, index) => {
                    accumulate(&mut grads, *a, g.select(Axis(0), index));
                }
                Op::Aggregate(a, agg) => accumulate(&mut grads, *a, agg.transpose_apply(&g)),
                Op::NodeMatMul { x, w, n_nodes } => {
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[w.0].value;
                    let d_in = xv.ncols();
                    let batches = xv.nrows() / n_nodes;
                    let mut gx = Array2::zeros(xv.raw_dim());
                    let mut gw = Array2::zeros(wv.raw_dim());
                    for node in 0..*n_nodes {
                        let block = wv.slice(s![node * d_in..(node + 1) * d_in, ..]);
                        let rows: Vec<usize> = (0..batches).map(|b| b * n_nodes + node).collect();
                        let xs = xv.select(Axis(0), &rows);
                        let gs = g.select(Axis(0), &rows);
                        let gxs = gs.dot(&block.t());
                        for (k, &r) in rows.iter().enumerate() {
                            gx.row_mut(r).assign(&gxs.row(k));
                        }
                        gw.slice_mut(s![node * d_in..(node + 1) * d_in, ..])
                            .assign(&xs.t().dot(&gs));
                    }
                    accumulate(&mut grads, *x, gx);
                    accumulate(&mut grads, *w, gw);
                }
                Op::Reshape(a) => {
                    let dim = self.nodes[a.0].value.raw_dim();
                    let flat: Vec<F> = g.iter().copied().collect();
                    accumulate(&mut grads, *a, Array2::from_shape_vec(dim, flat).unwrap());
                }
                Op::SoftmaxRows(a) => {
                    let mut ga = &g * y;
                    for (mut row, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        Zip::from(&mut row).and(&yrow).for_each(|v, &p| *v -= p * dot);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::StraightThrough(soft) => accumulate(&mut grads, *soft, g),
                Op::Sum(a) => {
                    let g0 = g[[0, 0]];
                    let dim = self.nodes[a.0].value.raw_dim();
                    accumulate(&mut grads, *a, Array2::from_elem(dim, g0));
                }
                Op::Mean(a) => {
                    let v = &self.nodes[a.0].value;
                    let g0 = g[[0, 0]] / F::from(v.len()).unwrap();
                    accumulate(&mut grads, *a, Array2::from_elem(v.raw_dim(), g0));
                }
            }
        }
        self.clear();
        Ok(())
    }
}

fn accumulate<F: Real>(grads: &mut [Option<Array2<F>>], v: Var, g: Array2<F>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Sum with a 64-bit accumulator.
pub(crate) fn sum_f64<F: Real>(a: &Array2<F>) -> f64 {
    a.iter().map(|x| x.to_f64().unwrap()).sum()
}

pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

fn sign<F: Real>(x: F) -> F {
    if x > F::zero() {
        F::one()
    } else if x < F::zero() {
        -F::one()
    } else {
        F::zero()
    }
}
