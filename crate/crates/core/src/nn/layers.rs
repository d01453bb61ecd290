//! Layers built on the tape: dense maps (shared or per-node), the gated
//! recurrent cell, and the isotropic and anisotropic message-passing operators.

use std::rc::Rc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::params::{Init, ParamStore};
use super::tape::{Aggregation, Tape, Var};
use super::Real;
use crate::error::{shape_err, Result};
use crate::graph::Graph;

/// Slot of the backbone store in [`Tape::backward`].
pub const MODEL_SLOT: usize = 0;
/// Slot of the embedding-table store in [`Tape::backward`].
pub const EMBEDDING_SLOT: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    #[default]
    Elu,
    Tanh,
}

impl Activation {
    pub fn apply<F: Real>(self, tape: &mut Tape<F>, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Elu => tape.elu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

/// A tape paired with the backbone parameter store.
pub struct Ctx<'a, F: Real> {
    pub tape: &'a mut Tape<F>,
    pub store: &'a mut ParamStore<F>,
}

impl<'a, F: Real> Ctx<'a, F> {
    pub fn new(tape: &'a mut Tape<F>, store: &'a mut ParamStore<F>) -> Self {
        Self { tape, store }
    }

    fn param(&mut self, name: &str, shape: (usize, usize), init: Init) -> Result<Var> {
        let id = self.store.get_or_create(name, shape, init)?;
        Ok(self.tape.param(MODEL_SLOT, self.store, id))
    }
}

/// `y = x W (+ b)` with `W: in x out`.
pub fn dense<F: Real>(ctx: &mut Ctx<'_, F>, x: Var, name: &str, out_dim: usize, bias: bool) -> Result<Var> {
    let d_in = ctx.tape.shape(x).1;
    let w = ctx.param(&format!("{name}/W"), (d_in, out_dim), Init::FanIn(d_in))?;
    let mut y = ctx.tape.matmul(x, w)?;
    if bias {
        let b = ctx.param(&format!("{name}/b"), (1, out_dim), Init::Zeros)?;
        y = ctx.tape.add_row(y, b)?;
    }
    Ok(y)
}

/// Row index `r -> r % n_nodes` for `rows` batched node rows.
pub fn node_index(rows: usize, n_nodes: usize) -> Rc<Vec<usize>> {
    Rc::new((0..rows).map(|r| r % n_nodes).collect())
}

/// Dense map with a separate `W^i` (and `b^i`) for every node.
pub fn dense_local<F: Real>(
    ctx: &mut Ctx<'_, F>,
    x: Var,
    name: &str,
    out_dim: usize,
    bias: bool,
    n_nodes: usize,
) -> Result<Var> {
    let (rows, d_in) = ctx.tape.shape(x);
    let w = ctx.param(&format!("{name}/W"), (n_nodes * d_in, out_dim), Init::FanIn(d_in))?;
    let mut y = ctx.tape.node_matmul(x, w, n_nodes)?;
    if bias {
        let b = ctx.param(&format!("{name}/b"), (n_nodes, out_dim), Init::Zeros)?;
        let tiled = ctx.tape.gather_rows(b, node_index(rows, n_nodes))?;
        y = ctx.tape.add(y, tiled)?;
    }
    Ok(y)
}

/// Shared or per-node dense map.
pub fn dense_maybe_local<F: Real>(
    ctx: &mut Ctx<'_, F>,
    x: Var,
    name: &str,
    out_dim: usize,
    bias: bool,
    local_nodes: Option<usize>,
) -> Result<Var> {
    match local_nodes {
        Some(n) => dense_local(ctx, x, name, out_dim, bias, n),
        None => dense(ctx, x, name, out_dim, bias),
    }
}

/// Gated recurrent update applied row-wise with shared weights:
///
/// ```text
/// r  = sigmoid(W1 [x || h])
/// o  = sigmoid(W2 [x || h])
/// c  = tanh(W3 [x || r * h])
/// h' = o * h + (1 - o) * c
/// ```
pub fn gru_cell<F: Real>(ctx: &mut Ctx<'_, F>, x: Var, h_prev: Var, name: &str) -> Result<Var> {
    gru_cell_impl(ctx, x, h_prev, name, None)
}

/// [`gru_cell`] with a separate parameter set per node.
pub fn gru_cell_local<F: Real>(
    ctx: &mut Ctx<'_, F>,
    x: Var,
    h_prev: Var,
    name: &str,
    n_nodes: usize,
) -> Result<Var> {
    gru_cell_impl(ctx, x, h_prev, name, Some(n_nodes))
}

fn gru_cell_impl<F: Real>(
    ctx: &mut Ctx<'_, F>,
    x: Var,
    h_prev: Var,
    name: &str,
    local: Option<usize>,
) -> Result<Var> {
    let (xr, _) = ctx.tape.shape(x);
    let (hr, d_h) = ctx.tape.shape(h_prev);
    if xr != hr {
        return Err(shape_err("gru_cell rows", &[xr], &[hr]));
    }
    let xh = ctx.tape.concat_cols(&[x, h_prev])?;
    let r = dense_maybe_local(ctx, xh, &format!("{name}/r"), d_h, true, local)?;
    let r = ctx.tape.sigmoid(r);
    let o = dense_maybe_local(ctx, xh, &format!("{name}/o"), d_h, true, local)?;
    let o = ctx.tape.sigmoid(o);
    let rh = ctx.tape.mul(r, h_prev)?;
    let xrh = ctx.tape.concat_cols(&[x, rh])?;
    let c = dense_maybe_local(ctx, xrh, &format!("{name}/c"), d_h, true, local)?;
    let c = ctx.tape.tanh(c);
    gate_mix(ctx.tape, o, h_prev, c)
}

/// `o * h + (1 - o) * c`.
pub(crate) fn gate_mix<F: Real>(tape: &mut Tape<F>, o: Var, h: Var, c: Var) -> Result<Var> {
    let keep = tape.mul(o, h)?;
    let one_minus = tape.one_minus(o);
    let fresh = tape.mul(one_minus, c)?;
    tape.add(keep, fresh)
}

/// Graph structure expanded over a batch of `batch` windows, in the row
/// layout `b * n_nodes + i` used throughout the models.
#[derive(Debug, Clone)]
pub struct GraphBatch<F> {
    pub n_nodes: usize,
    pub batch: usize,
    /// Mean over in-neighbors (unweighted or weight-normalized).
    pub mean: Rc<Aggregation<F>>,
    /// Batched row of the receiving node of every edge.
    pub edge_dst: Rc<Vec<usize>>,
    /// Batched row of the sending node of every edge.
    pub edge_src: Rc<Vec<usize>>,
    /// Edge weights `a_ji`, one row per batched edge.
    pub edge_weight: Array2<F>,
}

impl<F: Real> GraphBatch<F> {
    pub fn new(g: &Graph, batch: usize, weighted_mean: bool) -> Self {
        let n = g.n_nodes();
        let rows = (0..n)
            .map(|i| {
                let nb = g.neighbors_in(i);
                let total: f64 = if weighted_mean {
                    nb.iter().map(|&(_, w)| w).sum()
                } else {
                    nb.len() as f64
                };
                nb.iter()
                    .map(|&(j, w)| {
                        let coeff = if weighted_mean { w / total } else { 1.0 / total };
                        (j, F::from(coeff).unwrap())
                    })
                    .collect()
            })
            .collect();
        let edges = g.edges();
        let e = edges.len();
        let mut dst = Vec::with_capacity(batch * e);
        let mut src = Vec::with_capacity(batch * e);
        let mut weight = Array2::zeros((batch * e, 1));
        for b in 0..batch {
            for (k, edge) in edges.iter().enumerate() {
                dst.push(b * n + edge.dst);
                src.push(b * n + edge.src);
                weight[[b * e + k, 0]] = F::from(edge.weight).unwrap();
            }
        }
        Self {
            n_nodes: n,
            batch,
            mean: Rc::new(Aggregation::new(n, batch, rows)),
            edge_dst: Rc::new(dst),
            edge_src: Rc::new(src),
            edge_weight: weight,
        }
    }

    pub fn rows(&self) -> usize {
        self.n_nodes * self.batch
    }

    pub fn n_edges(&self) -> usize {
        self.edge_dst.len()
    }
}

fn check_rows<F: Real>(tape: &Tape<F>, h: Var, gb: &GraphBatch<F>, context: &str) -> Result<()> {
    let rows = tape.shape(h).0;
    if rows != gb.rows() {
        return Err(shape_err(context, &[gb.rows()], &[rows]));
    }
    Ok(())
}

/// `h'_i = act(W1 h_i + mean_{j in N(i)} W2 h_j)`; an empty neighborhood
/// contributes zero.
pub fn mp_isotropic<F: Real>(
    ctx: &mut Ctx<'_, F>,
    h: Var,
    gb: &GraphBatch<F>,
    name: &str,
    out_dim: usize,
    act: Activation,
) -> Result<Var> {
    check_rows(ctx.tape, h, gb, "mp_isotropic")?;
    let d_in = ctx.tape.shape(h).1;
    let self_term = dense(ctx, h, &format!("{name}/W1"), out_dim, true)?;
    let w2 = ctx.param(&format!("{name}/W2/W"), (d_in, out_dim), Init::FanIn(d_in))?;
    let mean = ctx.tape.aggregate(h, gb.mean.clone())?;
    let neigh = ctx.tape.matmul(mean, w2)?;
    let pre = ctx.tape.add(self_term, neigh)?;
    Ok(act.apply(ctx.tape, pre))
}

/// Gated edge messages:
///
/// ```text
/// m_ji  = W2 act(W1 [h_i || h_j || a_ji])
/// alpha = sigmoid(W0 m_ji)
/// h'_i  = act(W3 h_i + sum_{j in N(i)} alpha_ji m_ji)
/// ```
pub fn mp_anisotropic<F: Real>(
    ctx: &mut Ctx<'_, F>,
    h: Var,
    gb: &GraphBatch<F>,
    name: &str,
    out_dim: usize,
    act: Activation,
) -> Result<Var> {
    check_rows(ctx.tape, h, gb, "mp_anisotropic")?;
    let d_in = ctx.tape.shape(h).1;
    let fan_in = 2 * d_in + 1;
    let w1 = ctx.param(&format!("{name}/W1/W"), (fan_in, out_dim), Init::FanIn(fan_in))?;
    let b1 = ctx.param(&format!("{name}/W1/b"), (1, out_dim), Init::Zeros)?;
    let w2 = ctx.param(&format!("{name}/W2/W"), (out_dim, out_dim), Init::FanIn(out_dim))?;
    let b2 = ctx.param(&format!("{name}/W2/b"), (1, out_dim), Init::Zeros)?;
    let w0 = ctx.param(&format!("{name}/W0/W"), (out_dim, 1), Init::FanIn(out_dim))?;
    let b0 = ctx.param(&format!("{name}/W0/b"), (1, 1), Init::Zeros)?;
    let self_term = dense(ctx, h, &format!("{name}/W3"), out_dim, true)?;

    if gb.n_edges() == 0 {
        return Ok(act.apply(ctx.tape, self_term));
    }
    let tape = &mut *ctx.tape;
    // W1 [h_i || h_j || a] split into its three row blocks.
    let w_dst = tape.slice_rows(w1, 0, d_in)?;
    let w_src = tape.slice_rows(w1, d_in, 2 * d_in)?;
    let w_a = tape.slice_rows(w1, 2 * d_in, fan_in)?;
    let p_dst = tape.matmul(h, w_dst)?;
    let p_src = tape.matmul(h, w_src)?;
    let e_dst = tape.gather_rows(p_dst, gb.edge_dst.clone())?;
    let e_src = tape.gather_rows(p_src, gb.edge_src.clone())?;
    let a = tape.constant(gb.edge_weight.clone());
    let e_a = tape.matmul(a, w_a)?;
    let pre = tape.add(e_dst, e_src)?;
    let pre = tape.add(pre, e_a)?;
    let pre = tape.add_row(pre, b1)?;
    let hidden = act.apply(tape, pre);
    let msg = tape.matmul(hidden, w2)?;
    let msg = tape.add_row(msg, b2)?;
    let gate = tape.matmul(msg, w0)?;
    let gate = tape.add_row(gate, b0)?;
    let gate = tape.sigmoid(gate);
    let gated = tape.mul_col(msg, gate)?;
    let agg = tape.scatter_add_rows(gated, gb.edge_dst.clone(), gb.rows())?;
    let pre = tape.add(self_term, agg)?;
    Ok(act.apply(tape, pre))
}
