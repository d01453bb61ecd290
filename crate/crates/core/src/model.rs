//! Forecasting architectures assembled from the layers in [`crate::nn`]:
//! encoder, spatiotemporal processing (time-then-space or time-and-space),
//! and a multi-head decoder, plus the RNN baselines.
//!
//! Batches use the row layout `b * n_nodes + i`. Every forward returns a
//! `(batch * n_nodes) x (horizon * d_x)` prediction whose column
//! `h * d_x + c` is channel `c` at step `h`.

use std::collections::BTreeSet;

use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::Graph;
use crate::nn::layers::{
    dense, dense_maybe_local, gate_mix, gru_cell, gru_cell_local, mp_anisotropic, mp_isotropic,
};
use crate::nn::{Activation, Ctx, GraphBatch, ParamStore, Real, Tape, Var};
use crate::series::SeriesDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    /// Node-wise GRU followed by message-passing layers.
    Tts,
    /// GRU whose gates are message-passing operators.
    Tas,
    /// Node-wise GRU without any spatial processing.
    Rnn,
    /// One GRU over the concatenation of all node series.
    Fcrnn,
    /// A separate GRU model per node.
    Localrnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MpKind {
    Iso,
    Aniso,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Site {
    Encoder,
    Decoder,
}

fn default_rnn_layers() -> usize {
    1
}

fn default_max_local_params() -> usize {
    50_000_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: Family,
    pub mp_kind: MpKind,
    /// Message-passing layers after the GRU (time-then-space only).
    pub mp_layers: usize,
    /// Stacked gated cells (time-and-space only).
    #[serde(default = "default_rnn_layers")]
    pub rnn_layers: usize,
    pub hidden: usize,
    pub window: usize,
    pub horizon: usize,
    pub embedding_dim: usize,
    #[serde(default)]
    pub embedding_at: BTreeSet<Site>,
    #[serde(default)]
    pub local_weights_at: BTreeSet<Site>,
    pub input_dim: usize,
    #[serde(default)]
    pub exog_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    /// Weight neighbors by `a_ji` in the isotropic mean.
    #[serde(default)]
    pub weighted_mean: bool,
    /// Upper bound on the parameter count of models with per-node weights.
    #[serde(default = "default_max_local_params")]
    pub max_local_params: usize,
}

impl ModelConfig {
    /// Time-then-space model with the reference sizes for the synthetic data.
    pub fn tts(mp_kind: MpKind) -> Self {
        Self {
            family: Family::Tts,
            mp_kind,
            mp_layers: 2,
            rnn_layers: 1,
            hidden: 16,
            window: 6,
            horizon: 1,
            embedding_dim: 0,
            embedding_at: BTreeSet::new(),
            local_weights_at: BTreeSet::new(),
            input_dim: 1,
            exog_dim: 0,
            activation: Activation::Elu,
            weighted_mean: false,
            max_local_params: default_max_local_params(),
        }
    }

    pub fn with_embeddings(mut self, dim: usize, sites: &[Site]) -> Self {
        self.embedding_dim = dim;
        self.embedding_at = sites.iter().copied().collect();
        self
    }

    pub fn uses_embeddings(&self) -> bool {
        !self.embedding_at.is_empty()
    }

    fn emb_at(&self, site: Site) -> bool {
        self.embedding_at.contains(&site)
    }

    fn local_at(&self, site: Site) -> bool {
        self.family == Family::Localrnn || self.local_weights_at.contains(&site)
    }

    /// True when the parameter set depends on the number of nodes.
    pub fn is_node_specific(&self) -> bool {
        matches!(self.family, Family::Fcrnn | Family::Localrnn) || !self.local_weights_at.is_empty()
    }

    /// Checks every constraint and reports all violations together.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("hidden", self.hidden),
            ("window", self.window),
            ("horizon", self.horizon),
            ("input_dim", self.input_dim),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be at least 1"));
            }
        }
        if self.uses_embeddings() && self.embedding_dim == 0 {
            problems.push("embedding_at is set but embedding_dim is 0".into());
        }
        if !self.uses_embeddings() && self.embedding_dim > 0 {
            problems.push("embedding_dim > 0 but embedding_at is empty".into());
        }
        for site in &self.embedding_at {
            if self.local_weights_at.contains(site) {
                problems.push(format!("{site:?} has both embeddings and per-node weights"));
            }
        }
        match self.family {
            Family::Tts => {
                if self.mp_layers > 0 && self.mp_kind == MpKind::None {
                    problems.push("tts with mp_layers > 0 needs mp_kind iso or aniso".into());
                }
            }
            Family::Tas => {
                if self.mp_kind == MpKind::None {
                    problems.push("tas needs mp_kind iso or aniso".into());
                }
                if self.rnn_layers == 0 {
                    problems.push("tas needs rnn_layers >= 1".into());
                }
            }
            Family::Rnn => {
                if self.mp_kind != MpKind::None {
                    problems.push("rnn does not use message passing; set mp_kind = none".into());
                }
            }
            Family::Fcrnn | Family::Localrnn => {
                if self.mp_kind != MpKind::None {
                    problems.push(format!("{:?} does not use message passing", self.family));
                }
                if self.uses_embeddings() {
                    problems.push(format!("{:?} does not take node embeddings", self.family));
                }
                if !self.local_weights_at.is_empty() {
                    problems.push(format!("{:?} does not take local_weights_at", self.family));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Closed-form parameter count of the backbone (embedding tables excluded).
    pub fn param_count(&self, n_nodes: usize) -> usize {
        let (d_h, d_x, d_v, h) = (self.hidden, self.input_dim, self.embedding_dim, self.horizon);
        let d_in = self.input_dim + self.exog_dim;
        let dense = |i: usize, o: usize| i * o + o;
        let local = |site: Site| if self.local_at(site) { n_nodes } else { 1 };
        let gru = |i: usize| 3 * dense(i + d_h, d_h);
        let iso = |i: usize, o: usize| dense(i, o) + i * o;
        let aniso = |i: usize, o: usize| dense(2 * i + 1, o) + dense(o, o) + dense(o, 1) + dense(i, o);
        let mp = |i: usize, o: usize| match self.mp_kind {
            MpKind::Iso => iso(i, o),
            MpKind::Aniso => aniso(i, o),
            MpKind::None => 0,
        };
        if self.family == Family::Fcrnn {
            return dense(n_nodes * d_in, d_h) + gru(d_h) + dense(d_h, d_h) + h * dense(d_h, n_nodes * d_x);
        }
        let enc_in = d_in + if self.emb_at(Site::Encoder) { d_v } else { 0 };
        let dec_in = d_h + if self.emb_at(Site::Decoder) { d_v } else { 0 };
        let encoder = local(Site::Encoder) * dense(enc_in, d_h);
        let core = match self.family {
            Family::Tts => gru(d_h) + self.mp_layers * mp(d_h, d_h),
            Family::Tas => self.rnn_layers * 3 * mp(2 * d_h, d_h),
            Family::Rnn => gru(d_h),
            Family::Localrnn => n_nodes * gru(d_h),
            Family::Fcrnn => unreachable!(),
        };
        let dec_dense = if self.family == Family::Localrnn { n_nodes } else { 1 } * dense(dec_in, d_h);
        let heads = local(Site::Decoder) * h * dense(d_h, d_x);
        encoder + core + dec_dense + heads
    }
}

/// Model inputs for `batch` windows over the same node set.
#[derive(Debug, Clone)]
pub struct Batch<F> {
    pub batch: usize,
    pub n_nodes: usize,
    /// One `(batch * n_nodes) x d_x` array per window step, oldest first.
    pub inputs: Vec<Array2<F>>,
    /// Exogenous channels aligned with `inputs` (`d_u` may be 0).
    pub exogenous: Vec<Array2<F>>,
    /// `(batch * n_nodes) x (horizon * d_x)`.
    pub targets: Array2<F>,
}

impl<F: Real> Batch<F> {
    /// Windows ending just before each anchor: inputs `[t - W, t)`, targets
    /// `[t, t + H)`.
    pub fn from_anchors(data: &SeriesDataset, anchors: &[usize], window: usize, horizon: usize) -> Result<Self> {
        let (n, d_x, d_u) = (data.n_nodes(), data.n_channels(), data.n_exogenous());
        let b = anchors.len();
        for &t in anchors {
            if t < window || t + horizon > data.n_steps() {
                return Err(Error::InvalidArgument(format!(
                    "anchor {t} needs steps [{}, {}) of {}",
                    t as isize - window as isize,
                    t + horizon,
                    data.n_steps()
                )));
            }
        }
        let cast = |x: f64| F::from(x).unwrap();
        let mut inputs = Vec::with_capacity(window);
        let mut exogenous = Vec::with_capacity(window);
        for step in 0..window {
            let mut x = Array2::zeros((b * n, d_x));
            let mut u = Array2::zeros((b * n, d_u));
            for (k, &t) in anchors.iter().enumerate() {
                let src = t - window + step;
                x.slice_mut(s![k * n..(k + 1) * n, ..]).zip_mut_with(&data.frame(src), |a, &v| *a = cast(v));
                if let Some(uf) = data.exogenous_frame(src) {
                    u.slice_mut(s![k * n..(k + 1) * n, ..]).zip_mut_with(&uf, |a, &v| *a = cast(v));
                }
            }
            inputs.push(x);
            exogenous.push(u);
        }
        let mut targets = Array2::zeros((b * n, horizon * d_x));
        for (k, &t) in anchors.iter().enumerate() {
            for h in 0..horizon {
                targets
                    .slice_mut(s![k * n..(k + 1) * n, h * d_x..(h + 1) * d_x])
                    .zip_mut_with(&data.frame(t + h), |a, &v| *a = cast(v));
            }
        }
        Ok(Self { batch: b, n_nodes: n, inputs, exogenous, targets })
    }

    pub fn rows(&self) -> usize {
        self.batch * self.n_nodes
    }

    pub fn window(&self) -> usize {
        self.inputs.len()
    }
}

/// Reshapes a `(batch * n_nodes) x (horizon * d_x)` prediction into
/// `batch x n_nodes x (horizon * d_x)`.
pub fn unflatten<F: Real>(pred: &Array2<F>, n_nodes: usize) -> Result<Array3<F>> {
    let (rows, cols) = pred.dim();
    if n_nodes == 0 || rows % n_nodes != 0 {
        return Err(shape_err("prediction rows", &[n_nodes], &[rows]));
    }
    Ok(pred
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((rows / n_nodes, n_nodes, cols))
        .expect("contiguous reshape"))
}

/// Elementwise sum of a global and a local forecast.
pub fn hybrid_sum_forward<F: Real>(global: &Array3<F>, local: &Array3<F>) -> Result<Array3<F>> {
    if global.dim() != local.dim() {
        return Err(shape_err("hybrid forecast", global.shape(), local.shape()));
    }
    Ok(global + local)
}

/// A configured architecture with its backbone parameters.
#[derive(Debug, Clone)]
pub struct Model<F> {
    config: ModelConfig,
    /// Node count the parameters are tied to, for node-specific families.
    n_nodes: usize,
    pub params: ParamStore<F>,
}

impl<F: Real> Model<F> {
    /// Builds and initializes every parameter by running a forward pass on a
    /// dummy batch.
    pub fn new(config: ModelConfig, n_nodes: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if n_nodes == 0 {
            return Err(Error::InvalidArgument("model needs at least one node".into()));
        }
        if config.is_node_specific() {
            let count = config.param_count(n_nodes);
            if count > config.max_local_params {
                return Err(Error::Config(format!(
                    "{count} parameters exceed max_local_params = {}",
                    config.max_local_params
                )));
            }
        }
        let mut model = Self { config, n_nodes, params: ParamStore::new(seed) };
        model.materialize()?;
        Ok(model)
    }

    /// Wraps existing parameters; fails when names or shapes disagree with
    /// the configuration.
    pub fn from_params(config: ModelConfig, n_nodes: usize, params: ParamStore<F>) -> Result<Self> {
        config.validate()?;
        let expected = Self::new(config.clone(), n_nodes, 0)?;
        if expected.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameters, found {}",
                expected.params.len(),
                params.len()
            )));
        }
        for e in expected.params.entries() {
            match params.get(&e.name) {
                Some(v) if v.dim() == e.value.dim() => {}
                Some(v) => return Err(shape_err(format!("parameter {}", e.name), e.value.shape(), v.shape())),
                None => return Err(Error::Checkpoint(format!("missing parameter {}", e.name))),
            }
        }
        Ok(Self { config, n_nodes, params })
    }

    fn materialize(&mut self) -> Result<()> {
        let n = self.n_nodes;
        let c = &self.config;
        let data = SeriesDataset::new(
            Array3::zeros((c.window + c.horizon, n, c.input_dim)),
            (c.exog_dim > 0).then(|| Array3::zeros((c.window + c.horizon, n, c.exog_dim))),
        )?;
        let batch = Batch::from_anchors(&data, &[c.window], c.window, c.horizon)?;
        let pairs: Vec<_> = (0..n).map(|i| (i, i, 1.0)).collect();
        let g = Graph::undirected(n, &pairs)?;
        let gb = GraphBatch::new(&g, 1, c.weighted_mean);
        let mut tape = Tape::new();
        let emb = c
            .uses_embeddings()
            .then(|| tape.constant(Array2::zeros((n, c.embedding_dim))));
        self.forward(&mut tape, &batch, &gb, emb)?;
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    /// Records the forward pass on `tape`. `emb` holds one embedding row per
    /// batched node row and must be present exactly when the configuration
    /// uses embeddings.
    pub fn forward(&mut self, tape: &mut Tape<F>, batch: &Batch<F>, gb: &GraphBatch<F>, emb: Option<Var>) -> Result<Var> {
        let c = self.config.clone();
        let rows = batch.rows();
        if batch.window() != c.window {
            return Err(shape_err("window length", &[c.window], &[batch.window()]));
        }
        if gb.n_nodes != batch.n_nodes || gb.batch != batch.batch {
            return Err(shape_err("graph batch", &[batch.batch, batch.n_nodes], &[gb.batch, gb.n_nodes]));
        }
        if c.is_node_specific() && batch.n_nodes != self.n_nodes {
            return Err(Error::NodeOutOfRange { index: batch.n_nodes, n_nodes: self.n_nodes });
        }
        if let Some(x) = batch.inputs.first() {
            if x.ncols() != c.input_dim {
                return Err(shape_err("input channels", &[c.input_dim], &[x.ncols()]));
            }
        }
        if let Some(u) = batch.exogenous.first() {
            if u.ncols() != c.exog_dim {
                return Err(shape_err("exogenous channels", &[c.exog_dim], &[u.ncols()]));
            }
        }
        match (c.uses_embeddings(), emb) {
            (true, None) => return Err(Error::InvalidArgument("model expects node embeddings".into())),
            (false, Some(_)) => return Err(Error::InvalidArgument("model takes no node embeddings".into())),
            (true, Some(e)) => {
                if tape.shape(e) != (rows, c.embedding_dim) {
                    let (r, d) = tape.shape(e);
                    return Err(shape_err("embedding rows", &[rows, c.embedding_dim], &[r, d]));
                }
            }
            (false, None) => {}
        }
        let mut ctx = Ctx::new(tape, &mut self.params);
        if c.family == Family::Fcrnn {
            return fc_forward(&mut ctx, &c, batch);
        }
        let n = batch.n_nodes;
        let local = |site: Site| c.local_at(site).then_some(n);

        let encoded = (0..c.window)
            .map(|s| {
                let mut parts = vec![ctx.tape.constant(batch.inputs[s].clone())];
                if c.exog_dim > 0 {
                    parts.push(ctx.tape.constant(batch.exogenous[s].clone()));
                }
                if c.emb_at(Site::Encoder) {
                    parts.push(emb.expect("checked above"));
                }
                let x = ctx.tape.concat_cols(&parts)?;
                dense_maybe_local(&mut ctx, x, "encoder", c.hidden, true, local(Site::Encoder))
            })
            .collect::<Result<Vec<_>>>()?;

        let state = match c.family {
            Family::Tts | Family::Rnn | Family::Localrnn => {
                let mut h = ctx.tape.constant(Array2::zeros((rows, c.hidden)));
                for &x in &encoded {
                    h = if c.family == Family::Localrnn {
                        gru_cell_local(&mut ctx, x, h, "gru", n)?
                    } else {
                        gru_cell(&mut ctx, x, h, "gru")?
                    };
                }
                if c.family == Family::Tts {
                    for l in 0..c.mp_layers {
                        h = message_pass(&mut ctx, &c, h, gb, &format!("mp/{l}"), c.hidden, c.activation)?;
                    }
                }
                h
            }
            Family::Tas => {
                let mut states: Vec<Var> = (0..c.rnn_layers)
                    .map(|_| ctx.tape.constant(Array2::zeros((rows, c.hidden))))
                    .collect();
                for &x in &encoded {
                    let mut input = x;
                    for (l, h) in states.iter_mut().enumerate() {
                        *h = tas_cell(&mut ctx, &c, input, *h, gb, &format!("tas/{l}"))?;
                        input = *h;
                    }
                }
                *states.last().expect("rnn_layers >= 1")
            }
            Family::Fcrnn => unreachable!(),
        };

        let mut dec_in = state;
        if c.emb_at(Site::Decoder) {
            dec_in = ctx.tape.concat_cols(&[state, emb.expect("checked above")])?;
        }
        let dec_local = (c.family == Family::Localrnn).then_some(n);
        let z = dense_maybe_local(&mut ctx, dec_in, "decoder/dense", c.hidden, true, dec_local)?;
        let z = c.activation.apply(ctx.tape, z);
        let heads = (0..c.horizon)
            .map(|h| dense_maybe_local(&mut ctx, z, &format!("decoder/head_{h}"), c.input_dim, true, local(Site::Decoder)))
            .collect::<Result<Vec<_>>>()?;
        ctx.tape.concat_cols(&heads)
    }

    /// Deterministic predictions for `batch`, shaped `batch x N x (H * d_x)`.
    pub fn predict(&mut self, batch: &Batch<F>, gb: &GraphBatch<F>, emb_rows: Option<&Array2<F>>) -> Result<Array3<F>> {
        let mut tape = Tape::new();
        let emb = emb_rows.map(|e| tape.constant(e.clone()));
        let out = self.forward(&mut tape, batch, gb, emb)?;
        unflatten(tape.value(out), batch.n_nodes)
    }
}

fn message_pass<F: Real>(
    ctx: &mut Ctx<'_, F>,
    c: &ModelConfig,
    h: Var,
    gb: &GraphBatch<F>,
    name: &str,
    out_dim: usize,
    act: Activation,
) -> Result<Var> {
    match c.mp_kind {
        MpKind::Iso => mp_isotropic(ctx, h, gb, name, out_dim, act),
        MpKind::Aniso => mp_anisotropic(ctx, h, gb, name, out_dim, act),
        MpKind::None => Err(Error::Config("message passing requested with mp_kind = none".into())),
    }
}

/// Gated recurrent cell whose three gates are message-passing operators on
/// `[input || state]`.
fn tas_cell<F: Real>(
    ctx: &mut Ctx<'_, F>,
    c: &ModelConfig,
    input: Var,
    h: Var,
    gb: &GraphBatch<F>,
    name: &str,
) -> Result<Var> {
    let id = Activation::Identity;
    let xh = ctx.tape.concat_cols(&[input, h])?;
    let r = message_pass(ctx, c, xh, gb, &format!("{name}/r"), c.hidden, id)?;
    let r = ctx.tape.sigmoid(r);
    let o = message_pass(ctx, c, xh, gb, &format!("{name}/o"), c.hidden, id)?;
    let o = ctx.tape.sigmoid(o);
    let rh = ctx.tape.mul(r, h)?;
    let xrh = ctx.tape.concat_cols(&[input, rh])?;
    let cand = message_pass(ctx, c, xrh, gb, &format!("{name}/c"), c.hidden, id)?;
    let cand = ctx.tape.tanh(cand);
    gate_mix(ctx.tape, o, h, cand)
}

/// Fully connected RNN: all node series form one multivariate sequence.
fn fc_forward<F: Real>(ctx: &mut Ctx<'_, F>, c: &ModelConfig, batch: &Batch<F>) -> Result<Var> {
    let n = batch.n_nodes;
    let d_in = c.input_dim + c.exog_dim;
    let mut h = ctx.tape.constant(Array2::zeros((batch.batch, c.hidden)));
    for s in 0..c.window {
        let mut parts = vec![ctx.tape.constant(batch.inputs[s].clone())];
        if c.exog_dim > 0 {
            parts.push(ctx.tape.constant(batch.exogenous[s].clone()));
        }
        let x = ctx.tape.concat_cols(&parts)?;
        let flat = ctx.tape.reshape(x, n * d_in)?;
        let enc = dense(ctx, flat, "encoder", c.hidden, true)?;
        h = gru_cell(ctx, enc, h, "gru")?;
    }
    let z = dense(ctx, h, "decoder/dense", c.hidden, true)?;
    let z = c.activation.apply(ctx.tape, z);
    let heads = (0..c.horizon)
        .map(|k| {
            let y = dense(ctx, z, &format!("decoder/head_{k}"), n * c.input_dim, true)?;
            ctx.tape.reshape(y, c.input_dim)
        })
        .collect::<Result<Vec<_>>>()?;
    ctx.tape.concat_cols(&heads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_data(t: usize, n: usize) -> SeriesDataset {
        let values = Array3::from_shape_fn((t, n, 1), |(s, i, _)| ((s * 7 + i * 3) % 11) as f64 / 11.0 - 0.5);
        SeriesDataset::new(values, None).unwrap()
    }

    fn configs() -> Vec<ModelConfig> {
        let mut out = Vec::new();
        for kind in [MpKind::Iso, MpKind::Aniso] {
            out.push(ModelConfig::tts(kind));
            out.push(ModelConfig::tts(kind).with_embeddings(3, &[Site::Encoder, Site::Decoder]));
            out.push(ModelConfig { family: Family::Tas, ..ModelConfig::tts(kind) });
        }
        for family in [Family::Rnn, Family::Fcrnn, Family::Localrnn] {
            out.push(ModelConfig { family, mp_kind: MpKind::None, ..ModelConfig::tts(MpKind::Iso) });
        }
        let mut local = ModelConfig::tts(MpKind::Iso);
        local.local_weights_at = [Site::Encoder, Site::Decoder].into_iter().collect();
        out.push(local);
        out
    }

    #[test]
    fn param_counts_match_closed_form() {
        for mut c in configs() {
            c.hidden = 5;
            c.horizon = 2;
            c.exog_dim = 1;
            let m = Model::<f64>::new(c.clone(), 4, 0).unwrap();
            assert_eq!(m.params.count(false), c.param_count(4), "{c:?}");
        }
    }

    #[test]
    fn output_shapes() {
        let data = toy_data(20, 4);
        let g = Graph::undirected(4, &[(0, 1, 1.0), (1, 2, 1.0), (2, 3, 1.0)]).unwrap();
        for mut c in configs() {
            c.horizon = 3;
            let mut m = Model::<f64>::new(c.clone(), 4, 1).unwrap();
            let batch = Batch::from_anchors(&data, &[6, 9], c.window, c.horizon).unwrap();
            let gb = GraphBatch::new(&g, 2, false);
            let emb = c.uses_embeddings().then(|| Array2::from_elem((8, 3), 0.1));
            let out = m.predict(&batch, &gb, emb.as_ref()).unwrap();
            assert_eq!(out.dim(), (2, 4, 3), "{c:?}");
            assert!(out.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn validation_collects_problems() {
        let mut c = ModelConfig::tts(MpKind::None);
        c.hidden = 0;
        c.embedding_at.insert(Site::Encoder);
        let err = c.validate().unwrap_err().to_string();
        assert!(err.contains("hidden") && err.contains("embedding_dim") && err.contains("mp_kind"));
        let fc = ModelConfig { family: Family::Fcrnn, ..ModelConfig::tts(MpKind::Iso) }.with_embeddings(2, &[Site::Encoder]);
        assert!(fc.validate().is_err());
    }

    #[test]
    fn local_memory_guard() {
        let c = ModelConfig { family: Family::Localrnn, mp_kind: MpKind::None, max_local_params: 100, ..ModelConfig::tts(MpKind::Iso) };
        assert!(matches!(Model::<f32>::new(c, 10, 0), Err(Error::Config(_))));
    }

    #[test]
    fn hybrid_sum_cases() {
        let a = Array3::from_shape_fn((2, 3, 1), |(i, j, _)| (i * 3 + j) as f64);
        let zero = Array3::zeros((2, 3, 1));
        assert_eq!(hybrid_sum_forward(&a, &zero).unwrap(), a);
        assert!(hybrid_sum_forward(&a, &a.mapv(|v| -v)).unwrap().iter().all(|&v| v == 0.0));
        assert!(hybrid_sum_forward(&a, &Array3::zeros((2, 2, 1))).is_err());
    }

    #[test]
    fn batch_layout() {
        let data = toy_data(10, 3);
        let b = Batch::<f64>::from_anchors(&data, &[6, 9], 6, 1).unwrap();
        assert_eq!(b.inputs.len(), 6);
        assert_eq!(b.inputs[0][[4, 0]], data.values()[[3, 1, 0]]);
        assert_eq!(b.targets[[5, 0]], data.values()[[9, 2, 0]]);
        assert!(Batch::<f64>::from_anchors(&data, &[5], 6, 1).is_err());
        assert!(Batch::<f64>::from_anchors(&data, &[10], 6, 1).is_err());
    }
}
