//! Learnable node-embedding tables and their regularizers.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::node_index;
use crate::nn::{Init, ParamStore, Real, Tape, Var, EMBEDDING_SLOT};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingMode {
    #[default]
    Plain,
    /// Diagonal Gaussian posterior per node, sampled while training.
    Variational,
    /// Plain table pulled toward `K` learnable centroids.
    Clustered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

pub const DEFAULT_TAU: f64 = 1.0;
pub const DEFAULT_CLUSTERS: usize = 10;
pub const VARIATIONAL_SIGMA: f64 = 0.2;
pub const VARIATIONAL_MU_RANGE: f64 = 0.01;

/// How a fresh table is built: regularization mode, cluster count and
/// Gumbel temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TableSpec {
    pub mode: EmbeddingMode,
    pub n_clusters: usize,
    pub tau: f64,
}

impl Default for TableSpec {
    fn default() -> Self {
        Self { mode: EmbeddingMode::Plain, n_clusters: DEFAULT_CLUSTERS, tau: DEFAULT_TAU }
    }
}

impl TableSpec {
    pub fn build<F: Real>(&self, n_nodes: usize, dim: usize, seed: u64) -> Result<EmbeddingTable<F>> {
        EmbeddingTable::new(self.mode, n_nodes, dim, self.n_clusters, self.tau, seed)
    }
}

/// Per-node embedding table `N x d_v` held in its own parameter store.
///
/// Parameter names: `V` (plain and clustered), `mu` and `log_sigma`
/// (variational), `C` (`K x d_v` centroids) and `S` (`N x K` scores).
#[derive(Debug, Clone)]
pub struct EmbeddingTable<F> {
    mode: EmbeddingMode,
    n_nodes: usize,
    dim: usize,
    n_clusters: usize,
    tau: f64,
    pub params: ParamStore<F>,
}

impl<F: Real> EmbeddingTable<F> {
    /// Fresh table. Plain/clustered rows and centroids are `U(-1/sqrt(d_v),
    /// 1/sqrt(d_v))`, scores `U(0, 1)`; variational means are `U(-0.01,
    /// 0.01)` with every sigma at 0.2.
    pub fn new(mode: EmbeddingMode, n_nodes: usize, dim: usize, n_clusters: usize, tau: f64, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("embedding dimension must be positive".into()));
        }
        if n_nodes == 0 {
            return Err(Error::InvalidArgument("embedding table needs at least one node".into()));
        }
        if mode == EmbeddingMode::Clustered && n_clusters == 0 {
            return Err(Error::InvalidArgument("clustered table needs K >= 1".into()));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
        }
        let delta = 1.0 / (dim as f64).sqrt();
        let mut params = ParamStore::new(seed);
        match mode {
            EmbeddingMode::Plain => {
                params.get_or_create("V", (n_nodes, dim), Init::Uniform(-delta, delta))?;
            }
            EmbeddingMode::Variational => {
                let r = VARIATIONAL_MU_RANGE;
                params.get_or_create("mu", (n_nodes, dim), Init::Uniform(-r, r))?;
                params.get_or_create("log_sigma", (n_nodes, dim), Init::Constant(VARIATIONAL_SIGMA.ln()))?;
            }
            EmbeddingMode::Clustered => {
                params.get_or_create("V", (n_nodes, dim), Init::Uniform(-delta, delta))?;
                params.get_or_create("C", (n_clusters, dim), Init::Uniform(-delta, delta))?;
                params.get_or_create("S", (n_nodes, n_clusters), Init::Uniform(0.0, 1.0))?;
            }
        }
        Ok(Self { mode, n_nodes, dim, n_clusters, tau, params })
    }

    /// Rebuilds a table from stored parameters, checking names and shapes.
    pub fn from_params(mode: EmbeddingMode, tau: f64, params: ParamStore<F>) -> Result<Self> {
        let need = |name: &str| {
            params
                .get(name)
                .map(|v| v.dim())
                .ok_or_else(|| Error::Checkpoint(format!("embedding table lacks {name}")))
        };
        let (n_nodes, dim, n_clusters) = match mode {
            EmbeddingMode::Plain => {
                let (n, d) = need("V")?;
                (n, d, 0)
            }
            EmbeddingMode::Variational => {
                let (n, d) = need("mu")?;
                if need("log_sigma")? != (n, d) {
                    return Err(Error::Checkpoint("mu and log_sigma shapes differ".into()));
                }
                (n, d, 0)
            }
            EmbeddingMode::Clustered => {
                let (n, d) = need("V")?;
                let (k, dc) = need("C")?;
                if dc != d || need("S")? != (n, k) {
                    return Err(Error::Checkpoint("clustered table shapes disagree".into()));
                }
                (n, d, k)
            }
        };
        Ok(Self { mode, n_nodes, dim, n_clusters, tau, params })
    }

    pub fn mode(&self) -> EmbeddingMode {
        self.mode
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_clusters(&self) -> usize {
        self.n_clusters
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    fn param(&self, name: &str) -> &Array2<F> {
        self.params.get(name).expect("table parameters exist by construction")
    }

    fn param_var(&self, tape: &mut Tape<F>, name: &str) -> Var {
        let id = self.params.id(name).expect("table parameters exist by construction");
        tape.param(EMBEDDING_SLOT, &self.params, id)
    }

    /// Point table used for evaluation: `V` or `mu`.
    pub fn mean_table(&self) -> &Array2<F> {
        match self.mode {
            EmbeddingMode::Variational => self.param("mu"),
            _ => self.param("V"),
        }
    }

    pub fn sigma(&self) -> Option<Array2<F>> {
        (self.mode == EmbeddingMode::Variational).then(|| self.param("log_sigma").mapv(F::exp))
    }

    /// Embedding of node `i`; a reparameterized sample in the training phase
    /// of a variational table, the stored row otherwise.
    pub fn row<R: Rng + ?Sized>(&self, i: usize, phase: Phase, rng: &mut R) -> Result<Array1<F>> {
        if i >= self.n_nodes {
            return Err(Error::NodeOutOfRange { index: i, n_nodes: self.n_nodes });
        }
        let mean = self.mean_table().row(i).to_owned();
        if self.mode != EmbeddingMode::Variational || phase == Phase::Eval {
            return Ok(mean);
        }
        let log_sigma = self.param("log_sigma").row(i);
        Ok(mean
            .iter()
            .zip(log_sigma)
            .map(|(&m, &ls)| {
                let eps: f64 = StandardNormal.sample(rng);
                m + ls.exp() * F::from(eps).unwrap()
            })
            .collect())
    }

    /// Evaluation-phase rows tiled over `batch` windows.
    pub fn eval_rows(&self, batch: usize) -> Array2<F> {
        let table = self.mean_table();
        let mut out = Array2::zeros((batch * self.n_nodes, self.dim));
        for (r, mut row) in out.rows_mut().into_iter().enumerate() {
            row.assign(&table.row(r % self.n_nodes));
        }
        out
    }

    /// Records one embedding row per batched node row on the tape. Variational
    /// tables draw an independent sample for every row while training.
    pub fn batch_rows<R: Rng + ?Sized>(&self, tape: &mut Tape<F>, batch: usize, phase: Phase, rng: &mut R) -> Result<Var> {
        let rows = batch * self.n_nodes;
        let index = node_index(rows, self.n_nodes);
        match (self.mode, phase) {
            (EmbeddingMode::Variational, Phase::Train) => {
                let mu = self.param_var(tape, "mu");
                let ls = self.param_var(tape, "log_sigma");
                let mu = tape.gather_rows(mu, index.clone())?;
                let ls = tape.gather_rows(ls, index)?;
                let sigma = tape.exp(ls);
                let eps = Array2::from_shape_simple_fn((rows, self.dim), || {
                    let e: f64 = StandardNormal.sample(rng);
                    F::from(e).unwrap()
                });
                let eps = tape.constant(eps);
                let noise = tape.mul(sigma, eps)?;
                tape.add(mu, noise)
            }
            (EmbeddingMode::Variational, Phase::Eval) => {
                let mu = self.param_var(tape, "mu");
                tape.gather_rows(mu, index)
            }
            _ => {
                let v = self.param_var(tape, "V");
                tape.gather_rows(v, index)
            }
        }
    }

    /// `1/2 sum(mu^2 + sigma^2 - 1 - ln sigma^2)` over nodes and dimensions.
    pub fn kl_term(&self, tape: &mut Tape<F>) -> Result<Var> {
        if self.mode != EmbeddingMode::Variational {
            return Err(Error::InvalidArgument("kl_term needs a variational table".into()));
        }
        let mu = self.param_var(tape, "mu");
        let ls = self.param_var(tape, "log_sigma");
        let mu2 = tape.square(mu);
        let two_ls = tape.scale(ls, F::from(2.0).unwrap());
        let var = tape.exp(two_ls);
        let a = tape.add(mu2, var)?;
        let b = tape.sub(a, two_ls)?;
        let c = tape.add_const(b, -F::one());
        let total = tape.sum(c);
        Ok(tape.scale(total, F::from(0.5).unwrap()))
    }

    /// Monte-Carlo estimate of `E ||V - M C||_F` where every row of `M` is a
    /// straight-through Gumbel-softmax sample with logits `S / tau`.
    pub fn clustering_loss<R: Rng + ?Sized>(&self, tape: &mut Tape<F>, n_samples: usize, rng: &mut R) -> Result<Var> {
        if self.mode != EmbeddingMode::Clustered {
            return Err(Error::InvalidArgument("clustering_loss needs a clustered table".into()));
        }
        if n_samples == 0 {
            return Err(Error::InvalidArgument("clustering_loss needs n_samples >= 1".into()));
        }
        let v = self.param_var(tape, "V");
        let c = self.param_var(tape, "C");
        let s = self.param_var(tape, "S");
        let logits = tape.scale(s, F::from(1.0 / self.tau).unwrap());
        let mut total: Option<Var> = None;
        for _ in 0..n_samples {
            let gumbel = gumbel_noise::<F, R>(self.n_nodes, self.n_clusters, rng);
            let g = tape.constant(gumbel);
            let z = tape.add(logits, g)?;
            let hard = one_hot_argmax(tape.value(z));
            let soft = tape.softmax_rows(z);
            let m = tape.straight_through(hard, soft)?;
            let mc = tape.matmul(m, c)?;
            let diff = tape.sub(v, mc)?;
            let sq = tape.square(diff);
            let sum = tape.sum(sq);
            let norm = tape.sqrt(sum);
            total = Some(match total {
                Some(t) => tape.add(t, norm)?,
                None => norm,
            });
        }
        let total = total.expect("n_samples >= 1");
        Ok(tape.scale(total, F::from(1.0 / n_samples as f64).unwrap()))
    }

    /// Most likely cluster of every node, `argmax_k S[i, k]`.
    pub fn cluster_argmax(&self) -> Option<Vec<usize>> {
        (self.mode == EmbeddingMode::Clustered).then(|| {
            self.param("S")
                .rows()
                .into_iter()
                .map(|r| argmax(r.iter().copied()))
                .collect()
        })
    }

    /// Fresh table for a new node set: `N'` rows reinitialized, centroids
    /// (clustered mode) copied from `self` and frozen.
    pub fn reinit_for(&self, n_nodes: usize, seed: u64) -> Result<Self> {
        let mut fresh = Self::new(self.mode, n_nodes, self.dim, self.n_clusters.max(1), self.tau, seed)?;
        if self.mode == EmbeddingMode::Clustered {
            fresh.params.set("C", self.param("C").clone())?;
            fresh.params.set_trainable("C", false)?;
        }
        Ok(fresh)
    }
}

fn argmax<F: Real>(values: impl Iterator<Item = F>) -> usize {
    let mut best = (0, F::neg_infinity());
    for (k, v) in values.enumerate() {
        if v > best.1 {
            best = (k, v);
        }
    }
    best.0
}

fn one_hot_argmax<F: Real>(z: &Array2<F>) -> Array2<F> {
    let mut out = Array2::zeros(z.raw_dim());
    for (i, row) in z.rows().into_iter().enumerate() {
        out[[i, argmax(row.iter().copied())]] = F::one();
    }
    out
}

fn gumbel_noise<F: Real, R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<F> {
    Array2::from_shape_simple_fn((rows, cols), || {
        let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        F::from(-(-u.ln()).ln()).unwrap()
    })
}
