//! Sensor graphs: construction, normalization and neighbor access.
//!
//! Edges are stored explicitly, including self-loops, so that message passing
//! and the graph polynomial filter of the synthetic process see the same
//! structure. `neighbor_in[i]` lists every `(j, a_ji)` with an edge `j -> i`.

use std::collections::{HashMap, HashSet};

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n_nodes: usize,
    edges: Vec<Edge>,
    directed: bool,
    neighbor_in: Vec<Vec<(usize, f64)>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    None,
    #[default]
    Symmetric,
    Row,
}

/// Parameters of the community graph generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CommunityGraphSpec {
    pub n_communities: usize,
    pub community_size: usize,
    pub bridges_per_community: usize,
    pub intra_density: f64,
}

impl Default for CommunityGraphSpec {
    fn default() -> Self {
        // 20 x 15 x 0.6 intra pairs plus 20 bridges: about 200 undirected edges.
        Self {
            n_communities: 20,
            community_size: 6,
            bridges_per_community: 1,
            intra_density: 0.6,
        }
    }
}

impl Graph {
    /// Builds a graph from an explicit edge list, validating every invariant.
    pub fn new(n_nodes: usize, edges: Vec<Edge>, directed: bool) -> Result<Self> {
        if n_nodes == 0 {
            return Err(Error::InvalidArgument("graph needs at least one node".into()));
        }
        let mut seen = HashMap::with_capacity(edges.len());
        for e in &edges {
            for idx in [e.src, e.dst] {
                if idx >= n_nodes {
                    return Err(Error::NodeOutOfRange { index: idx, n_nodes });
                }
            }
            if !e.weight.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "edge ({}, {}) has non-finite weight",
                    e.src, e.dst
                )));
            }
            if seen.insert((e.src, e.dst), e.weight).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate edge ({}, {})",
                    e.src, e.dst
                )));
            }
        }
        if !directed {
            for e in &edges {
                let mirrored = seen.get(&(e.dst, e.src)) == Some(&e.weight);
                if !mirrored {
                    return Err(Error::InvalidArgument(format!(
                        "undirected graph is missing the mirror of edge ({}, {})",
                        e.src, e.dst
                    )));
                }
            }
        }
        let mut neighbor_in = vec![Vec::new(); n_nodes];
        for e in &edges {
            neighbor_in[e.dst].push((e.src, e.weight));
        }
        Ok(Self {
            n_nodes,
            edges,
            directed,
            neighbor_in,
        })
    }

    /// Undirected graph from unordered pairs; each pair is stored in both
    /// directions (self-loops once).
    pub fn undirected(n_nodes: usize, pairs: &[(usize, usize, f64)]) -> Result<Self> {
        let mut edges = Vec::with_capacity(pairs.len() * 2);
        for &(i, j, w) in pairs {
            edges.push(Edge { src: i, dst: j, weight: w });
            if i != j {
                edges.push(Edge { src: j, dst: i, weight: w });
            }
        }
        Self::new(n_nodes, edges, false)
    }

    pub fn edgeless(n_nodes: usize) -> Result<Self> {
        Self::new(n_nodes, Vec::new(), false)
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn is_directed(&self) -> bool {
        self.directed
    }

    pub fn neighbors_in(&self, node: usize) -> &[(usize, f64)] {
        &self.neighbor_in[node]
    }

    /// Number of undirected pairs (self-loops counted once) for undirected
    /// graphs, number of directed edges otherwise.
    pub fn n_undirected_edges(&self) -> usize {
        if self.directed {
            return self.edges.len();
        }
        let loops = self.edges.iter().filter(|e| e.src == e.dst).count();
        loops + (self.edges.len() - loops) / 2
    }

    pub fn weighted_in_degree(&self) -> Vec<f64> {
        self.neighbor_in
            .iter()
            .map(|nb| nb.iter().map(|&(_, w)| w).sum())
            .collect()
    }

    /// Relabels nodes so that old node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_permutation(perm, self.n_nodes)?;
        let edges = self
            .edges
            .iter()
            .map(|e| Edge {
                src: perm[e.src],
                dst: perm[e.dst],
                weight: e.weight,
            })
            .collect();
        Self::new(self.n_nodes, edges, self.directed)
    }

    /// Dense adjacency with `A[i][j] = a_ji`, so that `(A X)_i` sums over the
    /// in-neighbors of `i`.
    pub fn dense_adjacency(&self) -> Array2<f64> {
        let mut a = Array2::zeros((self.n_nodes, self.n_nodes));
        for e in &self.edges {
            a[[e.dst, e.src]] += e.weight;
        }
        a
    }
}

pub(crate) fn check_permutation(perm: &[usize], n: usize) -> Result<()> {
    if perm.len() != n {
        return Err(Error::InvalidArgument(format!(
            "permutation has length {}, expected {n}",
            perm.len()
        )));
    }
    let mut seen = vec![false; n];
    for &p in perm {
        if p >= n || seen[p] {
            return Err(Error::InvalidArgument("not a permutation".into()));
        }
        seen[p] = true;
    }
    Ok(())
}

/// Community graph: dense-ish communities with self-loops, joined in a ring
/// by a few random bridge edges. All weights are 1.0.
pub fn build_community_graph(
    n_communities: usize,
    community_size: usize,
    bridges_per_community: usize,
    intra_density: f64,
    seed: u64,
) -> Result<Graph> {
    if n_communities == 0 || community_size == 0 {
        return Err(Error::InvalidArgument(
            "community count and size must be positive".into(),
        ));
    }
    if !(intra_density > 0.0 && intra_density <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "intra-community density must be in (0, 1], got {intra_density}"
        )));
    }
    let n = n_communities * community_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs: Vec<(usize, usize, f64)> = (0..n).map(|i| (i, i, 1.0)).collect();
    let mut present: HashSet<(usize, usize)> = HashSet::new();

    for c in 0..n_communities {
        let base = c * community_size;
        for i in 0..community_size {
            for j in (i + 1)..community_size {
                if intra_density >= 1.0 || rng.random::<f64>() < intra_density {
                    pairs.push((base + i, base + j, 1.0));
                    present.insert((base + i, base + j));
                }
            }
        }
    }

    if n_communities > 1 {
        for c in 0..n_communities {
            let next = (c + 1) % n_communities;
            let max_distinct = community_size * community_size;
            let mut placed = 0;
            let mut attempts = 0;
            while placed < bridges_per_community && attempts < 100 * max_distinct {
                attempts += 1;
                let u = c * community_size + rng.random_range(0..community_size);
                let v = next * community_size + rng.random_range(0..community_size);
                let key = (u.min(v), u.max(v));
                if present.insert(key) {
                    pairs.push((key.0, key.1, 1.0));
                    placed += 1;
                }
            }
        }
    }
    Graph::undirected(n, &pairs)
}

pub fn build_community_graph_from(spec: &CommunityGraphSpec, seed: u64) -> Result<Graph> {
    build_community_graph(
        spec.n_communities,
        spec.community_size,
        spec.bridges_per_community,
        spec.intra_density,
        seed,
    )
}

/// Rescales edge weights by the weighted in-degree (self-loops included).
pub fn normalize_adjacency(g: &Graph, mode: Normalization) -> Result<Graph> {
    if mode == Normalization::None {
        return Ok(g.clone());
    }
    let deg = g.weighted_in_degree();
    if let Some(i) = deg.iter().position(|&d| d <= 0.0) {
        return Err(Error::ZeroDegree(i));
    }
    let edges = g
        .edges
        .iter()
        .map(|e| {
            let weight = match mode {
                Normalization::Symmetric => e.weight / (deg[e.src] * deg[e.dst]).sqrt(),
                Normalization::Row => e.weight / deg[e.dst],
                Normalization::None => unreachable!(),
            };
            Edge { weight, ..*e }
        })
        .collect();
    Graph::new(g.n_nodes, edges, g.directed)
}

/// Computes `A^power X` by repeated sparse neighbor aggregation.
pub fn matpow_apply(g: &Graph, x: &Array2<f64>, power: usize) -> Result<Array2<f64>> {
    if x.nrows() != g.n_nodes {
        return Err(crate::error::shape_err(
            "matpow_apply",
            &[g.n_nodes, x.ncols()],
            x.shape(),
        ));
    }
    let mut cur = x.clone();
    for _ in 0..power {
        let mut next = Array2::zeros(cur.raw_dim());
        for (i, nb) in g.neighbor_in.iter().enumerate() {
            let mut row = next.row_mut(i);
            for &(j, w) in nb {
                row.scaled_add(w, &cur.row(j));
            }
        }
        cur = next;
    }
    Ok(cur)
}
