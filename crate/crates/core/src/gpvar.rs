//! Graph polynomial vector autoregressive processes with and without
//! node-specific gains, plus the analytic one-step predictor.
//!
//! The filter reads the `Q` most recent frames, newest first:
//!
//! ```text
//! H_t     = sum_l sum_q theta[q][l] A^(l-1) X_(t-q+1)
//! X_(t+1) = a * tanh(H_t) + b * tanh(X_(t-1)) + eta_t,   eta_t ~ N(0, sigma^2 I)
//! ```
//!
//! so a window of `max(Q, 2)` frames is enough to compute the conditional mean.

use ndarray::{array, Array1, Array2, Array3, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{matpow_apply, Graph};
use crate::series::SeriesDataset;

pub const DEFAULT_SIGMA: f64 = 0.4;
pub const DEFAULT_BURN_IN: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GpvarParams {
    /// `Q x L` filter coefficients.
    pub theta: Array2<f64>,
    pub a: Array1<f64>,
    pub b: Array1<f64>,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProcessKind {
    /// Shared gains `a = b = 0.5`: no local effects.
    Gpvar,
    /// Node-specific gains drawn from `U(-2, 2)`.
    GpvarL,
}

fn default_theta() -> Array2<f64> {
    array![[2.5, -2.0, -0.5], [1.0, 3.0, 0.0]]
}

impl GpvarParams {
    pub fn new(theta: Array2<f64>, a: Array1<f64>, b: Array1<f64>, sigma: f64) -> Result<Self> {
        if theta.nrows() == 0 || theta.ncols() == 0 {
            return Err(Error::InvalidArgument("theta must be at least 1 x 1".into()));
        }
        if a.len() != b.len() {
            return Err(crate::error::shape_err("gain vectors", &[a.len()], &[b.len()]));
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!("sigma must be >= 0, got {sigma}")));
        }
        Ok(Self { theta, a, b, sigma })
    }

    /// Temporal order `Q`.
    pub fn temporal_order(&self) -> usize {
        self.theta.nrows()
    }

    /// Spatial order `L`.
    pub fn spatial_order(&self) -> usize {
        self.theta.ncols()
    }

    pub fn n_nodes(&self) -> usize {
        self.a.len()
    }

    /// Frames needed by [`optimal_predict`].
    pub fn required_history(&self) -> usize {
        self.temporal_order().max(2)
    }

    pub fn for_kind(kind: ProcessKind, g: &Graph, seed: u64) -> Self {
        match kind {
            ProcessKind::Gpvar => default_gpvar_params(g),
            ProcessKind::GpvarL => default_gpvarl_params(g, seed),
        }
    }
}

/// Process with local effects: gains `a, b ~ U(-2, 2)` drawn under `seed`.
pub fn default_gpvarl_params(g: &Graph, seed: u64) -> GpvarParams {
    let n = g.n_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Array1::from_shape_fn(n, |_| rng.random_range(-2.0..2.0));
    let b = Array1::from_shape_fn(n, |_| rng.random_range(-2.0..2.0));
    GpvarParams {
        theta: default_theta(),
        a,
        b,
        sigma: DEFAULT_SIGMA,
    }
}

pub fn default_gpvar_params(g: &Graph) -> GpvarParams {
    let n = g.n_nodes();
    GpvarParams {
        theta: default_theta(),
        a: Array1::from_elem(n, 0.5),
        b: Array1::from_elem(n, 0.5),
        sigma: DEFAULT_SIGMA,
    }
}

fn check_graph(params: &GpvarParams, g: &Graph) -> Result<()> {
    if params.n_nodes() != g.n_nodes() {
        return Err(crate::error::shape_err(
            "process gains vs graph",
            &[g.n_nodes()],
            &[params.n_nodes()],
        ));
    }
    Ok(())
}

/// Conditional mean of the next frame given `frames` (`k x N`, oldest first,
/// `k >= required_history`).
fn conditional_mean(params: &GpvarParams, g: &Graph, frames: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
    let k = frames.nrows();
    let n = g.n_nodes();
    let mut filtered = Array1::<f64>::zeros(n);
    for q in 0..params.temporal_order() {
        let x = frames.row(k - 1 - q).to_owned().insert_axis(Axis(1));
        let mut power = x;
        for l in 0..params.spatial_order() {
            if l > 0 {
                power = matpow_apply(g, &power, 1)?;
            }
            let coeff = params.theta[[q, l]];
            if coeff != 0.0 {
                filtered.scaled_add(coeff, &power.column(0));
            }
        }
    }
    let prev = frames.row(k - 2);
    let mean = Array1::from_shape_fn(n, |i| {
        params.a[i] * filtered[i].tanh() + params.b[i] * prev[i].tanh()
    });
    Ok(mean)
}

/// Runs the recursion for `burn_in + steps` frames and keeps the last `steps`.
/// The first `Q + 1` frames are drawn from `N(0, sigma^2)`.
pub fn simulate(
    params: &GpvarParams,
    g: &Graph,
    steps: usize,
    burn_in: usize,
    seed: u64,
) -> Result<SeriesDataset> {
    check_graph(params, g)?;
    let n = g.n_nodes();
    let init = (params.temporal_order() + 1).max(params.required_history());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let initial = Array2::from_shape_fn((init, n), |_| {
        let z: f64 = rng.sample(StandardNormal);
        params.sigma * z
    });
    run(params, g, initial.view(), steps, burn_in, &mut rng)
}

/// Same recursion started from explicit initial frames (`k x N`, oldest
/// first, `k >= required_history`).
pub fn simulate_from(
    params: &GpvarParams,
    g: &Graph,
    initial: ArrayView2<'_, f64>,
    steps: usize,
    burn_in: usize,
    seed: u64,
) -> Result<SeriesDataset> {
    check_graph(params, g)?;
    if initial.ncols() != g.n_nodes() || initial.nrows() < params.required_history() {
        return Err(crate::error::shape_err(
            "initial frames",
            &[params.required_history(), g.n_nodes()],
            initial.shape(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    run(params, g, initial, steps, burn_in, &mut rng)
}

fn run(
    params: &GpvarParams,
    g: &Graph,
    initial: ArrayView2<'_, f64>,
    steps: usize,
    burn_in: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SeriesDataset> {
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be positive".into()));
    }
    let n = g.n_nodes();
    let total = steps + burn_in;
    let history = params.required_history();
    let init = initial.nrows();
    let mut frames = Array2::<f64>::zeros((total.max(init), n));
    frames
        .slice_mut(ndarray::s![0..init, ..])
        .assign(&initial);
    for t in init..total {
        let window = frames.slice(ndarray::s![t - history..t, ..]);
        let mean = conditional_mean(params, g, window)?;
        let mut row = frames.row_mut(t);
        for i in 0..n {
            let z: f64 = rng.sample(StandardNormal);
            let v = mean[i] + params.sigma * z;
            if !v.is_finite() {
                return Err(Error::NonFiniteSimulation { step: t });
            }
            row[i] = v;
        }
    }
    let kept = frames.slice(ndarray::s![burn_in..total, ..]).to_owned();
    let values: Array3<f64> = kept.insert_axis(Axis(2));
    SeriesDataset::new(values, None)
}

/// One-step conditional mean `a * tanh(H_t) + b * tanh(X_(t-1))` from the most
/// recent frames of `recent` (`k x N`, oldest first).
pub fn optimal_predict(
    params: &GpvarParams,
    g: &Graph,
    recent: ArrayView2<'_, f64>,
) -> Result<Array1<f64>> {
    check_graph(params, g)?;
    if recent.ncols() != g.n_nodes() {
        return Err(crate::error::shape_err(
            "optimal_predict window",
            &[recent.nrows(), g.n_nodes()],
            recent.shape(),
        ));
    }
    if recent.nrows() < params.required_history() {
        return Err(Error::InvalidArgument(format!(
            "window of {} frames is shorter than the required {}",
            recent.nrows(),
            params.required_history()
        )));
    }
    conditional_mean(params, g, recent)
}

/// MAE of the analytic predictor: `E|N(0, sigma^2)| = sigma * sqrt(2 / pi)`.
pub fn optimal_mae(sigma: f64) -> f64 {
    sigma * (2.0 / std::f64::consts::PI).sqrt()
}

/// Lower bound below which no forecaster evaluated on `n_predictions`
/// independent noise draws may fall: optimum minus three standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseFloor {
    pub optimum: f64,
    pub standard_error: f64,
}

impl NoiseFloor {
    pub fn new(sigma: f64, n_predictions: usize) -> Self {
        let sd = sigma * (1.0 - 2.0 / std::f64::consts::PI).sqrt();
        Self {
            optimum: optimal_mae(sigma),
            standard_error: sd / (n_predictions.max(1) as f64).sqrt(),
        }
    }

    pub fn bound(&self) -> f64 {
        self.optimum - 3.0 * self.standard_error
    }

    pub fn admits(&self, mae: f64) -> bool {
        mae >= self.bound()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_community_graph, normalize_adjacency, Normalization};

    fn reference_graph() -> Graph {
        let g = build_community_graph(20, 6, 1, 0.6, 0).unwrap();
        normalize_adjacency(&g, Normalization::Symmetric).unwrap()
    }

    fn small_graph() -> Graph {
        let g = build_community_graph(3, 4, 1, 0.8, 1).unwrap();
        normalize_adjacency(&g, Normalization::Symmetric).unwrap()
    }

    #[test]
    fn default_parameters() {
        let g = small_graph();
        let l = default_gpvarl_params(&g, 5);
        assert_eq!(l.theta.row(0).to_vec(), vec![2.5, -2.0, -0.5]);
        assert_eq!(l.theta.row(1).to_vec(), vec![1.0, 3.0, 0.0]);
        assert_eq!(l.sigma, 0.4);
        assert!(l.a.iter().chain(l.b.iter()).all(|v| (-2.0..2.0).contains(v)));
        assert_eq!(l, default_gpvarl_params(&g, 5));

        let p = default_gpvar_params(&g);
        assert!(p.a.iter().chain(p.b.iter()).all(|&v| v == 0.5));
        assert_eq!(p.theta, l.theta);
        assert_eq!(p.sigma, l.sigma);

        let single = Graph::undirected(1, &[(0, 0, 1.0)]).unwrap();
        assert_eq!(default_gpvar_params(&single).a.len(), 1);
    }

    #[test]
    fn zero_process_stays_at_zero() {
        let g = small_graph();
        let n = g.n_nodes();
        let params = GpvarParams::new(
            Array2::zeros((2, 3)),
            Array1::zeros(n),
            Array1::zeros(n),
            0.0,
        )
        .unwrap();
        let data = simulate(&params, &g, 50, 10, 3).unwrap();
        assert!(data.values().iter().all(|&v| v == 0.0));
        let pred = optimal_predict(&params, &g, data.values().index_axis(Axis(2), 0).slice(ndarray::s![0..3, ..])).unwrap();
        assert!(pred.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reference_scale_shape() {
        let g = reference_graph();
        let params = default_gpvarl_params(&g, 0);
        let data = simulate(&params, &g, 30_000, DEFAULT_BURN_IN, 1).unwrap();
        assert_eq!(data.n_steps(), 30_000);
        assert_eq!(data.n_nodes(), 120);
        assert_eq!(data.n_channels(), 1);
    }

    #[test]
    fn simulate_with_zero_sigma_replays_exactly() {
        let g = small_graph();
        let mut params = default_gpvarl_params(&g, 9);
        params.sigma = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let initial = Array2::from_shape_fn((3, g.n_nodes()), |_| rng.random_range(-1.0..1.0));
        let data = simulate_from(&params, &g, initial.view(), 100, 0, 1).unwrap();
        let frames = data.values().index_axis(Axis(2), 0);
        assert!(frames.iter().skip(3 * g.n_nodes()).any(|v| v.abs() > 1e-3));
        for t in 3..100 {
            let pred = optimal_predict(&params, &g, frames.slice(ndarray::s![t - 3..t, ..])).unwrap();
            for (p, x) in pred.iter().zip(frames.row(t).iter()) {
                assert!((p - x).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn deterministic_and_bounded() {
        let g = small_graph();
        let params = default_gpvarl_params(&g, 3);
        let a = simulate(&params, &g, 2000, 100, 77).unwrap();
        let b = simulate(&params, &g, 2000, 100, 77).unwrap();
        assert_eq!(a, b);
        let bound = 4.0 + 6.0 * params.sigma;
        assert!(a.values().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn optimal_residual_is_the_noise() {
        let g = small_graph();
        let params = default_gpvarl_params(&g, 3);
        let data = simulate(&params, &g, 20_000, 100, 8).unwrap();
        let frames = data.values().index_axis(Axis(2), 0);
        let mut abs_sum = 0.0;
        let mut count = 0usize;
        for t in 3..data.n_steps() {
            let pred = optimal_predict(&params, &g, frames.slice(ndarray::s![t - 3..t, ..])).unwrap();
            for (p, x) in pred.iter().zip(frames.row(t).iter()) {
                abs_sum += (p - x).abs();
                count += 1;
            }
        }
        let mae = abs_sum / count as f64;
        let floor = NoiseFloor::new(params.sigma, count);
        assert!((mae - optimal_mae(0.4)).abs() < 4.0 * floor.standard_error, "{mae}");
        assert!(floor.admits(mae));
    }

    #[test]
    fn symmetric_process_has_zero_mean() {
        let g = small_graph();
        let params = default_gpvar_params(&g);
        let data = simulate(&params, &g, 40_000, 100, 21).unwrap();
        let frames = data.values().index_axis(Axis(2), 0);
        // Batch means absorb the serial correlation.
        let n_batches = 40;
        let len = data.n_steps() / n_batches;
        let mut violations = 0;
        let mut grand = Vec::new();
        for i in 0..g.n_nodes() {
            let col = frames.column(i);
            let means: Vec<f64> = (0..n_batches)
                .map(|k| col.slice(ndarray::s![k * len..(k + 1) * len]).mean().unwrap())
                .collect();
            let m = means.iter().sum::<f64>() / n_batches as f64;
            let var = means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n_batches - 1) as f64;
            let se = (var / n_batches as f64).sqrt();
            if m.abs() > 3.0 * se {
                violations += 1;
            }
            grand.push(m);
        }
        assert!(violations <= 1, "{violations} nodes outside 3 SE");
        let overall = grand.iter().sum::<f64>() / grand.len() as f64;
        assert!(overall.abs() < 0.05, "{overall}");
    }

    #[test]
    fn rejects_short_window_and_bad_sizes() {
        let g = small_graph();
        let params = default_gpvarl_params(&g, 3);
        let short = Array2::<f64>::zeros((1, g.n_nodes()));
        assert!(optimal_predict(&params, &g, short.view()).is_err());
        let other = build_community_graph(1, 2, 0, 1.0, 0).unwrap();
        assert!(simulate(&params, &other, 10, 0, 0).is_err());
        assert!(simulate(&params, &g, 0, 0, 0).is_err());
    }

    #[test]
    fn noise_floor_value() {
        assert!((optimal_mae(0.4) - 0.319_154).abs() < 1e-6);
    }
}
