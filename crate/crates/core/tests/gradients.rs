//! Finite-difference checks of reverse-mode gradients in double precision.

use std::rc::Rc;

use glocal::embeddings::{EmbeddingMode, EmbeddingTable, Phase};
use glocal::graph::Graph;
use glocal::model::{Batch, Family, Model, ModelConfig, MpKind, Site};
use glocal::nn::{Aggregation, GraphBatch, Init, ParamStore, Tape, Var, EMBEDDING_SLOT, MODEL_SLOT};
use glocal::series::SeriesDataset;
use glocal::Result;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-6;
const REL_TOL: f64 = 1e-3;

fn close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= REL_TOL * analytic.abs().max(numeric.abs()) + 1e-7
}

fn random(shape: (usize, usize), lo: f64, hi: f64, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn(shape, || rng.random_range(lo..hi))
}

/// Checks `d sum(f(inputs) * R) / d inputs` for a random projection `R`.
fn check_op<F>(name: &str, shapes: &[(usize, usize)], range: (f64, f64), f: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::<f64>::new(0);
    let ids: Vec<_> = shapes
        .iter()
        .enumerate()
        .map(|(k, &s)| store.insert(&format!("x{k}"), random(s, range.0, range.1, 10 + k as u64)))
        .collect();
    let loss = |store: &ParamStore<f64>, tape: &mut Tape<f64>| -> Var {
        let xs: Vec<Var> = ids.iter().map(|&id| tape.param(MODEL_SLOT, store, id)).collect();
        let out = f(tape, &xs).unwrap();
        let proj = tape.constant(random(tape.shape(out), -1.0, 1.0, 99));
        let prod = tape.mul(out, proj).unwrap();
        tape.sum(prod)
    };
    let mut tape = Tape::new();
    let l = loss(&store, &mut tape);
    store.zero_grads();
    tape.backward(l, &mut [&mut store]).unwrap();
    for &id in &ids {
        let shape = store.value(id).dim();
        for i in 0..shape.0 {
            for j in 0..shape.1 {
                let analytic = store.grad(id)[[i, j]];
                let orig = store.value(id)[[i, j]];
                store.value_mut(id)[[i, j]] = orig + STEP;
                let up = {
                    let mut t = Tape::new();
                    let l = loss(&store, &mut t);
                    t.scalar(l)
                };
                store.value_mut(id)[[i, j]] = orig - STEP;
                let down = {
                    let mut t = Tape::new();
                    let l = loss(&store, &mut t);
                    t.scalar(l)
                };
                store.value_mut(id)[[i, j]] = orig;
                let numeric = (up - down) / (2.0 * STEP);
                assert!(close(analytic, numeric), "{name}: entry ({i}, {j}) analytic {analytic}, numeric {numeric}");
            }
        }
    }
}

#[test]
fn elementwise_and_linear_ops() {
    let s = (3, 4);
    check_op("matmul", &[(3, 4), (4, 2)], (-1.0, 1.0), |t, x| t.matmul(x[0], x[1]));
    check_op("add", &[s, s], (-1.0, 1.0), |t, x| t.add(x[0], x[1]));
    check_op("add_row", &[s, (1, 4)], (-1.0, 1.0), |t, x| t.add_row(x[0], x[1]));
    check_op("sub", &[s, s], (-1.0, 1.0), |t, x| t.sub(x[0], x[1]));
    check_op("mul", &[s, s], (-1.0, 1.0), |t, x| t.mul(x[0], x[1]));
    check_op("mul_col", &[s, (3, 1)], (-1.0, 1.0), |t, x| t.mul_col(x[0], x[1]));
    check_op("scale", &[s], (-1.0, 1.0), |t, x| Ok(t.scale(x[0], -2.5)));
    check_op("add_const", &[s], (-1.0, 1.0), |t, x| Ok(t.add_const(x[0], 0.7)));
    check_op("one_minus", &[s], (-1.0, 1.0), |t, x| Ok(t.one_minus(x[0])));
    check_op("sigmoid", &[s], (-3.0, 3.0), |t, x| Ok(t.sigmoid(x[0])));
    check_op("tanh", &[s], (-2.0, 2.0), |t, x| Ok(t.tanh(x[0])));
    check_op("elu", &[s], (-2.0, 2.0), |t, x| Ok(t.elu(x[0])));
    check_op("exp", &[s], (-1.0, 1.0), |t, x| Ok(t.exp(x[0])));
    check_op("abs", &[s], (0.1, 1.0), |t, x| Ok(t.abs(x[0])));
    check_op("abs_negative", &[s], (-1.0, -0.1), |t, x| Ok(t.abs(x[0])));
    check_op("square", &[s], (-1.0, 1.0), |t, x| Ok(t.square(x[0])));
    check_op("sqrt", &[s], (0.2, 2.0), |t, x| Ok(t.sqrt(x[0])));
    check_op("softmax_rows", &[s], (-2.0, 2.0), |t, x| Ok(t.softmax_rows(x[0])));
    check_op("sum", &[s], (-1.0, 1.0), |t, x| Ok(t.sum(x[0])));
    check_op("mean", &[s], (-1.0, 1.0), |t, x| Ok(t.mean(x[0])));
}

#[test]
fn structural_ops() {
    check_op("concat_cols", &[(3, 2), (3, 3)], (-1.0, 1.0), |t, x| t.concat_cols(&[x[0], x[1], x[0]]));
    check_op("slice_cols", &[(3, 5)], (-1.0, 1.0), |t, x| t.slice_cols(x[0], 1, 4));
    check_op("slice_rows", &[(5, 3)], (-1.0, 1.0), |t, x| t.slice_rows(x[0], 2, 5));
    let idx = Rc::new(vec![2, 0, 2, 1]);
    check_op("gather_rows", &[(3, 2)], (-1.0, 1.0), move |t, x| t.gather_rows(x[0], idx.clone()));
    let idx = Rc::new(vec![0, 2, 0, 1, 2]);
    check_op("scatter_add_rows", &[(5, 2)], (-1.0, 1.0), move |t, x| t.scatter_add_rows(x[0], idx.clone(), 4));
    let agg = Rc::new(Aggregation::new(3, 2, vec![vec![(0, 0.5), (1, 0.5)], vec![(2, 1.0)], vec![(0, 0.2), (1, 0.3), (2, 0.5)]]));
    check_op("aggregate", &[(6, 2)], (-1.0, 1.0), move |t, x| t.aggregate(x[0], agg.clone()));
    check_op("node_matmul", &[(6, 2), (6, 4)], (-1.0, 1.0), |t, x| t.node_matmul(x[0], x[1], 3));
    check_op("reshape", &[(4, 6)], (-1.0, 1.0), |t, x| t.reshape(x[0], 3));
}

#[test]
fn straight_through_routes_gradient_to_soft_path() {
    let mut store = ParamStore::<f64>::new(0);
    let id = store.insert("s", random((2, 3), -1.0, 1.0, 1));
    let mut tape = Tape::new();
    let s = tape.param(MODEL_SLOT, &store, id);
    let hard = Array2::from_shape_vec((2, 3), vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
    let st = tape.straight_through(hard.clone(), s).unwrap();
    assert_eq!(tape.value(st), &hard);
    let total = tape.sum(st);
    tape.backward(total, &mut [&mut store]).unwrap();
    assert!(store.grad(id).iter().all(|&g| g == 1.0));
}

fn toy_data(n: usize, steps: usize) -> SeriesDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let values = Array3::from_shape_simple_fn((steps, n, 1), || rng.random_range(-1.0..1.0));
    SeriesDataset::new(values, None).unwrap()
}

fn toy_graph() -> Graph {
    Graph::undirected(4, &[(0, 1, 0.5), (1, 2, 0.8), (2, 3, 0.3), (3, 0, 0.6), (1, 1, 1.0)]).unwrap()
}

/// FD check of a model's mean squared forecast error w.r.t. every parameter
/// entry (and the embedding table, if any).
fn check_model(name: &str, config: ModelConfig) {
    let n = 4;
    let data = toy_data(n, 20);
    let g = toy_graph();
    let batch = Batch::<f64>::from_anchors(&data, &[8, 12], config.window, config.horizon).unwrap();
    let gb = GraphBatch::new(&g, 2, config.weighted_mean);
    let mut model = Model::<f64>::new(config.clone(), n, 3).unwrap();
    let mut table = config
        .uses_embeddings()
        .then(|| EmbeddingTable::<f64>::new(EmbeddingMode::Plain, n, config.embedding_dim, 1, 1.0, 4).unwrap());

    let loss = |model: &mut Model<f64>, table: &Option<EmbeddingTable<f64>>, tape: &mut Tape<f64>| -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let emb = table.as_ref().map(|t| t.batch_rows(tape, 2, Phase::Eval, &mut rng).unwrap());
        let pred = model.forward(tape, &batch, &gb, emb).unwrap();
        let target = tape.constant(batch.targets.clone());
        let d = tape.sub(pred, target).unwrap();
        let sq = tape.square(d);
        tape.mean(sq)
    };
    let eval = |model: &mut Model<f64>, table: &Option<EmbeddingTable<f64>>| {
        let mut t = Tape::new();
        let l = loss(model, table, &mut t);
        t.scalar(l)
    };

    let mut tape = Tape::new();
    let l = loss(&mut model, &table, &mut tape);
    model.params.zero_grads();
    let mut empty = ParamStore::<f64>::new(0);
    match table.as_mut() {
        Some(t) => {
            t.params.zero_grads();
            tape.backward(l, &mut [&mut model.params, &mut t.params]).unwrap();
        }
        None => tape.backward(l, &mut [&mut model.params, &mut empty]).unwrap(),
    }

    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut checked = 0;
    let n_entries = model.params.entries().len();
    for k in 0..n_entries {
        let (name_k, shape, id) = {
            let e = &model.params.entries()[k];
            (e.name.clone(), e.value.dim(), model.params.id(&e.name).unwrap())
        };
        // A few random coordinates per parameter keep the check fast.
        for _ in 0..3 {
            let (i, j) = (rng.random_range(0..shape.0), rng.random_range(0..shape.1));
            let analytic = model.params.grad(id)[[i, j]];
            let orig = model.params.value(id)[[i, j]];
            model.params.value_mut(id)[[i, j]] = orig + STEP;
            let up = eval(&mut model, &table);
            model.params.value_mut(id)[[i, j]] = orig - STEP;
            let down = eval(&mut model, &table);
            model.params.value_mut(id)[[i, j]] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            assert!(close(analytic, numeric), "{name}/{name_k} ({i}, {j}): analytic {analytic}, numeric {numeric}");
            checked += 1;
        }
    }
    if let Some(id) = table.as_ref().map(|t| t.params.id("V").unwrap()) {
        let set = |table: &mut Option<EmbeddingTable<f64>>, i: usize, v: f64| {
            table.as_mut().unwrap().params.value_mut(id)[[i, 0]] = v;
        };
        for i in 0..n {
            let t = table.as_ref().unwrap();
            let (analytic, orig) = (t.params.grad(id)[[i, 0]], t.params.value(id)[[i, 0]]);
            set(&mut table, i, orig + STEP);
            let up = eval(&mut model, &table);
            set(&mut table, i, orig - STEP);
            let down = eval(&mut model, &table);
            set(&mut table, i, orig);
            let numeric = (up - down) / (2.0 * STEP);
            assert!(close(analytic, numeric), "{name}/V ({i}, 0): analytic {analytic}, numeric {numeric}");
            checked += 1;
        }
    }
    assert!(checked > 0);
}

fn small(family: Family, mp_kind: MpKind) -> ModelConfig {
    ModelConfig {
        family,
        mp_kind,
        mp_layers: if family == Family::Tts { 2 } else { 0 },
        hidden: 5,
        window: 4,
        horizon: 2,
        ..ModelConfig::tts(MpKind::Iso)
    }
}

#[test]
fn time_then_space_gradients() {
    check_model("tts_iso", small(Family::Tts, MpKind::Iso));
    check_model("tts_aniso", small(Family::Tts, MpKind::Aniso));
    check_model("tts_iso_emb", small(Family::Tts, MpKind::Iso).with_embeddings(3, &[Site::Encoder, Site::Decoder]));
    let mut local = small(Family::Tts, MpKind::Iso);
    local.local_weights_at = [Site::Encoder, Site::Decoder].into_iter().collect();
    check_model("tts_iso_local", local);
    let weighted = ModelConfig { weighted_mean: true, ..small(Family::Tts, MpKind::Iso) };
    check_model("tts_iso_weighted", weighted);
}

#[test]
fn time_and_space_gradients() {
    check_model("tas_iso", small(Family::Tas, MpKind::Iso));
    check_model("tas_aniso", small(Family::Tas, MpKind::Aniso).with_embeddings(3, &[Site::Decoder]));
    let stacked = ModelConfig { rnn_layers: 2, ..small(Family::Tas, MpKind::Iso) };
    check_model("tas_two_layers", stacked);
}

#[test]
fn recurrent_baseline_gradients() {
    check_model("rnn", small(Family::Rnn, MpKind::None));
    check_model("rnn_emb", small(Family::Rnn, MpKind::None).with_embeddings(3, &[Site::Encoder]));
    check_model("fcrnn", small(Family::Fcrnn, MpKind::None));
    check_model("local_rnn", small(Family::Localrnn, MpKind::None));
}

fn table_grad_check(mode: EmbeddingMode, names: &[&str], build: impl Fn(&EmbeddingTable<f64>, &mut Tape<f64>) -> Var) {
    let mut table = EmbeddingTable::<f64>::new(mode, 5, 3, 4, 0.7, 2).unwrap();
    if mode == EmbeddingMode::Variational {
        let ls = table.params.id("log_sigma").unwrap();
        *table.params.value_mut(ls) = random((5, 3), -1.0, 0.5, 8);
        let mu = table.params.id("mu").unwrap();
        *table.params.value_mut(mu) = random((5, 3), -1.0, 1.0, 9);
    }
    let mut tape = Tape::new();
    let l = build(&table, &mut tape);
    let mut model = ParamStore::<f64>::new(0);
    tape.backward(l, &mut [&mut model, &mut table.params]).unwrap();
    assert_eq!(EMBEDDING_SLOT, 1);
    for name in names {
        let id = table.params.id(name).unwrap();
        let shape = table.params.value(id).dim();
        for i in 0..shape.0 {
            for j in 0..shape.1 {
                let analytic = table.params.grad(id)[[i, j]];
                let orig = table.params.value(id)[[i, j]];
                let eval = |v: f64, table: &mut EmbeddingTable<f64>| {
                    table.params.value_mut(id)[[i, j]] = v;
                    let mut t = Tape::new();
                    let l = build(table, &mut t);
                    t.scalar(l)
                };
                let up = eval(orig + STEP, &mut table);
                let down = eval(orig - STEP, &mut table);
                table.params.value_mut(id)[[i, j]] = orig;
                let numeric = (up - down) / (2.0 * STEP);
                assert!(close(analytic, numeric), "{mode:?}/{name} ({i}, {j}): {analytic} vs {numeric}");
            }
        }
    }
}

#[test]
fn kl_gradient() {
    table_grad_check(EmbeddingMode::Variational, &["mu", "log_sigma"], |t, tape| t.kl_term(tape).unwrap());
}

#[test]
fn variational_sample_gradient() {
    table_grad_check(EmbeddingMode::Variational, &["mu", "log_sigma"], |t, tape| {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let rows = t.batch_rows(tape, 2, Phase::Train, &mut rng).unwrap();
        let sq = tape.square(rows);
        tape.sum(sq)
    });
}

#[test]
fn clustering_gradient() {
    // With fixed Gumbel noise, the hard assignment is locally constant, so V
    // and C gradients are exact; S receives the straight-through surrogate.
    table_grad_check(EmbeddingMode::Clustered, &["V", "C"], |t, tape| {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        t.clustering_loss(tape, 2, &mut rng).unwrap()
    });
}

#[test]
fn frozen_parameters_get_no_gradient() {
    let mut store = ParamStore::<f64>::new(0);
    let a = store.get_or_create("a", (2, 2), Init::Uniform(-1.0, 1.0)).unwrap();
    let b = store.get_or_create("b", (2, 2), Init::Uniform(-1.0, 1.0)).unwrap();
    store.set_trainable("a", false).unwrap();
    let mut tape = Tape::new();
    let (va, vb) = (tape.param(MODEL_SLOT, &store, a), tape.param(MODEL_SLOT, &store, b));
    let p = tape.matmul(va, vb).unwrap();
    let l = tape.sum(p);
    tape.backward(l, &mut [&mut store]).unwrap();
    assert!(store.grad(a).iter().all(|&g| g == 0.0));
    assert!(store.grad(b).iter().any(|&g| g != 0.0));
}
