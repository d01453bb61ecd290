use std::collections::HashMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Real;
use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// How a parameter is filled when it is first created.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanIn(usize),
    Uniform(f64, f64),
    Constant(f64),
    Zeros,
}

#[derive(Debug, Clone)]
pub struct ParamEntry<F> {
    pub name: String,
    pub value: Array2<F>,
    pub grad: Array2<F>,
    pub trainable: bool,
}

/// Named parameter arrays with gradient slots. Creation order is stable, so a
/// store built twice from the same seed holds bitwise-identical values.
#[derive(Debug, Clone)]
pub struct ParamStore<F> {
    entries: Vec<ParamEntry<F>>,
    index: HashMap<String, ParamId>,
    rng: ChaCha8Rng,
}

impl<F: Real> ParamStore<F> {
    pub fn new(seed: u64) -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    /// Returns the parameter called `name`, creating it with `init` on first
    /// use. An existing parameter with a different shape is an error.
    pub fn get_or_create(&mut self, name: &str, shape: (usize, usize), init: Init) -> Result<ParamId> {
        if let Some(&id) = self.index.get(name) {
            let have = self.entries[id.0].value.dim();
            if have != shape {
                return Err(shape_err(
                    format!("parameter {name}"),
                    &[shape.0, shape.1],
                    &[have.0, have.1],
                ));
            }
            return Ok(id);
        }
        let value = self.sample(shape, init);
        Ok(self.insert(name, value))
    }

    /// Inserts or replaces a parameter with an explicit value.
    pub fn insert(&mut self, name: &str, value: Array2<F>) -> ParamId {
        let grad = Array2::zeros(value.raw_dim());
        if let Some(&id) = self.index.get(name) {
            let e = &mut self.entries[id.0];
            e.value = value;
            e.grad = grad;
            return id;
        }
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            grad,
            trainable: true,
        });
        self.index.insert(name.to_string(), id);
        id
    }

    fn sample(&mut self, shape: (usize, usize), init: Init) -> Array2<F> {
        let cast = |x: f64| F::from(x).unwrap();
        match init {
            Init::Zeros => Array2::zeros(shape),
            Init::Constant(c) => Array2::from_elem(shape, cast(c)),
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                Array2::from_shape_fn(shape, |_| cast(self.rng.random_range(-bound..bound)))
            }
            Init::Uniform(lo, hi) => {
                Array2::from_shape_fn(shape, |_| cast(self.rng.random_range(lo..hi)))
            }
        }
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<F> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub(crate) fn entries_mut(&mut self) -> &mut [ParamEntry<F>] {
        &mut self.entries
    }

    pub fn value(&self, id: ParamId) -> &Array2<F> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<F> {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Array2<F> {
        &self.entries[id.0].grad
    }

    pub fn get(&self, name: &str) -> Option<&Array2<F>> {
        self.id(name).map(|id| self.value(id))
    }

    pub fn set(&mut self, name: &str, value: Array2<F>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        if self.value(id).dim() != value.dim() {
            return Err(shape_err(
                format!("parameter {name}"),
                self.value(id).shape(),
                value.shape(),
            ));
        }
        self.entries[id.0].value = value;
        Ok(())
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &Array2<F>) {
        let e = &mut self.entries[id.0];
        if e.trainable {
            e.grad += g;
        }
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(F::zero());
        }
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))?;
        self.entries[id.0].trainable = trainable;
        Ok(())
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for e in &mut self.entries {
            e.trainable = trainable;
        }
    }

    /// Number of scalar values, optionally restricted to trainable entries.
    pub fn count(&self, trainable_only: bool) -> usize {
        self.entries
            .iter()
            .filter(|e| !trainable_only || e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    pub fn grad_sq_norm(&self) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .flat_map(|e| e.grad.iter())
            .map(|g| {
                let g = g.to_f64().unwrap();
                g * g
            })
            .sum()
    }

    /// Snapshot of all values, in creation order.
    pub fn snapshot(&self) -> Vec<Array2<F>> {
        self.entries.iter().map(|e| e.value.clone()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Array2<F>]) -> Result<()> {
        if snapshot.len() != self.entries.len() {
            return Err(Error::InvalidArgument(format!(
                "snapshot has {} entries, store has {}",
                snapshot.len(),
                self.entries.len()
            )));
        }
        for (e, v) in self.entries.iter_mut().zip(snapshot) {
            if e.value.dim() != v.dim() {
                return Err(shape_err(format!("parameter {}", e.name), e.value.shape(), v.shape()));
            }
            e.value.assign(v);
        }
        Ok(())
    }

    /// Converts every value to another precision, keeping names and flags.
    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        let mut out = ParamStore::<G>::new(0);
        out.rng = self.rng.clone();
        for e in &self.entries {
            let v = e.value.mapv(|x| G::from(x).unwrap());
            let id = out.insert(&e.name, v);
            out.entries[id.0].trainable = e.trainable;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn create_reuse_and_shape_check() {
        let mut store = ParamStore::<f32>::new(1);
        let a = store.get_or_create("enc/W", (3, 2), Init::FanIn(3)).unwrap();
        let b = store.get_or_create("enc/W", (3, 2), Init::FanIn(3)).unwrap();
        assert_eq!(a, b);
        assert!(store.get_or_create("enc/W", (2, 2), Init::Zeros).is_err());
        let bound = 1.0 / 3f32.sqrt();
        assert!(store.value(a).iter().all(|v| v.abs() < bound));
        let bias = store.get_or_create("enc/b", (1, 2), Init::Zeros).unwrap();
        assert!(store.value(bias).iter().all(|&v| v == 0.0));
        assert_eq!(store.count(false), 8);
    }

    #[test]
    fn zero_grads_resets_exactly() {
        let mut store = ParamStore::<f64>::new(0);
        let id = store.get_or_create("w", (2, 2), Init::Constant(1.0)).unwrap();
        store.accumulate_grad(id, &Array2::from_elem((2, 2), 3.5));
        assert!(store.grad(id).iter().all(|&g| g == 3.5));
        store.zero_grads();
        assert!(store.grad(id).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn frozen_entries_ignore_gradients() {
        let mut store = ParamStore::<f64>::new(0);
        let id = store.get_or_create("w", (1, 1), Init::Zeros).unwrap();
        store.set_trainable("w", false).unwrap();
        store.accumulate_grad(id, &Array2::from_elem((1, 1), 1.0));
        assert_eq!(store.grad(id)[[0, 0]], 0.0);
        assert_eq!(store.count(true), 0);
    }

    #[test]
    fn same_seed_same_values() {
        let build = || {
            let mut s = ParamStore::<f32>::new(42);
            s.get_or_create("a", (4, 4), Init::FanIn(4)).unwrap();
            s.get_or_create("b", (4, 1), Init::Uniform(-1.0, 1.0)).unwrap();
            s.snapshot()
        };
        assert_eq!(build(), build());
    }
}
