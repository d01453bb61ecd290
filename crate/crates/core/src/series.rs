use ndarray::{Array3, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Node-time observations: `values[[t, i, c]]` is channel `c` of node `i` at
/// step `t`, with optional exogenous channels laid out the same way.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesDataset {
    values: Array3<f64>,
    exogenous: Option<Array3<f64>>,
}

impl SeriesDataset {
    pub fn new(values: Array3<f64>, exogenous: Option<Array3<f64>>) -> Result<Self> {
        if values.len_of(Axis(0)) == 0 || values.len_of(Axis(1)) == 0 || values.len_of(Axis(2)) == 0 {
            return Err(Error::InvalidArgument(format!(
                "dataset needs T, N, d_x >= 1, got {:?}",
                values.shape()
            )));
        }
        if let Some(u) = &exogenous {
            if u.shape()[..2] != values.shape()[..2] {
                return Err(crate::error::shape_err(
                    "exogenous channels",
                    &values.shape()[..2],
                    &u.shape()[..2],
                ));
            }
            if u.iter().any(|v| !v.is_finite()) {
                return Err(Error::Format("non-finite exogenous value".into()));
            }
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("non-finite observation".into()));
        }
        Ok(Self { values, exogenous })
    }

    pub fn n_steps(&self) -> usize {
        self.values.len_of(Axis(0))
    }

    pub fn n_nodes(&self) -> usize {
        self.values.len_of(Axis(1))
    }

    pub fn n_channels(&self) -> usize {
        self.values.len_of(Axis(2))
    }

    pub fn n_exogenous(&self) -> usize {
        self.exogenous.as_ref().map_or(0, |u| u.len_of(Axis(2)))
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn exogenous(&self) -> Option<&Array3<f64>> {
        self.exogenous.as_ref()
    }

    /// Observations at one step, `N x d_x`.
    pub fn frame(&self, t: usize) -> ArrayView2<'_, f64> {
        self.values.index_axis(Axis(0), t)
    }

    pub fn exogenous_frame(&self, t: usize) -> Option<ArrayView2<'_, f64>> {
        self.exogenous.as_ref().map(|u| u.index_axis(Axis(0), t))
    }

    /// Copy with nodes relabeled so that old node `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        crate::graph::check_permutation(perm, self.n_nodes())?;
        let permute = |a: &Array3<f64>| {
            let mut out = a.clone();
            for (old, &new) in perm.iter().enumerate() {
                out.index_axis_mut(Axis(1), new)
                    .assign(&a.index_axis(Axis(1), old));
            }
            out
        };
        Ok(Self {
            values: permute(&self.values),
            exogenous: self.exogenous.as_ref().map(permute),
        })
    }

    /// Contiguous time slice `[start, end)`.
    pub fn slice_time(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.n_steps() {
            return Err(Error::InvalidArgument(format!(
                "time slice [{start}, {end}) outside [0, {})",
                self.n_steps()
            )));
        }
        let s = ndarray::s![start..end, .., ..];
        Ok(Self {
            values: self.values.slice(s).to_owned(),
            exogenous: self.exogenous.as_ref().map(|u| u.slice(s).to_owned()),
        })
    }
}
