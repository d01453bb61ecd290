//! Minimal differentiable building blocks: a reverse-mode tape over 2-D
//! arrays, named parameter stores, layers, Adam and a checkpoint format.

pub mod checkpoint;
mod fastmath;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;

/// Floating-point scalar used by the tape, with slice kernels for the
/// activations. `f32` uses a branch-free exponential that vectorizes; `f64`
/// keeps the standard library functions so finite-difference checks stay
/// exact.
pub trait Real: ndarray::NdFloat + ndarray::ScalarOperand {
    fn sigmoid_slice(xs: &mut [Self]);
    fn tanh_slice(xs: &mut [Self]);
    fn elu_slice(xs: &mut [Self]);
}

impl Real for f32 {
    fn sigmoid_slice(xs: &mut [f32]) {
        fastmath::sigmoid(xs)
    }

    fn tanh_slice(xs: &mut [f32]) {
        fastmath::tanh(xs)
    }

    fn elu_slice(xs: &mut [f32]) {
        fastmath::elu(xs)
    }
}

impl Real for f64 {
    fn sigmoid_slice(xs: &mut [f64]) {
        xs.iter_mut().for_each(|x| *x = tape::sigmoid(*x));
    }

    fn tanh_slice(xs: &mut [f64]) {
        xs.iter_mut().for_each(|x| *x = x.tanh());
    }

    fn elu_slice(xs: &mut [f64]) {
        xs.iter_mut().for_each(|x| {
            if *x <= 0.0 {
                *x = x.exp_m1();
            }
        });
    }
}

pub use layers::{Activation, Ctx, GraphBatch, EMBEDDING_SLOT, MODEL_SLOT};
pub use optim::{clip_global_norm, Adam, AdamConfig};
pub use params::{Init, ParamId, ParamStore};
pub use tape::{Aggregation, Tape, Var};
