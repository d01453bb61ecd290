//! Branch-free `f32` activation kernels.

const LOG2E: f32 = std::f32::consts::LOG2_E;
const LN2_HI: f32 = 0.693_359_4;
const LN2_LO: f32 = -2.121_944_4e-4;

/// `exp(x)` with range reduction to `[-ln2/2, ln2/2]` and a degree-6
/// polynomial; relative error below `2e-7` over the clamped range.
#[inline(always)]
pub(crate) fn exp(x: f32) -> f32 {
    // Adding and subtracting 1.5 * 2^23 rounds to the nearest integer
    // without a libm call.
    const ROUND: f32 = 12_582_912.0;
    let x = x.clamp(-87.0, 88.0);
    let k = (x * LOG2E + ROUND) - ROUND;
    let r = x - k * LN2_HI - k * LN2_LO;
    let mut p = 1.987_569_1e-4f32;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 0.5;
    let p = p * r * r + r + 1.0;
    let scale = f32::from_bits(((k as i32 + 127) as u32) << 23);
    p * scale
}

pub(crate) fn sigmoid(xs: &mut [f32]) {
    for x in xs {
        *x = 1.0 / (1.0 + exp(-*x));
    }
}

pub(crate) fn tanh(xs: &mut [f32]) {
    for x in xs {
        // tanh(x) = sign(x) (1 - e) / (1 + e) with e = exp(-2|x|).
        let e = exp(-2.0 * x.abs());
        *x = ((1.0 - e) / (1.0 + e)).copysign(*x);
    }
}

pub(crate) fn elu(xs: &mut [f32]) {
    for x in xs {
        let neg = exp(x.min(0.0)) - 1.0;
        *x = if *x > 0.0 { *x } else { neg };
    }
}
