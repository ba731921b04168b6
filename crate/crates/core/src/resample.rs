//! Interpolation and pooling matrices for separable 2-D resampling.
//!
//! Every resize in the model is `out = Ry · x · Rxᵀ` for a pair of matrices
//! built here, so forward and backward passes share one kernel
//! (see [`Tape::resize2d`](crate::autograd::Tape::resize2d)).

use ndarray::{Array2, ArrayD};

use crate::autograd::{resize_raw, Tensor};

/// Cubic convolution coefficient (matches the common `a = -0.75` choice).
pub const CUBIC_A: f64 = -0.75;

/// Keys cubic convolution kernel.
pub fn cubic_weight(x: f64) -> f64 {
    let a = CUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Bicubic resampling from `input` to `output` samples with half-pixel
/// centers; out-of-range taps are clamped to the border sample.
pub fn bicubic_matrix(output: usize, input: usize) -> Array2<f64> {
    let mut m = Array2::zeros((output, input));
    let scale = input as f64 / output as f64;
    for o in 0..output {
        let src = (o as f64 + 0.5) * scale - 0.5;
        let base = src.floor();
        let t = src - base;
        for k in -1..=2 {
            let w = cubic_weight(t - k as f64);
            let idx = (base as isize + k).clamp(0, input as isize - 1) as usize;
            m[[o, idx]] += w;
        }
    }
    m
}

/// Bilinear resampling with corner-aligned sample grids (the first and last
/// output samples coincide with the first and last input samples).
pub fn bilinear_matrix(output: usize, input: usize) -> Array2<f64> {
    let mut m = Array2::zeros((output, input));
    for o in 0..output {
        let src = if output > 1 {
            o as f64 * (input - 1) as f64 / (output - 1) as f64
        } else {
            0.0
        };
        let i0 = (src.floor() as usize).min(input - 1);
        let i1 = (i0 + 1).min(input - 1);
        let t = src - i0 as f64;
        m[[o, i0]] += 1.0 - t;
        if t > 0.0 {
            m[[o, i1]] += t;
        }
    }
    m
}

/// Adaptive average pooling: output bin `o` averages inputs
/// `floor(o·in/out) .. ceil((o+1)·in/out)`.
pub fn adaptive_pool_matrix(output: usize, input: usize) -> Array2<f64> {
    let mut m = Array2::zeros((output, input));
    for o in 0..output {
        let start = o * input / output;
        let end = ((o + 1) * input).div_ceil(output);
        let n = (end - start) as f64;
        for i in start..end {
            m[[o, i]] = 1.0 / n;
        }
    }
    m
}

/// Applies a separable resampling to a `[B, C, H, W]` array outside any tape.
pub fn resample(x: &Tensor, ry: &Array2<f64>, rx: &Array2<f64>) -> ArrayD<f64> {
    resize_raw(x, ry.view(), rx.view())
}
