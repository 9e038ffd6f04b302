//! Minimal dense building blocks with hand-written backward passes.
//!
//! Feature maps are channel-last `(batch, height, width, channels)` arrays of
//! `f64`.

mod adam;
mod conv;
mod linear;
mod params;

pub use adam::Adam;
pub use conv::{Conv2d, ConvCache};
pub use linear::{Linear, LinearInit};
pub use params::{Grads, ParamStore};

use ndarray::{Array4, ArrayView4};

/// Nearest-neighbour 2x upsampling.
pub fn upsample2(x: &ArrayView4<f64>) -> Array4<f64> {
    let (b, h, w, c) = x.dim();
    Array4::from_shape_fn((b, 2 * h, 2 * w, c), |(bi, y, xx, ci)| x[[bi, y / 2, xx / 2, ci]])
}

/// Adjoint of [`upsample2`]: sums each 2x2 block.
pub fn upsample2_backward(dy: &ArrayView4<f64>) -> Array4<f64> {
    let (b, h2, w2, c) = dy.dim();
    let mut dx = Array4::zeros((b, h2 / 2, w2 / 2, c));
    for ((bi, y, x, ci), v) in dy.indexed_iter() {
        dx[[bi, y / 2, x / 2, ci]] += v;
    }
    dx
}

pub fn relu_inplace(x: &mut Array4<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Masks `dy` by the positive entries of the activation output.
pub fn relu_backward(activated: &Array4<f64>, dy: &mut Array4<f64>) {
    ndarray::Zip::from(dy)
        .and(activated)
        .for_each(|g, &a| if a <= 0.0 { *g = 0.0 });
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)` without overflow.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}
