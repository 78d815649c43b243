//! Reverse-mode automatic differentiation: tape, MLPs, optimizer, and the
//! finite-difference oracle used throughout the gradient tests.

pub mod adam;
pub mod mlp;
pub mod params;
pub mod tape;

pub use adam::AdamState;
pub use mlp::{init_glorot, mlp_forward, mlp_forward_with_input_grad, zero_output_layer, MlpSpec};
pub use params::{ParamVector, Segment};
pub use tape::{Slab, Tape, Var};

/// Central finite differences `(f(x + h e_i) - f(x - h e_i)) / 2h`.
///
/// Independent of the tape; the reference gradient every backward pass is
/// checked against.
pub fn finite_diff_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let fp = f(&xs);
        xs[i] = orig - h;
        let fm = f(&xs);
        xs[i] = orig;
        grad.push((fp - fm) / (2.0 * h));
    }
    grad
}
