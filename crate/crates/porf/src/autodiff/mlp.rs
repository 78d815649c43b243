//! Multilayer perceptrons over the tape: ELU hidden activations, linear
//! output, Glorot initialization, and a variant that also builds the
//! network's input gradient as tracked values.

use super::tape::{Slab, Tape};
use crate::error::{Error, Result};
use rand::Rng;

/// Network shape: ELU on hidden layers, linear output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: Vec<usize>, output: usize) -> Result<Self> {
        if input == 0 || output == 0 || hidden.iter().any(|w| *w == 0) {
            return Err(Error::InvalidArgument(
                "mlp widths must be at least 1".to_string(),
            ));
        }
        Ok(MlpSpec {
            input,
            hidden,
            output,
        })
    }

    /// (in, out) dimensions of each affine layer, in order.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input;
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, self.output));
        dims
    }

    /// Total parameter count: weights plus biases per layer.
    pub fn param_count(&self) -> usize {
        self.layer_dims()
            .iter()
            .map(|(i, o)| i * o + o)
            .sum()
    }

    /// Offset of each layer's (weights, bias) inside the segment.
    pub fn layer_offsets(&self) -> Vec<(usize, usize)> {
        let mut offs = Vec::new();
        let mut cur = 0;
        for (i, o) in self.layer_dims() {
            offs.push((cur, cur + i * o));
            cur += i * o + o;
        }
        offs
    }
}

/// Glorot-uniform weights, zero biases, written into a parameter segment.
pub fn init_glorot(spec: &MlpSpec, seg: &mut [f64], rng: &mut impl Rng) {
    assert_eq!(seg.len(), spec.param_count());
    for ((in_dim, out_dim), (w_off, b_off)) in spec.layer_dims().iter().zip(spec.layer_offsets()) {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        for w in &mut seg[w_off..w_off + in_dim * out_dim] {
            *w = rng.random_range(-bound..bound);
        }
        for b in &mut seg[b_off..b_off + *out_dim] {
            *b = 0.0;
        }
    }
}

/// Zero the final affine layer (weights and bias) of a segment.
pub fn zero_output_layer(spec: &MlpSpec, seg: &mut [f64]) {
    let (w_off, _) = *spec.layer_offsets().last().unwrap();
    for v in &mut seg[w_off..] {
        *v = 0.0;
    }
}

/// Batched tracked forward pass: `input` holds n rows of `spec.input`
/// values; the result holds n rows of `spec.output` values.
pub fn mlp_forward(
    tape: &mut Tape,
    params: &[f64],
    seg_off: usize,
    spec: &MlpSpec,
    input: Slab,
) -> Result<Slab> {
    if input.len() % spec.input != 0 {
        return Err(Error::InvalidArgument(format!(
            "input length {} is not a multiple of the input width {}",
            input.len(),
            spec.input
        )));
    }
    let dims = spec.layer_dims();
    let offs = spec.layer_offsets();
    let mut acts = input;
    for (l, ((in_dim, out_dim), (w_off, b_off))) in dims.iter().zip(&offs).enumerate() {
        let h = tape.matmul(
            params,
            seg_off + w_off,
            Some(seg_off + b_off),
            *in_dim,
            *out_dim,
            acts,
        );
        acts = if l + 1 < dims.len() { tape.elu_v(h) } else { h };
    }
    Ok(acts)
}

/// Forward pass of a scalar-output network together with its gradient with
/// respect to the input, both as tracked values. The gradient is assembled
/// from the layer chain rule, so differentiating through it yields exact
/// second-order terms.
pub fn mlp_forward_with_input_grad(
    tape: &mut Tape,
    params: &[f64],
    seg_off: usize,
    spec: &MlpSpec,
    input: Slab,
) -> Result<(Slab, Slab)> {
    if spec.output != 1 {
        return Err(Error::InvalidArgument(
            "input gradients require a scalar-output network".to_string(),
        ));
    }
    if input.len() % spec.input != 0 {
        return Err(Error::InvalidArgument(format!(
            "input length {} is not a multiple of the input width {}",
            input.len(),
            spec.input
        )));
    }
    let n = input.len() / spec.input;
    let dims = spec.layer_dims();
    let offs = spec.layer_offsets();
    let n_layers = dims.len();

    let mut acts = input;
    let mut pre_acts = Vec::with_capacity(n_layers - 1);
    for l in 0..n_layers - 1 {
        let (in_dim, out_dim) = dims[l];
        let (w_off, b_off) = offs[l];
        let h = tape.matmul(
            params,
            seg_off + w_off,
            Some(seg_off + b_off),
            in_dim,
            out_dim,
            acts,
        );
        pre_acts.push(h);
        acts = tape.elu_v(h);
    }
    let (in_last, _) = dims[n_layers - 1];
    let (w_last, b_last) = offs[n_layers - 1];
    let f = tape.matmul(params, seg_off + w_last, Some(seg_off + b_last), in_last, 1, acts);

    // Input gradient: W_1^T D_1 ... W_L^T D_L w_out, batched over rows.
    let w_out = tape.param_read(params, seg_off + w_last, in_last);
    let d_last = tape.elu_grad_v(pre_acts[n_layers - 2]);
    let mut g = tape.mul_row_broadcast(d_last, w_out, n);
    for l in (0..n_layers - 1).rev() {
        let (in_dim, out_dim) = dims[l];
        let (w_off, _) = offs[l];
        g = tape.matmul_t(params, seg_off + w_off, in_dim, out_dim, g);
        if l > 0 {
            let d = tape.elu_grad_v(pre_acts[l - 1]);
            g = tape.mul_v(g, d);
        }
    }
    Ok((f, g))
}
