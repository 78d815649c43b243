//! Differentiable SDF-based volume rendering: scene contraction, stratified
//! ray sampling, sigmoid-derived alpha compositing, and the rendering
//! losses (L1 colour, Eikonal regularizer).
//!
//! Rendering is batched: all sample points of a ray batch go through the
//! SDF and colour networks as one matrix, with the SDF spatial gradient
//! built as tracked values so it can feed both the Eikonal term and the
//! colour network's normal input.

use crate::autodiff::{
    mlp_forward, mlp_forward_with_input_grad, MlpSpec, Slab, Tape, Var,
};
use crate::error::{Error, Result};
use crate::se3::{norm3, scale3, Vec3};

/// Floor for the alpha denominator; Phi_s is positive but can underflow.
const PHI_FLOOR: f64 = 1e-300;

/// SDF network over contracted, positionally-encoded space, with a
/// learnable sharpness stored as log s in its own one-scalar segment.
#[derive(Debug, Clone)]
pub struct SdfField {
    pub spec: MlpSpec,
    pub l_pe: usize,
}

impl SdfField {
    pub fn new(hidden: Vec<usize>, l_pe: usize) -> Result<Self> {
        Ok(SdfField {
            spec: MlpSpec::new(3 + 6 * l_pe, hidden, 1)?,
            l_pe,
        })
    }

    /// Desk-scale default: 4 hidden layers of 64.
    pub fn desk() -> Self {
        SdfField::new(vec![64; 4], 4).unwrap()
    }

    /// Full-scale preset: 8 hidden layers of 256.
    pub fn paper() -> Self {
        SdfField::new(vec![256; 8], 4).unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    /// Initial log-sharpness so that s = 10.
    pub fn initial_log_sharpness() -> f64 {
        10.0f64.ln()
    }
}

/// Colour network: contracted position, view direction, and SDF gradient
/// (normal) in; RGB through a sigmoid out.
#[derive(Debug, Clone)]
pub struct ColourField {
    pub spec: MlpSpec,
}

impl ColourField {
    pub fn new(hidden: Vec<usize>) -> Result<Self> {
        Ok(ColourField {
            spec: MlpSpec::new(9, hidden, 3)?,
        })
    }

    /// Desk-scale default: 3 hidden layers of 64.
    pub fn desk() -> Self {
        ColourField::new(vec![64; 3]).unwrap()
    }

    /// Full-scale preset: 4 hidden layers of 256.
    pub fn paper() -> Self {
        ColourField::new(vec![256; 4]).unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }
}

/// Network handles plus parameter segment offsets, shared by every render
/// call of an iteration.
#[derive(Debug, Clone, Copy)]
pub struct RenderContext<'a> {
    pub sdf: &'a SdfField,
    pub colour: &'a ColourField,
    pub sdf_off: usize,
    pub sharp_off: usize,
    pub colour_off: usize,
}

/// A ray whose origin/direction live on the tape (so pose gradients flow),
/// with its supervision colour.
#[derive(Debug, Clone, Copy)]
pub struct TrackedRay {
    pub origin: [Var; 3],
    pub dir: [Var; 3],
    pub gt: [f64; 3],
}

/// Per-ray tracked render output; slabs are views into the batch tape.
#[derive(Debug)]
pub struct RenderResult {
    /// Sample depths, strictly increasing.
    pub depths: Vec<f64>,
    /// World-space sample point values.
    pub points: Vec<Vec3>,
    /// Opacity per sample.
    pub alphas: Vec<Var>,
    /// Transmittance per sample; starts at exactly 1.
    pub trans: Vec<Var>,
    /// Compositing weights `T_i * alpha_i`.
    pub weights: Vec<Var>,
    /// Per-sample RGB (n x 3).
    pub sample_colours: Slab,
    /// Composited ray colour.
    pub rendered: [Var; 3],
    /// SDF value per sample plus one extra lookahead sample.
    pub sdf_vals: Vec<Var>,
    /// Tracked SDF spatial gradient per sample (n x 3, contracted domain).
    pub sdf_grads: Slab,
    /// Supervision colour.
    pub gt: [f64; 3],
}

/// Radial scene contraction: identity inside the unit ball, norm < 2
/// everywhere.
pub fn contract(x: &Vec3) -> Vec3 {
    let n = norm3(x);
    if n <= 1.0 {
        *x
    } else {
        scale3(x, (2.0 - 1.0 / n) / n)
    }
}

/// Tracked contraction; the identity branch returns the same nodes.
/// `one` must be a node holding 1.0 (shared across points).
pub fn contract_tracked(tape: &mut Tape, p: [Var; 3], one: Var) -> [Var; 3] {
    let n_val = (tape.val(p[0]).powi(2) + tape.val(p[1]).powi(2) + tape.val(p[2]).powi(2)).sqrt();
    if n_val <= 1.0 {
        return p;
    }
    let s0 = tape.mul(p[0], p[0]);
    let s1 = tape.mul(p[1], p[1]);
    let s2 = tape.mul(p[2], p[2]);
    let s01 = tape.add(s0, s1);
    let nsq = tape.add(s01, s2);
    let n = tape.sqrt(nsq);
    let inv = tape.div(one, n);
    let two_inv = tape.mul_c(inv, 2.0);
    let inv_sq = tape.mul(inv, inv);
    let coef = tape.sub(two_inv, inv_sq);
    [
        tape.mul(p[0], coef),
        tape.mul(p[1], coef),
        tape.mul(p[2], coef),
    ]
}

/// One uniform draw per equal-width bin over `[near, far]`; strictly
/// increasing. `draw` supplies uniforms in [0, 1).
pub fn stratified_samples(
    near: f64,
    far: f64,
    n: usize,
    mut draw: impl FnMut() -> f64,
) -> Result<Vec<f64>> {
    if !(near >= 0.0 && near < far) || n < 2 {
        return Err(Error::InvalidArgument(format!(
            "invalid sampling range near={near} far={far} n={n}"
        )));
    }
    let width = (far - near) / n as f64;
    Ok((0..n)
        .map(|i| near + (i as f64 + draw()) * width)
        .collect())
}

pub fn sigmoid_value(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Opacity from two consecutive SDF samples:
/// `max((Phi_s(f_i) - Phi_s(f_next)) / Phi_s(f_i), 0)`, clamped to [0, 1].
pub fn neus_alpha(f_i: f64, f_next: f64, s: f64) -> Result<f64> {
    if !(s > 0.0) || !f_i.is_finite() || !f_next.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "alpha inputs must be finite with s > 0, got f_i={f_i} f_next={f_next} s={s}"
        )));
    }
    let phi_i = sigmoid_value(s * f_i);
    let phi_n = sigmoid_value(s * f_next);
    Ok(((phi_i - phi_n) / phi_i.max(PHI_FLOOR)).clamp(0.0, 1.0))
}

fn neus_alpha_tracked(tape: &mut Tape, phi_i: Var, phi_next: Var) -> Var {
    let num = tape.sub(phi_i, phi_next);
    let den = tape.max_c(phi_i, PHI_FLOOR);
    let frac = tape.div(num, den);
    let lo = tape.max_c(frac, 0.0);
    tape.min_c(lo, 1.0)
}

/// Front-to-back compositing of per-sample colours under alphas.
/// Returns (rendered RGB, transmittances, weights).
pub fn composite_ray(
    tape: &mut Tape,
    alphas: &[Var],
    sample_colours: Slab,
) -> ([Var; 3], Vec<Var>, Vec<Var>) {
    let n = alphas.len();
    debug_assert_eq!(sample_colours.len(), 3 * n);
    let mut trans = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    let mut t = tape.constant(1.0);
    let mut acc: [Option<Var>; 3] = [None, None, None];
    for (i, &alpha) in alphas.iter().enumerate() {
        trans.push(t);
        let w = tape.mul(t, alpha);
        weights.push(w);
        for c in 0..3 {
            let term = tape.mul(w, sample_colours.at(3 * i + c));
            acc[c] = Some(match acc[c] {
                None => term,
                Some(prev) => tape.add(prev, term),
            });
        }
        if i + 1 < n {
            let one_minus = tape.c_sub(1.0, alpha);
            t = tape.mul(t, one_minus);
        }
    }
    let zero = tape.constant(0.0);
    (
        [
            acc[0].unwrap_or(zero),
            acc[1].unwrap_or(zero),
            acc[2].unwrap_or(zero),
        ],
        trans,
        weights,
    )
}

/// Render a batch of rays sharing one sample count. Each ray's SDF is
/// evaluated at its samples plus one lookahead point; alphas come from
/// consecutive pairs, colours from the sample points.
pub fn render_rays(
    tape: &mut Tape,
    params: &[f64],
    ctx: &RenderContext,
    rays: &[TrackedRay],
    samples: &[Vec<f64>],
) -> Result<Vec<RenderResult>> {
    let m = rays.len();
    if m == 0 || samples.len() != m {
        return Err(Error::InvalidArgument(format!(
            "ray batch ({m} rays) and sample lists ({}) must match and be non-empty",
            samples.len()
        )));
    }
    let n = samples[0].len();
    if n == 0 {
        return Err(Error::InvalidArgument("empty sample list".to_string()));
    }
    for (r, s) in samples.iter().enumerate() {
        if s.len() != n {
            return Err(Error::InvalidArgument(
                "all rays in a batch share one sample count".to_string(),
            ));
        }
        if !s.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidArgument(format!(
                "samples of ray {r} are not strictly increasing"
            )));
        }
        let d = &rays[r].dir;
        let dn = (tape.val(d[0]).powi(2) + tape.val(d[1]).powi(2) + tape.val(d[2]).powi(2)).sqrt();
        if (dn - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "ray {r} direction norm {dn} is not 1"
            )));
        }
    }
    let n1 = n + 1;
    let one = tape.constant(1.0);

    // Tracked world points, their contraction, and gather indices.
    let mut points = Vec::with_capacity(m * n1);
    let mut gather_idx = Vec::with_capacity(m * n1 * 3);
    for (ray, depths) in rays.iter().zip(samples) {
        let lookahead = if n >= 2 {
            depths[n - 1] + (depths[n - 1] - depths[n - 2])
        } else {
            depths[0] + 1e-2
        };
        for i in 0..n1 {
            let t = if i < n { depths[i] } else { lookahead };
            let mut p = [Var(0); 3];
            for c in 0..3 {
                let step = tape.mul_c(ray.dir[c], t);
                p[c] = tape.add(step, ray.origin[c]);
            }
            let cp = contract_tracked(tape, p, one);
            points.push((p, cp));
            gather_idx.extend_from_slice(&[cp[0].0, cp[1].0, cp[2].0]);
        }
    }
    let contracted = tape.gather(gather_idx);
    let enc = tape.pos_enc(contracted, ctx.sdf.l_pe);
    let (f, g_enc) =
        mlp_forward_with_input_grad(tape, params, ctx.sdf_off, &ctx.sdf.spec, enc)?;
    let grads = tape.pos_enc_pullback(enc, g_enc, ctx.sdf.l_pe);

    let log_s = tape.param_read(params, ctx.sharp_off, 1);
    let s = tape.exp(log_s.at(0));

    // Alphas per ray from consecutive SDF samples.
    let mut ray_alphas = Vec::with_capacity(m);
    for r in 0..m {
        let mut alphas = Vec::with_capacity(n);
        let sf0 = tape.mul(s, f.at(r * n1));
        let mut phi_prev = tape.sigmoid(sf0);
        for i in 0..n {
            let sfn = tape.mul(s, f.at(r * n1 + i + 1));
            let phi_next = tape.sigmoid(sfn);
            alphas.push(neus_alpha_tracked(tape, phi_prev, phi_next));
            phi_prev = phi_next;
        }
        ray_alphas.push(alphas);
    }

    // Colour network over the n sample points of every ray.
    let mut colour_idx = Vec::with_capacity(m * n * 9);
    for (r, ray) in rays.iter().enumerate() {
        for i in 0..n {
            let row = r * n1 + i;
            for c in 0..3 {
                colour_idx.push(contracted.at(row * 3 + c).0);
            }
            for c in 0..3 {
                colour_idx.push(ray.dir[c].0);
            }
            for c in 0..3 {
                colour_idx.push(grads.at(row * 3 + c).0);
            }
        }
    }
    let colour_in = tape.gather(colour_idx);
    let raw_rgb = mlp_forward(tape, params, ctx.colour_off, &ctx.colour.spec, colour_in)?;
    let rgb = tape.sigmoid_v(raw_rgb);

    // Assemble per-ray results.
    let mut results = Vec::with_capacity(m);
    for (r, (ray, depths)) in rays.iter().zip(samples).enumerate() {
        let sample_colours = Slab {
            start: rgb.start + (r * n * 3) as u32,
            len: (n * 3) as u32,
        };
        let (rendered, trans, weights) =
            composite_ray(tape, &ray_alphas[r], sample_colours);
        let sdf_grads = Slab {
            start: grads.start + (r * n1 * 3) as u32,
            len: (n * 3) as u32,
        };
        let sdf_vals = (0..n1).map(|i| f.at(r * n1 + i)).collect();
        let pts = (0..n)
            .map(|i| {
                let (p, _) = &points[r * n1 + i];
                [tape.val(p[0]), tape.val(p[1]), tape.val(p[2])]
            })
            .collect();
        results.push(RenderResult {
            depths: depths.clone(),
            points: pts,
            alphas: std::mem::take(&mut ray_alphas[r]),
            trans,
            weights,
            sample_colours,
            rendered,
            sdf_vals,
            sdf_grads,
            gt: ray.gt,
        });
    }
    Ok(results)
}

/// Sum over rays of the L1 colour error (no mean; the caller normalizes).
pub fn colour_l1_sum(tape: &mut Tape, results: &[RenderResult]) -> Result<Var> {
    if results.is_empty() {
        return Err(Error::InvalidArgument("empty ray batch".to_string()));
    }
    let mut acc: Option<Var> = None;
    for res in results {
        for c in 0..3 {
            let d = tape.add_c(res.rendered[c], -res.gt[c]);
            let a = tape.abs(d);
            acc = Some(match acc {
                None => a,
                Some(prev) => tape.add(prev, a),
            });
        }
    }
    Ok(acc.unwrap())
}

/// Mean L1 colour loss over a batch.
pub fn colour_loss(tape: &mut Tape, results: &[RenderResult]) -> Result<Var> {
    let sum = colour_l1_sum(tape, results)?;
    Ok(tape.mul_c(sum, 1.0 / results.len() as f64))
}

/// Sum over all sample points of `(||grad f|| - 1)^2` (no mean).
pub fn eikonal_sq_sum(tape: &mut Tape, results: &[RenderResult]) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for res in results {
        let n = res.sdf_grads.len() / 3;
        for i in 0..n {
            let row = Slab {
                start: res.sdf_grads.start + (i * 3) as u32,
                len: 3,
            };
            let sq = tape.dot_v(row, row);
            let norm = tape.sqrt(sq);
            let dev = tape.add_c(norm, -1.0);
            let term = tape.mul(dev, dev);
            acc = Some(match acc {
                None => term,
                Some(prev) => tape.add(prev, term),
            });
        }
    }
    acc.ok_or_else(|| Error::InvalidArgument("no gradient samples".to_string()))
}

/// Eikonal regularizer: mean of `(||grad f|| - 1)^2` over all samples.
pub fn eikonal_loss(tape: &mut Tape, results: &[RenderResult]) -> Result<Var> {
    let total: usize = results.iter().map(|r| r.sdf_grads.len() / 3).sum();
    let sum = eikonal_sq_sum(tape, results)?;
    Ok(tape.mul_c(sum, 1.0 / total as f64))
}

/// Standalone Eikonal mean over explicit gradient vectors (3 scalars each).
pub fn eikonal_loss_of_grads(tape: &mut Tape, grads: &[[Var; 3]]) -> Result<Var> {
    if grads.is_empty() {
        return Err(Error::InvalidArgument("no gradient samples".to_string()));
    }
    let mut acc: Option<Var> = None;
    for g in grads {
        let s0 = tape.mul(g[0], g[0]);
        let s1 = tape.mul(g[1], g[1]);
        let s2 = tape.mul(g[2], g[2]);
        let s01 = tape.add(s0, s1);
        let sq = tape.add(s01, s2);
        let norm = tape.sqrt(sq);
        let dev = tape.add_c(norm, -1.0);
        let term = tape.mul(dev, dev);
        acc = Some(match acc {
            None => term,
            Some(prev) => tape.add(prev, term),
        });
    }
    let sum = acc.unwrap();
    Ok(tape.mul_c(sum, 1.0 / grads.len() as f64))
}

/// Rendering loss `L_colour + lambda * L_reg`.
pub fn nsr_loss(tape: &mut Tape, colour_l: Var, eikonal_l: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "lambda must be non-negative, got {lambda}"
        )));
    }
    let reg = tape.mul_c(eikonal_l, lambda);
    Ok(tape.add(colour_l, reg))
}

/// Render a full image with the learned fields at a fixed pose: forward
/// passes only, midpoint depth samples, parallel over pixel chunks.
pub fn render_learned_image(
    params: &[f64],
    ctx: &RenderContext,
    pose: &crate::se3::Pose6,
    k: &crate::se3::Intrinsics,
    n_samples: usize,
    near: f64,
    far: f64,
) -> Result<crate::image::ImageF64> {
    use rayon::prelude::*;
    let samples = stratified_samples(near, far, n_samples, || 0.5)?;
    let pixels: Vec<(u32, u32)> = (0..k.height)
        .flat_map(|v| (0..k.width).map(move |u| (u, v)))
        .collect();
    let rot = pose.rotation();
    let rows: Result<Vec<Vec<[f64; 3]>>> = pixels
        .par_chunks(64)
        .map(|chunk| {
            let mut tape = Tape::new();
            let mut rays = Vec::with_capacity(chunk.len());
            let mut sample_lists = Vec::with_capacity(chunk.len());
            for (u, v) in chunk {
                let dir_cam = k.pixel_ray(*u as f64 + 0.5, *v as f64 + 0.5);
                let dir = rot.mul_vec(&dir_cam);
                rays.push(TrackedRay {
                    origin: [
                        tape.constant(pose.t[0]),
                        tape.constant(pose.t[1]),
                        tape.constant(pose.t[2]),
                    ],
                    dir: [
                        tape.constant(dir[0]),
                        tape.constant(dir[1]),
                        tape.constant(dir[2]),
                    ],
                    gt: [0.0; 3],
                });
                sample_lists.push(samples.clone());
            }
            let results = render_rays(&mut tape, params, ctx, &rays, &sample_lists)?;
            Ok(results
                .iter()
                .map(|r| r.rendered.map(|c| tape.val(c)))
                .collect())
        })
        .collect();
    let mut img = crate::image::ImageF64::new(k.width, k.height);
    for (chunk, colours) in pixels.chunks(64).zip(rows?) {
        for ((u, v), rgb) in chunk.iter().zip(colours) {
            img.set_pixel(*u, *v, rgb);
        }
    }
    Ok(img)
}
