//! The pose residual field: one MLP shared across every frame that maps
//! (normalized frame index, initial 6D pose) to a scaled 6D pose residual,
//! plus the per-frame pose-parameter bank used as the ablation baseline.

use crate::autodiff::{
    init_glorot, mlp_forward, zero_output_layer, MlpSpec, Slab, Tape,
};
use crate::error::{Error, Result};
use crate::se3::Pose6;
use crate::tracked::{canonicalize_tracked, TrackedPose};
use rand::Rng;

pub const PORF_SEGMENT: &str = "porf";
pub const BANK_SEGMENT: &str = "pose_bank";

/// Shared residual-field network: 7 inputs (normalized frame index + 6D
/// initial pose), 6 outputs scaled by a fixed small factor `alpha`.
#[derive(Debug, Clone)]
pub struct PorfNetwork {
    pub spec: MlpSpec,
    pub alpha: f64,
    pub frames: usize,
    /// Scene normalization scale dividing the translation inputs (1 for
    /// unit-sphere-normalized scenes).
    pub scene_scale: f64,
}

impl PorfNetwork {
    pub fn new(frames: usize, hidden: Vec<usize>, alpha: f64) -> Result<Self> {
        if frames < 2 {
            return Err(Error::InvalidArgument(format!(
                "residual field needs at least 2 frames, got {frames}"
            )));
        }
        if !(alpha > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha must be positive, got {alpha}"
            )));
        }
        Ok(PorfNetwork {
            spec: MlpSpec::new(7, hidden, 6)?,
            alpha,
            frames,
            scene_scale: 1.0,
        })
    }

    /// Paper-shaped default: two hidden layers of 256.
    pub fn with_default_hidden(frames: usize, alpha: f64) -> Result<Self> {
        PorfNetwork::new(frames, vec![256, 256], alpha)
    }

    pub fn param_count(&self) -> usize {
        self.spec.param_count()
    }

    /// Glorot hidden layers, zeroed output layer: the refined pose starts
    /// exactly at the initial pose.
    pub fn init_params(&self, seg: &mut [f64], rng: &mut impl Rng) {
        init_glorot(&self.spec, seg, rng);
        zero_output_layer(&self.spec, seg);
    }
}

/// The 7D network input for one frame:
/// `[i/(N-1), r, t / scene_scale]`.
pub fn porf_input(
    frame_index: usize,
    initial: &Pose6,
    frames: usize,
    scene_scale: f64,
) -> Result<[f64; 7]> {
    if frames < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 frames, got {frames}"
        )));
    }
    if frame_index >= frames {
        return Err(Error::InvalidArgument(format!(
            "frame index {frame_index} out of range 0..{frames}"
        )));
    }
    Ok([
        frame_index as f64 / (frames - 1) as f64,
        initial.r[0],
        initial.r[1],
        initial.r[2],
        initial.t[0] / scene_scale,
        initial.t[1] / scene_scale,
        initial.t[2] / scene_scale,
    ])
}

/// Tracked 6D residual for a frame: MLP output times `alpha`.
pub fn porf_residual(
    tape: &mut Tape,
    params: &[f64],
    seg_off: usize,
    net: &PorfNetwork,
    frame_index: usize,
    initial: &Pose6,
) -> Result<Slab> {
    let input = porf_input(frame_index, initial, net.frames, net.scene_scale)?;
    let x = tape.const_slice(&input);
    let raw = mlp_forward(tape, params, seg_off, &net.spec, x)?;
    Ok(tape.scale_v(raw, net.alpha))
}

fn compose_tracked(tape: &mut Tape, initial: &Pose6, residual: Slab) -> TrackedPose {
    debug_assert_eq!(residual.len(), 6);
    let r = [
        tape.add_c(residual.at(0), initial.r[0]),
        tape.add_c(residual.at(1), initial.r[1]),
        tape.add_c(residual.at(2), initial.r[2]),
    ];
    let t = [
        tape.add_c(residual.at(3), initial.t[0]),
        tape.add_c(residual.at(4), initial.t[1]),
        tape.add_c(residual.at(5), initial.t[2]),
    ];
    TrackedPose {
        r: canonicalize_tracked(tape, r),
        t,
    }
}

/// Refined pose of a frame through the shared residual field.
pub fn refined_pose(
    tape: &mut Tape,
    params: &[f64],
    seg_off: usize,
    net: &PorfNetwork,
    frame_index: usize,
    initial: &Pose6,
) -> Result<TrackedPose> {
    let residual = porf_residual(tape, params, seg_off, net, frame_index, initial)?;
    Ok(compose_tracked(tape, initial, residual))
}

/// Per-frame trainable residuals, one independent 6-vector per frame.
#[derive(Debug, Clone)]
pub struct PoseBank {
    pub frames: usize,
}

impl PoseBank {
    pub fn new(frames: usize) -> Result<Self> {
        if frames == 0 {
            return Err(Error::InvalidArgument("bank needs at least 1 frame".into()));
        }
        Ok(PoseBank { frames })
    }

    pub fn param_count(&self) -> usize {
        6 * self.frames
    }
}

/// Refined pose of a frame through its own bank entry (no sharing).
pub fn bank_refined_pose(
    tape: &mut Tape,
    params: &[f64],
    seg_off: usize,
    bank: &PoseBank,
    frame_index: usize,
    initial: &Pose6,
) -> Result<TrackedPose> {
    if frame_index >= bank.frames {
        return Err(Error::InvalidArgument(format!(
            "frame index {frame_index} out of range 0..{}",
            bank.frames
        )));
    }
    let residual = tape.param_read(params, seg_off + 6 * frame_index, 6);
    Ok(compose_tracked(tape, initial, residual))
}
